"""Training runs, evaluation and the seeded ablation grid."""

from __future__ import annotations

import enum
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .domain import Dataset, SampleRole
from .losses import LossPlan, NegativePlan, combined_loss, hybrid_terms
from .metrics import MetricsReport, N_OCTILES, evaluate_scores, octile_breakdown
from .model import TowerModel, apply_gradients, backward, forward
from .sampler import add_inbatch_negatives, build_listwise_batch

ALL_ROLES = tuple(SampleRole)


class TrainingError(RuntimeError):
    def __init__(self, batch_id: int, detail: str):
        super().__init__(f"batch {batch_id}: {detail}")
        self.batch_id = batch_id


class Variant(str, enum.Enum):
    BASE = "Base"
    BASE_LISTNET = "BaseListNet"
    BASE_LISTMLE = "BaseListMLE"
    WO_UP = "HCCP_wo_Up"
    WO_PRC = "HCCP_wo_PRC"
    WO_NEG = "HCCP_wo_Neg"
    WO_MARGIN = "HCCP_wo_Margin"
    FULL = "HCCP_full"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        for v in cls:
            if name in (v.value, v.name):
                return v
        raise ValueError(f"unknown variant '{name}'; choose from {[v.value for v in cls]}")

    @property
    def plan(self) -> LossPlan:
        return _PLANS[self]

    @property
    def roles(self) -> tuple:
        """Sample roles the variant's losses read."""
        plan = self.plan
        roles = {SampleRole.N1_IMPRESSION}
        if plan.global_consistency:
            roles.add(SampleRole.N2_RANKING_SEQ)
        neg = plan.negatives
        if neg is not None and neg.hard:
            roles |= {SampleRole.N2_RANKING_SEQ, SampleRole.N3_PRERANK_TAIL}
        if neg is not None and neg.easy:
            roles |= {SampleRole.N4_INBATCH, SampleRole.N5_POOL}
        return tuple(sorted(roles))


_CONSISTENCY = dict(calibration=True, local_consistency=True, global_consistency=True)
_PLANS = {
    Variant.BASE: LossPlan(calibration=True),
    Variant.BASE_LISTNET: LossPlan(calibration=True, listnet=True),
    Variant.BASE_LISTMLE: LossPlan(calibration=True, local_consistency=True),
    Variant.WO_UP: LossPlan(**_CONSISTENCY),
    Variant.WO_PRC: LossPlan(**_CONSISTENCY, negatives=NegativePlan(hard=False, easy=True, margin=False,
                                                                      weighted_path=False)),
    Variant.WO_NEG: LossPlan(**_CONSISTENCY, negatives=NegativePlan(hard=True, easy=False, margin=False)),
    Variant.WO_MARGIN: LossPlan(**_CONSISTENCY, negatives=NegativePlan(margin=False)),
    Variant.FULL: LossPlan(**_CONSISTENCY, negatives=NegativePlan()),
}


def code_version() -> str:
    """Digest of the package sources, so manifests pin the exact code."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    variant: str
    seed: int
    config: dict
    train_fingerprint: str
    eval_fingerprint: Optional[str] = None
    code_version: str = field(default_factory=code_version)
    steps: int = 0
    wall_time_s: float = 0.0
    loss_first: Optional[float] = None
    loss_last: Optional[float] = None
    epoch_losses: list = field(default_factory=list)
    loss_calls: dict = field(default_factory=dict)
    final_beta: Optional[float] = None
    metrics: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class TrainResult:
    model: TowerModel
    manifest: RunManifest
    loss_history: np.ndarray


def clicked_requests(dataset: Dataset) -> Dataset:
    return dataset.filter(lambda log: bool(np.any(log.click == 1)))


def train(variant: Variant, dataset: Dataset, config: ExperimentConfig, seed: int,
          cross_fn: Optional[Callable] = None, audit: Optional[list] = None) -> TrainResult:
    """SGD over shuffled request batches with the variant's loss terms.

    Batches are drawn identically for every variant under the same seed;
    rows of roles the variant does not use are then dropped. ``audit``, if
    given, receives the name of every loss term evaluated.
    """
    variant = Variant.parse(variant) if isinstance(variant, str) else variant
    if config.data.clicked_only:
        dataset = clicked_requests(dataset)
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    started = time.perf_counter()
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    model = TowerModel.init(dataset.n_users, dataset.n_items, config.model,
                            int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(data_seq)
    plan = variant.plan
    roles = np.array([int(r) for r in variant.roles])
    calls: list = [] if audit is None else audit
    losses: list = []
    epoch_losses = []
    lr = config.model.lr
    bs = config.train.batch_size
    step = 0
    for _epoch in range(config.train.epochs):
        order = rng.permutation(len(dataset))
        epoch_sum, n_batches = 0.0, 0
        for start in range(0, len(order), bs):
            logs = [dataset.logs[i] for i in order[start:start + bs]]
            batch = build_listwise_batch(logs, config.sampler, rng, dataset.n_items, cross_fn)
            batch = add_inbatch_negatives(batch, config.sampler.inbatch_rate, rng)
            batch = batch.select(np.flatnonzero(np.isin(batch.role, roles)))
            scored = forward(model, batch)
            terms = hybrid_terms(batch, scored, plan, config.loss, step, calls)
            out = combined_loss(terms, config.loss)
            if not np.isfinite(out.value):
                raise TrainingError(step, f"non-finite loss {out.value}")
            grads = backward(model, batch, scored, out.grads)
            try:
                apply_gradients(model, grads, lr)
            except FloatingPointError as exc:
                raise TrainingError(step, str(exc)) from exc
            losses.append(out.value)
            epoch_sum += out.value
            n_batches += 1
            step += 1
        epoch_losses.append(epoch_sum / max(n_batches, 1))
        lr *= config.train.lr_decay

    names, counts = np.unique(np.array(calls, dtype=str), return_counts=True)
    manifest = RunManifest(
        variant=variant.value, seed=int(seed), config=config.to_dict(),
        train_fingerprint=dataset.fingerprint(), steps=step,
        wall_time_s=round(time.perf_counter() - started, 3),
        loss_first=losses[0] if losses else None, loss_last=losses[-1] if losses else None,
        epoch_losses=epoch_losses, loss_calls={str(n): int(c) for n, c in zip(names, counts)},
        final_beta=config.loss.beta(step),
    )
    return TrainResult(model, manifest, np.array(losses))


def model_score_fn(model: TowerModel, cross_fn: Optional[Callable] = None) -> Callable:
    """Pre-ranking score used for evaluation: the shared (pre-head) score."""
    w = model.config.cross_weight

    def score(user, items):
        s = model.item_emb[items] @ model.user_emb[user]
        if cross_fn is not None and w:
            s = s + w * cross_fn(np.full(items.size, user), items)
        return s

    return score


def evaluate(model, dataset: Dataset, config: ExperimentConfig, cross_fn: Optional[Callable] = None,
             ks: Optional[Sequence[int]] = None) -> MetricsReport:
    """Metrics of a trained model (or any object with ``score(user, items)``)."""
    if isinstance(model, TowerModel):
        if dataset.n_items > model.n_items or dataset.n_users > model.n_users:
            raise IndexError(f"eval ids ({dataset.n_users} users, {dataset.n_items} items) "
                             f"exceed model tables ({model.n_users}, {model.n_items})")
        score_fn = model_score_fn(model, cross_fn)
    else:
        score_fn = model.score
    ec = config.eval
    return evaluate_scores(dataset, score_fn, ks or ec.ks, ec.consistency_ks, item_ks=(ec.tail_k,))


class AffinityScorer:
    """Cheat scorer ranking by the world's true affinity (an upper-bound oracle)."""

    def __init__(self, world):
        self.world = world

    def score(self, user, items):
        return self.world.affinity(user, items)


class RandomScorer:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def score(self, user, items):
        return self.rng.random(len(items))


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: MetricsReport
    manifest: RunManifest


@dataclass
class AblationReport:
    runs: list
    train_frequencies: np.ndarray
    errors: list = field(default_factory=list)

    def value(self, variant: str, seed: int, metric: str, k: int) -> float:
        for run in self.runs:
            if run.variant == variant and run.seed == seed:
                return run.report.get(metric, k)
        raise KeyError((variant, seed))

    @property
    def variants(self) -> list:
        return list(dict.fromkeys(r.variant for r in self.runs))

    @property
    def seeds(self) -> list:
        return sorted({r.seed for r in self.runs})

    def per_seed(self, metric: str, k: int) -> dict:
        return {v: [self.value(v, s, metric, k) for s in self.seeds] for v in self.variants}

    def octile_deltas(self, variant: str, baseline: str, metric: str, k: int) -> list:
        """Per seed: mean per-item hit-rate gain of ``variant`` over ``baseline`` by octile."""
        out = []
        for s in self.seeds:
            a = self._run(variant, s).report.item_hit_rates(metric, k)
            b = self._run(baseline, s).report.item_hit_rates(metric, k)
            out.append(octile_breakdown(self.train_frequencies, {i: a[i] - b[i] for i in a}))
        return out

    def _run(self, variant, seed) -> AblationRun:
        return next(r for r in self.runs if r.variant == variant and r.seed == seed)

    def to_dict(self) -> dict:
        return {
            "runs": [{"variant": r.variant, "seed": r.seed, "metrics": r.report.to_dict()} for r in self.runs],
            "errors": self.errors,
        }

    def table(self, metrics: Sequence[str], ks: Sequence[int]) -> str:
        """Metric x K x variant, per-seed values followed by the mean."""
        lines = []
        seeds = self.seeds
        head = f"{'metric':<7}{'K':>6}  {'variant':<16}" + "".join(f"{'s' + str(s):>9}" for s in seeds) + f"{'mean':>9}"
        lines.append(head)
        for m in metrics:
            for k in ks:
                for v in self.variants:
                    vals = [self.value(v, s, m, k) for s in seeds]
                    cells = "".join(f"{x:>9.4f}" if x is not None else f"{'-':>9}" for x in vals)
                    finite = [x for x in vals if x is not None]
                    mean = f"{np.mean(finite):>9.4f}" if finite else f"{'-':>9}"
                    lines.append(f"{m:<7}{k:>6}  {v:<16}{cells}{mean}")
        return "\n".join(lines)


class AblationError(RuntimeError):
    def __init__(self, message: str, partial: AblationReport):
        super().__init__(message)
        self.partial = partial


def run_ablation(variants: Sequence, config: ExperimentConfig, seeds: Sequence[int], train_data: Dataset,
                 eval_data: Dataset, cross_fn: Optional[Callable] = None,
                 on_run: Optional[Callable] = None) -> AblationReport:
    """Train and evaluate every (variant, seed) pair on the same datasets."""
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    variants = [Variant.parse(v) if isinstance(v, str) else v for v in variants]
    freq = (clicked_requests(train_data) if config.data.clicked_only else train_data).frequencies
    report = AblationReport([], freq)
    eval_fp = eval_data.fingerprint()
    for seed in seeds:
        for v in variants:
            try:
                result = train(v, train_data, config, seed, cross_fn)
                metrics = evaluate(result.model, eval_data, config, cross_fn)
            except Exception as exc:
                report.errors.append({"variant": v.value, "seed": int(seed), "error": repr(exc)})
                raise AblationError(f"{v.value} seed {seed} failed: {exc}", report) from exc
            result.manifest.eval_fingerprint = eval_fp
            result.manifest.metrics = metrics.to_dict()
            run = AblationRun(v.value, int(seed), metrics, result.manifest)
            report.runs.append(run)
            if on_run is not None:
                on_run(run)
    return report


def octile_summary(deltas: list) -> list:
    """Mean across seeds for each octile (None where every seed is empty)."""
    out = []
    for o in range(N_OCTILES):
        vals = [d[o] for d in deltas if d[o] is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out

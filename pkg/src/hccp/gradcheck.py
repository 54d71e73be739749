"""Central finite-difference checks of every analytic loss gradient.

A suite draws random inputs, perturbs each coordinate by +/- eps and
compares the numeric slope with the analytic gradient. The error of one
case is max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf), a
norm-relative error that stays meaningful when single entries are ~0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import losses as L
from .cascade_sim import SimConfig, generate_dataset, generate_world
from .model import ModelConfig, ScoredBatch, TowerModel, backward, forward
from .sampler import SamplerConfig, add_inbatch_negatives, build_listwise_batch

EPS = 1e-6
TOLERANCE = 1e-5
DEFAULT_CASES = 100


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22}{self.cases:>6}{self.worst_error:>12.2e}{self.seconds:>9.2f}s  {status}"


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = EPS,
                     coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``fn`` at ``x``; only ``coords`` (flat indices) if given."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric) -> float:
    a = np.concatenate([np.ravel(v) for v in analytic]) if isinstance(analytic, list) else np.ravel(analytic)
    n = np.concatenate([np.ravel(v) for v in numeric]) if isinstance(numeric, list) else np.ravel(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def _check_channels(value_fn, inputs: dict, grads: dict, corrupt: bool, coords_per: Optional[int] = None,
                    rng=None) -> float:
    """Finite-difference every named input of ``value_fn(**inputs)``."""
    a_all, n_all = [], []
    for name, x in inputs.items():
        x = np.asarray(x, dtype=float)

        def f(z, name=name):
            return value_fn(**{**inputs, name: z})

        coords = None
        if coords_per is not None and x.size > coords_per:
            coords = rng.choice(x.size, size=coords_per, replace=False)
        num = numeric_gradient(f, x, coords=coords)
        ana = np.asarray(grads.get(name, np.zeros_like(x)), dtype=float)
        if coords is not None:
            num, ana = num.reshape(-1)[coords], ana.reshape(-1)[coords]
        if corrupt:
            ana = ana * 1.01 + 1e-3
        a_all.append(ana)
        n_all.append(num)
    return relative_error(a_all, n_all)


# ---------------------------------------------------------------- suites


def _case_bce(rng, corrupt):
    n = int(rng.integers(1, 30))
    y = rng.normal(0, 3, n)
    lab = rng.integers(0, 2, n).astype(float)
    out = L.bce_calibration(y, lab)
    return _check_channels(lambda logits: L.bce_calibration(logits, lab).value, {"logits": y},
                           out.grads, corrupt)


def _case_bce_prob(rng, corrupt):
    n = int(rng.integers(1, 30))
    s = rng.uniform(0.02, 0.98, n)
    lab = rng.integers(0, 2, n).astype(float)
    out = L.bce_on_probabilities(s, lab)
    return _check_channels(lambda scores: L.bce_on_probabilities(scores, lab).value, {"scores": s},
                           out.grads, corrupt)


def _case_listmle(rng, corrupt):
    b, k = int(rng.integers(1, 5)), int(rng.integers(1, 12))
    y = rng.normal(0, 2, (b, k))
    lengths = rng.integers(0, k + 1, b)
    valid = np.arange(k)[None, :] < lengths[:, None]
    out = L.listmle_padded(y, valid)
    return _check_channels(lambda scores: L.listmle_padded(scores, valid).value, {"scores": y},
                           out.grads, corrupt)


def _case_listnet(rng, corrupt):
    b, k = int(rng.integers(1, 5)), int(rng.integers(1, 12))
    y = rng.normal(0, 2, (b, k))
    rel = rng.integers(0, 2, (b, k)).astype(float)
    valid = rng.random((b, k)) < 0.8
    out = L.listnet_padded(y, rel, valid)
    return _check_channels(lambda scores: L.listnet_padded(scores, rel, valid).value, {"scores": y},
                           out.grads, corrupt)


def _case_infonce(rng, corrupt):
    p = rng.normal(0, 1, int(rng.integers(1, 5)))
    n = rng.normal(0, 1, int(rng.integers(0, 10)))
    tau = float(rng.uniform(0.1, 2.0))
    out = L.infonce(p, n, tau)
    return _check_channels(lambda pos, neg: L.infonce(pos, neg, tau).value, {"pos": p, "neg": n},
                           out.grads, corrupt)


def _case_margin(rng, corrupt):
    b, k = int(rng.integers(1, 4)), int(rng.integers(2, 14))
    u = rng.normal(0, 1, (b, 1, 4))
    i = rng.normal(0, 1, (b, k, 4))
    logits = np.sum(u * i, axis=2)
    v = np.linalg.norm(u, axis=2) * np.linalg.norm(i, axis=2)
    kind = rng.integers(0, 4, (b, k))  # 0 pos, 1 hard, 2 easy, 3 padding
    pm, hm, em = kind == 0, kind == 1, kind == 2
    margin, tau = float(rng.uniform(0, 1)), float(rng.uniform(0.2, 1.5))
    beta = float(rng.choice([0.0, rng.uniform(0, 5), 9999.0]))

    def value(logits, v):
        return L.margin_infonce(logits, v, pm, hm, em, margin, tau, beta).value

    out = L.margin_infonce(logits, v, pm, hm, em, margin, tau, beta)
    return _check_channels(value, {"logits": logits, "v": v}, out.grads, corrupt)


class _TinyWorld:
    """Small simulated world for batch-level checks, built once per suite run."""

    def __init__(self, seed: int):
        self.world = generate_world(12, 150, 3, seed)
        self.sim = SimConfig(n_retrieved=40, n_to_ranking=12, n_exposed=4, click_midpoint=0.3,
                             purchase_midpoint=0.8, feedback_steepness=2.0)
        self.data = generate_dataset(self.world, self.sim, 40, seed + 1)
        self.sampler = SamplerConfig(target_prerank_size=4, pool_negatives=3, inbatch_rate=0.3)

    def batch(self, rng):
        idx = rng.choice(len(self.data), size=int(rng.integers(2, 4)), replace=False)
        logs = [self.data.logs[i] for i in idx]
        b = build_listwise_batch(logs, self.sampler, rng, self.world.n_items, self.world.cross_score)
        return add_inbatch_negatives(b, self.sampler.inbatch_rate, rng)


def _random_scored(rng, n):
    dot = rng.normal(0, 1, n)
    v = np.abs(dot) + rng.uniform(0.1, 2.0, n)
    heads = {t: rng.normal(0, 1.5, n) for t in ("click", "purchase", "global")}
    return dot, v, rng.normal(0, 1, n), heads


def _scored(dot, v, score, click, purchase, glob) -> ScoredBatch:
    # u_norm * i_norm must equal v; split it as v and 1.
    return ScoredBatch(dot, v, np.ones_like(v), dot / (v + 1e-10), score,
                       {"click": click, "purchase": purchase, "global": glob})


def _random_loss_config(rng) -> L.LossConfig:
    return L.LossConfig(
        lambda_global=float(rng.uniform(0, 1)),
        lambda_task={"click": float(rng.uniform(0, 1)), "purchase": float(rng.uniform(0, 1))},
        alpha=float(rng.uniform(0, 1)), neg_weight=float(rng.uniform(0, 1)),
        margin=float(rng.uniform(0, 1)), tau=float(rng.uniform(0.2, 1.0)),
        beta0=float(rng.choice([0.0, 2.0, 9999.0])), beta_decay=0.9,
    )


def _batch_case(term_fn, channels):
    def case(rng, corrupt, tiny):
        batch = tiny.batch(rng)
        dot, v, score, heads = _random_scored(rng, len(batch))
        cfg = _random_loss_config(rng)
        step = int(rng.integers(0, 20))
        base = {"dot": dot, "v": v, "score": score, "click": heads["click"],
                "purchase": heads["purchase"], "glob": heads["global"]}

        def value(**kw):
            return term_fn(batch, _scored(**{**base, **kw}), cfg, step).value

        out = term_fn(batch, _scored(**base), cfg, step)
        grads = {("glob" if k == "global" else k): g for k, g in out.grads.items()}
        inputs = {c: base[c] for c in channels}
        return _check_channels(value, inputs, grads, corrupt, coords_per=8, rng=rng)
    return case


def _combined(batch, scored, cfg, step):
    plan = L.LossPlan(calibration=True, local_consistency=True, global_consistency=True,
                      negatives=L.NegativePlan())
    return L.combined_loss(L.hybrid_terms(batch, scored, plan, cfg, step), cfg)


def _case_model_chain(rng, corrupt, tiny):
    batch = tiny.batch(rng)
    model = TowerModel.init(tiny.world.n_users, tiny.world.n_items,
                            ModelConfig(dim=3, cross_weight=float(rng.uniform(0, 0.5))), int(rng.integers(1 << 30)))
    model.head_w[:] = rng.uniform(0.5, 1.5, 3)
    model.head_b[:] = rng.normal(0, 0.3, 3)
    cfg = _random_loss_config(rng)

    def loss_of(m):
        return _combined(batch, forward(m, batch), cfg, 3)

    out = loss_of(model)
    grads = backward(model, batch, forward(model, batch), out.grads)
    users, items = np.unique(batch.user), np.unique(batch.item)
    inputs = {"user_emb": model.user_emb[users], "item_emb": model.item_emb[items],
              "head_w": model.head_w, "head_b": model.head_b}
    ana = {"user_emb": grads.user_emb[users], "item_emb": grads.item_emb[items],
           "head_w": grads.head_w, "head_b": grads.head_b}

    def value(user_emb, item_emb, head_w, head_b):
        m = model.copy()
        m.user_emb[users], m.item_emb[items] = user_emb, item_emb
        m.head_w[:], m.head_b[:] = head_w, head_b
        return loss_of(m).value

    return _check_channels(value, inputs, ana, corrupt, coords_per=8, rng=rng)


PRIMITIVE_SUITES = {
    "bce_logits": _case_bce,
    "bce_probabilities": _case_bce_prob,
    "listmle": _case_listmle,
    "listnet": _case_listnet,
    "infonce": _case_infonce,
    "margin_infonce": _case_margin,
}

BATCH_SUITES = {
    "global_consistency": _batch_case(lambda b, s, c, k: L.term_global_consistency(b, s), ("glob",)),
    "local_consistency": _batch_case(
        lambda b, s, c, k: L.term_local_consistency(b, s, "click"), ("click",)),
    "calibration_term": _batch_case(lambda b, s, c, k: L.term_calibration(b, s, "purchase"), ("purchase",)),
    "negative_term": _batch_case(
        lambda b, s, c, k: L.term_negative(b, s, "click", L.NegativePlan(), c, k), ("dot", "v", "score")),
    "combined_loss": _batch_case(_combined, ("dot", "v", "score", "click", "purchase", "glob")),
    "model_chain": _case_model_chain,
}

SUITES = tuple(PRIMITIVE_SUITES) + tuple(BATCH_SUITES)


def run_suite(name: str, cases: int = DEFAULT_CASES, seed: int = 0, corrupt: bool = False,
              tiny: Optional[_TinyWorld] = None) -> SuiteResult:
    if name not in SUITES:
        raise ValueError(f"unknown gradcheck suite '{name}'; choose from {list(SUITES)}")
    rng = np.random.default_rng([seed, SUITES.index(name)])
    start = time.perf_counter()
    worst = 0.0
    for _ in range(cases):
        if name in PRIMITIVE_SUITES:
            err = PRIMITIVE_SUITES[name](rng, corrupt)
        else:
            tiny = tiny or _TinyWorld(seed)
            err = BATCH_SUITES[name](rng, corrupt, tiny)
        worst = max(worst, err)
    return SuiteResult(name, cases, worst, time.perf_counter() - start)


def run_all(cases: int = DEFAULT_CASES, seed: int = 0, corrupt: Optional[str] = None) -> list:
    tiny = _TinyWorld(seed)
    return [run_suite(n, cases, seed, corrupt == n, tiny) for n in SUITES]


def format_table(results: list) -> str:
    head = f"{'suite':<22}{'cases':>6}{'worst err':>12}{'time':>10}  status"
    return "\n".join([head] + [r.row() for r in results])

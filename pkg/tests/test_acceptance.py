"""Acceptance criteria 1-9, each printing one PASS/FAIL line.

Criteria 7 and 9 run at the default desk scale and take several minutes;
they share one default-config simulation.
"""

import io
import itertools
import math
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from hccp import gradcheck
from hccp import losses as L
from hccp.cascade_sim import SimConfig, generate_dataset, generate_world
from hccp.cli import main
from hccp.config import ExperimentConfig
from hccp.domain import SampleRole, read_logs
from hccp.metrics import ap_and_ndcg, hit_at_k, map_at_k, ndcg_at_k
from hccp.model import ModelConfig, TowerModel, forward
from hccp.sampler import (
    ChunkSpec, RankedSeq, SamplerConfig, add_inbatch_negatives, arrange_global, build_listwise_batch,
    chunk_sample_ranking, sample_inbatch, sample_pool,
)
from hccp.trainer import octile_summary, run_ablation


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_gradient_correctness(report):
    start = time.perf_counter()
    results = gradcheck.run_all(cases=100, seed=0)
    elapsed = time.perf_counter() - start
    print(gradcheck.format_table(results))
    worst = max(r.worst_error for r in results)
    ok = all(r.passed and r.cases >= 100 for r in results) and elapsed < 60
    report(1, ok, f"{len(results)} suites x 100 cases, worst rel err {worst:.1e}, {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------

def suffix_sum_listmle(y):
    total = 0.0
    for i in range(len(y)):
        total += math.log(sum(math.exp(v) for v in y[i:])) - y[i]
    return total


def test_criterion_2_listmle_enumeration(report):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for n in range(1, 6):
        for _ in range(20):
            base = rng.normal(0, 3, n)
            if n > 1 and rng.random() < 0.3:
                base[1] = base[0]  # ties
            for perm in itertools.permutations(range(n)):
                y = base[list(perm)]
                worst = max(worst, abs(L.listmle(y).value - suffix_sum_listmle(y.tolist())))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    report(2, ok, f"{checked} permuted lists (n<=5), max |diff| {worst:.1e}, {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_reduction_identities(report):
    rng = np.random.default_rng(3)
    worst_margin = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 12))
        logits = rng.normal(0, 2, n)
        v = rng.uniform(0.2, 3, n)
        p = np.zeros(n, bool)
        p[: int(rng.integers(1, n))] = True
        hard = ~p & (rng.random(n) < 0.5)
        easy = ~p & ~hard
        tau = float(rng.uniform(0.05, 1))
        got = L.margin_infonce(logits, v, p, hard, easy, margin=0.0, tau=tau, beta=0.0).value
        want = L.infonce(logits[p], logits[hard | easy], tau).value
        worst_margin = max(worst_margin, abs(got - want))

    world = generate_world(30, 400, 4, seed=1)
    data = generate_dataset(world, SimConfig(n_retrieved=80, n_to_ranking=25, n_exposed=5, click_midpoint=0.8,
                                             purchase_midpoint=1.4), 12, seed=2)
    brng = np.random.default_rng(4)
    batch = add_inbatch_negatives(build_listwise_batch(data.logs, SamplerConfig(pool_negatives=4), brng,
                                                       data.n_items), 0.3, brng)
    scored = forward(TowerModel.init(data.n_users, data.n_items, ModelConfig(dim=5), 0), batch)
    cfg = L.LossConfig(lambda_global=0.0, lambda_task={"click": 1.0, "purchase": 0.0}, alpha=0.0, neg_weight=0.0)
    plan = L.LossPlan(calibration=True, local_consistency=True, global_consistency=True,
                      negatives=L.NegativePlan())
    combined = L.combined_loss(L.hybrid_terms(batch, scored, plan, cfg, 0), cfg).value
    rows = np.flatnonzero(batch.e)
    bce = L.bce_calibration(scored.heads["click"][rows], batch.click[rows]).value / batch.n_requests
    worst_combined = abs(combined - bce)

    ok = worst_margin <= 1e-9 and worst_combined <= 1e-9
    report(3, ok, f"margin(m=0,beta=0) vs InfoNCE {worst_margin:.1e}; combined vs BCE {worst_combined:.1e}")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_crossing_property(report):
    """Literal check: f(y) < g(y) for every sampled y above the crossing.

    Since f tends to 1/tau > 1 and g to 1, f exceeds g to the right of the
    crossing for every grid point, so this criterion fails as stated.
    """
    failures = []
    for tau, c, q in itertools.product((0.05, 0.1, 0.5), (1, 5, 20), (0, 1, 3)):
        located = L.gradient_profiles(q - 20, q + 20, q=q, c=c, tau=tau).crossing
        if located is None:
            failures.append((tau, c, q, "no crossing"))
            continue
        prof = L.gradient_profiles(located, located + 10, q=q, c=c, tau=tau, step=0.01)
        above = prof.y > located
        if not np.all(prof.f[above] < prof.g[above]):
            share = float(np.mean(prof.f[above] >= prof.g[above]))
            failures.append((tau, c, q, f"f>=g on {share:.0%} of samples above y*={located:.3f}"))
    ok = not failures
    detail = "27/27 grid points" if ok else f"{len(failures)}/27 grid points violate, e.g. {failures[0]}"
    report(4, ok, detail)
    assert ok, failures


# -- 5 ---------------------------------------------------------------------

def random_ranked(rng, max_len=60):
    n = int(rng.integers(0, max_len))
    n_exp = int(rng.integers(0, n + 1))
    e = np.arange(n) < n_exp
    click = np.where(e, rng.integers(0, 2, n), -1).astype(np.int8)
    purchase = np.where(e, click * rng.integers(0, 2, n), -1).astype(np.int8)
    return RankedSeq(rng.permutation(n) + 500, np.arange(1, n + 1), e, click, purchase), n


@pytest.fixture(scope="module")
def pool_logs():
    world = generate_world(50, 300, 4, seed=21)
    sim = SimConfig(n_retrieved=60, n_to_ranking=20, n_exposed=4, click_midpoint=0.5, purchase_midpoint=1.2)
    return generate_dataset(world, sim, 200, seed=22)


def test_criterion_5_sampler_invariants(report, pool_logs):
    rng = np.random.default_rng(5)
    cases = 1000
    start = time.perf_counter()
    broken = {}

    def check(name, cond):
        if not cond:
            broken[name] = broken.get(name, 0) + 1

    for _ in range(cases):
        s, n = random_ranked(rng)
        k = int(rng.integers(1, 5))
        spec = ChunkSpec(tuple(sorted(rng.choice(np.arange(1, 61), k, replace=False).tolist())),
                         tuple(rng.random(k).tolist()))
        out = chunk_sample_ranking(s, spec, rng)
        check("impression retention", set(s.items[s.e]) <= set(out.items) and np.all(np.diff(out.r) > 0))

        arranged = arrange_global(out, max(n, 1))
        group = np.where(arranged.e & (arranged.click == 1), 0, np.where(arranged.e, 1, 2))
        stable = all(np.all(np.diff(arranged.r[group == g]) > 0) for g in range(3))
        check("three-group ordering", np.all(np.diff(group) >= 0) and stable)

    sampler = SamplerConfig(pool_negatives=3)
    for _ in range(cases):
        idx = rng.choice(len(pool_logs), int(rng.integers(2, 8)), replace=False)
        logs = [pool_logs.logs[i] for i in idx]
        batch = build_listwise_batch(logs, sampler, rng, pool_logs.n_items)
        negs = sample_inbatch(batch, float(rng.uniform(0.2, 1.0)), rng)
        for b, items in enumerate(negs):
            own = set(batch.item[(batch.req == b) & batch.role_mask(SampleRole.N1_IMPRESSION,
                                                                     SampleRole.N2_RANKING_SEQ,
                                                                     SampleRole.N3_PRERANK_TAIL)])
            others = set(batch.item[(batch.req != b) & batch.role_mask(SampleRole.N1_IMPRESSION)])
            check("in-batch mask", not (set(items) & own) and set(items) <= others)

    for _ in range(cases):
        n_items = int(rng.integers(20, 400))
        retrieved = rng.choice(n_items, int(rng.integers(0, n_items - 5)), replace=False)
        k = int(rng.integers(0, min(10, n_items - retrieved.size) + 1))
        pool = sample_pool(n_items, retrieved, k, rng)
        check("pool disjointness", pool.size == k and len(set(pool)) == k
              and not set(pool) & set(retrieved) and np.all((pool >= 0) & (pool < n_items)))

    for _ in range(cases):
        seed = int(rng.integers(0, 2**31))
        idx = rng.choice(len(pool_logs), 4, replace=False)
        logs = [pool_logs.logs[i] for i in idx]

        def build():
            r = np.random.default_rng(seed)
            return add_inbatch_negatives(build_listwise_batch(logs, sampler, r, pool_logs.n_items), 0.3, r)

        a, b = build(), build()
        check("determinism", np.array_equal(a.item, b.item) and np.array_equal(a.role, b.role)
              and np.array_equal(a.r_c, b.r_c))

    elapsed = time.perf_counter() - start
    ok = not broken and elapsed < 60
    report(5, ok, f"5 invariants x {cases} cases, violations {broken or 'none'}, {elapsed:.1f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------

def brute_hit(order, rel, k):
    return sum(1 for x in rel if x in list(order[:k])) / len(rel)


def brute_map(order, ref, k):
    precisions = [sum(1 for x in order[: i + 1] if x in ref) / (i + 1) for i in range(min(k, len(order)))
                  if order[i] in ref]
    return sum(precisions) / min(len(ref), k)


def brute_ndcg(order, gains, k):
    dcg = sum(gains.get(x, 0) / math.log2(i + 2) for i, x in enumerate(order[:k]))
    ideal = sorted(gains.values(), reverse=True)[:k]
    return dcg / sum(g / math.log2(i + 2) for i, g in enumerate(ideal))


def test_criterion_6_metric_oracles(report):
    x, a, y, b = 1, 2, 3, 4
    hand = [
        hit_at_k([10, 11, 12, 13], {11, 13}, 3) == 0.5,
        abs(map_at_k([x, a, y, b], {a, b}, 4) - 0.5) <= 1e-12,
        abs(ndcg_at_k([x, a, y, b], {a: 1, b: 1}, 4) - 0.6509209298071326) <= 1e-9,
        map_at_k([a, b, x], {a, b}, 2) == 1.0 and ndcg_at_k([a, b], {a: 1, b: 1}, 2) == 1.0,
        hit_at_k([x, y], {a}, 2) == 0.0 and map_at_k([x, y], {a}, 2) == 0.0,
    ]
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        order = [int(i) for i in rng.permutation(n)]
        ref = set(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 3))
        gains = {i: float(rng.integers(1, 4)) for i in ref}
        ap, nd = ap_and_ndcg(np.isin(order, list(ref)), len(ref), k)
        worst = max(worst,
                    abs(hit_at_k(order, ref, k) - brute_hit(order, ref, k)),
                    abs(map_at_k(order, ref, k) - brute_map(order, ref, k)),
                    abs(ndcg_at_k(order, gains, k) - brute_ndcg(order, gains, k)),
                    abs(ap - brute_map(order, ref, k)),
                    abs(nd - brute_ndcg(order, dict.fromkeys(ref, 1.0), k)))
    ok = all(hand) and worst <= 1e-9
    report(6, ok, f"worked examples {sum(hand)}/{len(hand)}, 1000 random instances max |diff| {worst:.1e}")
    assert ok


# -- 7, 8, 9 ---------------------------------------------------------------

def cli(*argv) -> Path:
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    assert code == 0, buf.getvalue()
    return Path(buf.getvalue().strip().splitlines()[-1])


def pipeline(out: Path) -> tuple:
    sim = cli("simulate", "--out", out)
    run = cli("train", "--data", sim / "train.jsonl", "--out", out)
    ev = cli("eval", "--model", run / "model.npz", "--data", sim / "eval.jsonl", "--out", out)
    return sim, ev


@pytest.fixture(scope="module")
def default_pipelines(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    return pipeline(base / "first"), pipeline(base / "second")


@pytest.mark.slow
def test_criterion_9_end_to_end_determinism(report, default_pipelines):
    (_, ev_a), (_, ev_b) = default_pipelines
    same = all((ev_a / f).read_bytes() == (ev_b / f).read_bytes() for f in ("report.json", "report.txt"))
    report(9, same, f"report.json and report.txt {'byte-identical' if same else 'differ'} across two runs")
    assert same


@pytest.fixture(scope="module")
def default_ablation(default_pipelines):
    (sim, _), _ = default_pipelines
    config = ExperimentConfig()
    start = time.perf_counter()
    result = run_ablation(["Base", "HCCP_wo_Up", "HCCP_full"], config, [0, 1, 2, 3, 4],
                          read_logs(sim / "train.jsonl"), read_logs(sim / "eval.jsonl"))
    return config, result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_7_directional_ablation(report, default_ablation):
    config, result, elapsed = default_ablation
    k = config.eval.tail_k
    per_seed = result.per_seed("ASH", k)
    print(result.table(["ASH"], [k]))
    full = np.array(per_seed["HCCP_full"])
    over_base = int(np.sum(full >= np.array(per_seed["Base"])))
    over_wo_up = int(np.sum(full >= np.array(per_seed["HCCP_wo_Up"])))
    ok = over_base >= 4 and over_wo_up >= 3 and elapsed < 1800
    cells = ", ".join(f"{v}={[round(x, 4) for x in vals]}" for v, vals in per_seed.items())
    report(7, ok, f"ASH@{k}: full>=Base {over_base}/5, full>=wo_Up {over_wo_up}/5, {elapsed:.0f}s; {cells}")
    assert ok


@pytest.mark.slow
def test_criterion_8_long_tail_octiles(report, default_ablation):
    config, result, _ = default_ablation
    deltas = result.octile_deltas("HCCP_full", "Base", config.eval.octile_metric, config.eval.tail_k)
    mean = octile_summary(deltas)
    tail = mean[4:]
    ok = all(v is not None and v >= 0 for v in tail)
    report(8, ok, "mean gain by octile " + " ".join("-" if v is None else f"{v:+.3f}" for v in mean))
    assert ok

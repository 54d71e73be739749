import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hccp.cascade_sim import generate_dataset, generate_world, SimConfig
from hccp.metrics import (
    ap_and_ndcg, evaluate_scores, hit_at_k, map_at_k, ndcg_at_k, octile_assignment, octile_breakdown,
    relevant_sets,
)


class TestHit:
    def test_examples(self):
        assert hit_at_k([1, 2, 3], {2, 3}, 3) == 1.0
        assert hit_at_k([1, 2, 3], {7}, 3) == 0.0
        assert hit_at_k([10, 11, 12, 13], {11, 13}, 3) == 0.5

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            hit_at_k([1], {1}, 0)
        with pytest.raises(ValueError):
            hit_at_k([1], set(), 1)

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(range(20)), st.sets(st.integers(0, 19), min_size=1), st.integers(1, 19))
    def test_monotone_in_k(self, order, rel, k):
        assert hit_at_k(order, rel, k) <= hit_at_k(order, rel, k + 1)


class TestMap:
    def test_examples(self):
        x, a, y, b = 1, 2, 3, 4
        assert map_at_k([x, a, y, b], {a, b}, 4) == pytest.approx(0.5)
        assert map_at_k([b, a, x], {a, b}, 2) == 1.0
        assert map_at_k([x, y, a], {a}, 2) == 0.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            map_at_k([1], {1}, -1)
        with pytest.raises(ValueError):
            map_at_k([1], set(), 1)


class TestNdcg:
    def test_examples(self):
        x, a, y, b = 1, 2, 3, 4
        expected = (1 / math.log2(3) + 1 / math.log2(5)) / (1 + 1 / math.log2(3))
        assert ndcg_at_k([x, a, y, b], {a: 1, b: 1}, 4) == pytest.approx(expected)
        assert expected == pytest.approx(0.651, abs=1e-3)
        assert ndcg_at_k([a] + list(range(10, 19)), {a: 1}, 10) == 1.0
        assert ndcg_at_k([b, a, x], {a: 1, b: 3}, 3) == 1.0

    def test_all_zero_gains_excluded(self):
        assert ndcg_at_k([1, 2], {1: 0}, 2) is None

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(range(12)), st.integers(1, 12), st.integers(0, 2**31))
    def test_relabel_invariance(self, order, k, seed):
        rng = np.random.default_rng(seed)
        ref = set(order[:4]) if seed % 2 else set(rng.choice(12, 4, replace=False).tolist())
        relabel = rng.permutation(100)[:12]
        mapped = [int(relabel[i]) for i in order]
        mref = {int(relabel[i]) for i in ref}
        assert map_at_k(order, ref, k) == pytest.approx(map_at_k(mapped, mref, k))
        assert ndcg_at_k(order, dict.fromkeys(ref, 1), k) == pytest.approx(ndcg_at_k(mapped, dict.fromkeys(mref, 1), k))

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(range(10)), st.integers(1, 10))
    def test_one_iff_perfect_prefix(self, order, k):
        ref = set(range(k))
        perfect = set(order[:k]) == ref
        assert (map_at_k(order, ref, k) == pytest.approx(1.0)) == perfect
        assert (ndcg_at_k(order, dict.fromkeys(ref, 1), k) == pytest.approx(1.0)) == perfect


class TestVectorisedKernel:
    def test_agrees_with_scalar_versions(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 30))
            order = rng.permutation(n)
            ref = rng.choice(n, int(rng.integers(1, n + 1)), replace=False)
            k = int(rng.integers(1, n + 1))
            is_ref = np.isin(order, ref)
            ap, nd = ap_and_ndcg(is_ref, ref.size, k)
            assert ap == pytest.approx(map_at_k(order, ref, k), abs=1e-12)
            assert nd == pytest.approx(ndcg_at_k(order, dict.fromkeys(ref.tolist(), 1), k), abs=1e-12)


class TestOctiles:
    def test_distinct_frequencies_one_per_octile(self):
        freq = np.array([5, 80, 7, 1, 30, 2, 9, 60])
        buckets = octile_assignment(freq, np.arange(8))
        assert buckets[np.argsort(-freq)].tolist() == list(range(8))

    def test_ties_break_by_item_id(self):
        assert octile_assignment(np.ones(16), np.arange(16)).tolist() == [i // 2 for i in range(16)]

    def test_power_law_head_dominates(self):
        rng = np.random.default_rng(0)
        freq = rng.zipf(1.5, 8000).astype(float)
        buckets = octile_assignment(freq, np.arange(8000))
        assert freq[buckets == 0].sum() > freq[buckets == 7].sum()
        assert np.all(np.bincount(buckets) == 1000)

    def test_breakdown_means(self):
        freq = np.array([8, 7, 6, 5, 4, 3, 2, 1])
        out = octile_breakdown(freq, {i: float(i) for i in range(8)})
        assert out == [float(i) for i in range(8)]
        assert octile_breakdown(freq, {}) == [None] * 8

    def test_negative_frequency_rejected(self):
        with pytest.raises(ValueError):
            octile_assignment(np.array([-1, 2]), np.arange(2))


@pytest.fixture(scope="module")
def data():
    world = generate_world(30, 500, 4, seed=1)
    sim = SimConfig(n_retrieved=100, n_to_ranking=30, n_exposed=5, click_midpoint=0.5, purchase_midpoint=1.0)
    return world, generate_dataset(world, sim, 40, seed=2)


class TestEvaluateScores:
    def test_matches_scalar_metrics(self, data):
        world, ds = data
        report = evaluate_scores(ds, world.affinity, ks=[5, 30], consistency_ks=[10], item_ks=[30])
        hits, n, maps = [], 0, []
        for log in ds:
            s = world.affinity(log.user, log.retrieved)
            order = log.retrieved[np.lexsort((log.retrieved, -s))]
            rel = relevant_sets(log)["ASH"]
            if rel.size:
                hits.append(hit_at_k(order, rel, 30))
            maps.append(map_at_k(order, log.by_rank().ranked_items[:10], 10))
        assert report.get("ASH", 30) == pytest.approx(np.mean(hits), abs=1e-12)
        assert report.counts["ASH"] == len(hits)
        assert report.get("MAP", 10) == pytest.approx(np.mean(maps), abs=1e-12)
        rates = report.item_hit_rates("ASH", 30)
        assert all(0 <= r <= 1 for r in rates.values())

    def test_full_cutoff_catches_everything(self, data):
        world, ds = data
        rng = np.random.default_rng(0)
        report = evaluate_scores(ds, lambda u, items: rng.random(items.size), ks=[100], consistency_ks=[])
        for m in ("ISH", "ASH", "ISPH", "ASPH"):
            assert report.get(m, 100) in (1.0, None)
        assert "MAP" not in report.values

    def test_report_serialisation_and_table(self, data):
        world, ds = data
        report = evaluate_scores(ds, world.affinity, ks=[5], consistency_ks=[5])
        assert '"ASH"' in report.to_json() and "NDCG" in report.table()

import math

import numpy as np
import pytest

from hccp.config import ExperimentConfig
from hccp.domain import SampleRole
from hccp.model import TowerModel
from hccp.trainer import (
    AblationError, AffinityScorer, RandomScorer, TrainingError, Variant, evaluate, octile_summary, run_ablation,
    train,
)


class TestVariant:
    def test_parse_by_value_or_name(self):
        assert Variant.parse("HCCP_full") is Variant.FULL
        assert Variant.parse("WO_UP") is Variant.WO_UP
        with pytest.raises(ValueError):
            Variant.parse("HCCP")

    def test_base_reads_impressions_only(self):
        assert Variant.BASE.roles == (SampleRole.N1_IMPRESSION,)
        assert set(Variant.FULL.roles) == set(SampleRole)

    def test_plans_nest(self):
        assert Variant.WO_UP.plan.negatives is None
        assert not Variant.WO_MARGIN.plan.negatives.margin
        assert Variant.FULL.plan.negatives.margin


class TestTrain:
    def test_base_evaluates_only_calibration(self, small_config, small_split):
        _, tr, _ = small_split
        audit: list = []
        train(Variant.BASE, tr, small_config, 0, audit=audit)
        assert audit and all(name.startswith("cali_") for name in audit)

    def test_full_touches_every_term(self, small_config, small_split):
        _, tr, _ = small_split
        result = train(Variant.FULL, tr, small_config, 0)
        names = set(result.manifest.loss_calls)
        expected = {"global"} | {f"{kind}_{t}" for kind in ("cali", "cons", "neg") for t in ("click", "purchase")}
        assert names == expected
        assert len(set(result.manifest.loss_calls.values())) == 1

    def test_zero_epochs_returns_initial_model(self, small_config, small_split):
        _, tr, _ = small_split
        cfg = small_config.with_overrides(train={"epochs": 0})
        result = train(Variant.FULL, tr, cfg, 3)
        fresh = train(Variant.BASE, tr, cfg, 3)
        np.testing.assert_array_equal(result.model.user_emb, fresh.model.user_emb)
        assert result.manifest.steps == 0 and result.loss_history.size == 0

    def test_same_seed_same_model(self, small_config, small_split):
        _, tr, _ = small_split
        a = train(Variant.FULL, tr, small_config, 1)
        b = train(Variant.FULL, tr, small_config, 1)
        np.testing.assert_array_equal(a.model.item_emb, b.model.item_emb)
        np.testing.assert_array_equal(a.loss_history, b.loss_history)

    def test_loss_descends(self, small_config, small_split):
        _, tr, _ = small_split
        cfg = small_config.with_overrides(train={"epochs": 4})
        result = train(Variant.WO_UP, tr, cfg, 0)
        assert result.manifest.epoch_losses[-1] < result.manifest.epoch_losses[0]

    def test_manifest_echoes_config(self, small_config, small_split):
        _, tr, _ = small_split
        m = train(Variant.BASE, tr, small_config, 0).manifest
        assert m.config == small_config.to_dict()
        assert m.config["loss"]["margin"] == 0.9 and m.config["loss"]["tau"] == 0.1
        assert m.train_fingerprint and len(m.code_version) == 16
        assert math.isclose(m.final_beta, small_config.loss.beta(m.steps))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_the_batch(self, small_config, small_split):
        _, tr, _ = small_split
        cfg = small_config.with_overrides(model={"lr": 1e200})
        with pytest.raises(TrainingError) as err:
            train(Variant.FULL, tr, cfg, 0)
        assert err.value.batch_id >= 0 and f"batch {err.value.batch_id}" in str(err.value)

    def test_empty_after_filter(self, small_config, small_split):
        _, tr, _ = small_split
        with pytest.raises(ValueError):
            train(Variant.BASE, tr.filter(lambda log: False), small_config, 0)


class TestEvaluate:
    def test_oracle_bounds_and_learning(self, small_config, small_split):
        world, tr, ev = small_split
        cfg = small_config.with_overrides(train={"epochs": 4})
        oracle = evaluate(AffinityScorer(world), ev, cfg).get("ASH", 40)
        chance = evaluate(RandomScorer(0), ev, cfg).get("ASH", 40)
        untrained = evaluate(train(Variant.BASE, tr, cfg.with_overrides(train={"epochs": 0}), 0).model, ev, cfg)
        trained = evaluate(train(Variant.BASE, tr, cfg, 0).model, ev, cfg)
        assert oracle > trained.get("ASH", 40) > untrained.get("ASH", 40)
        assert oracle > chance

    def test_full_cutoff_hits_everything(self, small_config, small_split):
        _, _, ev = small_split
        report = evaluate(RandomScorer(0), ev, small_config)
        assert report.get("ISH", 200) == 1.0

    def test_model_too_small_for_eval_ids(self, small_config, small_split):
        _, _, ev = small_split
        tiny = TowerModel.init(2, 2, small_config.model, 0)
        with pytest.raises(IndexError):
            evaluate(tiny, ev, small_config)


class TestAblation:
    def test_grid_and_shared_data(self, small_config, small_split):
        _, tr, ev = small_split
        report = run_ablation(["Base", "HCCP_full"], small_config, [0, 1], tr, ev)
        assert report.variants == ["Base", "HCCP_full"] and report.seeds == [0, 1]
        assert len({r.manifest.train_fingerprint for r in report.runs}) == 1
        assert len({r.manifest.eval_fingerprint for r in report.runs}) == 1
        table = report.table(["ASH"], [40])
        assert "-" not in table.split("\n", 1)[1].replace("HCCP_full", "")
        deltas = report.octile_deltas("HCCP_full", "Base", "ASH", 40)
        assert len(deltas) == 2 and all(len(d) == 8 for d in deltas)
        assert len(octile_summary(deltas)) == 8

    def test_single_run(self, small_config, small_split):
        _, tr, ev = small_split
        report = run_ablation(["Base"], small_config, [0], tr, ev)
        assert len(report.table(["ISH", "ASH"], [10]).splitlines()) == 3

    def test_variant_isolation(self, small_config, small_split):
        # adding a variant to the grid must not change another variant's result
        _, tr, ev = small_split
        alone = run_ablation(["HCCP_full"], small_config, [0], tr, ev)
        paired = run_ablation(["Base", "HCCP_full"], small_config, [0], tr, ev)
        assert alone.value("HCCP_full", 0, "ASH", 40) == paired.value("HCCP_full", 0, "ASH", 40)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failure_keeps_partial_results(self, small_config, small_split):
        _, tr, ev = small_split
        cfg = small_config.with_overrides(model={"lr": 1e200})
        with pytest.raises(AblationError) as err:
            run_ablation(["Base", "HCCP_full"], cfg.with_overrides(
                train={"epochs": 1}), [0], tr, ev)
        partial = err.value.partial
        assert partial.errors and partial.errors[-1]["variant"] in ("Base", "HCCP_full")

    def test_rejects_empty_grid(self, small_config, small_split):
        _, tr, ev = small_split
        with pytest.raises(ValueError):
            run_ablation([], small_config, [0], tr, ev)

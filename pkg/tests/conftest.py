import numpy as np
import pytest

from hccp.cascade_sim import SimConfig, generate_dataset, generate_world
from hccp.config import ExperimentConfig


SMALL_SIM = SimConfig(n_retrieved=120, n_to_ranking=30, n_exposed=5, click_midpoint=1.0, purchase_midpoint=1.6)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(40, 600, 6, seed=5)


@pytest.fixture(scope="session")
def small_sim():
    return SMALL_SIM


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return generate_dataset(small_world, SMALL_SIM, 60, seed=9)


@pytest.fixture(scope="session")
def small_config():
    """End-to-end config small enough for a couple of seconds per run."""
    return ExperimentConfig().with_overrides(
        world={"n_users": 60, "n_items": 1500, "d_true": 6},
        sim={"n_retrieved": 200, "n_to_ranking": 40, "n_exposed": 5, "click_midpoint": 1.2,
             "purchase_midpoint": 1.8},
        data={"n_train": 300, "n_eval": 80},
        model={"dim": 8},
        train={"epochs": 2, "batch_size": 32},
        eval={"ks": [10, 40, 200], "consistency_ks": [10, 40], "tail_k": 40},
        ablation={"variants": ["Base", "HCCP_full"], "seeds": [0, 1]},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split(small_config):
    """(world, train, eval) drawn per ``small_config``."""
    w, d = small_config.world, small_config.data
    world = generate_world(w.n_users, w.n_items, w.d_true, w.seed)
    return (world, generate_dataset(world, small_config.sim, d.n_train, d.train_seed),
            generate_dataset(world, small_config.sim, d.n_eval, d.eval_seed))

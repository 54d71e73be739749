"""Synthetic world and cascade simulator.

A world is a set of latent user/item vectors whose dot product is the true
affinity, plus heavy-tailed item popularity. Each simulated request runs
retrieval -> pre-ranking oracle -> ranking oracle -> exposure -> feedback,
then a second independent exposure pass over the same retrieved set that
supplies the all-scenario feedback.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .domain import UNKNOWN, Dataset, RequestLog


@dataclass(frozen=True, eq=False)
class World:
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    popularity: np.ndarray
    seed: int
    # Low-rank pseudo-noise for the synthetic cross-feature score.
    user_noise: np.ndarray
    item_noise: np.ndarray

    @property
    def n_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vecs.shape[0]

    @property
    def dim(self) -> int:
        return self.user_vecs.shape[1]

    def affinity(self, user: int, items=None) -> np.ndarray:
        u = self.user_vecs[user]
        return self.item_vecs @ u if items is None else self.item_vecs[items] @ u

    def pair_affinity(self, users, items) -> np.ndarray:
        return np.einsum("nd,nd->n", self.user_vecs[users], self.item_vecs[items])

    def cross_score(self, users, items) -> np.ndarray:
        """Deterministic noisy view of the true affinity for (user, item) pairs."""
        users = np.asarray(users)
        items = np.asarray(items)
        noise = np.einsum("nd,nd->n", self.user_noise[users], self.item_noise[items])
        return self.pair_affinity(users, items) + noise


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def generate_world(n_users: int, n_items: int, d_true: int, seed: int,
                   popularity_exponent: float = 1.2, cross_noise: float = 0.5,
                   cross_rank: int = 4) -> World:
    """Draw a world: Gaussian latent vectors and Zipf-like item popularity.

    Popularity of the item with popularity rank ``k`` is proportional to
    ``k ** -popularity_exponent``; ranks are a random permutation of items.
    """
    if min(n_users, n_items, d_true) < 1:
        raise ValueError(f"counts must be >= 1 (n_users={n_users}, n_items={n_items}, d_true={d_true})")
    if popularity_exponent < 0:
        raise ValueError("popularity_exponent must be >= 0")
    rng = np.random.default_rng(seed)
    user_vecs = rng.standard_normal((n_users, d_true)) / np.sqrt(d_true)
    item_vecs = rng.standard_normal((n_items, d_true))
    ranks = rng.permutation(n_items) + 1
    popularity = ranks.astype(float) ** -popularity_exponent
    popularity /= popularity.sum()
    scale = np.sqrt(cross_noise / np.sqrt(cross_rank)) if cross_noise > 0 else 0.0
    user_noise = rng.standard_normal((n_users, cross_rank)) * scale
    item_noise = rng.standard_normal((n_items, cross_rank)) * scale
    _freeze(user_vecs, item_vecs, popularity, user_noise, item_noise)
    return World(user_vecs, item_vecs, popularity, int(seed), user_noise, item_noise)


@dataclass(frozen=True)
class SimConfig:
    n_retrieved: int = 2000
    n_to_ranking: int = 200
    n_exposed: int = 10
    retrieval_alpha: float = 0.7
    retrieval_sharpness: float = 2.0
    prerank_noise: float = 0.5
    rank_noise_base: float = 0.05
    rank_noise_growth: float = 0.5
    feedback_steepness: float = 3.0
    click_midpoint: float = 3.8
    purchase_midpoint: float = 4.5

    def validate(self, n_items: int | None = None) -> None:
        if not 1 <= self.n_exposed <= self.n_to_ranking <= self.n_retrieved:
            raise ValueError(
                f"need 1 <= n_exposed ({self.n_exposed}) <= n_to_ranking ({self.n_to_ranking})"
                f" <= n_retrieved ({self.n_retrieved})"
            )
        if n_items is not None and self.n_retrieved > n_items:
            raise ValueError(f"n_retrieved ({self.n_retrieved}) exceeds catalog size ({n_items})")
        if self.rank_noise_base < 0 or self.rank_noise_growth < 0 or self.prerank_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0.0 <= self.retrieval_alpha <= 1.0:
            raise ValueError("retrieval_alpha must lie in [0, 1]")
        if self.feedback_steepness <= 0:
            raise ValueError("feedback_steepness must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def rank_noise_std(position: np.ndarray, config: SimConfig, n_rank: int) -> np.ndarray:
    """Ranking-oracle noise std at 1-based position: sigma0 + sigma1 * r / N^r."""
    return config.rank_noise_base + config.rank_noise_growth * np.asarray(position) / n_rank


def retrieve(world: World, config: SimConfig, user: int, rng: np.random.Generator) -> np.ndarray:
    """Sample N^p distinct items with weight affinity^alpha * popularity^(1 - alpha).

    Affinity enters as exp(sharpness * a) so weights stay positive; sampling
    without replacement uses the Gumbel top-k trick.
    """
    a = world.affinity(user)
    logw = (config.retrieval_alpha * config.retrieval_sharpness * a
            + (1.0 - config.retrieval_alpha) * np.log(world.popularity))
    keys = logw + rng.gumbel(size=world.n_items)
    top = np.argpartition(-keys, config.n_retrieved - 1)[: config.n_retrieved]
    return top[np.lexsort((top, -keys[top]))]


def _cascade_pass(aff: np.ndarray, config: SimConfig, rng: np.random.Generator):
    """Pre-rank, rank and expose one retrieved list.

    Returns (pre-rank permutation, ranking permutation of the forwarded head,
    click labels, purchase labels) where labels cover the exposed top.
    """
    n_rank = config.n_to_ranking
    pre_score = aff + rng.normal(0.0, 1.0, size=aff.size) * config.prerank_noise
    pre_perm = np.lexsort((np.arange(aff.size), -pre_score))
    head = pre_perm[:n_rank]
    # Noise std depends on the item's true-affinity position among the ranked items.
    true_pos = np.empty(n_rank, dtype=np.int64)
    true_pos[np.lexsort((np.arange(n_rank), -aff[head]))] = np.arange(1, n_rank + 1)
    noisy = aff[head] + rng.normal(0.0, 1.0, size=n_rank) * rank_noise_std(true_pos, config, n_rank)
    rank_perm = np.lexsort((np.arange(n_rank), -noisy))
    exposed_aff = aff[head[rank_perm[: config.n_exposed]]]
    k = config.feedback_steepness
    click = rng.random(config.n_exposed) < expit(k * (exposed_aff - config.click_midpoint))
    buy = rng.random(config.n_exposed) < expit(k * (exposed_aff - config.purchase_midpoint))
    purchase = click & buy
    return pre_perm, rank_perm, click, purchase


def simulate_request(world: World, config: SimConfig, user: int, rng: np.random.Generator) -> RequestLog:
    if not 0 <= user < world.n_users:
        raise ValueError(f"user {user} outside [0, {world.n_users})")
    config.validate(world.n_items)
    items = retrieve(world, config, user, rng)
    aff = world.affinity(user, items)

    pre_perm, rank_perm, click, purchase = _cascade_pass(aff, config, rng)
    retrieved = items[pre_perm]
    ranked_items = retrieved[: config.n_to_ranking][rank_perm]
    n_rank, n_exp = config.n_to_ranking, config.n_exposed
    exposed = np.zeros(n_rank, dtype=bool)
    exposed[:n_exp] = True
    click_col = np.full(n_rank, UNKNOWN, dtype=np.int8)
    purchase_col = np.full(n_rank, UNKNOWN, dtype=np.int8)
    click_col[:n_exp] = click
    purchase_col[:n_exp] = purchase

    # Second, independent pass over the same retrieved set ("all-scenario" feedback).
    alt_pre, alt_rank, alt_click, alt_purchase = _cascade_pass(aff, config, rng)
    alt_exposed = items[alt_pre[:n_rank][alt_rank[:n_exp]]]

    return RequestLog(
        user=user,
        retrieved=retrieved,
        ranked_items=ranked_items,
        ranked_order=np.arange(1, n_rank + 1),
        exposed=exposed,
        click=click_col,
        purchase=purchase_col,
        alt_click=np.sort(alt_exposed[alt_click]),
        alt_purchase=np.sort(alt_exposed[alt_purchase]),
    )


def generate_dataset(world: World, config: SimConfig, n_requests: int, seed: int) -> Dataset:
    """Simulate ``n_requests`` requests from uniformly drawn users.

    Each request gets its own spawned generator, so request ``i`` depends
    only on ``(seed, i)``.
    """
    if n_requests < 1:
        raise ValueError(f"n_requests must be >= 1, got {n_requests}")
    config.validate(world.n_items)
    root = np.random.SeedSequence(seed)
    user_seq, *request_seqs = root.spawn(n_requests + 1)
    users = np.random.default_rng(user_seq).integers(0, world.n_users, size=n_requests)
    logs = tuple(
        simulate_request(world, config, int(u), np.random.default_rng(s))
        for u, s in zip(users, request_seqs)
    )
    return Dataset(logs, world.n_items, world.n_users)

"""Two-tower scorer with per-task affine heads.

The shared score of a (user, item) pair is the embedding dot product, plus
an optional fixed cross-feature offset on N1-N3 rows. Each task head maps
that score through ``w_t * s + b_t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sampler import ListwiseBatch

HEAD_TASKS = ("click", "purchase", "global")
NORM_EPS = 1e-10
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    lr: float = 1.0
    cross_weight: float = 0.0
    n_experts: int = 0  # kept for config fidelity; the affine heads do not use experts

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TowerModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    config: ModelConfig = field(default_factory=ModelConfig)
    tasks: tuple = HEAD_TASKS

    @classmethod
    def init(cls, n_users: int, n_items: int, config: ModelConfig, seed: int) -> "TowerModel":
        if config.dim < 1:
            raise ValueError(f"embedding dim must be >= 1, got {config.dim}")
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(config.dim)
        user = rng.uniform(-bound, bound, size=(n_users, config.dim))
        item = rng.uniform(-bound, bound, size=(n_items, config.dim))
        n_t = len(HEAD_TASKS)
        return cls(user, item, np.ones(n_t), np.zeros(n_t), config)

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    def task_index(self, task: str) -> int:
        return self.tasks.index(task)

    def copy(self) -> "TowerModel":
        return TowerModel(self.user_emb.copy(), self.item_emb.copy(), self.head_w.copy(),
                          self.head_b.copy(), self.config, self.tasks)

    def params(self) -> dict:
        return {"user_emb": self.user_emb, "item_emb": self.item_emb,
                "head_w": self.head_w, "head_b": self.head_b}

    def check_ids(self, users, items) -> None:
        for name, ids, n in (("user", users, self.n_users), ("item", items, self.n_items)):
            ids = np.asarray(ids)
            bad = ids[(ids < 0) | (ids >= n)]
            if bad.size:
                raise IndexError(f"{name} id {int(bad[0])} outside embedding table of size {n}")

    def score_items(self, user: int, items: np.ndarray, cross=None, task: str = "click") -> np.ndarray:
        """Head score of one user against many items (serving path)."""
        self.check_ids([user], items)
        s = self.item_emb[items] @ self.user_emb[user]
        if cross is not None and self.config.cross_weight:
            s = s + self.config.cross_weight * np.asarray(cross)
        t = self.task_index(task)
        return self.head_w[t] * s + self.head_b[t]


@dataclass(eq=False)
class ScoredBatch:
    dot: np.ndarray
    u_norm: np.ndarray
    i_norm: np.ndarray
    cos: np.ndarray
    score: np.ndarray
    heads: dict

    @property
    def v(self) -> np.ndarray:
        return self.u_norm * self.i_norm


def forward(model: TowerModel, batch: ListwiseBatch) -> ScoredBatch:
    model.check_ids(batch.user, batch.item)
    u = model.user_emb[batch.user]
    i = model.item_emb[batch.item]
    dot = np.einsum("nd,nd->n", u, i)
    u_norm = np.linalg.norm(u, axis=1)
    i_norm = np.linalg.norm(i, axis=1)
    cos = dot / (u_norm * i_norm + NORM_EPS)
    score = dot + model.config.cross_weight * batch.cross
    heads = {t: model.head_w[k] * score + model.head_b[k] for k, t in enumerate(model.tasks)}
    return ScoredBatch(dot, u_norm, i_norm, cos, score, heads)


@dataclass(eq=False)
class Gradients:
    user_emb: np.ndarray
    item_emb: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def zeros_like(cls, model: TowerModel) -> "Gradients":
        return cls(np.zeros_like(model.user_emb), np.zeros_like(model.item_emb),
                   np.zeros_like(model.head_w), np.zeros_like(model.head_b))

    def items(self):
        return {"user_emb": self.user_emb, "item_emb": self.item_emb,
                "head_w": self.head_w, "head_b": self.head_b}.items()


def backward(model: TowerModel, batch: ListwiseBatch, scored: ScoredBatch, channel_grads: dict) -> Gradients:
    """Chain per-instance loss gradients into parameter gradients.

    ``channel_grads`` maps any of ``"dot"``, ``"v"``, ``"score"`` and the
    head task names to arrays of per-instance derivatives.
    """
    n = len(batch)
    g = Gradients.zeros_like(model)
    d_score = np.array(channel_grads.get("score", np.zeros(n)), dtype=float)
    for k, t in enumerate(model.tasks):
        gt = channel_grads.get(t)
        if gt is None:
            continue
        g.head_w[k] = np.dot(gt, scored.score)
        g.head_b[k] = gt.sum()
        d_score += model.head_w[k] * gt
    d_dot = d_score + channel_grads.get("dot", 0.0)
    d_v = channel_grads.get("v")

    u = model.user_emb[batch.user]
    i = model.item_emb[batch.item]
    gu = d_dot[:, None] * i
    gi = d_dot[:, None] * u
    if d_v is not None:
        # v = |u| |i|; d|u|/du = u / |u|
        safe_u = np.where(scored.u_norm > 0, scored.u_norm, 1.0)
        safe_i = np.where(scored.i_norm > 0, scored.i_norm, 1.0)
        gu += (d_v * scored.i_norm / safe_u)[:, None] * u
        gi += (d_v * scored.u_norm / safe_i)[:, None] * i
    np.add.at(g.user_emb, batch.user, gu)
    np.add.at(g.item_emb, batch.item, gi)
    return g


def apply_gradients(model: TowerModel, grads: Gradients, lr: float) -> None:
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient for {name}; refusing to update")
    for name, arr in grads.items():
        param = getattr(model, name)
        param -= lr * arr


def save_checkpoint(model: TowerModel, path) -> None:
    path = Path(path)
    meta = {"version": CHECKPOINT_VERSION, "tasks": list(model.tasks), "config": model.config.to_dict()}
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **model.params())


def load_checkpoint(path) -> TowerModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        return TowerModel(z["user_emb"].copy(), z["item_emb"].copy(), z["head_w"].copy(),
                          z["head_b"].copy(), ModelConfig(**meta["config"]), tuple(meta["tasks"]))

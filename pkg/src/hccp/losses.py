"""Training objectives with analytic gradients.

Primitives (``bce_calibration``, ``listmle``, ``listnet``, ``infonce``,
``margin_infonce``) return raw sums and gradients with respect to their
inputs. The batch-level terms in :func:`hybrid_terms` apply the 1/|U|
request average once each, and :func:`combined_loss` forms the weighted
total whose gradient is the same linear combination of term gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .domain import SampleRole

PROB_CLAMP = 1e-7
NEG_MIN = -1e9
LOCAL_TASKS = ("click", "purchase")


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and contrastive hyperparameters.

    ``neg_weight`` scales the negative-sample term of each task; ``beta0``
    and ``beta_decay`` drive the blend between margined and plain logits,
    ``beta = beta0 * beta_decay ** step``.
    """

    lambda_global: float = 0.05
    lambda_task: dict = field(default_factory=lambda: {"click": 0.98, "purchase": 0.2})
    alpha: float = 0.05
    neg_weight: float = 0.5
    margin: float = 0.9
    tau: float = 0.1
    beta0: float = 9999.0
    beta_decay: float = 0.999
    neg_min: float = NEG_MIN

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        weights = [self.lambda_global, self.alpha, self.neg_weight, *self.lambda_task.values()]
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be >= 0")
        if self.beta0 < 0 or not 0 < self.beta_decay <= 1:
            raise ValueError("need beta0 >= 0 and beta_decay in (0, 1]")

    def beta(self, step: int) -> float:
        return self.beta0 * self.beta_decay ** step

    def scaled(self, factor: float) -> "LossConfig":
        return LossConfig(
            lambda_global=self.lambda_global * factor,
            lambda_task={t: w * factor for t, w in self.lambda_task.items()},
            alpha=self.alpha, neg_weight=self.neg_weight, margin=self.margin, tau=self.tau,
            beta0=self.beta0, beta_decay=self.beta_decay, neg_min=self.neg_min,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossOutput:
    value: float
    grads: dict


# ---------------------------------------------------------------- primitives


def logsumexp(x, axis=None, keepdims=False):
    """Stable log-sum-exp; all -inf slices give -inf."""
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]


def bce_calibration(logits, labels) -> LossOutput:
    """Summed BCE on logits; d/dy = sigmoid(y) - l."""
    y = np.asarray(logits, dtype=float)
    lab = np.asarray(labels, dtype=float)
    if np.any((lab != 0) & (lab != 1)):
        raise ValueError("BCE labels must be known 0/1 values")
    value = -np.sum(lab * log_expit(y) + (1 - lab) * log_expit(-y))
    return LossOutput(float(value), {"logits": expit(y) - lab})


def bce_on_probabilities(scores, labels) -> LossOutput:
    """Summed BCE on post-sigmoid scores, clamped to [1e-7, 1 - 1e-7]."""
    s = np.asarray(scores, dtype=float)
    if np.any(~np.isfinite(s)) or np.any((s < 0) | (s > 1)):
        raise ValueError("scores must be probabilities in [0, 1]")
    s = np.clip(s, PROB_CLAMP, 1 - PROB_CLAMP)
    lab = np.asarray(labels, dtype=float)
    value = -np.sum(lab * np.log(s) + (1 - lab) * np.log(1 - s))
    return LossOutput(float(value), {"scores": (s - lab) / (s * (1 - s))})


def listmle(scores) -> LossOutput:
    """ListMLE for scores already sorted by target order.

    L = sum_j [logsumexp(y_j..y_n) - y_j].
    """
    y = np.asarray(scores, dtype=float)
    if y.size == 0:
        return LossOutput(0.0, {"scores": np.zeros(0)})
    suffix = np.logaddexp.accumulate(y[::-1])[::-1]
    value = np.sum(suffix - y)
    # d/dy_i = sum_{j <= i} softmax over suffix j at i, minus 1
    p = np.exp(y[None, :] - suffix[:, None])
    p = np.triu(p)
    return LossOutput(float(value), {"scores": p.sum(axis=0) - 1.0})


def listmle_padded(scores: np.ndarray, valid: np.ndarray) -> LossOutput:
    """Row-wise ListMLE over a [B, K] matrix whose valid entries form a prefix."""
    y = np.where(valid, scores, -np.inf)
    if y.size == 0:
        return LossOutput(0.0, {"scores": np.zeros_like(scores, dtype=float)})
    with np.errstate(invalid="ignore"):
        suffix = np.logaddexp.accumulate(y[:, ::-1], axis=1)[:, ::-1]
        value = np.sum(np.where(valid, suffix - y, 0.0))
        k = y.shape[1]
        upper = np.triu(np.ones((k, k), dtype=bool))
        mask = upper[None] & valid[:, :, None] & valid[:, None, :]
        diff = np.where(mask, y[:, None, :] - np.where(valid, suffix, 0.0)[:, :, None], -np.inf)
    grad = np.exp(diff).sum(axis=1) - valid
    return LossOutput(float(value), {"scores": np.where(valid, grad, 0.0)})


def listnet(scores, relevance) -> LossOutput:
    """Top-one ListNet cross-entropy with target softmax(relevance)."""
    y = np.asarray(scores, dtype=float)
    if y.size == 0:
        return LossOutput(0.0, {"scores": np.zeros(0)})
    rel = np.asarray(relevance, dtype=float)
    target = np.exp(rel - logsumexp(rel))
    log_p = y - logsumexp(y)
    return LossOutput(float(-np.dot(target, log_p)), {"scores": np.exp(log_p) - target})


def infonce(pos, neg, tau: float) -> LossOutput:
    """Sum over positives of -log(e^{p/t} / (e^{p/t} + sum_neg e^{n/t}))."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    p = np.asarray(pos, dtype=float).reshape(-1)
    n = np.asarray(neg, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("infonce needs at least one positive")
    if n.size == 0:
        return LossOutput(0.0, {"pos": np.zeros(p.size), "neg": np.zeros(0)})
    z = np.concatenate([p[:, None], np.broadcast_to(n, (p.size, n.size))], axis=1) / tau
    lse = logsumexp(z, axis=1)
    soft = np.exp(z - lse[:, None])
    return LossOutput(
        float(np.sum(lse - z[:, 0])),
        {"pos": (soft[:, 0] - 1.0) / tau, "neg": soft[:, 1:].sum(axis=0) / tau},
    )


def _contrastive_rows(pos_logits: np.ndarray, p_mask: np.ndarray, neg_logits: np.ndarray, tau: float):
    """-log_softmax(row / tau)[0] for every positive, row = [pos | request negatives].

    ``neg_logits`` is [B, M] with masked slots already filled with neg_min.
    Returns (value, grad wrt pos_logits [B, K], grad wrt neg_logits [B, M]).
    """
    b_idx, k_idx = np.nonzero(p_mask)
    g_pos = np.zeros_like(pos_logits, dtype=float)
    g_neg = np.zeros_like(neg_logits, dtype=float)
    if b_idx.size == 0:
        return 0.0, g_pos, g_neg
    rows = np.concatenate([pos_logits[b_idx, k_idx][:, None], neg_logits[b_idx]], axis=1) / tau
    lse = logsumexp(rows, axis=1)
    soft = np.exp(rows - lse[:, None])
    value = float(np.sum(lse - rows[:, 0]))
    np.add.at(g_pos, (b_idx, k_idx), (soft[:, 0] - 1.0) / tau)
    np.add.at(g_neg, b_idx, soft[:, 1:] / tau)
    return value, g_pos, g_neg


def margin_infonce(logits, v, p_mask, hard_mask, easy_mask, margin: float, tau: float,
                   beta: float = 0.0, neg_min: float = NEG_MIN) -> LossOutput:
    """Margin InfoNCE over [B, K] request matrices (1-D input = one request).

    ``logits`` are raw dot products and ``v`` the norm products |u||i|.
    Positives and hard negatives use the margined logit, blended with the
    plain logit as ``(logit_m + beta * logit) / (1 + beta)``; easy negatives
    use the plain logit. Each positive is contrasted with all of its
    request's negatives; the result is summed over positives.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    squeeze = np.ndim(logits) == 1
    y, vv, pm, hm, em = (np.atleast_2d(np.asarray(a)) for a in (logits, v, p_mask, hard_mask, easy_mask))
    y = y.astype(float)
    vv = vv.astype(float)
    denom = vv + 1e-10
    cos = y / denom
    logits_m = (cos - margin) * denom
    l_update = (logits_m + beta * y) / (1.0 + beta)
    l_hard = np.where(hm, l_update, neg_min)
    l_easy = np.where(em, y, neg_min)
    value, g_pos, g_neg = _contrastive_rows(l_update, pm, np.concatenate([l_hard, l_easy], axis=1), tau)
    k = y.shape[1]
    g_update = g_pos + np.where(hm, g_neg[:, :k], 0.0)
    g_logits = g_update + np.where(em, g_neg[:, k:], 0.0)
    # l_update = y - margin * (v + eps) / (1 + beta)
    g_v = -margin / (1.0 + beta) * g_update
    if squeeze:
        g_logits, g_v = g_logits[0], g_v[0]
    return LossOutput(value, {"logits": g_logits, "v": g_v})


def infonce_padded(logits, p_mask, neg_mask, tau: float, neg_min: float = NEG_MIN) -> LossOutput:
    """Plain InfoNCE over [B, K] request matrices."""
    y = np.atleast_2d(np.asarray(logits, dtype=float))
    pm = np.atleast_2d(p_mask)
    nm = np.atleast_2d(neg_mask)
    value, g_pos, g_neg = _contrastive_rows(y, pm, np.where(nm, y, neg_min), tau)
    grad = g_pos + np.where(nm, g_neg, 0.0)
    return LossOutput(value, {"logits": grad[0] if np.ndim(logits) == 1 else grad})


# ------------------------------------------------------------ batch terms


def pad_index(req: np.ndarray, rows: np.ndarray, n_requests: int) -> np.ndarray:
    """[B, K] matrix of row indices (-1 = padding); ``rows`` already ordered."""
    rows = np.asarray(rows, dtype=np.int64)
    counts = np.bincount(req[rows], minlength=n_requests)
    k = int(counts.max()) if counts.size and rows.size else 0
    out = np.full((n_requests, max(k, 1)), -1, dtype=np.int64)
    if rows.size:
        r = req[rows]
        order = np.argsort(r, kind="stable")
        rows, r = rows[order], r[order]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.arange(rows.size) - starts[r]
        out[r, pos] = rows
    return out


def _gather(values: np.ndarray, idx: np.ndarray, fill=0.0) -> np.ndarray:
    return np.where(idx >= 0, values[np.maximum(idx, 0)], fill)


def _scatter(grad_padded: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    valid = idx >= 0
    np.add.at(out, idx[valid], grad_padded[valid])
    return out


@dataclass(frozen=True)
class NegativePlan:
    """Which negative sets and which contrastive form a task's L_neg uses."""

    hard: bool = True
    easy: bool = True
    margin: bool = True
    weighted_path: bool = True

    @property
    def enabled(self) -> bool:
        return self.hard or self.easy


def term_global_consistency(batch, scored) -> LossOutput:
    """ListMLE over R^c (N1 and N2 rows in r^c order) on the global head."""
    rows = np.flatnonzero(batch.role_mask(SampleRole.N1_IMPRESSION, SampleRole.N2_RANKING_SEQ))
    rows = rows[np.lexsort((batch.r_c[rows], batch.req[rows]))]
    return _listmle_term(batch, scored.heads["global"], rows, "global")


def term_local_consistency(batch, scored, task: str) -> LossOutput:
    rows = np.flatnonzero(batch.e)
    rows = rows[np.lexsort((batch.local_order(task)[rows], batch.req[rows]))]
    return _listmle_term(batch, scored.heads[task], rows, task)


def _listmle_term(batch, y, rows, channel) -> LossOutput:
    idx = pad_index(batch.req, rows, batch.n_requests)
    out = listmle_padded(_gather(y, idx), idx >= 0)
    n = batch.n_requests
    return LossOutput(out.value / n, {channel: _scatter(out.grads["scores"], idx, len(batch)) / n})


def term_calibration(batch, scored, task: str) -> LossOutput:
    rows = np.flatnonzero(batch.e)
    out = bce_calibration(scored.heads[task][rows], batch.labels(task)[rows])
    g = np.zeros(len(batch))
    g[rows] = out.grads["logits"]
    n = batch.n_requests
    return LossOutput(out.value / n, {task: g / n})


def listnet_padded(scores: np.ndarray, relevance: np.ndarray, valid: np.ndarray) -> LossOutput:
    """Row-wise ListNet over a [B, K] matrix; rows without valid entries contribute 0."""
    y = np.where(valid, scores, -np.inf)
    rel = np.where(valid, relevance, -np.inf)
    has = valid.any(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        log_p = y - np.where(has, logsumexp(y, axis=1, keepdims=True), 0.0)
        target = np.exp(rel - np.where(has, logsumexp(rel, axis=1, keepdims=True), 0.0))
        value = -np.sum(np.where(valid, target * log_p, 0.0))
    grad = np.where(valid, np.exp(log_p) - target, 0.0)
    return LossOutput(float(value), {"scores": grad})


def term_listnet(batch, scored, task: str) -> LossOutput:
    rows = np.flatnonzero(batch.e)
    idx = pad_index(batch.req, rows, batch.n_requests)
    valid = idx >= 0
    out = listnet_padded(_gather(scored.heads[task], idx), _gather(batch.labels(task).astype(float), idx), valid)
    n = batch.n_requests
    return LossOutput(out.value / n, {task: _scatter(out.grads["scores"], idx, len(batch)) / n})


def term_negative(batch, scored, task: str, plan: NegativePlan, config: LossConfig, step: int) -> LossOutput:
    """L_neg for one task: mean of the enabled contrastive paths.

    Dot-product path: positives (N1, label 1) against the enabled hard (N2,
    N3) and easy (N4, N5) negatives, with or without the additive margin.
    Weighted-score path: plain InfoNCE on the cross-weighted score against
    hard negatives only, since N4/N5 carry no cross features.
    """
    n_rows, n_req = len(batch), batch.n_requests
    idx = pad_index(batch.req, np.arange(n_rows), n_req)
    valid = idx >= 0
    role = _gather(batch.role, idx, 0).astype(int)
    pos = valid & (role == 1) & (_gather(batch.labels(task), idx, 0) == 1)
    hard = valid & np.isin(role, (2, 3)) if plan.hard else np.zeros_like(valid)
    easy = valid & np.isin(role, (4, 5)) if plan.easy else np.zeros_like(valid)

    value = 0.0
    grads: dict = {}
    paths = 0
    dot = _gather(scored.dot, idx)
    if plan.margin:
        out = margin_infonce(dot, _gather(scored.v, idx), pos, hard, easy, config.margin, config.tau,
                             config.beta(step), config.neg_min)
        grads["v"] = _scatter(out.grads["v"], idx, n_rows)
    else:
        out = infonce_padded(dot, pos, hard | easy, config.tau, config.neg_min)
    value += out.value
    grads["dot"] = _scatter(out.grads["logits"], idx, n_rows)
    paths += 1
    if plan.weighted_path and plan.hard:
        w_out = infonce_padded(_gather(scored.score, idx), pos, hard, config.tau, config.neg_min)
        value += w_out.value
        grads["score"] = _scatter(w_out.grads["logits"], idx, n_rows)
        paths += 1
    scale = 1.0 / (paths * n_req)
    return LossOutput(value * scale, {k: g * scale for k, g in grads.items()})


@dataclass(frozen=True)
class LossPlan:
    """Loss terms a training variant enables."""

    calibration: bool = True
    local_consistency: bool = False
    listnet: bool = False
    global_consistency: bool = False
    negatives: Optional[NegativePlan] = None


def hybrid_terms(batch, scored, plan: LossPlan, config: LossConfig, step: int,
                 audit: Optional[list] = None) -> dict:
    """Evaluate every enabled term; names match :func:`combined_loss` slots."""
    terms = {}

    def record(name, fn, *args):
        if audit is not None:
            audit.append(name)
        terms[name] = fn(*args)

    if plan.global_consistency:
        record("global", term_global_consistency, batch, scored)
    for t in LOCAL_TASKS:
        if plan.calibration:
            record(f"cali_{t}", term_calibration, batch, scored, t)
        if plan.local_consistency:
            record(f"cons_{t}", term_local_consistency, batch, scored, t)
        if plan.listnet:
            record(f"listnet_{t}", term_listnet, batch, scored, t)
        if plan.negatives is not None and plan.negatives.enabled:
            record(f"neg_{t}", term_negative, batch, scored, t, plan.negatives, config, step)
    return terms


def term_weights(config: LossConfig) -> dict:
    w = {"global": config.lambda_global}
    for t, lam in config.lambda_task.items():
        w[f"cali_{t}"] = lam
        w[f"cons_{t}"] = lam * config.alpha
        w[f"listnet_{t}"] = lam * config.alpha
        w[f"neg_{t}"] = lam * config.neg_weight
    return w


def combined_loss(terms: dict, config: LossConfig) -> LossOutput:
    """L = lc*L^c + sum_t lt*(L_cali + alpha*L_cons + beta*L_neg).

    ListNet terms (baseline only) take the local-consistency slot.
    """
    weights = term_weights(config)
    value = 0.0
    grads: dict = {}
    for name, out in terms.items():
        w = weights.get(name, 0.0)
        value += w * out.value
        for ch, g in out.grads.items():
            grads[ch] = grads[ch] + w * g if ch in grads else w * g
    return LossOutput(float(value), grads)


# ------------------------------------------------------- gradient profiles


@dataclass
class GradientProfile:
    y: np.ndarray
    f: np.ndarray
    g: np.ndarray
    crossing: Optional[float]
    params: dict


def bce_negative_gradient(y):
    """Gradient of BCE w.r.t. a negative's logit: sigmoid(y)."""
    return expit(np.asarray(y, dtype=float))


def margin_negative_gradient(y, q: float, c: float, tau: float):
    """Approximate Margin InfoNCE gradient on a hard negative: (1/t) / (1 + c e^{(q-y)/t})."""
    return expit((np.asarray(y, dtype=float) - q) / tau - np.log(c)) / tau


def _bisect(h, lo: float, hi: float, tol: float = 1e-10) -> float:
    h_lo = h(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        h_mid = h(mid)
        if h_mid == 0.0:
            return mid
        if (h_mid > 0) == (h_lo > 0):
            lo, h_lo = mid, h_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gradient_profiles(y_min: float, y_max: float, q: float, c: float, tau: float,
                      step: float = 0.01) -> GradientProfile:
    """Sample f (margin InfoNCE) and g (BCE) on [y_min, y_max] and locate f = g.

    The crossing is the first sign change of f - g on the grid, refined by
    bisection to 1e-10; ``None`` when the curves do not cross in range.
    """
    if tau <= 0 or c <= 0:
        raise ValueError("need tau > 0 and c > 0")
    n = int(np.floor((y_max - y_min) / step + 1e-9)) + 1
    y = y_min + step * np.arange(n)
    f = margin_negative_gradient(y, q, c, tau)
    g = bce_negative_gradient(y)
    h = f - g
    crossing = None
    sign = np.sign(h)
    change = np.flatnonzero(sign[:-1] * sign[1:] <= 0)
    if change.size:
        i = int(change[0])
        if h[i] == 0.0:
            crossing = float(y[i])
        else:
            hf = lambda x: float(margin_negative_gradient(x, q, c, tau) - bce_negative_gradient(x))
            crossing = _bisect(hf, float(y[i]), float(y[i + 1]))
    return GradientProfile(y, f, g, crossing, {"q": q, "c": c, "tau": tau})

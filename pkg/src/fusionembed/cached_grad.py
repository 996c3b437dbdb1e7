"""Closed-form loss gradients with respect to every embedding set, and hard-negative amplification.

The per-query routine :func:`cached_gradients` follows the expanded gradient
formulas term by term.  :func:`inbatch_gradients` is the batched form used by
the trainer: every query sees the other rows' positives as negatives and the
contributions of all queries are accumulated onto shared target embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import multivec as mv
from .errors import DimensionError, DomainError, PreconditionError
from .loss import BatchSimilarities, batched_infonce, classification_probs, infonce_loss

EXP_CLAMP = 700.0

# test hook for the gradcheck mutation run: flips the sign of the positive's
# global-row term in the query row-0 gradient
_FAULTS = {"flip_query_global_positive": False}


def set_fault(name: str, enabled: bool) -> None:
    if name not in _FAULTS:
        raise KeyError(name)
    _FAULTS[name] = enabled


@dataclass
class Diagnostics:
    overflow_clamped: int = 0
    underflow_fallback: int = 0
    hardness: list = field(default_factory=list)

    def merge(self, other: "Diagnostics") -> None:
        self.overflow_clamped += other.overflow_clamped
        self.underflow_fallback += other.underflow_fallback
        self.hardness.extend(other.hardness)

    def hardness_stats(self) -> dict:
        if not self.hardness:
            return {"min": 1.0, "mean": 1.0, "max": 1.0}
        h = np.asarray(self.hardness)
        return {"min": float(h.min()), "mean": float(h.mean()), "max": float(h.max())}

    def to_record(self) -> dict:
        return {
            "overflow_clamped": self.overflow_clamped,
            "underflow_fallback": self.underflow_fallback,
            "hardness": self.hardness_stats(),
        }


@dataclass(frozen=True)
class ContrastiveBatch:
    query: mv.EmbeddingSet
    positive: mv.EmbeddingSet
    negatives: tuple
    tau: float = 0.02
    alpha: float = 0.0
    mask: mv.PatternMask = mv.FULL_MASK

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        shape = self.query.vectors.shape
        for k, x in enumerate((self.positive, *self.negatives)):
            if x.vectors.shape != shape:
                raise DimensionError(f"target {k} has shape {x.vectors.shape}, query has {shape}")
        if not (self.tau > 0):
            raise DomainError(f"temperature must be positive, got {self.tau}")
        if not (self.alpha >= 0):
            raise DomainError(f"alpha must be nonnegative, got {self.alpha}")

    @classmethod
    def from_arrays(cls, query, positive, negatives, **kw) -> "ContrastiveBatch":
        return cls(
            mv.EmbeddingSet(np.asarray(query, dtype=np.float64)),
            mv.EmbeddingSet(np.asarray(positive, dtype=np.float64)),
            tuple(mv.EmbeddingSet(np.asarray(n, dtype=np.float64)) for n in negatives),
            **kw,
        )

    def replace_arrays(self, query, positive, negatives) -> "ContrastiveBatch":
        return ContrastiveBatch.from_arrays(
            query, positive, negatives, tau=self.tau, alpha=self.alpha, mask=self.mask
        )

    def arrays(self) -> "tuple[np.ndarray, np.ndarray, list]":
        return self.query.vectors, self.positive.vectors, [n.vectors for n in self.negatives]


@dataclass
class CachedGradientSet:
    d_query: np.ndarray
    d_positive: np.ndarray
    d_negatives: list
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def flat(self) -> np.ndarray:
        parts = [self.d_query.ravel(), self.d_positive.ravel()] + [d.ravel() for d in self.d_negatives]
        return np.concatenate(parts)


def hardness(s_final_neg, s_final_pos: float, alpha: float, diagnostics: "Diagnostics | None" = None) -> np.ndarray:
    """``exp(alpha * (s_neg - s_pos))`` on unscaled fused scores, argument clamped at 700."""
    s_neg = np.asarray(s_final_neg, dtype=np.float64)
    if not (np.all(np.isfinite(s_neg)) and math.isfinite(s_final_pos) and math.isfinite(alpha)):
        raise DomainError("hardness inputs must be finite")
    if alpha < 0:
        raise DomainError(f"alpha must be nonnegative, got {alpha}")
    arg = alpha * (s_neg - s_final_pos)
    over = arg > EXP_CLAMP
    if np.any(over):
        arg = np.minimum(arg, EXP_CLAMP)
        if diagnostics is not None:
            diagnostics.overflow_clamped += int(np.sum(over))
    h = np.exp(arg)
    if diagnostics is not None:
        diagnostics.hardness.extend(h.tolist())
    return h


def reassign_probs(p_neg, h, diagnostics: "Diagnostics | None" = None) -> np.ndarray:
    """Scale negative probabilities by hardness, keeping their total mass."""
    p = np.asarray(p_neg, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if p.shape != h.shape:
        raise DimensionError(f"probabilities {p.shape} and hardness {h.shape} differ")
    total = np.sum(p)
    if not total > 0:
        raise PreconditionError("negative probabilities must have positive mass")
    if np.all(h == 1.0):
        return p.copy()
    p_hat = p * h
    z = np.sum(p_hat)
    if not z > 0:
        if diagnostics is not None:
            diagnostics.underflow_fallback += 1
        return p.copy()
    return p_hat / z * total


def _phi_grads(q: np.ndarray, t: np.ndarray, w: mv.PatternWeights, tau: float):
    """Gradient of ``phi(q, t)`` with respect to every row of ``q`` and of ``t``."""
    dq = np.empty_like(q)
    dt = np.empty_like(t)
    dq[0] = w.w_g2g * t[0] + w.w_g2f @ t[1:]
    dq[1:] = w.w_f2g[:, None] * t[0] + w.w_f2f[:, None] * t[1:]
    dt[0] = w.w_g2g * q[0] + w.w_f2g @ q[1:]
    dt[1:] = w.w_g2f[:, None] * q[0] + w.w_f2f[:, None] * q[1:]
    return dq / tau, dt / tau


def cached_gradients(
    batch: ContrastiveBatch,
    aggregator: "mv.Aggregator | str" = mv.Aggregator.LOGSUMEXP,
    ega: bool = True,
) -> CachedGradientSet:
    """Loss gradient for every embedding set of one query's contrastive batch.

    With ``alpha > 0`` (and ``ega`` on) the negatives' classification
    probabilities are reassigned by hardness before substitution; the
    positive's factor is taken as ``-sum(p_neg)`` so that all three blocks use
    the same probabilities.
    """
    if mv.Aggregator.parse(aggregator) is not mv.Aggregator.LOGSUMEXP:
        raise PreconditionError("closed-form cached gradients exist only for logsumexp aggregation")
    tau, mask = batch.tau, batch.mask
    q, tp, negs = batch.arrays()
    diag = Diagnostics()
    if not negs:
        return CachedGradientSet(np.zeros_like(q), np.zeros_like(tp), [], diag)

    targets = [batch.positive, *batch.negatives]
    breakdowns = [mv.similarity_breakdown(batch.query, t, mask) for t in targets]
    # one PatternWeights per (query, target) pair, reused below
    weights = [mv.pattern_weights(b) for b in breakdowns]
    s = np.array([b.s_final for b in breakdowns])
    probs = classification_probs(BatchSimilarities.from_scores(s[0], s[1:], tau))
    p_neg = probs.p_neg
    if ega and batch.alpha > 0:
        h = hardness(s[1:], s[0], batch.alpha, diag)
        p_neg = reassign_probs(p_neg, h, diag)

    dq_pos, dt_pos = _phi_grads(q, tp, weights[0], tau)
    if _FAULTS["flip_query_global_positive"]:
        dq_pos = dq_pos.copy()
        dq_pos[0] -= 2.0 * weights[0].w_g2g * tp[0] / tau

    d_query = np.zeros_like(q)
    d_negatives = []
    for i, t in enumerate(negs):
        dq_i, dt_i = _phi_grads(q, t, weights[i + 1], tau)
        d_query += p_neg[i] * (dq_i - dq_pos)
        d_negatives.append(p_neg[i] * dt_i)
    d_positive = -np.sum(p_neg) * dt_pos

    out = CachedGradientSet(d_query, d_positive, d_negatives, diag)
    for k, d in enumerate([d_query, d_positive, *d_negatives]):
        if not np.all(np.isfinite(d)):
            raise DomainError("non-finite cached gradient", pair_index=k)
    return out


def contrastive_loss(batch: ContrastiveBatch, aggregator="logsumexp") -> float:
    """Full InfoNCE of one query against its positive and negatives."""
    agg = mv.Aggregator.parse(aggregator)
    s_pos = mv.similarity_breakdown(batch.query, batch.positive, batch.mask, agg).s_final
    s_neg = [mv.similarity_breakdown(batch.query, t, batch.mask, agg).s_final for t in batch.negatives]
    return infonce_loss(BatchSimilarities.from_scores(s_pos, s_neg, batch.tau))


def _fast_loss(q, targets, tau, term_mask) -> float:
    # vectorized equivalent of contrastive_loss for the finite-difference sweep
    n = q.shape[0] - 1
    g2g = targets[:, 0] @ q[0]
    f2g = targets[:, 0] @ q[1:].T  # (targets, N)
    g2f = targets[:, 1:] @ q[0]
    f2f = np.sum(targets[:, 1:] * q[1:], axis=2)
    terms = np.concatenate([g2g[:, None], f2g, g2f, f2f], axis=1)
    s = mv.masked_logsumexp(terms, term_mask)
    # logits relative to the positive; log1p keeps saturated losses accurate
    # to their own magnitude instead of to the logit scale
    d = (s - s[0]) / tau
    top = int(np.argmax(d))
    rest = np.delete(d, top)
    return float(d[top] + math.log1p(np.sum(np.exp(rest - d[top]))))


def finite_difference_gradients(batch: ContrastiveBatch, step: float = 1e-6) -> CachedGradientSet:
    """Central differences of the alpha = 0 loss with respect to every embedding entry."""
    if not (1e-8 <= step <= 1e-3):
        raise PreconditionError(f"step must lie in [1e-8, 1e-3], got {step}")
    q, tp, negs = batch.arrays()
    targets = np.stack([tp, *negs]).astype(np.float64)
    q = q.astype(np.float64).copy()
    tm = batch.mask.term_mask(q.shape[0] - 1)
    tau = batch.tau

    def f():
        return _fast_loss(q, targets, tau, tm)

    dq = np.zeros_like(q)
    for idx in np.ndindex(q.shape):
        x0 = q[idx]
        q[idx] = x0 + step
        up = f()
        q[idx] = x0 - step
        dn = f()
        q[idx] = x0
        dq[idx] = (up - dn) / (2 * step)
    dt = np.zeros_like(targets)
    for idx in np.ndindex(targets.shape):
        x0 = targets[idx]
        targets[idx] = x0 + step
        up = f()
        targets[idx] = x0 - step
        dn = f()
        targets[idx] = x0
        dt[idx] = (up - dn) / (2 * step)
    return CachedGradientSet(dq, dt[0], list(dt[1:]))


# ---------------------------------------------------------------------------
# in-batch form used by the trainer


@dataclass
class InBatchResult:
    loss: float
    losses: np.ndarray
    d_queries: np.ndarray
    d_targets: np.ndarray
    probs: np.ndarray
    scores: np.ndarray
    diagnostics: Diagnostics


def inbatch_gradients(
    Q: np.ndarray,
    T: np.ndarray,
    tau: float,
    alpha: float = 0.0,
    mask: mv.PatternMask = mv.FULL_MASK,
    aggregator: "mv.Aggregator | str" = mv.Aggregator.LOGSUMEXP,
    valid: "np.ndarray | None" = None,
    ega: bool = True,
) -> InBatchResult:
    """Mean in-batch InfoNCE and its gradients for queries ``Q`` and positives ``T``.

    Row ``b`` of ``T`` is the positive of query ``b``; the remaining rows where
    ``valid[b, c]`` holds are its negatives.  For ``logsumexp`` each query's
    contribution equals :func:`cached_gradients` on the corresponding batch.
    ``max`` and ``mean_max`` use argmax subgradients and never apply
    amplification.
    """
    if Q.shape != T.shape or Q.ndim != 3:
        raise DimensionError(f"queries {Q.shape} and positives {T.shape} must match as (B, N+1, D)")
    if not (tau > 0):
        raise DomainError(f"temperature must be positive, got {tau}")
    agg = mv.Aggregator.parse(aggregator)
    B = Q.shape[0]
    eye = np.eye(B, dtype=bool)
    if valid is None:
        valid = ~eye
    valid = valid & ~eye

    fused = mv.fuse_grid(mv.pairwise_grid(Q, T), mask, agg)
    s = fused.scores
    losses, probs = batched_infonce(s / tau, valid)
    if not np.all(np.isfinite(losses)):
        raise DomainError("non-finite loss", pair_index=int(np.argmax(~np.isfinite(losses))))

    diag = Diagnostics()
    p_neg = np.where(valid, probs, 0.0)
    if ega and alpha > 0 and agg is mv.Aggregator.LOGSUMEXP:
        for b in range(B):
            cols = np.flatnonzero(valid[b])
            if cols.size == 0:
                continue
            h = hardness(s[b, cols], s[b, b], alpha, diag)
            p_neg[b, cols] = reassign_probs(p_neg[b, cols], h, diag)

    # d loss_b / d s[b, c]: p_neg off the diagonal, -(sum of p_neg) on it
    coef = p_neg.copy()
    coef[eye] = -np.sum(p_neg, axis=1)
    coef /= tau * B
    g = coef[:, :, None, None] * fused.grid_weights
    dQ = np.einsum("abij,bjd->aid", g, T)
    dT = np.einsum("abij,aid->bjd", g, Q)
    return InBatchResult(float(np.mean(losses)), losses, dQ, dT, probs, s, diag)


def inbatch_loss(
    Q: np.ndarray,
    T: np.ndarray,
    tau: float,
    mask: mv.PatternMask = mv.FULL_MASK,
    aggregator="logsumexp",
    valid: "np.ndarray | None" = None,
) -> float:
    B = Q.shape[0]
    eye = np.eye(B, dtype=bool)
    valid = (~eye if valid is None else valid) & ~eye
    fused = mv.fuse_grid(mv.pairwise_grid(Q, T), mask, aggregator, with_weights=False)
    losses, _ = batched_infonce(fused.scores / tau, valid)
    return float(np.mean(losses))

"""Temperature-scaled InfoNCE over fused similarities (query -> target direction only)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class BatchSimilarities:
    phi_pos: float
    phi_neg: np.ndarray
    tau: float

    def __post_init__(self):
        neg = np.atleast_1d(np.asarray(self.phi_neg, dtype=np.float64))
        object.__setattr__(self, "phi_neg", neg)
        if not (self.tau > 0):
            raise DomainError(f"temperature must be positive, got {self.tau}")
        if not (np.isfinite(self.phi_pos) and np.all(np.isfinite(neg))):
            raise DomainError("non-finite logit in batch similarities")

    @classmethod
    def from_scores(cls, s_pos: float, s_neg, tau: float) -> "BatchSimilarities":
        s_neg = np.asarray(s_neg, dtype=np.float64)
        return cls(phi(s_pos, tau), s_neg / tau if s_neg.size else s_neg, tau)

    def logits(self) -> np.ndarray:
        return np.concatenate([[self.phi_pos], self.phi_neg])


@dataclass(frozen=True)
class BatchProbabilities:
    p_pos: float
    p_neg: np.ndarray
    p_neg_reassigned: "np.ndarray | None" = None

    def effective_negatives(self) -> np.ndarray:
        return self.p_neg if self.p_neg_reassigned is None else self.p_neg_reassigned


def phi(s_final: float, tau: float) -> float:
    if not (tau > 0):
        raise DomainError(f"temperature must be positive, got {tau}")
    return s_final / tau


def _relative_lse(d: np.ndarray) -> float:
    # log(sum(exp(d))) as top + log1p(rest): exact to the magnitude of the
    # result even when one entry dominates
    top = int(np.argmax(d))
    rest = np.delete(d, top)
    return float(d[top] + math.log1p(float(np.sum(np.exp(rest - d[top])))))


def infonce_loss(bs: BatchSimilarities) -> float:
    # logits are taken relative to the positive, so both parts are >= 0
    return _relative_lse(bs.logits() - bs.phi_pos)


def classification_probs(bs: BatchSimilarities) -> BatchProbabilities:
    logits = bs.logits()
    e = np.exp(logits - np.max(logits))
    p = e / np.sum(e)
    return BatchProbabilities(float(p[0]), p[1:].copy())


def batched_infonce(logits: np.ndarray, valid: np.ndarray) -> "tuple[np.ndarray, np.ndarray]":
    """Row-wise InfoNCE for in-batch logits where the positive sits on the diagonal.

    ``valid[b, c]`` marks entries taking part in row ``b``'s softmax (the
    diagonal is always valid).  Returns per-row losses and the probability
    matrix (zeros off ``valid``).
    """
    valid = valid | np.eye(logits.shape[0], dtype=bool)
    if not np.all(np.isfinite(logits[valid])):
        bad = int(np.argwhere(~np.all(np.isfinite(np.where(valid, logits, 0.0)), axis=1))[0, 0])
        raise DomainError("non-finite logit in batch", pair_index=bad)
    m = np.max(np.where(valid, logits, -np.inf), axis=1, keepdims=True)
    e = np.where(valid, np.exp(np.where(valid, logits - m, 0.0)), 0.0)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    # loss relative to the positive: (m - diag) + log1p(mass beyond the top entry)
    top = np.argmax(np.where(valid, logits, -np.inf), axis=1)
    rest = e.copy()
    rest[np.arange(len(top)), top] = 0.0
    losses = (m[:, 0] - np.diag(logits)) + np.log1p(np.sum(rest, axis=1))
    return losses, probs

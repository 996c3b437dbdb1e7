"""Multi-vector embedding sets and their fused similarity.

An item is embedded as ``N + 1`` rows: row 0 is the global embedding and rows
``1..N`` are fine-grained embeddings.  Two sets are compared through four
similarity families::

    g2g     q[0] . t[0]
    f2g_i   q[i] . t[0]      i = 1..N
    g2f_i   q[0] . t[i]
    f2f_i   q[i] . t[i]

giving ``3N + 1`` raw terms that are fused into one score by ``logsumexp``
(default), ``max`` or the grid-wide ``mean_max`` rule.

Throughout the package the raw terms are kept in one flat vector ordered
``[g2g, f2g_1..f2g_N, g2f_1..g2f_N, f2f_1..f2f_N]``.  The batched helpers at
the bottom of this module work on that layout for whole batches at once.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbeddingError, DimensionError, DomainError, PreconditionError

FAMILIES = ("g2g", "f2g", "g2f", "f2f")

# below this a row is treated as all-zero and cannot be normalized
NORM_FLOOR = 1e-12


class Aggregator(str, enum.Enum):
    LOGSUMEXP = "logsumexp"
    MAX = "max"
    MEAN_MAX = "mean_max"

    @classmethod
    def parse(cls, value: "str | Aggregator") -> "Aggregator":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_"))


@dataclass(frozen=True)
class EmbeddingSet:
    """One global row plus ``n_fine`` fine-grained rows, shape ``(n_fine + 1, dim)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"embedding set must be a (N+1) x D matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("embedding set contains non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def n_fine(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_array(cls, array, normalize: bool = False) -> "EmbeddingSet":
        v = np.array(array, dtype=np.float64)
        if normalize:
            v = normalize_rows(v)
        return cls(v)

    def normalized(self) -> "EmbeddingSet":
        return EmbeddingSet(normalize_rows(self.vectors))


def normalize_rows(v: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        raise DegenerateEmbeddingError("cannot normalize a row with norm < 1e-12")
    return v / norms


@dataclass(frozen=True)
class PatternMask:
    """Which similarity families take part in fusion; excluded ones act as ``-inf``."""

    use_g2g: bool = True
    use_f2g: bool = True
    use_g2f: bool = True
    use_f2f: bool = True

    def __post_init__(self):
        if not (self.use_g2g or self.use_f2g or self.use_g2f or self.use_f2f):
            raise PreconditionError("at least one similarity family must stay active")

    @property
    def is_full(self) -> bool:
        return self.use_g2g and self.use_f2g and self.use_g2f and self.use_f2f

    @property
    def flags(self) -> tuple:
        return (self.use_g2g, self.use_f2g, self.use_g2f, self.use_f2f)

    @classmethod
    def excluding(cls, *families: str) -> "PatternMask":
        unknown = set(families) - set(FAMILIES)
        if unknown:
            raise PreconditionError(f"unknown similarity families: {sorted(unknown)}")
        return cls(**{f"use_{f}": f not in families for f in FAMILIES})

    def term_mask(self, n_fine: int) -> np.ndarray:
        """Boolean vector over the ``3N + 1`` flat terms."""
        g2g, f2g, g2f, f2f = self.flags
        return np.concatenate([[g2g], np.full(n_fine, f2g), np.full(n_fine, g2f), np.full(n_fine, f2f)]).astype(bool)

    def label(self) -> str:
        if self.is_full:
            return "full"
        return "+".join(f for f, on in zip(FAMILIES, self.flags) if on)


FULL_MASK = PatternMask()


@dataclass(frozen=True)
class SimilarityBreakdown:
    s_g2g: float
    s_f2g: np.ndarray
    s_g2f: np.ndarray
    s_f2f: np.ndarray
    s_final: float
    mask: PatternMask = FULL_MASK
    aggregator: Aggregator = Aggregator.LOGSUMEXP

    @property
    def n_fine(self) -> int:
        return len(self.s_f2g)

    def terms(self) -> np.ndarray:
        return np.concatenate([[self.s_g2g], self.s_f2g, self.s_g2f, self.s_f2f])

    def term_mask(self) -> np.ndarray:
        return self.mask.term_mask(self.n_fine)

    def active_terms(self) -> np.ndarray:
        return self.terms()[self.term_mask()]


@dataclass(frozen=True)
class PatternWeights:
    w_g2g: float
    w_f2g: np.ndarray
    w_g2f: np.ndarray
    w_f2f: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([[self.w_g2g], self.w_f2g, self.w_g2f, self.w_f2f])

    @classmethod
    def from_flat(cls, w: np.ndarray) -> "PatternWeights":
        n = (len(w) - 1) // 3
        return cls(float(w[0]), w[1 : n + 1].copy(), w[n + 1 : 2 * n + 1].copy(), w[2 * n + 1 :].copy())


def _check_pair(xq: EmbeddingSet, xt: EmbeddingSet) -> None:
    if xq.vectors.shape != xt.vectors.shape:
        raise DimensionError(f"query shape {xq.vectors.shape} != target shape {xt.vectors.shape}")


def raw_terms(xq: EmbeddingSet, xt: EmbeddingSet) -> np.ndarray:
    """The ``3N + 1`` raw similarities in flat order."""
    _check_pair(xq, xt)
    q, t = xq.vectors, xt.vectors
    g2g = q[0] @ t[0]
    f2g = q[1:] @ t[0]
    g2f = t[1:] @ q[0]
    f2f = np.sum(q[1:] * t[1:], axis=1)
    return np.concatenate([[g2g], f2g, g2f, f2f])


def similarity_breakdown(
    xq: EmbeddingSet,
    xt: EmbeddingSet,
    mask: PatternMask = FULL_MASK,
    aggregator: "Aggregator | str" = Aggregator.LOGSUMEXP,
) -> SimilarityBreakdown:
    aggregator = Aggregator.parse(aggregator)
    terms = raw_terms(xq, xt)
    n = xq.n_fine
    tm = mask.term_mask(n)
    if aggregator is Aggregator.MEAN_MAX:
        s_final = aggregate_mean_max(xq, xt)
    elif aggregator is Aggregator.MAX:
        s_final = float(np.max(terms[tm]))
    else:
        s_final = masked_logsumexp(terms, tm)
    return SimilarityBreakdown(
        s_g2g=float(terms[0]),
        s_f2g=terms[1 : n + 1],
        s_g2f=terms[n + 1 : 2 * n + 1],
        s_f2f=terms[2 * n + 1 :],
        s_final=float(s_final),
        mask=mask,
        aggregator=aggregator,
    )


def aggregate_logsumexp(b: SimilarityBreakdown) -> float:
    return float(masked_logsumexp(b.terms(), b.term_mask()))


def aggregate_max(b: SimilarityBreakdown) -> float:
    active = b.active_terms()
    if active.size == 0:
        raise PreconditionError("no unmasked similarity terms")
    return float(np.max(active))


def aggregate_mean_max(xq: EmbeddingSet, xt: EmbeddingSet) -> float:
    """Sum over query rows of the best dot product against any target row."""
    _check_pair(xq, xt)
    grid = xq.vectors @ xt.vectors.T
    return float(np.sum(np.max(grid, axis=1)))


def pattern_weights(b: SimilarityBreakdown) -> PatternWeights:
    """Normalized probabilities of each raw term; also ``d s_final / d term``."""
    if b.aggregator is not Aggregator.LOGSUMEXP:
        raise PreconditionError("pattern weights are defined for the logsumexp aggregator only")
    w = softmax_terms(b.terms(), b.term_mask())
    return PatternWeights.from_flat(w)


# ---------------------------------------------------------------------------
# flat-term and batched helpers


def masked_logsumexp(terms: np.ndarray, term_mask: np.ndarray) -> np.ndarray:
    """Max-shifted logsumexp over the last axis, counting only unmasked entries.

    Masked entries never enter ``exp`` so no ``-inf`` or NaN is produced.
    """
    terms = np.asarray(terms)
    term_mask = np.broadcast_to(np.asarray(term_mask, dtype=bool), terms.shape)
    if not np.all(np.any(term_mask, axis=-1)):
        raise PreconditionError("no unmasked similarity terms")
    active = terms[term_mask]
    if not np.all(np.isfinite(active)):
        raise DomainError("non-finite similarity term")
    m = np.max(np.where(term_mask, terms, -np.inf), axis=-1, keepdims=True)
    e = np.where(term_mask, np.exp(np.where(term_mask, terms - m, 0.0)), 0.0)
    out = m[..., 0] + np.log(np.sum(e, axis=-1))
    return out if out.ndim else out[()]


def softmax_terms(terms: np.ndarray, term_mask: np.ndarray) -> np.ndarray:
    """Softmax over unmasked entries of the last axis; masked entries get exactly 0."""
    terms = np.asarray(terms)
    term_mask = np.broadcast_to(np.asarray(term_mask, dtype=bool), terms.shape)
    m = np.max(np.where(term_mask, terms, -np.inf), axis=-1, keepdims=True)
    e = np.where(term_mask, np.exp(np.where(term_mask, terms - m, 0.0)), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def argmax_onehot(values: np.ndarray, valid: "np.ndarray | None" = None) -> np.ndarray:
    """One-hot of the first maximum along the last axis (ties -> lowest index)."""
    if valid is not None:
        values = np.where(np.broadcast_to(valid, values.shape), values, -np.inf)
    idx = np.argmax(values, axis=-1)
    out = np.zeros(values.shape, dtype=values.dtype if np.issubdtype(values.dtype, np.floating) else np.float64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def pairwise_grid(Q: np.ndarray, T: np.ndarray) -> np.ndarray:
    """All row dot products: ``grid[a, b, i, j] = Q[a, i] . T[b, j]``."""
    if Q.shape[1:] != T.shape[1:]:
        raise DimensionError(f"query sets {Q.shape[1:]} and target sets {T.shape[1:]} differ")
    return np.einsum("aid,bjd->abij", Q, T)


def terms_from_grid(grid: np.ndarray) -> np.ndarray:
    """Extract the ``3N + 1`` flat terms from ``(..., N+1, N+1)`` dot-product grids."""
    n = grid.shape[-1] - 1
    idx = np.arange(1, n + 1)
    return np.concatenate(
        [grid[..., 0, :1], grid[..., idx, 0], grid[..., 0, idx], grid[..., idx, idx]],
        axis=-1,
    )


def grid_from_terms(term_values: np.ndarray) -> np.ndarray:
    """Scatter flat term values back onto their grid positions; all other cells are 0."""
    k = term_values.shape[-1]
    n = (k - 1) // 3
    idx = np.arange(1, n + 1)
    out = np.zeros(term_values.shape[:-1] + (n + 1, n + 1), dtype=term_values.dtype)
    out[..., 0, 0] = term_values[..., 0]
    out[..., idx, 0] = term_values[..., 1 : n + 1]
    out[..., 0, idx] = term_values[..., n + 1 : 2 * n + 1]
    out[..., idx, idx] = term_values[..., 2 * n + 1 :]
    return out


@dataclass
class FusedScores:
    """Batched fused scores plus ``d score / d grid`` for each query/target pair."""

    scores: np.ndarray  # (Bq, Bt)
    grid_weights: np.ndarray  # (Bq, Bt, N+1, N+1)
    terms: "np.ndarray | None" = field(default=None)


def fuse_grid(
    grid: np.ndarray,
    mask: PatternMask = FULL_MASK,
    aggregator: "Aggregator | str" = Aggregator.LOGSUMEXP,
    with_weights: bool = True,
) -> FusedScores:
    """Fuse ``(..., N+1, N+1)`` grids into scores, optionally with their (sub)gradients.

    ``logsumexp`` weights are the pattern weights; ``max`` routes to the first
    maximal term in flat order; ``mean_max`` routes each query row to its first
    maximal target row.
    """
    aggregator = Aggregator.parse(aggregator)
    if aggregator is Aggregator.MEAN_MAX:
        if not mask.is_full:
            raise PreconditionError("mean_max aggregation does not support pattern masks")
        scores = np.sum(np.max(grid, axis=-1), axis=-1)
        gw = argmax_onehot(grid) if with_weights else None
        return FusedScores(scores, gw)
    n = grid.shape[-1] - 1
    terms = terms_from_grid(grid)
    tm = mask.term_mask(n)
    if aggregator is Aggregator.MAX:
        scores = np.max(np.where(tm, terms, -np.inf), axis=-1)
        tw = argmax_onehot(terms, tm) if with_weights else None
    else:
        scores = masked_logsumexp(terms, tm)
        tw = softmax_terms(terms, tm) if with_weights else None
    gw = grid_from_terms(tw) if with_weights else None
    return FusedScores(np.asarray(scores), gw, terms)


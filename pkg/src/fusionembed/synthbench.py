"""Synthetic retrieval data with planted perceptual patterns, Precision@1, and the ablation grid.

Every item is ``K + 1`` unit-norm blocks of ``block_dim`` features: one
global block followed by ``K`` aspect blocks.  A query/positive pair is
linked through exactly one planted block copy whose position depends on the
pair's pattern:

    g2g   target global   <- query global
    f2g   target global   <- query aspect k
    g2f   target aspect k <- query global
    f2f   target aspect k <- query aspect k

with ``k`` uniform in ``1..K`` and Gaussian noise of total norm about
``noise_sigma`` added to the copy.  All other blocks are independent.

With ``hard_cluster = c > 0`` pairs come in runs of ``c`` that share every
unplanted block, so targets in one run are near duplicates of each other.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import multivec as mv
from .errors import ConfigError, FormatError

PATTERNS = mv.FAMILIES
DATA_MAGIC = b"FEMBDATA"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIIddddqd")


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 1000
    n_pool: int = 200
    n_aspects: int = 4
    block_dim: int = 8
    pattern_mix: tuple = (0.25, 0.25, 0.25, 0.25)
    noise_sigma: float = 0.1
    seed: int = 0
    hard_cluster: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern_mix", tuple(float(x) for x in self.pattern_mix))
        if len(self.pattern_mix) != 4 or any(x < 0 or not math.isfinite(x) for x in self.pattern_mix):
            raise ConfigError("pattern_mix needs four nonnegative proportions")
        if abs(sum(self.pattern_mix) - 1.0) > 1e-12:
            raise ConfigError(f"pattern_mix must sum to 1, got {sum(self.pattern_mix)!r}")
        if self.n_items < 2 or self.n_pool < 1:
            raise ConfigError("need n_items >= 2 and n_pool >= 1")
        if self.n_aspects < 1 or self.block_dim < 1:
            raise ConfigError("need n_aspects >= 1 and block_dim >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.hard_cluster < 0:
            raise ConfigError("hard_cluster must be nonnegative")

    @property
    def feature_dim(self) -> int:
        return self.block_dim * (self.n_aspects + 1)

    def to_record(self) -> dict:
        d = asdict(self)
        d["pattern_mix"] = list(self.pattern_mix)
        d["feature_dim"] = self.feature_dim
        return d


@dataclass
class Dataset:
    config: SynthConfig
    train_queries: np.ndarray
    train_positives: np.ndarray
    train_labels: np.ndarray
    pool_queries: np.ndarray
    pool_targets: np.ndarray
    pool_labels: np.ndarray

    def checksum(self) -> str:
        return hashlib.sha256(dataset_bytes(self)).hexdigest()


def _unit_blocks(rng, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _generate_pairs(cfg: SynthConfig, n: int, rng: np.random.Generator):
    K, bd = cfg.n_aspects, cfg.block_dim
    labels = rng.choice(4, size=n, p=np.asarray(cfg.pattern_mix)).astype(np.uint8)
    aspect = rng.integers(1, K + 1, size=n)
    q = _unit_blocks(rng, (n, K + 1, bd))
    t = _unit_blocks(rng, (n, K + 1, bd))
    if cfg.hard_cluster:
        c = cfg.hard_cluster
        for s in range(0, n, c):
            q[s + 1 : s + c] = q[s]
            t[s + 1 : s + c] = t[s]
    fresh = _unit_blocks(rng, (n, bd))
    noise = rng.normal(0.0, cfg.noise_sigma / math.sqrt(bd), size=(n, bd))
    for i in range(n):
        k = aspect[i]
        src = 0 if PATTERNS[labels[i]] in ("g2g", "g2f") else k
        dst = 0 if PATTERNS[labels[i]] in ("g2g", "f2g") else k
        if cfg.hard_cluster:
            q[i, src] = fresh[i]
        t[i, dst] = q[i, src] + noise[i]
    return q.reshape(n, -1), t.reshape(n, -1), labels


def generate(cfg: SynthConfig) -> Dataset:
    train_seq, pool_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    tq, tt, tl = _generate_pairs(cfg, cfg.n_items, np.random.default_rng(train_seq))
    pq, pt, pl = _generate_pairs(cfg, cfg.n_pool, np.random.default_rng(pool_seq))
    return Dataset(cfg, tq, tt, tl, pq, pt, pl)


# ---------------------------------------------------------------------------
# dataset file


def dataset_bytes(ds: Dataset) -> bytes:
    c = ds.config
    header = _HEADER.pack(
        DATA_MAGIC,
        DATA_VERSION,
        c.n_items,
        c.n_pool,
        c.feature_dim,
        c.n_aspects,
        c.block_dim,
        c.hard_cluster,
        *c.pattern_mix,
        c.seed,
        c.noise_sigma,
    )
    parts = [header]
    for a in (ds.train_queries, ds.train_positives, ds.pool_queries, ds.pool_targets):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    parts.append(np.asarray(ds.train_labels, dtype=np.uint8).tobytes())
    parts.append(np.asarray(ds.pool_labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise FormatError("dataset shorter than its header")
    (magic, version, n_items, n_pool, f_in, n_aspects, block_dim, hard_cluster,
     m0, m1, m2, m3, seed, noise) = _HEADER.unpack_from(data)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if f_in != block_dim * (n_aspects + 1):
        raise FormatError("feature_dim inconsistent with block layout")
    n_floats = 2 * (n_items + n_pool) * f_in
    expected = _HEADER.size + 8 * n_floats + n_items + n_pool
    if len(data) != expected:
        raise FormatError(f"dataset has {len(data)} bytes, expected {expected}")
    cfg = SynthConfig(n_items, n_pool, n_aspects, block_dim, (m0, m1, m2, m3), noise, seed, hard_cluster)
    floats = np.frombuffer(data, dtype="<f8", count=n_floats, offset=_HEADER.size).astype(np.float64)
    a, b = n_items * f_in, n_pool * f_in
    tq = floats[:a].reshape(n_items, f_in)
    tt = floats[a : 2 * a].reshape(n_items, f_in)
    pq = floats[2 * a : 2 * a + b].reshape(n_pool, f_in)
    pt = floats[2 * a + b :].reshape(n_pool, f_in)
    off = _HEADER.size + 8 * n_floats
    labels = np.frombuffer(data, dtype=np.uint8, offset=off).copy()
    if np.any(labels > 3):
        raise FormatError("pattern label out of range")
    return Dataset(cfg, tq, tt, labels[:n_items], pq, pt, labels[n_items:])


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    p_at_1: float
    per_pattern: dict
    counts: dict

    def to_record(self) -> dict:
        return {"type": "eval", "p_at_1": self.p_at_1, "per_pattern": self.per_pattern, "counts": self.counts}


def rank_hits(scores: np.ndarray) -> np.ndarray:
    """Hit vector: the planted positive (diagonal) is first; ties go to the lower index."""
    return np.argmax(scores, axis=1) == np.arange(scores.shape[0])


def pool_scores(
    params: enc.EncoderParams,
    queries: np.ndarray,
    targets: np.ndarray,
    mask: mv.PatternMask = mv.FULL_MASK,
    aggregator="logsumexp",
    chunk: int = 50,
) -> np.ndarray:
    params = params.astype(np.float64)
    Q = enc.encode_batch(np.asarray(queries, dtype=np.float64), params)
    T = enc.encode_batch(np.asarray(targets, dtype=np.float64), params)
    rows = []
    for s in range(0, len(Q), chunk):
        grid = mv.pairwise_grid(Q[s : s + chunk], T)
        rows.append(mv.fuse_grid(grid, mask, aggregator, with_weights=False).scores)
    return np.concatenate(rows)


def precision_at_1(
    params: enc.EncoderParams,
    queries: np.ndarray,
    targets: np.ndarray,
    labels: "np.ndarray | None" = None,
    mask: mv.PatternMask = mv.FULL_MASK,
    aggregator="logsumexp",
) -> EvalReport:
    """Fraction of queries whose own target (same row index) scores highest in the pool."""
    hits = rank_hits(pool_scores(params, queries, targets, mask, aggregator))
    per, counts = {}, {}
    if labels is not None:
        for k, name in enumerate(PATTERNS):
            sel = labels == k
            counts[name] = int(np.sum(sel))
            per[name] = float(np.mean(hits[sel])) if np.any(sel) else None
    return EvalReport(float(np.mean(hits)), per, counts)


def evaluate(params: enc.EncoderParams, ds: Dataset, mask=mv.FULL_MASK, aggregator="logsumexp") -> EvalReport:
    return precision_at_1(params, ds.pool_queries, ds.pool_targets, ds.pool_labels, mask, aggregator)


def oracle_params(cfg: SynthConfig, scale: float = 30.0, eps: float = 1e-3) -> enc.EncoderParams:
    """Encoder whose head ``k`` copies block ``k`` (scaled) through a near-linear trunk.

    Heads are ``n_aspects + 1`` with ``dim = block_dim``; normalization is off
    so exact block copies produce the single largest similarity term.
    """
    f_in, bd, k = cfg.feature_dim, cfg.block_dim, cfg.n_aspects + 1
    trunk_w = np.eye(f_in) * eps
    head_w = np.zeros((k, f_in, bd))
    for i in range(k):
        head_w[i, i * bd : (i + 1) * bd, :] = np.eye(bd) * (scale / eps)
    return enc.EncoderParams(trunk_w, np.zeros(f_in), head_w, np.zeros((k, bd)), normalize=False)


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_MASKS = (
    ("full", mv.FULL_MASK),
    ("no_f2g", mv.PatternMask.excluding("f2g")),
    ("no_g2f", mv.PatternMask.excluding("g2f")),
    ("no_f2f", mv.PatternMask.excluding("f2f")),
)
ABLATION_AGGREGATORS = (mv.Aggregator.LOGSUMEXP, mv.Aggregator.MAX, mv.Aggregator.MEAN_MAX)


def ablation_cells(base_alpha: float):
    """Grid cells in table order; masked ``mean_max`` cells are skipped."""
    cells = []
    for agg in ABLATION_AGGREGATORS:
        for alpha in (base_alpha, 0.0):
            for mask_name, mask in ABLATION_MASKS:
                if agg is mv.Aggregator.MEAN_MAX and not mask.is_full:
                    continue
                cells.append((agg, alpha, mask_name, mask))
    return cells


@dataclass
class AblationRow:
    aggregator: str
    alpha: float
    mask: str
    p_at_1: float
    per_pattern: dict
    final_loss: float

    def cell(self) -> str:
        return f"{self.aggregator}/alpha={self.alpha:g}/{self.mask}"


def ablation_suite(ds: Dataset, base, on_row=None) -> "list[AblationRow]":
    """Train and evaluate every grid cell with identical seeds and step budgets."""
    from .trainer import train_run, with_overrides

    rows = []
    for agg, alpha, mask_name, mask in ablation_cells(base.alpha):
        cfg = with_overrides(base, aggregator=agg, alpha=alpha, mask=mask)
        params, reports = train_run(cfg, ds.train_queries, ds.train_positives)
        rep = evaluate(params, ds, mask, agg)
        row = AblationRow(
            agg.value, alpha, mask_name, rep.p_at_1, rep.per_pattern, reports[-1].loss if reports else float("nan")
        )
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def ablation_table(rows: "list[AblationRow]", sep: str = "\t") -> str:
    header = ["cell", "aggregator", "alpha", "mask", "p_at_1", *(f"p_at_1_{p}" for p in PATTERNS), "final_loss"]
    lines = [sep.join(header)]
    for r in rows:
        vals = [r.cell(), r.aggregator, f"{r.alpha:g}", r.mask, f"{r.p_at_1:.6f}"]
        vals += ["" if r.per_pattern.get(p) is None else f"{r.per_pattern[p]:.6f}" for p in PATTERNS]
        vals.append(f"{r.final_loss:.6f}")
        lines.append(sep.join(vals))
    return "\n".join(lines) + "\n"

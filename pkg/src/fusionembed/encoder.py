"""Small multi-head encoder: a shared tanh trunk feeding one global and ``N`` fine-grained heads.

Every batched routine here is row-deterministic: each output row is computed
by elementwise products reduced over a trailing contiguous axis, so its bits
do not depend on how many other rows share the call.  The trainer relies on
this for exact sub-batch invariance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DegenerateEmbeddingError, DimensionError, DomainError, FormatError
from .multivec import NORM_FLOOR, EmbeddingSet

CHECKPOINT_MAGIC = b"FEMBCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIB")


@dataclass
class EncoderParams:
    trunk_w: np.ndarray  # (F_in, H)
    trunk_b: np.ndarray  # (H,)
    head_w: np.ndarray  # (N+1, H, D)
    head_b: np.ndarray  # (N+1, D)
    normalize: bool = True

    def __post_init__(self):
        f_in, h = self.trunk_w.shape
        if self.trunk_b.shape != (h,):
            raise DimensionError(f"trunk bias shape {self.trunk_b.shape} != ({h},)")
        if self.head_w.ndim != 3 or self.head_w.shape[1] != h:
            raise DimensionError(f"head weights must be (N+1, {h}, D), got {self.head_w.shape}")
        if self.head_b.shape != (self.head_w.shape[0], self.head_w.shape[2]):
            raise DimensionError(f"head bias shape {self.head_b.shape} does not match heads")
        for name in ("trunk_w", "trunk_b", "head_w", "head_b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"non-finite entries in {name}")

    @property
    def f_in(self) -> int:
        return self.trunk_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.trunk_w.shape[1]

    @property
    def n_fine(self) -> int:
        return self.head_w.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.head_w.shape[2]

    def arrays(self) -> "list[np.ndarray]":
        return [self.trunk_w, self.trunk_b, self.head_w, self.head_b]

    def with_arrays(self, arrays) -> "EncoderParams":
        tw, tb, hw, hb = arrays
        return EncoderParams(tw, tb, hw, hb, self.normalize)

    def astype(self, dtype) -> "EncoderParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def copy(self) -> "EncoderParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_params(f_in: int, hidden: int, n_fine: int, dim: int, seed: int = 0, normalize: bool = True) -> EncoderParams:
    rng = np.random.default_rng(seed)
    return EncoderParams(
        trunk_w=rng.normal(0.0, 1.0 / np.sqrt(f_in), size=(f_in, hidden)),
        trunk_b=np.zeros(hidden),
        head_w=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_fine + 1, hidden, dim)),
        head_b=np.zeros((n_fine + 1, dim)),
        normalize=normalize,
    )


def _forward(X: np.ndarray, p: EncoderParams):
    if X.ndim != 2 or X.shape[1] != p.f_in:
        raise DimensionError(f"features must be (B, {p.f_in}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite item features")
    # (B, H, F) * -> sum over F
    h = np.tanh(np.sum(X[:, None, :] * p.trunk_w.T[None], axis=-1) + p.trunk_b)
    # (B, K, D, H) -> sum over H
    y = np.sum(h[:, None, None, :] * np.transpose(p.head_w, (0, 2, 1))[None], axis=-1) + p.head_b
    norms = None
    out = y
    if p.normalize:
        norms = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
        if np.any(norms < NORM_FLOOR):
            raise DegenerateEmbeddingError("head output norm below 1e-12; cannot normalize")
        out = y / norms
    return h, y, norms, out


def encode_batch(X: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed feature rows ``X`` (B, F_in) into ``(B, N+1, D)``."""
    return _forward(np.asarray(X), params)[3]


def encode(item, params: EncoderParams) -> EmbeddingSet:
    x = np.asarray(item, dtype=params.trunk_w.dtype).reshape(1, -1)
    return EmbeddingSet(encode_batch(x, params)[0])


def backward_batch(X: np.ndarray, params: EncoderParams, upstream: np.ndarray) -> "list[np.ndarray]":
    """Per-item parameter gradients of ``<upstream[b], encode(X[b])>``.

    Returns arrays with a leading batch axis: trunk_w (B, F, H), trunk_b
    (B, H), head_w (B, K, H, D), head_b (B, K, D).
    """
    X = np.asarray(X)
    h, y, norms, out = _forward(X, params)
    if upstream.shape != out.shape:
        raise DimensionError(f"upstream shape {upstream.shape} != embedding shape {out.shape}")
    if params.normalize:
        # d(y/|y|) applied to u: (u - e (e.u)) / |y|
        proj = np.sum(out * upstream, axis=-1, keepdims=True)
        dy = (upstream - out * proj) / norms
    else:
        dy = upstream
    d_head_b = dy
    d_head_w = h[:, None, :, None] * dy[:, :, None, :]
    B, K, D = dy.shape
    # dh[b, j] = sum_{k, d} head_w[k, j, d] * dy[b, k, d]
    w_hkd = np.transpose(params.head_w, (1, 0, 2)).reshape(params.hidden, K * D)
    dh = np.sum(w_hkd[None] * dy.reshape(B, 1, K * D), axis=-1)
    dz = dh * (1.0 - h * h)
    d_trunk_w = X[:, :, None] * dz[:, None, :]
    return [d_trunk_w, dz, d_head_w, d_head_b]


def backward_surrogate(item, params: EncoderParams, upstream) -> EncoderParams:
    """Gradient of the Frobenius inner product ``<upstream, encode(item)>`` w.r.t. all parameters."""
    x = np.asarray(item, dtype=params.trunk_w.dtype).reshape(1, -1)
    u = np.asarray(upstream, dtype=params.trunk_w.dtype)[None]
    grads = backward_batch(x, params, u)
    return params.with_arrays([g[0] for g in grads])


# ---------------------------------------------------------------------------
# checkpoint file


def checkpoint_bytes(params: EncoderParams) -> bytes:
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.f_in,
        params.hidden,
        params.n_fine,
        params.dim,
        int(bool(params.normalize)),
    )
    parts = [header, _f64(params.trunk_w), _f64(params.trunk_b)]
    for k in range(params.n_fine + 1):
        parts += [_f64(params.head_w[k]), _f64(params.head_b[k])]
    return b"".join(parts)


def params_from_bytes(data: bytes) -> EncoderParams:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, f_in, hidden, n_fine, dim, normalize = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    k = n_fine + 1
    expected = f_in * hidden + hidden + k * (hidden * dim + dim)
    payload = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if payload.size != expected or (len(data) - _HEADER.size) % 8:
        raise FormatError(f"checkpoint payload has {payload.size} values, expected {expected}")
    payload = payload.astype(np.float64)
    pos = 0

    def take(n, shape):
        nonlocal pos
        a = payload[pos : pos + n].reshape(shape)
        pos += n
        return a

    trunk_w = take(f_in * hidden, (f_in, hidden))
    trunk_b = take(hidden, (hidden,))
    head_w = np.empty((k, hidden, dim))
    head_b = np.empty((k, dim))
    for i in range(k):
        head_w[i] = take(hidden * dim, (hidden, dim))
        head_b[i] = take(dim, (dim,))
    return EncoderParams(trunk_w, trunk_b, head_w, head_b, bool(normalize))


def save_checkpoint(params: EncoderParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> EncoderParams:
    return params_from_bytes(Path(path).read_bytes())


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def param_names() -> "list[str]":
    return [f.name for f in fields(EncoderParams) if f.name != "normalize"]

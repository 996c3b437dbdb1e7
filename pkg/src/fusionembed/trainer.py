"""Two-pass cached-gradient training of the toy encoder.

One step:

1. encode every query and positive without keeping activations (in sub-batches),
2. compute the in-batch loss and the loss gradient for every embedding set,
3. re-encode sub-batch by sub-batch and backpropagate each cached gradient
   through the encoder, accumulating parameter gradients item by item in a
   fixed order, then take one optimizer step.

Because per-item gradients are accumulated in ascending item order whatever
the sub-batch size, the update is bit-identical for every ``sub_batch_size``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import encoder as enc
from . import multivec as mv
from .cached_grad import InBatchResult, inbatch_gradients, inbatch_loss
from .errors import ConfigError, DomainError

OPTIMIZERS = ("sgd_momentum", "adam_like")
PRECISIONS = ("double", "single")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.02
    alpha: float = 20.0
    n_fine: int = 10
    m_capacity: int = 10
    dim: int = 16
    hidden: Optional[int] = None
    batch_size: int = 32
    sub_batch_size: Optional[int] = None
    steps: int = 200
    lr: float = 0.01
    optimizer: str = "adam_like"
    momentum: float = 0.9
    aggregator: mv.Aggregator = mv.Aggregator.LOGSUMEXP
    mask: mv.PatternMask = mv.FULL_MASK
    seed: int = 0
    precision: str = "double"
    normalize: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aggregator", mv.Aggregator.parse(self.aggregator))
        self.validate()

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.n_fine < 0 or self.dim < 1 or self.m_capacity < 1:
            raise ConfigError("n_fine >= 0, dim >= 1 and m_capacity >= 1 are required")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sub_batch_size is not None and not 1 <= self.sub_batch_size <= self.batch_size:
            raise ConfigError("sub_batch_size must lie in [1, batch_size]")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.aggregator is mv.Aggregator.MEAN_MAX and not self.mask.is_full:
            raise ConfigError("mean_max aggregation cannot be combined with pattern masks")

    @property
    def hidden_width(self) -> int:
        # M has no literal analog here; it scales the trunk width per head
        return self.hidden if self.hidden is not None else self.m_capacity * (self.n_fine + 1)

    @property
    def sub_batch(self) -> int:
        return self.sub_batch_size or self.batch_size

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_record(self) -> dict:
        d = asdict(self)
        d["aggregator"] = self.aggregator.value
        d["mask"] = {f: on for f, on in zip(mv.FAMILIES, self.mask.flags)}
        d["hidden"] = self.hidden_width
        d["sub_batch_size"] = self.sub_batch
        return d


@dataclass
class StepReport:
    step: int
    loss: float
    grad_norm: float
    hardness_min: float
    hardness_mean: float
    hardness_max: float
    overflow_clamped: int = 0
    underflow_fallback: int = 0
    wallclock_ms: float = field(default=0.0, compare=False)

    def to_record(self, timing: bool = False) -> dict:
        rec = {"type": "step", **asdict(self)}
        if not timing:
            rec.pop("wallclock_ms")
        return rec


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def update(self, arrays, grads):
        if self.velocity is None:
            self.velocity = [np.zeros_like(g) for g in grads]
        out = []
        for k, (a, g) in enumerate(zip(arrays, grads)):
            self.velocity[k] = self.momentum * self.velocity[k] + g
            out.append(a - self.lr * self.velocity[k])
        return out


class AdamLike:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def update(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = []
        for k, (a, g) in enumerate(zip(arrays, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            out.append(a - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd_momentum":
        return SGDMomentum(cfg.lr, cfg.momentum)
    return AdamLike(cfg.lr)


def negative_validity(positives: np.ndarray) -> np.ndarray:
    """``valid[b, c]``: positive ``c`` may serve as a negative for query ``b``.

    Positives bytewise identical to row ``b``'s own positive are dropped.
    """
    keys = [row.tobytes() for row in np.ascontiguousarray(positives)]
    B = len(keys)
    valid = np.ones((B, B), dtype=bool)
    for b in range(B):
        for c in range(B):
            if b == c or keys[b] == keys[c]:
                valid[b, c] = False
    return valid


def _encode_in_chunks(X: np.ndarray, params: enc.EncoderParams, chunk: int) -> np.ndarray:
    return np.concatenate([enc.encode_batch(X[s : s + chunk], params) for s in range(0, len(X), chunk)])


@dataclass
class StepGradients:
    grads: list
    result: InBatchResult


def step_gradients(
    params: enc.EncoderParams,
    queries: np.ndarray,
    positives: np.ndarray,
    cfg: TrainConfig,
    ega: bool = True,
) -> StepGradients:
    """Passes 1-3 of a training step: the accumulated parameter gradient of the mean in-batch loss."""
    if queries.shape != positives.shape:
        raise ConfigError(f"queries {queries.shape} and positives {positives.shape} differ")
    sb = min(cfg.sub_batch, len(queries))
    Q = _encode_in_chunks(queries, params, sb)
    T = _encode_in_chunks(positives, params, sb)
    res = inbatch_gradients(
        Q, T, cfg.tau, cfg.alpha, cfg.mask, cfg.aggregator, valid=negative_validity(positives), ega=ega
    )
    if not math.isfinite(res.loss):
        raise DomainError(f"non-finite loss {res.loss}")

    items = np.concatenate([queries, positives])
    upstream = np.concatenate([res.d_queries, res.d_targets]).astype(params.trunk_w.dtype)
    acc = [np.zeros_like(a) for a in params.arrays()]
    for s in range(0, len(items), sb):
        per_item = enc.backward_batch(items[s : s + sb], params, upstream[s : s + sb])
        for i in range(per_item[0].shape[0]):
            for a, g in zip(acc, per_item):
                a += g[i]
    return StepGradients(acc, res)


def train_step(
    params: enc.EncoderParams,
    queries: np.ndarray,
    positives: np.ndarray,
    cfg: TrainConfig,
    optimizer=None,
    step: int = 0,
    ega: bool = True,
):
    """One cached-gradient update with in-batch negatives. Returns ``(params, StepReport)``."""
    t0 = time.perf_counter()
    optimizer = optimizer if optimizer is not None else make_optimizer(cfg)
    sg = step_gradients(params, queries, positives, cfg, ega=ega)
    grad_norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in sg.grads))
    new_params = params.with_arrays(optimizer.update(params.arrays(), sg.grads))
    hs = sg.result.diagnostics.hardness_stats()
    report = StepReport(
        step=step,
        loss=sg.result.loss,
        grad_norm=grad_norm,
        hardness_min=hs["min"],
        hardness_mean=hs["mean"],
        hardness_max=hs["max"],
        overflow_clamped=sg.result.diagnostics.overflow_clamped,
        underflow_fallback=sg.result.diagnostics.underflow_fallback,
        wallclock_ms=(time.perf_counter() - t0) * 1e3,
    )
    return new_params, report


def initial_params(cfg: TrainConfig, f_in: int) -> enc.EncoderParams:
    init_seed = np.random.SeedSequence(cfg.seed).spawn(2)[0]
    seed = int(init_seed.generate_state(1)[0])
    p = enc.init_params(f_in, cfg.hidden_width, cfg.n_fine, cfg.dim, seed=seed, normalize=cfg.normalize)
    return p.astype(cfg.dtype)


def batch_order(cfg: TrainConfig, n_pairs: int):
    """Endless seeded stream of batch index arrays; reshuffles every epoch."""
    if n_pairs < cfg.batch_size:
        raise ConfigError(f"dataset has {n_pairs} pairs, fewer than batch_size {cfg.batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    while True:
        perm = rng.permutation(n_pairs)
        for s in range(0, n_pairs - cfg.batch_size + 1, cfg.batch_size):
            yield perm[s : s + cfg.batch_size]


def train_run(
    cfg: TrainConfig,
    queries: np.ndarray,
    positives: np.ndarray,
    params: "enc.EncoderParams | None" = None,
    on_report: "Callable[[StepReport], None] | None" = None,
    on_checkpoint: "Callable[[int, enc.EncoderParams], None] | None" = None,
    ega: bool = True,
):
    """Run ``cfg.steps`` training steps. Returns ``(final params in float64, reports)``."""
    queries = np.asarray(queries, dtype=cfg.dtype)
    positives = np.asarray(positives, dtype=cfg.dtype)
    if params is None:
        params = initial_params(cfg, queries.shape[1])
    else:
        params = params.astype(cfg.dtype)
    optimizer = make_optimizer(cfg)
    reports = []
    if cfg.steps == 0:
        return params.astype(np.float64), reports
    batches = batch_order(cfg, len(queries))
    for step in range(cfg.steps):
        idx = next(batches)
        params, report = train_step(params, queries[idx], positives[idx], cfg, optimizer, step, ega=ega)
        reports.append(report)
        if on_report is not None:
            on_report(report)
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1, params.astype(np.float64))
    return params.astype(np.float64), reports


def full_loss(params: enc.EncoderParams, queries: np.ndarray, positives: np.ndarray, cfg: TrainConfig) -> float:
    """Mean in-batch loss as a plain function of the encoder parameters."""
    Q = enc.encode_batch(queries, params)
    T = enc.encode_batch(positives, params)
    return inbatch_loss(Q, T, cfg.tau, cfg.mask, cfg.aggregator, valid=negative_validity(positives))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

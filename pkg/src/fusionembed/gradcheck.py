"""Randomized agreement checks between closed-form and finite-difference gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import multivec as mv
from .cached_grad import ContrastiveBatch, cached_gradients, finite_difference_gradients

REL_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = REL_FLOOR) -> float:
    """``max|a - r| / max(max|a|, max|r|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(r), initial=0.0)), floor)
    return float(np.max(np.abs(a - r), initial=0.0)) / scale


def random_mask(rng: np.random.Generator) -> mv.PatternMask:
    # never all four off
    while True:
        flags = rng.random(4) < 0.75
        if flags.any():
            return mv.PatternMask(*map(bool, flags))


def random_batch(
    rng: np.random.Generator,
    batch: int,
    n_fine: int,
    dim: int,
    tau: float = 0.02,
    mask: "mv.PatternMask | None" = None,
) -> ContrastiveBatch:
    """One query, its positive and ``batch - 1`` negatives with unit-norm rows."""
    mask = mv.FULL_MASK if mask is None else mask
    sets = [mv.normalize_rows(rng.normal(size=(n_fine + 1, dim))) for _ in range(batch + 1)]
    return ContrastiveBatch.from_arrays(sets[0], sets[1], sets[2:], tau=tau, alpha=0.0, mask=mask)


CACHED_TOL = 1e-5
CHAIN_TOL = 1e-4


@dataclass
class TrialResult:
    check: str
    trial: int
    seed: int
    instance: dict
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol

    def to_record(self) -> dict:
        return {"type": "gradcheck", **self.__dict__, "passed": self.passed}


def cached_trial(seed: int, k: int, step: float = 1e-6, max_batch: int = 8, max_fine: int = 4, max_dim: int = 16):
    """Closed-form embedding gradients against central differences of the loss.

    Instance ``k`` draws everything from ``SeedSequence([seed, k])`` so a
    failing trial can be replayed on its own.  Returns ``(error, description)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    b = int(rng.integers(1, max_batch + 1))
    n = int(rng.integers(0, max_fine + 1))
    d = int(rng.integers(1, max_dim + 1))
    tau = float(rng.choice([0.02, 0.05, 0.1, 1.0]))
    mask = random_mask(rng)
    if not mask.term_mask(n).any():
        mask = mv.FULL_MASK
    batch = random_batch(rng, b, n, d, tau=tau, mask=mask)
    err = relative_error(cached_gradients(batch).flat(), finite_difference_gradients(batch, step).flat())
    return err, {"batch": b, "n_fine": n, "dim": d, "tau": tau, "mask": mask.label()}


def _param_fd(fn, params, step: float) -> np.ndarray:
    # five-point central stencil; parameter losses can be sharply curved near
    # small head outputs, where the plain two-point rule is truncation-bound
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            a0 = a[idx]
            vals = []
            for off in (2 * step, step, -step, -2 * step):
                a[idx] = a0 + off
                vals.append(fn())
            a[idx] = a0
            g[idx] = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * step)
        out.append(g.ravel())
    return np.concatenate(out)


def chain_trial(seed: int, k: int, step: float = 1e-6, max_batch: int = 4, max_fine: int = 2, max_dim: int = 8,
                max_hidden: int = 8, max_features: int = 6):
    """Accumulated parameter gradient of one training step against finite differences of the full loss.

    Returns ``(relative error, instance description)``.
    """
    from .trainer import TrainConfig, full_loss, initial_params, step_gradients

    rng = np.random.default_rng(np.random.SeedSequence([seed, k, 1]))
    b = int(rng.integers(2, max_batch + 1))
    n = int(rng.integers(0, max_fine + 1))
    d = int(rng.integers(1, max_dim + 1))
    # a width-1 trunk embeds every item as +-the same vector: zero gradient, no relative error
    h = int(rng.integers(2, max_hidden + 1))
    f = int(rng.integers(1, max_features + 1))
    mask = random_mask(rng)
    if not mask.term_mask(n).any():
        mask = mv.FULL_MASK
    cfg = TrainConfig(
        tau=float(rng.choice([0.05, 0.1, 1.0])), alpha=0.0, n_fine=n, dim=d, hidden=h, batch_size=b,
        sub_batch_size=int(rng.integers(1, b + 1)), mask=mask, seed=int(rng.integers(2**31)),
    )
    X = rng.normal(size=(2 * b, f))
    q, t = X[:b], X[b:]
    params = initial_params(cfg, f)
    analytic = np.concatenate([g.ravel() for g in step_gradients(params, q, t, cfg).grads])
    fd = _param_fd(lambda: full_loss(params, q, t, cfg), params, step)
    desc = {"batch": b, "n_fine": n, "dim": d, "hidden": h, "features": f, "mask": mask.label()}
    return relative_error(analytic, fd), desc


def run_trials(trials: int, seed: int, first: int = 0):
    """Yield the cached-gradient and the chain check for trials ``first .. first + trials - 1``."""
    for k in range(first, first + trials):
        err, desc = cached_trial(seed, k)
        yield TrialResult("cached_gradients", k, seed, desc, err, CACHED_TOL)
        err, desc = chain_trial(seed, k)
        yield TrialResult("chain", k, seed, desc, err, CHAIN_TOL)

"""Barrier functions, safe-set membership and sampled Lipschitz estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class BarrierFunction:
    h: Callable[[np.ndarray], float]
    L_h: float
    label: str = "h"

    def __post_init__(self):
        if not self.L_h > 0:
            raise ValueError("barrier Lipschitz constant must be positive")


@dataclass(frozen=True)
class BarrierSet:
    """A family of barriers sharing one decay rate ``gamma``.

    The safe set is the intersection of the member superlevel sets, so the
    composite value is the minimum. ``values_fn`` optionally evaluates all
    members at once for a (possibly batched) state, returning shape
    ``(..., len(barriers))``; robot barriers supply one to avoid a Python loop.
    """

    barriers: Sequence[BarrierFunction]
    gamma: float
    values_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.barriers) == 0:
            raise ValueError("a barrier set needs at least one member")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        object.__setattr__(self, "barriers", tuple(self.barriers))

    def __len__(self):
        return len(self.barriers)

    @property
    def L_h(self) -> float:
        """Conservative composite constant: the largest member constant."""
        return max(b.L_h for b in self.barriers)

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.barriers]

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.values_fn is not None:
            return np.asarray(self.values_fn(x), dtype=float)
        if x.ndim == 1:
            return np.array([b.h(x) for b in self.barriers], dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        vals = np.array([[b.h(xi) for b in self.barriers] for xi in flat])
        return vals.reshape(x.shape[:-1] + (len(self.barriers),))


def evaluate(bset: BarrierSet, x) -> float:
    """Composite barrier value; nonnegative exactly on the safe set."""
    return float(np.min(bset.values(x)))


def in_safe_set(bset: BarrierSet, x) -> bool:
    return evaluate(bset, x) >= 0.0


def cbf_residual(bset: BarrierSet, x, x_next) -> float:
    """``h(x_next) - (1 - gamma) h(x)``; nonnegative when the decay condition holds."""
    return evaluate(bset, x_next) - (1.0 - bset.gamma) * evaluate(bset, x)


def _out_norm(d: np.ndarray) -> np.ndarray:
    # d has shape (P, ...) ; vectors use 2-norm, matrices the induced 2-norm
    if d.ndim == 1:
        return np.abs(d)
    if d.ndim == 2:
        return np.linalg.norm(d, axis=1)
    return np.linalg.norm(d, ord=2, axis=(1, 2))


def estimate_lipschitz(fn: Callable, region, n_samples: int = 2000, seed: int = 0,
                       safety_factor: float = 1.2, local_scale: float = 1e-3,
                       vectorized: bool = False) -> float:
    """Sampled Lipschitz constant of ``fn`` over a box, inflated by ``safety_factor``.

    Pairs alternate between independent uniform draws (global slope) and
    close pairs at ``local_scale`` times the box width (local slope). Draws
    are taken pair by pair from one stream, so a larger ``n_samples`` sees a
    superset of pairs and the estimate never decreases.

    Args:
        fn: Map from a state vector to a scalar, vector or matrix.
        region: ``(lower, upper)`` arrays describing the box.
        vectorized: ``fn`` accepts a ``(P, d)`` batch.
    """
    lo, hi = (np.atleast_1d(np.asarray(a, dtype=float)) for a in region)
    if lo.shape != hi.shape:
        raise ValueError("region bounds have different shapes")
    width = hi - lo
    if np.any(width <= 0):
        raise ValueError("region has zero measure")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    d = lo.size
    raw = rng.uniform(size=(n_samples, 3, d))
    X = lo + raw[:, 0] * width
    far = lo + raw[:, 1] * width
    near = np.clip(X + (raw[:, 2] - 0.5) * 2 * local_scale * width, lo, hi)
    Y = np.where((np.arange(n_samples) % 2 == 0)[:, None], far, near)
    if vectorized:
        FX = np.asarray(fn(X), dtype=float)
        FY = np.asarray(fn(Y), dtype=float)
    else:
        FX = np.array([np.asarray(fn(x), dtype=float) for x in X])
        FY = np.array([np.asarray(fn(y), dtype=float) for y in Y])
    dx = np.linalg.norm(X - Y, axis=1)
    ok = dx > 1e-12
    if not np.any(ok):
        return 0.0
    ratio = _out_norm((FX - FY)[ok]) / dx[ok]
    return float(safety_factor * np.max(ratio))

"""Discrete-time control-affine systems, stepping and delay-compensating prediction.

All models follow ``x+ = f(x) + g(x) u + w``. Models flagged ``vectorized``
accept leading batch dimensions in ``f`` and ``g``, which the MPC uses to
evaluate finite-difference perturbations in a single rollout.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class InputSet:
    """Admissible input set, either a per-component box or a Euclidean ball.

    ``radius`` is the half-width for a box and the radius for a ball.
    """

    kind: str
    radius: float
    dim: int

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise ValueError(f"unknown input set kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("input set radius must be positive")

    @property
    def norm_bound(self) -> float:
        """Largest Euclidean norm of an admissible input."""
        if self.kind == "box":
            return float(self.radius * np.sqrt(self.dim))
        return float(self.radius)

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return bool(np.all(np.abs(u) <= self.radius + tol))
        return bool(np.linalg.norm(u) <= self.radius + tol)

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, -self.radius, self.radius)
        n = np.linalg.norm(u)
        return u if n <= self.radius else u * (self.radius / n)

    def tighten(self, delta: float) -> "InputSet":
        """Pontryagin difference with a ball of radius ``delta``."""
        if delta < 0:
            raise ValueError("tightening radius must be nonnegative")
        if delta >= self.radius:
            raise ValueError("tightening removes the whole input set")
        return InputSet(self.kind, self.radius - delta, self.dim)


@dataclass(frozen=True)
class SystemModel:
    state_dim: int
    input_dim: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    L_f: float
    L_g: float
    input_set: InputSet
    vectorized: bool = False
    name: str = "system"
    fg: Callable | None = None  # optional joint evaluation of (f(x), g(x)) sharing work

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError("state and input dimensions must be positive")
        if self.L_f < 0 or self.L_g < 0:
            raise ValueError("Lipschitz constants must be nonnegative")
        if self.input_set.dim != self.input_dim:
            raise ValueError("input set dimension does not match input_dim")

    @property
    def u_max(self) -> float:
        return self.input_set.norm_bound

    @property
    def L_d(self) -> float:
        return self.L_f + self.L_g * self.u_max


def _check(model: SystemModel, x, u=None, w=None):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({model.state_dim},)")
    out = [x]
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (model.input_dim,):
            raise ValueError(f"input has shape {u.shape}, expected ({model.input_dim},)")
        out.append(u)
    if w is not None:
        w = np.asarray(w, dtype=float)
        if w.shape != (model.state_dim,):
            raise ValueError(f"disturbance has shape {w.shape}, expected ({model.state_dim},)")
        out.append(w)
    return out


def affine_terms(model: SystemModel, x):
    """``(f(x), g(x))``, evaluated jointly when the model supports it."""
    if model.fg is not None:
        return model.fg(x)
    return model.f(x), model.g(x)


def nominal_step(model: SystemModel, x, u) -> np.ndarray:
    """Disturbance-free transition; unchecked and batch-aware."""
    fx, gx = affine_terms(model, x)
    return fx + np.einsum("...ij,...j->...i", gx, u)


def step(model: SystemModel, x, u, w) -> np.ndarray:
    """One transition ``f(x) + g(x) u + w``."""
    x, u, w = _check(model, x, u, w)
    return nominal_step(model, x, u) + w


class InputBuffer:
    """FIFO of the last ``tau`` inputs sent towards the plant, oldest first."""

    def __init__(self, tau: int, inputs: Iterable | None = None):
        if tau < 0:
            raise ValueError("delay must be nonnegative")
        self.tau = int(tau)
        self._q: deque = deque(maxlen=self.tau if self.tau > 0 else None)
        if inputs is not None:
            for u in inputs:
                self.push(u)

    def push(self, u) -> None:
        if self.tau == 0:
            return
        self._q.append(np.array(u, dtype=float))

    @property
    def entries(self) -> list[np.ndarray]:
        return list(self._q)

    @property
    def full(self) -> bool:
        return len(self._q) == self.tau

    def __len__(self):
        return len(self._q)

    def __iter__(self):
        return iter(self._q)


def predict(model: SystemModel, x_delayed, buffer: InputBuffer | Sequence,
            correction: Callable | None = None) -> np.ndarray:
    """Roll the delayed measurement forward through the buffered inputs.

    ``correction(x, u) -> u`` lets the caller replay a plant-side filter on
    every buffered input, so the prediction matches what the plant applied.
    """
    (x,) = _check(model, x_delayed)
    if isinstance(buffer, InputBuffer):
        if buffer.tau > 0 and len(buffer) == 0:
            raise ValueError("empty input buffer with nonzero delay")
        inputs = buffer.entries
    else:
        inputs = list(buffer)
    for u in inputs:
        if correction is not None:
            u = correction(x, u)
        x = nominal_step(model, x, np.asarray(u, dtype=float))
    return x


def rollout(model: SystemModel, x0, inputs) -> np.ndarray:
    """Nominal states ``x_1..x_L`` for the given input sequence.

    ``inputs`` has shape ``(L, m)``; for vectorized models a batch
    ``(B, L, m)`` with ``x0`` of shape ``(n,)`` or ``(B, n)`` is accepted and
    the result has shape ``(B, L, n)``.
    """
    U = np.asarray(inputs, dtype=float)
    x = np.asarray(x0, dtype=float)
    if U.size == 0:
        return np.zeros((0, model.state_dim))
    if U.ndim == 2:
        if U.shape[1] != model.input_dim:
            raise ValueError("input dimension mismatch")
        _check(model, x)
        out = np.empty((U.shape[0], model.state_dim))
        for i, u in enumerate(U):
            x = nominal_step(model, x, u)
            out[i] = x
        return out
    if U.ndim != 3 or U.shape[2] != model.input_dim:
        raise ValueError("batched inputs must have shape (B, L, m)")
    B, L, _ = U.shape
    x = np.broadcast_to(x, (B, model.state_dim))
    out = np.empty((B, L, model.state_dim))
    if model.vectorized:
        for i in range(L):
            x = nominal_step(model, x, U[:, i])
            out[:, i] = x
    else:
        for b in range(B):
            out[b] = rollout(model, x[b], U[b])
    return out


# bundled toy systems

def _scalar_f(x):
    return np.array(x, dtype=float, copy=True)


def _scalar_g(x):
    x = np.asarray(x)
    return np.ones(x.shape[:-1] + (1, 1))


def integrator_1d(u_max: float = 5.0) -> SystemModel:
    """``x+ = x + u``; the scalar benchmark used throughout the tests."""
    return SystemModel(1, 1, _scalar_f, _scalar_g, L_f=1.0, L_g=0.0,
                       input_set=InputSet("ball", u_max, 1), vectorized=True,
                       name="integrator_1d")


def linear_model(A, B, u_max: float, kind: str = "ball", name: str = "linear") -> SystemModel:
    """``x+ = A x + B u`` with ``L_f = ||A||_2`` and ``L_g = 0``."""
    A = np.asarray(A, dtype=float)
    Bm = np.asarray(B, dtype=float)
    if Bm.ndim == 1:
        Bm = Bm[:, None]

    def f(x):
        return np.asarray(x, dtype=float) @ A.T

    def g(x):
        x = np.asarray(x)
        return np.broadcast_to(Bm, x.shape[:-1] + Bm.shape).copy()

    return SystemModel(A.shape[0], Bm.shape[1], f, g, L_f=float(np.linalg.norm(A, 2)),
                       L_g=0.0, input_set=InputSet(kind, u_max, Bm.shape[1]),
                       vectorized=True, name=name)


def double_integrator(T_s: float = 0.005, u_max: float = 5.0) -> SystemModel:
    """Position/velocity pair, forward Euler with sampling time ``T_s``."""
    A = np.array([[1.0, T_s], [0.0, 1.0]])
    B = np.array([0.0, T_s])
    return linear_model(A, B, u_max, name="double_integrator")

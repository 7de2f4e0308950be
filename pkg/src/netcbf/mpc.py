"""Remote receding-horizon controllers solved by single shooting.

Three variants share one transcription: the decision vector holds the
input sequence (and, for the robustified variant, one slack per stage);
predicted states come from the nominal rollout of ``x_hat``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .barrier import BarrierSet
from .dynamics import InputSet, SystemModel, rollout
from .qp import SQPOptions, Status, solve_nlp_sqp

NOMINAL, MPC_CBF, ROBUST = "nominal", "mpc_cbf", "robust"


@dataclass(frozen=True)
class RobustSpec:
    w_bar_r: float
    w_bar_l: float
    slack_weight: float = 1e3

    def __post_init__(self):
        if self.w_bar_r < 0 or self.w_bar_l < self.w_bar_r:
            raise ValueError("need 0 <= w_bar_r <= w_bar_l")
        if self.slack_weight < 0:
            raise ValueError("slack weight must be nonnegative")


def default_sqp_options() -> SQPOptions:
    return SQPOptions(max_iter=25, tol_feas=1e-8, tol_stat=1e-6, tol_step=1e-10)


@dataclass(frozen=True)
class MPCConfig:
    """Receding-horizon problem data.

    ``stage_residual(x, u)`` and ``terminal_residual(x)`` return residual
    vectors whose squared norms are the stage and terminal costs; both must
    broadcast over leading batch axes. ``state_box`` is enforced as a
    quadratic penalty on the excess with weight ``state_penalty``.
    ``input_set`` overrides the model's set (e.g. a tightened one).
    """

    model: SystemModel
    horizon: int
    stage_residual: Callable
    terminal_residual: Callable | None = None
    state_box: tuple | None = None
    state_penalty: float = 1e3
    input_set: InputSet | None = None
    barriers: BarrierSet | None = None
    robust: RobustSpec | None = None
    terminal_set: Callable | None = None
    sqp: SQPOptions = field(default_factory=default_sqp_options)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.input_set is None:
            object.__setattr__(self, "input_set", self.model.input_set)

    def stage_cost(self, x, u) -> float:
        r = np.asarray(self.stage_residual(x, u))
        return float(r @ r)


@dataclass
class MPCSolution:
    inputs: np.ndarray
    predicted_states: np.ndarray
    slacks: np.ndarray | None
    objective: float
    status: Status
    iterations: int = 0
    state_violation: float = 0.0
    variant: str = NOMINAL

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


class _Transcription:
    def __init__(self, cfg: MPCConfig, x_hat, variant: str):
        self.cfg, self.variant = cfg, variant
        self.x_hat = np.asarray(x_hat, dtype=float)
        m, N = cfg.model.input_dim, cfg.horizon
        self.nu = N * m
        self.ns = N if variant == ROBUST else 0
        self.nz = self.nu + self.ns
        self._key = None
        self._val = None
        bs = cfg.barriers
        if variant != NOMINAL:
            if bs is None:
                raise ValueError("barrier variants need a barrier set")
            self.decay = 1.0 - bs.gamma
            self.tight = bs.L_h * cfg.robust.w_bar_r if variant == ROBUST else 0.0
            self.h0 = bs.values(self.x_hat)

    def split(self, Z):
        N, m = self.cfg.horizon, self.cfg.model.input_dim
        return Z[:, :self.nu].reshape(-1, N, m), Z[:, self.nu:]

    def _evaluate(self, Z):
        Z = np.atleast_2d(Z)
        key = (Z.shape, Z.tobytes())
        if key == self._key:
            return self._val
        cfg = self.cfg
        U, S = self.split(Z)
        X = rollout(cfg.model, self.x_hat, U)
        B, N = X.shape[:2]
        X0 = np.broadcast_to(self.x_hat, (B, 1, X.shape[2]))
        Xs = np.concatenate([X0, X[:, :-1]], axis=1)
        parts = [cfg.stage_residual(Xs, U).reshape(B, -1)]
        if cfg.terminal_residual is not None:
            parts.append(np.asarray(cfg.terminal_residual(X[:, -1])).reshape(B, -1))
        if cfg.state_box is not None:
            lo, hi = (np.asarray(v, dtype=float) for v in cfg.state_box)
            exc = np.maximum(X - hi, 0.0) + np.maximum(lo - X, 0.0)
            parts.append(np.sqrt(cfg.state_penalty) * exc.reshape(B, -1))
        if self.ns:
            parts.append(np.sqrt(cfg.robust.slack_weight) * S)
        res = np.concatenate(parts, axis=1)
        cons = []
        if self.variant != NOMINAL:
            H = cfg.barriers.values(X)
            Hprev = np.concatenate([np.broadcast_to(self.h0, (B, 1, H.shape[2])), H[:, :-1]], axis=1)
            rows = H - self.decay * Hprev - self.tight
            if self.ns:
                rows = rows + S[:, :, None]
            cons.append(rows.reshape(B, -1))
        if cfg.input_set.kind == "ball":
            cons.append(cfg.input_set.radius ** 2 - np.sum(U ** 2, axis=2))
        if cfg.terminal_set is not None:
            cons.append(np.asarray(cfg.terminal_set(X[:, -1])).reshape(B, -1))
        con = np.concatenate(cons, axis=1) if cons else None
        self._key, self._val = key, (res, con, X)
        return self._val

    def residual(self, Z):
        return self._evaluate(Z)[0]

    def ineq(self, Z):
        return self._evaluate(Z)[1]

    @property
    def has_ineq(self):
        return (self.variant != NOMINAL or self.cfg.input_set.kind == "ball"
                or self.cfg.terminal_set is not None)

    def bounds(self):
        cfg = self.cfg
        lb = np.full(self.nz, -np.inf)
        ub = np.full(self.nz, np.inf)
        if cfg.input_set.kind == "box":
            lb[:self.nu] = -cfg.input_set.radius
            ub[:self.nu] = cfg.input_set.radius
        if self.ns:
            lb[self.nu:] = 0.0
            ub[self.nu:] = cfg.barriers.L_h * (cfg.robust.w_bar_l - cfg.robust.w_bar_r)
        return lb, ub


def _solve(cfg: MPCConfig, x_hat, variant: str, warm_start=None) -> MPCSolution:
    if variant == ROBUST and cfg.robust is None:
        raise ValueError("robust variant needs cfg.robust")
    tr = _Transcription(cfg, x_hat, variant)
    N, m = cfg.horizon, cfg.model.input_dim
    z0 = np.zeros(tr.nz)
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=float).ravel()
        z0[:min(ws.size, tr.nz)] = ws[:tr.nz]
    lb, ub = tr.bounds()
    rep = solve_nlp_sqp(z0, residual=tr.residual, ineq=tr.ineq if tr.has_ineq else None,
                        lb=lb, ub=ub, vectorized=True, opts=cfg.sqp)
    z = rep.solution
    res, con, X = tr._evaluate(z[None, :])
    U = z[:tr.nu].reshape(N, m)
    slacks = z[tr.nu:].copy() if tr.ns else None
    viol = 0.0
    if cfg.state_box is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in cfg.state_box)
        viol = float(np.max(np.maximum(X[0] - hi, 0.0) + np.maximum(lo - X[0], 0.0)))
    return MPCSolution(U, X[0], slacks, float(res[0] @ res[0]), rep.status, rep.iterations, viol, variant)


def solve_nominal(cfg: MPCConfig, x_hat, warm_start=None) -> MPCSolution:
    """Nominal problem from the predicted state; ``inputs[0]`` is the control law."""
    return _solve(cfg, x_hat, NOMINAL, warm_start)


def solve_mpc_cbf(cfg: MPCConfig, x_hat, warm_start=None) -> MPCSolution:
    """Nominal problem plus the decay condition on every member at every stage."""
    return _solve(cfg, x_hat, MPC_CBF, warm_start)


def solve_robust_mpc_cbf(cfg: MPCConfig, x_hat, warm_start=None) -> MPCSolution:
    """Tightened decay condition with bounded, quadratically penalized stage slacks."""
    return _solve(cfg, x_hat, ROBUST, warm_start)


SOLVERS = {NOMINAL: solve_nominal, MPC_CBF: solve_mpc_cbf, ROBUST: solve_robust_mpc_cbf}


class RecedingHorizon:
    """Stateful wrapper that warm-starts each solve from the shifted previous plan."""

    def __init__(self, cfg: MPCConfig, variant: str = NOMINAL):
        if variant not in SOLVERS:
            raise ValueError(f"unknown MPC variant {variant!r}")
        self.cfg, self.variant = cfg, variant
        self._prev: MPCSolution | None = None

    def reset(self):
        self._prev = None

    def set_config(self, cfg: MPCConfig):
        self.cfg = cfg

    def warm_start(self):
        if self._prev is None:
            return None
        U = np.vstack([self._prev.inputs[1:], self._prev.inputs[-1:]])
        parts = [U.ravel()]
        if self._prev.slacks is not None:
            parts.append(np.r_[self._prev.slacks[1:], self._prev.slacks[-1:]])
        return np.concatenate(parts)

    def __call__(self, x_hat) -> MPCSolution:
        sol = SOLVERS[self.variant](self.cfg, x_hat, self.warm_start())
        self._prev = sol
        return sol

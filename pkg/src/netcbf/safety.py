"""Plant-side safety filters: the minimal-deviation CBF filter and its tightened variant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .barrier import BarrierSet
from .dynamics import InputSet, SystemModel, affine_terms
from .qp import QPProblem, Status, fd_gradient, solve_qp

FEAS_TOL = 1e-10


@dataclass(frozen=True)
class FilterConfig:
    """Filter data shared by the plant and, in the combined loop, the predictor.

    ``tighten`` is a fixed margin added to every barrier row. The robust
    filter instead uses ``L_h * w_bar_l``; when ``w_bar_l`` is ``None`` it is
    evaluated pointwise as ``(1 - gamma) h(x) / L_h``.
    """

    barriers: BarrierSet
    model: SystemModel
    tighten: float = 0.0
    input_set: InputSet | None = None
    w_bar_l: float | None = None
    x0: np.ndarray | None = None
    max_iter: int = 20

    def __post_init__(self):
        if self.tighten < 0:
            raise ValueError("tightening must be nonnegative")
        if self.w_bar_l is not None and self.w_bar_l < 0:
            raise ValueError("w_bar_l must be nonnegative")
        if self.input_set is None:
            object.__setattr__(self, "input_set", self.model.input_set)
        if self.x0 is not None:
            h0 = float(np.min(self.barriers.values(np.asarray(self.x0, dtype=float))))
            margin = max(self.tighten, self.robust_margin(self.x0))
            if margin >= self.barriers.gamma * h0:
                raise ValueError("tightening leaves no feasible margin at the initial state")

    def robust_margin(self, x) -> float:
        bs = self.barriers
        if self.w_bar_l is not None:
            return bs.L_h * self.w_bar_l
        h = float(np.min(bs.values(np.asarray(x, dtype=float))))
        return (1.0 - bs.gamma) * max(h, 0.0)


@dataclass
class FilterResult:
    u_applied: np.ndarray
    u_reference: np.ndarray
    intervened: bool
    residual_before: float
    residual_after: float
    status: Status
    iterations: int = 0


def _input_constraints(iset: InputSet, m: int):
    if iset.kind == "box":
        return dict(lb=np.full(m, -iset.radius), ub=np.full(m, iset.radius))
    return dict(balls=[(list(range(m)), iset.radius)])


def _solve(cfg: FilterConfig, x, u_ref, tighten):
    bs, model = cfg.barriers, cfg.model
    x = np.asarray(x, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    m = model.input_dim
    fx, gx = affine_terms(model, x)
    floor = (1.0 - bs.gamma) * bs.values(x) + tighten

    def cons(u):
        return bs.values(fx + np.einsum("...ij,...j->...i", gx, u)) - floor

    c_ref = cons(u_ref)
    before = float(np.min(c_ref))
    if before >= -FEAS_TOL and cfg.input_set.contains(u_ref):
        return FilterResult(u_ref.copy(), u_ref.copy(), False, before, before, Status.OPTIMAL, 0)

    iset_kw = _input_constraints(cfg.input_set, m)
    u = cfg.input_set.project(u_ref)
    status = Status.MAX_ITER
    it = 0
    for it in range(1, cfg.max_iter + 1):
        c = cons(u)
        A = fd_gradient(cons, u, 1e-6 * max(1.0, cfg.input_set.radius), vectorized=model.vectorized)
        rep = solve_qp(QPProblem(np.eye(m), -u_ref, A=A, b=A @ u - c, **iset_kw))
        if rep.status != Status.OPTIMAL:
            status = Status.INFEASIBLE
            break
        u_new = rep.solution
        done = np.max(np.abs(u_new - u)) <= 1e-13 * max(1.0, np.max(np.abs(u)))
        u = u_new
        if np.min(cons(u)) >= -FEAS_TOL and (done or it > 1):
            status = Status.OPTIMAL
            break
    if status != Status.OPTIMAL:
        u = _max_min_residual(cfg, cons, u_ref, iset_kw)
    after = float(np.min(cons(u)))
    if status == Status.OPTIMAL and after < -FEAS_TOL:
        status = Status.MAX_ITER
    intervened = bool(np.linalg.norm(u - u_ref) > 1e-9)
    return FilterResult(u, u_ref.copy(), intervened, before, after, status, it)


def _max_min_residual(cfg: FilterConfig, cons, u_ref, iset_kw):
    """Fallback when the barrier rows cannot all hold: maximize the worst residual."""
    m = cfg.model.input_dim
    u = cfg.input_set.project(u_ref)
    eps = 1e-6
    for _ in range(cfg.max_iter):
        c = cons(u)
        A = fd_gradient(cons, u, 1e-6 * max(1.0, cfg.input_set.radius), vectorized=cfg.model.vectorized)
        # variables (u, t): max t - eps/2 ||u - u_ref||^2 s.t. c + A (u' - u) >= t
        H = np.diag(np.r_[np.full(m, eps), eps])
        cc = np.r_[-eps * u_ref, -1.0]
        AA = np.hstack([A, -np.ones((A.shape[0], 1))])
        lb = ub = None
        balls = ()
        if "lb" in iset_kw:
            lb = np.r_[iset_kw["lb"], -np.inf]
            ub = np.r_[iset_kw["ub"], np.inf]
        else:
            balls = iset_kw["balls"]
        rep = solve_qp(QPProblem(H, cc, A=AA, b=A @ u - c, lb=lb, ub=ub, balls=balls))
        if rep.status != Status.OPTIMAL:
            break
        u_new = rep.solution[:m]
        if np.max(np.abs(u_new - u)) <= 1e-12:
            u = u_new
            break
        u = u_new
    return u


def filter(cfg: FilterConfig, x, u_ref) -> FilterResult:
    """Closest input to ``u_ref`` keeping every barrier row above its decayed value.

    Each member must satisfy ``h_i(f(x) + g(x) u) >= (1 - gamma) h_i(x) +
    tighten`` on the nominal next state. The barrier rows are nonlinear in
    ``u`` and are handled by repeated linearization. If no admissible input
    exists, the input maximizing the worst residual is returned and the
    status is ``Infeasible``.
    """
    return _solve(cfg, x, u_ref, cfg.tighten)


def robust_filter(cfg: FilterConfig, x, u_ref) -> FilterResult:
    """Filter with the margin ``L_h * w_bar_l`` added to every barrier row."""
    return _solve(cfg, x, u_ref, cfg.tighten + cfg.robust_margin(x))

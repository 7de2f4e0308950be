"""Dense solvers for the small problems in the filters and the MPC.

``solve_qp`` is a dual active-set method (Goldfarb and Idnani): it starts
from the unconstrained minimizer and adds violated constraints one at a
time, which suits safety filters where few barrier rows are ever active.
``solve_nlp_sqp`` wraps it in a line-search SQP on an l1 merit function.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass
class QPProblem:
    """``min 1/2 z'Hz + c'z + offset`` s.t. ``A z >= b``, ``Aeq z = beq``, ``lb <= z <= ub``.

    ``balls`` holds ``(indices, radius)`` pairs constraining the Euclidean norm
    of a block of variables; these are handled with tangent cutting planes.
    """

    H: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    balls: Sequence[tuple[Sequence[int], float]] = ()
    offset: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        n = self.c.size
        if self.H.shape != (n, n):
            raise ValueError("H and c dimensions disagree")
        scale = max(1.0, np.max(np.abs(self.H)))
        if np.max(np.abs(self.H - self.H.T)) > 1e-12 * scale:
            raise ValueError("H must be symmetric")
        if self.A is None:
            self.A, self.b = np.zeros((0, n)), np.zeros(0)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, n)
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.Aeq is None:
            self.Aeq, self.beq = np.zeros((0, n)), np.zeros(0)
        self.Aeq = np.atleast_2d(np.asarray(self.Aeq, dtype=float)).reshape(-1, n)
        self.beq = np.atleast_1d(np.asarray(self.beq, dtype=float))
        if self.A.shape[0] != self.b.size or self.Aeq.shape[0] != self.beq.size:
            raise ValueError("constraint rows and right-hand sides disagree")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(
            np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(
            np.asarray(self.ub, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.c @ z + self.offset)


@dataclass
class SolveReport:
    solution: np.ndarray
    objective: float
    status: Status
    active_set: list[int]
    iterations: int
    multipliers: np.ndarray | None = None
    kkt_residual: float = np.nan
    violation: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


def _factor(H: np.ndarray) -> np.ndarray:
    """Cholesky factor of H, with a tiny ridge when H is only semidefinite."""
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        pass
    scale = max(1.0, np.max(np.abs(H)))
    eig = np.linalg.eigvalsh(H)
    if eig[0] < -1e-10 * scale:
        raise ValueError(f"H is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
    ridge = 1e-10 * scale
    return np.linalg.cholesky(H + (ridge - min(eig[0], 0.0)) * np.eye(H.shape[0]))


def _dual_active_set(L, c, C, d, n_eq, max_iter, tol):
    """Goldfarb-Idnani on rows ``C z >= d``; the first ``n_eq`` rows are equalities.

    Returns (x, active, multipliers, status, iterations). On infeasibility
    ``active`` is the certificate subset.
    """
    p = c.size
    J0 = solve_triangular(L, np.eye(p), lower=True).T
    x = -J0 @ (J0.T @ c)
    active: list[int] = []
    u = np.zeros(0)
    norms = np.maximum(np.linalg.norm(C, axis=1), 1e-300)
    is_eq = np.zeros(C.shape[0], dtype=bool)
    is_eq[:n_eq] = True
    sign = np.ones(C.shape[0])
    it = 0
    pending_eq = list(range(n_eq))
    while True:
        if pending_eq:
            k = pending_eq.pop(0)
            sk = C[k] @ x - d[k]
            sign[k] = -1.0 if sk > 0 else 1.0
            pidx = k
        else:
            if C.shape[0] == 0:
                return x, active, u, Status.OPTIMAL, it
            s = C @ x - d
            s[active] = np.inf
            s[:n_eq] = np.inf
            viol = s / norms
            pidx = int(np.argmin(viol))
            if s[pidx] >= -tol:
                return x, active, u * sign[active], Status.OPTIMAL, it
        npl = sign[pidx] * C[pidx]
        bpl = sign[pidx] * d[pidx]
        uplus = 0.0
        while True:
            it += 1
            if it > max_iter:
                return x, active, u, Status.MAX_ITER, it
            q = len(active)
            if q:
                N = (sign[active][:, None] * C[active]).T
                Q, R = np.linalg.qr(J0.T @ N, mode="complete")
                J = J0 @ Q
                dd = J.T @ npl
                z = J[:, q:] @ dd[q:]
                r = solve_triangular(R[:q, :q], dd[:q])
            else:
                z = J0 @ (J0.T @ npl)
                r = np.zeros(0)
            t1, kdrop = np.inf, -1
            for j in range(q):
                if not is_eq[active[j]] and r[j] > 1e-14:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, kdrop = ratio, j
            sp = npl @ x - bpl
            zn = z @ npl
            t2 = -sp / zn if (np.linalg.norm(z) > 1e-14 and zn > 1e-300) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                return x, active + [pidx], u, Status.INFEASIBLE, it
            if not np.isfinite(t2):
                u = u - t * r
                uplus += t
                del active[kdrop]
                u = np.delete(u, kdrop)
                continue
            x = x + t * z
            u = u - t * r
            uplus += t
            if t == t2:
                active.append(pidx)
                u = np.append(u, uplus)
                break
            del active[kdrop]
            u = np.delete(u, kdrop)


def solve_qp(prob: QPProblem, max_iter: int = 200, tol: float = 1e-12) -> SolveReport:
    """Solve a convex QP; see :class:`QPProblem`.

    Reported ``active_set`` indices refer to the stacked rows
    ``[A; lower bounds; upper bounds; Aeq]``, with only finite bounds counted
    in the order of the variables. On infeasibility they form the subset of
    rows that cannot be satisfied together.
    """
    n = prob.n
    L = _factor(prob.H)
    eye = np.eye(n)
    lo = np.flatnonzero(np.isfinite(prob.lb))
    hi = np.flatnonzero(np.isfinite(prob.ub))
    ineq_C = np.vstack([prob.A, eye[lo], -eye[hi]])
    ineq_d = np.concatenate([prob.b, prob.lb[lo], -prob.ub[hi]])
    n_ineq = ineq_C.shape[0]
    n_eq = prob.Aeq.shape[0]
    cuts_C = np.zeros((0, n))
    cuts_d = np.zeros(0)
    total_it = 0
    for _ in range(60):
        C = np.vstack([prob.Aeq, ineq_C, cuts_C])
        d = np.concatenate([prob.beq, ineq_d, cuts_d])
        x, active, u, status, it = _dual_active_set(L, prob.c, C, d, n_eq, max_iter - total_it, tol)
        total_it += it
        if status != Status.OPTIMAL or not prob.balls:
            break
        added = False
        for idx, radius in prob.balls:
            idx = list(idx)
            nrm = np.linalg.norm(x[idx])
            if nrm > radius * (1 + 1e-10) + 1e-12:
                row = np.zeros(n)
                row[idx] = -x[idx] / nrm
                cuts_C = np.vstack([cuts_C, row])
                cuts_d = np.append(cuts_d, -radius)
                added = True
        if not added:
            break
    else:
        status = Status.MAX_ITER
    # map stacked indices [eq, ineq, cuts] to the documented order [ineq, eq, cuts]
    def _label(i):
        if i < n_eq:
            return n_ineq + i
        if i < n_eq + n_ineq:
            return i - n_eq
        return i
    labels = [_label(i) for i in active]
    mult = np.zeros(C.shape[0])
    if status == Status.OPTIMAL and len(active):
        for i, ui in zip(active, u):
            mult[i] = ui
    mult_out = np.concatenate([mult[n_eq:n_eq + n_ineq], mult[:n_eq], mult[n_eq + n_ineq:]])
    viol = 0.0
    if C.shape[0]:
        s = C @ x - d
        viol = float(max(0.0, -np.min(s[n_eq:], initial=0.0), np.max(np.abs(s[:n_eq]), initial=0.0)))
    grad = prob.H @ x + prob.c
    kkt = np.nan
    if status == Status.OPTIMAL:
        kkt = float(np.max(np.abs(grad - C.T @ mult), initial=0.0))
    return SolveReport(solution=x, objective=prob.objective(x), status=status,
                       active_set=sorted(labels), iterations=total_it,
                       multipliers=mult_out, kkt_residual=kkt, violation=viol)


def fd_gradient(fn: Callable, z, h_step: float = 1e-6, vectorized: bool = False) -> np.ndarray:
    """Central-difference Jacobian, always returned with shape ``(k, p)``.

    A scalar-valued ``fn`` gives a ``(1, p)`` row. With ``vectorized`` the
    function is called once on the ``(2p, p)`` stack of perturbed points.
    """
    if not h_step > 0:
        raise ValueError("finite-difference step must be positive")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    p = z.size
    E = np.eye(p) * h_step
    if vectorized:
        F = np.asarray(fn(np.vstack([z + E, z - E])), dtype=float).reshape(2 * p, -1)
        return ((F[:p] - F[p:]) / (2 * h_step)).T
    cols = []
    for i in range(p):
        fp = np.atleast_1d(np.asarray(fn(z + E[i]), dtype=float)).ravel()
        fm = np.atleast_1d(np.asarray(fn(z - E[i]), dtype=float)).ravel()
        cols.append((fp - fm) / (2 * h_step))
    return np.array(cols).T


def fd_hessian(fn: Callable, z, h_step: float = 1e-4) -> np.ndarray:
    """Symmetric central-difference Hessian of a scalar function."""
    z = np.asarray(z, dtype=float)
    p = z.size
    H = np.empty((p, p))
    f0 = float(fn(z))
    E = np.eye(p) * h_step
    fp = np.array([float(fn(z + E[i])) for i in range(p)])
    fm = np.array([float(fn(z - E[i])) for i in range(p)])
    for i in range(p):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h_step ** 2
        for j in range(i + 1, p):
            fpp = float(fn(z + E[i] + E[j]))
            fmm = float(fn(z - E[i] - E[j]))
            fpm = float(fn(z + E[i] - E[j]))
            fmp = float(fn(z - E[i] + E[j]))
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h_step ** 2)
    return H


@dataclass
class SQPOptions:
    max_iter: int = 50
    tol_feas: float = 1e-6
    tol_stat: float = 1e-4
    tol_step: float = 1e-9
    fd_step: float = 1e-6
    max_halvings: int = 30
    penalty: float = 10.0
    elastic_penalty: float = 1e4
    hess_ridge: float = 1e-10
    qp_max_iter: int = 200
    tol_merit: float = 1e-12


def _violation(c, e):
    v = 0.0
    if c is not None and c.size:
        v += float(np.sum(np.maximum(0.0, -c)))
    if e is not None and e.size:
        v += float(np.sum(np.abs(e)))
    return v


class _Evaluator:
    """Caches function values and FD Jacobians at the current iterate."""

    def __init__(self, fn, vectorized, h):
        self.fn, self.vectorized, self.h = fn, vectorized, h

    def value(self, z):
        if self.fn is None:
            return None
        if self.vectorized:
            return np.asarray(self.fn(z[None, :]), dtype=float).reshape(-1)
        return np.atleast_1d(np.asarray(self.fn(z), dtype=float)).ravel()

    def value_jac(self, z):
        if self.fn is None:
            return None, None
        p = z.size
        if self.vectorized:
            E = np.eye(p) * self.h
            F = np.asarray(self.fn(np.vstack([z[None, :], z + E, z - E])), dtype=float)
            F = F.reshape(2 * p + 1, -1)
            return F[0], ((F[1:p + 1] - F[p + 1:]) / (2 * self.h)).T
        return self.value(z), fd_gradient(self.fn, z, self.h)


def solve_nlp_sqp(z0, objective: Callable | None = None, residual: Callable | None = None,
                  ineq: Callable | None = None, eq: Callable | None = None,
                  lb=None, ub=None, vectorized: bool = False,
                  opts: SQPOptions | None = None) -> SolveReport:
    """Line-search SQP with an l1 merit function.

    The cost is either a scalar ``objective(z)`` (finite-difference gradient
    and Hessian) or ``residual(z)`` with cost ``||r(z)||^2`` and a
    Gauss-Newton Hessian. Constraints are ``ineq(z) >= 0``, ``eq(z) == 0``
    and simple bounds. When a linearization is inconsistent the step comes
    from the elastic (l1-relaxed) subproblem; if the iteration settles at a
    point that still violates the constraints the status is ``Infeasible``.
    ``vectorized`` callables take a ``(B, p)`` batch and return ``(B, k)``.
    """
    if (objective is None) == (residual is None):
        raise ValueError("give exactly one of objective or residual")
    opts = opts or SQPOptions()
    z = np.atleast_1d(np.asarray(z0, dtype=float)).copy()
    if not np.all(np.isfinite(z)):
        raise ValueError("initial point must be finite")
    p = z.size
    lb = np.full(p, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (p,))
    ub = np.full(p, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (p,))
    z = np.clip(z, lb, ub)
    ev_res = _Evaluator(residual, vectorized, opts.fd_step)
    ev_in = _Evaluator(ineq, vectorized, opts.fd_step)
    ev_eq = _Evaluator(eq, vectorized, opts.fd_step)

    def cost_of(zz):
        if residual is not None:
            r = ev_res.value(zz)
            return float(r @ r)
        return float(objective(zz[None, :]) if vectorized else objective(zz))

    def scalar_obj(zz):
        return float(objective(zz))

    mu = opts.penalty
    merit_log: list[tuple[float, float]] = []
    best = None  # (violation, cost, z)

    def better(v, f_):
        if best is None:
            return True
        if v <= opts.tol_feas and best[0] <= opts.tol_feas:
            return f_ < best[1]
        return v < best[0]
    status = Status.MAX_ITER
    last_active: list[int] = []
    mult = None
    stat = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        if residual is not None:
            r, Jr = ev_res.value_jac(z)
            f = float(r @ r)
            g = 2.0 * Jr.T @ r
            B = 2.0 * Jr.T @ Jr
        else:
            f = cost_of(z)
            g = fd_gradient(scalar_obj, z, opts.fd_step)[0]
            B = fd_hessian(scalar_obj, z)
            B = 0.5 * (B + B.T)
            w, V = np.linalg.eigh(B)
            B = (V * np.maximum(w, 1e-8 * max(1.0, np.max(np.abs(w))))) @ V.T
        B = B + opts.hess_ridge * max(1.0, np.max(np.abs(np.diag(B)))) * np.eye(p)
        c, Jc = ev_in.value_jac(z)
        e, Je = ev_eq.value_jac(z)
        viol = _violation(c, e)
        if better(viol, f):
            best = (viol, f, z.copy())
        A = Jc if c is not None else None
        bvec = -c if c is not None else None
        qp = QPProblem(B, g, A=A, b=bvec, Aeq=Je if e is not None else None,
                       beq=-e if e is not None else None, lb=lb - z, ub=ub - z)
        rep = solve_qp(qp, max_iter=opts.qp_max_iter)
        elastic = False
        if rep.status != Status.OPTIMAL:
            rep = _elastic_step(B, g, Jc, c, Je, e, lb - z, ub - z, opts)
            elastic = True
            if rep.status != Status.OPTIMAL:
                status = Status.MAX_ITER
                break
        d = rep.solution[:p]
        last_active = rep.active_set
        mult = rep.multipliers
        lam_max = float(np.max(np.abs(rep.multipliers), initial=0.0)) if rep.multipliers is not None else 0.0
        if elastic:
            mu = max(mu, rep.info["elastic_penalty"])
        else:
            mu = max(mu, 2.0 * lam_max)
        lin_viol = rep.info.get("elastic_violation", 0.0)
        stat = float(np.max(np.abs(B @ d), initial=0.0))
        D = float(g @ d) - mu * (viol - lin_viol)
        dn = float(np.max(np.abs(d), initial=0.0))
        if dn <= opts.tol_step * (1.0 + float(np.max(np.abs(z)))) or D > -1e-16 * max(1.0, abs(f)):
            if viol <= opts.tol_feas:
                status = Status.OPTIMAL
            elif elastic or lin_viol > opts.tol_feas:
                status = Status.INFEASIBLE
            else:
                status = Status.MAX_ITER
            break
        phi0 = f + mu * viol
        alpha = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            zt = z + alpha * d
            ct = ev_in.value(zt)
            et = ev_eq.value(zt)
            ft = cost_of(zt)
            phit = ft + mu * _violation(ct, et)
            if phit <= phi0 + 1e-4 * alpha * D:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # the merit cannot decrease any further at working precision
            feasible = viol <= opts.tol_feas
            status = Status.OPTIMAL if feasible and stat <= opts.tol_stat else Status.MAX_ITER
            break
        merit_log.append((phi0, phit))
        z = np.clip(zt, lb, ub)
        vt = _violation(ct, et)
        small = dn <= 1e3 * opts.tol_step * (1.0 + float(np.max(np.abs(z))))
        stalled = phi0 - phit <= opts.tol_merit * (1.0 + abs(phi0))
        if (small and alpha == 1.0 or stalled) and vt <= opts.tol_feas and stat <= opts.tol_stat:
            status = Status.OPTIMAL
            break
    c = ev_in.value(z)
    e = ev_eq.value(z)
    viol = _violation(c, e)
    info = {"merit": merit_log, "penalty": mu, "stationarity": stat}
    if status != Status.OPTIMAL and best is not None and best[0] <= opts.tol_feas and viol > opts.tol_feas:
        z = best[2]
        viol = best[0]
        info["best_feasible"] = True
    return SolveReport(solution=z, objective=cost_of(z), status=status, active_set=last_active,
                       iterations=it, multipliers=mult, kkt_residual=stat, violation=viol, info=info)


def _elastic_step(B, g, Jc, c, Je, e, lo, hi, opts) -> SolveReport:
    """l1-elastic subproblem: relax every linearized constraint by a penalized slack."""
    p = g.size
    m_in = 0 if c is None else c.size
    m_eq = 0 if e is None else e.size
    ns = m_in + 2 * m_eq
    scale = max(1.0, float(np.max(np.abs(g), initial=0.0)))
    rho = opts.elastic_penalty * scale
    H = np.zeros((p + ns, p + ns))
    H[:p, :p] = B
    H[p:, p:] = np.eye(ns) * 1e-8 * scale
    cc = np.concatenate([g, np.full(ns, rho)])
    rows, rhs = [], []
    if m_in:
        rows.append(np.hstack([Jc, np.eye(m_in), np.zeros((m_in, 2 * m_eq))]))
        rhs.append(-c)
    if m_eq:
        rows.append(np.hstack([Je, np.zeros((m_eq, m_in)), np.eye(m_eq), np.zeros((m_eq, m_eq))]))
        rhs.append(-e)
        rows.append(np.hstack([-Je, np.zeros((m_eq, m_in)), np.zeros((m_eq, m_eq)), np.eye(m_eq)]))
        rhs.append(e)
    lb = np.concatenate([lo, np.zeros(ns)])
    ub = np.concatenate([hi, np.full(ns, np.inf)])
    rep = solve_qp(QPProblem(H, cc, A=np.vstack(rows), b=np.concatenate(rhs), lb=lb, ub=ub),
                   max_iter=opts.qp_max_iter + 2 * ns)
    s = rep.solution[p:]
    rep.info["elastic_violation"] = float(np.sum(s))
    rep.info["elastic_penalty"] = rho
    if rep.multipliers is not None and m_in:
        rep.multipliers = rep.multipliers[:m_in + 2 * m_eq]
    return rep

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcbf.qp import QPProblem, SQPOptions, Status, fd_gradient, solve_nlp_sqp, solve_qp


def random_qp(rng, n=2, k=3):
    R = rng.normal(size=(n, n))
    H = R @ R.T + 0.5 * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(k, n))
    # constraints hold at a random interior point so the instance is feasible
    z0 = rng.uniform(-0.5, 0.5, size=n)
    b = A @ z0 - rng.uniform(0, 1, size=k)
    return QPProblem(H, c, A=A, b=b, lb=-2.0, ub=2.0)


def _grid_pass(prob, lo, hi, n_grid):
    axes = [np.linspace(a, b, n_grid) for a, b in zip(lo, hi)]
    Z = np.array(list(itertools.product(*axes)))
    Z = Z[np.all(Z @ prob.A.T >= prob.b - 1e-12, axis=1)]
    vals = 0.5 * np.einsum("ij,jk,ik->i", Z, prob.H, Z) + Z @ prob.c
    i = np.argmin(vals)
    return vals[i], Z[i]


def grid_minimum(prob, n_grid=401):
    """Coarse grid over the box, then a fine grid around the best coarse point."""
    lo, hi = np.full(prob.n, -2.0), np.full(prob.n, 2.0)
    _, z = _grid_pass(prob, lo, hi, n_grid)
    h = 4.0 / (n_grid - 1)
    v, _ = _grid_pass(prob, np.maximum(z - 2 * h, lo), np.minimum(z + 2 * h, hi), n_grid)
    return v


def test_unconstrained_oracle():
    rep = solve_qp(QPProblem(np.diag([2.0, 4.0]), [-2.0, -8.0]))
    np.testing.assert_allclose(rep.solution, [1.0, 2.0])
    assert rep.objective == pytest.approx(-9.0)
    assert rep.active_set == []


def test_single_halfspace_oracle():
    # min 1/2 ||z||^2 s.t. z1 + z2 >= 2  ->  z = (1, 1), multiplier 1
    rep = solve_qp(QPProblem(np.eye(2), np.zeros(2), A=[[1.0, 1.0]], b=[2.0]))
    np.testing.assert_allclose(rep.solution, [1.0, 1.0], atol=1e-12)
    assert rep.active_set == [0]
    assert rep.multipliers[0] == pytest.approx(1.0)
    assert rep.kkt_residual < 1e-12


def test_box_and_equality():
    prob = QPProblem(np.eye(2), [-3.0, -3.0], Aeq=[[1.0, -1.0]], beq=[0.0], ub=[1.0, 5.0])
    rep = solve_qp(prob)
    np.testing.assert_allclose(rep.solution, [1.0, 1.0], atol=1e-12)
    assert rep.ok


def test_ball_constraint():
    rep = solve_qp(QPProblem(np.eye(2), [-3.0, -4.0], balls=[([0, 1], 1.0)]))
    np.testing.assert_allclose(rep.solution, [0.6, 0.8], atol=1e-8)


def test_infeasible_reports_conflicting_rows():
    prob = QPProblem(np.eye(1), [0.0], A=[[1.0], [-1.0]], b=[1.0, 0.0])
    rep = solve_qp(prob)
    assert rep.status == Status.INFEASIBLE
    assert set(rep.active_set) <= {0, 1}


def test_rejects_asymmetric_hessian():
    with pytest.raises(ValueError):
        QPProblem([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])


def test_qp_matches_grid_search_on_random_instances():
    rng = np.random.default_rng(7)
    gaps = []
    for _ in range(50):
        prob = random_qp(rng)
        rep = solve_qp(prob)
        assert rep.ok
        gaps.append(grid_minimum(prob) - rep.objective)
    # the solver may only beat the grid, and never by more than the grid spacing allows
    assert min(gaps) >= -1e-9
    assert max(gaps) <= 1e-2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_qp_solution_satisfies_kkt(seed):
    rng = np.random.default_rng(seed)
    prob = random_qp(rng, n=3, k=4)
    rep = solve_qp(prob)
    assert rep.ok
    z = rep.solution
    assert np.all(prob.A @ z >= prob.b - 1e-9)
    assert np.all(z <= 2 + 1e-9) and np.all(z >= -2 - 1e-9)
    assert np.all(rep.multipliers >= -1e-10)
    assert rep.kkt_residual < 1e-8


def test_fd_gradient_two_step_sizes_agree():
    fn = lambda z: np.array([np.sin(z[0]) * z[1] ** 2, np.exp(0.3 * z[0] - z[1])])
    z = np.array([0.4, -1.1])
    J1 = fd_gradient(fn, z, 1e-6)
    J2 = fd_gradient(fn, z, 1e-4)
    exact = np.array([[np.cos(z[0]) * z[1] ** 2, 2 * np.sin(z[0]) * z[1]],
                      [0.3 * np.exp(0.3 * z[0] - z[1]), -np.exp(0.3 * z[0] - z[1])]])
    assert np.max(np.abs(J1 - J2)) / np.max(np.abs(J2)) <= 1e-3
    np.testing.assert_allclose(J1, exact, rtol=1e-7)


def test_fd_gradient_vectorized_matches_loop():
    fn = lambda Z: np.sum(np.asarray(Z) ** 3, axis=-1, keepdims=True)
    z = np.array([0.5, -0.2, 1.5])
    np.testing.assert_allclose(fd_gradient(fn, z, 1e-5, vectorized=True), fd_gradient(fn, z, 1e-5),
                               rtol=1e-9)


def test_sqp_rosenbrock_with_constraint():
    # min (1-x)^2 + 100 (y-x^2)^2 s.t. x^2 + y^2 <= 1.5
    res = lambda z: np.array([1 - z[0], 10 * (z[1] - z[0] ** 2)])
    ineq = lambda z: np.array([1.5 - z @ z])
    rep = solve_nlp_sqp([-1.0, 1.0], residual=res, ineq=ineq, opts=SQPOptions(max_iter=200))
    assert rep.ok
    assert np.sum(res(rep.solution) ** 2) < 0.06
    assert ineq(rep.solution)[0] >= -1e-6


def _mpc_1d_cost(x0, U, gamma, q, r):
    # scalar integrator, stage cost q x^2 + r u^2, barrier h(x) = x - 0.2
    x, cost, ok = x0, 0.0, True
    for u in U:
        xn = x + u
        ok &= (xn - 0.2) >= (1 - gamma) * (x - 0.2) - 1e-12
        cost += q * xn ** 2 + r * u ** 2
        x = xn
    return cost, ok


@pytest.mark.parametrize("N", [1, 2])
@pytest.mark.parametrize("x0", [1.0, 0.5, 2.5])
def test_sqp_matches_input_grid_brute_force(N, x0):
    gamma, q, r, umax = 0.4, 1.0, 0.1, 1.0

    def residual(U):
        x, out = x0, []
        for u in U:
            x = x + u
            out += [np.sqrt(q) * x, np.sqrt(r) * u]
        return np.array(out)

    def ineq(U):
        x, out = x0, []
        for u in U:
            xn = x + u
            out.append((xn - 0.2) - (1 - gamma) * (x - 0.2))
            x = xn
        return np.array(out)

    rep = solve_nlp_sqp(np.zeros(N), residual=residual, ineq=ineq, lb=-umax, ub=umax)
    assert rep.ok
    grid = np.linspace(-umax, umax, 801)
    best = np.inf
    for U in itertools.product(grid, repeat=N):
        c, ok = _mpc_1d_cost(x0, U, gamma, q, r)
        if ok:
            best = min(best, c)
    sqp_cost = _mpc_1d_cost(x0, rep.solution, gamma, q, r)[0]
    assert abs(sqp_cost - best) <= 1e-2
    assert np.all(ineq(rep.solution) >= -1e-7)


def test_sqp_reports_infeasible():
    rep = solve_nlp_sqp([0.0], objective=lambda z: float(z[0] ** 2),
                        ineq=lambda z: np.array([z[0] - 3.0]), ub=1.0)
    assert rep.status == Status.INFEASIBLE

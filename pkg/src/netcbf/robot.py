"""Planar three-link arm, link sample points, obstacle barriers and the reaching task.

Links are uniform rods moving in a horizontal plane (no gravity). The
continuous model ``M(q) qdd + C(q, qd) qd + d qd = u`` is discretized with
semi-implicit Euler, which keeps the transition control-affine:
``f(x)`` carries the drift and ``g(x) = [Ts^2 M^-1; Ts M^-1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .barrier import BarrierFunction, BarrierSet, estimate_lipschitz
from .dynamics import InputSet, SystemModel


@dataclass(frozen=True)
class ArmModel:
    link_lengths: tuple = (0.4, 0.3, 0.2)
    link_masses: tuple = (1.0, 0.8, 0.5)
    T_s: float = 0.005
    damping: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "link_masses", tuple(float(v) for v in self.link_masses))
        if len(self.link_lengths) != 3 or len(self.link_masses) != 3:
            raise ValueError("the arm has exactly three links")
        if min(self.link_lengths) <= 0 or min(self.link_masses) <= 0:
            raise ValueError("link lengths and masses must be positive")
        if not self.T_s > 0 or self.damping < 0:
            raise ValueError("need T_s > 0 and damping >= 0")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def _coeffs(self):
        l1, l2, l3 = self.link_lengths
        m1, m2, m3 = self.link_masses
        a1 = m1 * l1 ** 2 / 3 + (m2 + m3) * l1 ** 2
        a2 = m2 * l2 ** 2 / 3 + m3 * l2 ** 2
        a3 = m3 * l3 ** 2 / 3
        b12 = (m2 / 2 + m3) * l1 * l2
        b13 = m3 * l1 * l3 / 2
        b23 = m3 * l2 * l3 / 2
        return a1, a2, a3, b12, b13, b23

    def mass_matrix(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        a1, a2, a3, b12, b13, b23 = self._coeffs()
        c2, c3, c23 = np.cos(q[..., 1]), np.cos(q[..., 2]), np.cos(q[..., 1] + q[..., 2])
        M = np.empty(q.shape[:-1] + (3, 3))
        M[..., 0, 0] = a1 + a2 + a3 + 2 * b12 * c2 + 2 * b13 * c23 + 2 * b23 * c3
        M[..., 0, 1] = M[..., 1, 0] = a2 + a3 + b12 * c2 + b13 * c23 + 2 * b23 * c3
        M[..., 0, 2] = M[..., 2, 0] = a3 + b13 * c23 + b23 * c3
        M[..., 1, 1] = a2 + a3 + 2 * b23 * c3
        M[..., 1, 2] = M[..., 2, 1] = a3 + b23 * c3
        M[..., 2, 2] = a3
        return M

    def mass_matrix_grad(self, q) -> np.ndarray:
        """``dM/dq_k`` stacked on axis -3 (``M`` does not depend on ``q_1``)."""
        q = np.asarray(q, dtype=float)
        _, _, _, b12, b13, b23 = self._coeffs()
        s2, s3, s23 = np.sin(q[..., 1]), np.sin(q[..., 2]), np.sin(q[..., 1] + q[..., 2])
        dM = np.zeros(q.shape[:-1] + (3, 3, 3))
        d2 = dM[..., 1, :, :]
        d2[..., 0, 0] = -2 * b12 * s2 - 2 * b13 * s23
        d2[..., 0, 1] = d2[..., 1, 0] = -b12 * s2 - b13 * s23
        d2[..., 0, 2] = d2[..., 2, 0] = -b13 * s23
        d3 = dM[..., 2, :, :]
        d3[..., 0, 0] = -2 * b13 * s23 - 2 * b23 * s3
        d3[..., 0, 1] = d3[..., 1, 0] = -b13 * s23 - 2 * b23 * s3
        d3[..., 0, 2] = d3[..., 2, 0] = -b13 * s23 - b23 * s3
        d3[..., 1, 1] = -2 * b23 * s3
        d3[..., 1, 2] = d3[..., 2, 1] = -b23 * s3
        return dM

    def coriolis(self, q, qd) -> np.ndarray:
        """Velocity product ``C(q, qd) qd`` from the Christoffel symbols of ``M``."""
        dM = self.mass_matrix_grad(q)
        qd = np.asarray(qd, dtype=float)
        Mdot = np.einsum("...kij,...k->...ij", dM, qd)
        quad = np.einsum("...i,...kij,...j->...k", qd, dM, qd)
        return np.einsum("...ij,...j->...i", Mdot, qd) - 0.5 * quad

    def kinetic_energy(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        qd = x[..., 3:]
        return 0.5 * np.einsum("...i,...ij,...j->...", qd, self.mass_matrix(x[..., :3]), qd)

    def drift_and_gain(self, x):
        """``(f(x), g(x))`` for a single state or any batch of states.

        Same model as :meth:`mass_matrix` and :meth:`coriolis`, evaluated by a
        compiled kernel with the 3x3 algebra unrolled.
        """
        x = np.asarray(x, dtype=float)
        flat = np.ascontiguousarray(x.reshape(-1, 6))
        F, G = _drift_gain_kernel(flat, np.array(self._coeffs()), self.T_s, self.damping)
        return F.reshape(x.shape), G.reshape(x.shape[:-1] + (6, 3))

    def f(self, x) -> np.ndarray:
        return self.drift_and_gain(x)[0]

    def g(self, x) -> np.ndarray:
        return self.drift_and_gain(x)[1]

    def system_model(self, input_limit: float = 5.0, L_f: float = 0.0, L_g: float = 0.0) -> SystemModel:
        return SystemModel(6, 3, self.f, self.g, L_f=L_f, L_g=L_g,
                           input_set=InputSet("box", input_limit, 3), vectorized=True,
                           name="planar_arm_3dof", fg=self.drift_and_gain)

    # kinematics

    def joint_positions(self, q) -> np.ndarray:
        """Base, joint 2, joint 3 and end-effector positions, shape ``(..., 4, 2)``."""
        q = np.asarray(q, dtype=float)
        th = np.cumsum(q, axis=-1)
        steps = np.stack([np.cos(th), np.sin(th)], axis=-1) * np.asarray(self.link_lengths)[:, None]
        pts = np.concatenate([np.zeros(q.shape[:-1] + (1, 2)), np.cumsum(steps, axis=-2)], axis=-2)
        return pts

    def end_effector(self, q) -> np.ndarray:
        return self.joint_positions(q)[..., 3, :]


@numba.njit(cache=True)
def _drift_gain_kernel(X, coeffs, T, damp):
    a1, a2, a3, b12, b13, b23 = coeffs[0], coeffs[1], coeffs[2], coeffs[3], coeffs[4], coeffs[5]
    B = X.shape[0]
    F = np.empty((B, 6))
    G = np.empty((B, 6, 3))
    for b in range(B):
        q1, q2, q3, v1, v2, v3 = X[b, 0], X[b, 1], X[b, 2], X[b, 3], X[b, 4], X[b, 5]
        c2, c3, c23 = np.cos(q2), np.cos(q3), np.cos(q2 + q3)
        s2, s3, s23 = np.sin(q2), np.sin(q3), np.sin(q2 + q3)
        m11 = a1 + a2 + a3 + 2 * b12 * c2 + 2 * b13 * c23 + 2 * b23 * c3
        m12 = a2 + a3 + b12 * c2 + b13 * c23 + 2 * b23 * c3
        m13 = a3 + b13 * c23 + b23 * c3
        m22 = a2 + a3 + 2 * b23 * c3
        m23 = a3 + b23 * c3
        m33 = a3
        # nonzero entries of dM/dq2 and dM/dq3
        p, r, t = b12 * s2, b13 * s23, b23 * s3
        d2_11, d2_12, d2_13 = -2 * p - 2 * r, -p - r, -r
        d3_11, d3_12, d3_13 = -2 * r - 2 * t, -r - 2 * t, -r - t
        d3_22, d3_23 = -2 * t, -t
        # C qd = Mdot qd - 1/2 d(qd' M qd)/dq
        e11, e12, e13 = d2_11 * v2 + d3_11 * v3, d2_12 * v2 + d3_12 * v3, d2_13 * v2 + d3_13 * v3
        e22, e23 = d3_22 * v3, d3_23 * v3
        md1 = e11 * v1 + e12 * v2 + e13 * v3
        md2 = e12 * v1 + e22 * v2 + e23 * v3
        md3 = e13 * v1 + e23 * v2
        quad2 = d2_11 * v1 * v1 + 2 * d2_12 * v1 * v2 + 2 * d2_13 * v1 * v3
        quad3 = (d3_11 * v1 * v1 + 2 * d3_12 * v1 * v2 + 2 * d3_13 * v1 * v3
                 + d3_22 * v2 * v2 + 2 * d3_23 * v2 * v3)
        r1 = -(md1 + damp * v1)
        r2 = -(md2 - 0.5 * quad2 + damp * v2)
        r3 = -(md3 - 0.5 * quad3 + damp * v3)
        k11 = m22 * m33 - m23 * m23
        k12 = m13 * m23 - m12 * m33
        k13 = m12 * m23 - m13 * m22
        k22 = m11 * m33 - m13 * m13
        k23 = m12 * m13 - m11 * m23
        k33 = m11 * m22 - m12 * m12
        det = m11 * k11 + m12 * k12 + m13 * k13
        i11, i12, i13 = k11 / det, k12 / det, k13 / det
        i22, i23, i33 = k22 / det, k23 / det, k33 / det
        n1 = v1 + T * (i11 * r1 + i12 * r2 + i13 * r3)
        n2 = v2 + T * (i12 * r1 + i22 * r2 + i23 * r3)
        n3 = v3 + T * (i13 * r1 + i23 * r2 + i33 * r3)
        F[b, 0] = q1 + T * n1
        F[b, 1] = q2 + T * n2
        F[b, 2] = q3 + T * n3
        F[b, 3] = n1
        F[b, 4] = n2
        F[b, 5] = n3
        inv = ((i11, i12, i13), (i12, i22, i23), (i13, i23, i33))
        for i in range(3):
            for j in range(3):
                G[b, i, j] = T * T * inv[i][j]
                G[b, 3 + i, j] = T * inv[i][j]
    return F, G


SAMPLE_FRACTIONS = np.array([0.0, 0.25, 0.5, 0.75])


def sample_points(arm: ArmModel, q, samples_per_link: int = 3) -> np.ndarray:
    """Joint positions, interior link samples and the end-effector, link-major.

    With three samples per link this is 13 points: for each link its
    proximal joint followed by the samples at 1/4, 1/2, 3/4 of its length,
    then the end-effector.
    """
    J = arm.joint_positions(q)
    fr = np.arange(samples_per_link + 1) / (samples_per_link + 1)
    start = J[..., :3, None, :]
    seg = (J[..., 1:, :] - J[..., :3, :])[..., None, :]
    pts = start + fr[:, None] * seg
    pts = pts.reshape(J.shape[:-2] + (3 * (samples_per_link + 1), 2))
    return np.concatenate([pts, J[..., 3:, :]], axis=-2)


def point_jacobian_bounds(arm: ArmModel, samples_per_link: int = 3) -> np.ndarray:
    """Worst-case ``||dp/dq||_2`` for every sample point (attained with the arm stretched)."""
    L = np.asarray(arm.link_lengths)
    fr = np.arange(samples_per_link + 1) / (samples_per_link + 1)
    out = []
    for link in range(3):
        for a in fr:
            along = np.concatenate([L[:link], [a * L[link]]])
            dists = [along[j:].sum() for j in range(link + 1)]
            out.append(np.sqrt(np.sum(np.square(dists))))
    out.append(np.sqrt(sum(L[j:].sum() ** 2 for j in range(3))))
    return np.array(out)


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if len(self.center) != 2:
            raise ValueError("obstacle center must be a 2-D point")
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class Scenario:
    arm: ArmModel
    obstacles: tuple
    waypoints: tuple
    q0: tuple = (0.0, 0.0, 0.0)
    reach_threshold: float = 0.035
    epsilon: float = 0.005
    samples_per_link: int = 3
    sim_horizon_steps: int = 9000
    joint_vel_limit: float = 5.0
    input_limit: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "waypoints", tuple(tuple(float(v) for v in w) for w in self.waypoints))
        object.__setattr__(self, "q0", tuple(float(v) for v in self.q0))
        if not self.waypoints:
            raise ValueError("need at least one waypoint")
        if not self.obstacles:
            raise ValueError("need at least one obstacle")

    @property
    def x0(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.q0), np.zeros(3)])

    @property
    def n_points(self) -> int:
        return 3 * (self.samples_per_link + 1) + 1

    def obstacle_distances(self, x) -> np.ndarray:
        """Clearance ``min_p ||p - O_i|| - r_i`` per obstacle, shape ``(..., n_obs)``."""
        x = np.asarray(x, dtype=float)
        P = sample_points(self.arm, x[..., :3], self.samples_per_link)
        C = np.array([o.center for o in self.obstacles])
        R = np.array([o.radius for o in self.obstacles])
        d = np.linalg.norm(P[..., :, None, :] - C, axis=-1) - R
        return d.min(axis=-2)


def barrier_values(scenario: Scenario, x) -> np.ndarray:
    """All ``||p - O_i|| - (r_i + eps)`` values, point-major, shape ``(..., n_points * n_obs)``."""
    x = np.asarray(x, dtype=float)
    P = sample_points(scenario.arm, x[..., :3], scenario.samples_per_link)
    C = np.array([o.center for o in scenario.obstacles])
    R = np.array([o.radius for o in scenario.obstacles]) + scenario.epsilon
    d = np.linalg.norm(P[..., :, None, :] - C, axis=-1) - R
    return d.reshape(d.shape[:-2] + (-1,))


def build_barriers(scenario: Scenario, gamma: float, n_samples: int = 4000, seed: int = 0,
                   check_initial: bool = True) -> BarrierSet:
    """One barrier per (sample point, obstacle) pair with sampled Lipschitz constants."""
    n_obs = len(scenario.obstacles)
    region = (np.full(3, -np.pi), np.full(3, np.pi))

    def h_q(q):
        return barrier_values(scenario, np.concatenate([q, np.zeros_like(q)], axis=-1))

    members = []
    for idx in range(scenario.n_points * n_obs):
        L = estimate_lipschitz(lambda Q, idx=idx: h_q(Q)[..., idx], region, n_samples, seed,
                               vectorized=True)
        p, o = divmod(idx, n_obs)

        def h(x, idx=idx):
            return float(barrier_values(scenario, x)[idx])

        members.append(BarrierFunction(h, max(L, 1e-9), f"p{p:02d}_o{o + 1}"))
    bset = BarrierSet(members, gamma, values_fn=lambda x: barrier_values(scenario, x))
    if check_initial:
        h0 = bset.values(scenario.x0)
        if np.any(h0 <= 0):
            raise ValueError(f"initial pose violates barrier {bset.labels[int(np.argmin(h0))]}")
    return bset


def arm_step(arm: ArmModel, x, u, w) -> np.ndarray:
    """Semi-implicit Euler step plus an additive state disturbance."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (6,) or u.shape != (3,) or w.shape != (6,):
        raise ValueError("arm_step expects x in R^6, u in R^3, w in R^6")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite arm state or input")
    return arm.f(x) + arm.g(x) @ u + w


@dataclass
class TaskStatus:
    current_waypoint_index: int
    reached_all: bool
    reach_step: int | None
    reach_steps: list = field(default_factory=list)


def task_status(scenario: Scenario, trajectory) -> TaskStatus:
    """Sequential waypoint bookkeeping over a state trajectory ``(K, 6)``."""
    X = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty trajectory")
    ee = scenario.arm.end_effector(X[:, :3])
    idx, steps = 0, []
    limit = min(X.shape[0], scenario.sim_horizon_steps + 1)
    for k in range(limit):
        while idx < len(scenario.waypoints) and \
                np.linalg.norm(ee[k] - scenario.waypoints[idx]) < scenario.reach_threshold:
            steps.append(k)
            idx += 1
        if idx == len(scenario.waypoints):
            break
    done = idx == len(scenario.waypoints)
    return TaskStatus(idx, done, steps[-1] if done else None, steps)


def stage_residual_fn(scenario: Scenario, waypoint, w_pos=100.0, w_vel=0.1, w_u=0.01):
    """Residuals ``r`` with stage cost ``||r||^2`` for reaching ``waypoint``."""
    wp = np.asarray(waypoint, dtype=float)
    arm = scenario.arm
    sp, sv, su = np.sqrt(w_pos), np.sqrt(w_vel), np.sqrt(w_u)

    def residual(x, u):
        x = np.asarray(x, dtype=float)
        ee = arm.end_effector(x[..., :3])
        return np.concatenate([sp * (ee - wp), sv * x[..., 3:], su * np.asarray(u, dtype=float)], axis=-1)

    return residual

"""Closed-form disturbance tolerances for local and remote barrier placement.

The local filter acts on the measured state, so it only has to absorb the
disturbance of a single transition. The remote MPC-CBF plans from a
predicted state and enforces the decay condition along its horizon, so the
prediction error over the delay and the horizon-accumulated disturbance
both eat into the same barrier margin.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ToleranceInputs:
    h_value: float
    gamma: float
    L_h: float
    L_f: float
    L_g: float
    u_max: float
    tau: int = 0
    horizon: int = 1

    def __post_init__(self):
        vals = (self.h_value, self.gamma, self.L_h, self.L_f, self.L_g, self.u_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("tolerance inputs must be finite")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.L_h > 0:
            raise ValueError("L_h must be positive")
        if self.L_f < 0 or self.L_g < 0 or not self.u_max > 0:
            raise ValueError("L_f, L_g must be nonnegative and u_max positive")
        if self.tau < 0 or self.horizon < 1:
            raise ValueError("tau must be >= 0 and horizon >= 1")
        if not self.L_d > 0:
            raise ValueError("L_d = L_f + L_g u_max must be positive")

    @property
    def L_d(self) -> float:
        return self.L_f + self.L_g * self.u_max


def _geom_sum(L_d, count):
    # sum_{i=1}^{count} L_d^(i-1), written out so Fractions stay exact
    total = L_d * 0
    term = L_d ** 0
    for _ in range(count):
        total += term
        term *= L_d
    return total


def local_tolerance(t: ToleranceInputs) -> float:
    """Largest per-step disturbance the plant-side filter tolerates at margin ``h_value``."""
    if t.h_value < 0:
        raise ValueError("state outside the safe set")
    return (1.0 - t.gamma) * t.h_value / t.L_h


def gain_G(tau: int, l: int, L_d):
    """Error gain from ``tau`` delay steps and ``l`` horizon steps.

    ``L_d**l * sum_{i=1..tau} L_d**(i-1) + sum_{j=1..l} L_d**(j-1)``;
    works on floats and on ``Fraction`` for exact comparisons.
    """
    if l < 1:
        raise ValueError("horizon index must be >= 1")
    if tau < 0:
        raise ValueError("delay must be nonnegative")
    return L_d ** l * _geom_sum(L_d, tau) + _geom_sum(L_d, l)


def remote_tolerance(t: ToleranceInputs, l: int, tau: int | None = None) -> float:
    tau = t.tau if tau is None else tau
    if not 1 <= l:
        raise ValueError("horizon index must be >= 1")
    return (1.0 - t.gamma) ** l * t.h_value / (t.L_h * gain_G(tau, l, t.L_d))


def remote_tolerance_horizon(t: ToleranceInputs) -> float:
    """Binding remote tolerance: the minimum over every horizon step."""
    return min(remote_tolerance(t, l) for l in range(1, t.horizon + 1))


def prediction_error_bound(t: ToleranceInputs, w_bar: float) -> float:
    """Worst-case predictor error after ``tau`` steps of disturbance ``w_bar``."""
    if w_bar < 0:
        raise ValueError("disturbance bound must be nonnegative")
    return w_bar * _geom_sum(t.L_d, t.tau)


@dataclass(frozen=True)
class PropositionReport:
    clause1: bool
    clause2: bool
    clause3: bool

    @property
    def all(self) -> bool:
        return self.clause1 and self.clause2 and self.clause3


def check_proposition(t: ToleranceInputs) -> PropositionReport:
    """Compare local and remote tolerances in exact rational arithmetic.

    1. no delay, one step: the two tolerances coincide;
    2. no delay, any step ``l <= N``: remote never exceeds local;
    3. positive delay: remote is strictly below its delay-free value and
       hence below local. With ``gamma == 1`` or a zero margin every
       tolerance is zero and the strict part degenerates to equality.
    """
    # Every input is a float, hence a dyadic rational m / 2**e. Sums and
    # products stay dyadic, so (m, e) integer pairs give exact arithmetic
    # using shifts instead of gcd reductions. Each tolerance is a ratio of two
    # such numbers; the common factor eta / L_h > 0 is divided out.
    def dy(v):
        m, d = Fraction(v).as_integer_ratio()
        return m, d.bit_length() - 1

    def add(a, b):
        e = max(a[1], b[1])
        return (a[0] << (e - a[1])) + (b[0] << (e - b[1])), e

    def mul(a, b):
        return a[0] * b[0], a[1] + b[1]

    def cmp(r, s):
        # sign of r - s for ratios r = (num, den), s = (num, den) with positive dens
        x, y = mul(r[0], s[1]), mul(s[0], r[1])
        e = max(x[1], y[1])
        xv, yv = x[0] << (e - x[1]), y[0] << (e - y[1])
        return (xv > yv) - (xv < yv)

    one, zero = (1, 0), (0, 0)
    g = dy(t.gamma)
    c = ((1 << g[1]) - g[0], g[1])
    L_d = add(dy(t.L_f), mul(dy(t.L_g), dy(t.u_max)))
    # powers P[j] = L_d^j and prefix sums S[n] = sum_{j<n} L_d^j
    P, S = [one], [zero]
    for _ in range(t.tau + t.horizon):
        S.append(add(S[-1], P[-1]))
        P.append(mul(P[-1], L_d))
    C = [one]
    for _ in range(t.horizon):
        C.append(mul(C[-1], c))

    def w_r(tau, l):
        return C[l], add(mul(P[l], S[tau]), S[l])

    w_l = (c, one)
    clause1 = cmp(w_r(0, 1), w_l) == 0
    clause2 = all(cmp(w_r(0, l), w_l) <= 0 for l in range(1, t.horizon + 1))
    if t.tau == 0:
        clause3 = True
    else:
        degenerate = c[0] == 0 or t.h_value == 0
        clause3 = True
        for l in range(1, t.horizon + 1):
            a, b = w_r(t.tau, l), w_r(0, l)
            ok = cmp(a, b) == 0 if degenerate else cmp(a, b) < 0
            clause3 = clause3 and ok and cmp(b, w_l) <= 0
    return PropositionReport(bool(clause1), bool(clause2), bool(clause3))


def tolerance_table(t: ToleranceInputs) -> dict:
    """Everything the bounds command prints, as plain numbers."""
    rep = check_proposition(t)
    per_l = [remote_tolerance(t, l) for l in range(1, t.horizon + 1)]
    return {
        "w_bar_l": local_tolerance(t),
        "w_bar_r": per_l,
        "w_bar_r_min": min(per_l),
        "L_d": t.L_d,
        "clause1": rep.clause1,
        "clause2": rep.clause2,
        "clause3": rep.clause3,
    }

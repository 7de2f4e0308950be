import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcbf import safety
from netcbf.barrier import BarrierFunction, BarrierSet
from netcbf.dynamics import InputSet, integrator_1d, linear_model
from netcbf.qp import Status


def scalar_cfg(gamma=0.5, **kw):
    bs = BarrierSet([BarrierFunction(lambda x: float(x[0]), 1.0)], gamma,
                    values_fn=lambda x: np.asarray(x, dtype=float)[..., :1])
    return safety.FilterConfig(bs, integrator_1d(), **kw)


def test_plain_filter_oracle():
    # x+ = x + u >= (1 - gamma) x  ->  u >= -gamma x = -0.5
    res = safety.filter(scalar_cfg(), [1.0], [-2.0])
    assert res.u_applied[0] == pytest.approx(-0.5, abs=1e-9)
    assert res.intervened
    assert res.status == Status.OPTIMAL
    assert res.residual_before == pytest.approx(-1.5)
    assert res.residual_after >= -1e-10


def test_filter_passes_safe_reference_unchanged():
    res = safety.filter(scalar_cfg(), [1.0], [1.0])
    assert not res.intervened
    assert res.u_applied[0] == 1.0
    assert res.iterations == 0


def test_fixed_tightening():
    res = safety.filter(scalar_cfg(tighten=0.25), [1.0], [-2.0])
    assert res.u_applied[0] == pytest.approx(-0.25, abs=1e-9)


def test_robust_filter_pointwise_margin():
    # margin (1 - gamma) h = 0.5, so u >= -gamma x + 0.5 = 0
    res = safety.robust_filter(scalar_cfg(), [1.0], [-2.0])
    assert res.u_applied[0] == pytest.approx(0.0, abs=1e-9)


def test_robust_filter_constant_margin():
    res = safety.robust_filter(scalar_cfg(w_bar_l=0.1), [1.0], [-2.0])
    assert res.u_applied[0] == pytest.approx(-0.4, abs=1e-9)


def test_infeasible_returns_best_effort():
    # gamma = 1 and margin 1 need x + u >= 1, out of reach with |u| <= 0.1 from x = 0.5
    cfg = scalar_cfg(gamma=1.0, tighten=1.0, input_set=InputSet("ball", 0.1, 1))
    res = safety.filter(cfg, [0.5], [-0.05])
    assert res.status == Status.INFEASIBLE
    assert res.u_applied[0] == pytest.approx(0.1, abs=1e-6)


def test_initial_margin_check():
    with pytest.raises(ValueError):
        scalar_cfg(tighten=1.0, x0=np.array([1.0]))


def test_box_input_two_dimensional():
    A = np.eye(2)
    model = linear_model(A, np.eye(2), u_max=1.0, kind="box")
    bs = BarrierSet([BarrierFunction(lambda x: float(x[0] + x[1]), np.sqrt(2))], 0.5,
                    values_fn=lambda x: np.sum(np.asarray(x), axis=-1, keepdims=True))
    cfg = safety.FilterConfig(bs, model)
    res = safety.filter(cfg, [1.0, 1.0], [-3.0, 0.0])
    # projection onto u1 + u2 >= -1 inside the box
    np.testing.assert_allclose(res.u_applied, [-1.0, 0.0], atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(1e-3, 5.0), u_ref=st.floats(-5.0, 5.0), gamma=st.floats(0.05, 1.0))
def test_filter_output_satisfies_condition(x, u_ref, gamma):
    cfg = scalar_cfg(gamma)
    res = safety.filter(cfg, [x], [u_ref])
    xn = x + res.u_applied[0]
    assert xn >= (1 - gamma) * x - 1e-9
    assert abs(res.u_applied[0]) <= 5.0 + 1e-12
    # minimal deviation: the output is the reference clipped at the barrier bound
    assert res.u_applied[0] == pytest.approx(max(u_ref, -gamma * x), abs=1e-8)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(1e-3, 5.0), u_ref=st.floats(-5.0, 5.0), gamma=st.floats(0.05, 0.99),
       frac=st.floats(0.0, 1.0), sign=st.sampled_from([-1.0, 1.0]))
def test_pointwise_tolerance_keeps_state_safe(x, u_ref, gamma, frac, sign):
    # any disturbance within (1 - gamma) h / L_h after the plain filter keeps h >= 0
    res = safety.filter(scalar_cfg(gamma), [x], [u_ref])
    w = sign * frac * (1 - gamma) * x
    assert x + res.u_applied[0] + w >= -1e-9

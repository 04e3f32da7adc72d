import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hamctl.errors import CompletenessError, InputError
from hamctl.flows import (Dilation, FlowMap, HarmonicRotation, NumericStage, Symmetry, VerticalShear,
                          drift, integrate, jacobian_det, symplectic_defect)
from hamctl.geometry import SpaceSpec, sup_distance
from hamctl.poisson import HamExpr
from hamctl.profiles import CutoffSpec
from hamctl.systems import (ControlSchedule, euclidean_preset, frozen_hamiltonian, torus_preset)
from oracles import quadratic_matrix_flow, rk_flow

E1, E2, T1, T2 = (SpaceSpec("euclidean", 1), SpaceSpec("euclidean", 2), SpaceSpec("torus", 1),
                  SpaceSpec("torus", 2))


def _random_control(rng, m):
    u = rng.normal(size=m)
    return u / max(1.0, np.linalg.norm(u))


@pytest.mark.parametrize("preset,d", [(euclidean_preset, 1), (euclidean_preset, 2),
                                      (torus_preset, 1), (torus_preset, 2)])
def test_integrator_matches_adaptive_rk(preset, d):
    rng = np.random.default_rng(d)
    sys = preset(d)
    segs = tuple((0.4, tuple(_random_control(rng, sys.m))) for _ in range(3))
    sched = ControlSchedule(segs)
    x0 = rng.uniform(-1, 1, 2 * d)
    got = integrate(sys, sched, x0, dt=1e-3).x
    want = x0
    for tau, u in segs:
        H = frozen_hamiltonian(sys, u)
        want = rk_flow(lambda x, H=H: tuple(a[0] for a in H.grad(x)), want, tau)
    assert sup_distance(got, sys.space.wrap(want), sys.space) < 1e-5


def test_integrator_is_second_order():
    sys = torus_preset(1)
    sched = ControlSchedule.constant(1.0, (1.0, 0.5))
    x0 = np.array([0.3, 0.8])
    H = frozen_hamiltonian(sys, (1.0, 0.5))
    ref = T1.wrap(rk_flow(lambda x: tuple(a[0] for a in H.grad(x)), x0, 1.0))
    e1 = sup_distance(integrate(sys, sched, x0, dt=2e-2).x, ref, T1)
    e2 = sup_distance(integrate(sys, sched, x0, dt=1e-2).x, ref, T1)
    assert 3.0 < e1 / e2 < 5.0


@given(st.integers(0, 10_000))
def test_integrated_jacobian_is_symplectic(seed):
    rng = np.random.default_rng(seed)
    sys = euclidean_preset(2) if seed % 2 else torus_preset(2)
    sched = ControlSchedule(tuple((0.2, tuple(_random_control(rng, sys.m))) for _ in range(2)))
    res = integrate(sys, sched, rng.uniform(-1, 1, 4), dt=1e-2, jacobian=True)
    assert np.max(np.abs(symplectic_defect(res.jacobian))) < 1e-10
    assert abs(np.linalg.det(res.jacobian) - 1) < 1e-10


def test_escape_raises_completeness_error():
    sys = euclidean_preset(1, "-q1^4")
    with pytest.raises(CompletenessError):
        integrate(sys, ControlSchedule.constant(5.0, (0.0, 0.0)), [1.0, 1.0], dt=1e-3, safety_box=10)


def test_numeric_stage_inverse_is_time_reversal():
    sys = euclidean_preset(1)
    st_ = NumericStage(sys, ControlSchedule(((0.3, (1.0, 0.0)), (0.2, (0.0, 2.0)))), dt=1e-3)
    X = np.random.default_rng(3).uniform(-1, 1, (5, 2))
    back = st_.inverse()(st_(X))
    assert np.max(np.abs(back - X)) < 1e-12


def test_closed_form_stages():
    X = np.array([[0.5, -1.0], [2.0, 3.0]])
    assert np.allclose(drift(E1, 0.5)(X), [[0.0, -1.0], [3.5, 3.0]])
    assert np.allclose(VerticalShear(E1, HamExpr.parse("q1^2/2"), 2.0)(X), [[0.5, -2.0], [2.0, -1.0]])
    assert np.allclose(Dilation(E1, 2.0)(X), [[1.0, -0.5], [4.0, 1.5]])
    assert np.allclose(Symmetry(E1)(X), [[0.5, 1.0], [2.0, -3.0]])
    # torus drift wraps
    Y = drift(T1, 1.0)([[6.0, 1.0]])
    assert Y[0, 0] == pytest.approx(7.0 - 2 * np.pi)


def test_global_rotation_matches_matrix_flow():
    w, t = 0.7, 1.3
    rot = HarmonicRotation(E2, [0.1, -0.2, 0.3, 0.0], w, t)
    # H = |p - p~|^2/2 + |q - q~|^2/(2 w^2)
    A = np.zeros((4, 4))
    A[:2, 2:] = np.eye(2)
    A[2:, :2] = -np.eye(2) / w**2
    x = np.array([0.5, 0.4, -0.3, 0.2])
    c = np.array([0.1, -0.2, 0.3, 0.0])
    assert np.allclose(rot(x), c + quadratic_matrix_flow(A, x - c, t), atol=1e-13)


def test_cutoff_rotation_closed_form_matches_integration():
    rot = HarmonicRotation(E1, [0.0, 0.0], 0.5, 0.8, CutoffSpec(0.3, 0.6), fallback="closed")
    num = HarmonicRotation(E1, [0.0, 0.0], 0.5, 0.8, CutoffSpec(0.3, 0.6), fallback="numeric")
    X = np.random.default_rng(5).uniform(-0.7, 0.7, (30, 2))
    assert np.max(np.abs(rot(X) - num(X))) < 1e-9
    far = np.array([[1.0, 2.0]])
    assert np.array_equal(rot(far), far)
    with pytest.raises(InputError):
        HarmonicRotation(T1, [0.0, 0.0], 0.5, 1.0)


@given(st.integers(0, 10_000))
def test_composite_flows_preserve_volume_and_invert(seed):
    rng = np.random.default_rng(seed)
    space = E2 if seed % 2 else T2
    stages = [drift(space, rng.uniform(-1, 1)),
              VerticalShear(space, HamExpr.parse("cos(q1) + sin(q1+q2)", 2), rng.uniform(-1, 1)),
              drift(space, rng.uniform(-1, 1))]
    if not space.is_torus:
        stages.append(Dilation(space, rng.uniform(0.5, 2)))
        stages.append(HarmonicRotation(space, rng.normal(size=4), 0.8, rng.uniform(-2, 2),
                                       CutoffSpec(0.5, 1.0)))
    flow = FlowMap(space, stages)
    X = rng.uniform(-1, 1, (8, 4))
    assert np.allclose(jacobian_det(flow, X), 1.0, atol=1e-6)
    _, J = flow.tangent(X)
    assert np.max(np.abs(symplectic_defect(J))) < 1e-6
    assert np.max(sup_distance(flow.inverse()(flow(X)), space.wrap(X), space)) < 1e-10


def test_symmetry_determinant_sign():
    for d, space in ((1, E1), (2, E2)):
        det = jacobian_det(Symmetry(space), np.zeros(2 * d))
        assert det == pytest.approx((-1) ** d)
    assert not FlowMap(E1, [Symmetry(E1)]).hamiltonian


def test_flow_json_roundtrip():
    space = E1
    sys = euclidean_preset(1)
    flow = FlowMap(space, [drift(space, 0.3), VerticalShear(space, "cos(q1)", 0.5),
                           HarmonicRotation(space, [0.1, 0.2], 0.5, 1.0, CutoffSpec(0.2, 0.4)),
                           Dilation(space, 1.5), Symmetry(space),
                           NumericStage(sys, ControlSchedule.constant(0.1, (1.0, 0.0)))])
    back = FlowMap.from_dict(json.loads(flow.to_json()))
    X = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    assert np.array_equal(back(X), flow(X))
    assert back.to_json() == flow.to_json()

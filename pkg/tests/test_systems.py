import numpy as np
import pytest
from hypothesis import given, strategies as st

from hamctl.errors import InputError
from hamctl.geometry import SpaceSpec
from hamctl.poisson import HamExpr
from hamctl.systems import (ControlSchedule, GaussianPotential, MechanicalSystem, SumPotential,
                            as_potential, euclidean_preset, frozen_hamiltonian, torus_frequencies,
                            torus_preset)
from oracles import fd_gradient


def test_presets_have_expected_sizes():
    for d in (1, 2, 3):
        assert euclidean_preset(d).m == d + 1
        assert torus_preset(d).m == 2 * d
    assert torus_frequencies(2) == [(1, 0), (1, 1)]
    assert torus_frequencies(1) == [(1,)]


def test_frozen_hamiltonian_value():
    sys = euclidean_preset(1)
    H = frozen_hamiltonian(sys, [2.0, 3.0])
    x = np.array([0.5, -1.0])
    want = 0.5 + 2 * 0.5 + 3 * np.exp(-0.125)
    assert H.value(x)[0] == pytest.approx(want, rel=1e-14)
    with pytest.raises(InputError):
        frozen_hamiltonian(sys, [1.0])


def test_frozen_expr_for_torus():
    H = frozen_hamiltonian(torus_preset(1), [1.0, 0.0])
    assert H.expr == HamExpr.parse("p1^2/2 + cos(q1)")


@given(st.integers(0, 10_000))
def test_gaussian_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    V = GaussianPotential(d, rng.normal(size=d), float(rng.uniform(0.5, 2)))
    q = rng.normal(size=d)
    assert np.allclose(V.grad(q)[0], fd_gradient(lambda y: V.value(y)[0], q), atol=1e-8)
    H_fd = np.array([fd_gradient(lambda y: V.grad(y)[0][j], q) for j in range(d)])
    assert np.allclose(V.hessian(q)[0], H_fd, atol=1e-7)


def test_sum_potential_keeps_symbolic_form():
    V = SumPotential(1, [(2.0, as_potential("cos(q1)", 1)), (1.0, as_potential("q1^2", 1))])
    assert V.expr == HamExpr.parse("2*cos(q1) + q1^2")
    assert as_potential(0, 1).expr.is_zero()
    with pytest.raises(InputError):
        as_potential("p1", 1)


def test_system_json_roundtrip():
    for sys in (euclidean_preset(2, "cos(q1)"), torus_preset(2)):
        back = MechanicalSystem.from_dict(sys.to_dict())
        assert back.space == sys.space and back.m == sys.m
        q = np.array([[0.3, -0.7]])
        for a, b in zip(sys.controls, back.controls):
            assert np.allclose(a.value(q), b.value(q))
    with pytest.raises(InputError):
        MechanicalSystem.from_dict({"space": {"kind": "euclidean", "d": 1}, "preset": "nope"})


def test_schedule_csv_roundtrip_and_validation():
    s = ControlSchedule(((0.25, (1.0, 0.0)), (0.5, (0.0, -1.0))))
    assert ControlSchedule.from_csv(s.to_csv()) == s
    assert s.total_duration == 0.75
    assert (s + s).segments == s.repeat(2).segments
    with pytest.raises(InputError):
        ControlSchedule(((0.0, (1.0,)),))
    with pytest.raises(InputError):
        ControlSchedule(((1.0, (1.0,)), (1.0, (1.0, 2.0))))
    with pytest.raises(InputError):
        ControlSchedule.from_csv("tau,u_1\n0.1,abc\n")
    with pytest.raises(InputError):
        SpaceSpec("sphere", 1)

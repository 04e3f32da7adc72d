import math

import numpy as np
import pytest

from hamctl.density import DensityField, QuadratureSpec, lr_distance, pushforward
from hamctl.errors import InputError
from hamctl.flows import (Dilation, FlowMap, HorizontalShear, VerticalShear, drift, low_discrepancy_box,
                          phase_box)
from hamctl.geometry import Mesh, SpaceSpec, sup_distance
from hamctl.poisson import HamExpr
from hamctl.synthesis import (QuadraticFlow, UnsupportedError, bracket_schedule, conjugate,
                              drift_factorization, drift_result, exact_horizontal, exact_vertical,
                              ladder, lie_product, oscillator_stage, potential_kick,
                              reverse_drift_density_torus, reverse_drift_euclidean, synthesis_error)
from hamctl.systems import euclidean_preset
from oracles import quadratic_matrix_flow, rk_flow, sym_bracket, sym_eval, sym_from_recipe

E1, E2, T1 = SpaceSpec("euclidean", 1), SpaceSpec("euclidean", 2), SpaceSpec("torus", 1)
P = HamExpr.parse
LO, HI = phase_box(E1)


def test_zero_kick_is_the_drift():
    sys = euclidean_preset(1)
    res = potential_kick(sys, 1, 0.0, 1e-2)
    assert res.predicted.is_zero()
    assert synthesis_error(res, drift(E1, 1e-2))["error"] <= 1e-14


def test_kick_against_exact_shear():
    sys = euclidean_preset(1)
    err = synthesis_error(potential_kick(sys, 1, 1.0, 1e-3), VerticalShear(E1, "q1", 1.0))["error"]
    assert err <= 5e-3
    lad = ladder(lambda sg: potential_kick(sys, 1, 1.0, sg), [1e-2, 5e-3, 2.5e-3],
                 lambda _: VerticalShear(E1, "q1", 1.0))
    assert all(r <= 0.6 for r in lad["ratios"])
    times = [row["total_time"] for row in lad["rungs"]]
    assert times == sorted(times, reverse=True)
    with pytest.raises(InputError):
        potential_kick(sys, 3, 1.0, 1e-2)


def test_conjugation_identity_and_prediction():
    sys = euclidean_preset(1)
    mid = drift_result(sys, 0.5)
    same = conjugate(exact_vertical(E1, HamExpr.zero(1)), mid)
    assert same.predicted == mid.predicted
    X = low_discrepancy_box(LO, HI, 64)
    assert np.allclose(same(X), mid(X), atol=1e-14)
    tau, v = 0.5, 1.0
    res = conjugate(exact_vertical(E1, P("q1"), -v / tau), mid)
    assert res.predicted == P("p1^2/4 + p1")


def test_momentum_generation_ladder():
    sys = euclidean_preset(1)
    v = 1.0
    target = HorizontalShear(E1, P("p1"), v)
    errs, times = [], []
    for tau in (0.1, 0.05, 0.025):
        sigma = tau * tau
        inner = potential_kick(sys, 1, -v / tau, sigma)
        res = conjugate(inner, drift_result(sys, tau, dt=1e-4))
        errs.append(synthesis_error(res, target)["error"])
        times.append(res.total_time)
    assert errs[0] > errs[1] > errs[2]
    assert times[0] > times[1] > times[2]


def test_lie_product_examples():
    f = exact_vertical(E1, P("q1^2/2"))
    zero = exact_vertical(E1, HamExpr.zero(1))
    res = lie_product(f, zero, 5)
    assert res.predicted == P("q1^2/2")
    assert synthesis_error(res, VerticalShear(E1, "q1^2/2"))["error"] <= 1e-14
    kq = exact_vertical(E1, P("q1"))
    res = lie_product(kq, kq, 7)
    assert res.predicted == P("2*q1")
    assert synthesis_error(res, VerticalShear(E1, "2*q1"))["error"] <= 1e-10


def test_lie_product_ladder():
    sys = euclidean_preset(1)
    f = exact_vertical(E1, P("q1^2/2"))
    g = drift_result(sys, 1.0)
    target = QuadraticFlow(E1, P("q1^2/2 + p1^2/2"))
    lad = ladder(lambda n: lie_product(f, g, int(n)), [4, 8, 16], lambda _: target)
    assert all(r <= 0.6 for r in lad["ratios"])


def test_bracket_examples():
    fq, gq = exact_vertical(E1, P("q1^2/2")), exact_vertical(E1, P("cos(q1)"))
    res = bracket_schedule(fq, gq, 0.1, paired=False)
    assert res.predicted == P("10*cos(q1)")
    res = bracket_schedule(exact_vertical(E1, P("q1")), exact_horizontal(E1, P("p1")), 0.1)
    assert res.predicted.is_zero()
    with pytest.raises(InputError):
        bracket_schedule(fq, gq, 0.0)


def test_bracket_prediction_matches_sympy_and_converges():
    f, g = P("q1^2/2"), P("p1^2/2")
    recipe_f, recipe_g = [(1, (2,), (0,), None)], [(1, (0,), (2,), None)]
    want = sym_bracket(sym_from_recipe(recipe_f, 1) / 2, sym_from_recipe(recipe_g, 1) / 2, 1)
    res = bracket_schedule(exact_vertical(E1, f), exact_horizontal(E1, g), 0.1)
    X = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    assert np.allclose(res.predicted.evaluate(X), sym_eval(want, 1, X))
    target = QuadraticFlow(E1, res.predicted)
    lad = ladder(lambda t: bracket_schedule(exact_vertical(E1, f), exact_horizontal(E1, g), t),
                 [0.2, 0.1, 0.05, 0.025], lambda _: target)
    assert all(r <= 0.6 for r in lad["ratios"])


def test_quadratic_flow_matches_oracles():
    H = P("q1^2/2 + 3*q1*p2 - p1^2 + p1*p2/2", 2)
    x = np.array([0.3, -0.2, 0.5, 0.1])
    # grad_H returns (dH/dq, dH/dp)
    want = rk_flow(lambda y: (np.array([y[0] + 3 * y[3], 0.0]), np.array([-2 * y[2] + y[3] / 2, 3 * y[0] + y[2] / 2])),
                   x, 0.7)
    assert np.allclose(QuadraticFlow(E2, H, 0.7)(x)[0], want, atol=1e-9)
    H1 = P("q1^2/2 + 2*p1^2 + q1*p1/3")
    A1 = np.array([[1 / 3, 4], [-1, -1 / 3]])
    x1 = np.array([0.4, -0.9])
    assert np.allclose(QuadraticFlow(E1, H1, 1.3)(x1)[0], quadratic_matrix_flow(A1, x1, 1.3), atol=1e-12)
    with pytest.raises(InputError):
        QuadraticFlow(E1, P("q1^3"))
    with pytest.raises(InputError):
        QuadraticFlow(T1, P("p1^2"))


def test_dilation_identity():
    X = low_discrepancy_box(LO, HI, 100)
    for tau in (1.0, 0.25, 0.01):
        for v in (0.5, 1.0):
            res = reverse_drift_euclidean(E1, v, tau)
            assert np.max(np.abs(res(X) - drift(E1, v)(X))) <= 1e-12


def test_backward_drift_and_oscillator_period():
    X = low_discrepancy_box(LO, HI, 100)
    res = reverse_drift_euclidean(E1, -0.5)
    assert np.max(np.abs(res(X) - drift(E1, -0.5)(X))) <= 1e-8
    assert all(0 <= t < 2 * math.pi for t in res.params["oscillator_times"])
    full = oscillator_stage(E1, 2 * math.pi, realize="schedule", dt=1e-4)
    assert np.max(np.abs(full(X) - X)) <= 1e-8
    t1, s, t2 = drift_factorization(-0.5)
    assert s > 0
    with pytest.raises(UnsupportedError):
        reverse_drift_euclidean(T1, -0.5)


def test_limit_reversal_converges():
    X = low_discrepancy_box(LO, HI, 100)
    errs = [np.max(np.abs(reverse_drift_euclidean(E1, -0.5, tau, method="limit")(X) - drift(E1, -0.5)(X)))
            for tau in (0.4, 0.2, 0.1)]
    assert errs[0] > errs[1] > errs[2]


def test_inverse_of_drift_is_refused():
    sys = euclidean_preset(1)
    with pytest.raises(InputError):
        drift_result(sys, 0.1).inverse()


def _torus_case(h):
    mesh = Mesh(T1, h, (0.37 * h, 0.0), p_box=1.5)
    k = round(np.pi / h)

    def snap_q(x):
        return 0.37 * h + (2 * np.round((x / h - 0.37 - 1) / 2) + 1) * h

    def snap_p(x):
        return (2 * np.round((x / h - 1) / 2) + 1) * h

    rho = DensityField.from_boxes(T1, [([snap_q(1.0), snap_p(0.2)], [snap_q(2.0), snap_p(0.8)], 1.0),
                                       ([snap_q(3.0), snap_p(-0.7)], [snap_q(3.6), snap_p(0.0)], 1.0)])
    return mesh, rho.with_box([0, -1.5], [2 * np.pi, 1.5]), k


def test_torus_density_reversal_examples():
    quad = QuadratureSpec(256, 3)
    mesh, rho, _ = _torus_case(np.pi / 32)
    lo, hi = rho.lo, rho.hi
    zero = reverse_drift_density_torus(0.0, mesh)
    assert lr_distance(pushforward(rho, zero, lo, hi), rho, 1.0, quad) <= 1e-3
    # the symmetry is emulated up to collar cubes, so the mismatch shrinks with h
    errs = []
    for k in (16, 32, 64):
        mesh, rho, _ = _torus_case(np.pi / k)
        plan = reverse_drift_density_torus(0.1, mesh)
        errs.append(lr_distance(pushforward(rho, plan, lo, hi), pushforward(rho, drift(T1, -0.1), lo, hi),
                                1.0, quad))
    assert errs[0] > errs[1] > errs[2]
    with pytest.raises(InputError):
        reverse_drift_density_torus(0.1, Mesh(E1, 0.25))


def _sup_lipschitz(flow, X, eps=1e-6):
    worst = 0.0
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = eps
        col = (flow(X + e) - flow(X - e)) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(col))))
    return worst * X.shape[1]


def test_concatenation_error_bound():
    sys = euclidean_preset(1)
    rng = np.random.default_rng(5)
    X = low_discrepancy_box(LO, HI, 64)
    for _ in range(10):
        j1, j2 = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        s1, s2 = rng.uniform(-1, 1, 2)
        sg1, sg2 = rng.uniform(1e-3, 1e-2, 2)
        r1, r2 = potential_kick(sys, j1, s1, sg1), potential_kick(sys, j2, s2, sg2)
        t1 = VerticalShear(E1, sys.controls[j1 - 1], s1)
        t2 = VerticalShear(E1, sys.controls[j2 - 1], s2)
        e1 = float(np.max(sup_distance(r1(X), t1(X), E1)))
        Y = t1(X)
        e2 = float(np.max(sup_distance(r2(Y), t2(Y), E1)))
        L = max(_sup_lipschitz(r2.flow, r1(X)), _sup_lipschitz(r2.flow, Y))
        both = r1.then(r2)
        total = float(np.max(sup_distance(both(X), t2(t1(X)), E1)))
        assert total <= 1.05 * L * e1 + e2 + 1e-12

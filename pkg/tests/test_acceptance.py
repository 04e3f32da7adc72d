"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible with ``-s``); the
same lines are repeated in the terminal summary by conftest.py.
"""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from hamctl.cli import run
from hamctl.compiler import compile_permutation, verify_compiled
from hamctl.density import (DensityField, QuadratureSpec, lr_distance_report, pushforward, signature,
                            signature_gap)
from hamctl.ensemble import EnsembleState, lie_rank_check, steer
from hamctl.flows import (FlowMap, HarmonicRotation, VerticalShear, drift, integrate, low_discrepancy_box,
                          phase_box, symplectic_defect)
from hamctl.geometry import Mesh, MeshPermutation, SpaceSpec, sup_distance
from hamctl.poisson import HamExpr, ad_power, poisson_bracket
from hamctl.profiles import CutoffSpec
from hamctl.rearrange import DEMO_CONFIG, RearrangeConfig, _mesh_box, build_permutation, demo_pair
from hamctl.synthesis import (QuadraticFlow, bracket_schedule, drift_result, exact_horizontal,
                              exact_vertical, ladder, lie_product, oscillator_stage, potential_kick,
                              reverse_drift_density_torus, reverse_drift_euclidean)
from hamctl.systems import ControlSchedule, euclidean_preset, torus_preset
from oracles import ham_from_recipe, random_recipe

RESULTS = []
E1, T1, E2 = SpaceSpec("euclidean", 1), SpaceSpec("torus", 1), SpaceSpec("euclidean", 2)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------------


def test_01_symplecticity():
    rng = np.random.default_rng(1)
    worst_det = worst_sym = 0.0
    for system in (euclidean_preset(1), euclidean_preset(2), torus_preset(1), torus_preset(2)):
        segs = [(0.25, tuple(rng.uniform(-1, 1, system.m))) for _ in range(4)]
        lo, hi = phase_box(system.space)
        x0 = lo + (hi - lo) * rng.random((100, system.space.dim))
        res = integrate(system, ControlSchedule(tuple(segs)), x0, 1e-3, jacobian=True)
        worst_det = max(worst_det, float(np.max(np.abs(np.linalg.det(res.jacobian) - 1))))
        worst_sym = max(worst_sym, float(np.max(symplectic_defect(res.jacobian))))
    report(1, worst_det <= 1e-6 and worst_sym <= 1e-6,
           f"|det-1| = {worst_det:.2e}, |J^T W J - W| = {worst_sym:.2e} (tol 1e-6)")


# 2 -------------------------------------------------------------------------------------


def _orbit_pair(seed):
    rng = np.random.default_rng(1000 + seed)
    space = SpaceSpec("torus" if seed % 4 == 3 else "euclidean", 1)
    boxes = []
    for w in (1.0, 2.0):
        lo = rng.uniform(-0.7, 0.2, 2)
        hi = lo + rng.uniform(0.2, 0.6, 2)
        if space.is_torus:
            lo[0] = rng.uniform(0, 3)
            hi[0] = lo[0] + rng.uniform(0.5, 3)
        boxes.append((lo, hi, w))
    rho = DensityField.from_boxes(space, boxes)
    stages = [drift(space, rng.uniform(-1, 1)),
              VerticalShear(space, HamExpr.parse("cos(q1) + sin(2*q1)/2"), rng.uniform(-0.5, 0.5)),
              drift(space, rng.uniform(-1, 1))]
    if not space.is_torus:
        stages.append(HarmonicRotation(space, rng.uniform(-0.5, 0.5, 2), 0.8, rng.uniform(-3, 3),
                                       CutoffSpec(0.6, 1.2)))
    return rho, FlowMap(space, stages)


def test_02_orbit_invariance():
    quad = QuadratureSpec(256, 4)
    levels = [0.5, 1.5, 2.5, 3.5]
    gaps = []
    for seed in range(20):
        rho, flow = _orbit_pair(seed)
        moved = pushforward(rho, flow)
        lo, hi = np.minimum(rho.lo, moved.lo), np.maximum(rho.hi, moved.hi)
        a = signature(rho, levels, quad, lo, hi)
        b = signature(moved, levels, quad, lo, hi)
        gaps.append(signature_gap(a, b) / a.cell_volume)
    report(2, max(gaps) <= 2.0, f"worst signature gap {max(gaps):.2f} cells over 20 pairs (tol 2)")


# 3 -------------------------------------------------------------------------------------


def test_03_demo_rearrangement():
    errs = []
    for h in (0.5, 0.25, 0.125):
        rho0, rho1 = demo_pair()
        res = build_permutation(rho0, rho1, RearrangeConfig(h=h, **DEMO_CONFIG))
        seq = compile_permutation(res.permutation, res.mesh, None, res.keep)
        moved = pushforward(rho0, seq, *_mesh_box(res.mesh, rho0, rho1))
        quad = QuadratureSpec(mode="monte_carlo", samples=1_000_000, seed=0)
        errs.append(lr_distance_report(moved, rho1, 1.0, quad).value)
    monotone = all(b <= 1.1 * a for a, b in zip(errs, errs[1:]))
    report(3, errs[1] <= 0.15 and monotone,
           "L1 error along h = 0.5, 0.25, 0.125: " + ", ".join(f"{e:.4f}" for e in errs)
           + " (<= 0.15 at h = 0.25, non-increasing with 10% slack)")


# 4 -------------------------------------------------------------------------------------


def _reintegrate(stage, X):
    """Flow of the cutoff Hamiltonian by DOP853 on a central-difference gradient of H."""
    n, D = X.shape
    d = D // 2
    eps = 1e-7

    def rhs(_, y):
        Y = y.reshape(n, D)
        grad = np.empty_like(Y)
        for j in range(D):
            e = np.zeros(D)
            e[j] = eps
            grad[:, j] = (stage.hamiltonian_value(Y + e) - stage.hamiltonian_value(Y - e)) / (2 * eps)
        return np.concatenate([grad[:, d:], -grad[:, :d]], axis=1).ravel()

    sol = solve_ivp(rhs, (0.0, stage.t), X.ravel(), method="DOP853", rtol=1e-11, atol=1e-11)
    return sol.y[:, -1].reshape(n, D)


def test_04_swap_fidelity():
    mesh = Mesh(E1, 0.25, (0.0, 0.0), p_box=2.0, q_box=2.0)
    a, b, c = (mesh.index_of_lattice(k) for k in [(0, 0), (0, 1), (1, 0)])
    closed = numeric = 0.0
    for perm in (MeshPermutation({a: b, b: a}), MeshPermutation({a: b, b: c, c: a})):
        seq = compile_permutation(perm, mesh)
        closed = max(closed, verify_compiled(seq, perm, mesh)["center_error"])
        cubes = sorted(perm.support)
        X = np.array([mesh.center(n) for n in cubes])
        want = np.array([mesh.center(perm(n)) for n in cubes])
        for st in seq.stages:
            X = _reintegrate(st, X) if isinstance(st, HarmonicRotation) else st(X)
        numeric = max(numeric, float(np.max(sup_distance(X, want, E1))))
    report(4, closed <= 1e-9 and numeric <= 1e-4,
           f"closed-form centre error {closed:.2e} (tol 1e-9), re-integrated {numeric:.2e} (tol 1e-4)")


# 5 -------------------------------------------------------------------------------------


def test_05_dilation_identity():
    X = np.random.default_rng(5).uniform(-1, 1, (100, 2))
    worst = 0.0
    for tau in (1.0, 0.25, 0.01):
        for v in (0.5, 1.0):
            worst = max(worst, float(np.max(np.abs(reverse_drift_euclidean(E1, v, tau)(X) - drift(E1, v)(X)))))
    report(5, worst <= 1e-12, f"max deviation {worst:.2e} (tol 1e-12)")


# 6 -------------------------------------------------------------------------------------


def test_06_oscillator_period():
    X = low_discrepancy_box([-1, -1], [1, 1], 100)
    period = float(np.max(np.abs(oscillator_stage(E1, 2 * math.pi, realize="schedule", dt=1e-4)(X) - X)))
    back = float(np.max(np.abs(reverse_drift_euclidean(E1, -0.5)(X) - drift(E1, -0.5)(X))))
    report(6, period <= 1e-8 and back <= 1e-8,
           f"period error {period:.2e}, backward drift error {back:.2e} (tol 1e-8)")


# 7 -------------------------------------------------------------------------------------


def test_07_ladders():
    sys1 = euclidean_preset(1)
    f, g = HamExpr.parse("q1^2/2"), HamExpr.parse("p1^2/2")
    target = QuadraticFlow(E1, poisson_bracket(f, g))
    br = ladder(lambda t: bracket_schedule(exact_vertical(E1, f), exact_horizontal(E1, g), t),
                [0.2, 0.1, 0.05, 0.025], lambda _: target)["ratios"]
    lie_target = QuadraticFlow(E1, f + HamExpr.kinetic(1))
    lie = ladder(lambda n: lie_product(exact_vertical(E1, f), drift_result(sys1, 1.0), int(n)),
                 [4, 8, 16, 32], lambda _: lie_target)["ratios"]
    kick = ladder(lambda s: potential_kick(sys1, 1, 1.0, s), [1e-2, 5e-3, 2.5e-3],
                  lambda _: VerticalShear(E1, "q1", 1.0))["ratios"]
    worst = max(br + lie + kick)
    fmt = lambda r: "/".join(f"{x:.3f}" for x in r)
    report(7, worst <= 0.6, f"ratios bracket {fmt(br)}, lie {fmt(lie)}, kick {fmt(kick)} (tol 0.6)")


# 8 -------------------------------------------------------------------------------------


def test_08_symbolic_identities():
    ok = True
    for d in (1, 2):
        K = HamExpr.kinetic(d)
        for m in range(1, 7):
            for alpha in itertools.product(range(m + 1), repeat=d):
                if sum(alpha) == m:
                    f = HamExpr.monomial(d, alpha, None, Fraction(1, math.factorial(m)))
                    ok &= ad_power(K, f, m) == HamExpr.monomial(d, None, alpha)
        for j in range(d):
            k = tuple(int(i == j) for i in range(d))
            cos, sin, pj = HamExpr.cos(k), HamExpr.sin(k), HamExpr.p(d, j)
            for ell in range(1, 4):
                ok &= ad_power(K, cos, 2 * ell) == pj ** (2 * ell) * cos * (-1) ** ell
                ok &= ad_power(K, sin, 2 * ell) == pj ** (2 * ell) * sin * (-1) ** ell
                odd = ad_power(K, cos, 2 * ell + 1)
                ref = pj ** (2 * ell + 1) * sin * (-1) ** ell
                ok &= odd == ref or odd == -ref
    identities = ok
    rng = np.random.default_rng(8)
    for i in range(50):
        d = 1 + i % 2
        f, g, h = (ham_from_recipe(random_recipe(rng, d, 2, 1), d) for _ in range(3))
        ok &= (poisson_bracket(f, g) + poisson_bracket(g, f)).is_zero()
        ok &= (poisson_bracket(f, poisson_bracket(g, h)) + poisson_bracket(g, poisson_bracket(h, f))
               + poisson_bracket(h, poisson_bracket(f, g))).is_zero()
        ok &= poisson_bracket(f, g * h) == poisson_bracket(f, g) * h + g * poisson_bracket(f, h)
    report(8, bool(ok), f"monomial and torus identities {'exact' if identities else 'violated'}, "
                        f"50 random triples {'pass' if ok else 'fail'}")


# 9 -------------------------------------------------------------------------------------


def test_09_torus_time_reversal():
    h = math.pi / 256
    mesh = Mesh(T1, h, (0.37 * h, 0.0), p_box=1.5)

    def snap_q(x):
        return 0.37 * h + (2 * np.round((x / h - 0.37 - 1) / 2) + 1) * h

    def snap_p(x):
        return (2 * np.round((x / h - 1) / 2) + 1) * h

    boxes = [([snap_q(1.0), snap_p(0.2)], [snap_q(2.0), snap_p(0.8)], 1.0),
             ([snap_q(3.0), snap_p(-0.7)], [snap_q(3.6), snap_p(0.0)], 1.0)]
    rho = DensityField.from_boxes(T1, boxes).with_box([0, -1.5], [2 * math.pi, 1.5])
    plan = reverse_drift_density_torus(0.1, mesh)
    lhs = pushforward(rho, plan, rho.lo, rho.hi)
    rhs = pushforward(rho, drift(T1, -0.1), rho.lo, rho.hi)
    err = lr_distance_report(lhs, rhs, 1.0, QuadratureSpec(256)).value
    report(9, err <= 0.05, f"L1 mismatch {err:.4f} at 256^2 (tol 0.05)")


# 10 ------------------------------------------------------------------------------------


def test_10_ensembles():
    rng = np.random.default_rng(10)
    worst, longest, sig = 0.0, 0.0, np.inf
    full = True
    for space, system in ((T1, torus_preset(1)), (E2, euclidean_preset(2))):
        for _ in range(5):
            lo, hi = phase_box(space)
            start = EnsembleState(space, lo + (hi - lo) * rng.random((3, space.dim)))
            target = EnsembleState(space, lo + (hi - lo) * rng.random((3, space.dim)))
            plan = steer(start, target, 0.05)
            worst = max(worst, float(np.max(plan.errors())))
            longest = max(longest, plan.total_time)
            rank = lie_rank_check(system, start)
            full &= rank["full_rank"]
            sig = min(sig, rank["sigma_min"])
    report(10, worst <= 1e-12 and longest <= 0.1 and full and sig > 1e-3,
           f"endpoint error {worst:.1e}, plan time {longest:.3f}, full rank {full}, sigma_min {sig:.3f}")


# 11 ------------------------------------------------------------------------------------


def test_11_cli_determinism(tmp_path):
    from pathlib import Path
    configs = Path(__file__).resolve().parent.parent / "configs"
    same = True
    for cmd, cfg in [("simulate", "simulate_pendulum.json"), ("rearrange", None), ("compile-perm", None),
                     ("synth", "synth_kick.json"), ("steer", "steer_plane.json"),
                     ("verify-orbit", "verify_orbit.json")]:
        outs = []
        for k in range(2):
            out = tmp_path / f"{cmd}_{k}"
            argv = [cmd, "--out", str(out), "--seed", "11"]
            if cfg:
                argv += ["--config", str(configs / cfg)]
            run(argv)
            outs.append((out / "report.json").read_bytes())
        same &= outs[0] == outs[1]
    report(11, bool(same), "repeated CLI runs give byte-identical reports" if same else "reports differ")

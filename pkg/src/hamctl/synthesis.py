"""Small-time synthesis: schedules whose flows approach prescribed generators.

A SynthesisResult is an ordered list of blocks, each either a numeric stage
(a control schedule integrated on a mechanical system) or an admitted exact
stage (a shear, dilation or oscillator rotation taken as a realized limit).
Every result knows the generator G it approximates, in the sense that its
flow tends to the time-one flow of G, and how to rebuild itself for c*G.

Conventions: {f, g} = sum_i df/dp_i dg/dq_i - df/dq_i dg/dp_i, flows obey
d/dt g(x(t)) = {H, g}(x(t)), and blocks run in list order. With these,
running phi, then psi = e^{h}, then phi^{-1} is the flow of h o phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .compiler import PrimitiveSeq, emulate_symmetry
from .errors import InputError
from .flows import (Dilation, FlowMap, HarmonicRotation, HorizontalShear, NumericStage, Stage,
                    VerticalShear, c0_distance, drift, phase_box)
from .geometry import EUCLIDEAN, Mesh, SpaceSpec
from .poisson import HamExpr, poisson_bracket
from .systems import ControlSchedule, MechanicalSystem, SymbolicPotential

MAX_SERIES_ORDER = 16


class UnsupportedError(InputError):
    """A construction the calculus does not provide (for example reversing the bare drift)."""


def drop_constant(expr: Optional[HamExpr]) -> Optional[HamExpr]:
    """Remove the constant term; constants generate the identity flow."""
    if expr is None:
        return None
    z = (0,) * expr.d
    return HamExpr(expr.d, {k: c for k, c in expr.terms.items() if k != (z, z, None)})


def pullback(h: Optional[HamExpr], f: Optional[HamExpr]) -> Optional[HamExpr]:
    """h o e^{f}, as the series sum_k ad_f^k h / k!, or None if it does not terminate."""
    if h is None or f is None:
        return None
    total = h
    term = h
    for k in range(1, MAX_SERIES_ORDER + 1):
        term = poisson_bracket(f, term) * Fraction(1, k)
        if term.is_zero():
            return total
        total = total + term
    return None


def _scale(expr: Optional[HamExpr], c) -> Optional[HamExpr]:
    return None if expr is None else expr * c


@dataclass
class SynthesisResult:
    """Blocks realizing (approximately) the time-one flow of ``predicted``."""

    space: SpaceSpec
    stages: List[Stage]
    predicted: Optional[HamExpr]
    params: dict = field(default_factory=dict)
    rebuild: Optional[Callable[[float], "SynthesisResult"]] = None

    @property
    def flow(self) -> FlowMap:
        return FlowMap(self.space, self.stages)

    def __call__(self, X):
        return self.flow(X)

    @property
    def total_time(self) -> float:
        """Physical time of the numeric blocks and oscillator rotations."""
        return float(sum(st.duration for st in self.stages))

    @property
    def schedule(self) -> ControlSchedule:
        """Concatenated control schedule of the numeric blocks."""
        out = ControlSchedule()
        for st in self.stages:
            if isinstance(st, NumericStage):
                sched = st._schedule()
                out = out.then(sched)
        return out

    def scaled(self, c: float) -> "SynthesisResult":
        """The same construction for the generator c * predicted."""
        if c == 1:
            return self
        if self.rebuild is None:
            raise InputError("this result cannot be rescaled within the calculus")
        return self.rebuild(c)

    def inverse(self) -> "SynthesisResult":
        return self.scaled(-1.0)

    def then(self, other: "SynthesisResult") -> "SynthesisResult":
        """Run self, then other; the generator is only predicted when they commute."""
        pred = None
        if self.predicted is not None and other.predicted is not None and \
                poisson_bracket(self.predicted, other.predicted).is_zero():
            pred = self.predicted + other.predicted
        return SynthesisResult(self.space, self.stages + other.stages, pred,
                               {"concat": [self.params, other.params]})

    def report(self) -> dict:
        return {"predicted": None if self.predicted is None else str(self.predicted),
                "params": self.params, "total_time": self.total_time, "stages": len(self.stages),
                "numeric_stages": sum(isinstance(s, NumericStage) for s in self.stages)}


# -- elementary results ------------------------------------------------------------------


def _zero_u(system: MechanicalSystem):
    return tuple(0.0 for _ in range(system.m))


def kinetic_generator(system: MechanicalSystem) -> Optional[HamExpr]:
    v0 = system.V0.expr
    return None if v0 is None else HamExpr.kinetic(system.d) + v0


def drift_result(system: MechanicalSystem, tau: float, dt: float = 1e-3) -> SynthesisResult:
    """Zero control for time tau: the flow of tau * H_0."""
    if not tau > 0:
        raise InputError("the drift only runs forward: tau must be positive")
    stage = NumericStage(system, ControlSchedule.constant(tau, _zero_u(system)), dt)

    def rebuild(c):
        if c <= 0:
            raise InputError("the drift cannot be reversed by a schedule; use the reverse-drift constructions")
        return drift_result(system, c * tau, dt)

    return SynthesisResult(system.space, [stage], _scale(kinetic_generator(system), tau),
                           {"kind": "drift", "tau": tau}, rebuild)


def potential_kick(system: MechanicalSystem, j: int, s: float, sigma: float,
                   dt: Optional[float] = None) -> SynthesisResult:
    """Constant control u_j = s/sigma for time sigma; tends to e^{s V_j} as sigma -> 0.

    ``j`` counts controls from 1.
    """
    if not 1 <= j <= system.m:
        raise InputError(f"control index j={j} outside 1..{system.m}")
    if not sigma > 0:
        raise InputError("sigma must be positive")
    dt = min(1e-3, sigma / 16) if dt is None else dt
    u = [0.0] * system.m
    u[j - 1] = s / sigma
    stage = NumericStage(system, ControlSchedule.constant(sigma, u), dt)
    vj = system.controls[j - 1].expr
    pred = None if vj is None else drop_constant(_scale(vj, s))

    def rebuild(c):
        return potential_kick(system, j, c * s, abs(c) * sigma if c != 0 else sigma, dt)

    return SynthesisResult(system.space, [stage], pred,
                           {"kind": "kick", "j": j, "s": s, "sigma": sigma}, rebuild)


def exact_vertical(space: SpaceSpec, f: HamExpr, s: float = 1.0) -> SynthesisResult:
    """Admitted exact vertical shear e^{s f}, f a function of q."""
    stage = VerticalShear(space, SymbolicPotential(f), s, label="admitted")
    return SynthesisResult(space, [stage], drop_constant(_scale(f, s)),
                           {"kind": "exact_vertical", "f": str(f), "s": s},
                           lambda c: exact_vertical(space, f, c * s))


def exact_horizontal(space: SpaceSpec, g: HamExpr, s: float = 1.0) -> SynthesisResult:
    """Admitted exact horizontal shear e^{s g}, g a function of p."""
    stage = HorizontalShear(space, g, s, label="admitted")
    return SynthesisResult(space, [stage], drop_constant(_scale(g, s)),
                           {"kind": "exact_horizontal", "g": str(g), "s": s},
                           lambda c: exact_horizontal(space, g, c * s))


def exact_stage(stage: Stage, predicted: Optional[HamExpr] = None) -> SynthesisResult:
    """Wrap an exact stage; only its inverse is available for rescaling."""

    def rebuild(c):
        if c == -1:
            return SynthesisResult(stage.space, [stage.inverse()], _scale(predicted, -1), {"kind": "exact"})
        raise InputError("a bare exact stage can only be inverted, not rescaled")

    return SynthesisResult(stage.space, [stage], predicted, {"kind": "exact", "stage": stage.kind}, rebuild)


def _as_result(obj, space=None) -> SynthesisResult:
    if isinstance(obj, SynthesisResult):
        return obj
    if isinstance(obj, Stage):
        return exact_stage(obj)
    raise InputError("expected a SynthesisResult or an exact stage")


# -- combinators ---------------------------------------------------------------------------


def conjugate(inner, mid) -> SynthesisResult:
    """Run inner, then mid, then inner^{-1}: the flow of (mid generator) o (inner flow)."""
    inner, mid = _as_result(inner), _as_result(mid)
    try:
        inv = inner.inverse()
    except InputError as exc:
        raise InputError(f"conjugation needs an invertible inner block: {exc}") from None
    pred = drop_constant(pullback(mid.predicted, inner.predicted))

    def rebuild(c):
        return conjugate(inner, mid.scaled(c))

    return SynthesisResult(inner.space, inner.stages + mid.stages + inv.stages, pred,
                           {"kind": "conjugate", "inner": inner.params, "mid": mid.params}, rebuild)


def lie_product(f, g, n: int) -> SynthesisResult:
    """(e^{f/n} e^{g/n})^n, tending to e^{f+g} as n grows."""
    f, g = _as_result(f), _as_result(g)
    if int(n) < 1:
        raise InputError("n must be at least 1")
    n = int(n)
    fb, gb = f.scaled(1.0 / n), g.scaled(1.0 / n)
    stages = (fb.stages + gb.stages) * n
    pred = None
    if f.predicted is not None and g.predicted is not None:
        pred = f.predicted + g.predicted

    def rebuild(c):
        return lie_product(f.scaled(c), g.scaled(c), n)

    return SynthesisResult(f.space, stages, pred, {"kind": "lie_product", "n": n}, rebuild)


def bracket_schedule(f, g, tau: float, paired: bool = True, n: Optional[int] = None) -> SynthesisResult:
    """Schedules built on e^{tau f} e^{g/tau} e^{-tau f} = exp(g/tau + {f, g} + O(tau)).

    Unpaired, the three blocks are returned and the prediction is
    g/tau + {f, g}. Paired, the large g/tau flow is cancelled inside n
    group commutators e^{tau f} e^{beta g} e^{-tau f} e^{-beta g} with
    beta = 1/(n tau), whose product tends to e^{{f, g}}; the default
    n = ceil(1/tau^2) keeps the error O(tau).
    """
    f, g = _as_result(f), _as_result(g)
    if not tau > 0:
        raise InputError("tau must be positive")
    br = None
    if f.predicted is not None and g.predicted is not None:
        br = poisson_bracket(f.predicted, g.predicted)
    try:
        fp, fm = f.scaled(tau), f.scaled(-tau)
    except InputError as exc:
        raise InputError(f"bracket_schedule needs f with both signs: {exc}") from None
    if not paired:
        gb = g.scaled(1.0 / tau)
        pred = None if br is None else drop_constant(_scale(g.predicted, 1.0 / tau) + br)
        return SynthesisResult(f.space, fp.stages + gb.stages + fm.stages, pred,
                               {"kind": "bracket", "tau": tau, "paired": False})
    n = int(math.ceil(1.0 / tau**2)) if n is None else int(n)
    beta = 1.0 / (n * tau)
    try:
        gp, gm = g.scaled(beta), g.scaled(-beta)
    except InputError as exc:
        raise UnsupportedError(f"g must be realizable with both signs: {exc}") from None
    stages = (fp.stages + gp.stages + fm.stages + gm.stages) * n

    def rebuild(c):
        return bracket_schedule(f, g.scaled(c), tau, True, n)

    return SynthesisResult(f.space, stages, drop_constant(br),
                           {"kind": "bracket", "tau": tau, "paired": True, "n": n}, rebuild)


# -- time reversal of the drift ---------------------------------------------------------


def oscillator_system(d: int) -> MechanicalSystem:
    """Auxiliary system H_u = |p|^2/2 + u |q|^2/2 on R^d."""
    quad = SymbolicPotential(HamExpr.parse(" + ".join(f"q{i + 1}^2" for i in range(d)), d) * Fraction(1, 2))
    return MechanicalSystem(SpaceSpec(EUCLIDEAN, d), SymbolicPotential(HamExpr.zero(d)), (quad,))


def oscillator_stage(space: SpaceSpec, t: float, realize: str = "exact", dt: float = 1e-4) -> Stage:
    """Flow of (|p|^2 + |q|^2)/2 for time t >= 0 (period 2 pi)."""
    if t < 0:
        raise InputError("oscillator time must be nonnegative; add multiples of 2 pi")
    if realize == "exact":
        return HarmonicRotation(space, np.zeros(space.dim), 1.0, t, None, label="oscillator")
    return NumericStage(oscillator_system(space.d), ControlSchedule.constant(t, (1.0,)), dt)


def drift_factorization(w: float):
    """(t_first, s, t_last) with drift_w = R(t_last) o D_s o R(t_first).

    R(t) is the oscillator flow (|p|^2 + |q|^2)/2 for time t in [0, 2 pi) and
    D_s the dilation (q, p) -> (s q, p / s). Built from the SVD of the 2x2
    symplectic matrix [[1, w], [0, 1]] acting on each (q_i, p_i) plane.
    """
    M = np.array([[1.0, w], [0.0, 1.0]])
    U, S, Vt = np.linalg.svd(M)
    if np.linalg.det(U) < 0:
        U[:, 1] *= -1
        Vt[1, :] *= -1
    # R(t) = [[cos t, sin t], [-sin t, cos t]]
    t_last = math.atan2(U[0, 1], U[0, 0]) % (2 * math.pi)
    t_first = math.atan2(Vt[0, 1], Vt[0, 0]) % (2 * math.pi)
    return t_first, float(S[0]), t_last


def reverse_drift_euclidean(space: SpaceSpec, w: float, tau: Optional[float] = None,
                            method: str = "exact", realize: str = "exact", dt: float = 1e-4) -> SynthesisResult:
    """Realize e^{w |p|^2/2} for either sign of w on T*R^d.

    ``method="exact"``: w >= 0 uses D_{1/sqrt(tau)} e^{tau w drift} D_{sqrt(tau)}
    (tau defaults to 1); w < 0 factors the shear as oscillator rotation,
    dilation, oscillator rotation, all rotation times taken in [0, 2 pi).
    ``method="limit"``: D_{1/sqrt(tau)} e^{t O} D_{sqrt(tau)} with t = tau*w mod
    2 pi, whose generator w(|p|^2 + tau^2 |q|^2)/2 tends to the target as tau -> 0.
    ``realize="schedule"`` integrates drift and oscillator on the auxiliary
    system with step dt instead of using closed forms; dilations stay admitted.
    """
    if space.is_torus:
        raise UnsupportedError("time reversal of the drift by dilations needs T*R^d; on the torus use "
                               "reverse_drift_density_torus")
    d = space.d
    target = HamExpr.kinetic(d)
    two_pi = 2 * math.pi

    def drift_block(t):
        if realize == "exact":
            return drift(space, t)
        return NumericStage(oscillator_system(d), ControlSchedule.constant(t, (0.0,)), dt)

    if method == "limit":
        if tau is None or not tau > 0:
            raise InputError("the limit construction needs tau > 0")
        t = (tau * w) % two_pi
        stages = [Dilation(space, math.sqrt(tau)), oscillator_stage(space, t, realize, dt),
                  Dilation(space, 1 / math.sqrt(tau))]
        params = {"kind": "reverse_drift", "method": "limit", "w": w, "tau": tau, "oscillator_time": t}
    elif method == "exact":
        if w >= 0:
            tau = 1.0 if tau is None else float(tau)
            if not tau > 0:
                raise InputError("tau must be positive")
            stages = [Dilation(space, math.sqrt(tau))]
            if w > 0:
                stages.append(drift_block(tau * w))
            stages.append(Dilation(space, 1 / math.sqrt(tau)))
            params = {"kind": "reverse_drift", "method": "exact", "w": w, "tau": tau}
        else:
            t1, s, t2 = drift_factorization(w)
            stages = [oscillator_stage(space, t1, realize, dt), Dilation(space, s),
                      oscillator_stage(space, t2, realize, dt)]
            params = {"kind": "reverse_drift", "method": "exact", "w": w,
                      "oscillator_times": [t1, t2], "dilation": s}
    else:
        raise InputError("method must be 'exact' or 'limit'")
    params["realize"] = realize

    def rebuild(c):
        return reverse_drift_euclidean(space, c * w, tau, method, realize, dt)

    return SynthesisResult(space, stages, drop_constant(_scale(target, w)) if w else None, params, rebuild)


def reverse_drift_density_torus(tau: float, mesh: Mesh, eta: Optional[float] = None,
                                cubes: Optional[Sequence[int]] = None, w_scale: float = 0.5) -> PrimitiveSeq:
    """Plan [symmetry; drift tau; symmetry] acting on densities of T*T^d.

    Each symmetry is emulated by per-column half-turns on ``mesh`` (all of
    its cubes unless ``cubes`` is given), so rho o plan approximates
    rho o e^{-tau drift} for densities supported in the covered band: exactly
    for unions of mesh cubes in the first step, up to O(h) boundary terms in
    the second. The plan is not the backward drift as a map.
    """
    if not mesh.space.is_torus:
        raise InputError("the density-level reversal is meant for T*T^d; on T*R^d use reverse_drift_euclidean")
    if tau < 0:
        raise InputError("tau must be nonnegative")
    space, h = mesh.space, mesh.h
    eta = h / 1024 if eta is None else eta
    cubes = list(range(mesh.size)) if cubes is None else list(cubes)
    sym = emulate_symmetry(mesh, cubes, eta, w_scale=w_scale)
    plan = PrimitiveSeq(space, flags={"density_level_only": True, "tau": tau, "h": h, "eta": eta})
    plan.extend(sym)
    if tau > 0:
        plan.append(drift(space, tau), role="drift", tau=tau)
    plan.extend(sym)
    return plan


# -- errors and ladders -----------------------------------------------------------------


class QuadraticFlow:
    """Exact time-t flow of a polynomial Hamiltonian of degree <= 2 on T*R^d.

    Hamilton's equations are affine, x' = A x + b, so the flow is the
    exponential of the augmented (2d+1) x (2d+1) matrix.
    """

    def __init__(self, space: SpaceSpec, H: HamExpr, t: float = 1.0):
        if space.is_torus:
            raise InputError("quadratic flows are only exact on T*R^d")
        for (qe, pe, trig) in H.terms:
            if trig is not None or sum(qe) + sum(pe) > 2:
                raise InputError(f"{H} is not a polynomial of degree <= 2")
        d = space.d
        zero = np.zeros(2 * d)
        gq, gp = H.grad(zero)
        hess = H.hessian(zero)
        omega = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
        aug = np.zeros((2 * d + 1, 2 * d + 1))
        # q' = dH/dp, p' = -dH/dq
        aug[: 2 * d, : 2 * d] = omega @ hess
        aug[: 2 * d, 2 * d] = omega @ np.concatenate([gq, gp])
        self.space, self.H, self.t = space, H, float(t)
        self.matrix = expm(self.t * aug)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.matrix[:-1, :-1].T + self.matrix[:-1, -1]



def synthesis_error(result, target, space: Optional[SpaceSpec] = None, lo=None, hi=None,
                    n: int = 256) -> dict:
    """C^0 distance between the realized flow and a target map on the box K = [lo, hi]."""
    res = _as_result(result)
    space = space or res.space
    if lo is None or hi is None:
        lo, hi = phase_box(space)
    err = c0_distance(res.flow, target, space, lo, hi, n)
    return {"error": err, "total_time": res.total_time}


def ladder(build: Callable[[float], SynthesisResult], params: Sequence[float],
           target_for: Callable[[float], object], lo=None, hi=None, n: int = 128) -> dict:
    """Errors along a parameter ladder and the ratios of consecutive errors."""
    rows = []
    for prm in params:
        res = build(prm)
        rep = synthesis_error(res, target_for(prm), res.space, lo, hi, n)
        rows.append({"param": prm, "error": rep["error"], "total_time": rep["total_time"]})
    ratios = [rows[i + 1]["error"] / rows[i]["error"] if rows[i]["error"] > 0 else 0.0
              for i in range(len(rows) - 1)]
    return {"rungs": rows, "ratios": ratios}

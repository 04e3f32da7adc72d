"""Flow maps: Strang-split integration of mechanical Hamiltonians and exact primitive stages.

Every stage maps an (n, 2d) stack of phase points and can report its tangent
map. Exact stages (shears, localized rotations, dilations, the momentum
reflection) use closed forms; numeric stages integrate Hamilton's equations
with kick-drift-kick splitting and carry the variational equations along.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import qmc

from .errors import CompletenessError, InputError, NumericError
from .geometry import SpaceSpec, centered_angle, sup_distance
from .poisson import HamExpr
from .profiles import CutoffSpec, MomentumFunction, potential_from_json
from .systems import (ControlSchedule, MechanicalSystem, Potential, SumPotential,
                      as_potential, frozen_hamiltonian)

DEFAULT_SAFETY_BOX = 1e3


def symplectic_matrix(d: int) -> np.ndarray:
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.block([[zero, eye], [-eye, zero]])


def symplectic_defect(J: np.ndarray) -> np.ndarray:
    """Frobenius norm of J^T Omega J - Omega for each matrix in a stack."""
    J = np.asarray(J)
    d = J.shape[-1] // 2
    omega = symplectic_matrix(d)
    diff = np.swapaxes(J, -1, -2) @ omega @ J - omega
    return np.sqrt(np.sum(diff * diff, axis=(-1, -2)))


def _stack(X, space: SpaceSpec):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X).copy()
    if X.shape[1] != space.dim:
        raise InputError(f"points have length {X.shape[1]}, space needs {space.dim}")
    return X, single


# -- numeric integration ---------------------------------------------------------


@dataclass
class IntegrationResult:
    x: np.ndarray
    jacobian: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None


def _escape_limit(X, space, safety_box):
    cols = slice(space.d, None) if space.is_torus else slice(None)
    return safety_box + np.max(np.abs(X[:, cols]), initial=0.0)


def _strang_segment(space, potential: Potential, X, J, duration, dt, t0, limit, record):
    d = space.d
    steps = max(1, int(math.ceil(abs(duration) / dt - 1e-9)))
    h = duration / steps
    cols = slice(d, None) if space.is_torus else slice(None)

    def kick(s):
        q = X[:, :d]
        X[:, d:] -= s * potential.grad(q)
        if J is not None:
            H = potential.hessian(q)
            J[:, d:, :] -= s * (H @ J[:, :d, :])

    kick(0.5 * h)
    for k in range(steps):
        X[:, :d] += h * X[:, d:]
        if J is not None:
            J[:, :d, :] += h * J[:, d:, :]
        kick(h if k < steps - 1 else 0.5 * h)
        if not np.all(np.isfinite(X)) or np.max(np.abs(X[:, cols])) > limit:
            raise CompletenessError(
                f"trajectory left the safety box at t={t0 + (k + 1) * h:.6g}")
        if record is not None:
            record.append((t0 + (k + 1) * h, space.wrap(X[0]).copy()))
    return X, J


def integrate(system: MechanicalSystem, schedule: ControlSchedule, x0, dt: float = 1e-3,
              jacobian: bool = False, trajectory: bool = False,
              safety_box: float = DEFAULT_SAFETY_BOX) -> IntegrationResult:
    """Endpoint of the piecewise-autonomous flow of H_u(t) from x0.

    Each segment is split into an integer number of Strang steps so that
    segment boundaries are hit exactly. ``x0`` may be one point or an
    (n, 2d) stack; the optional trajectory records the first point.
    """
    if not dt > 0:
        raise InputError("dt must be positive")
    space = system.space
    X, single = _stack(x0, space)
    J = np.broadcast_to(np.eye(space.dim), (len(X), space.dim, space.dim)).copy() if jacobian else None
    if schedule.m is not None and schedule.m != system.m:
        raise InputError(f"schedule has {schedule.m} controls, system has m={system.m}")
    limit = _escape_limit(X, space, safety_box)
    record = [(0.0, space.wrap(X[0]).copy())] if trajectory else None
    t = 0.0
    for tau, u in schedule.segments:
        H = frozen_hamiltonian(system, u)
        X, J = _strang_segment(space, H.potential, X, J, tau, dt, t, limit, record)
        t += tau
    X = space.wrap(X)
    out = IntegrationResult(X[0] if single else X, None if J is None else (J[0] if single else J))
    if record is not None:
        out.times = np.array([r[0] for r in record])
        out.trajectory = np.array([r[1] for r in record])
    return out


def trajectory_csv(times, states, d: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"q{j + 1}" for j in range(d)] + [f"p{j + 1}" for j in range(d)])
    for t, x in zip(times, states):
        w.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in x])
    return buf.getvalue()


# -- stages ------------------------------------------------------------------------


class Stage:
    kind = "stage"
    hamiltonian = True
    duration = 0.0

    def __init__(self, space: SpaceSpec):
        self.space = space

    def apply(self, X):
        raise NotImplementedError

    def __call__(self, X):
        X, single = _stack(X, self.space)
        Y = self.apply(X)
        return Y[0] if single else Y

    def tangent(self, X):
        """(images, tangent maps) for an (n, 2d) stack."""
        return self.apply(X), self._fd_jacobian(X)

    def _fd_jacobian(self, X, eps=1e-6):
        n, D = X.shape
        J = np.empty((n, D, D))
        for j in range(D):
            e = np.zeros(D)
            e[j] = eps
            diff = self.space.difference(self.apply(X + e), self.apply(X - e))
            J[:, :, j] = diff / (2 * eps)
        return J

    def inverse(self) -> "Stage":
        raise InputError(f"{self.kind} stage has no exact inverse")

    def to_dict(self) -> dict:
        raise NotImplementedError


class NumericStage(Stage):
    """Strang-split flow of a mechanical system under a control schedule.

    With ``reverse`` set the stage is the inverse flow, computed as
    S o (flow of the reversed schedule) o S; mechanical Hamiltonians are even
    in p, so this is exact time reversal.
    """

    kind = "numeric"

    def __init__(self, system: MechanicalSystem, schedule: ControlSchedule, dt: float = 1e-3,
                 safety_box: float = DEFAULT_SAFETY_BOX, reverse: bool = False):
        super().__init__(system.space)
        self.system, self.schedule, self.dt = system, schedule, float(dt)
        self.safety_box = safety_box
        self.reverse = bool(reverse)
        self.duration = schedule.total_duration

    def _schedule(self):
        if self.reverse:
            return ControlSchedule(tuple(reversed(self.schedule.segments)))
        return self.schedule

    def _flip(self, X):
        if self.reverse:
            X = X.copy()
            X[:, self.space.d:] *= -1
        return X

    def apply(self, X):
        X = integrate(self.system, self._schedule(), self._flip(X), self.dt,
                      safety_box=self.safety_box).x
        return self._flip(np.atleast_2d(X))

    def tangent(self, X):
        res = integrate(self.system, self._schedule(), self._flip(X), self.dt, jacobian=True,
                        safety_box=self.safety_box)
        J = res.jacobian
        if self.reverse:
            d = self.space.d
            flip = np.concatenate([np.ones(d), -np.ones(d)])
            J = flip[None, :, None] * J * flip[None, None, :]
        return self._flip(np.atleast_2d(res.x)), J

    def inverse(self):
        return NumericStage(self.system, self.schedule, self.dt, self.safety_box, not self.reverse)

    def to_dict(self):
        return {"kind": self.kind, "system": self.system.to_dict(),
                "schedule": [[t, list(u)] for t, u in self.schedule.segments], "dt": self.dt,
                "reverse": self.reverse}


class VerticalShear(Stage):
    """Time-s flow of a configuration potential f: (q, p) -> (q, p - s grad f(q))."""

    kind = "vertical_shear"

    def __init__(self, space: SpaceSpec, f, s: float = 1.0, label: str = ""):
        super().__init__(space)
        if isinstance(f, HamExpr) and f.depends_on_p():
            raise InputError(f"vertical shear needs a function of q, got {f}")
        self.f = as_potential(f, space.d)
        self.s = float(s)
        self.label = label

    def apply(self, X):
        d = self.space.d
        Y = X.copy()
        if self.s != 0:
            Y[:, d:] -= self.s * self.f.grad(X[:, :d])
        return Y

    def tangent(self, X):
        d = self.space.d
        n = len(X)
        J = np.broadcast_to(np.eye(2 * d), (n, 2 * d, 2 * d)).copy()
        if self.s != 0:
            J[:, d:, :d] = -self.s * self.f.hessian(X[:, :d])
        return self.apply(X), J

    def inverse(self):
        return VerticalShear(self.space, self.f, -self.s, self.label)

    def to_dict(self):
        return {"kind": self.kind, "f": self.f.to_json(), "s": self.s, "label": self.label}


class HorizontalShear(Stage):
    """Time-s flow of a momentum function g: (q, p) -> (q + s grad g(p), p)."""

    kind = "horizontal_shear"

    def __init__(self, space: SpaceSpec, g, s: float = 1.0, label: str = ""):
        super().__init__(space)
        if isinstance(g, str):
            g = HamExpr.parse(g, space.d)
        if isinstance(g, HamExpr):
            g = MomentumFunction(g)
        if not isinstance(g, Potential):
            raise InputError("horizontal shear needs a HamExpr in p or a momentum profile")
        self.g = g
        self.s = float(s)
        self.label = label

    def apply(self, X):
        d = self.space.d
        Y = X.copy()
        if self.s != 0:
            Y[:, :d] += self.s * self.g.grad(X[:, d:])
        return self.space.wrap(Y)

    def tangent(self, X):
        d = self.space.d
        n = len(X)
        J = np.broadcast_to(np.eye(2 * d), (n, 2 * d, 2 * d)).copy()
        if self.s != 0:
            J[:, :d, d:] = self.s * self.g.hessian(X[:, d:])
        return self.apply(X), J

    def inverse(self):
        return HorizontalShear(self.space, self.g, -self.s, self.label)

    def to_dict(self):
        return {"kind": self.kind, "g": self.g.to_json(), "s": self.s, "label": self.label}


def drift(space: SpaceSpec, tau: float) -> HorizontalShear:
    """Exact free flow of |p|^2/2 for time tau (any sign)."""
    st = HorizontalShear(space, HamExpr.kinetic(space.d), tau, label="drift")
    st.duration = max(float(tau), 0.0)
    return st


class HarmonicRotation(Stage):
    """Flow of the localized oscillator centred at (q~, p~).

    The Hamiltonian is ``H = h_w * prod_i chi(sqrt(Q_i))`` with
    ``h_w = |p - p~|^2/2 + |q - q~|^2/(2 w^2)`` and per-plane invariants
    ``Q_i = dq_i^2 + w^2 dp_i^2``. Every Q_i is conserved, so each plane
    rotates rigidly with angular speed ``2 w dH/dQ_i``; on the plateau (all
    ``Q_i < r1^2``, the certified set) this is the plain rotation with speed
    ``1/w``. Uncertified points inside the support use the same closed form
    (``fallback="closed"``) or integrate Hamilton's equations numerically
    (``fallback="numeric"``). Without a cutoff the rotation is global.
    """

    kind = "harmonic_rotation"

    def __init__(self, space: SpaceSpec, center, w: float, t: float,
                 cutoff: Optional[CutoffSpec] = None, fallback: str = "closed", label: str = ""):
        super().__init__(space)
        if not w > 0:
            raise InputError("rotation width w must be positive")
        if fallback not in ("closed", "numeric"):
            raise InputError("fallback must be 'closed' or 'numeric'")
        self.center = np.asarray(center, dtype=float).reshape(space.dim)
        self.w, self.t = float(w), float(t)
        self.cutoff = cutoff
        self.fallback = fallback
        self.label = label
        self.duration = abs(self.t)
        if space.is_torus and cutoff is not None and cutoff.r2 >= np.pi:
            raise InputError("on the torus the rotation support must stay inside one chart (r2 < pi)")
        if space.is_torus and cutoff is None:
            raise InputError("a global rotation is not defined on the torus; give a cutoff")
        self.last_uncertified = 0

    # offsets from the center
    def _offsets(self, X):
        d = self.space.d
        dq = X[:, :d] - self.center[:d]
        if self.space.is_torus:
            dq = centered_angle(dq)
        dp = X[:, d:] - self.center[d:]
        return dq, dp

    def _rates(self, dq, dp):
        """Angular speed of each plane, shape (n, d), and the certified mask."""
        w = self.w
        Q = dq * dq + (w * dp) ** 2
        n, d = Q.shape
        if self.cutoff is None:
            return np.full((n, d), 1.0 / w), np.ones(n, dtype=bool)
        r = np.sqrt(Q)
        chi, dchi, _ = self.cutoff.evaluate(r)
        certified = np.all(r < self.cutoff.r1, axis=1)
        total = np.sum(Q, axis=1) / (2 * w * w)
        rate = np.empty((n, d))
        for i in range(d):
            others = np.prod(np.delete(chi, i, axis=1), axis=1) if d > 1 else np.ones(n)
            rs = np.where(r[:, i] > 0, r[:, i], 1.0)
            dHdQ = np.prod(chi, axis=1) / (2 * w * w) + total * np.where(
                r[:, i] > 0, dchi[:, i] / (2 * rs), 0.0) * others
            rate[:, i] = 2 * w * dHdQ
        return rate, certified

    def certified(self, X):
        X, _ = _stack(X, self.space)
        dq, dp = self._offsets(X)
        return self._rates(dq, dp)[1]

    def _rotate(self, dq, dp, rate):
        w = self.w
        th = rate * self.t
        c, s = np.cos(th), np.sin(th)
        x, y = dq, w * dp
        return x * c + y * s, (-x * s + y * c) / w

    def apply(self, X):
        d = self.space.d
        dq, dp = self._offsets(X)
        rate, certified = self._rates(dq, dp)
        nq, np_ = self._rotate(dq, dp, rate)
        Y = X.copy()
        Y[:, :d] = self.center[:d] + nq
        Y[:, d:] = self.center[d:] + np_
        moving = ~certified & np.any(rate != 0, axis=1)
        self.last_uncertified = int(np.sum(moving))
        if self.fallback == "numeric" and np.any(moving):
            Y[moving] = self._integrate(X[moving])
        return self.space.wrap(Y)

    def hamiltonian_value(self, X):
        X, _ = _stack(X, self.space)
        dq, dp = self._offsets(X)
        Q = dq * dq + (self.w * dp) ** 2
        total = np.sum(Q, axis=1) / (2 * self.w**2)
        if self.cutoff is None:
            return total
        return total * np.prod(self.cutoff(np.sqrt(Q)), axis=1)

    def vector_field(self, X):
        """(dq/dt, dp/dt) of the cutoff Hamiltonian at an (n, 2d) stack."""
        dq, dp = self._offsets(X)
        rate, _ = self._rates(dq, dp)
        # dH/dQ_i = rate_i / (2w); qdot = dH/dQ * 2 w^2 dp ; pdot = -dH/dQ * 2 dq
        dHdQ = rate / (2 * self.w)
        return np.concatenate([dHdQ * 2 * self.w**2 * dp, -dHdQ * 2 * dq], axis=1)

    def _integrate(self, X, rtol=1e-12, atol=1e-12):
        n, D = X.shape

        def rhs(_, y):
            return self.vector_field(y.reshape(n, D)).ravel()

        sol = solve_ivp(rhs, (0.0, self.t), X.ravel(), method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericError(f"rotation fallback integration failed: {sol.message}")
        return sol.y[:, -1].reshape(n, D)

    def tangent(self, X):
        Y = self.apply(X)
        dq, dp = self._offsets(X)
        rate, certified = self._rates(dq, dp)
        J = self._fd_jacobian(X)
        if np.any(certified):
            d = self.space.d
            th = self.t / self.w
            c, s = math.cos(th), math.sin(th)
            exact = np.zeros((2 * d, 2 * d))
            eye = np.eye(d)
            exact[:d, :d] = c * eye
            exact[:d, d:] = self.w * s * eye
            exact[d:, :d] = -s / self.w * eye
            exact[d:, d:] = c * eye
            J[certified] = exact
        return Y, J

    def inverse(self):
        return HarmonicRotation(self.space, self.center, self.w, -self.t, self.cutoff,
                                self.fallback, self.label)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "w": self.w, "t": self.t,
                "cutoff": None if self.cutoff is None else self.cutoff.to_dict(),
                "fallback": self.fallback, "label": self.label}


class Dilation(Stage):
    """D_s(q, p) = (s q, p / s): time-ln(s) flow of p.q. Euclidean spaces only."""

    kind = "dilation"

    def __init__(self, space: SpaceSpec, s: float):
        super().__init__(space)
        if space.is_torus:
            raise InputError("dilations are not defined on the torus (p.q is not global)")
        if not s > 0:
            raise InputError("dilation factor must be positive")
        self.s = float(s)

    def apply(self, X):
        d = self.space.d
        Y = X.copy()
        Y[:, :d] *= self.s
        Y[:, d:] /= self.s
        return Y

    def tangent(self, X):
        d = self.space.d
        diag = np.concatenate([np.full(d, self.s), np.full(d, 1.0 / self.s)])
        return self.apply(X), np.broadcast_to(np.diag(diag), (len(X), 2 * d, 2 * d)).copy()

    def inverse(self):
        return Dilation(self.space, 1.0 / self.s)

    def to_dict(self):
        return {"kind": self.kind, "s": self.s}


class Symmetry(Stage):
    """S(q, p) = (q, -p). Volume preserving with det (-1)^d; not Hamiltonian."""

    kind = "symmetry"
    hamiltonian = False

    def apply(self, X):
        Y = X.copy()
        Y[:, self.space.d:] *= -1
        return Y

    def tangent(self, X):
        d = self.space.d
        diag = np.concatenate([np.ones(d), -np.ones(d)])
        return self.apply(X), np.broadcast_to(np.diag(diag), (len(X), 2 * d, 2 * d)).copy()

    def inverse(self):
        return Symmetry(self.space)

    def to_dict(self):
        return {"kind": self.kind}


def vertical_shear(space, f, s=1.0) -> VerticalShear:
    return VerticalShear(space, f, s)


def horizontal_shear(space, g, s=1.0) -> HorizontalShear:
    return HorizontalShear(space, g, s)


def harmonic_rotation(space, center, w, t, cutoff=None, fallback="closed") -> HarmonicRotation:
    return HarmonicRotation(space, center, w, t, cutoff, fallback)


def dilation(space, s) -> Dilation:
    return Dilation(space, s)


def symmetry_S(space) -> Symmetry:
    return Symmetry(space)


# -- composed flows ------------------------------------------------------------------


class FlowMap:
    """Composition of stages applied left to right (first stage acts first)."""

    def __init__(self, space: SpaceSpec, stages: Sequence[Stage] = ()):
        self.space = space
        self.stages: List[Stage] = list(stages)
        for st in self.stages:
            if st.space != space:
                raise InputError("all stages must live on the same space")

    def __call__(self, X):
        X, single = _stack(X, self.space)
        for st in self.stages:
            X = st.apply(X)
        return X[0] if single else X

    def then(self, other) -> "FlowMap":
        other_stages = other.stages if isinstance(other, FlowMap) else [other]
        return FlowMap(self.space, self.stages + list(other_stages))

    def inverse(self) -> "FlowMap":
        return FlowMap(self.space, [st.inverse() for st in reversed(self.stages)])

    @property
    def hamiltonian(self) -> bool:
        return all(st.hamiltonian for st in self.stages)

    @property
    def duration(self) -> float:
        return float(sum(st.duration for st in self.stages))

    def tangent(self, X):
        X, single = _stack(X, self.space)
        J = np.broadcast_to(np.eye(self.space.dim), (len(X), self.space.dim, self.space.dim)).copy()
        for st in self.stages:
            X, Js = st.tangent(X)
            J = Js @ J
        return (X[0], J[0]) if single else (X, J)

    def to_dict(self):
        return {"space": self.space.to_dict(), "stages": [st.to_dict() for st in self.stages]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "FlowMap":
        space = SpaceSpec.from_dict(data["space"])
        return cls(space, [stage_from_dict(space, s) for s in data.get("stages", [])])

    def __len__(self):
        return len(self.stages)


def stage_from_dict(space: SpaceSpec, data: dict) -> Stage:
    kind = data.get("kind")
    d = space.d
    if kind == "vertical_shear":
        return VerticalShear(space, potential_from_json(data["f"], d), data["s"], data.get("label", ""))
    if kind == "horizontal_shear":
        g = data["g"]
        g = HamExpr.parse(g, d) if isinstance(g, str) else potential_from_json(g, d)
        return HorizontalShear(space, g, data["s"], data.get("label", ""))
    if kind == "harmonic_rotation":
        cut = data.get("cutoff")
        return HarmonicRotation(space, data["center"], data["w"], data["t"],
                                None if cut is None else CutoffSpec(cut["r1"], cut["r2"]),
                                data.get("fallback", "closed"), data.get("label", ""))
    if kind == "dilation":
        return Dilation(space, data["s"])
    if kind == "symmetry":
        return Symmetry(space)
    if kind == "numeric":
        system = MechanicalSystem.from_dict(data["system"])
        sched = ControlSchedule(tuple((t, tuple(u)) for t, u in data["schedule"]))
        return NumericStage(system, sched, data.get("dt", 1e-3), reverse=data.get("reverse", False))
    raise InputError(f"unknown stage kind {kind!r}")


def jacobian_det(flow, X):
    """Determinant of the tangent map of a FlowMap or Stage at a point or stack."""
    if isinstance(flow, Stage):
        flow = FlowMap(flow.space, [flow])
    _, J = flow.tangent(X)
    return np.linalg.det(J)


def low_discrepancy_box(lo, hi, n: int) -> np.ndarray:
    """Deterministic Halton sample of n points in the box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    sampler = qmc.Halton(d=lo.size, scramble=False)
    u = sampler.random(n + 1)[1:]
    return lo + (hi - lo) * u


def phase_box(space: SpaceSpec, q_radius: float = 1.0, p_radius: float = 1.0):
    """(lo, hi) of the box |q| <= q_radius, |p| <= p_radius (all of T^d in q on the torus)."""
    d = space.d
    if space.is_torus:
        lo = np.concatenate([np.zeros(d), -np.full(d, p_radius)])
        hi = np.concatenate([np.full(d, 2 * np.pi), np.full(d, p_radius)])
    else:
        lo = np.concatenate([-np.full(d, q_radius), -np.full(d, p_radius)])
        hi = -lo
    return lo, hi


def c0_distance(flow_a, flow_b, space: SpaceSpec, lo=None, hi=None, n: int = 256) -> float:
    """max over a Halton sample of K=[lo, hi] of sup_distance(flow_a(x), flow_b(x))."""
    if lo is None or hi is None:
        lo, hi = phase_box(space)
    X = low_discrepancy_box(lo, hi, n)
    A = flow_a(X) if flow_a is not None else X
    B = flow_b(X) if flow_b is not None else X
    return float(np.max(sup_distance(A, B, space)))


def as_flow(space: SpaceSpec, obj) -> FlowMap:
    if isinstance(obj, FlowMap):
        return obj
    if isinstance(obj, Stage):
        return FlowMap(space, [obj])
    raise InputError("expected a FlowMap or a Stage")


def combined_potential(d: int, parts) -> SumPotential:
    return SumPotential(d, parts)

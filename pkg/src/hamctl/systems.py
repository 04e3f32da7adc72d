"""Mechanical control systems H_u = |p|^2/2 + V0(q) + sum_j u_j V_j(q) and control schedules."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InputError
from .geometry import EUCLIDEAN, TORUS, SpaceSpec
from .poisson import HamExpr


class Potential:
    """A configuration-space function with value, gradient and Hessian.

    Inputs are (n, d) stacks of configurations; outputs are (n,), (n, d) and
    (n, d, d).
    """

    name = "potential"
    expr: Optional[HamExpr] = None
    # bound on |grad| Lipschitz constant, used only as a step-size hint
    lipschitz: float = np.inf

    def value(self, q):
        raise NotImplementedError

    def grad(self, q):
        raise NotImplementedError

    def hessian(self, q):
        raise NotImplementedError

    def to_json(self):
        raise NotImplementedError


class SymbolicPotential(Potential):
    def __init__(self, expr: HamExpr):
        if expr.depends_on_p():
            raise InputError(f"potential {expr} depends on p")
        self.expr = expr
        self.d = expr.d
        self.name = str(expr)

    def _pad(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return np.concatenate([q, np.zeros_like(q)], axis=1)

    def value(self, q):
        return self.expr.evaluate(self._pad(q))

    def grad(self, q):
        return self.expr.grad(self._pad(q))[0]

    def hessian(self, q):
        return self.expr.hessian(self._pad(q))[:, : self.d, : self.d]

    def to_json(self):
        return str(self.expr)


class GaussianPotential(Potential):
    """exp(-|q - c|^2 / (2 s^2))."""

    def __init__(self, d: int, center=None, width: float = 1.0):
        self.d = d
        self.center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        self.width = float(width)
        self.name = "gaussian"
        self.lipschitz = 1.0 / self.width**2

    def value(self, q):
        z = (np.atleast_2d(q) - self.center) / self.width
        return np.exp(-0.5 * np.sum(z * z, axis=1))

    def grad(self, q):
        q = np.atleast_2d(q)
        return -(q - self.center) / self.width**2 * self.value(q)[:, None]

    def hessian(self, q):
        q = np.atleast_2d(q)
        z = (q - self.center) / self.width**2
        v = self.value(q)[:, None, None]
        eye = np.eye(self.d)[None] / self.width**2
        return (z[:, :, None] * z[:, None, :] - eye) * v

    def to_json(self):
        out = {"builtin": "gaussian"}
        if np.any(self.center != 0):
            out["center"] = self.center.tolist()
        if self.width != 1.0:
            out["width"] = self.width
        return out


class CallablePotential(Potential):
    """Black-box potential from user callables acting on (n, d) stacks."""

    def __init__(self, d: int, value: Callable, grad: Callable, hessian: Callable = None,
                 lipschitz: float = np.inf, name: str = "callable"):
        self.d = d
        self._value, self._grad, self._hess = value, grad, hessian
        self.lipschitz = lipschitz
        self.name = name

    def value(self, q):
        return np.asarray(self._value(np.atleast_2d(q)), dtype=float)

    def grad(self, q):
        return np.asarray(self._grad(np.atleast_2d(q)), dtype=float)

    def hessian(self, q):
        q = np.atleast_2d(q)
        if self._hess is not None:
            return np.asarray(self._hess(q), dtype=float)
        # central differences of the gradient
        eps = 1e-6
        out = np.empty((len(q), self.d, self.d))
        for j in range(self.d):
            e = np.zeros(self.d)
            e[j] = eps
            out[:, :, j] = (self.grad(q + e) - self.grad(q - e)) / (2 * eps)
        return out

    def to_json(self):
        raise InputError("callable potentials cannot be serialized")


class SumPotential(Potential):
    """Linear combination sum_i c_i V_i."""

    def __init__(self, d: int, parts: Sequence[Tuple[float, Potential]]):
        self.d = d
        self.parts = [(float(c), v) for c, v in parts if c != 0]
        exprs = [v.expr for _, v in self.parts]
        if all(e is not None for e in exprs):
            total = HamExpr.zero(d)
            for (c, _), e in zip(self.parts, exprs):
                total = total + e * c
            self.expr = total
        finite = [abs(c) * v.lipschitz for c, v in self.parts]
        self.lipschitz = float(sum(finite)) if finite else 0.0

    def value(self, q):
        q = np.atleast_2d(q)
        out = np.zeros(len(q))
        for c, v in self.parts:
            out += c * v.value(q)
        return out

    def grad(self, q):
        q = np.atleast_2d(q)
        out = np.zeros_like(q, dtype=float)
        for c, v in self.parts:
            out += c * v.grad(q)
        return out

    def hessian(self, q):
        q = np.atleast_2d(q)
        out = np.zeros((len(q), self.d, self.d))
        for c, v in self.parts:
            out += c * v.hessian(q)
        return out


def as_potential(obj, d: int) -> Potential:
    if isinstance(obj, Potential):
        return obj
    if isinstance(obj, HamExpr):
        return SymbolicPotential(obj)
    if isinstance(obj, (int, float)):
        return SymbolicPotential(HamExpr.const(d, obj))
    if isinstance(obj, str):
        return SymbolicPotential(HamExpr.parse(obj, d))
    if isinstance(obj, dict):
        kind = obj.get("builtin")
        if kind == "gaussian":
            return GaussianPotential(d, obj.get("center"), obj.get("width", 1.0))
        if kind == "zero":
            return SymbolicPotential(HamExpr.zero(d))
        raise InputError(f"unknown builtin potential {kind!r}")
    raise InputError(f"cannot interpret {obj!r} as a potential")


@dataclass(frozen=True)
class MechanicalSystem:
    space: SpaceSpec
    V0: Potential
    controls: Tuple[Potential, ...]

    @property
    def m(self) -> int:
        return len(self.controls)

    @property
    def d(self) -> int:
        return self.space.d

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "V0": self.V0.to_json(),
            "controls": [c.to_json() for c in self.controls],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MechanicalSystem":
        try:
            space = SpaceSpec.from_dict(data["space"])
        except KeyError:
            raise InputError("system config needs a 'space' entry") from None
        V0 = as_potential(data.get("V0", 0), space.d)
        preset = data.get("preset")
        if preset == "euclidean":
            return euclidean_preset(space.d, V0)
        if preset == "torus":
            return torus_preset(space.d, V0)
        if preset is not None:
            raise InputError(f"unknown preset {preset!r}")
        controls = tuple(as_potential(c, space.d) for c in data.get("controls", []))
        return cls(space, V0, controls)


def euclidean_preset(d: int, V0=0) -> MechanicalSystem:
    """Controls q_1, ..., q_d and the Gaussian exp(-|q|^2/2); m = d + 1."""
    space = SpaceSpec(EUCLIDEAN, d)
    controls = [SymbolicPotential(HamExpr.q(d, j)) for j in range(d)]
    controls.append(GaussianPotential(d))
    return MechanicalSystem(space, as_potential(V0, d), tuple(controls))


def torus_frequencies(d: int) -> List[Tuple[int, ...]]:
    """k_j = e_j for j < d and k_d = (1, ..., 1)."""
    ks = []
    for j in range(d - 1):
        k = [0] * d
        k[j] = 1
        ks.append(tuple(k))
    ks.append((1,) * d)
    return ks


def torus_preset(d: int, V0=0) -> MechanicalSystem:
    """Controls cos(k_j.q), sin(k_j.q) for the frequencies above; m = 2d."""
    space = SpaceSpec(TORUS, d)
    controls = []
    for k in torus_frequencies(d):
        controls.append(SymbolicPotential(HamExpr.cos(k)))
        controls.append(SymbolicPotential(HamExpr.sin(k)))
    return MechanicalSystem(space, as_potential(V0, d), tuple(controls))


class FrozenHamiltonian:
    """H_u = |p|^2/2 + V(q) for a fixed control vector."""

    def __init__(self, space: SpaceSpec, potential: Potential):
        self.space = space
        self.potential = potential
        self.d = space.d

    @property
    def expr(self) -> Optional[HamExpr]:
        if self.potential.expr is None:
            return None
        return HamExpr.kinetic(self.d) + self.potential.expr

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = x[:, self.d:]
        return 0.5 * np.sum(p * p, axis=1) + self.potential.value(x[:, : self.d])

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.potential.grad(x[:, : self.d]), x[:, self.d:].copy()


def frozen_hamiltonian(system: MechanicalSystem, u: Sequence[float]) -> FrozenHamiltonian:
    u = np.asarray(u, dtype=float).ravel()
    if u.size != system.m:
        raise InputError(f"control vector has {u.size} entries, system has m={system.m}")
    parts = [(1.0, system.V0)] + [(float(c), v) for c, v in zip(u, system.controls)]
    return FrozenHamiltonian(system.space, SumPotential(system.d, parts))


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant control: ordered (duration, u) segments."""

    segments: Tuple[Tuple[float, Tuple[float, ...]], ...] = field(default_factory=tuple)

    def __post_init__(self):
        segs = []
        width = None
        for tau, u in self.segments:
            tau = float(tau)
            if not tau > 0 or not np.isfinite(tau):
                raise InputError(f"segment durations must be positive, got {tau}")
            u = tuple(float(x) for x in np.ravel(u))
            if width is not None and len(u) != width:
                raise InputError("all control vectors must have the same length")
            width = len(u)
            segs.append((tau, u))
        object.__setattr__(self, "segments", tuple(segs))

    @property
    def total_duration(self) -> float:
        return float(sum(t for t, _ in self.segments))

    @property
    def m(self) -> Optional[int]:
        return len(self.segments[0][1]) if self.segments else None

    def then(self, other: "ControlSchedule") -> "ControlSchedule":
        """Run self first, then other."""
        if self.m is not None and other.m is not None and self.m != other.m:
            raise InputError("cannot concatenate schedules with different m")
        return ControlSchedule(self.segments + other.segments)

    __add__ = then

    def repeat(self, n: int) -> "ControlSchedule":
        return ControlSchedule(self.segments * int(n))

    @classmethod
    def constant(cls, tau: float, u: Sequence[float]) -> "ControlSchedule":
        return cls(((tau, tuple(u)),))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        m = self.m or 0
        w.writerow(["tau"] + [f"u_{j + 1}" for j in range(m)])
        for tau, u in self.segments:
            w.writerow([repr(tau)] + [repr(x) for x in u])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ControlSchedule":
        rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
        if rows and rows[0][0].strip().lower() == "tau":
            rows = rows[1:]
        try:
            return cls(tuple((float(r[0]), tuple(float(x) for x in r[1:])) for r in rows))
        except ValueError as exc:
            raise InputError(f"bad schedule row: {exc}") from None

"""Smooth cutoffs and compactly supported linear profiles used by exact shears."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .systems import Potential


def _psi(t):
    """exp(-1/t) for t > 0, else 0, with first and second derivatives."""
    t = np.asarray(t, dtype=float)
    pos = t > 0
    safe = np.where(pos, t, 1.0)
    e = np.where(pos, np.exp(-1.0 / safe), 0.0)
    d1 = np.where(pos, e / safe**2, 0.0)
    d2 = np.where(pos, e * (1.0 - 2.0 * safe) / safe**4, 0.0)
    return e, d1, d2


def smooth_step(t):
    """C-infinity step: 1 for t <= 0, 0 for t >= 1, monotone in between.

    Returns (value, first derivative, second derivative) in t.
    """
    a, a1, a2 = _psi(1.0 - np.asarray(t, dtype=float))
    b, b1, b2 = _psi(np.asarray(t, dtype=float))
    # derivatives of a(1-t): -a1, a2
    s = a + b
    s1 = -a1 + b1
    s2 = a2 + b2
    s = np.where(s > 0, s, 1.0)
    val = a / s
    # val = a/s ; d/dt a = -a1
    da = -a1
    d1 = (da * s - a * s1) / s**2
    d2 = (a2 * s - a * s2) / s**2 - 2 * d1 * s1 / s
    return val, d1, d2


@dataclass(frozen=True)
class CutoffSpec:
    """Radial cutoff: 1 on radius <= r1, 0 on radius >= r2."""

    r1: float
    r2: float

    def __post_init__(self):
        if not 0 < self.r1 < self.r2:
            raise InputError(f"cutoff needs 0 < r1 < r2, got {self.r1}, {self.r2}")

    def __call__(self, r):
        return self.evaluate(r)[0]

    def evaluate(self, r):
        """(chi, d chi/dr, d2 chi/dr2)."""
        width = self.r2 - self.r1
        v, d1, d2 = smooth_step((np.asarray(r, dtype=float) - self.r1) / width)
        return v, d1 / width, d2 / width**2

    def to_dict(self):
        return {"r1": self.r1, "r2": self.r2}


def box_bump(z, plateau: float, support: float):
    """Product cutoff prod_i chi(|z_i|) over the last axis, with gradient and Hessian.

    ``z`` is an (n, k) array. The bump is 1 on the sup-ball of radius
    ``plateau`` and vanishes outside the sup-ball of radius ``support``.
    """
    z = np.atleast_2d(z)
    n, k = z.shape
    cut = CutoffSpec(plateau, support)
    a = np.abs(z)
    sgn = np.sign(z)
    v, d1, d2 = cut.evaluate(a)
    val = np.prod(v, axis=1)
    grad = np.empty_like(z)
    hess = np.empty((n, k, k))
    for i in range(k):
        others = np.prod(np.delete(v, i, axis=1), axis=1) if k > 1 else np.ones(n)
        grad[:, i] = d1[:, i] * sgn[:, i] * others
        hess[:, i, i] = d2[:, i] * others
        for j in range(i + 1, k):
            rest = np.prod(np.delete(v, [i, j], axis=1), axis=1) if k > 2 else np.ones(n)
            hij = d1[:, i] * sgn[:, i] * d1[:, j] * sgn[:, j] * rest
            hess[:, i, j] = hij
            hess[:, j, i] = hij
    return val, grad, hess


class LocalizedLinear(Potential):
    """Sum over sites of ``bump(z - c_n) * a_n . (z - c_n)``.

    On the sup-ball of radius ``plateau`` around ``c_n`` the gradient is
    exactly ``a_n``; the function vanishes outside radius ``support``. Used
    both for configuration profiles (vertical shears) and momentum profiles
    (horizontal shears); ``period`` enables torus-wrapped differences.
    """

    def __init__(self, centers, slopes, plateau, support, period: float = None, name="localized"):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.slopes = np.atleast_2d(np.asarray(slopes, dtype=float))
        if self.centers.shape != self.slopes.shape:
            raise InputError("centers and slopes must have matching shapes")
        self.d = self.centers.shape[1]
        self.plateau = np.broadcast_to(np.asarray(plateau, dtype=float), (len(self.centers),)).copy()
        self.support = np.broadcast_to(np.asarray(support, dtype=float), (len(self.centers),)).copy()
        if np.any(self.plateau <= 0) or np.any(self.support <= self.plateau):
            raise InputError("need 0 < plateau < support for every site")
        self.period = period
        self.name = name

    def _offsets(self, z, i):
        dz = z - self.centers[i]
        if self.period is not None:
            dz = np.mod(dz + self.period / 2, self.period) - self.period / 2
        return dz

    def _active(self, dz, i):
        return np.all(np.abs(dz) < self.support[i], axis=1)

    def value(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros(len(z))
        for i in range(len(self.centers)):
            dz = self._offsets(z, i)
            m = self._active(dz, i)
            if np.any(m):
                b, _, _ = box_bump(dz[m], self.plateau[i], self.support[i])
                out[m] += b * (dz[m] @ self.slopes[i])
        return out

    def grad(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros_like(z)
        for i in range(len(self.centers)):
            dz = self._offsets(z, i)
            m = self._active(dz, i)
            if np.any(m):
                b, gb, _ = box_bump(dz[m], self.plateau[i], self.support[i])
                lin = dz[m] @ self.slopes[i]
                out[m] += gb * lin[:, None] + b[:, None] * self.slopes[i]
        return out

    def hessian(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros((len(z), self.d, self.d))
        for i in range(len(self.centers)):
            dz = self._offsets(z, i)
            m = self._active(dz, i)
            if np.any(m):
                b, gb, hb = box_bump(dz[m], self.plateau[i], self.support[i])
                lin = dz[m] @ self.slopes[i]
                a = self.slopes[i]
                out[m] += hb * lin[:, None, None] + gb[:, :, None] * a[None, None, :] \
                    + a[None, :, None] * gb[:, None, :]
        return out

    def to_json(self):
        return {
            "builtin": "localized_linear",
            "centers": self.centers.tolist(),
            "slopes": self.slopes.tolist(),
            "plateau": self.plateau.tolist(),
            "support": self.support.tolist(),
            "period": self.period,
        }


class BumpInterpolant(Potential):
    """f(q) = sum_i bump((q - q_i)/r) * a_i . (q - q_i) with a radial bump.

    The bump equals 1 for |z| <= 1/2 and 0 for |z| >= 1 (Euclidean norm), so
    grad f(q_i) = a_i exactly and the Hessian vanishes at every q_i.
    """

    def __init__(self, positions, gradients, radius: float, period: float = None):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=float))
        self.gradients = np.atleast_2d(np.asarray(gradients, dtype=float))
        self.d = self.positions.shape[1]
        self.radius = float(radius)
        self.period = period
        self.cut = CutoffSpec(0.5 * self.radius, self.radius)
        self.name = "interpolant"

    def _terms(self, q, i):
        dz = q - self.positions[i]
        if self.period is not None:
            dz = np.mod(dz + self.period / 2, self.period) - self.period / 2
        r = np.sqrt(np.sum(dz * dz, axis=1))
        return dz, r

    def value(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.zeros(len(q))
        for i in range(len(self.positions)):
            dz, r = self._terms(q, i)
            out += self.cut(r) * (dz @ self.gradients[i])
        return out

    def grad(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.zeros_like(q)
        for i in range(len(self.positions)):
            dz, r = self._terms(q, i)
            chi, dchi, _ = self.cut.evaluate(r)
            rs = np.where(r > 0, r, 1.0)
            radial = np.where(r > 0, dchi / rs, 0.0)[:, None] * dz
            out += radial * (dz @ self.gradients[i])[:, None] + chi[:, None] * self.gradients[i]
        return out

    def hessian(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        eps = 1e-6 * max(self.radius, 1e-3)
        out = np.empty((len(q), self.d, self.d))
        for j in range(self.d):
            e = np.zeros(self.d)
            e[j] = eps
            out[:, :, j] = (self.grad(q + e) - self.grad(q - e)) / (2 * eps)
        return out

    def to_json(self):
        return {
            "builtin": "bump_interpolant",
            "positions": self.positions.tolist(),
            "gradients": self.gradients.tolist(),
            "radius": self.radius,
            "period": self.period,
        }


class MomentumFunction(Potential):
    """Adapter presenting a p-only HamExpr through the Potential interface."""

    def __init__(self, expr):
        if expr.depends_on_q():
            raise InputError(f"{expr} depends on q; a horizontal shear needs a function of p")
        self.expr = expr
        self.d = expr.d
        self.name = str(expr)

    def _pad(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.concatenate([np.zeros_like(p), p], axis=1)

    def value(self, p):
        return self.expr.evaluate(self._pad(p))

    def grad(self, p):
        return self.expr.grad(self._pad(p))[1]

    def hessian(self, p):
        return self.expr.hessian(self._pad(p))[:, self.d:, self.d:]

    def to_json(self):
        return str(self.expr)


def potential_from_json(obj, d: int) -> Potential:
    """Inverse of ``to_json`` for every potential type in the package."""
    from .systems import as_potential

    if isinstance(obj, dict):
        kind = obj.get("builtin")
        if kind == "localized_linear":
            return LocalizedLinear(obj["centers"], obj["slopes"], obj["plateau"], obj["support"],
                                   obj.get("period"))
        if kind == "bump_interpolant":
            return BumpInterpolant(obj["positions"], obj["gradients"], obj["radius"], obj.get("period"))
    return as_potential(obj, d)


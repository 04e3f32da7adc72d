"""Exact steering of finite ensembles of distinct phase points.

The plan is drift(delta) -> shear f -> drift(tau) -> shear g -> drift(delta').
The separation drifts make start and target positions pairwise distinct,
f sends every momentum to p_hat/tau where p_hat is the displacement still to
be covered, the middle drift carries every point onto its target position,
and g installs the target momenta. Shears come from bump-localized linear
interpolants, so every endpoint is reproduced in closed form.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, NumericError
from .flows import FlowMap, VerticalShear, drift
from .geometry import TWO_PI, SpaceSpec, centered_angle, sup_distance
from .profiles import BumpInterpolant
from .systems import MechanicalSystem


@dataclass
class EnsembleState:
    space: SpaceSpec
    points: np.ndarray  # (N, 2d)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[1] != self.space.dim:
            raise InputError(f"ensemble points need {self.space.dim} coordinates")
        self.points = self.space.wrap(pts)
        for i in range(len(pts)):
            others = self.points[i + 1:]
            if len(others) and np.min(sup_distance(others, self.points[i], self.space)) == 0:
                raise InputError(f"ensemble points {i} and another coincide; steering needs distinct points")

    @property
    def N(self) -> int:
        return len(self.points)

    @property
    def positions(self) -> np.ndarray:
        return self.points[:, : self.space.d]

    @property
    def momenta(self) -> np.ndarray:
        return self.points[:, self.space.d:]

    def to_dict(self):
        return {"space": self.space.to_dict(), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleState":
        return cls(SpaceSpec.from_dict(data["space"]), np.asarray(data["points"], dtype=float))


def _position_gaps(space: SpaceSpec, Q: np.ndarray) -> float:
    """Smallest pairwise sup-distance between positions (wrapped on the torus)."""
    best = np.inf
    for i in range(len(Q)):
        diff = Q[i + 1:] - Q[i]
        if space.is_torus:
            diff = centered_angle(diff)
        if len(diff):
            best = min(best, float(np.min(np.max(np.abs(diff), axis=1))))
    return best


def separate(state: EnsembleState, delta_max: float, K: int = 16, min_separation: float = 1e-9,
             max_refinements: int = 20):
    """Smallest delta on the ladder {0, delta_max/K, ..., delta_max} separating positions.

    Returns (delta, margin), margin being the smallest pairwise sup-distance
    of the drifted positions. The ladder is refined (K doubled) up to
    ``max_refinements`` times.
    """
    if not delta_max > 0:
        raise InputError("delta_max must be positive")
    gap = _position_gaps(state.space, state.positions)
    if gap > min_separation:
        return 0.0, gap
    k = int(K)
    for _ in range(max_refinements + 1):
        for i in range(1, k + 1):
            delta = delta_max * i / k
            Q = state.positions + delta * state.momenta
            gap = _position_gaps(state.space, Q)
            if gap > min_separation:
                return delta, gap
        k *= 2
    raise NumericError("no separating drift found on the refined ladder")


def minimal_representative(dq: np.ndarray) -> np.ndarray:
    """Shortest lift of a torus displacement, taken in (-pi, pi] per axis."""
    r = centered_angle(dq)
    return np.where(r <= -np.pi, np.pi, r)


def interpolant(space: SpaceSpec, positions, gradients) -> BumpInterpolant:
    """f with grad f(q^i) = a^i exactly.

    Each bump has plateau radius one third of the minimal separation and
    support radius two thirds of it, so no bump reaches another q^j: every
    gradient is exactly the prescribed one and the Hessian vanishes at
    every q^i.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    gradients = np.atleast_2d(np.asarray(gradients, dtype=float))
    if positions.shape != gradients.shape or positions.shape[1] != space.d:
        raise InputError("positions and gradients must both be (N, d)")
    if len(positions) == 1:
        radius = 2.0
    else:
        # Euclidean distances: the bump is radial
        best = np.inf
        for i in range(len(positions)):
            diff = positions[i + 1:] - positions[i]
            if space.is_torus:
                diff = centered_angle(diff)
            if len(diff):
                best = min(best, float(np.min(np.linalg.norm(diff, axis=1))))
        if best == 0:
            raise InputError("interpolation positions must be pairwise distinct")
        radius = 2 * best / 3
    return BumpInterpolant(positions, gradients, radius, TWO_PI if space.is_torus else None)


@dataclass
class SteeringPlan:
    start: EnsembleState
    target: EnsembleState
    tau: float
    delta: float
    delta_target: float
    f: BumpInterpolant
    g: BumpInterpolant
    p_hat: np.ndarray
    margins: dict = field(default_factory=dict)

    @property
    def flow(self) -> FlowMap:
        space = self.start.space
        stages = []
        if self.delta > 0:
            stages.append(drift(space, self.delta))
        stages += [VerticalShear(space, self.f, 1.0, "f_tau"), drift(space, self.tau),
                   VerticalShear(space, self.g, 1.0, "g_tau")]
        if self.delta_target > 0:
            stages.append(drift(space, self.delta_target))
        return FlowMap(space, stages)

    @property
    def total_time(self) -> float:
        return self.delta + self.tau + self.delta_target

    def endpoints(self) -> np.ndarray:
        return self.flow(self.start.points)

    def errors(self) -> np.ndarray:
        return sup_distance(self.endpoints(), self.target.points, self.start.space)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        D = self.start.space.dim
        w.writerow(["i"] + [f"target_{k}" for k in range(D)] + [f"achieved_{k}" for k in range(D)] + ["error"])
        for i, (t, a, e) in enumerate(zip(self.target.points, self.endpoints(), self.errors())):
            w.writerow([i] + [repr(float(x)) for x in t] + [repr(float(x)) for x in a] + [repr(float(e))])
        return buf.getvalue()

    def to_dict(self):
        return {"tau": self.tau, "delta": self.delta, "delta_target": self.delta_target,
                "total_time": self.total_time, "p_hat": self.p_hat.tolist(),
                "f": self.f.to_json(), "g": self.g.to_json(), "margins": self.margins,
                "flow": self.flow.to_dict()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def steer(start: EnsembleState, target: EnsembleState, tau: float,
          delta_max: Optional[float] = None) -> SteeringPlan:
    """Plan mapping start[i] to target[i] exactly, in time delta + tau + delta'.

    The drift is the free one, |p|^2/2; ``delta_max`` (default tau/2) caps
    each separation drift.
    """
    if start.space != target.space:
        raise InputError("start and target live on different spaces")
    if start.N != target.N:
        raise InputError("start and target must have the same number of points")
    if not tau > 0:
        raise InputError("tau must be positive")
    space, d = start.space, start.space.d
    delta_max = tau / 2 if delta_max is None else delta_max
    delta, m0 = separate(start, delta_max)
    z = start.points.copy()
    z[:, :d] += delta * z[:, d:]
    z = space.wrap(z)
    # the last drift is undone on the target side: separate e^{-delta' drift}(target)
    mirrored = target.points.copy()
    mirrored[:, d:] *= -1
    delta_t, m1 = separate(EnsembleState(space, mirrored), delta_max)
    zt = target.points.copy()
    zt[:, :d] -= delta_t * zt[:, d:]
    zt = space.wrap(zt)
    dq = zt[:, :d] - z[:, :d]
    p_hat = minimal_representative(dq) if space.is_torus else dq
    f = interpolant(space, z[:, :d], z[:, d:] - p_hat / tau)
    g = interpolant(space, zt[:, :d], -zt[:, d:] + p_hat / tau)
    return SteeringPlan(start, target, tau, delta, delta_t, f, g, p_hat,
                        {"start_separation": m0, "target_separation": m1})


def _hamiltonian_field(space: SpaceSpec, grad_q, X):
    """(dH/dp, -dH/dq) for H = |p|^2/2 + V(q) given grad V."""
    d = space.d
    return np.concatenate([X[:, d:], -grad_q(X[:, :d])], axis=1)


def lie_rank_check(system: MechanicalSystem, state: EnsembleState, eps: float = 1e-6,
                   tol: float = 1e-8) -> dict:
    """Rank of the 2dN vectors X_{f^{ik}} and [X_{f^{ik}}, X_{H_0}] at the ensemble.

    f^{ik} has gradient -e_k at q^i, zero gradient at the other points and
    zero Hessian at all of them, so X_{f^{ik}} = (0, e_k) on block i and its
    bracket with the drift field is (e_k, 0) on block i up to sign.
    """
    space, d, N = state.space, state.space.d, state.N
    if system.space != space:
        raise InputError("system and ensemble live on different spaces")
    if _position_gaps(space, state.positions) == 0:
        raise InputError("positions coincide; drift the ensemble apart first (separate)")
    gamma = state.points
    V0 = system.V0

    def drift_field(X):
        return _hamiltonian_field(space, V0.grad, X)

    vectors = []
    for i in range(N):
        for k in range(d):
            grads = np.zeros((N, d))
            grads[i, k] = -1.0
            f = interpolant(space, state.positions, grads)

            def fX(X, f=f):
                return np.concatenate([np.zeros((len(X), d)), -f.grad(X[:, :d])], axis=1)

            Xf = fX(gamma)
            Y = drift_field(gamma)
            dY_X = (drift_field(gamma + eps * Xf) - drift_field(gamma - eps * Xf)) / (2 * eps)
            dX_Y = (fX(gamma + eps * Y) - fX(gamma - eps * Y)) / (2 * eps)
            vectors.append(Xf.ravel())
            vectors.append((dY_X - dX_Y).ravel())
    M = np.array(vectors).T
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > tol * max(1.0, sv[0])))
    return {"rank": rank, "expected": 2 * d * N, "full_rank": rank == 2 * d * N,
            "singular_values": sv.tolist(), "sigma_min": float(sv[-1]), "matrix": M.tolist()}

"""Discrete rearrangement: a mesh permutation F with rho0 o F close to rho1.

Both densities are truncated to a < |rho| < A and quantized on the level grid
xi_k = -A + 2Ak/N. For every level band the cubes whose volume is more than
half inside the band are collected for each density, trimmed to a common
count and paired in lexicographic lattice order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .density import (DensityField, QuadratureSpec, evaluate_chunked, lr_distance_report,
                      pushforward, signature, signature_gap)
from .errors import HamctlError, InputError, NotEquivalentError
from .flows import Stage
from .geometry import Mesh, MeshPermutation, SpaceSpec, apply_permutation


@dataclass(frozen=True)
class RearrangeConfig:
    a: float
    A: float
    N: int
    h: float
    eta: Optional[float] = None
    r: float = 1.0
    tol: float = 0.1
    quad: QuadratureSpec = QuadratureSpec(resolution=256)
    # cube overlap is estimated on a samples_per_axis^(2d) sub-grid per cube
    samples_per_axis: int = 8
    # allowed band-volume mismatch, in units of the quantization-grid cell volume
    signature_cells: float = 4.0

    def __post_init__(self):
        if not 0 < self.a < self.A:
            raise InputError(f"need 0 < a < A, got a={self.a}, A={self.A}")
        if int(self.N) < 1:
            raise InputError("N must be at least 1")
        if not self.h > 0:
            raise InputError("h must be positive")
        if self.eta is not None and not 0 < self.eta < self.h:
            raise InputError("need 0 < eta < h")
        if not self.r >= 1:
            raise InputError("r must lie in [1, inf)")

    @property
    def margin(self) -> float:
        return self.h / 4 if self.eta is None else self.eta

    @property
    def levels(self) -> np.ndarray:
        """xi_0, ..., xi_N."""
        k = np.arange(int(self.N) + 1)
        return -self.A + 2.0 * self.A * k / int(self.N)

    def to_dict(self):
        return {"a": self.a, "A": self.A, "N": int(self.N), "h": self.h, "eta": self.margin,
                "r": self.r, "tol": self.tol, "quad": self.quad.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "RearrangeConfig":
        quad = QuadratureSpec(**data["quad"]) if "quad" in data else QuadratureSpec(resolution=256)
        try:
            return cls(float(data["a"]), float(data["A"]), int(data["N"]), float(data["h"]),
                       data.get("eta"), float(data.get("r", 1.0)), float(data.get("tol", 0.1)), quad)
        except KeyError as exc:
            raise InputError(f"rearrange config missing {exc}") from None


def truncate(rho: DensityField, a: float, A: float) -> DensityField:
    """rho * 1{a < |rho| < A}."""
    if not 0 < a < A:
        raise InputError("need 0 < a < A")
    return rho.masked(lambda v: (np.abs(v) > a) & (np.abs(v) < A), kind="truncated")


def quantize_values(v, levels) -> np.ndarray:
    """Round every nonzero value away from zero onto the level grid.

    Positive values go to the smallest level >= v, negative values to the
    largest level <= v, and zero stays zero, so a density already taking grid
    values is unchanged.
    """
    v = np.asarray(v, dtype=float)
    levels = np.asarray(levels, dtype=float)
    out = np.zeros_like(v)
    pos = v > 0
    neg = v < 0
    iu = np.clip(np.searchsorted(levels, v[pos], side="left"), 0, len(levels) - 1)
    out[pos] = levels[iu]
    il = np.clip(np.searchsorted(levels, v[neg], side="right") - 1, 0, len(levels) - 1)
    out[neg] = levels[il]
    return out


@dataclass
class Quantized:
    density: DensityField
    levels: np.ndarray
    sup_error_bound: float
    lr_error: float


def quantize(rho: DensityField, config: RearrangeConfig, measure: bool = True) -> Quantized:
    """Step density I_N on the level grid and its L^r distance to rho."""
    levels = config.levels

    def f(X):
        return quantize_values(rho(X), levels)

    I = DensityField(rho.space, f, rho.lo, rho.hi, "quantized", rho.r)
    err = lr_distance_report(I, rho, config.r, config.quad).value if measure else float("nan")
    return Quantized(I, levels, 2.0 * config.A / int(config.N), err)


def band_of(levels: np.ndarray, k: int) -> Tuple[float, float, bool]:
    """(lo, hi, positive) for band k >= 1: (xi_{k-1}, xi_k] when positive, [xi_{k-1}, xi_k) otherwise."""
    lo, hi = float(levels[k - 1]), float(levels[k])
    return lo, hi, lo >= 0


def in_band(v, lo, hi, positive) -> np.ndarray:
    if positive:
        return (v > lo) & (v <= hi) & (v != 0)
    return (v >= lo) & (v < hi) & (v != 0)


def band_contains_zero(lo, hi) -> bool:
    return lo < 0 < hi


def default_mesh(space: SpaceSpec, densities: Sequence[DensityField], h: float) -> Mesh:
    """Mesh anchored at (h, ..., h) whose box covers every density's support.

    With this anchor the cube faces sit on multiples of 2h, so meshes nest
    when h is halved.
    """
    d = space.d
    p_box = max(float(np.max(np.abs(np.concatenate([rho.lo[d:], rho.hi[d:]])))) for rho in densities)
    q_box = None
    if not space.is_torus:
        q_box = max(float(np.max(np.abs(np.concatenate([rho.lo[:d], rho.hi[:d]])))) for rho in densities)
    return Mesh(space, h, (h,) * space.dim, p_box, q_box)


def cube_sample_offsets(dim: int, k: int, radius: float) -> np.ndarray:
    """Midpoints of a k^dim sub-grid of the cube of the given sup-radius, centred at 0."""
    ax = (np.arange(k) + 0.5) / k * 2.0 - 1.0
    return np.array(list(itertools.product(ax, repeat=dim))) * radius


def cube_band_fractions(rho: DensityField, mesh: Mesh, bands, samples_per_axis: int = 8,
                        radius: Optional[float] = None) -> np.ndarray:
    """Fraction of each mesh cube (rows) lying in each band (columns)."""
    radius = mesh.h if radius is None else radius
    centers = mesh.centers()
    offs = cube_sample_offsets(mesh.space.dim, samples_per_axis, radius)
    out = np.zeros((len(centers), len(bands)))
    step = max(1, (1 << 18) // len(offs))
    for start in range(0, len(centers), step):
        block = centers[start:start + step]
        pts = (block[:, None, :] + offs[None, :, :]).reshape(-1, mesh.space.dim)
        v = evaluate_chunked(rho, pts).reshape(len(block), len(offs))
        for b, (lo, hi, positive) in enumerate(bands):
            out[start:start + step, b] = np.mean(in_band(v, lo, hi, positive), axis=1)
    return out


@dataclass
class LevelCover:
    band: Tuple[float, float]
    J: List[int]
    J_hat: List[int]


def cover_level(rho: DensityField, band: Tuple[float, float], mesh: Mesh, eta: float,
                samples_per_axis: int = 8) -> LevelCover:
    """Cubes meeting the band on their eta-shrunken core (J) and majority cubes (J_hat)."""
    lo, hi = float(band[0]), float(band[1])
    if not lo < hi:
        raise InputError("band needs lo < hi")
    if band_contains_zero(lo, hi):
        raise InputError("a band containing the value 0 has unbounded volume")
    if not 0 < eta < mesh.h:
        raise InputError("need 0 < eta < h")
    positive = lo >= 0
    full = cube_band_fractions(rho, mesh, [(lo, hi, positive)], samples_per_axis)[:, 0]
    core = cube_band_fractions(rho, mesh, [(lo, hi, positive)], samples_per_axis, mesh.h - eta)[:, 0]
    J = [int(n) for n in np.flatnonzero(core > 0)]
    J_hat = [int(n) for n in np.flatnonzero(full > 0.5)]
    return LevelCover((lo, hi), J, J_hat)


def lexicographic(mesh: Mesh, cubes) -> List[int]:
    return sorted((int(n) for n in cubes), key=mesh.lattice_of)


def pair_level(mesh: Mesh, sources: Sequence[int], targets: Sequence[int]):
    """Trim both sets to the smaller size and pair them.

    Cubes present in both sets are paired with themselves first; the rest are
    paired in lexicographic lattice order, dropping the lexicographically last
    extras. Returns (kept sources, kept targets, pairs target -> source).
    """
    common = sorted(set(sources) & set(targets), key=mesh.lattice_of)
    rest_s = lexicographic(mesh, set(sources) - set(common))
    rest_t = lexicographic(mesh, set(targets) - set(common))
    m = min(len(rest_s), len(rest_t))
    pairs = [(n, n) for n in common] + list(zip(rest_t[:m], rest_s[:m]))
    return common + rest_s[:m], common + rest_t[:m], pairs


class PermutationStage(Stage):
    """Cube-to-cube translation by a mesh permutation (not a smooth flow)."""

    kind = "mesh_permutation"
    hamiltonian = False

    def __init__(self, perm: MeshPermutation, mesh: Mesh):
        super().__init__(mesh.space)
        self.perm, self.mesh = perm, mesh

    def apply(self, X):
        return apply_permutation(self.perm, self.mesh, X, strict=False)

    def tangent(self, X):
        D = self.space.dim
        return self.apply(X), np.broadcast_to(np.eye(D), (len(X), D, D)).copy()

    def inverse(self):
        return PermutationStage(self.perm.inverse(), self.mesh)

    def to_dict(self):
        return {"kind": self.kind, "permutation": self.perm.to_dict(self.mesh)}


@dataclass
class RearrangeResult:
    permutation: MeshPermutation
    mesh: Mesh
    config: RearrangeConfig
    lr_error: float
    lr_error_estimate: float
    quantization_error: Tuple[float, float]
    per_level: List[dict] = field(default_factory=list)
    keep: List[int] = field(default_factory=list)
    signature_gap: float = 0.0

    def report(self) -> dict:
        return {
            "h": self.config.h, "N": int(self.config.N), "a": self.config.a, "A": self.config.A,
            "eta": self.config.margin, "r": self.config.r,
            "lr_error": self.lr_error, "lr_error_estimate": self.lr_error_estimate,
            "quantization_error": list(self.quantization_error),
            "signature_gap": self.signature_gap,
            "moved_cubes": len(self.permutation),
            "per_level": self.per_level,
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def check_equivalent(rho0: DensityField, rho1: DensityField, config: RearrangeConfig) -> float:
    """Compare level signatures on the quantization grid; raise if they differ."""
    lo = np.minimum(rho0.lo, rho1.lo)
    hi = np.maximum(rho0.hi, rho1.hi)
    levels = config.levels
    s0 = signature(rho0, levels, config.quad, lo, hi)
    s1 = signature(rho1, levels, config.quad, lo, hi)
    gap = signature_gap(s0, s1)
    tol = config.signature_cells * s0.cell_volume + max(s0.band_errors + s1.band_errors, default=0.0)
    if gap > tol:
        raise NotEquivalentError(
            f"level signatures differ by {gap:.4g} (tolerance {tol:.4g}); "
            "the densities are not in the same orbit closure")
    return gap


def build_permutation(rho0: DensityField, rho1: DensityField, config: RearrangeConfig,
                      mesh: Optional[Mesh] = None, check: bool = True,
                      measure: bool = True) -> RearrangeResult:
    """Mesh permutation F with rho0 o F approximately rho1.

    F sends every kept target cube of a level to a kept source cube of the
    same level, so evaluating rho0 after F reproduces rho1's level there.
    """
    if rho0.space != rho1.space:
        raise InputError("densities live on different spaces")
    space = rho0.space
    if mesh is None:
        mesh = default_mesh(space, [rho0, rho1], config.h)
    elif abs(mesh.h - config.h) > 1e-15:
        raise InputError("mesh size differs from config.h")
    t0 = truncate(rho0, config.a, config.A)
    t1 = truncate(rho1, config.a, config.A)
    gap = check_equivalent(t0, t1, config) if check else 0.0
    levels = config.levels
    bands = []
    for k in range(1, int(config.N) + 1):
        lo, hi, positive = band_of(levels, k)
        if band_contains_zero(lo, hi):
            continue
        bands.append((k, lo, hi, positive))
    spec = [(lo, hi, pos) for _, lo, hi, pos in bands]
    frac0 = cube_band_fractions(t0, mesh, spec, config.samples_per_axis)
    frac1 = cube_band_fractions(t1, mesh, spec, config.samples_per_axis)
    pairs_all = []
    used_src, used_tgt = set(), set()
    per_level = []
    vol_cube = mesh.cube_volume
    for b, (k, lo, hi, _) in enumerate(bands):
        J0 = [int(n) for n in np.flatnonzero(frac0[:, b] > 0.5)]
        J1 = [int(n) for n in np.flatnonzero(frac1[:, b] > 0.5)]
        src, tgt, pairs = pair_level(mesh, J0, J1)
        if used_src & set(src) or used_tgt & set(tgt):
            raise HamctlError(f"level {k}: trimmed cube sets overlap another level")
        used_src |= set(src)
        used_tgt |= set(tgt)
        pairs_all.extend(pairs)
        v0 = float(np.sum(frac0[:, b])) * vol_cube
        v1 = float(np.sum(frac1[:, b])) * vol_cube
        per_level.append({
            "k": k, "xi": float(levels[k]), "band": [lo, hi],
            "J_hat0": len(J0), "J_hat1": len(J1), "J_tilde": len(src),
            "band_volume0": v0, "band_volume1": v1,
            "cover_volume": len(src) * vol_cube,
        })
    perm = MeshPermutation.from_partial((t, s) for t, s in pairs_all if t != s)
    massive = np.flatnonzero((np.max(frac0, axis=1, initial=0) > 0) | (np.max(frac1, axis=1, initial=0) > 0))
    keep = sorted(int(n) for n in massive)
    result = RearrangeResult(perm, mesh, config, float("nan"), float("nan"), (float("nan"),) * 2,
                             per_level, keep, gap)
    if measure:
        moved = pushforward(rho0, PermutationStage(perm, mesh), *_mesh_box(mesh, rho0, rho1))
        rep = lr_distance_report(moved, rho1, config.r, config.quad)
        result.lr_error, result.lr_error_estimate = rep.value, rep.error
        q0 = quantize(t0, config).lr_error
        q1 = quantize(t1, config).lr_error
        result.quantization_error = (q0, q1)
    return result


def mesh_extent(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Closed box covered by the mesh cubes."""
    ranges = np.asarray(mesh.ranges, dtype=float)
    anchor = np.asarray(mesh.anchor)
    return anchor + 2 * mesh.h * ranges[:, 0] - mesh.h, anchor + 2 * mesh.h * ranges[:, 1] + mesh.h


def _mesh_box(mesh: Mesh, *densities):
    mlo, mhi = mesh_extent(mesh)
    lo = np.min([rho.lo for rho in densities] + [mlo], axis=0)
    hi = np.max([rho.hi for rho in densities] + [mhi], axis=0)
    return lo, hi


def transported(rho0: DensityField, result: RearrangeResult) -> DensityField:
    """rho0 o F on the box of rho0."""
    return pushforward(rho0, PermutationStage(result.permutation, result.mesh), rho0.lo, rho0.hi)


def demo_pair(r: float = 1.0) -> Tuple[DensityField, DensityField]:
    """Two signature-equivalent two-level densities on T*R: the levels trade places.

    rho0 is 2 on the left block and 1 on the right one, rho1 the reverse.
    """
    space = SpaceSpec("euclidean", 1)
    left = ([-1.5, -0.5], [-0.5, 0.5])
    right = ([0.5, -0.5], [1.5, 0.5])
    rho0 = DensityField.from_boxes(space, [(*left, 2.0), (*right, 1.0)], r)
    rho1 = DensityField.from_boxes(space, [(*left, 1.0), (*right, 2.0)], r)
    return rho0.with_box([-2.0, -1.0], [2.0, 1.0]), rho1.with_box([-2.0, -1.0], [2.0, 1.0])


DEMO_CONFIG = dict(a=0.5, A=2.5, N=5)

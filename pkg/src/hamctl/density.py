"""Phase-space densities, Liouville transport, L^r distances and level-set volumes.

All quadrature is a deterministic tensor midpoint rule over a box. Level-set
volumes refine cells whose class differs from a neighbour's, which is where
the band boundary passes.
"""

from __future__ import annotations

import csv
import functools
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InputError
from .geometry import TWO_PI, Mesh, SpaceSpec, sup_distance
from .poisson import HamExpr

CHUNK = 1 << 18


@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor midpoint rule with ``resolution`` cells per axis.

    ``levels`` boundary bisections are applied when counting level sets.
    ``mode="monte_carlo"`` swaps the grid for ``samples`` seeded uniform draws.
    """

    resolution: int = 128
    levels: int = 2
    mode: str = "midpoint"
    samples: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 2:
            raise InputError("quadrature resolution must be at least 2")
        if self.levels < 0:
            raise InputError("refinement levels must be nonnegative")
        if self.mode not in ("midpoint", "monte_carlo"):
            raise InputError(f"unknown quadrature mode {self.mode!r}")

    def to_dict(self):
        return {"resolution": self.resolution, "levels": self.levels, "mode": self.mode,
                "samples": self.samples, "seed": self.seed}


def full_box(space: SpaceSpec, lo, hi) -> Tuple[np.ndarray, np.ndarray]:
    """Normalize a box; on the torus the q-range is always [0, 2 pi]."""
    lo = np.asarray(lo, dtype=float).reshape(space.dim).copy()
    hi = np.asarray(hi, dtype=float).reshape(space.dim).copy()
    if space.is_torus:
        lo[: space.d] = 0.0
        hi[: space.d] = TWO_PI
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise InputError("density support boxes must be bounded")
    if np.any(hi <= lo):
        raise InputError("support box must have hi > lo on every axis")
    return lo, hi


def box_volume(lo, hi) -> float:
    return float(np.prod(np.asarray(hi) - np.asarray(lo)))


class DensityField:
    """A bounded, compactly supported density on phase space.

    ``func`` maps an (n, 2d) stack to (n,) values; it is only consulted
    inside the support box and the field is zero outside it. ``kind`` records
    the representation (symbolic, callable, grid, cubes, transported).
    """

    def __init__(self, space: SpaceSpec, func: Callable, lo, hi, kind: str = "callable",
                 r: float = 1.0, meta: Optional[dict] = None):
        self.space = space
        self.func = func
        self.lo, self.hi = full_box(space, lo, hi)
        self.kind = kind
        if not r >= 1:
            raise InputError("the exponent r must lie in [1, inf)")
        self.r = float(r)
        self.meta = dict(meta or {})

    # -- construction ---------------------------------------------------------------
    @classmethod
    def from_expr(cls, expr, space: SpaceSpec, lo, hi, r=1.0):
        if isinstance(expr, str):
            expr = HamExpr.parse(expr, space.d)
        return cls(space, expr.evaluate, lo, hi, "symbolic", r, {"expr": str(expr)})

    @classmethod
    def from_callable(cls, f, space: SpaceSpec, lo, hi, r=1.0):
        return cls(space, f, lo, hi, "callable", r)

    @classmethod
    def from_cubes(cls, space: SpaceSpec, cubes: Sequence[Tuple[Sequence[float], float, float]],
                   r=1.0):
        """Weighted union of open sup-norm cubes: [(center, radius, weight), ...]."""
        cubes = [(np.asarray(c, dtype=float).reshape(space.dim), float(rad), float(w))
                 for c, rad, w in cubes]
        if not cubes:
            raise InputError("need at least one cube")

        def f(X):
            out = np.zeros(len(X))
            for c, rad, w in cubes:
                out += w * (sup_distance(X, c, space) < rad)
            return out

        lo = np.min([c - rad for c, rad, _ in cubes], axis=0)
        hi = np.max([c + rad for c, rad, _ in cubes], axis=0)
        meta = {"cubes": [[c.tolist(), rad, w] for c, rad, w in cubes]}
        return cls(space, f, lo, hi, "cubes", r, meta)

    @classmethod
    def from_grid(cls, space: SpaceSpec, values, lo, hi, r=1.0):
        """Piecewise constant on the tensor grid of ``values.shape`` cells over [lo, hi]."""
        values = np.asarray(values, dtype=float)
        if values.ndim != space.dim:
            raise InputError(f"grid must have {space.dim} axes")
        lo, hi = full_box(space, lo, hi)
        shape = np.array(values.shape)
        width = (hi - lo) / shape

        def f(X):
            k = np.floor((X - lo) / width).astype(np.int64)
            k = np.clip(k, 0, shape - 1)
            return values[tuple(k.T)]

        return cls(space, f, lo, hi, "grid", r, {"grid": values})

    @classmethod
    def gaussian(cls, space: SpaceSpec, center, width: float, radius: float, r=1.0):
        """exp(-|x - c|^2 / (2 width^2)) truncated to the sup-ball of ``radius``."""
        c = np.asarray(center, dtype=float).reshape(space.dim)

        def f(X):
            dx = space.difference(X, c)
            return np.exp(-0.5 * np.sum(dx * dx, axis=1) / width**2)

        return cls(space, f, c - radius, c + radius, "callable", r)

    @classmethod
    def from_boxes(cls, space: SpaceSpec, boxes: Sequence[Tuple[Sequence[float], Sequence[float], float]],
                   r=1.0):
        """Weighted union of open axis-aligned boxes: [(lo, hi, weight), ...]."""
        boxes = [(np.asarray(a, dtype=float).reshape(space.dim), np.asarray(b, dtype=float).reshape(space.dim),
                  float(w)) for a, b, w in boxes]
        if not boxes:
            raise InputError("need at least one box")

        def f(X):
            out = np.zeros(len(X))
            for a, b, w in boxes:
                out += w * np.all((X > a) & (X < b), axis=1)
            return out

        lo = np.min([a for a, _, _ in boxes], axis=0)
        hi = np.max([b for _, b, _ in boxes], axis=0)
        meta = {"boxes": [[a.tolist(), b.tolist(), w] for a, b, w in boxes]}
        return cls(space, f, lo, hi, "boxes", r, meta)

    # -- evaluation -----------------------------------------------------------------
    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = self.space.wrap(np.atleast_2d(X))
        inside = np.all((X >= self.lo) & (X <= self.hi), axis=1)
        out = np.zeros(len(X))
        if np.any(inside):
            out[inside] = np.asarray(self.func(X[inside]), dtype=float)
        return out[0] if single else out

    def _combine(self, other, op, kind):
        if other.space != self.space:
            raise InputError("densities live on different spaces")
        lo = np.minimum(self.lo, other.lo)
        hi = np.maximum(self.hi, other.hi)
        return DensityField(self.space, lambda X: op(self(X), other(X)), lo, hi, kind, self.r)

    def __add__(self, other):
        return self._combine(other, np.add, "sum")

    def __sub__(self, other):
        return self._combine(other, np.subtract, "difference")

    def scale(self, c: float) -> "DensityField":
        return DensityField(self.space, lambda X: c * self(X), self.lo, self.hi, "scaled", self.r)

    def __mul__(self, c):
        return self.scale(float(c))

    __rmul__ = __mul__

    def masked(self, keep: Callable[[np.ndarray], np.ndarray], kind="masked") -> "DensityField":
        """Same density with values v replaced by 0 where keep(v) is False."""
        def f(X):
            v = self(X)
            return np.where(keep(v), v, 0.0)

        return DensityField(self.space, f, self.lo, self.hi, kind, self.r, self.meta)

    def with_box(self, lo, hi) -> "DensityField":
        return DensityField(self.space, self.func, lo, hi, self.kind, self.r, self.meta)

    @property
    def box_volume(self) -> float:
        return box_volume(self.lo, self.hi)

    # -- grid IO --------------------------------------------------------------------
    def sample_grid(self, resolution) -> np.ndarray:
        pts, shape = grid_midpoints(self.lo, self.hi, resolution)
        return evaluate_chunked(self, pts).reshape(shape)

    def to_grid_files(self, resolution) -> Tuple[str, str]:
        """(CSV text of 'cell,value' rows, JSON header) for a sampled grid."""
        values = self.sample_grid(resolution)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "value"])
        for i, v in enumerate(values.ravel()):
            w.writerow([i, f"{v:.17g}"])
        header = {"kind": self.space.kind, "d": self.space.d, "box": [self.lo.tolist(), self.hi.tolist()],
                  "resolution": list(values.shape), "r": self.r}
        return buf.getvalue(), json.dumps(header, indent=2, sort_keys=True)

    @classmethod
    def from_grid_files(cls, csv_text: str, header_text: str) -> "DensityField":
        header = json.loads(header_text)
        try:
            space = SpaceSpec(header["kind"], int(header["d"]))
            shape = tuple(int(n) for n in header["resolution"])
            lo, hi = header["box"]
        except (KeyError, ValueError) as exc:
            raise InputError(f"bad grid header: {exc}") from None
        values = np.zeros(int(np.prod(shape)))
        rows = list(csv.reader(io.StringIO(csv_text)))
        for row in rows[1:] if rows and rows[0][0] == "cell" else rows:
            if row:
                values[int(row[0])] = float(row[1])
        return cls.from_grid(space, values.reshape(shape), lo, hi, header.get("r", 1.0))


def density_from_config(data: dict, space: Optional[SpaceSpec] = None) -> DensityField:
    """Build a density from a JSON record.

    kinds: expr {expr, lo, hi}, boxes {boxes: [[lo, hi, w], ...]},
    cubes {cubes: [[center, radius, w], ...]}, gaussian {center, width, radius}.
    """
    if not isinstance(data, dict):
        raise InputError("a density config must be a JSON object")
    if space is None:
        if "space" not in data:
            raise InputError("density config needs a 'space' entry")
        space = SpaceSpec.from_dict(data["space"])
    r = float(data.get("r", 1.0))
    kind = data.get("kind")
    try:
        if kind == "expr":
            return DensityField.from_expr(data["expr"], space, data["lo"], data["hi"], r)
        if kind == "boxes":
            return DensityField.from_boxes(space, [tuple(b) for b in data["boxes"]], r)
        if kind == "cubes":
            return DensityField.from_cubes(space, [tuple(c) for c in data["cubes"]], r)
        if kind == "gaussian":
            return DensityField.gaussian(space, data["center"], float(data["width"]), float(data["radius"]), r)
    except KeyError as exc:
        raise InputError(f"density config of kind {kind!r} is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad density config: {exc}") from None
    raise InputError(f"unknown density kind {kind!r}")


def grid_midpoints(lo, hi, resolution):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), lo.shape)
    axes = [lo[i] + (hi[i] - lo[i]) * (np.arange(res[i]) + 0.5) / res[i] for i in range(lo.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), tuple(int(n) for n in res)


def evaluate_chunked(rho, pts: np.ndarray) -> np.ndarray:
    out = np.empty(len(pts))
    for start in range(0, len(pts), CHUNK):
        out[start:start + CHUNK] = rho(pts[start:start + CHUNK])
    return out


# -- transport ----------------------------------------------------------------------


def _transport_box(flow, space: SpaceSpec, lo, hi, budget: int = 1 << 15, pad: float = 0.05):
    """Bounding box of the pre-image of [lo, hi] under ``flow``, padded.

    The pre-image is the image of the box under the inverse flow; its bounding
    box is attained on the image of the boundary, which is sampled on a grid of
    every face with about ``budget`` points in total.
    """
    inv = flow.inverse()
    D = space.dim
    per_face = budget // (2 * D)
    samples = max(3, int(per_face ** (1.0 / max(D - 1, 1))))
    axes = [np.linspace(lo[i], hi[i], samples) for i in range(D)]
    faces = []
    for i in range(D):
        for val in (lo[i], hi[i]):
            grid_axes = [axes[j] if j != i else np.array([val]) for j in range(D)]
            mesh = np.meshgrid(*grid_axes, indexing="ij")
            faces.append(np.stack([m.ravel() for m in mesh], axis=1))
    pts = np.concatenate(faces)
    img = inv(pts)
    if space.is_torus:
        # q is periodic; the caller resets the q-range anyway
        img[:, : space.d] = np.clip(img[:, : space.d], 0, TWO_PI)
    new_lo, new_hi = img.min(axis=0), img.max(axis=0)
    span = np.maximum(new_hi - new_lo, 1e-12)
    return new_lo - pad * span, new_hi + pad * span


def pushforward(rho0: DensityField, flow, lo=None, hi=None) -> DensityField:
    """The transported density rho0 o flow.

    Evaluating at x applies the forward flow to x and then rho0. The support
    box is the padded pre-image of rho0's box unless one is given.
    """
    from .flows import as_flow

    flow = as_flow(rho0.space, flow)
    if lo is None or hi is None:
        lo, hi = _transport_box(flow, rho0.space, rho0.lo, rho0.hi)

    def f(X):
        return rho0(flow(X))

    return DensityField(rho0.space, f, lo, hi, "transported", rho0.r)


# -- L^r norms ----------------------------------------------------------------------


@dataclass
class QuadratureResult:
    value: float
    error: float
    resolution: int

    def __float__(self):
        return float(self.value)


def _common_box(densities, lo=None, hi=None):
    space = densities[0].space
    for rho in densities:
        if rho.space != space:
            raise InputError("densities live on different spaces")
    if lo is None or hi is None:
        lo = np.min([rho.lo for rho in densities], axis=0)
        hi = np.max([rho.hi for rho in densities], axis=0)
    return full_box(space, lo, hi)


@functools.lru_cache(maxsize=None)
def sub_offsets(D: int, levels: int) -> np.ndarray:
    """n = 2^(levels*D) offsets in (-1/2, 1/2)^D for sub-sampling one cell.

    A rank-1 (Korobov) lattice i*(1, a, a^2, ...)/n with odd a: every axis
    projection hits all n strata, so a face parallel to an axis is resolved
    to 1/n of a cell instead of 1/2^levels as with a tensor sub-grid. The
    multiplier maximizes the smallest wrapped distance between points.
    """
    n = 2 ** (levels * D)
    i = np.arange(n)
    if D == 1 or n <= 2:
        pts = ((i[:, None] + 0.5) / n) * np.ones((1, D))
        return pts - 0.5
    best, best_a = -1.0, 1
    for a in range(1, n, 2):
        z = np.array([pow(a, k, n) for k in range(D)])
        pts = (np.outer(i[1:], z) % n) / n
        pts = np.minimum(pts, 1 - pts)
        dist = float(np.min(np.sum(pts * pts, axis=1)))
        if dist > best:
            best, best_a = dist, a
    z = np.array([pow(best_a, k, n) for k in range(D)])
    return ((np.outer(i, z) % n) + 0.5) / n - 0.5


def _jump_mask(grid: np.ndarray) -> np.ndarray:
    """Cells whose value differs from a face neighbour, grown by a one-cell halo.

    The halo catches features thinner than a cell whose midpoint misses them
    but whose neighbours' midpoints do not.
    """
    D = grid.ndim
    jump = np.zeros(grid.shape, dtype=bool)
    for ax in range(D):
        diff = np.diff(grid, axis=ax) != 0
        lead = [slice(None)] * D
        trail = [slice(None)] * D
        lead[ax] = slice(0, -1)
        trail[ax] = slice(1, None)
        jump[tuple(lead)] |= diff
        jump[tuple(trail)] |= diff
    return ndimage.binary_dilation(jump, structure=np.ones((3,) * D, dtype=bool))


def _refined_cells(g, pts, mid, shape, width, levels: int, seed_mask: np.ndarray):
    """Sub-sample flagged cells, following features that leave the flagged set.

    ``g`` maps an (n, D) stack to per-point values (or class labels) and
    ``mid`` holds its values at the cell midpoints ``pts``. Every
    flagged cell is sampled on the ``sub_offsets`` lattice; a cell whose
    samples disagree with each other or with its midpoint flags its 3^D
    neighbours, so thin filaments that no midpoint hits are tracked from the
    place where they are first seen. Yields (cell indices, (n, m) samples).
    """
    D = len(shape)
    offs = sub_offsets(D, levels)
    done = np.zeros(int(np.prod(shape)), dtype=bool)
    batch = np.flatnonzero(seed_mask.ravel())
    nbrs = np.array(list(itertools.product((-1, 0, 1), repeat=D)))
    dims = np.asarray(shape)
    step = max(1, CHUNK // len(offs))
    while batch.size:
        done[batch] = True
        mixed = []
        for start in range(0, batch.size, step):
            idx = batch[start:start + step]
            block = pts[idx]
            sp = (block[:, None, :] + offs[None, :, :] * width).reshape(-1, D)
            sub = evaluate_chunked(g, sp).reshape(len(idx), len(offs))
            yield idx, sub
            mixed.append(idx[np.any(sub != sub[:, :1], axis=1) | (sub[:, 0] != mid[idx])])
        mixed = np.concatenate(mixed) if mixed else np.empty(0, dtype=int)
        if not mixed.size:
            break
        k = np.stack(np.unravel_index(mixed, shape), axis=1)
        cand = (k[:, None, :] + nbrs[None, :, :]).reshape(-1, D)
        ok = np.all((cand >= 0) & (cand < dims), axis=1)
        flat = np.unique(np.ravel_multi_index(tuple(cand[ok].T), shape))
        batch = flat[~done[flat]]


def _midpoint_power(f, lo, hi, resolution, r, levels: int = 0):
    """Midpoint rule for int |f|^r; cells near a jump are sub-sampled (see _refined_cells)."""
    pts, shape = grid_midpoints(lo, hi, resolution)
    cell = box_volume(lo, hi) / len(pts)
    vals = np.abs(evaluate_chunked(f, pts)) ** r
    if levels <= 0:
        return float(np.sum(vals)) * cell
    width = (hi - lo) / np.asarray(shape)
    flat = vals.copy()
    for idx, sub in _refined_cells(lambda X: np.abs(f(X)) ** r, pts, vals, shape, width, levels,
                                   _jump_mask(vals.reshape(shape))):
        flat[idx] = np.mean(sub, axis=1)
    return float(np.sum(flat)) * cell


def lr_distance_report(rho_a: DensityField, rho_b: DensityField, r: float = 1.0,
                       quad: QuadratureSpec = QuadratureSpec(), lo=None, hi=None) -> QuadratureResult:
    """(int |rho_a - rho_b|^r)^(1/r) with a resolution-halving error estimate."""
    if not r >= 1:
        raise InputError("the exponent r must lie in [1, inf)")
    lo, hi = _common_box([rho_a, rho_b], lo, hi)

    def diff(X):
        return rho_a(X) - rho_b(X)

    if quad.mode == "monte_carlo":
        rng = np.random.default_rng(quad.seed)
        X = lo + (hi - lo) * rng.random((quad.samples, lo.size))
        v = np.abs(evaluate_chunked(diff, X)) ** r
        vol = box_volume(lo, hi)
        mean = float(np.mean(v)) * vol
        err = 3.0 * float(np.std(v)) * vol / np.sqrt(quad.samples)
        value = mean ** (1 / r)
        upper = (mean + err) ** (1 / r)
        return QuadratureResult(value, upper - value, quad.samples)
    n = quad.resolution
    fine = _midpoint_power(diff, lo, hi, n, r, quad.levels) ** (1 / r)
    coarse = _midpoint_power(diff, lo, hi, max(n // 2, 1), r, quad.levels) ** (1 / r)
    return QuadratureResult(fine, abs(fine - coarse), n)


def lr_distance(rho_a, rho_b, r: float = 1.0, quad: QuadratureSpec = QuadratureSpec(),
                lo=None, hi=None) -> float:
    return lr_distance_report(rho_a, rho_b, r, quad, lo, hi).value


def lr_norm(rho: DensityField, r: float = 1.0, quad: QuadratureSpec = QuadratureSpec(),
            lo=None, hi=None) -> float:
    lo, hi = _common_box([rho], lo, hi)
    return _midpoint_power(rho, lo, hi, quad.resolution, r, quad.levels) ** (1 / r)


# -- level sets ---------------------------------------------------------------------


def _classify(values: np.ndarray, levels: np.ndarray, atol: float) -> np.ndarray:
    """Class labels: 2i for value == level i, 2i+1 for level i < value < level i+1.

    Values below the first level get -1 and above the last get 2L-1.
    """
    L = len(levels)
    idx = np.searchsorted(levels, values, side="left")  # levels[idx-1] < v <= levels[idx]
    lab = np.full(values.shape, -1, dtype=np.int32)
    inner = (idx > 0) & (idx < L)
    lab[inner] = 2 * idx[inner] - 1
    lab[idx >= L] = 2 * L - 1
    # exact hits on a level (within atol)
    near = np.argmin(np.abs(values[:, None] - levels[None, :]), axis=1)
    hit = np.abs(values - levels[near]) <= atol * np.maximum(1.0, np.abs(levels[near]))
    lab[hit] = 2 * near[hit]
    return lab


def class_volumes(rho: DensityField, levels, quad: QuadratureSpec = QuadratureSpec(),
                  lo=None, hi=None, atol: float = 1e-12):
    """Volumes of every class produced by ``_classify`` inside the box.

    Returns ``(labels, volumes, errors)``. The error of a class is half of the
    refined volume of the boundary cells that touch it.
    """
    levels = np.asarray(sorted(levels), dtype=float)
    lo, hi = _common_box([rho], lo, hi)
    D = lo.size
    vol = box_volume(lo, hi)
    labels_all = np.arange(-1, 2 * len(levels))
    volumes = {int(c): 0.0 for c in labels_all}
    errors = {int(c): 0.0 for c in labels_all}
    if quad.mode == "monte_carlo":
        rng = np.random.default_rng(quad.seed)
        X = lo + (hi - lo) * rng.random((quad.samples, D))
        lab = _classify(evaluate_chunked(rho, X), levels, atol)
        for c in labels_all:
            frac = float(np.mean(lab == c))
            volumes[int(c)] = frac * vol
            errors[int(c)] = 3.0 * np.sqrt(frac * (1 - frac) / quad.samples) * vol
        return labels_all, volumes, errors

    res = quad.resolution
    pts, shape = grid_midpoints(lo, hi, res)
    lab = _classify(evaluate_chunked(rho, pts), levels, atol).reshape(shape)
    cell = vol / lab.size
    width = (hi - lo) / np.asarray(shape)
    unit_err = 0.5 * cell / 2 ** quad.levels
    flat = lab.ravel()
    refined = np.zeros(flat.size, dtype=bool)

    def classes(X):
        return _classify(evaluate_chunked(rho, X), levels, atol)

    sub = cell / len(sub_offsets(D, quad.levels))
    for idx, sl in _refined_cells(classes, pts, flat, shape, width, quad.levels, _jump_mask(lab)):
        refined[idx] = True
        for c, n in zip(*np.unique(sl, return_counts=True)):
            volumes[int(c)] += n * sub
        for c in labels_all:
            touched = np.any(sl == c, axis=1) | (flat[idx] == c)
            errors[int(c)] += unit_err * int(np.sum(touched))
    for c, n in zip(*np.unique(flat[~refined], return_counts=True)):
        volumes[int(c)] += n * cell
    return labels_all, volumes, errors


def level_set_volume_report(rho: DensityField, mu: float, nu: float,
                            quad: QuadratureSpec = QuadratureSpec(), lo=None, hi=None):
    """Vol({mu < rho < nu}) inside the support box, with its error bound."""
    if not mu < nu:
        raise InputError("need mu < nu")
    _, vols, errs = class_volumes(rho, [mu, nu], quad, lo, hi)
    return QuadratureResult(vols[1], errs[1], quad.resolution)


def level_set_volume(rho, mu, nu, quad: QuadratureSpec = QuadratureSpec(), lo=None, hi=None) -> float:
    return level_set_volume_report(rho, mu, nu, quad, lo, hi).value


# -- signatures ---------------------------------------------------------------------


@dataclass
class LevelSignature:
    """Band volumes Vol(mu_i < rho < mu_{i+1}) and level masses Vol(rho = mu_i).

    Bands whose closure contains 0 and the mass at level 0 are not
    invariants (they depend on the box), so they are marked and skipped when
    comparing.
    """

    levels: List[float]
    bands: List[float]
    band_errors: List[float]
    atoms: List[float]
    cell_volume: float
    skip_bands: List[bool] = field(default_factory=list)
    skip_atoms: List[bool] = field(default_factory=list)

    def band(self, i: int, j: int) -> float:
        """Vol(mu_i < rho < mu_j) by additivity."""
        if not 0 <= i < j < len(self.levels):
            raise InputError("band indices out of range")
        return float(sum(self.bands[i:j]) + sum(self.atoms[i + 1:j]))

    def to_dict(self):
        return {"levels": self.levels, "bands": self.bands, "band_errors": self.band_errors,
                "atoms": self.atoms, "cell_volume": self.cell_volume,
                "skip_bands": self.skip_bands, "skip_atoms": self.skip_atoms}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def signature(rho: DensityField, levels, quad: QuadratureSpec = QuadratureSpec(),
              lo=None, hi=None) -> LevelSignature:
    levels = [float(x) for x in sorted(levels)]
    if len(levels) < 2:
        raise InputError("a level grid needs at least two levels")
    if len(set(levels)) != len(levels):
        raise InputError("levels must be distinct")
    box_lo, box_hi = _common_box([rho], lo, hi)
    _, vols, errs = class_volumes(rho, levels, quad, box_lo, box_hi)
    L = len(levels)
    bands = [vols[2 * i + 1] for i in range(L - 1)]
    berr = [errs[2 * i + 1] for i in range(L - 1)]
    atoms = [vols[2 * i] for i in range(L)]
    skip_bands = [levels[i] <= 0 <= levels[i + 1] for i in range(L - 1)]
    skip_atoms = [lv == 0 for lv in levels]
    cell = box_volume(box_lo, box_hi) / quad.resolution ** box_lo.size
    return LevelSignature(levels, bands, berr, atoms, cell, skip_bands, skip_atoms)


def signature_gap(a: LevelSignature, b: LevelSignature) -> float:
    """Largest disagreement over comparable bands and level masses."""
    if len(a.levels) != len(b.levels) or not np.allclose(a.levels, b.levels, rtol=0, atol=0):
        raise InputError("signatures use different level grids")
    gaps = [abs(x - y) for x, y, s in zip(a.bands, b.bands, a.skip_bands) if not s]
    gaps += [abs(x - y) for x, y, s in zip(a.atoms, b.atoms, a.skip_atoms) if not s]
    return float(max(gaps, default=0.0))


def signatures_match(a: LevelSignature, b: LevelSignature, tol: float) -> bool:
    return signature_gap(a, b) <= tol


def indicator_of_mesh_cubes(mesh: Mesh, weights: dict, r: float = 1.0) -> DensityField:
    """Density equal to weights[n] on the open mesh cube n."""
    cubes = [(mesh.center(n), mesh.h, w) for n, w in sorted(weights.items()) if w != 0]
    rho = DensityField.from_cubes(mesh.space, cubes, r)
    rho.meta["mesh"] = mesh.to_dict()
    return rho

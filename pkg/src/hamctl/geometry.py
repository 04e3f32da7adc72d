"""Phase-space points, sup-norm cubes, anchored meshes and mesh permutations.

Points are stored as flat arrays ``x = (q_1..q_d, p_1..p_d)``. On the torus
the configuration coordinates live in ``[0, 2*pi)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

from .errors import BoundaryError, InputError, RangeError

TWO_PI = 2.0 * np.pi

EUCLIDEAN = "euclidean"
TORUS = "torus"


@dataclass(frozen=True)
class SpaceSpec:
    """Cotangent bundle of R^d or of the flat torus T^d = R^d / 2*pi*Z^d."""

    kind: str
    d: int

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, TORUS):
            raise InputError(f"unknown space kind {self.kind!r}")
        if int(self.d) != self.d or self.d < 1:
            raise InputError(f"d must be a positive integer, got {self.d}")

    @property
    def is_torus(self) -> bool:
        return self.kind == TORUS

    @property
    def dim(self) -> int:
        """Phase-space dimension 2d."""
        return 2 * self.d

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Canonical representative of a point (or an (n, 2d) stack of points)."""
        x = np.array(x, dtype=float, copy=True)
        if self.is_torus:
            x[..., : self.d] = wrap_angle(x[..., : self.d])
        return x

    def difference(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """x - y, using the shortest wrapped representative for torus q-coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1] != self.dim or y.shape[-1] != self.dim:
            raise InputError(
                f"expected points of length {self.dim}, got {x.shape[-1]} and {y.shape[-1]}"
            )
        diff = x - y
        if self.is_torus:
            diff = np.array(diff, copy=True)
            diff[..., : self.d] = centered_angle(diff[..., : self.d])
        return diff

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d}

    @classmethod
    def from_dict(cls, data: dict) -> "SpaceSpec":
        try:
            return cls(str(data["kind"]), int(data["d"]))
        except KeyError as exc:
            raise InputError(f"space description missing field {exc}") from None


def wrap_angle(q):
    """Map angles to [0, 2*pi)."""
    out = np.mod(q, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    return np.where(out >= TWO_PI, 0.0, out)


def centered_angle(q):
    """Map angle differences to [-pi, pi)."""
    return np.mod(np.asarray(q) + np.pi, TWO_PI) - np.pi


@dataclass(frozen=True)
class PhasePoint:
    q: Tuple[float, ...]
    p: Tuple[float, ...]

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "PhasePoint":
        x = np.asarray(x, dtype=float)
        d = x.size // 2
        return cls(tuple(x[:d]), tuple(x[d:]))

    def as_array(self) -> np.ndarray:
        return np.array(self.q + self.p, dtype=float)


def as_point(x, space: SpaceSpec) -> np.ndarray:
    if isinstance(x, PhasePoint):
        x = x.as_array()
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != space.dim:
        raise InputError(f"point has length {x.shape[-1]}, space needs {space.dim}")
    return x


def sup_distance(x, y, space: SpaceSpec):
    """Sup-norm distance; torus q-differences use the shortest representative.

    Works on single points or on broadcastable stacks of points.
    """
    x = as_point(x, space)
    y = as_point(y, space)
    return np.max(np.abs(space.difference(x, y)), axis=-1)


@dataclass(frozen=True)
class Cube:
    """Open sup-norm cube ``{y : |y - center| < radius}``."""

    center: np.ndarray
    radius: float

    def contains(self, x, space: SpaceSpec) -> bool:
        return bool(sup_distance(x, self.center, space) < self.radius)

    @property
    def volume(self) -> float:
        return float((2.0 * self.radius) ** len(self.center))


@dataclass(frozen=True)
class Mesh:
    """Finite anchored lattice of cubes of radius ``h``.

    Centers are ``anchor + 2h*k`` for integer vectors ``k``. Momenta are
    truncated to ``[-p_box, p_box]``; on R^d the configuration is truncated to
    ``[-q_box, q_box]`` (``q_box`` defaults to ``p_box``). On the torus every
    q-lattice wraps and ``2h`` must divide ``2*pi``.
    """

    space: SpaceSpec
    h: float
    anchor: Tuple[float, ...] = None
    p_box: float = 1.0
    q_box: float = None
    _ranges: Tuple[Tuple[int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.h > 0:
            raise InputError(f"mesh size h must be positive, got {self.h}")
        if not self.p_box > 0:
            raise InputError("p_box must be positive")
        d = self.space.d
        anchor = np.zeros(2 * d) if self.anchor is None else np.asarray(self.anchor, float)
        if anchor.shape != (2 * d,):
            raise InputError(f"anchor must have length {2 * d}")
        if self.space.is_torus:
            cells = np.pi / self.h
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise InputError(f"on the torus 2h must divide 2*pi; h={self.h} does not")
            anchor[:d] = wrap_angle(anchor[:d])
        object.__setattr__(self, "anchor", tuple(float(a) for a in anchor))
        if self.q_box is None:
            object.__setattr__(self, "q_box", float(self.p_box))
        ranges = []
        for i in range(2 * d):
            if i < d and self.space.is_torus:
                ranges.append((0, int(round(np.pi / self.h)) - 1))
            else:
                box = self.q_box if i < d else self.p_box
                lo = int(np.ceil((-box - self.h - anchor[i]) / (2 * self.h) + 1e-12))
                hi = int(np.floor((box + self.h - anchor[i]) / (2 * self.h) - 1e-12))
                ranges.append((lo, hi))
        object.__setattr__(self, "_ranges", tuple(ranges))

    # -- lattice bookkeeping -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in self._ranges)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ranges(self):
        return self._ranges

    def lattice_of(self, index: int) -> Tuple[int, ...]:
        if not 0 <= index < self.size:
            raise RangeError(f"cube index {index} outside mesh of {self.size} cubes")
        local = np.unravel_index(int(index), self.shape)
        return tuple(int(k + lo) for k, (lo, _) in zip(local, self._ranges))

    def index_of_lattice(self, k: Sequence[int]) -> int:
        local = []
        for i, (ki, (lo, hi)) in enumerate(zip(k, self._ranges)):
            if i < self.space.d and self.space.is_torus:
                ki = int(ki) % (hi + 1)
            if not lo <= ki <= hi:
                raise RangeError(f"lattice coordinate {tuple(k)} outside the mesh")
            local.append(ki - lo)
        return int(np.ravel_multi_index(local, self.shape))

    def center(self, index: int) -> np.ndarray:
        k = np.asarray(self.lattice_of(index), dtype=float)
        return self.space.wrap(np.asarray(self.anchor) + 2.0 * self.h * k)

    def centers(self) -> np.ndarray:
        """All centers, ordered by flat index."""
        axes = [np.arange(lo, hi + 1) for lo, hi in self._ranges]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        return self.space.wrap(np.asarray(self.anchor) + 2.0 * self.h * grid)

    def cube(self, index: int) -> Cube:
        return Cube(self.center(index), self.h)

    def indices(self) -> Iterator[int]:
        return iter(range(self.size))

    @property
    def cube_volume(self) -> float:
        return (2.0 * self.h) ** self.space.dim

    # -- point location ------------------------------------------------------
    def locate(self, x: np.ndarray, rtol: float = 1e-12):
        """Vectorized location of an (n, 2d) stack.

        Returns ``(index, on_boundary, in_range)`` arrays.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        anchor = np.asarray(self.anchor)
        rel = x - anchor
        t = rel / (2.0 * self.h)
        k = np.rint(t)
        offset = np.abs(rel - 2.0 * self.h * k)
        tol = rtol * max(1.0, self.h)
        boundary = np.any(np.abs(offset - self.h) <= tol, axis=1)
        k = k.astype(np.int64)
        in_range = np.ones(len(x), dtype=bool)
        local = np.empty_like(k)
        for i, (lo, hi) in enumerate(self._ranges):
            ki = k[:, i]
            if i < self.space.d and self.space.is_torus:
                ki = np.mod(ki, hi + 1)
            in_range &= (ki >= lo) & (ki <= hi)
            local[:, i] = np.clip(ki, lo, hi) - lo
        flat = np.ravel_multi_index(tuple(local.T), self.shape)
        return flat, boundary, in_range

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "anchor": list(self.anchor),
            "kind": self.space.kind,
            "d": self.space.d,
            "p_box": self.p_box,
            "q_box": self.q_box,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        try:
            space = SpaceSpec(data["kind"], int(data["d"]))
            return cls(space, float(data["h"]), tuple(data.get("anchor") or [0.0] * space.dim),
                       float(data["p_box"]), data.get("q_box"))
        except KeyError as exc:
            raise InputError(f"mesh description missing field {exc}") from None


def cube_index_of(x, mesh: Mesh):
    """Index of the open cube containing ``x``.

    Returns ``None`` when ``x`` sits on a closed-cube face. Raises
    ``RangeError`` outside the covered region.
    """
    x = as_point(x, mesh.space)
    if mesh.space.is_torus:
        x = mesh.space.wrap(x)
    idx, boundary, in_range = mesh.locate(x[None, :])
    if not in_range[0]:
        raise RangeError(f"point {x.tolist()} outside the mesh")
    if boundary[0]:
        return None
    return int(idx[0])


class MeshPermutation:
    """Finite-support permutation of mesh cubes, identity elsewhere."""

    def __init__(self, mapping: Dict[int, int] | Iterable[Tuple[int, int]] = ()):
        pairs = dict(mapping.items()) if isinstance(mapping, dict) else dict(mapping)
        pairs = {int(n): int(l) for n, l in pairs.items() if int(n) != int(l)}
        if sorted(pairs.keys()) != sorted(pairs.values()):
            raise InputError("mapping is not a bijection of its support")
        self.mapping = pairs

    @classmethod
    def from_partial(cls, pairs: Iterable[Tuple[int, int]]) -> "MeshPermutation":
        """Complete an injective partial map to a permutation of its domain and range.

        The partial map splits into cycles and open chains; every chain is
        closed by sending its last target back to its first source.
        """
        forward = {}
        for n, l in pairs:
            n, l = int(n), int(l)
            if n in forward or l in forward.values():
                raise InputError("partial map is not injective")
            forward[n] = l
        targets = set(forward.values())
        for start in sorted(set(forward) - targets):
            node = start
            while node in forward:
                node = forward[node]
            forward[node] = start
        return cls(forward)

    def __call__(self, n: int) -> int:
        return self.mapping.get(int(n), int(n))

    def inverse(self) -> "MeshPermutation":
        return MeshPermutation({l: n for n, l in self.mapping.items()})

    def compose(self, other: "MeshPermutation") -> "MeshPermutation":
        """self after other."""
        keys = set(self.mapping) | set(other.mapping)
        return MeshPermutation({n: self(other(n)) for n in keys})

    @property
    def support(self) -> List[int]:
        return sorted(self.mapping)

    def cycles(self) -> List[List[int]]:
        seen, out = set(), []
        for start in self.support:
            if start in seen:
                continue
            cyc, node = [], start
            while node not in seen:
                seen.add(node)
                cyc.append(node)
                node = self(node)
            out.append(cyc)
        return out

    def transpositions(self) -> List[Tuple[int, int]]:
        """Decompose into swaps; applying them left to right realizes the permutation."""
        swaps = []
        for cyc in self.cycles():
            # (c0 c1 ... ck): c0->c1->...->ck->c0; swapping from the tail moves
            # every content one step forward
            for j in range(len(cyc) - 1, 0, -1):
                swaps.append((cyc[j - 1], cyc[j]))
        return swaps

    def __eq__(self, other) -> bool:
        return isinstance(other, MeshPermutation) and self.mapping == other.mapping

    def __len__(self) -> int:
        return len(self.mapping)

    def to_dict(self, mesh: Mesh) -> dict:
        out = mesh.to_dict()
        out["mapping"] = [[n, l] for n, l in sorted(self.mapping.items())]
        return out

    def to_json(self, mesh: Mesh) -> str:
        return json.dumps(self.to_dict(mesh), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> Tuple["MeshPermutation", Mesh]:
        mesh = Mesh.from_dict(data)
        perm = cls({int(n): int(l) for n, l in data.get("mapping", [])})
        for n in perm.support:
            mesh.lattice_of(n)
        return perm, mesh


def apply_permutation(perm: MeshPermutation, mesh: Mesh, x, strict: bool = True):
    """Translate ``x`` by ``m_l - m_n`` when it lies in a moved open cube.

    Accepts a single point or an (n, 2d) stack. For stacks, boundary points
    are left in place unless ``strict`` is set, in which case they raise.
    """
    space = mesh.space
    x = as_point(x, space)
    single = x.ndim == 1
    pts = space.wrap(np.atleast_2d(x)) if space.is_torus else np.atleast_2d(x).copy()
    idx, boundary, in_range = mesh.locate(pts)
    if strict and np.any(boundary & in_range):
        raise BoundaryError("point lies on a cube face")
    out = pts.copy()
    if perm.mapping:
        src = np.array(list(perm.mapping.keys()))
        moved = in_range & ~boundary & np.isin(idx, src)
        for n in np.unique(idx[moved]):
            sel = moved & (idx == n)
            shift = 2 * mesh.h * (
                np.asarray(mesh.lattice_of(perm(n))) - np.asarray(mesh.lattice_of(int(n))))
            out[sel] = out[sel] + shift
        out = space.wrap(out)
    return out[0] if single else out


def lattice_product(ranges: Sequence[Tuple[int, int]]):
    return itertools.product(*[range(lo, hi + 1) for lo, hi in ranges])

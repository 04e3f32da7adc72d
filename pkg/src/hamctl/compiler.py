"""Compile mesh permutations into exact Hamiltonian primitives.

Every stage is a shear by a localized linear profile or a localized harmonic
rotation, so the composition is a Hamiltonian diffeomorphism with an
explicit closed form. Routing works on the integer lattice:

1. spread: shift each involved column up into a staging band so every
   routed cube sits on its own momentum row;
2. send each row to a private lane column;
3. shift each lane so its cube reaches the row it must occupy at the end;
4. send each row to its target column;
5. unspread: shift every target column back down.

With ``mode="swaps"`` (d = 1) step 3 keeps the arrival order on sparse rows,
the order is fixed by adjacent swaps (half-turns of localized oscillators),
and a second lane pass compresses the rows before unspreading.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GeometryError, InputError
from .flows import (FlowMap, HarmonicRotation, HorizontalShear, Stage, VerticalShear,
                    stage_from_dict)
from .geometry import Mesh, MeshPermutation, SpaceSpec, centered_angle, sup_distance
from .profiles import CutoffSpec, LocalizedLinear

# swap rotations use r1 = SWAP_R1 * rho and r2 = r1 + rho for cube radius rho
SWAP_R1 = 4.0
# row spacing (in cells) of the sparse band used by swap mode
SWAP_SPACING = 10


class PrimitiveSeq(FlowMap):
    """A FlowMap of exact primitives with one annotation per stage."""

    def __init__(self, space: SpaceSpec, stages: Sequence[Stage] = (),
                 annotations: Sequence[dict] = (), flags: Optional[dict] = None):
        super().__init__(space, stages)
        self.annotations = list(annotations) or [{} for _ in self.stages]
        if len(self.annotations) != len(self.stages):
            raise InputError("one annotation per stage is required")
        self.flags = dict(flags or {})

    def append(self, stage: Stage, **note):
        self.stages.append(stage)
        self.annotations.append(note)

    def extend(self, other: "PrimitiveSeq"):
        self.stages.extend(other.stages)
        self.annotations.extend(other.annotations)

    @property
    def synthetic_time(self) -> float:
        """Sum of rotation durations; shears are instantaneous limits."""
        return float(sum(abs(st.t) for st in self.stages if isinstance(st, HarmonicRotation)))

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for st in self.stages:
            out[st.kind] = out.get(st.kind, 0) + 1
        return out

    def to_dict(self):
        out = super().to_dict()
        out["annotations"] = self.annotations
        out["synthetic_time"] = self.synthetic_time
        out["flags"] = self.flags
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PrimitiveSeq":
        space = SpaceSpec.from_dict(data["space"])
        stages = [stage_from_dict(space, s) for s in data.get("stages", [])]
        return cls(space, stages, data.get("annotations") or [{} for _ in stages], data.get("flags"))


# -- geometry helpers -----------------------------------------------------------------


def _q_period(space: SpaceSpec):
    return 2 * np.pi if space.is_torus else None


def _site_distances(sites: np.ndarray, others: np.ndarray, period) -> np.ndarray:
    """Sup-distance from every site to the nearest other site or bystander."""
    pts = np.concatenate([sites, others]) if len(others) else sites
    out = np.full(len(sites), np.inf)
    for i, s in enumerate(sites):
        diff = pts - s
        if period is not None:
            diff = np.mod(diff + period / 2, period) - period / 2
        dist = np.max(np.abs(diff), axis=1)
        dist[i] = np.inf
        out[i] = np.min(dist, initial=np.inf)
    return out


def adaptive_radii(sites: np.ndarray, others: np.ndarray, h: float, eta: float, period=None,
                   cap: Optional[float] = None):
    """Plateau and support radii for localized profiles around lattice sites.

    A site whose nearest neighbour is at distance D gets plateau D/2 - eta
    and support D/2 + eta, so plateaus never meet other supports; isolated
    sites are capped at ``cap`` (default 4h).
    """
    cap = 4 * h if cap is None else cap
    D = _site_distances(sites, others, period)
    plateau = np.minimum(D / 2 - eta, cap - eta)
    if period is not None:
        plateau = np.minimum(plateau, period / 4)
    return plateau, plateau + 2 * eta


def _check_unique(points: np.ndarray, h: float, what: str, labels, period=None):
    for i in range(len(points)):
        diff = points[i + 1:] - points[i]
        if period is not None:
            diff = np.mod(diff + period / 2, period) - period / 2
        close = np.flatnonzero(np.max(np.abs(diff), axis=1) < 2 * h - 1e-9)
        if close.size:
            j = i + 1 + int(close[0])
            raise GeometryError(f"{what} of cubes {labels[i]} and {labels[j]} are closer than 2h",
                                indices=[labels[i], labels[j]])


# -- single-stage builders -----------------------------------------------------------


def column_spread(mesh: Mesh, cubes: Iterable[int], targets: Dict[int, Sequence[float]],
                  eta: float, bystanders: Sequence[int] = ()) -> VerticalShear:
    """Vertical shear moving every listed cube (q^n, p^n) to (q^n, o^n).

    All cubes of a column must receive the same momentum shift; plateaus
    are centred on the columns and avoid the bystander columns.
    """
    space, d, h = mesh.space, mesh.space.d, mesh.h
    if not 0 < eta < h:
        raise InputError("need 0 < eta < h")
    cubes = list(cubes)
    columns: Dict[tuple, np.ndarray] = {}
    qcenter: Dict[tuple, np.ndarray] = {}
    for n in cubes:
        k = mesh.lattice_of(n)
        c = mesh.center(n)
        shift = np.asarray(targets[n], dtype=float) - c[d:]
        key = k[:d]
        if key in columns and np.max(np.abs(columns[key] - shift)) > 1e-12:
            raise GeometryError(f"cubes of column {key} request different momentum shifts; a vertical "
                                "shear moves a whole column rigidly", indices=[n])
        columns[key] = shift
        qcenter[key] = c[:d]
    keys = sorted(columns)
    sites = np.array([qcenter[k] for k in keys]).reshape(-1, d)
    others = np.array([mesh.center(n)[:d] for n in bystanders
                       if mesh.lattice_of(n)[:d] not in columns]).reshape(-1, d)
    plateau, support = adaptive_radii(sites, others, h, eta, _q_period(space))
    if np.any(plateau < h - eta - 1e-12):
        raise GeometryError("columns too close for disjoint plateaus")
    slopes = -np.array([columns[k] for k in keys]).reshape(-1, d)
    profile = LocalizedLinear(sites, slopes, plateau, support, _q_period(space), name="column_spread")
    return VerticalShear(space, profile, 1.0, label="column_spread")


def horizontal_translate(mesh: Mesh, moves: Sequence[Tuple[Sequence[float], Sequence[float]]],
                         eta: float, bystanders: Sequence[Sequence[float]] = (),
                         labels: Optional[Sequence] = None) -> HorizontalShear:
    """Horizontal shear translating the cube on each row o^n by dq^n.

    ``moves`` lists (row momentum o^n, displacement qbar^n - q^n). Everything
    on a moving row is translated, so bystander cube centres (full 2d
    points) must sit at least 2h away from every moving row in momentum.
    """
    space, d, h = mesh.space, mesh.space.d, mesh.h
    if not 0 < eta < h:
        raise InputError("need 0 < eta < h")
    moves = [(np.asarray(o, dtype=float).reshape(d), np.asarray(dq, dtype=float).reshape(d))
             for o, dq in moves]
    labels = list(labels) if labels is not None else list(range(len(moves)))
    if not moves:
        return HorizontalShear(space, LocalizedLinear(np.zeros((1, d)), np.zeros((1, d)), h - eta, h + eta),
                               0.0, label="horizontal_translate")
    rows = np.array([o for o, _ in moves])
    _check_unique(rows, h, "momentum rows", labels)
    by = np.asarray(bystanders, dtype=float).reshape(-1, 2 * d)
    if len(by):
        for i, o in enumerate(rows):
            hit = np.flatnonzero(np.max(np.abs(by[:, d:] - o), axis=1) < 2 * h - 1e-9)
            if hit.size:
                raise GeometryError(f"the translation tube of {labels[i]} meets bystander cubes {hit.tolist()}",
                                    indices=[labels[i]] + hit.tolist())
    others = by[:, d:] if len(by) else np.zeros((0, d))
    plateau, support = adaptive_radii(rows, others, h, eta)
    slopes = np.array([dq for _, dq in moves])
    profile = LocalizedLinear(rows, slopes, plateau, support, None, name="horizontal_translate")
    return HorizontalShear(space, profile, 1.0, label="horizontal_translate")


def swap_parameters(h_cube: float, delta: np.ndarray, r1: float):
    """Largest width w certifying both cubes of a swap inside the plateau."""
    return float(np.min(np.sqrt(r1**2 - h_cube**2) / (np.abs(delta) + h_cube)))


def swap_consecutive(mesh: Mesh, q_col: Sequence[float], o1: Sequence[float], o2: Sequence[float],
                     w: Optional[float] = None, bystanders: Sequence[Sequence[float]] = (),
                     cube_radius: Optional[float] = None, w_scale: float = 0.5) -> HarmonicRotation:
    """Half-turn of the localized oscillator centred at (q~, (o1 + o2)/2).

    The stage lasts pi*w and exchanges the cubes centred at (q~, o1) and
    (q~, o2) (each point reflected through the centre). Both cubes must lie
    in the plateau of the cutoff and every bystander cube outside its
    support.
    """
    space, d, h = mesh.space, mesh.space.d, mesh.h
    rho = h if cube_radius is None else float(cube_radius)
    q_col = np.asarray(q_col, dtype=float).reshape(d)
    o1 = np.asarray(o1, dtype=float).reshape(d)
    o2 = np.asarray(o2, dtype=float).reshape(d)
    delta = (o2 - o1) / 2
    r1 = SWAP_R1 * rho
    r2 = r1 + rho
    w_max = swap_parameters(rho, delta, r1)
    if w is None:
        w = w_scale * w_max
    elif w >= w_max:
        raise GeometryError(f"w={w:.4g} too large: both cubes stay certified only for w < {w_max:.6g}",
                            max_width=w_max)
    center = np.concatenate([q_col, (o1 + o2) / 2])
    if space.is_torus and r2 >= np.pi:
        raise GeometryError("swap support does not fit in one chart of the torus; refine the mesh")
    by = np.asarray(bystanders, dtype=float).reshape(-1, 2 * d)
    if len(by):
        dq = by[:, :d] - center[:d]
        if space.is_torus:
            dq = centered_angle(dq)
        dp = by[:, d:] - center[d:]
        qmin = np.maximum(np.abs(dq) - h, 0.0)
        pmin = np.maximum(np.abs(dp) - h, 0.0)
        Qmin = qmin**2 + (w * pmin) ** 2
        inside = ~np.any(Qmin >= r2**2, axis=1)
        if np.any(inside):
            raise GeometryError(f"bystander cubes {np.flatnonzero(inside).tolist()} meet the swap support",
                                indices=np.flatnonzero(inside).tolist(), max_width=w_max)
    return HarmonicRotation(space, center, w, np.pi * w, CutoffSpec(r1, r2), label="swap")


def emulate_symmetry(mesh: Mesh, cubes: Iterable[int], eta: Optional[float] = None,
                     w: Optional[float] = None, w_scale: float = 0.5) -> PrimitiveSeq:
    """Per-column half-turns about (q^j, 0) sending each shrunken cube to its mirror image.

    On the listed cubes the result agrees setwise with S(q, p) = (q, -p);
    inside each cube points are reflected through the column axis, so S is
    realized at density level on cube unions, not pointwise.
    """
    space, d, h = mesh.space, mesh.space.d, mesh.h
    eta = h / 16 if eta is None else eta
    if not 0 < eta < h:
        raise InputError("need 0 < eta < h")
    cols: Dict[tuple, List[int]] = {}
    for n in cubes:
        cols.setdefault(mesh.lattice_of(n)[:d], []).append(int(n))
    seq = PrimitiveSeq(space, flags={"density_level_only": True})
    rho = h - eta
    r1, r2 = h, h + eta
    for key in sorted(cols):
        members = cols[key]
        centers = np.array([mesh.center(n) for n in members])
        P = np.max(np.abs(centers[:, d:]), axis=0) + rho
        w_max = float(np.min(np.sqrt(r1**2 - rho**2) / P))
        wj = w_scale * w_max if w is None else float(w)
        if wj >= w_max:
            raise GeometryError(f"column {key}: w={wj:.4g} exceeds the admissible {w_max:.6g}",
                                indices=members, max_width=w_max)
        center = np.concatenate([centers[0, :d], np.zeros(d)])
        st = HarmonicRotation(space, center, wj, np.pi * wj, CutoffSpec(r1, r2), label="symmetry")
        seq.append(st, role="symmetry_column", column=list(key), cubes=members, w=wj)
    return seq


def default_eta(h: float) -> float:
    """Collar width used when none is given.

    Shears disturb a collar of width ~eta around every moving column and row,
    costing O(eta/h) in L^1 for a fixed density; eta ~ h^2 makes that loss
    vanish linearly as the mesh is refined.
    """
    return min(h / 16, h * h / 32)


# -- full compiler -----------------------------------------------------------------------


@dataclass
class _Router:
    mesh: Mesh
    eta: float
    routed: List[int]
    target: Dict[int, int]
    fixed: List[int]
    pos: Dict[int, np.ndarray] = field(default_factory=dict)  # current lattice vectors

    @property
    def d(self):
        return self.mesh.space.d

    def center(self, k) -> np.ndarray:
        c = np.asarray(self.mesh.anchor) + 2 * self.mesh.h * np.asarray(k, dtype=float)
        return self.mesh.space.wrap(c)

    def qkey(self, k) -> tuple:
        k = tuple(int(x) for x in k[: self.d])
        if self.mesh.space.is_torus:
            n = self.mesh.ranges[0][1] + 1
            k = tuple(x % n for x in k)
        return k

    def bystander_points(self, exclude=()) -> np.ndarray:
        pts = [self.center(self.pos[n]) for n in self.routed if n not in exclude]
        pts += [self.mesh.center(n) for n in self.fixed]
        return np.array(pts).reshape(-1, 2 * self.d)

    def vertical(self, shifts: Dict[tuple, np.ndarray], role: str):
        """Shift columns (keys) by lattice vectors in p."""
        d, h = self.d, self.mesh.h
        keys = sorted(k for k, s in shifts.items() if np.any(s != 0))
        if not keys:
            return None
        sites = np.array([self.center(list(k) + [0] * d)[:d] for k in keys]).reshape(-1, d)
        occupied = {self.qkey(self.pos[n]) for n in self.routed} | {
            self.qkey(self.mesh.lattice_of(n)) for n in self.fixed}
        others = np.array([self.center(list(k) + [0] * d)[:d] for k in sorted(occupied - set(keys))]
                          ).reshape(-1, d)
        plateau, support = adaptive_radii(sites, others, h, self.eta, _q_period(self.mesh.space))
        slopes = -2 * h * np.array([shifts[k] for k in keys], dtype=float).reshape(-1, d)
        prof = LocalizedLinear(sites, slopes, plateau, support, _q_period(self.mesh.space), name=role)
        for n in self.routed:
            key = self.qkey(self.pos[n])
            if key in shifts:
                self.pos[n] = self.pos[n].copy()
                self.pos[n][d:] += shifts[key]
        return VerticalShear(self.mesh.space, prof, 1.0, label=role), {
            "role": role, "columns": [list(k) for k in keys],
            "plateau": plateau.tolist(), "support": support.tolist()}

    def horizontal(self, moves: Dict[int, np.ndarray], role: str):
        """Move routed cubes (keys) by lattice vectors in q along their rows."""
        d, h = self.d, self.mesh.h
        movers = [n for n in sorted(moves) if np.any(moves[n] != 0)]
        if not movers:
            return None
        rows = np.array([self.center(self.pos[n])[d:] for n in movers]).reshape(-1, d)
        _check_unique(rows, h, "momentum rows", movers)
        by = self.bystander_points(exclude=set(movers))
        if len(by):
            for i, o in enumerate(rows):
                hit = np.max(np.abs(by[:, d:] - o), axis=1) < 2 * h - 1e-9
                if np.any(hit):
                    raise GeometryError(f"{role}: row of cube {movers[i]} is shared with a bystander",
                                        indices=[movers[i]])
        others = by[:, d:] if len(by) else np.zeros((0, d))
        plateau, support = adaptive_radii(rows, others, h, self.eta)
        slopes = np.empty((len(movers), d))
        for i, n in enumerate(movers):
            dq = 2 * h * moves[n].astype(float)
            if self.mesh.space.is_torus:
                dq = centered_angle(dq)
            slopes[i] = dq
            self.pos[n] = self.pos[n].copy()
            self.pos[n][:d] += moves[n]
            if self.mesh.space.is_torus:
                self.pos[n][:d] = np.asarray(self.qkey(self.pos[n]))
        prof = LocalizedLinear(rows, slopes, plateau, support, None, name=role)
        return HorizontalShear(self.mesh.space, prof, 1.0, label=role), {
            "role": role, "cubes": movers, "plateau": plateau.tolist(), "support": support.tolist()}


def _lanes(router: _Router, count: int) -> List[np.ndarray]:
    mesh, d = router.mesh, router.d
    if not mesh.space.is_torus:
        q_hi = mesh.ranges[0][1]
        base = [mesh.ranges[i][0] for i in range(d)]
        lanes = []
        for ell in range(count):
            k = list(base)
            k[0] = q_hi + 3 + 2 * ell
            lanes.append(np.array(k, dtype=np.int64))
        return lanes
    # after the spread every routed cube sits alone in band A, so any column
    # without fixed cubes can serve as a lane; untouched columns go first
    n_q = mesh.ranges[0][1] + 1
    fixed = {router.qkey(mesh.lattice_of(n)) for n in router.fixed}
    used = {router.qkey(mesh.lattice_of(n)) for n in router.routed}
    used |= {router.qkey(mesh.lattice_of(router.target[n])) for n in router.routed}
    cand = [tuple(k) for k in itertools.product(range(n_q), repeat=d) if tuple(k) not in fixed]
    cand.sort(key=lambda k: (k in used, k))
    free = [np.array(k, dtype=np.int64) for k in cand]
    if len(free) < count:
        raise GeometryError(f"the torus mesh has {len(free)} columns free of fixed cubes, {count} lanes are "
                            "needed; refine the mesh or move fewer cubes at once")
    return free[:count]


def _band_top(router: _Router) -> int:
    """Highest p_1 lattice value currently used by routed cubes or the mesh."""
    d = router.d
    top = router.mesh.ranges[d][1]
    for n in router.routed:
        top = max(top, int(router.pos[n][d]))
    return top


def _bubble_swaps(router: _Router, seq: PrimitiveSeq, groups: Dict[tuple, List[int]], w, w_scale):
    """Sort each column's cubes by target momentum with adjacent swaps."""
    mesh, d = router.mesh, router.d
    for key in sorted(groups):
        cur = sorted(groups[key], key=lambda n: tuple(router.pos[n][d:]))
        rank = {n: i for i, n in enumerate(sorted(cur, key=lambda n: mesh.lattice_of(router.target[n])[d:]))}
        changed = True
        while changed:
            changed = False
            for i in range(len(cur) - 1):
                a, b = cur[i], cur[i + 1]
                if rank[a] < rank[b]:
                    continue
                ka, kb = router.pos[a], router.pos[b]
                ca, cb = router.center(ka), router.center(kb)
                st = swap_consecutive(mesh, ca[:d], ca[d:], cb[d:], w,
                                      router.bystander_points(exclude={a, b}), w_scale=w_scale)
                seq.append(st, role="swap", cubes=[a, b], w=st.w, center=st.center.tolist())
                router.pos[a], router.pos[b] = kb.copy(), ka.copy()
                cur[i], cur[i + 1] = b, a
                changed = True


def _spread(router: _Router, columns, gap: int):
    """Per-column shifts stacking the routed cubes of each column above the mesh."""
    d = router.d
    cursor = _band_top(router) + 3 + gap
    shifts = {}
    for key in sorted(columns):
        p1 = [int(router.pos[n][d]) for n in router.routed if router.qkey(router.pos[n]) == key]
        s = np.zeros(d, dtype=np.int64)
        s[0] = cursor - min(p1)
        shifts[key] = s
        cursor += max(p1) - min(p1) + 2 + gap
    return shifts


def _new_router(perm, mesh, eta, keep):
    d = mesh.space.d
    support = set(perm.support)
    cols = {mesh.lattice_of(n)[:d] for n in support}
    keep = {int(n) for n in keep} - support
    routed = sorted(support | {n for n in keep if mesh.lattice_of(n)[:d] in cols}, key=mesh.lattice_of)
    fixed = sorted(n for n in keep if mesh.lattice_of(n)[:d] not in cols)
    router = _Router(mesh, eta, routed, {n: perm(n) for n in routed}, fixed)
    for n in routed:
        router.pos[n] = np.array(mesh.lattice_of(n), dtype=np.int64)
    return router, cols


def _compile_in_columns(perm, mesh, eta, keep, w, w_scale) -> PrimitiveSeq:
    """d = 1 permutations that preserve columns: spread, adjacent swaps, unspread."""
    router, cols = _new_router(perm, mesh, eta, keep)
    seq = PrimitiveSeq(mesh.space, flags={"mode": "swaps", "route": "in_columns", "eta": eta})
    span = max(int(router.pos[n][1]) for n in router.routed) - min(int(router.pos[n][1]) for n in router.routed)
    # a swap's support reaches about (SWAP_R1 + 1)/(w_scale * sqrt(SWAP_R1^2 - 1)) * (|delta| + h)
    # beyond its centre in p; keep column blocks further apart than that
    reach = (SWAP_R1 + 1) / (w_scale * math.sqrt(SWAP_R1**2 - 1))
    gap = int(math.ceil(reach * (span + 2))) + 2
    shifts = _spread(router, cols, gap)
    res = router.vertical(shifts, "column_spread")
    seq.append(res[0], **res[1])
    _bubble_swaps(router, seq, {k: [n for n in router.routed if mesh.lattice_of(n)[:1] == k] for k in cols},
                  w, w_scale)
    res = router.vertical({k: -s for k, s in shifts.items()}, "unspread")
    seq.append(res[0], **res[1])
    return seq


def compile_permutation(perm: MeshPermutation, mesh: Mesh, eta: Optional[float] = None,
                        keep: Iterable[int] = (), mode: Optional[str] = None, w: Optional[float] = None,
                        w_scale: float = 0.5) -> PrimitiveSeq:
    """Exact primitive sequence phi with phi(C(m_n, h - eta)) = C(m_F(n), h - eta).

    ``keep`` lists further cubes that must end where they started (cubes
    carrying density in the same columns, typically). Cubes outside
    support(F) and ``keep`` are not tracked and may be moved. ``mode``
    defaults to "swaps" for d = 1 and "staging" otherwise.
    """
    space, d, h = mesh.space, mesh.space.d, mesh.h
    eta = default_eta(h) if eta is None else float(eta)
    if not 0 < eta < h:
        raise InputError("need 0 < eta < h")
    mode = mode or ("swaps" if d == 1 else "staging")
    if mode not in ("staging", "swaps"):
        raise InputError("mode must be 'staging' or 'swaps'")
    if mode == "swaps" and d != 1:
        raise InputError("swap mode is implemented for d = 1; use staging for d >= 2")
    for n in perm.support:
        mesh.lattice_of(n)
    if not perm.mapping:
        return PrimitiveSeq(space, flags={"mode": mode, "eta": eta})
    if mode == "swaps" and all(mesh.lattice_of(n)[:d] == mesh.lattice_of(perm(n))[:d] for n in perm.support):
        try:
            return _compile_in_columns(perm, mesh, eta, keep, w, w_scale)
        except GeometryError as err:
            if err.max_width is not None and w is not None:
                raise
            # dense columns: the swaps need sparse rows, which the lane route provides
    router, cols = _new_router(perm, mesh, eta, keep)
    routed = router.routed
    seq = PrimitiveSeq(space, flags={"mode": mode, "route": "lanes", "eta": eta})

    def add(res):
        if res is not None:
            seq.append(res[0], **res[1])

    # 1. spread columns into band A above the mesh
    add(router.vertical(_spread(router, cols, 0), "column_spread"))

    def lane_pass(final_rows: Dict[int, np.ndarray], tag: str):
        lanes = _lanes(router, len(routed))
        order = sorted(routed, key=lambda n: tuple(router.pos[n][d:]))
        assign = {n: lanes[i] for i, n in enumerate(order)}
        add(router.horizontal({n: assign[n] - router.pos[n][:d] for n in routed}, f"to_lanes{tag}"))
        add(router.vertical({router.qkey(assign[n]): final_rows[n] - router.pos[n][d:] for n in routed},
                            f"lane_shift{tag}"))

    def target_blocks(spacing: int, gap: int, order_key):
        """Rows in a fresh band, one block per target column."""
        base = _band_top(router) + 3 + gap
        rows, offsets = {}, {}
        tcols = sorted({mesh.lattice_of(router.target[n])[:d] for n in routed})
        for key in tcols:
            members = sorted((n for n in routed if mesh.lattice_of(router.target[n])[:d] == key),
                             key=order_key)
            tp = {n: np.array(mesh.lattice_of(router.target[n])[d:], dtype=np.int64) for n in members}
            lo = min(int(v[0]) for v in tp.values())
            off = np.zeros(d, dtype=np.int64)
            off[0] = base - lo
            if spacing == 0:
                for n in members:
                    rows[n] = tp[n] + off
                span = max(int(v[0]) for v in tp.values()) - lo
            else:
                for i, n in enumerate(members):
                    r = np.zeros(d, dtype=np.int64)
                    r[0] = base + spacing * i
                    rows[n] = r
                span = spacing * (len(members) - 1)
            offsets[key] = off
            base += span + 2 + gap
        return rows, offsets

    def to_targets(tag):
        add(router.horizontal(
            {n: np.array(mesh.lattice_of(router.target[n])[:d]) - router.pos[n][:d] for n in routed},
            f"to_targets{tag}"))

    if mode == "swaps":
        # sparse rows keeping the arrival order, adjacent swaps, then compress
        arrival = {n: tuple(router.pos[n][d:]) for n in routed}
        gap = int(math.ceil(3 * (SWAP_R1 + 1) * SWAP_SPACING)) + SWAP_SPACING
        rows, _ = target_blocks(SWAP_SPACING, gap, lambda n: arrival[n])
        lane_pass(rows, "")
        to_targets("")
        groups: Dict[tuple, List[int]] = {}
        for n in routed:
            groups.setdefault(mesh.lattice_of(router.target[n])[:d], []).append(n)
        _bubble_swaps(router, seq, groups, w, w_scale)
        final, offsets = target_blocks(0, 1, lambda n: mesh.lattice_of(router.target[n]))
        lane_pass(final, "_compress")
        to_targets("_compress")
    else:
        final, offsets = target_blocks(0, 1, lambda n: mesh.lattice_of(router.target[n]))
        lane_pass(final, "")
        to_targets("")
    # 5. unspread
    add(router.vertical({key: -off for key, off in offsets.items()}, "unspread"))
    for n in routed:
        here = router.qkey(router.pos[n]) + tuple(int(x) for x in router.pos[n][d:])
        goal = mesh.lattice_of(router.target[n])
        if here != router.qkey(goal) + tuple(goal[d:]):
            raise GeometryError(f"internal routing error: cube {n} did not reach its target", indices=[n])
    seq.flags["routed"] = len(routed)
    return seq


def verify_compiled(seq: FlowMap, perm: MeshPermutation, mesh: Mesh, eta: Optional[float] = None,
                    cubes: Optional[Iterable[int]] = None) -> dict:
    """Compare compiled images of shrunken-cube centres and corners with F.

    Corners are compared as sets, since a swap reflects each cube through
    its own centre.
    """
    space = mesh.space
    D = space.dim
    if eta is None:
        eta = getattr(seq, "flags", {}).get("eta", default_eta(mesh.h))
    cubes = sorted(set(perm.support) if cubes is None else {int(n) for n in cubes})
    if not cubes:
        return {"center_error": 0.0, "corner_error": 0.0, "cubes": 0}
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * D, indexing="ij")).reshape(D, -1).T
    offs = signs * (mesh.h - eta)
    centers = np.array([mesh.center(n) for n in cubes])
    targets = np.array([mesh.center(perm(n)) for n in cubes])
    img = seq(centers)
    center_err = float(np.max(sup_distance(img, targets, space)))
    corners = (centers[:, None, :] + offs[None]).reshape(-1, D)
    cimg = seq(corners).reshape(len(cubes), len(offs), D)
    tcorners = targets[:, None, :] + offs[None]
    worst = 0.0
    for i in range(len(cubes)):
        a = np.repeat(cimg[i], len(offs), axis=0)
        b = np.tile(tcorners[i], (len(offs), 1))
        dist = np.max(np.abs(space.difference(a, b)), axis=1).reshape(len(offs), len(offs))
        worst = max(worst, float(np.max(np.min(dist, axis=1))))
    return {"center_error": center_err, "corner_error": worst, "cubes": len(cubes)}

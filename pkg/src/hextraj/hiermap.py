"""Density-driven mixed-resolution maps: iterative splitting of busy, spread-out cells."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import hexgrid as hg
from .corpus import DataError, HexTrajectory, RawTrajectory, bridge
from .hexgrid import GridSpec, HexCell


class MapError(ValueError):
    pass


class PartitionError(MapError):
    """The active set is not a partition of the base region."""


@dataclass(frozen=True)
class SplitParams:
    delta: float = 0.0
    phi: float = 0.0
    theta: float = 1.0
    r_min: int = 7
    r_max: int = 9
    max_iter: int = 10
    distinct_trajectories: bool = False

    def __post_init__(self):
        for name in ("delta", "phi", "theta"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.r_min > self.r_max:
            raise MapError("r_min must not exceed r_max")
        if self.max_iter < 1:
            raise MapError("max_iter must be >= 1")
        if min(self.delta, self.phi, self.theta) < 0:
            raise MapError("thresholds must be nonnegative")

    def to_text(self) -> str:
        return (f"delta={self.delta!r} phi={self.phi!r} theta={self.theta!r} r_min={self.r_min} "
                f"r_max={self.r_max} max_iter={self.max_iter} distinct={int(self.distinct_trajectories)}")

    @classmethod
    def from_fields(cls, f: dict) -> SplitParams:
        return cls(float(f["delta"]), float(f["phi"]), float(f["theta"]), int(f["r_min"]), int(f["r_max"]),
                   int(f["max_iter"]), f.get("distinct", "0") == "1")


@lru_cache(maxsize=1 << 18)
def _ancestry(c: HexCell, r_min: int, spec: GridSpec) -> tuple:
    """``c`` and its ancestors down to resolution ``r_min``, finest first."""
    chain = [c]
    while chain[-1].res > r_min:
        chain.append(hg.parent(chain[-1], spec))
    return tuple(chain)


@lru_cache(maxsize=1 << 14)
def _descendant_set(c: HexCell, res: int, spec: GridSpec) -> frozenset:
    return frozenset(hg.descendants(c, res, spec))


class MixedResolutionMap:
    """Active cells of mixed resolution partitioning a set of base cells."""

    def __init__(self, spec: GridSpec, params: SplitParams, active: Iterable[HexCell] = ()):
        for r in (params.r_min, params.r_max):
            spec.check_res(r)
        self.spec = spec
        self.params = params
        self.active: set[HexCell] = set(active)
        self.lineage: list[tuple[HexCell, int]] = []
        self.iterations = 0

    def __contains__(self, c) -> bool:
        return c in self.active

    def __len__(self):
        return len(self.active)

    def cells(self) -> list[HexCell]:
        return sorted(self.active)

    def base_cells(self) -> list[HexCell]:
        return sorted({self.ancestors(c)[-1] for c in self.active})

    def ancestors(self, c: HexCell) -> tuple:
        return _ancestry(c, self.params.r_min, self.spec)

    def deepest_active(self, c: HexCell) -> HexCell | None:
        """The active cell among ``c`` and its ancestors, if any."""
        for a in self.ancestors(c):
            if a in self.active:
                return a
        return None

    def locate(self, p: hg.PlanarPoint) -> HexCell | None:
        """Active cell containing ``p``, coarse to fine; ``None`` outside the map."""
        for res in range(self.params.r_min, self.params.r_max + 1):
            c = hg.point_to_cell(p, res, self.spec)
            if c in self.active:
                return c
        return self.deepest_active(hg.point_to_cell(p, self.params.r_max, self.spec))

    def split(self, c: HexCell, iteration: int):
        if c not in self.active:
            raise MapError(f"cannot split inactive cell {c}")
        self.active.remove(c)
        self.active.update(hg.children(c, self.spec))
        self.lineage.append((c, iteration))

    def mixed_neighbors(self, c: HexCell) -> list[HexCell]:
        """Active cells sharing a finest-level boundary with ``c``."""
        if c not in self.active:
            raise MapError(f"cell {c} is not active")
        inside = _descendant_set(c, self.params.r_max, self.spec)
        out = set()
        for d in inside:
            for n in hg.neighbors(d):
                if n not in inside:
                    a = self.deepest_active(n)
                    if a is not None:
                        out.add(a)
        out.discard(c)
        return sorted(out)

    def is_uniform(self) -> bool:
        return len({c.res for c in self.active}) <= 1

    def validate(self):
        """Raise :class:`PartitionError` unless the active set partitions its base cells."""
        for c in self.active:
            if not self.params.r_min <= c.res <= self.params.r_max:
                raise PartitionError(f"{c} outside resolution range")
            for a in self.ancestors(c)[1:]:
                if a in self.active:
                    raise PartitionError(f"{a} and its descendant {c} are both active")
        for base in self.base_cells():
            for d in _descendant_set(base, self.params.r_max, self.spec):
                if self.deepest_active(d) is None:
                    raise PartitionError(f"{d} inside base cell {base} is not covered")

    # -- serialization ----------------------------------------------------

    MAGIC = "# hextraj-map"

    def to_text(self) -> str:
        lines = [f"{self.MAGIC} {self.params.to_text()} iterations={self.iterations} {self.spec.to_text()}"]
        lines += [c.token for c in self.cells()]
        lines += [f"SPLIT {c.token} iter={it}" for c, it in self.lineage]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> MixedResolutionMap:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or not lines[0].startswith(cls.MAGIC):
            raise DataError(f"{path}: not a map file")
        header = lines[0][len(cls.MAGIC):]
        fields = dict(item.split("=", 1) for item in header.split())
        m = cls(GridSpec.from_text(header), SplitParams.from_fields(fields))
        m.iterations = int(fields.get("iterations", 0))
        for ln in lines[1:]:
            if ln.startswith("SPLIT "):
                _, tok, it = ln.split()
                m.lineage.append((HexCell.parse(tok), int(it.split("=", 1)[1])))
            else:
                m.active.add(HexCell.parse(ln))
        return m


# -- frequency statistics -----------------------------------------------------

@dataclass
class FrequencyMap:
    counts: dict = field(default_factory=dict)
    variability: dict = field(default_factory=dict)

    def values(self, cells: Sequence[HexCell]) -> np.ndarray:
        return np.array([self.counts.get(c, 0) for c in cells], dtype=np.float64)


def _planar_points(trajectories: Sequence[RawTrajectory], spec: GridSpec):
    for i, t in enumerate(trajectories):
        for _, lat, lon in t.points:
            yield i, hg.project(lat, lon, spec)


def build_frequency(trajectories: Sequence[RawTrajectory], m: MixedResolutionMap) -> FrequencyMap:
    """Per active cell: visit count ``f`` and spread ``gamma`` (covariance trace / edge^2)."""
    members: dict[HexCell, list] = {c: [] for c in m.active}
    visitors: dict[HexCell, set] = {c: set() for c in m.active}
    for i, p in _planar_points(trajectories, m.spec):
        c = m.locate(p)
        if c is not None:
            members[c].append(p)
            visitors[c].add(i)
    fm = FrequencyMap()
    for c, pts in members.items():
        fm.counts[c] = len(visitors[c]) if m.params.distinct_trajectories else len(pts)
        if len(pts) < 2:
            fm.variability[c] = 0.0
            continue
        xy = np.array(pts, dtype=np.float64)
        spread = float(xy.var(axis=0).sum())
        fm.variability[c] = spread / m.spec.edge(c.res) ** 2
    return fm


def skewness(values) -> float:
    """Fisher-Pearson skewness ``m3 / m2^1.5``; 0 for fewer than 3 values or no spread."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3 or np.ptp(v) == 0:
        return 0.0
    return float(stats.skew(v, bias=True))


# -- generation ---------------------------------------------------------------

def base_region(trajectories: Sequence[RawTrajectory], spec: GridSpec, params: SplitParams) -> set[HexCell]:
    """Coarsest-level cells covering the data's bounding box (plus every visited one)."""
    pts = [p for _, p in _planar_points(trajectories, spec)]
    if not pts:
        return set()
    xy = np.array(pts)
    e = spec.edge(params.r_min)
    lo, hi = xy.min(axis=0) - e, xy.max(axis=0) + e
    cells = {hg.ancestor(hg.point_to_cell(p, params.r_max, spec), params.r_min, spec) for p in pts}
    cells |= {hg.point_to_cell(p, params.r_min, spec) for p in pts}
    corner = hg.point_to_cell(hg.PlanarPoint(*lo), params.r_min, spec)
    radius = int(math.ceil(float(np.hypot(*(hi - lo))) / (math.sqrt(3) * e))) + 1
    for c in hg.hex_disk(corner, radius):
        ctr = hg.cell_centroid(c, spec)
        if lo[0] <= ctr.x <= hi[0] and lo[1] <= ctr.y <= hi[1]:
            cells.add(c)
    return cells


def generate(trajectories: Sequence[RawTrajectory], spec: GridSpec, params: SplitParams,
             base: Iterable[HexCell] | None = None, check: bool = True) -> MixedResolutionMap:
    """Refine the base tessellation until the density skew drops, nothing splits, or the cap hits.

    Each iteration splits every active cell whose count exceeds ``delta`` and
    whose spread exceeds ``phi`` (and is not already at ``r_max``).
    """
    m = MixedResolutionMap(spec, params, base_region(trajectories, spec, params) if base is None else base)
    for it in range(1, params.max_iter + 1):
        m.iterations = it
        fm = build_frequency(trajectories, m)
        cells = m.cells()
        if skewness(fm.values(cells)) < params.theta:
            break
        hot = [c for c in cells
               if fm.counts[c] > params.delta and fm.variability[c] > params.phi and c.res < params.r_max]
        if not hot:
            break
        for c in hot:
            m.split(c, it)
        if check:
            m.validate()
    return m


# -- retokenization -----------------------------------------------------------

def mixed_path(m: MixedResolutionMap, a: HexCell, b: HexCell) -> list[HexCell]:
    """Cell path from ``a`` to ``b`` over mixed adjacency; ``[]`` when unreachable."""
    if a.res == b.res:
        line = hg.grid_line(a, b)
        if all(c in m.active for c in line):
            return line
    prev = {a: None}
    queue = deque([a])
    while queue:
        c = queue.popleft()
        if c == b:
            path = [b]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for n in m.mixed_neighbors(c):
            if n not in prev:
                prev[n] = c
                queue.append(n)
    return []


def retokenize(trajectories: Sequence[RawTrajectory], m: MixedResolutionMap) -> list[HexTrajectory]:
    """Trajectories as sequences of active cells, bridged over mixed adjacency."""
    out = []
    for t in trajectories:
        cells = [m.locate(hg.project(lat, lon, m.spec)) for _, lat, lon in t.points]
        cells = [c for c in cells if c is not None]
        if not cells:
            continue
        out.append(HexTrajectory(t.points[0][0], bridge(cells, lambda a, b: mixed_path(m, a, b))))
    return out

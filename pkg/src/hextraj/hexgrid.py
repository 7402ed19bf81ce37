"""Planar multi-resolution hexagonal grid.

Flat-top hexagons in axial coordinates ``(q, r)`` with the implicit cube
coordinate ``s = -q - r``.  Each resolution shrinks the edge by ``sqrt(7)``
and rotates the lattice by ``atan(sqrt(3)/5)``, which makes the centers of
level ``r`` a sub-lattice of level ``r + 1``: every parent owns its center
child plus that child's six neighbors.

Geographic coordinates are projected onto a local equirectangular plane
around an anchor point; all geometry happens in meters on that plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

EARTH_RADIUS_M = 6_371_000.0
SQRT3 = math.sqrt(3.0)
SQRT7 = math.sqrt(7.0)
LEVEL_ROTATION = math.atan(SQRT3 / 5.0)

# edge length of 1406 m at resolution 7
DEFAULT_BASE_EDGE_M = 1406.0 * SQRT7**7

# axial neighbor offsets, in this fixed order
DIRECTIONS: tuple[tuple[int, int], ...] = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

# parent basis vectors expressed in child axial coordinates
_CHILD_OF_Q = (3, -1)
_CHILD_OF_R = (1, 2)

_TIE_TOL = 1e-9


class GridError(ValueError):
    """Base class for grid errors."""


class InvalidCoordinateError(GridError):
    pass


class ResolutionError(GridError):
    pass


class HexCell(NamedTuple):
    """A hexagon at resolution ``res``; tuple order gives the (res, q, r) total ordering."""

    res: int
    q: int
    r: int

    @property
    def s(self) -> int:
        return -self.q - self.r

    @property
    def token(self) -> str:
        return f"r{self.res}:{self.q}:{self.r}"

    @classmethod
    def parse(cls, token: str) -> HexCell:
        try:
            head, q, r = token.split(":")
            if not head.startswith("r"):
                raise ValueError
            return cls(int(head[1:]), int(q), int(r))
        except ValueError:
            raise GridError(f"malformed cell token {token!r}") from None

    def __str__(self) -> str:
        return self.token


class PlanarPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class GridSpec:
    anchor_lat: float = 0.0
    anchor_lon: float = 0.0
    base_edge_m: float = DEFAULT_BASE_EDGE_M
    res_min: int = 0
    res_max: int = 15

    def __post_init__(self):
        if not (math.isfinite(self.anchor_lat) and math.isfinite(self.anchor_lon)):
            raise InvalidCoordinateError("anchor must be finite")
        if abs(self.anchor_lat) >= 90:
            raise InvalidCoordinateError("anchor latitude must be inside (-90, 90)")
        if not self.base_edge_m > 0:
            raise GridError("base_edge_m must be positive")
        if self.res_min > self.res_max:
            raise GridError("res_min must not exceed res_max")

    def edge(self, res: int) -> float:
        """Edge length (= circumradius) in meters at ``res``."""
        return self.base_edge_m / SQRT7**res

    def rotation(self, res: int) -> float:
        return res * LEVEL_ROTATION

    def check_res(self, res: int) -> None:
        if not self.res_min <= res <= self.res_max:
            raise ResolutionError(f"resolution {res} outside [{self.res_min}, {self.res_max}]")

    def to_text(self) -> str:
        return (
            f"anchor_lat={self.anchor_lat!r} anchor_lon={self.anchor_lon!r} "
            f"base_edge_m={self.base_edge_m!r} res_min={self.res_min} res_max={self.res_max}"
        )

    @classmethod
    def from_text(cls, text: str) -> GridSpec:
        fields = dict(item.split("=", 1) for item in text.split())
        try:
            return cls(
                anchor_lat=float(fields["anchor_lat"]),
                anchor_lon=float(fields["anchor_lon"]),
                base_edge_m=float(fields["base_edge_m"]),
                res_min=int(fields["res_min"]),
                res_max=int(fields["res_max"]),
            )
        except KeyError as exc:
            raise GridError(f"grid spec missing key {exc}") from None


# -- projection ---------------------------------------------------------------

def project(lat: float, lon: float, spec: GridSpec) -> PlanarPoint:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidCoordinateError(f"non-finite coordinate ({lat}, {lon})")
    if abs(lat) > 90 or abs(lon) > 180:
        raise InvalidCoordinateError(f"coordinate out of range ({lat}, {lon})")
    k = EARTH_RADIUS_M * math.pi / 180.0
    x = k * (lon - spec.anchor_lon) * math.cos(math.radians(spec.anchor_lat))
    y = k * (lat - spec.anchor_lat)
    return PlanarPoint(x, y)


def unproject(p: PlanarPoint, spec: GridSpec) -> tuple[float, float]:
    """Inverse of :func:`project`; returns ``(lat, lon)``."""
    if not (math.isfinite(p.x) and math.isfinite(p.y)):
        raise InvalidCoordinateError(f"non-finite point {p}")
    k = EARTH_RADIUS_M * math.pi / 180.0
    lat = spec.anchor_lat + p.y / k
    lon = spec.anchor_lon + p.x / (k * math.cos(math.radians(spec.anchor_lat)))
    return lat, lon


# -- lattice helpers ----------------------------------------------------------

def _rotate(x: float, y: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return x * c - y * s, x * s + y * c


def _axial_dist2(fq: float, fr: float, q: int, r: int) -> float:
    # squared distance in units of (neighbor spacing)^2
    dq, dr = fq - q, fr - r
    return dq * dq + dq * dr + dr * dr


def _nearest_axial(fq: float, fr: float) -> tuple[int, int]:
    """Nearest lattice point to fractional axial coords; ties go to the smaller (q, r)."""
    fs = -fq - fr
    q, r, s = round(fq), round(fr), round(fs)
    dq, dr, ds = abs(q - fq), abs(r - fr), abs(s - fs)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    best = _axial_dist2(fq, fr, q, r)
    candidates = [(q, r)]
    for oq, orr in DIRECTIONS:
        cq, cr = q + oq, r + orr
        d = _axial_dist2(fq, fr, cq, cr)
        if d < best - _TIE_TOL:
            best, candidates = d, [(cq, cr)]
        elif d <= best + _TIE_TOL:
            candidates.append((cq, cr))
    return min(candidates)


def _fractional_axial(p: PlanarPoint, res: int, spec: GridSpec) -> tuple[float, float]:
    x, y = _rotate(p.x, p.y, -spec.rotation(res))
    e = spec.edge(res)
    return (2.0 / 3.0) * x / e, (-x / 3.0 + SQRT3 / 3.0 * y) / e


# -- public operations --------------------------------------------------------

def point_to_cell(p: PlanarPoint, res: int, spec: GridSpec) -> HexCell:
    spec.check_res(res)
    if not (math.isfinite(p.x) and math.isfinite(p.y)):
        raise InvalidCoordinateError(f"non-finite point {p}")
    q, r = _nearest_axial(*_fractional_axial(p, res, spec))
    return HexCell(res, q, r)


def latlon_to_cell(lat: float, lon: float, res: int, spec: GridSpec) -> HexCell:
    return point_to_cell(project(lat, lon, spec), res, spec)


def cell_centroid(c: HexCell, spec: GridSpec) -> PlanarPoint:
    e = spec.edge(c.res)
    x = e * 1.5 * c.q
    y = e * SQRT3 * (c.r + c.q / 2.0)
    return PlanarPoint(*_rotate(x, y, spec.rotation(c.res)))


def cell_polygon(c: HexCell, spec: GridSpec) -> list[PlanarPoint]:
    """Six vertices, counterclockwise, starting at the rotated +x corner."""
    center = cell_centroid(c, spec)
    e = spec.edge(c.res)
    base = spec.rotation(c.res)
    return [
        PlanarPoint(center.x + e * math.cos(base + i * math.pi / 3), center.y + e * math.sin(base + i * math.pi / 3))
        for i in range(6)
    ]


def cell_area(c: HexCell, spec: GridSpec) -> float:
    return 1.5 * SQRT3 * spec.edge(c.res) ** 2


def neighbors(c: HexCell) -> list[HexCell]:
    return [HexCell(c.res, c.q + dq, c.r + dr) for dq, dr in DIRECTIONS]


def _same_res(a: HexCell, b: HexCell) -> None:
    if a.res != b.res:
        raise ResolutionError(f"resolution mismatch: {a.res} vs {b.res}")


def hex_distance(a: HexCell, b: HexCell) -> int:
    _same_res(a, b)
    dq, dr = a.q - b.q, a.r - b.r
    return max(abs(dq), abs(dr), abs(dq + dr))


def grid_line(a: HexCell, b: HexCell) -> list[HexCell]:
    """Contiguous cell path from ``a`` to ``b`` inclusive (cube lerp + rounding)."""
    n = hex_distance(a, b)
    if n == 0:
        return [a]
    out = []
    for i in range(n + 1):
        fq = (a.q * (n - i) + b.q * i) / n
        fr = (a.r * (n - i) + b.r * i) / n
        out.append(HexCell(a.res, *_nearest_axial(fq, fr)))
    return out


def hex_disk(center: HexCell, radius: int) -> list[HexCell]:
    """All cells within ``radius`` steps of ``center``, sorted."""
    cells = []
    for dq in range(-radius, radius + 1):
        for dr in range(max(-radius, -dq - radius), min(radius, -dq + radius) + 1):
            cells.append(HexCell(center.res, center.q + dq, center.r + dr))
    return sorted(cells)


def center_child(c: HexCell) -> HexCell:
    q = c.q * _CHILD_OF_Q[0] + c.r * _CHILD_OF_R[0]
    r = c.q * _CHILD_OF_Q[1] + c.r * _CHILD_OF_R[1]
    return HexCell(c.res + 1, q, r)


def parent(c: HexCell, spec: GridSpec) -> HexCell:
    if c.res <= spec.res_min:
        raise ResolutionError(f"cell {c} has no parent above res_min={spec.res_min}")
    return point_to_cell(cell_centroid(c, spec), c.res - 1, spec)


def children(c: HexCell, spec: GridSpec) -> list[HexCell]:
    """The seven cells one level finer whose parent is ``c`` (center child first)."""
    if c.res >= spec.res_max:
        raise ResolutionError(f"cell {c} has no children below res_max={spec.res_max}")
    mid = center_child(c)
    return [mid, *neighbors(mid)]


def ancestor(c: HexCell, res: int, spec: GridSpec) -> HexCell:
    while c.res > res:
        c = parent(c, spec)
    return c


def descendants(c: HexCell, res: int, spec: GridSpec) -> list[HexCell]:
    level = [c]
    while level[0].res < res:
        level = [child for cell in level for child in children(cell, spec)]
    return level

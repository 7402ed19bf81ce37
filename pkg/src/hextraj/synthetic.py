"""Synthetic trajectory generators with known ground-truth dynamics.

All corpora live on a rectangular patch of cells: columns ``q = 0..width-1``
and offset rows ``0..height-1`` (``r = row - q // 2``).  A *direction field*
maps every cell to its successor, or to ``None`` where the walker leaves the
patch and the trajectory ends.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .corpus import HexTrajectory
from .hexgrid import EARTH_RADIUS_M, HexCell

RIGHT_MOVES = ((1, 0), (1, -1))
LEFT_MOVES = ((-1, 0), (-1, 1))


def row_of(c: HexCell) -> int:
    return c.r + c.q // 2


def rect_region(width: int, height: int, res: int = 9) -> list[HexCell]:
    return sorted(HexCell(res, q, row - q // 2) for q in range(width) for row in range(height))


def _options(c: HexCell, moves, region: set) -> list[HexCell]:
    return [n for n in (HexCell(c.res, c.q + dq, c.r + dr) for dq, dr in moves) if n in region]


def direction_field(width: int, height: int, moves, rng: np.random.Generator, res: int = 9) -> dict:
    """Random deterministic successor per cell among the in-patch moves."""
    cells = rect_region(width, height, res)
    region = set(cells)
    field = {}
    for c in cells:
        opts = _options(c, moves, region)
        field[c] = opts[int(rng.integers(len(opts)))] if opts else None
    return field


def walk(field: dict, start: HexCell) -> list[HexCell]:
    cells = [start]
    while field[cells[-1]] is not None:
        cells.append(field[cells[-1]])
    return cells


def _start(rng, width, height, res, min_len, rightward=True) -> HexCell:
    if rightward:
        q = int(rng.integers(0, width - min_len + 1))
    else:
        q = int(rng.integers(min_len - 1, width))
    row = int(rng.integers(height))
    return HexCell(res, q, row - q // 2)


@dataclass
class SyntheticCorpus:
    trajectories: list
    fields: dict  # name -> direction field
    labels: list  # generating field name per trajectory


def turn_rule_corpus(n: int = 500, width: int = 30, height: int = 13, seed: int = 0,
                     res: int = 9, min_len: int = 16) -> SyntheticCorpus:
    """Every trajectory follows one rightward field: the next cell is a function of the current one."""
    rng = np.random.default_rng(seed)
    f = direction_field(width, height, RIGHT_MOVES, rng, res)
    trajs = [HexTrajectory(float(i), walk(f, _start(rng, width, height, res, min_len))) for i in range(n)]
    return SyntheticCorpus(trajs, {"right": f}, ["right"] * n)


def two_way_corpus(n: int = 500, width: int = 30, height: int = 13, seed: int = 0,
                   res: int = 9, min_len: int = 16) -> SyntheticCorpus:
    """Half the walkers follow a rightward field, half a leftward one.

    The successor of a cell depends on the direction of travel, which only
    the previous cell reveals, so a first-order chain cannot resolve it.
    """
    rng = np.random.default_rng(seed)
    fields = {
        "right": direction_field(width, height, RIGHT_MOVES, rng, res),
        "left": direction_field(width, height, LEFT_MOVES, rng, res),
    }
    trajs, labels = [], []
    for i in range(n):
        name = "right" if rng.random() < 0.5 else "left"
        start = _start(rng, width, height, res, min_len, rightward=name == "right")
        trajs.append(HexTrajectory(float(i), walk(fields[name], start)))
        labels.append(name)
    return SyntheticCorpus(trajs, fields, labels)


def junction_corpus(n: int = 300, width: int = 30, height: int = 13, seed: int = 0,
                    junction_frac: float = 0.2, res: int = 9, min_len: int = 16) -> SyntheticCorpus:
    """Two rightward fields that differ only at a fraction of *junction* cells.

    Each walker draws a hidden type and follows that type's field.  The type
    is revealed only by the choice made at a junction, so longer observed
    prefixes and shorter horizons both make the continuation more predictable.
    """
    rng = np.random.default_rng(seed)
    cells = rect_region(width, height, res)
    region = set(cells)
    fa = direction_field(width, height, RIGHT_MOVES, rng, res)
    fb = dict(fa)
    for c in cells:
        opts = _options(c, RIGHT_MOVES, region)
        if len(opts) == 2 and rng.random() < junction_frac:
            fb[c] = opts[1] if fa[c] == opts[0] else opts[0]
    fields = {"a": fa, "b": fb}
    trajs, labels = [], []
    for i in range(n):
        name = "a" if rng.random() < 0.5 else "b"
        start = _start(rng, width, height, res, min_len)
        trajs.append(HexTrajectory(float(i), walk(fields[name], start)))
        labels.append(name)
    return SyntheticCorpus(trajs, fields, labels)


# -- raw GPS fixture ----------------------------------------------------------

def gps_fixture_rows(n: int = 200, seed: int = 7, center=(41.15, -8.61), points: int = 40,
                     step_m: float = 120.0) -> list[tuple]:
    """Smooth random walks around ``center``: rows of ``(entity_id, timestamp, lat, lon)``."""
    rng = np.random.default_rng(seed)
    m_per_deg = EARTH_RADIUS_M * math.pi / 180.0
    lat0, lon0 = center
    rows = []
    for i in range(n):
        x, y = rng.normal(0.0, 1500.0, size=2)
        heading = rng.uniform(0.0, 2 * math.pi)
        t = 1_372_636_800 + int(rng.integers(0, 86_400 * 30))
        for _ in range(points):
            lat = lat0 + y / m_per_deg
            lon = lon0 + x / (m_per_deg * math.cos(math.radians(lat0)))
            rows.append((f"T{i:04d}", t, round(lat, 6), round(lon, 6)))
            heading += rng.normal(0.0, 0.25)
            x += step_m * math.cos(heading)
            y += step_m * math.sin(heading)
            t += 15
    return rows


def write_gps_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "timestamp", "lat", "lon"])
        w.writerows(rows)

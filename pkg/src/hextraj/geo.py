"""GeoJSON export of cells and cell paths (lon/lat order, closed rings)."""

from __future__ import annotations

import json
from typing import Iterable, Sequence

from .hexgrid import GridSpec, HexCell, cell_centroid, cell_polygon, unproject


def _lonlat(p, spec: GridSpec, ndigits: int = 8) -> list[float]:
    lat, lon = unproject(p, spec)
    return [round(lon, ndigits), round(lat, ndigits)]


def cell_feature(c: HexCell, spec: GridSpec, **props) -> dict:
    ring = [_lonlat(v, spec) for v in cell_polygon(c, spec)]
    ring.append(ring[0])
    return {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [ring]},
        "properties": {"token": c.token, "res": c.res, **props},
    }


def centroid_path_feature(cells: Sequence[HexCell], spec: GridSpec, **props) -> dict | None:
    """LineString through the cell centroids; a Point for one cell, ``None`` for none."""
    coords = [_lonlat(cell_centroid(c, spec), spec) for c in cells]
    if not coords:
        return None
    geom = {"type": "Point", "coordinates": coords[0]} if len(coords) == 1 else {
        "type": "LineString", "coordinates": coords}
    return {"type": "Feature", "geometry": geom, "properties": dict(props)}


def feature_collection(features: Iterable[dict | None]) -> dict:
    return {"type": "FeatureCollection", "features": [f for f in features if f is not None]}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"

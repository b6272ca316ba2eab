"""Geodesic primitives: coordinates, tract polygons, road networks.

Everything here works on a spherical Earth in plain lon/lat degrees.  Tract
containment is decided in the lon/lat plane, which is adequate at
census-tract scale.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_SPACING_M = 75.0


class GeometryError(ValueError):
    """Invalid or unsupported geometry."""


@dataclass(frozen=True, order=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "lon", float(self.lon))
        if not (-90.0 <= self.lat <= 90.0):
            raise GeometryError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon < 180.0):
            raise GeometryError(f"longitude out of range: {self.lon}")

    def rounded(self, ndigits: int = 5) -> tuple[float, float]:
        return (round(self.lat, ndigits), round(self.lon, ndigits))

    def to_json(self) -> list[float]:
        # GeoJSON axis order
        return [self.lon, self.lat]


def haversine_distance(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Great-circle distance in meters between two coordinates."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple_ring(xy: Sequence[tuple[float, float]]) -> bool:
    """True when no two non-adjacent edges of a closed ring touch."""
    n = len(xy) - 1
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(xy[i], xy[i + 1], xy[j], xy[j + 1]):
                return False
    return True


@dataclass(frozen=True)
class TractPolygon:
    tract_id: str
    ring: tuple[GeoCoordinate, ...]

    def __post_init__(self):
        ring = tuple(self.ring)
        object.__setattr__(self, "ring", ring)
        if len(ring) < 4:
            raise GeometryError(f"tract {self.tract_id}: ring needs >= 4 vertices")
        if ring[0] != ring[-1]:
            raise GeometryError(f"tract {self.tract_id}: ring is not closed")
        if not is_simple_ring(self.xy):
            raise GeometryError(f"tract {self.tract_id}: ring self-intersects")

    @property
    def xy(self) -> list[tuple[float, float]]:
        return [(c.lon, c.lat) for c in self.ring]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        lons = [c.lon for c in self.ring]
        lats = [c.lat for c in self.ring]
        return min(lons), min(lats), max(lons), max(lats)

    @property
    def centroid(self) -> GeoCoordinate:
        """Area centroid of the ring (shoelace)."""
        xy = self.xy
        a = cx = cy = 0.0
        for (x0, y0), (x1, y1) in zip(xy[:-1], xy[1:]):
            cross = x0 * y1 - x1 * y0
            a += cross
            cx += (x0 + x1) * cross
            cy += (y0 + y1) * cross
        a *= 0.5
        return GeoCoordinate(cy / (6 * a), cx / (6 * a))


@dataclass(frozen=True)
class RoadNetwork:
    segments: tuple[tuple[GeoCoordinate, ...], ...]

    def __post_init__(self):
        segs = tuple(tuple(s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        for s in segs:
            if len(s) < 2:
                raise GeometryError("road polyline needs >= 2 vertices")
            if polyline_length(s) <= 0:
                raise GeometryError("road polyline has zero length")


def polyline_length(line: Sequence[GeoCoordinate]) -> float:
    return sum(haversine_distance(a, b) for a, b in zip(line[:-1], line[1:]))


def _points_on_polyline(line, spacing_m, offset):
    out = []
    target = offset
    walked = 0.0
    total = polyline_length(line)
    # tolerance so an endpoint that is an exact multiple of the spacing survives rounding
    tol = 1e-9 * max(total, spacing_m)
    for a, b in zip(line[:-1], line[1:]):
        seg = haversine_distance(a, b)
        while target <= walked + seg + tol and target <= total + tol:
            f = 0.0 if seg == 0 else min(1.0, (target - walked) / seg)
            out.append(GeoCoordinate(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon)))
            target += spacing_m
        walked += seg
    return out


def sample_road_points(network: RoadNetwork, spacing_m: float = DEFAULT_SPACING_M,
                       seed: int = 0, jitter: bool = False) -> list[GeoCoordinate]:
    """Sample points every ``spacing_m`` meters of arc length along each road.

    Each polyline contributes its start vertex and one point per full spacing
    step; the end vertex is only emitted when it falls on a step.  With
    ``jitter`` the starting phase is drawn uniformly from ``[0, spacing_m)``.
    """
    if spacing_m <= 0:
        raise ValueError("spacing_m must be positive")
    if not 50 <= spacing_m <= 100:
        warnings.warn(f"road sampling spacing {spacing_m} m is outside 50-100 m", stacklevel=2)
    rng = np.random.default_rng(seed)
    points: list[GeoCoordinate] = []
    for line in network.segments:
        offset = float(rng.uniform(0, spacing_m)) if jitter else 0.0
        points.extend(_points_on_polyline(line, spacing_m, offset))
    return points


def _on_segment(px, py, x0, y0, x1, y1, eps=1e-12) -> bool:
    cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    scale = max(abs(x1 - x0), abs(y1 - y0), 1.0)
    if abs(cross) > eps * scale:
        return False
    return (min(x0, x1) - eps <= px <= max(x0, x1) + eps
            and min(y0, y1) - eps <= py <= max(y0, y1) + eps)


def point_in_tract(p: GeoCoordinate, poly: TractPolygon) -> bool:
    """Even-odd ray casting in the lon/lat plane.  Boundary points are inside."""
    x, y = p.lon, p.lat
    minx, miny, maxx, maxy = poly.bbox
    if x < minx or x > maxx or y < miny or y > maxy:
        return False
    xy = poly.xy
    inside = False
    for (x0, y0), (x1, y1) in zip(xy[:-1], xy[1:]):
        if _on_segment(x, y, x0, y0, x1, y1):
            return True
        if (y0 > y) != (y1 > y):
            xcross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xcross:
                inside = not inside
    return inside


def assign_tract(p: GeoCoordinate, tracts: Iterable[TractPolygon]) -> str | None:
    """Tract id containing ``p``; shared boundaries go to the smallest tract_id."""
    hits = [t.tract_id for t in tracts if point_in_tract(p, t)]
    return min(hits) if hits else None


def check_unique_ids(tracts: Sequence[TractPolygon]) -> None:
    seen = set()
    for t in tracts:
        if t.tract_id in seen:
            raise GeometryError(f"duplicate tract_id {t.tract_id!r}")
        seen.add(t.tract_id)


# --- GeoJSON -----------------------------------------------------------------

def _coord(pair) -> GeoCoordinate:
    return GeoCoordinate(lat=float(pair[1]), lon=float(pair[0]))


def tracts_from_geojson(doc: dict) -> list[TractPolygon]:
    if doc.get("type") != "FeatureCollection":
        raise GeometryError("expected a GeoJSON FeatureCollection")
    tracts = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "Polygon":
            raise GeometryError(f"unsupported tract geometry {geom.get('type')!r}")
        rings = geom["coordinates"]
        if len(rings) != 1:
            raise GeometryError("polygons with holes are not supported")
        if "tract_id" not in props:
            raise GeometryError("tract feature lacks a 'tract_id' property")
        tracts.append(TractPolygon(str(props["tract_id"]), tuple(_coord(c) for c in rings[0])))
    check_unique_ids(tracts)
    return tracts


def tracts_to_geojson(tracts: Sequence[TractPolygon], properties: dict | None = None) -> dict:
    properties = properties or {}
    return {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "properties": {"tract_id": t.tract_id, **properties.get(t.tract_id, {})},
                "geometry": {"type": "Polygon", "coordinates": [[c.to_json() for c in t.ring]]},
            }
            for t in tracts
        ],
    }


def roads_from_geojson(doc: dict) -> RoadNetwork:
    lines = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        kind = geom.get("type")
        if kind == "LineString":
            lines.append(tuple(_coord(c) for c in geom["coordinates"]))
        elif kind == "MultiLineString":
            lines.extend(tuple(_coord(c) for c in part) for part in geom["coordinates"])
        else:
            raise GeometryError(f"unsupported road geometry {kind!r}")
    return RoadNetwork(tuple(lines))


def read_tracts(path: str | Path) -> list[TractPolygon]:
    return tracts_from_geojson(json.loads(Path(path).read_text()))


def read_roads(path: str | Path) -> RoadNetwork:
    return roads_from_geojson(json.loads(Path(path).read_text()))

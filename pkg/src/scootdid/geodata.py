"""Planar zone geometry: loading, contiguity, k-nearest connectivity, buffers.

All coordinates are planar meters. Zone ids are treated as strings and zone
order is the file order; every downstream structure indexes zones by that
order, so results are reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.ops import unary_union
from shapely.strtree import STRtree

from .errors import (
    DegenerateDistanceWarning,
    DuplicateIdError,
    EmptyWeightsError,
    GeographicCrsError,
    IslandZoneWarning,
    MalformedGeometryError,
    UnsupportedGeometryTypeError,
)

# Buffers are discretized with 32 segments per quarter circle; a disc buffer
# then carries >= 128 boundary vertices and its area error stays under 0.1%.
BUFFER_QUAD_SEGS = 32


@dataclass(frozen=True)
class Zone:
    """One analysis zone: a simple polygon with a stable id."""

    id: str
    polygon: Polygon
    centroid: tuple[float, float]
    area_km2: float


class ZoneSet:
    """Ordered collection of zones with unique ids."""

    def __init__(self, zones: Sequence[Zone]):
        self.zones = tuple(zones)
        self.index_of = {}
        for i, z in enumerate(self.zones):
            if z.id in self.index_of:
                raise DuplicateIdError(f"duplicate zone id {z.id!r}")
            self.index_of[z.id] = i
        self._tree = None

    def __len__(self) -> int:
        return len(self.zones)

    def __iter__(self):
        return iter(self.zones)

    def __getitem__(self, i: int) -> Zone:
        return self.zones[i]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(z.id for z in self.zones)

    def centroids(self) -> np.ndarray:
        return np.array([z.centroid for z in self.zones], dtype=float)

    def tree(self) -> STRtree:
        if self._tree is None:
            self._tree = STRtree([z.polygon for z in self.zones])
        return self._tree

    def zone_of_point(self, x: float, y: float) -> int | None:
        """Index of the zone containing (x, y); boundary points go to the
        lowest zone index; None when the point is outside every zone."""
        hits = self.tree().query(Point(x, y), predicate="intersects")
        if len(hits) == 0:
            return None
        return int(np.min(hits))


@dataclass(frozen=True)
class Trajectory:
    """A timestamped planar polyline (one vehicle trace)."""

    points: np.ndarray  # (n, 2) meters
    timestamps: np.ndarray  # (n,) seconds, strictly increasing

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        ts = np.asarray(self.timestamps, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise MalformedGeometryError("trajectory needs >= 2 planar points")
        if ts.shape != (pts.shape[0],):
            raise MalformedGeometryError("one timestamp per trajectory point required")
        if not np.all(np.diff(ts) > 0):
            raise MalformedGeometryError("trajectory timestamps must strictly increase")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "timestamps", ts)

    @property
    def length_m(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T)))


class SpatialWeights:
    """Sparse zone-to-zone weights stored as parallel (i, j, w) arrays.

    Entries are kept sorted by (i, j); there are no self-loops and no
    negative weights.
    """

    def __init__(self, n: int, i: np.ndarray, j: np.ndarray, w: np.ndarray,
                 row_standardized: bool = False):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        w = np.asarray(w, dtype=float)
        if not (i.shape == j.shape == w.shape):
            raise ValueError("i, j, w must be the same length")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        if np.any(i == j):
            raise ValueError("self-loops are not allowed")
        keep = w > 0
        i, j, w = i[keep], j[keep], w[keep]
        order = np.lexsort((j, i))
        self.n = int(n)
        self.i = i[order]
        self.j = j[order]
        self.w = w[order]
        self.row_standardized = row_standardized

    @property
    def s0(self) -> float:
        return float(self.w.sum())

    def row_standardize(self) -> "SpatialWeights":
        """Scale each row to sum to one; empty rows stay empty."""
        sums = np.bincount(self.i, weights=self.w, minlength=self.n)
        w = self.w / sums[self.i]
        return SpatialWeights(self.n, self.i, self.j, w, row_standardized=True)

    def to_dense(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        m[self.i, self.j] = self.w
        return m

    def neighbor_sets(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.n)]
        for a, b in zip(self.i, self.j):
            out[int(a)].add(int(b))
            out[int(b)].add(int(a))
        return out


def _feature_polygon(feature: dict, pos: int) -> Polygon:
    geom = feature.get("geometry") or {}
    gtype = geom.get("type")
    if gtype != "Polygon":
        raise UnsupportedGeometryTypeError(
            f"feature {pos}: geometry type {gtype!r} not supported (simple Polygon only)")
    rings = geom.get("coordinates") or []
    if len(rings) != 1:
        raise UnsupportedGeometryTypeError(
            f"feature {pos}: polygons with interior rings are not supported")
    ring = rings[0]
    if len(ring) < 4 or list(ring[0]) != list(ring[-1]):
        raise MalformedGeometryError(f"feature {pos}: exterior ring is not closed")
    poly = Polygon(ring)
    if not poly.is_valid or poly.area <= 0:
        raise MalformedGeometryError(f"feature {pos}: invalid or zero-area polygon")
    return poly


def _check_planar(doc: dict) -> None:
    crs = doc.get("crs")
    if crs is None:
        return
    name = ""
    if isinstance(crs, dict):
        name = str((crs.get("properties") or {}).get("name", ""))
    geographic = ("4326" in name) or ("CRS84" in name.upper()) or ("WGS" in name.upper())
    if geographic:
        raise GeographicCrsError(
            f"zones declare geographic CRS {name!r}; project to planar meters first")


def load_zones(source) -> ZoneSet:
    """Read zones from a GeoJSON FeatureCollection (path or parsed dict).

    Every feature must be a simple polygon with a unique ``id`` property.
    Coordinates must be planar meters; a declared lon/lat CRS is refused.
    """
    if isinstance(source, (str, bytes)):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = source
    if doc.get("type") != "FeatureCollection":
        raise MalformedGeometryError("expected a GeoJSON FeatureCollection")
    _check_planar(doc)
    zones = []
    for pos, feature in enumerate(doc.get("features", [])):
        props = feature.get("properties") or {}
        zid = props.get("id", feature.get("id"))
        if zid is None:
            raise MalformedGeometryError(f"feature {pos} has no id property")
        poly = _feature_polygon(feature, pos)
        c = poly.centroid
        zones.append(Zone(id=str(zid), polygon=poly, centroid=(c.x, c.y),
                          area_km2=poly.area / 1e6))
    return ZoneSet(zones)


def zones_to_geojson(zones: ZoneSet, properties: dict[str, dict] | None = None) -> dict:
    """Serialize zones back to a FeatureCollection; extra per-zone properties
    are merged in by zone id."""
    feats = []
    for z in zones:
        props = {"id": z.id}
        if properties and z.id in properties:
            props.update(properties[z.id])
        coords = [[list(pt) for pt in z.polygon.exterior.coords]]
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Polygon", "coordinates": coords}})
    return {"type": "FeatureCollection", "features": feats}


def polygon_to_geojson(poly) -> dict:
    """Serialize a (multi)polygon for emitted buffer artifacts."""
    if poly.geom_type == "Polygon":
        geoms = [poly]
    else:
        geoms = list(poly.geoms)
    feats = []
    for g in geoms:
        coords = [[list(pt) for pt in g.exterior.coords]]
        coords += [[list(pt) for pt in ring.coords] for ring in g.interiors]
        feats.append({"type": "Feature", "properties": {},
                      "geometry": {"type": "Polygon", "coordinates": coords}})
    return {"type": "FeatureCollection", "features": feats}


def contiguity_weights(zones: ZoneSet, rule: str = "queen",
                       row_standardize: bool = True) -> SpatialWeights:
    """Adjacency weights: queen = any shared boundary point, rook = shared
    boundary segment of positive length. Islands stay as empty rows and emit
    a warning."""
    if rule not in ("queen", "rook"):
        raise ValueError(f"rule must be 'queen' or 'rook', got {rule!r}")
    n = len(zones)
    tree = zones.tree()
    ii: list[int] = []
    jj: list[int] = []
    for a in range(n):
        hits = tree.query(zones[a].polygon, predicate="intersects")
        for b in sorted(int(h) for h in hits):
            if b <= a:
                continue
            pa, pb = zones[a].polygon, zones[b].polygon
            if rule == "queen":
                touch = pa.intersects(pb)
            else:
                touch = pa.boundary.intersection(pb.boundary).length > 0
            if touch:
                ii += [a, b]
                jj += [b, a]
    if not ii:
        raise EmptyWeightsError("no contiguous zone pairs found")
    linked = set(ii)
    for a in range(n):
        if a not in linked:
            warnings.warn(f"zone {zones[a].id} has no {rule} neighbors",
                          IslandZoneWarning, stacklevel=2)
    w = SpatialWeights(n, np.array(ii), np.array(jj), np.ones(len(ii)))
    return w.row_standardize() if row_standardize else w


def knn_connectivity(zones: ZoneSet | np.ndarray, k: int) -> SpatialWeights:
    """Symmetric binary k-nearest-neighbor graph over zone centroids.

    Distance ties are broken by zone order; the directed kNN relation is
    symmetrized by union, so degrees can exceed k.
    """
    pts = zones.centroids() if isinstance(zones, ZoneSet) else np.asarray(zones, float)
    n = pts.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    if np.any(d2 == 0):
        warnings.warn("coincident centroids: nearest-neighbor ties broken by zone order",
                      DegenerateDistanceWarning, stacklevel=2)
    pairs: set[tuple[int, int]] = set()
    for a in range(n):
        # stable argsort on distance keeps the lowest index on ties
        order = np.argsort(d2[a], kind="stable")[:k]
        for b in order:
            pairs.add((min(a, int(b)), max(a, int(b))))
    ii = []
    jj = []
    for a, b in sorted(pairs):
        ii += [a, b]
        jj += [b, a]
    return SpatialWeights(n, np.array(ii), np.array(jj), np.ones(len(ii)))


def buffer_trajectory(traj: Trajectory | np.ndarray, radius_m: float):
    """Round-capped buffer polygon of radius ``radius_m`` around a polyline."""
    if radius_m <= 0:
        raise ValueError("buffer radius must be positive")
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, float)
    line = LineString(pts)
    if line.length == 0:
        return Point(pts[0]).buffer(radius_m, quad_segs=BUFFER_QUAD_SEGS)
    return line.buffer(radius_m, quad_segs=BUFFER_QUAD_SEGS)


def buffer_union(trajectories: Iterable, radius_m: float, endpoints_only: bool = False):
    """Union of buffers around many trajectories.

    With ``endpoints_only`` the buffer covers just trip endpoints instead of
    the full polylines (a sensitivity mode for sparse traces).
    """
    parts = []
    for t in trajectories:
        pts = t.points if isinstance(t, Trajectory) else np.asarray(t, float)
        if endpoints_only:
            parts.append(Point(pts[0]).buffer(radius_m, quad_segs=BUFFER_QUAD_SEGS))
            parts.append(Point(pts[-1]).buffer(radius_m, quad_segs=BUFFER_QUAD_SEGS))
        else:
            parts.append(buffer_trajectory(pts, radius_m))
    if not parts:
        return Polygon()
    return unary_union(parts)


def zones_intersecting(zones: ZoneSet, polygon) -> list[str]:
    """Ids of zones whose polygon intersects ``polygon`` (touching counts),
    in zone order."""
    if polygon.is_empty:
        return []
    hits = zones.tree().query(polygon, predicate="intersects")
    return [zones[int(h)].id for h in sorted(hits)]


def disc_area(radius_m: float) -> float:
    """Analytic disc area, kept here for buffer-accuracy checks."""
    return math.pi * radius_m * radius_m

"""Polygonal spatial domain: regions, adjacency, centroids, integration grid.

Regions come from a GeoJSON-style feature collection (WGS84 lon/lat).
Distances are plain Euclidean in degrees throughout; at city scale the
metric distortion is second-order and this matches how the event
coordinates are recorded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Shared-boundary tolerance for adjacency, in degrees.
ADJACENCY_TOL = 1e-9
# A point this close to a polygon edge counts as lying on the boundary.
BOUNDARY_TOL = 1e-12


class RegionParseError(ValueError):
    """Raised for malformed geometry or schema problems in a region file."""


class GridConfigError(ValueError):
    """Raised when grid construction parameters are unusable."""


@dataclass(frozen=True)
class Region:
    id: str
    rings: tuple  # tuple of (k,2) float arrays, open (no repeated last vertex)
    centroid: np.ndarray  # (2,)
    covariates: np.ndarray  # (L,)


@dataclass
class RegionSet:
    """Immutable set of polygonal subregions with covariates and adjacency."""

    regions: list  # list[Region], sorted by id
    covariate_names: list
    adjacency: dict  # id -> frozenset of neighbor ids

    index: dict = field(init=False)  # id -> position in self.regions
    centroids: np.ndarray = field(init=False)  # (J,2)
    covariate_matrix: np.ndarray = field(init=False)  # (J,L)
    bbox: tuple = field(init=False)  # (lo (2,), hi (2,))

    def __post_init__(self):
        self.index = {r.id: k for k, r in enumerate(self.regions)}
        self.centroids = np.array([r.centroid for r in self.regions], dtype=float)
        L = len(self.covariate_names)
        self.covariate_matrix = np.array(
            [r.covariates for r in self.regions], dtype=float
        ).reshape(len(self.regions), L)
        pts = np.vstack([ring for r in self.regions for ring in r.rings])
        self.bbox = (pts.min(axis=0), pts.max(axis=0))

    def __len__(self):
        return len(self.regions)

    @property
    def ids(self):
        return [r.id for r in self.regions]

    def neighbors_index(self, region_idx: int) -> np.ndarray:
        """Indices of the region itself plus its adjacent regions, sorted."""
        rid = self.regions[region_idx].id
        ids = {rid} | set(self.adjacency[rid])
        return np.array(sorted(self.index[i] for i in ids), dtype=int)


@dataclass
class IntensityGrid:
    """Regular lattice of cell centers with precomputed region lookups.

    Cells outside every polygon keep region index -1 and are excluded
    from the domain area and from all integrals.
    """

    spacing: float
    centers: np.ndarray  # (ncells, 2) all bbox cells
    region_idx: np.ndarray  # (ncells,) int, -1 outside the domain
    neighbor_sets: list  # per cell: int array of region indices N(u) ([] outside)
    distances: list  # per cell: float array d(u, c_j) aligned with neighbor_sets
    area: float  # |S|
    bbox: tuple

    @property
    def inside(self) -> np.ndarray:
        return self.region_idx >= 0

    @property
    def inside_centers(self) -> np.ndarray:
        return self.centers[self.inside]

    @property
    def n_inside(self) -> int:
        return int(np.count_nonzero(self.inside))

    @property
    def cell_area(self) -> float:
        return self.spacing * self.spacing


def _polygon_area_centroid(ring: np.ndarray):
    """Signed shoelace area and centroid of one open ring."""
    x, y = ring[:, 0], ring[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-30:
        raise RegionParseError("degenerate polygon with zero area")
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def _region_centroid(rings) -> np.ndarray:
    total = 0.0
    acc = np.zeros(2)
    for ring in rings:
        a, c = _polygon_area_centroid(ring)
        a = abs(a)
        total += a
        acc += a * c
    return acc / total


def _point_in_ring(p, ring: np.ndarray) -> bool:
    """Even-odd (ray casting) containment test for one open ring."""
    x, y = p
    inside = False
    n = len(ring)
    x1, y1 = ring[-1]
    for i in range(n):
        x2, y2 = ring[i]
        if (y1 > y) != (y2 > y):
            xcross = (x2 - x1) * (y - y1) / (y2 - y1) + x1
            if x < xcross:
                inside = not inside
        x1, y1 = x2, y2
    return inside


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    proj = a + t * ab
    return float(np.hypot(*(p - proj)))


def _point_on_boundary(p, rings, tol: float) -> bool:
    p = np.asarray(p, dtype=float)
    for ring in rings:
        closed = np.vstack([ring, ring[:1]])
        for a, b in zip(closed[:-1], closed[1:]):
            if _point_segment_dist(p, a, b) <= tol:
                return True
    return False


def point_in_region(p, region: Region) -> bool:
    """Even-odd containment across the region's rings; boundary counts."""
    parity = sum(_point_in_ring(p, ring) for ring in region.rings) % 2 == 1
    return parity or _point_on_boundary(p, region.rings, BOUNDARY_TOL)


def region_of(point, regions: RegionSet):
    """Id of the region containing ``point``, or None.

    Regions are scanned in ascending id order, so a point on a shared
    boundary deterministically resolves to the lowest id.
    """
    p = np.asarray(point, dtype=float)
    for region in regions.regions:
        if point_in_region(p, region):
            return region.id
    return None


def _points_in_rings(points: np.ndarray, rings) -> np.ndarray:
    """Vectorized even-odd test of many points against one region."""
    xs, ys = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    for ring in rings:
        x1 = ring[:, 0]
        y1 = ring[:, 1]
        x2 = np.roll(x1, -1)
        y2 = np.roll(y1, -1)
        for k in range(len(ring)):
            crosses = (y1[k] > ys) != (y2[k] > ys)
            if not crosses.any():
                continue
            xc = (x2[k] - x1[k]) * (ys - y1[k]) / (y2[k] - y1[k]) + x1[k]
            inside ^= crosses & (xs < xc)
    return inside


def region_index_batch(points, regions: RegionSet) -> np.ndarray:
    """Region index per point (-1 outside); vectorized interior test.

    Interior points agree with :func:`region_of`; exact-boundary points
    (a measure-zero set for continuous samples) may fall to -1 here, so
    callers needing the boundary tie-break must use :func:`region_of`.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.full(len(points), -1, dtype=int)
    todo = np.ones(len(points), dtype=bool)
    for idx, region in enumerate(regions.regions):
        if not todo.any():
            break
        lo, hi = _rings_bbox(region.rings)
        cand = todo & (points[:, 0] >= lo[0]) & (points[:, 0] <= hi[0]) \
            & (points[:, 1] >= lo[1]) & (points[:, 1] <= hi[1])
        if not cand.any():
            continue
        hit = _points_in_rings(points[cand], region.rings)
        sel = np.flatnonzero(cand)[hit]
        out[sel] = idx
        todo[sel] = False
    return out


def distance_to_region(point, region: Region) -> float:
    """Euclidean distance from a point to the region (0 inside)."""
    p = np.asarray(point, dtype=float)
    if point_in_region(p, region):
        return 0.0
    best = math.inf
    for ring in region.rings:
        closed = np.vstack([ring, ring[:1]])
        for a, b in zip(closed[:-1], closed[1:]):
            best = min(best, _point_segment_dist(p, a, b))
    return best


def nearest_region_index(point, regions: RegionSet) -> int:
    dists = [distance_to_region(point, r) for r in regions.regions]
    return int(np.argmin(dists))


def _rings_bbox(rings):
    pts = np.vstack(rings)
    return pts.min(axis=0), pts.max(axis=0)


def _share_boundary(rings_a, rings_b, tol: float) -> bool:
    """True if any vertex of one polygon lies on the other's boundary.

    Covers shared vertices and (partially) shared segments: collinear
    overlapping segments always place at least one endpoint of one
    segment inside the other.
    """
    for src, dst in ((rings_a, rings_b), (rings_b, rings_a)):
        for ring in src:
            for v in ring:
                if _point_on_boundary(v, dst, tol):
                    return True
    return False


def _parse_feature(feature, covariate_names):
    props = feature.get("properties") or {}
    fid = props.get("id")
    if fid is None or not isinstance(fid, str):
        raise RegionParseError("feature is missing a string 'id' property")
    geom = feature.get("geometry") or {}
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        polys = [coords]
    elif gtype == "MultiPolygon":
        polys = coords
    else:
        raise RegionParseError(f"feature {fid!r}: unsupported geometry type {gtype!r}")

    rings = []
    for poly in polys:
        if not poly:
            raise RegionParseError(f"feature {fid!r}: empty polygon")
        if len(poly) > 1:
            raise RegionParseError(f"feature {fid!r}: interior rings are not supported")
        ring = np.asarray(poly[0], dtype=float)
        if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 4:
            raise RegionParseError(f"feature {fid!r}: malformed ring")
        if not np.allclose(ring[0], ring[-1], atol=1e-12):
            raise RegionParseError(f"feature {fid!r}: ring is not closed")
        if not np.isfinite(ring).all():
            raise RegionParseError(f"feature {fid!r}: non-finite coordinates")
        rings.append(ring[:-1])

    covs = []
    for name in covariate_names:
        if name not in props:
            raise RegionParseError(f"feature {fid!r}: missing covariate column {name!r}")
        v = props[name]
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise RegionParseError(f"feature {fid!r}: covariate {name!r} is not numeric")
        covs.append(float(v))
    return fid, tuple(rings), np.array(covs, dtype=float)


def regions_from_geojson(obj, covariate_names=None) -> RegionSet:
    """Build a RegionSet from a parsed feature-collection dict."""
    features = obj.get("features")
    if not features:
        raise RegionParseError("feature collection has no features")

    if covariate_names is None:
        # Every numeric property (besides id) common to all features.
        common = None
        for f in features:
            props = f.get("properties") or {}
            numeric = {
                k
                for k, v in props.items()
                if k != "id" and isinstance(v, (int, float)) and not isinstance(v, bool)
            }
            common = numeric if common is None else (common & numeric)
        covariate_names = sorted(common or ())

    parsed = [_parse_feature(f, covariate_names) for f in features]
    ids = [p[0] for p in parsed]
    if len(set(ids)) != len(ids):
        raise RegionParseError("duplicate region ids")
    parsed.sort(key=lambda p: p[0])

    regions = [
        Region(id=fid, rings=rings, centroid=_region_centroid(rings), covariates=covs)
        for fid, rings, covs in parsed
    ]

    # Adjacency by shared boundary, with a bbox prefilter.
    boxes = [_rings_bbox(r.rings) for r in regions]
    adjacency = {r.id: set() for r in regions}
    for i in range(len(regions)):
        lo_i, hi_i = boxes[i]
        for j in range(i + 1, len(regions)):
            lo_j, hi_j = boxes[j]
            if (lo_i > hi_j + ADJACENCY_TOL).any() or (lo_j > hi_i + ADJACENCY_TOL).any():
                continue
            if _share_boundary(regions[i].rings, regions[j].rings, ADJACENCY_TOL):
                adjacency[regions[i].id].add(regions[j].id)
                adjacency[regions[j].id].add(regions[i].id)
    adjacency = {k: frozenset(v) for k, v in adjacency.items()}

    rs = RegionSet(regions=regions, covariate_names=list(covariate_names), adjacency=adjacency)
    for r in rs.regions:
        lo, hi = _rings_bbox(r.rings)
        if not ((lo <= r.centroid).all() and (r.centroid <= hi).all()):
            raise RegionParseError(f"feature {r.id!r}: centroid outside bounding box")
    return rs


def load_regions(path, covariate_names=None) -> RegionSet:
    """Load a RegionSet from a GeoJSON-style feature collection file."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RegionParseError(f"{path}: not valid JSON ({exc})") from exc
    return regions_from_geojson(obj, covariate_names)


def build_grid(regions: RegionSet, spacing: float) -> IntensityGrid:
    """Overlay a regular grid on the domain bounding box.

    Cell centers sit at half-spacing offsets.  Each in-domain cell stores
    its neighborhood N(u) (containing region plus adjacency) and the
    distances to those regions' centroids, so per-step integrals only
    re-plug coefficient values.
    """
    if spacing <= 0:
        raise GridConfigError("spacing must be positive")
    lo, hi = regions.bbox
    extent = hi - lo
    if spacing > extent.max():
        raise GridConfigError(
            f"spacing {spacing} exceeds the domain extent {extent.max():.6g}"
        )
    nx = max(1, math.ceil(extent[0] / spacing - 1e-9))
    ny = max(1, math.ceil(extent[1] / spacing - 1e-9))
    xs = lo[0] + spacing * (np.arange(nx) + 0.5)
    ys = lo[1] + spacing * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    region_idx = np.full(len(centers), -1, dtype=int)
    neighbor_sets = []
    distances = []
    for k, u in enumerate(centers):
        rid = region_of(u, regions)
        if rid is None:
            neighbor_sets.append(np.empty(0, dtype=int))
            distances.append(np.empty(0))
            continue
        ridx = regions.index[rid]
        region_idx[k] = ridx
        nbr = regions.neighbors_index(ridx)
        neighbor_sets.append(nbr)
        distances.append(np.hypot(*(regions.centroids[nbr] - u).T))

    area = float(np.count_nonzero(region_idx >= 0)) * spacing * spacing
    return IntensityGrid(
        spacing=spacing,
        centers=centers,
        region_idx=region_idx,
        neighbor_sets=neighbor_sets,
        distances=distances,
        area=area,
        bbox=regions.bbox,
    )

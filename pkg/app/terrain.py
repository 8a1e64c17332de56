"""DTM triangulation, signed mesh-to-mesh distance, rate fields, significant regions and volumes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree

from app.cloud import PointCloud, parse_mesh_ply, write_mesh_ply
from app.errors import DegenerateSurface, EmptyMeshError, InvalidPlane, NoValidValues, ParameterError
from app.models.report import RegionRecord

logger = logging.getLogger(__name__)

# closest-feature codes returned by closest_point_on_triangles
FACE, EDGE_AB, EDGE_BC, EDGE_CA, VERTEX_A, VERTEX_B, VERTEX_C = range(7)


@dataclass(frozen=True, eq=False)
class Plane:
    """Oriented plane ``normal . p == offset``; the normal never points downward."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(normal)
        if not np.isfinite(length) or length == 0 or not np.isfinite(self.offset):
            raise InvalidPlane("plane needs a finite non-zero normal and finite offset")
        normal = normal / length
        offset = float(self.offset) / length
        # z up; vertical planes fall back to the first non-zero component
        lead = normal[2] if abs(normal[2]) > 1e-12 else normal[np.flatnonzero(np.abs(normal) > 1e-12)[0]]
        if lead < 0:
            normal, offset = -normal, -offset
        normal.flags.writeable = False
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def fit(cls, points: np.ndarray) -> Plane:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) < 3:
            raise InvalidPlane(f"a plane needs at least 3 points, got {len(points)}")
        center = points.mean(axis=0)
        _, s, vt = np.linalg.svd(points - center, full_matrices=False)
        if s[0] == 0 or s[1] <= 1e-12 * s[0]:
            raise InvalidPlane("points are collinear")
        return cls(vt[-1], float(vt[-1] @ center))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane axes: e1 follows the projected x axis (y for planes facing x), e2 = n x e1."""
        for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            e1 = axis - (axis @ self.normal) * self.normal
            if np.linalg.norm(e1) > 1e-6:
                e1 /= np.linalg.norm(e1)
                return e1, np.cross(self.normal, e1)
        raise InvalidPlane("no in-plane basis")

    def project(self, points: np.ndarray) -> np.ndarray:
        e1, e2 = self.basis()
        rel = np.asarray(points, dtype=np.float64) - self.offset * self.normal
        return np.column_stack([rel @ e1, rel @ e2])

    def to_plane_coords(self, vectors: np.ndarray) -> np.ndarray:
        """In-plane components of free vectors."""
        e1, e2 = self.basis()
        vectors = np.asarray(vectors, dtype=np.float64)
        return np.stack([vectors @ e1, vectors @ e2], axis=-1)

    def from_plane_coords(self, coords: np.ndarray) -> np.ndarray:
        e1, e2 = self.basis()
        coords = np.asarray(coords, dtype=np.float64)
        return coords[..., :1] * e1 + coords[..., 1:2] * e2

    def downslope(self) -> np.ndarray | None:
        """Unit steepest-descent direction within the plane, None for a level plane."""
        down = np.array([0.0, 0.0, -1.0])
        along = down - (down @ self.normal) * self.normal
        length = np.linalg.norm(along)
        if length < 1e-9:
            return None
        return along / length

    def shifted(self, delta: np.ndarray) -> Plane:
        """The same plane written for coordinates reduced by ``delta``."""
        return Plane(self.normal, self.offset - float(self.normal @ np.asarray(delta, dtype=np.float64)))

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in (*self.normal, self.offset))

    @classmethod
    def from_text(cls, text: str) -> Plane:
        values = [float(v) for v in text.split()]
        if len(values) != 4:
            raise InvalidPlane(f"expected 4 numbers, got {len(values)}")
        return cls(values[:3], values[3])


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    projection_plane: Plane
    origin_shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    epoch_id: str = ""

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ParameterError("triangle index outside the vertex list")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "origin_shift", np.asarray(self.origin_shift, dtype=np.float64).reshape(3))

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def projected_areas(self) -> np.ndarray:
        a, b, c = (self.projection_plane.project(p) for p in self.corners())
        ab, ac = b - a, c - a
        return 0.5 * np.abs(ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])

    def triangle_normals(self) -> np.ndarray:
        """Unit normals turned toward the projection plane's normal side."""
        a, b, c = self.corners()
        normals = np.cross(b - a, c - a)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        flip = normals @ self.projection_plane.normal < 0
        normals[flip] *= -1.0
        return normals

    def vertex_areas(self) -> np.ndarray:
        """A third of the 3D area of every triangle around each vertex."""
        areas = np.repeat(self.triangle_areas()[:, np.newaxis], 3, axis=1)
        return np.bincount(self.triangles.reshape(-1), areas.reshape(-1), minlength=len(self.vertices)) / 3.0

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (sorted pairs) and how many triangles use each."""
        t = self.triangles
        pairs = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(pairs, axis=0, return_counts=True)

    def boundary_vertices(self) -> np.ndarray:
        edges, counts = self.edges()
        mask = np.zeros(len(self.vertices), dtype=bool)
        mask[edges[counts == 1].reshape(-1)] = True
        return mask

    def to_ply(self, scalars: dict[str, np.ndarray] | None = None, binary: bool = True) -> bytes:
        cloud = PointCloud(
            points=self.vertices, scalars=scalars or {}, epoch_id=self.epoch_id, origin_shift=self.origin_shift
        )
        plane = self.projection_plane.shifted(-self.origin_shift)
        return write_mesh_ply(cloud, self.triangles, {"projection_plane": plane.to_text()}, binary=binary)

    @classmethod
    def from_ply(cls, data: bytes) -> tuple[TriangleMesh, dict[str, np.ndarray]]:
        """Mesh and its per-vertex scalar channels."""
        mesh, scalars, _ = _read_mesh(data)
        return mesh, scalars


def _read_mesh(data: bytes) -> tuple[TriangleMesh, dict[str, np.ndarray], dict[str, str]]:
    cloud, triangles, meta = parse_mesh_ply(data)
    if "projection_plane" in meta:
        plane = Plane.from_text(meta["projection_plane"]).shifted(cloud.origin_shift)
    else:
        plane = Plane.fit(cloud.points)
    mesh = TriangleMesh(cloud.points, triangles, plane, cloud.origin_shift, cloud.epoch_id)
    return mesh, dict(cloud.scalars), meta


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Signed per-vertex displacement of a compared mesh; deposition positive."""

    values: np.ndarray
    valid: np.ndarray
    interval_days: float
    compared_epoch: str = ""
    reference_epoch: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(values) != len(valid):
            raise ParameterError("values and validity mask differ in length")
        if not self.interval_days > 0:
            raise ParameterError("interval_days must be positive")
        valid = valid & np.isfinite(values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class FieldStats:
    mean: float
    std: float
    valid_count: int


@dataclass(frozen=True, eq=False)
class Region:
    region_id: int
    vertex_set: np.ndarray
    area_m2: float
    mean_rate_mm_day: float
    volume_m3: float = float("nan")
    mean_displacement_m: float = float("nan")
    compared_epoch: str = ""
    reference_epoch: str = ""
    W_m: float | None = None
    L_m: float | None = None


def build_dtm(
    ground: PointCloud,
    projection_plane: Plane | None = None,
    max_edge: float = 2.0,
) -> TriangleMesh:
    """2.5D Delaunay TIN over the projection plane, keeping the original 3D vertices.

    Later points that project onto an earlier point are dropped; triangles with zero
    area or with a 3D edge longer than ``max_edge`` are discarded so data gaps stay open.
    """
    if len(ground) < 3:
        raise DegenerateSurface(f"need at least 3 points, got {len(ground)}")
    if projection_plane is None:
        try:
            projection_plane = Plane.fit(ground.points)
        except InvalidPlane as exc:
            raise DegenerateSurface(str(exc)) from exc
    uv = projection_plane.project(ground.points)
    _, first = np.unique(uv, axis=0, return_index=True)
    keep = np.sort(first)
    if len(keep) < len(ground):
        logger.warning("dropped %d duplicate projected points", len(ground) - len(keep))
    if len(keep) < 3:
        raise DegenerateSurface("fewer than 3 distinct projected points")
    try:
        triangulation = Delaunay(uv[keep])
    except QhullError as exc:
        raise DegenerateSurface("points are collinear in projection") from exc

    triangles = triangulation.simplices.astype(np.int64)
    flat = uv[keep]
    a, b, c = flat[triangles[:, 0]], flat[triangles[:, 1]], flat[triangles[:, 2]]
    signed = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    clockwise = signed < 0
    triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]

    vertices = ground.points[keep]
    p, q, r = vertices[triangles[:, 0]], vertices[triangles[:, 1]], vertices[triangles[:, 2]]
    longest = np.max(np.stack([
        np.linalg.norm(q - p, axis=1), np.linalg.norm(r - q, axis=1), np.linalg.norm(p - r, axis=1),
    ]), axis=0)
    scale = max(float(np.ptp(flat, axis=0).max()), 1.0)
    good = (np.abs(signed) > 1e-12 * scale * scale) & (longest <= max_edge)
    if not good.all():
        logger.info("discarded %d of %d triangles (degenerate or edge > %.2f m)", int((~good).sum()), len(good), max_edge)
    return TriangleMesh(vertices, triangles[good], projection_plane, ground.origin_shift, ground.epoch_id)


def closest_point_on_triangles(
    points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on each triangle (a, b, c) to the matching query and the feature it lies on."""
    result = np.zeros_like(points)
    code = np.full(len(points), FACE)
    remain = np.ones(len(points), dtype=bool)

    def settle(mask: np.ndarray, value: np.ndarray, feature: int) -> None:
        nonlocal remain
        mask = mask & remain
        result[mask] = value[mask]
        code[mask] = feature
        remain = remain & ~mask

    def dot(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", u, v)

    ab, ac = b - a, c - a
    ap, bp, cp = points - a, points - b, points - c
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        settle((d1 <= 0) & (d2 <= 0), a, VERTEX_A)
        settle((d3 >= 0) & (d4 <= d3), b, VERTEX_B)
        v = d1 / (d1 - d3)
        settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, EDGE_AB)
        settle((d6 >= 0) & (d5 <= d6), c, VERTEX_C)
        w = d2 / (d2 - d6)
        settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, EDGE_CA)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        settle((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b), EDGE_BC)
        denom = va + vb + vc
        v, w = vb / denom, vc / denom
        settle(np.ones(len(points), dtype=bool), a + v[:, None] * ab + w[:, None] * ac, FACE)
    return result, code


def mesh_distance(
    compared: TriangleMesh,
    reference: TriangleMesh,
    max_dist: float = 5.0,
    interval_days: float = 1.0,
    edge_tolerance: float | None = 0.1,
) -> DeformationField:
    """Signed distance from each compared vertex to the nearest point of the reference surface.

    A vertex is invalid when the distance exceeds ``max_dist`` or when its closest
    reference point sits on the reference boundary more than ``edge_tolerance`` away
    within the plane (the vertex is outside the reference coverage or over a hole).
    Raw values are kept for invalid vertices.
    """
    if len(reference.triangles) == 0:
        raise EmptyMeshError("reference mesh has no triangles")
    if interval_days <= 0:
        raise ParameterError("interval_days must be positive")
    queries = compared.vertices + compared.origin_shift - reference.origin_shift
    a, b, c = reference.corners()
    centroids = (a + b + c) / 3.0
    reach = np.max(np.stack([np.linalg.norm(x - centroids, axis=1) for x in (a, b, c)]), axis=0).max()
    used = np.unique(reference.triangles)
    nearest_vertex, _ = cKDTree(reference.vertices[used]).query(queries)
    candidates = cKDTree(centroids).query_ball_point(queries, r=nearest_vertex + reach * (1 + 1e-9) + 1e-12)

    counts = np.array([len(cands) for cands in candidates])
    query_idx = np.repeat(np.arange(len(queries)), counts)
    tri_idx = np.concatenate([np.asarray(cands, dtype=np.int64) for cands in candidates]) if len(queries) else np.empty(0, np.int64)
    closest, code = closest_point_on_triangles(queries[query_idx], a[tri_idx], b[tri_idx], c[tri_idx])
    dist = np.linalg.norm(queries[query_idx] - closest, axis=1)

    order = np.lexsort((tri_idx, dist, query_idx))
    first = np.ones(len(order), dtype=bool)
    first[1:] = query_idx[order][1:] != query_idx[order][:-1]
    best = order[first]

    normals = reference.triangle_normals()[tri_idx[best]]
    offset = queries - closest[best]
    sign = np.where(np.einsum("ij,ij->i", offset, normals) >= 0, 1.0, -1.0)
    values = sign * dist[best]
    valid = np.abs(values) <= max_dist

    if edge_tolerance is not None:
        boundary = reference.boundary_vertices()
        t = reference.triangles[tri_idx[best]]
        feature = code[best]
        on_boundary = np.zeros(len(best), dtype=bool)
        for feature_code, (i, j) in ((EDGE_AB, (0, 1)), (EDGE_BC, (1, 2)), (EDGE_CA, (2, 0))):
            hit = feature == feature_code
            on_boundary[hit] = _is_boundary_edge(reference, t[hit, i], t[hit, j])
        for feature_code, i in ((VERTEX_A, 0), (VERTEX_B, 1), (VERTEX_C, 2)):
            hit = feature == feature_code
            on_boundary[hit] = boundary[t[hit, i]]
        n = reference.projection_plane.normal
        in_plane = np.linalg.norm(offset - np.outer(offset @ n, n), axis=1)
        uncovered = on_boundary & (in_plane > edge_tolerance)
        valid &= ~uncovered

    invalid = int((~valid).sum())
    if invalid:
        logger.info("%d of %d compared vertices masked (distance or coverage)", invalid, len(values))
    return DeformationField(values, valid, interval_days, compared.epoch_id, reference.epoch_id)


def _is_boundary_edge(mesh: TriangleMesh, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    edges, counts = mesh.edges()
    boundary = edges[counts == 1]
    if len(boundary) == 0 or len(i) == 0:
        return np.zeros(len(i), dtype=bool)
    n = len(mesh.vertices)
    keys = np.sort(boundary[:, 0] * n + boundary[:, 1])
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    query_keys = lo * n + hi
    pos = np.clip(np.searchsorted(keys, query_keys), 0, len(keys) - 1)
    return keys[pos] == query_keys


def field_stats(field: DeformationField, masked: bool = True) -> FieldStats:
    """Mean and population standard deviation, over valid vertices unless ``masked`` is False."""
    selected = field.valid if masked else np.isfinite(field.values)
    values = field.values[selected]
    if len(values) == 0:
        raise NoValidValues("deformation field has no valid vertices")
    mean = float(np.mean(values))
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    return FieldStats(mean=mean, std=std, valid_count=int(len(values)))


def rate_field(field: DeformationField) -> np.ndarray:
    """Displacement magnitude rate in mm/day; NaN on invalid vertices."""
    if not field.interval_days > 0:
        raise ParameterError("interval_days must be positive")
    rates = np.full(len(field), np.nan)
    rates[field.valid] = 1000.0 * np.abs(field.values[field.valid]) / field.interval_days
    return rates


def significant_regions(
    mesh: TriangleMesh,
    rates: np.ndarray,
    threshold_mm_day: float = 2.0,
    min_area_m2: float = 25.0,
) -> list[Region]:
    """Edge-connected groups of vertices rating above the threshold, largest first."""
    rates = np.asarray(rates, dtype=np.float64)
    if len(rates) != len(mesh.vertices):
        raise ParameterError("one rate per mesh vertex is required")
    hot = np.isfinite(rates) & (rates > threshold_mm_day)
    if not hot.any() or len(mesh.triangles) == 0:
        return []
    edges, _ = mesh.edges()
    edges = edges[hot[edges[:, 0]] & hot[edges[:, 1]]]
    n = len(mesh.vertices)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    vertex_area = mesh.vertex_areas()

    found = []
    for label in np.unique(labels[hot]):
        members = np.flatnonzero(hot & (labels == label))
        area = float(vertex_area[members].sum())
        if area > 0 and area >= min_area_m2:
            found.append((area, int(members[0]), members))
    found.sort(key=lambda item: (-item[0], item[1]))
    return [
        Region(region_id=i, vertex_set=members, area_m2=area, mean_rate_mm_day=float(np.mean(rates[members])))
        for i, (area, _, members) in enumerate(found, start=1)
    ]


def region_volume(region: Region, field: DeformationField, mesh: TriangleMesh) -> float:
    """Sum over triangles lying wholly in the region of projected area x mean |displacement|."""
    inside = np.zeros(len(mesh.vertices), dtype=bool)
    inside[region.vertex_set] = True
    wholly = inside[mesh.triangles].all(axis=1)
    if not wholly.any():
        return 0.0
    magnitude = np.where(field.valid, np.abs(field.values), 0.0)
    mean_depth = magnitude[mesh.triangles[wholly]].mean(axis=1)
    return float(np.sum(mesh.projected_areas()[wholly] * mean_depth))


def summarize_regions(regions: list[Region], field: DeformationField, mesh: TriangleMesh) -> list[Region]:
    """Fill in volume, mean displacement magnitude and the epoch pair of each region."""
    magnitude = np.abs(field.values)
    return [
        replace(
            r,
            volume_m3=region_volume(r, field, mesh),
            mean_displacement_m=float(np.mean(magnitude[r.vertex_set])),
            compared_epoch=field.compared_epoch,
            reference_epoch=field.reference_epoch,
        )
        for r in regions
    ]


def field_to_ply(mesh: TriangleMesh, field: DeformationField, binary: bool = True) -> bytes:
    """The compared mesh carrying ``displacement_m``, ``rate_mm_day`` and ``valid`` per vertex."""
    if len(field) != len(mesh.vertices):
        raise ParameterError("field and mesh differ in vertex count")
    cloud = PointCloud(
        points=mesh.vertices,
        scalars={
            "displacement_m": field.values,
            "rate_mm_day": rate_field(field),
            "valid": field.valid.astype(np.float64),
        },
        epoch_id=mesh.epoch_id,
        origin_shift=mesh.origin_shift,
    )
    comments = {
        "projection_plane": mesh.projection_plane.shifted(-mesh.origin_shift).to_text(),
        "interval_days": repr(float(field.interval_days)),
    }
    if field.compared_epoch:
        comments["compared_epoch"] = field.compared_epoch
    if field.reference_epoch:
        comments["reference_epoch"] = field.reference_epoch
    return write_mesh_ply(cloud, mesh.triangles, comments, binary=binary)


def field_from_ply(data: bytes) -> tuple[TriangleMesh, DeformationField]:
    mesh, scalars, meta = _read_mesh(data)
    if "displacement_m" not in scalars:
        raise ParameterError("mesh carries no displacement_m channel")
    valid = scalars["valid"] > 0.5 if "valid" in scalars else np.ones(len(mesh.vertices), dtype=bool)
    field = DeformationField(
        values=scalars["displacement_m"],
        valid=valid,
        interval_days=float(meta.get("interval_days", 1.0)),
        compared_epoch=meta.get("compared_epoch", mesh.epoch_id),
        reference_epoch=meta.get("reference_epoch", ""),
    )
    return mesh, field


def region_to_record(region: Region) -> RegionRecord:
    return RegionRecord(
        region_id=region.region_id,
        vertex_set=[int(i) for i in region.vertex_set],
        area_m2=region.area_m2,
        mean_rate_mm_day=region.mean_rate_mm_day,
        volume_m3=region.volume_m3,
        mean_displacement_m=region.mean_displacement_m,
        compared_epoch=region.compared_epoch,
        reference_epoch=region.reference_epoch,
    )


def region_from_record(record: RegionRecord) -> Region:
    return Region(
        region_id=record.region_id,
        vertex_set=np.asarray(record.vertex_set, dtype=np.int64),
        area_m2=record.area_m2,
        mean_rate_mm_day=record.mean_rate_mm_day,
        volume_m3=record.volume_m3,
        mean_displacement_m=record.mean_displacement_m,
        compared_epoch=record.compared_epoch,
        reference_epoch=record.reference_epoch,
    )

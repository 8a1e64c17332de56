"""Point-cloud data model, file I/O, spatial indexing, normals and voxel downsampling.

Coordinates are kept as 64-bit reals relative to ``origin_shift``; files always carry
absolute coordinates.
"""
from __future__ import annotations

import enum
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyListProperty, PlyParseError
from scipy.spatial import cKDTree

from app.errors import CloudFormatError, EmptyCloudError, ParameterError, ParseError

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6
_CHUNK = 100_000


class Label(enum.IntEnum):
    UNKNOWN = 0
    GROUND = 1
    VEGETATION = 2


class CloudFormat(str, enum.Enum):
    XYZ_ASCII = "xyz_ascii"
    PLY = "ply"


class Point3(NamedTuple):
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    scalars: dict[str, np.ndarray] = field(default_factory=dict)
    labels: np.ndarray | None = None
    epoch_id: str = ""
    origin_shift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ParameterError("point coordinates must be finite")
        n = len(points)
        object.__setattr__(self, "points", _frozen(points))

        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != n:
                raise ParameterError(f"{len(normals)} normals for {n} points")
            norms = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(norms - 1.0) > NORMAL_TOLERANCE):
                raise ParameterError("normals must be unit vectors")
            object.__setattr__(self, "normals", _frozen(normals))

        scalars = {}
        for name, values in self.scalars.items():
            values = np.array(values, dtype=np.float64).reshape(-1)
            if len(values) != n:
                raise ParameterError(f"scalar channel {name!r} has {len(values)} values for {n} points")
            scalars[name] = _frozen(values)
        object.__setattr__(self, "scalars", scalars)

        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int8).reshape(-1)
            if len(labels) != n:
                raise ParameterError(f"{len(labels)} labels for {n} points")
            object.__setattr__(self, "labels", _frozen(labels))

        shift = np.array(self.origin_shift, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin_shift", _frozen(shift))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def absolute_points(self) -> np.ndarray:
        return self.points + self.origin_shift

    @property
    def diameter(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def replace(self, **changes) -> PointCloud:
        values = {
            "points": self.points,
            "normals": self.normals,
            "scalars": self.scalars,
            "labels": self.labels,
            "epoch_id": self.epoch_id,
            "origin_shift": self.origin_shift,
        }
        values.update(changes)
        return PointCloud(**values)

    def select(self, indices: np.ndarray) -> PointCloud:
        indices = np.asarray(indices)
        return PointCloud(
            points=self.points[indices],
            normals=None if self.normals is None else self.normals[indices],
            scalars={name: values[indices] for name, values in self.scalars.items()},
            labels=None if self.labels is None else self.labels[indices],
            epoch_id=self.epoch_id,
            origin_shift=self.origin_shift,
        )

    def with_scalars(self, **channels: np.ndarray) -> PointCloud:
        return self.replace(scalars={**self.scalars, **channels})

    def with_labels(self, labels: np.ndarray) -> PointCloud:
        return self.replace(labels=labels)

    def shifted_to(self, origin_shift: np.ndarray) -> PointCloud:
        """Same absolute coordinates expressed relative to another origin."""
        origin_shift = np.asarray(origin_shift, dtype=np.float64)
        return self.replace(points=self.absolute_points - origin_shift, origin_shift=origin_shift)

    @classmethod
    def concatenate(cls, clouds: list[PointCloud], epoch_id: str | None = None) -> PointCloud:
        if not clouds:
            return cls(points=np.empty((0, 3)))
        shift = clouds[0].origin_shift
        parts = [c.shifted_to(shift) for c in clouds]
        normals = None
        if all(c.normals is not None for c in parts):
            normals = np.concatenate([c.normals for c in parts])
        common = set.intersection(*(set(c.scalars) for c in parts))
        scalars = {name: np.concatenate([c.scalars[name] for c in parts]) for name in sorted(common)}
        labels = None
        if any(c.labels is not None for c in parts):
            labels = np.concatenate([
                c.labels if c.labels is not None else np.full(len(c), Label.UNKNOWN, dtype=np.int8)
                for c in parts
            ])
        return cls(
            points=np.concatenate([c.points for c in parts]),
            normals=normals,
            scalars=scalars,
            labels=labels,
            epoch_id=clouds[0].epoch_id if epoch_id is None else epoch_id,
            origin_shift=shift,
        )


# ---------------------------------------------------------------------------
# spatial index

class SpatialIndex:
    """Exact KD-tree over an immutable snapshot of a cloud's points."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = _frozen(np.array(points, dtype=np.float64).reshape(-1, 3))
        self._tree = cKDTree(self.points) if len(self.points) else None

    @property
    def size(self) -> int:
        return len(self.points)

    def _require_points(self) -> cKDTree:
        if self._tree is None:
            raise EmptyCloudError("spatial index holds no points")
        return self._tree

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Batch k-nearest query; shapes (m,) for k == 1, (m, k) otherwise."""
        tree = self._require_points()
        k = min(k, self.size)
        return tree.query(np.asarray(queries, dtype=np.float64), k=k)

    def within(self, query: np.ndarray, radius: float) -> np.ndarray:
        tree = self._require_points()
        found = tree.query_ball_point(np.asarray(query, dtype=np.float64), r=radius)
        return np.sort(np.asarray(found, dtype=np.intp))


def nearest_neighbors(index: SpatialIndex, query: Point3 | np.ndarray, k: int) -> list[tuple[int, float]]:
    """The k closest points, ascending by distance, ties broken by point index."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    tree = index._require_points()
    q = np.asarray(query, dtype=np.float64).reshape(3)
    k_eff = min(k, index.size)
    dist, _ = tree.query(q, k=k_eff)
    kth = float(np.atleast_1d(dist)[-1])
    candidates = np.asarray(tree.query_ball_point(q, r=kth * (1 + 1e-9) + 1e-12), dtype=np.intp)
    diff = index.points[candidates] - q
    d = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((candidates, d))[:k_eff]
    return [(int(candidates[i]), float(d[i])) for i in order]


def median_spacing(points: np.ndarray) -> float:
    """Median distance from each point to its nearest other point."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.median(dist[:, 1]))


# ---------------------------------------------------------------------------
# local geometry

def _neighborhood_eigen(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of every point's k-neighbourhood covariance (ascending)."""
    tree = cKDTree(points)
    evals = np.empty((len(points), 3))
    evecs = np.empty((len(points), 3, 3))
    for start in range(0, len(points), _CHUNK):
        stop = min(start + _CHUNK, len(points))
        _, idx = tree.query(points[start:stop], k=k)
        neigh = points[idx]
        centered = neigh - neigh.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / k
        evals[start:stop], evecs[start:stop] = np.linalg.eigh(cov)
    return evals, evecs


def estimate_normals(cloud: PointCloud, k: int, viewpoint: Point3 | np.ndarray) -> PointCloud:
    """Smallest-eigenvalue direction of each k-neighbourhood, oriented to face the viewpoint.

    Points whose neighbourhood is collinear get the unit direction toward the viewpoint as
    normal and 0 in the ``normal_valid`` scalar channel.
    """
    if k < 3:
        raise ParameterError("normal estimation needs k >= 3")
    if len(cloud) < k:
        raise ParameterError(f"cloud has {len(cloud)} points, fewer than k={k}")
    evals, evecs = _neighborhood_eigen(cloud.points, k)
    normals = evecs[:, :, 0].copy()
    valid = (evals[:, 2] > 0) & (evals[:, 1] > 1e-10 * evals[:, 2])

    toward = np.asarray(viewpoint, dtype=np.float64).reshape(3) - cloud.points
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if not np.all(valid):
        fallback = toward[~valid]
        lengths = np.linalg.norm(fallback, axis=1, keepdims=True)
        fallback = np.where(lengths > 0, fallback / np.where(lengths > 0, lengths, 1.0), [0.0, 0.0, 1.0])
        normals[~valid] = fallback
        logger.warning("%d of %d points have a degenerate neighbourhood", int((~valid).sum()), len(cloud))

    return cloud.replace(normals=normals).with_scalars(normal_valid=valid.astype(np.float64))


def surface_variation(points: np.ndarray, k: int) -> np.ndarray:
    """Curvature proxy lambda_min / sum(lambda) of each k-neighbourhood, in [0, 1/3]."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        return np.zeros(len(points))
    evals, _ = _neighborhood_eigen(points, k)
    evals = np.clip(evals, 0.0, None)
    total = evals.sum(axis=1)
    return np.divide(evals[:, 0], total, out=np.zeros(len(points)), where=total > 0)


def voxel_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One centroid per occupied cubic cell; scalar channels are averaged per cell."""
    if cell <= 0:
        raise ParameterError("cell size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def cell_mean(values: np.ndarray) -> np.ndarray:
        return np.bincount(inverse, weights=values, minlength=m) / counts

    centroids = np.column_stack([cell_mean(cloud.points[:, axis]) for axis in range(3)])
    return PointCloud(
        points=centroids,
        scalars={name: cell_mean(values) for name, values in cloud.scalars.items()},
        epoch_id=cloud.epoch_id,
        origin_shift=cloud.origin_shift,
    )


# ---------------------------------------------------------------------------
# file formats

_RESERVED = ("x", "y", "z", "nx", "ny", "nz", "class_label")


def _assemble(columns: dict[str, np.ndarray], epoch_id: str) -> PointCloud:
    points = np.column_stack([columns["x"], columns["y"], columns["z"]]).astype(np.float64)
    normals = None
    if all(name in columns for name in ("nx", "ny", "nz")):
        normals = np.column_stack([columns["nx"], columns["ny"], columns["nz"]])
    labels = None
    if "class_label" in columns:
        raw = np.asarray(columns["class_label"]).astype(np.int64)
        labels = np.where(np.isin(raw, [int(v) for v in Label]), raw, int(Label.UNKNOWN))
    scalars = {name: values for name, values in columns.items() if name not in _RESERVED}

    shift = np.round(points.mean(axis=0)) if len(points) else np.zeros(3)
    return PointCloud(
        points=points - shift,
        normals=normals,
        scalars=scalars,
        labels=labels,
        epoch_id=epoch_id,
        origin_shift=shift,
    )


def _parse_xyz(text: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    names: list[str] | None = None
    meta: dict[str, str] = {}
    rows: list[list[float]] = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            header = re.match(r"#\s*columns:\s*(.*)", line)
            if header:
                names = header.group(1).split()
            epoch = re.match(r"#\s*epoch:\s*(\S+)", line)
            if epoch:
                meta["epoch"] = epoch.group(1)
            continue
        fields = line.replace(",", " ").split()
        if len(fields) < 3:
            raise ParseError(lineno, f"expected at least 3 fields, got {len(fields)}")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(lineno, f"expected {width} fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise ParseError(lineno, f"non-numeric field in {line!r}") from None
        if not all(np.isfinite(values)):
            raise ParseError(lineno, "non-finite value")
        rows.append(values)

    width = width or 3
    if names is None or len(names) != width:
        names = ["x", "y", "z"] + (["intensity"] if width > 3 else []) + [f"field_{i}" for i in range(4, width)]
    table = np.array(rows, dtype=np.float64).reshape(-1, width)
    return {name: table[:, i] for i, name in enumerate(names)}, meta


def _load_ply(data: bytes) -> PlyData:
    try:
        return PlyData.read(io.BytesIO(data))
    except PlyElementParseError as exc:
        record = (exc.row or 0) + 1
        element = exc.element.name if exc.element is not None else "element"
        raise ParseError(record, f"{element} record {record}: {exc.message}") from None
    except (PlyParseError, ValueError, KeyError, EOFError) as exc:
        raise CloudFormatError(f"unreadable PLY header: {exc}") from None


def _read_ply(data: bytes) -> tuple[dict[str, np.ndarray], np.ndarray, list[str]]:
    ply = _load_ply(data)
    if "vertex" not in ply:
        raise CloudFormatError("PLY file has no vertex element")
    vertex = ply["vertex"]
    if any(isinstance(p, PlyListProperty) for p in vertex.properties):
        raise CloudFormatError("list properties on vertices are not supported")
    names = [p.name for p in vertex.properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise CloudFormatError(f"vertex element lacks property {axis!r}")

    columns = {name: np.asarray(vertex[name], dtype=np.float64) for name in names}
    return columns, _faces(ply), list(ply.comments) + list(ply.obj_info)


def _faces(ply: PlyData) -> np.ndarray:
    if "face" not in ply:
        return np.empty((0, 3), dtype=np.int64)
    face = ply["face"]
    names = [p.name for p in face.properties]
    key = next((n for n in ("vertex_indices", "vertex_index") if n in names), None)
    if key is None:
        raise CloudFormatError("face element lacks vertex_indices")
    polygons = [np.asarray(poly, dtype=np.int64) for poly in face[key]]
    triangles = [(poly[0], poly[i], poly[i + 1]) for poly in polygons for i in range(1, len(poly) - 1)]
    return np.array(triangles, dtype=np.int64).reshape(-1, 3)


def _comment_meta(comments: list[str]) -> dict[str, str]:
    meta = {}
    for comment in comments:
        key, _, value = comment.partition(" ")
        if key:
            meta[key] = value.strip()
    return meta


def parse_cloud(data: bytes, format: CloudFormat | str, epoch_id: str | None = None) -> PointCloud:
    fmt = CloudFormat(format)
    if fmt is CloudFormat.XYZ_ASCII:
        columns, meta = _parse_xyz(data.decode("utf-8", errors="replace"))
    else:
        columns, _, comments = _read_ply(data)
        meta = _comment_meta(comments)
    return _assemble(columns, epoch_id if epoch_id is not None else meta.get("epoch", ""))


def parse_mesh_ply(data: bytes) -> tuple[PointCloud, np.ndarray, dict[str, str]]:
    """Vertices, triangle index triples and ``comment key value`` metadata of a PLY mesh."""
    columns, faces, comments = _read_ply(data)
    meta = _comment_meta(comments)
    cloud = _assemble(columns, meta.get("epoch", ""))
    if len(faces) and (faces.min() < 0 or faces.max() >= len(cloud)):
        raise CloudFormatError("face references a vertex outside the vertex list")
    return cloud, faces, meta


def _vertex_columns(cloud: PointCloud, include_scalars: bool, scalar_dtype: str) -> list[tuple[str, str, np.ndarray]]:
    absolute = cloud.absolute_points
    columns = [(axis, "f8", absolute[:, i]) for i, axis in enumerate("xyz")]
    if cloud.normals is not None:
        columns += [(name, "f8", cloud.normals[:, i]) for i, name in enumerate(("nx", "ny", "nz"))]
    if cloud.labels is not None:
        columns.append(("class_label", "u1", cloud.labels.astype(np.uint8)))
    if include_scalars:
        columns += [(name, scalar_dtype, values) for name, values in cloud.scalars.items()]
    return columns


def _write_ply(
    cloud: PointCloud,
    triangles: np.ndarray | None,
    include_scalars: bool,
    binary: bool,
    scalar_dtype: str,
    comments: dict[str, str],
) -> bytes:
    columns = _vertex_columns(cloud, include_scalars, scalar_dtype)
    table = np.empty(len(cloud), dtype=[(name, dtype) for name, dtype, _ in columns])
    for name, _, values in columns:
        table[name] = values
    elements = [PlyElement.describe(table, "vertex")]
    if triangles is not None:
        faces = np.empty(len(triangles), dtype=[("vertex_indices", "i4", (3,))])
        faces["vertex_indices"] = triangles
        elements.append(PlyElement.describe(faces, "face", len_types={"vertex_indices": "u1"}))

    meta = {"epoch": cloud.epoch_id, **comments} if cloud.epoch_id else dict(comments)
    ply = PlyData(elements, text=not binary, byte_order="<", comments=[f"{k} {v}" for k, v in meta.items()])
    out = io.BytesIO()
    ply.write(out)
    return out.getvalue()


def _fmt(value, dtype: str) -> str:
    if dtype == "u1":
        return str(int(value))
    return repr(float(value))


def write_cloud(
    cloud: PointCloud,
    format: CloudFormat | str,
    include_scalars: bool = True,
    binary: bool = True,
    scalar_dtype: str = "f8",
) -> bytes:
    """Serialize a cloud; PLY scalars are written as 64-bit (``f8``) or 32-bit (``f4``) floats."""
    if scalar_dtype not in ("f8", "f4"):
        raise ParameterError("scalar_dtype must be 'f8' or 'f4'")
    fmt = CloudFormat(format)
    if fmt is CloudFormat.PLY:
        return _write_ply(cloud, None, include_scalars, binary, scalar_dtype, {})

    columns = _vertex_columns(cloud, include_scalars, "f8")
    lines = []
    if cloud.epoch_id:
        lines.append(f"# epoch: {cloud.epoch_id}")
    lines.append("# columns: " + " ".join(name for name, _, _ in columns))
    for i in range(len(cloud)):
        lines.append(" ".join(_fmt(values[i], dtype) for _, dtype, values in columns))
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_mesh_ply(
    cloud: PointCloud,
    triangles: np.ndarray,
    comments: dict[str, str] | None = None,
    binary: bool = True,
) -> bytes:
    return _write_ply(cloud, np.asarray(triangles, dtype=np.int64), True, binary, "f8", comments or {})


def format_for_path(path: Path) -> CloudFormat:
    return CloudFormat.PLY if Path(path).suffix.lower() == ".ply" else CloudFormat.XYZ_ASCII


def read_cloud(path: Path | str, epoch_id: str | None = None) -> PointCloud:
    path = Path(path)
    return parse_cloud(path.read_bytes(), format_for_path(path), epoch_id=epoch_id)


def save_cloud(path: Path | str, cloud: PointCloud, include_scalars: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_cloud(cloud, format_for_path(path), include_scalars=include_scalars))
    return path

"""Rigid registration: closed-form fitting, ICP, binary shape descriptors, coarse and
hybrid global matching, hierarchical multi-view merging and pose evaluation.

Every transform handed in or out of this module acts on absolute coordinates;
internally points are expressed relative to the target's origin shift.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from app.cloud import PointCloud, SpatialIndex, estimate_normals, median_spacing, surface_variation, voxel_downsample
from app.errors import (
    DegenerateCorrespondences,
    DisconnectedViews,
    EmptyCloudError,
    InsufficientGeometry,
    NoOverlap,
    ParameterError,
)
from app.models.params import CoarseParams, HybridParams, IcpParams, MultiviewParams

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9
AZIMUTH_BINS = 8
RADIAL_BINS = 4
# elevation edges as fractions of the support radius; the middle band holds the tangent plane
ELEVATION_EDGES = (-0.5, -0.1, 0.1)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ParameterError("transform entries must be finite")
        if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > ORTHONORMAL_TOLERANCE or np.linalg.det(rotation) <= 0:
            raise ParameterError("rotation must be orthonormal with determinant +1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> RigidTransform:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4) or not np.allclose(matrix[3], [0, 0, 0, 1]):
            raise ParameterError("expected a 4x4 homogeneous matrix")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, translation: np.ndarray = (0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def from_text(cls, text: str) -> RigidTransform:
        values = [float(v) for v in text.split()]
        if len(values) != 16:
            raise ParameterError(f"expected 16 numbers, got {len(values)}")
        return cls.from_matrix(np.array(values).reshape(4, 4))

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def to_text(self) -> str:
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in self.as_matrix()) + "\n"

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(Rotation.from_matrix(self.rotation).as_rotvec())))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def localized(self, shift: np.ndarray) -> RigidTransform:
        """The same motion acting on coordinates taken relative to ``shift``."""
        shift = np.asarray(shift, dtype=np.float64)
        return RigidTransform(self.rotation, self.translation + self.rotation @ shift - shift)

    def globalized(self, shift: np.ndarray) -> RigidTransform:
        shift = np.asarray(shift, dtype=np.float64)
        return RigidTransform(self.rotation, self.translation - self.rotation @ shift + shift)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    keypoint_indices: np.ndarray
    descriptors: np.ndarray
    radius: float
    dropped: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))

    def __len__(self) -> int:
        return len(self.keypoint_indices)

    @property
    def bit_length(self) -> int:
        return AZIMUTH_BINS * RADIAL_BINS * (len(ELEVATION_EDGES) + 1)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    pairs: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    inlier_count: int
    # truncated-distance objective after each accepted iteration
    rmse_history: tuple[float, ...] = ()
    alpha_trace: tuple[float, ...] = ()
    method: str = "icp"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "transform": self.transform.as_matrix().tolist(),
            "rmse": self.rmse,
            "iterations": self.iterations,
            "converged": self.converged,
            "inlier_count": self.inlier_count,
            "rmse_history": list(self.rmse_history),
            "alpha_trace": list(self.alpha_trace),
        }


@dataclass(frozen=True)
class Evaluation:
    success: bool
    pose_rmse: float


def transform_cloud(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Apply a transform to absolute coordinates, keeping the cloud's origin shift."""
    points = transform.apply(cloud.absolute_points) - cloud.origin_shift
    normals = None if cloud.normals is None else cloud.normals @ transform.rotation.T
    return cloud.replace(points=points, normals=normals)


def fit_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``source`` rows onto ``target`` rows."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ParameterError("source and target must pair up one to one")
    if len(src) < 3:
        raise DegenerateCorrespondences(f"need at least 3 pairs, got {len(src)}")
    src_mean, dst_mean = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - src_mean, dst - dst_mean
    spread = np.linalg.svd(a, compute_uv=False)
    if spread[0] == 0 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateCorrespondences("correspondences are collinear")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, dst_mean - rotation @ src_mean)


def _truncated_rmse(dist: np.ndarray, cap: float) -> float:
    return float(np.sqrt(np.mean(np.minimum(dist, cap) ** 2)))


def _plane_step(moved: np.ndarray, matched: np.ndarray, normals: np.ndarray) -> RigidTransform:
    """One Gauss-Newton step on the point-to-plane residuals, linearised about the centroid."""
    center = moved.mean(axis=0)
    arm = moved - center
    jacobian = np.hstack([np.cross(arm, normals), normals])
    residual = np.einsum("ij,ij->i", moved - matched, normals)
    # min-norm solution leaves unobservable directions (flat patches) untouched
    x, *_ = np.linalg.lstsq(jacobian, -residual, rcond=None)
    rotation = Rotation.from_rotvec(x[:3]).as_matrix()
    return RigidTransform(rotation, center - rotation @ center + x[3:])


def _target_normals(target: PointCloud, params: IcpParams) -> np.ndarray | None:
    if not params.point_to_plane:
        return None
    if target.normals is not None:
        return target.normals
    if len(target) < params.normal_neighbors:
        return None
    return ensure_normals(target, params.normal_neighbors).normals


def icp(
    source: PointCloud,
    target: PointCloud,
    params: IcpParams = IcpParams(),
    initial: RigidTransform | None = None,
    target_index: SpatialIndex | None = None,
) -> RegistrationResult:
    """Nearest-neighbour ICP.

    Pairs farther apart than ``max_pair_dist`` are rejected from the fit. Each iteration
    evaluates a point-to-plane step against the target normals and the closed-form
    point-to-point fit, and keeps whichever lowers the objective more. The objective
    caps every source distance at ``max_pair_dist``; an update that would raise it is
    discarded, so ``rmse_history`` never increases. Iteration stops once the objective
    improves by less than ``convergence_eps`` with no point moving farther than
    ``convergence_eps``. The reported ``rmse`` is taken over the inlier pairs at the
    final pose.
    """
    if len(source) == 0 or len(target) == 0:
        raise EmptyCloudError("icp needs two non-empty clouds")
    shift = target.origin_shift
    src = source.absolute_points - shift
    index = target_index or SpatialIndex(target)
    cap = params.max_pair_dist

    current = (initial or RigidTransform.identity()).localized(shift)
    dist, idx = index.query(current.apply(src))
    inliers = dist <= cap
    if inliers.sum() < 3:
        raise NoOverlap(f"only {int(inliers.sum())} pairs within {cap} m at the first iteration")
    objective = _truncated_rmse(dist, cap)
    history = [objective]
    converged = objective < params.convergence_eps
    normals = None if converged else _target_normals(target, params)
    iterations = 0

    while not converged and iterations < params.max_iter:
        iterations += 1
        moved = current.apply(src)
        pairs = idx[inliers]
        matched = index.points[pairs]
        steps = []
        if normals is not None and len(pairs) >= 6:
            steps.append(("plane", _plane_step(moved[inliers], matched, normals[pairs])))
        try:
            steps.append(("point", fit_rigid(moved[inliers], matched)))
        except DegenerateCorrespondences:
            if not steps:
                logger.debug("icp stopped on degenerate pairing after %d iterations", iterations)
                break
        accepted = None
        for kind, step in steps:
            candidate = step.compose(current)
            new_dist, new_idx = index.query(candidate.apply(src))
            new_inliers = new_dist <= cap
            new_objective = _truncated_rmse(new_dist, cap)
            improves = new_objective < objective or (kind == "point" and new_objective == objective)
            if improves and new_inliers.sum() >= 3 and (accepted is None or new_objective < accepted[-1]):
                accepted = step, candidate, new_dist, new_idx, new_inliers, new_objective
        if accepted is None:
            converged = True
            break
        step, current, dist, idx, inliers, new_objective = accepted
        improvement = objective - new_objective
        objective = new_objective
        history.append(objective)
        motion = float(np.max(np.linalg.norm(step.apply(moved) - moved, axis=1)))
        if objective < params.convergence_eps or improvement <= 0:
            converged = True
        elif improvement < params.convergence_eps and motion < params.convergence_eps:
            converged = True

    iterations = max(iterations, 1)
    rmse = float(np.sqrt(np.mean(dist[inliers] ** 2)))
    return RegistrationResult(
        transform=current.globalized(shift),
        rmse=rmse,
        iterations=iterations,
        converged=converged,
        inlier_count=int(inliers.sum()),
        rmse_history=tuple(history),
    )


# ---------------------------------------------------------------------------
# descriptors

def default_viewpoint(cloud: PointCloud) -> np.ndarray:
    """A point far out on the upward side of the cloud's best-fit plane."""
    centered = cloud.points - cloud.points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1] if vt[-1][2] >= 0 else -vt[-1]
    return cloud.points.mean(axis=0) + 10.0 * max(cloud.diameter, 1.0) * normal


def ensure_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    if len(cloud) < k:
        raise InsufficientGeometry(f"cloud has only {len(cloud)} points")
    return estimate_normals(cloud, k, default_viewpoint(cloud))


def select_keypoints(cloud: PointCloud, params: CoarseParams = CoarseParams()) -> np.ndarray:
    """Local maxima of surface variation, strongest first, capped at ``max_keypoints``."""
    k = params.keypoint_neighbors
    if len(cloud) < k:
        return np.empty(0, dtype=np.intp)
    curvature = surface_variation(cloud.points, k)
    _, idx = cKDTree(cloud.points).query(cloud.points, k=k)
    is_peak = (curvature >= curvature[idx].max(axis=1)) & (curvature > params.min_curvature)
    peaks = np.flatnonzero(is_peak)
    order = np.lexsort((peaks, -curvature[peaks]))
    return np.sort(peaks[order[: params.max_keypoints]])


def _local_frame(offsets: np.ndarray, normal: np.ndarray) -> np.ndarray:
    centered = offsets - offsets.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    z = vecs[:, 0] if vecs[:, 0] @ normal >= 0 else -vecs[:, 0]
    x = vecs[:, 2]
    if np.sum(offsets @ x) < 0:
        x = -x
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _occupancy_bits(local: np.ndarray, radius: float) -> np.ndarray:
    horizontal = np.hypot(local[:, 0], local[:, 1])
    azimuth = np.mod(np.arctan2(local[:, 1], local[:, 0]), 2 * np.pi)
    a = np.minimum((azimuth / (2 * np.pi) * AZIMUTH_BINS).astype(int), AZIMUTH_BINS - 1)
    r = np.minimum((horizontal / radius * RADIAL_BINS).astype(int), RADIAL_BINS - 1)
    e = np.digitize(local[:, 2], np.asarray(ELEVATION_EDGES) * radius)
    n_elev = len(ELEVATION_EDGES) + 1
    counts = np.bincount((a * RADIAL_BINS + r) * n_elev + e, minlength=AZIMUTH_BINS * RADIAL_BINS * n_elev)
    return counts > np.median(counts)


def extract_descriptors(
    cloud: PointCloud,
    keypoints: np.ndarray,
    radius: float,
    min_neighbors: int = 10,
) -> FeatureSet:
    """Binary cylindrical-occupancy descriptor in a covariance frame at each keypoint.

    Keypoints with fewer than ``min_neighbors`` points inside ``radius`` are dropped and
    listed in ``FeatureSet.dropped``.
    """
    if cloud.normals is None:
        raise ParameterError("descriptor extraction needs normals")
    if radius <= 0:
        raise ParameterError("descriptor radius must be positive")
    keypoints = np.asarray(keypoints, dtype=np.intp)
    tree = cKDTree(cloud.points)
    kept, descriptors, dropped = [], [], []
    for kp in keypoints:
        neighbors = np.sort(np.asarray(tree.query_ball_point(cloud.points[kp], radius), dtype=np.intp))
        if len(neighbors) < min_neighbors:
            dropped.append(kp)
            continue
        offsets = cloud.points[neighbors] - cloud.points[kp]
        frame = _local_frame(offsets, cloud.normals[kp])
        descriptors.append(_occupancy_bits(offsets @ frame.T, radius))
        kept.append(kp)
    if dropped:
        logger.info("dropped %d of %d keypoints with fewer than %d neighbours", len(dropped), len(keypoints), min_neighbors)
    bits = AZIMUTH_BINS * RADIAL_BINS * (len(ELEVATION_EDGES) + 1)
    return FeatureSet(
        keypoint_indices=np.asarray(kept, dtype=np.intp),
        descriptors=np.asarray(descriptors, dtype=bool).reshape(-1, bits),
        radius=radius,
        dropped=np.asarray(dropped, dtype=np.intp),
    )


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int32)
    b = np.asarray(b, dtype=np.int32)
    return a @ (1 - b).T + (1 - a) @ b.T


def _features(cloud: PointCloud, params: CoarseParams) -> FeatureSet:
    return extract_descriptors(cloud, select_keypoints(cloud, params), params.descriptor_radius, params.min_neighbors)


def consistent_subset(src: np.ndarray, dst: np.ndarray, tolerance: float, seeds: int = 20) -> np.ndarray:
    """Greedy largest set of pairs whose intra-cloud distances agree within ``tolerance``."""
    n = len(src)
    if n == 0:
        return np.empty(0, dtype=np.intp)
    agree = np.abs(cdist(src, src) - cdist(dst, dst)) <= tolerance
    support = agree.sum(axis=1)
    best: list[int] = []
    for seed in np.argsort(-support, kind="stable")[:seeds]:
        chosen = [int(seed)]
        alive = agree[seed].copy()
        alive[seed] = False
        while alive.any():
            candidates = np.flatnonzero(alive)
            pick = int(candidates[np.argmax(support[candidates])])
            chosen.append(pick)
            alive &= agree[pick]
            alive[pick] = False
        if len(chosen) > len(best):
            best = chosen
    return np.sort(np.asarray(best, dtype=np.intp))


def _prepared(source: PointCloud, target: PointCloud, k: int) -> tuple[PointCloud, PointCloud, np.ndarray]:
    shift = target.origin_shift
    return ensure_normals(source.shifted_to(shift), k), ensure_normals(target, k), shift


def match_features(
    source: PointCloud,
    target: PointCloud,
    params: CoarseParams = CoarseParams(),
) -> CorrespondenceSet:
    """Mutual-nearest descriptor matches that survive the geometric consistency check."""
    fs, ft = _features(source, params), _features(target, params)
    if len(fs) < 3 or len(ft) < 3:
        raise InsufficientGeometry(f"too few descriptors ({len(fs)} source, {len(ft)} target)")
    distances = hamming_matrix(fs.descriptors, ft.descriptors)
    best_t = np.argmin(distances, axis=1)
    best_s = np.argmin(distances, axis=0)
    mutual = np.flatnonzero(best_s[best_t] == np.arange(len(fs)))
    src_kp = source.points[fs.keypoint_indices[mutual]]
    dst_kp = target.points[ft.keypoint_indices[best_t[mutual]]]
    tolerance = params.consistency_factor * median_spacing(target.points)
    keep = consistent_subset(src_kp, dst_kp, tolerance)
    pairs = np.column_stack([fs.keypoint_indices[mutual[keep]], ft.keypoint_indices[best_t[mutual[keep]]]])
    residuals = np.linalg.norm(source.points[pairs[:, 0]] - target.points[pairs[:, 1]], axis=1) if len(keep) else np.empty(0)
    logger.debug("%d mutual matches, %d geometrically consistent", len(mutual), len(keep))
    return CorrespondenceSet(pairs=pairs.reshape(-1, 2), residuals=residuals)


def coarse_register(
    source: PointCloud,
    target: PointCloud,
    params: CoarseParams = CoarseParams(),
    normal_neighbors: int = 10,
) -> RigidTransform:
    src, dst, shift = _prepared(source, target, normal_neighbors)
    matches = match_features(src, dst, params)
    if len(matches.pairs) < params.min_consistent:
        raise InsufficientGeometry(f"only {len(matches.pairs)} consistent correspondences")
    try:
        transform = fit_rigid(src.points[matches.pairs[:, 0]], dst.points[matches.pairs[:, 1]])
    except DegenerateCorrespondences as exc:
        raise InsufficientGeometry(str(exc)) from exc
    return transform.globalized(shift)


def alpha_schedule(alpha_start: float, steps: int) -> np.ndarray:
    if steps == 1:
        return np.zeros(1)
    return np.linspace(alpha_start, 0.0, steps)


def register_global_hybrid(
    source: PointCloud,
    target: PointCloud,
    params: HybridParams = HybridParams(),
    normal_neighbors: int = 10,
) -> RegistrationResult:
    """Coarse-to-fine bipartite keypoint matching under a blended feature/Euclidean cost.

    Each step solves an assignment over the keypoints with cost
    sqrt(alpha * f**2 + (1 - alpha) * e**2), where f is the Hamming distance over the
    descriptor length and e the current Euclidean distance over the pair diameter, with
    alpha falling linearly to 0. A step is kept only when it lowers the median distance
    from the source keypoints to the target. Plain ICP on all points finishes.
    """
    src, dst, shift = _prepared(source, target, normal_neighbors)
    fs, ft = _features(src, params.coarse), _features(dst, params.coarse)
    if len(fs) < 3 or len(ft) < 3:
        raise InsufficientGeometry(f"too few descriptors ({len(fs)} source, {len(ft)} target)")
    kp_src = src.points[fs.keypoint_indices]
    kp_dst = dst.points[ft.keypoint_indices]
    feature_cost = hamming_matrix(fs.descriptors, ft.descriptors) / fs.bit_length
    diameter = max(src.diameter, dst.diameter, 1e-9)
    tolerance = params.coarse.consistency_factor * median_spacing(dst.points)
    tree = cKDTree(dst.points)

    def residual(transform: RigidTransform) -> float:
        return float(np.median(tree.query(transform.apply(kp_src))[0]))

    identity = RigidTransform.identity()
    centroid_shift = RigidTransform(np.eye(3), dst.points.mean(axis=0) - src.points.mean(axis=0))
    current = min((identity, centroid_shift), key=residual)
    score = residual(current)

    alphas = alpha_schedule(params.alpha_start, params.alpha_steps)
    for alpha in alphas:
        moved = current.apply(kp_src)
        euclidean_cost = cdist(moved, kp_dst) / diameter
        cost = np.sqrt(alpha * feature_cost**2 + (1.0 - alpha) * euclidean_cost**2)
        rows, cols = linear_sum_assignment(cost)
        keep = consistent_subset(moved[rows], kp_dst[cols], tolerance)
        if len(keep) < 3:
            logger.debug("alpha %.2f: %d consistent pairs, step skipped", alpha, len(keep))
            continue
        try:
            step = fit_rigid(moved[rows[keep]], kp_dst[cols[keep]])
        except DegenerateCorrespondences:
            continue
        candidate = step.compose(current)
        candidate_score = residual(candidate)
        if candidate_score <= score:
            current, score = candidate, candidate_score

    final = icp(src, dst, params.icp, initial=current.globalized(shift))
    return replace(final, alpha_trace=tuple(float(a) for a in alphas), method="hybrid")


def overlap_fraction(result: RegistrationResult, source: PointCloud) -> float:
    return result.inlier_count / max(len(source), 1)


def register_pair(
    source: PointCloud,
    target: PointCloud,
    params: MultiviewParams = MultiviewParams(),
    initial: RigidTransform | None = None,
    normal_neighbors: int = 10,
) -> RegistrationResult:
    """Coarse+ICP and plain ICP; the accepted result with the most inliers wins."""
    candidates: list[RegistrationResult] = []
    try:
        coarse = coarse_register(source, target, params.coarse, normal_neighbors)
        candidates.append(replace(icp(source, target, params.icp, initial=coarse), method="coarse+icp"))
    except (InsufficientGeometry, NoOverlap) as exc:
        logger.debug("coarse registration failed: %s", exc)
    try:
        candidates.append(icp(source, target, params.icp, initial=initial))
    except NoOverlap as exc:
        logger.debug("plain icp failed: %s", exc)

    accepted = [
        r for r in candidates
        if overlap_fraction(r, source) >= params.min_overlap_fraction and r.rmse <= params.accept_rmse
    ]
    if not accepted:
        raise NoOverlap("no registration reached the overlap and residual limits")
    return max(accepted, key=lambda r: (r.inlier_count, -r.rmse))


def _similarity(a: FeatureSet, b: FeatureSet, threshold: float) -> float:
    """Share of descriptors with a counterpart within ``threshold`` normalized Hamming distance."""
    if len(a) == 0 or len(b) == 0:
        return 0.0
    close = hamming_matrix(a.descriptors, b.descriptors) / a.bit_length <= threshold
    return 0.5 * (close.any(axis=1).mean() + close.any(axis=0).mean())


@dataclass
class _Cluster:
    members: list[int]
    cloud: PointCloud
    features: FeatureSet


def register_multiview(
    clouds: list[PointCloud],
    params: MultiviewParams = MultiviewParams(),
    initial: list[RigidTransform] | None = None,
    normal_neighbors: int = 10,
) -> list[RigidTransform]:
    """Hierarchical merging of same-epoch scans into the first scan's frame.

    The most similar pair of clusters is registered and merged first; a pair whose
    registration is rejected is never retried. ``initial`` optionally holds pose priors
    mapping each scan into the common frame.
    """
    if not clouds:
        raise ParameterError("need at least one cloud")
    if initial is not None and len(initial) != len(clouds):
        raise ParameterError("one initial pose per cloud is required")
    priors = initial or [RigidTransform.identity()] * len(clouds)
    if len(clouds) == 1:
        return [priors[0]]

    shift = clouds[0].origin_shift
    poses = list(priors)

    def prepare(cloud: PointCloud) -> tuple[PointCloud, FeatureSet]:
        if params.voxel:
            cloud = voxel_downsample(cloud.replace(normals=None), params.voxel)
        cloud = ensure_normals(cloud, normal_neighbors)
        return cloud, _features(cloud, params.coarse)

    clusters = []
    for i, cloud in enumerate(clouds):
        moved, features = prepare(transform_cloud(cloud, priors[i]).shifted_to(shift))
        clusters.append(_Cluster([i], moved, features))

    failed: set[tuple[int, int]] = set()
    while len(clusters) > 1:
        scored = []
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                key = (min(clusters[a].members), min(clusters[b].members))
                if key in failed:
                    continue
                score = _similarity(clusters[a].features, clusters[b].features, params.similarity_threshold)
                if score > 0:
                    scored.append((-score, key, a, b))
        merged = False
        for _, key, a, b in sorted(scored):
            target, source = (clusters[a], clusters[b]) if key[0] < key[1] else (clusters[b], clusters[a])
            try:
                result = register_pair(source.cloud, target.cloud, params, normal_neighbors=normal_neighbors)
            except NoOverlap as exc:
                logger.info("views %s and %s not merged: %s", source.members, target.members, exc)
                failed.add(key)
                continue
            logger.info(
                "merged views %s into %s (%s, rmse %.4f m)", source.members, target.members, result.method, result.rmse
            )
            for m in source.members:
                poses[m] = result.transform.compose(poses[m])
            combined = PointCloud.concatenate(
                [target.cloud.replace(normals=None), transform_cloud(source.cloud, result.transform).replace(normals=None)]
            )
            cloud, features = prepare(combined)
            clusters = [c for c in clusters if c is not source and c is not target]
            clusters.append(_Cluster(sorted(target.members + source.members), cloud, features))
            clusters.sort(key=lambda c: min(c.members))
            merged = True
            break
        if not merged:
            raise DisconnectedViews([sorted(c.members) for c in clusters])
    return poses


def evaluation_points(diameter: float, center: np.ndarray = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Corners of a cube of side ``diameter`` around ``center``."""
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    return np.asarray(center, dtype=np.float64) + diameter * corners


def pose_rmse(estimate: RigidTransform, truth: RigidTransform, points: np.ndarray) -> float:
    diff = estimate.apply(points) - truth.apply(points)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def evaluate_registration(
    result: RegistrationResult | RigidTransform,
    truth: RigidTransform,
    diameter: float,
    success_threshold: float = 1.0,
    center: np.ndarray = (0.0, 0.0, 0.0),
) -> Evaluation:
    if diameter <= 0:
        raise ParameterError("diameter must be positive")
    estimate = result.transform if isinstance(result, RegistrationResult) else result
    rmse = pose_rmse(estimate, truth, evaluation_points(diameter, center))
    return Evaluation(success=rmse <= success_threshold, pose_rmse=rmse)

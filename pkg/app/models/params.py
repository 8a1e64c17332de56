import math

from pydantic import BaseModel, ConfigDict, Field, field_validator


class IcpParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_iter: int = Field(default=100, ge=1)
    convergence_eps: float = Field(default=1e-6, gt=0)
    max_pair_dist: float = Field(default=1.0, gt=0)
    # point-to-plane steps against target normals, estimated from this many neighbours when missing
    point_to_plane: bool = True
    normal_neighbors: int = Field(default=10, ge=3)


class CoarseParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    # keypoints: curvature maxima among the k nearest neighbours
    keypoint_neighbors: int = Field(default=16, ge=3)
    max_keypoints: int = Field(default=500, ge=3, le=500)
    min_curvature: float = Field(default=1e-6, ge=0)
    descriptor_radius: float = Field(default=2.0, gt=0)
    min_neighbors: int = Field(default=10, ge=3)
    # geometric consistency tolerance = factor x median point spacing
    consistency_factor: float = Field(default=3.0, gt=0)
    min_consistent: int = Field(default=3, ge=3)


class HybridParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_start: float = Field(default=0.8, ge=0, le=1)
    alpha_steps: int = Field(default=5, ge=1)
    coarse: CoarseParams = CoarseParams()
    icp: IcpParams = IcpParams()


class MultiviewParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    coarse: CoarseParams = CoarseParams()
    icp: IcpParams = IcpParams()
    # normalized Hamming distance under which two descriptors count as shared
    similarity_threshold: float = Field(default=0.15, ge=0, le=1)
    # a pairwise result is accepted only with enough overlap and a small residual
    min_overlap_fraction: float = Field(default=0.1, gt=0, le=1)
    accept_rmse: float = Field(default=0.25, gt=0)
    voxel: float | None = Field(default=None, gt=0)


class ClothParams(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    grid_resolution: float = Field(default=0.5, gt=0)
    rigidness: int = Field(default=2, ge=1, le=3)
    time_step: float = Field(default=0.65, gt=0)
    class_threshold: float = Field(default=0.5, gt=0)
    max_iterations: int = Field(default=500, ge=1)
    gravity: float = Field(default=0.2, gt=0)
    tolerance: float = Field(default=0.005, gt=0)


class SlideSpec(BaseModel):
    """An injected landslide on a synthetic slope, in slope-local (u along strike, v up-dip) metres."""

    model_config = ConfigDict(frozen=True)

    center: tuple[float, float]
    radius_along: float = Field(gt=0)
    radius_across: float = Field(gt=0)
    depth: float
    # 0 moves material straight down-dip
    azimuth_deg: float = 0.0
    taper_fraction: float = Field(default=0.1, ge=0, le=1)
    # share of the displacement applied along the motion azimuth instead of the surface normal
    shear: float = Field(default=0.0, ge=0, le=1)

    @field_validator("depth")
    @classmethod
    def _nonzero_depth(cls, depth: float) -> float:
        if depth == 0:
            raise ValueError("depth must be non-zero")
        return depth

    def expected_volume(self) -> float:
        """Closed-form integral of |displacement| over the tapered ellipse."""
        tau = self.taper_fraction
        a = 1.0 - tau
        shape = a * a + a * tau + tau * tau / 2 - 2 * tau * tau / math.pi**2
        return self.radius_along * self.radius_across * abs(self.depth) * math.pi * shape

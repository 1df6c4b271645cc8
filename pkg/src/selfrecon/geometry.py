"""Camera poses on the viewing sphere and pinhole ray generation.

World frame is y-up. The canonical input camera sits on the +z axis with the
identity rotation and looks down -z at the origin (OpenGL camera axes: x right,
y up, camera looks along its own -z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_RADIUS = 1.8
DEFAULT_FOV_DEG = 40.0
SHAPE_BOUND = 0.87


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform plus vertical field of view.

    ``translation`` is the camera center in world units.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fov_deg: float = DEFAULT_FOV_DEG

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def focal(self) -> float:
        """Focal length in normalized image units (image half-height = 1)."""
        return 1.0 / np.tan(np.deg2rad(self.fov_deg) / 2)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def project(self, points: np.ndarray, resolution: int) -> np.ndarray:
        """Project world points to continuous pixel coordinates ``(col, row)``."""
        cam = self.world_to_camera(np.atleast_2d(points))
        depth = -cam[:, 2]
        x = self.focal * cam[:, 0] / depth
        y = self.focal * cam[:, 1] / depth
        col = (x + 1) * resolution / 2
        row = (1 - y) * resolution / 2
        return np.stack([col, row], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.fov_deg == other.fov_deg
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes(), self.fov_deg))


@dataclass(frozen=True)
class RelativePose:
    """Azimuth/elevation offset (degrees) from the canonical viewpoint."""

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        if not -180 <= self.azimuth_deg <= 180:
            raise ValueError(f"azimuth_deg out of [-180, 180]: {self.azimuth_deg}")
        if not -90 <= self.elevation_deg <= 90:
            raise ValueError(f"elevation_deg out of [-90, 90]: {self.elevation_deg}")

    def to_dict(self) -> dict:
        return {"azimuth": float(self.azimuth_deg), "elevation": float(self.elevation_deg)}


@dataclass(frozen=True)
class RayBundle:
    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit norm
    near: float
    far: float
    resolution: int = field(default=0)


def _check_camera_args(radius: float, fov_deg: float) -> None:
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not 0 < fov_deg < 180:
        raise ValueError(f"fov_deg must lie in (0, 180), got {fov_deg}")


def canonical_pose(radius: float = DEFAULT_RADIUS, fov_deg: float = DEFAULT_FOV_DEG) -> CameraPose:
    _check_camera_args(radius, fov_deg)
    return CameraPose(np.eye(3), np.array([0.0, 0.0, float(radius)]), float(fov_deg))


def pose_from_azel(
    delta: RelativePose, radius: float = DEFAULT_RADIUS, fov_deg: float = DEFAULT_FOV_DEG
) -> CameraPose:
    """Look-at camera on the sphere at ``delta`` relative to the canonical view.

    Positive azimuth moves the camera toward +x, positive elevation toward +y.
    Roll is zero; at the poles the up vector switches to -z (north) / +z
    (south), which is the limit approached along azimuth 0.
    """
    _check_camera_args(radius, fov_deg)
    az = np.deg2rad(delta.azimuth_deg)
    el = np.deg2rad(delta.elevation_deg)
    center = radius * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    z_axis = center / np.linalg.norm(center)
    if abs(delta.elevation_deg) >= 90:
        up = np.array([0.0, 0.0, -np.sign(delta.elevation_deg)])
    else:
        up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis], axis=1)
    return CameraPose(rotation, center, float(fov_deg))


def compose_relative(
    delta: RelativePose, radius: float = DEFAULT_RADIUS, fov_deg: float = DEFAULT_FOV_DEG
) -> CameraPose:
    """``canonical . delta``: the camera reached by moving ``delta`` on the sphere."""
    return pose_from_azel(delta, radius, fov_deg)


def invert_delta(delta: RelativePose) -> RelativePose:
    return RelativePose(-delta.azimuth_deg, -delta.elevation_deg)


def inverse_relative_pose(
    delta: RelativePose, radius: float = DEFAULT_RADIUS, fov_deg: float = DEFAULT_FOV_DEG
) -> CameraPose:
    """Exact ``canonical . delta^-1`` as a rigid transform.

    If a reconstruction is made from the view at ``compose_relative(delta)``
    and treated as canonical, this is where the original input camera sits in
    the new frame. It coincides with ``compose_relative(invert_delta(delta))``
    whenever one of the two angles is zero; otherwise it carries a small roll
    that the azimuth/elevation parameterization cannot express.
    """
    rel = pose_from_azel(delta, radius, fov_deg).rotation
    base = canonical_pose(radius, fov_deg)
    return CameraPose(rel.T @ base.rotation, rel.T @ base.translation, float(fov_deg))


def near_far(radius: float = DEFAULT_RADIUS, bound: float = SHAPE_BOUND) -> tuple[float, float]:
    reach = 0.9 * np.sqrt(3.0) * bound
    return max(radius - reach, 1e-3), radius + reach


def pixel_directions(resolution: int, fov_deg: float) -> np.ndarray:
    """Unit ray directions in camera coordinates through pixel centers, (H, W, 3)."""
    focal = 1.0 / np.tan(np.deg2rad(fov_deg) / 2)
    coords = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    x = np.broadcast_to(coords[None, :], (resolution, resolution))
    y = np.broadcast_to(-coords[:, None], (resolution, resolution))
    dirs = np.stack([x, y, -np.full_like(x, focal)], axis=-1)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def camera_rays(
    pose: CameraPose, resolution: int, near: float | None = None, far: float | None = None
) -> RayBundle:
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    if near is None or far is None:
        default_near, default_far = near_far(round(float(np.linalg.norm(pose.translation)), 9))
        near = default_near if near is None else near
        far = default_far if far is None else far
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    dirs = pixel_directions(resolution, pose.fov_deg) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return RayBundle(origins, dirs, float(near), float(far), resolution)


def pose_to_dict(pose: CameraPose) -> dict:
    return {
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
        "fov_deg": pose.fov_deg,
    }


def pose_from_dict(data: dict) -> CameraPose:
    return CameraPose(np.array(data["rotation"]), np.array(data["translation"]), float(data["fov_deg"]))

"""Pinhole cameras and posed training views."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError
from .gaussians import quat_to_rotmat


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    model: str = "PINHOLE"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")

    def downsampled(self, factor: int) -> "CameraIntrinsics":
        return replace(self, fx=self.fx / factor, fy=self.fy / factor,
                       cx=self.cx / factor, cy=self.cy / factor,
                       width=self.width // factor, height=self.height // factor)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera transform, COLMAP convention: x_cam = R x_world + t."""

    qvec: tuple
    tvec: tuple

    def __post_init__(self):
        q = np.asarray(self.qvec, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise InvalidParameterError("pose quaternion must be unit norm (w, x, y, z)")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(np.asarray(self.qvec, dtype=np.float64))

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.tvec, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(tuple(rotmat_to_quat(R)), tuple(-R @ eye))


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], 0],
        [R[1, 2] - R[2, 1], R[2, 0] - R[0, 2], R[0, 1] - R[1, 0], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass
class TrainingView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray | None = None  # (H, W, 3) float64 in [0, 1]
    source_path: str = ""
    downsample: int = 1
    name: str = ""

    def __post_init__(self):
        if self.image is not None:
            h, w = self.image.shape[:2]
            if (w, h) != (self.intrinsics.width, self.intrinsics.height):
                raise InvalidParameterError(
                    f"image is {w}x{h} but intrinsics say "
                    f"{self.intrinsics.width}x{self.intrinsics.height}")


def scene_extent(views) -> float:
    """Radius of the camera centers around their mean, padded by 10%."""
    centers = np.array([v.pose.center for v in views])
    mean = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - mean, axis=1))) if len(centers) else 0.0
    return 1.1 * radius if radius > 0 else 1.0

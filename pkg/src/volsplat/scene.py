"""Scene assembly: training images, view selection and cloud seeding."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial import cKDTree

from .camera import CameraPose, TrainingView, scene_extent
from .colmap import SparsePoints, load_colmap_sparse
from .gaussians import GaussianCloud, logit, num_sh_coeffs, rgb_to_sh_dc
from .ply import load_ply_points

log = logging.getLogger(__name__)

MAX_VIEWS = 200
INITIAL_OPACITY = 0.1


def seed_cloud(points, sh_degree=3, extent=1.0) -> GaussianCloud:
    """One isotropic Gaussian per sparse point.

    Scale is the mean distance to the three nearest other points; with fewer
    than four points every scale falls back to ``0.01 * extent``.
    """
    if not isinstance(points, SparsePoints):
        points = SparsePoints.from_list(points)
    n = len(points)
    if n < 1:
        raise ValueError("seed_cloud needs at least one point")
    xyz = points.positions
    if n < 4:
        scale = np.full(n, 0.01 * extent)
    else:
        dist, _ = cKDTree(xyz).query(xyz, k=4)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-6 * extent)
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(points.colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=xyz.copy(),
        rotations=rotations,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(INITIAL_OPACITY))),
        sh=sh,
        active_sh_degree=0,
    )


def stride_indices(n: int, cap: int = MAX_VIEWS) -> np.ndarray:
    """``cap`` evenly strided indices out of ``n`` (all of them when n <= cap)."""
    if n <= cap:
        return np.arange(n)
    return (np.arange(cap) * n) // cap


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    h, w = image.shape[0] // factor, image.shape[1] // factor
    crop = image[:h * factor, :w * factor]
    return crop.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc


def load_images(records, image_dir, factor=1, max_views=MAX_VIEWS):
    """Decode, box-downsample and pair images with their cameras.

    ``records`` are ``(intrinsics, pose, name)`` triples; at most
    ``max_views`` are kept, evenly strided.
    """
    if factor not in (1, 2, 4):
        raise ValueError("downsample factor must be 1, 2 or 4")
    records = list(records)
    keep = stride_indices(len(records), max_views)
    views = []
    for i in keep:
        intr, pose, name = records[i]
        path = Path(image_dir) / name
        image = read_image(path)
        h, w = image.shape[:2]
        if (w, h) != (intr.width, intr.height):
            # images stored at another resolution than the calibration
            sx, sy = w / intr.width, h / intr.height
            intr = replace(intr, fx=intr.fx * sx, fy=intr.fy * sy, cx=intr.cx * sx,
                           cy=intr.cy * sy, width=w, height=h)
        image = box_downsample(image, factor)
        views.append(TrainingView(intr.downsampled(factor), pose, image, str(path), factor, name))
    return views


def normalization_transform(views):
    """Center and scale so the camera bounding-box diagonal becomes 1."""
    centers = np.array([v.pose.center for v in views])
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return 0.5 * (lo + hi), (1.0 / diag if diag > 0 else 1.0)


def apply_normalization(views, points: SparsePoints, center, scale):
    out = []
    for v in views:
        R, t = v.pose.rotation, v.pose.translation
        pose = CameraPose(v.pose.qvec, tuple(scale * (R @ center + t)))
        out.append(replace(v, pose=pose))
    pts = SparsePoints(scale * (points.positions - center), points.colors)
    return out, pts


@dataclass
class Scene:
    train_views: list
    test_views: list
    points: SparsePoints
    extent: float = field(default=1.0)


def load_scene(directory, init="colmap", downsample=1, test_every=8, normalize=False,
               ply_path=None, image_dir=None, max_views=MAX_VIEWS) -> Scene:
    """Load a COLMAP scene directory with an ``images/`` folder.

    ``init="ply"`` seeds from ``points3D.ply`` (or ``ply_path``) instead of the
    COLMAP points, e.g. a deep-matching export.  Every ``test_every``-th view is
    held out (0 disables).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory {directory} does not exist")
    points, records = load_colmap_sparse(directory)
    if init == "ply":
        points = load_ply_points(ply_path or directory / "points3D.ply")
    elif init != "colmap":
        raise ValueError(f"unknown init source {init!r}")
    views = load_images(records, image_dir or directory / "images", downsample, max_views)
    if normalize:
        center, scale = normalization_transform(views)
        views, points = apply_normalization(views, points, center, scale)
    if test_every > 0:
        test = [v for i, v in enumerate(views) if i % test_every == 0]
        train = [v for i, v in enumerate(views) if i % test_every != 0]
    else:
        train, test = views, []
    if not train:
        train = views
    log.info("loaded %d train / %d test views, %d points", len(train), len(test), len(points))
    return Scene(train, test, points, scene_extent(train))

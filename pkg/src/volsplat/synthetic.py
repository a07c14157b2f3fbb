"""Small procedurally generated scenes for smoke runs and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, TrainingView
from .colmap import ColmapCamera, ColmapImage, SparsePoints, write_colmap_text
from .gaussians import SH_C0, GaussianCloud, logit, num_sh_coeffs, rgb_to_sh_dc
from .ply import write_ply_points
from .rasterizer import DEFAULT_RASTER, render, to_uint8


def random_unit_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, sh_degree=0, spread=1.0, scale_range=(0.05, 0.2),
                 opacity_range=(0.3, 0.95), sh_noise=0.0, center=(0.0, 0.0, 0.0)):
    positions = np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3))
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    opacity_logits = logit(rng.uniform(*opacity_range, size=n))
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, size=(n, 3)))
    if sh_degree > 0 and sh_noise > 0:
        sh[:, 1:, :] = sh_noise * rng.normal(size=sh[:, 1:, :].shape)
    return GaussianCloud(positions, random_unit_quaternions(rng, n), log_scales,
                         opacity_logits, sh, active_sh_degree=sh_degree)


def pinhole(width, height, fov_deg=60.0) -> CameraIntrinsics:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def orbit_views(n_views, radius=4.0, width=64, height=64, fov_deg=60.0, elevation=0.35,
                target=(0.0, 0.0, 0.0), jitter_rng=None):
    """Cameras on a ring around ``target`` (world up is -y), all looking inward."""
    intr = pinhole(width, height, fov_deg)
    views = []
    for i in range(n_views):
        theta = 2 * np.pi * i / n_views
        elev = elevation * (1 if i % 2 == 0 else -1)
        if jitter_rng is not None:
            theta += jitter_rng.uniform(-0.1, 0.1)
        eye = np.asarray(target) + radius * np.array(
            [np.cos(elev) * np.sin(theta), -np.sin(elev), -np.cos(elev) * np.cos(theta)])
        views.append(TrainingView(intr, CameraPose.look_at(eye, target), name=f"view_{i:03d}"))
    return views


def render_targets(cloud, views, config=DEFAULT_RASTER):
    for v in views:
        v.image = render(cloud, v, config).image.copy()
    return views


def perturb_cloud(cloud, rng, position=0.05, log_scale=0.2, opacity=0.5, color=0.3,
                  rotation=0.1):
    """Copy of ``cloud`` with every parameter jittered by the given magnitudes."""
    out = cloud.copy()
    n = len(out)
    out.positions += rng.normal(scale=position, size=(n, 3))
    out.log_scales += rng.normal(scale=log_scale, size=(n, 3))
    out.opacity_logits += rng.normal(scale=opacity, size=n)
    out.sh[:, 0, :] += rng.normal(scale=color, size=(n, 3))
    q = out.rotations + rng.normal(scale=rotation, size=(n, 4))
    out.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    return out


def write_scene(directory, cloud, views, n_points=200, rng=None):
    """Write ``views`` as a COLMAP text model plus ``images/`` PNGs.

    Sparse points are sampled around the Gaussians of ``cloud`` and stored
    both in ``points3D.txt`` and ``points3D.ply``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    cameras, images = [], []
    for i, v in enumerate(views, start=1):
        k = v.intrinsics
        cameras.append(ColmapCamera(i, "PINHOLE", k.width, k.height, (k.fx, k.fy, k.cx, k.cy)))
        name = f"{v.name or f'view_{i:03d}'}.png"
        images.append(ColmapImage(i, tuple(v.pose.qvec), tuple(v.pose.tvec), i, name))
        image = v.image if v.image is not None else render(cloud, v).image
        Image.fromarray(to_uint8(image)).save(d / "images" / name)
    src = rng.integers(0, len(cloud), size=n_points)
    pos = cloud.positions[src] + rng.normal(size=(n_points, 3)) * np.exp(cloud.log_scales[src])
    colors = np.clip(0.5 + SH_C0 * cloud.sh[src, 0, :], 0.0, 1.0)
    points = SparsePoints(pos, colors)
    write_colmap_text(d, cameras, images, points)
    write_ply_points(d / "points3D.ply", points)
    return d

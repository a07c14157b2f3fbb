"""Shared builders for the test suite."""
import numpy as np

from volsplat.camera import CameraIntrinsics, CameraPose, TrainingView
from volsplat.gaussians import GaussianCloud, logit, rgb_to_sh_dc
from volsplat.synthetic import orbit_views, perturb_cloud, random_cloud, render_targets

IDENTITY = (1.0, 0.0, 0.0, 0.0)


def front_view(width=64, height=64, f=64.0, cx=None, cy=None):
    """Camera at the origin looking down +z."""
    intr = CameraIntrinsics(f, f, width / 2 if cx is None else cx,
                            height / 2 if cy is None else cy, width, height)
    return TrainingView(intr, CameraPose(IDENTITY, (0.0, 0.0, 0.0)))


def cloud_from(positions, scales, opacities, colors, rotations=None, sh_degree=0):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
    rot = np.tile(IDENTITY, (n, 1)) if rotations is None else np.asarray(rotations, float)
    return GaussianCloud(positions, rot,
                         np.log(np.broadcast_to(np.asarray(scales, float), (n, 3))).copy(),
                         logit(np.broadcast_to(np.asarray(opacities, float), (n,))).copy(),
                         sh, active_sh_degree=sh_degree)


def gradient_scene(seed, n=12, sh_degree=1, size=32):
    """Perturbed random cloud plus a target image rendered from the unperturbed one."""
    rng = np.random.default_rng(seed)
    gt = random_cloud(rng, n, sh_degree, spread=0.7, scale_range=(0.1, 0.3),
                      opacity_range=(0.3, 0.8), sh_noise=0.1)
    view = orbit_views(3, width=size, height=size, jitter_rng=rng)[seed % 3]
    render_targets(gt, [view])
    cloud = perturb_cloud(gt, rng, position=0.05, log_scale=0.1, opacity=0.3, color=0.1)
    return cloud, view

"""Tile-based splatting rasterizer.

Projection and tile binning are vectorized numpy; the per-pixel compositing
loops (forward, reverse-mode, and a brute-force reference) are numba kernels.
All arithmetic is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .camera import CameraIntrinsics, CameraPose
from .gaussians import GaussianCloud, covariance_from_rs, quat_to_rotmat, sigmoid
from .sh import sh_basis

# the system TBB is often too old for numba and it warns on first launch
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class RasterConfig:
    near: float = 0.01
    guard_band: float = 1.3
    dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    tile_size: int = 16
    footprint_sigma: float = 3.0
    background: tuple = (0.0, 0.0, 0.0)


DEFAULT_RASTER = RasterConfig()


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    index: int = 0


@dataclass
class Projection:
    """Per-view projection of a whole cloud; rows of culled Gaussians are unused."""

    visible: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray      # (a, b, c) of the inverse 2D covariance
    depths: np.ndarray
    colors: np.ndarray      # clamped to [0, 1]
    colors_raw: np.ndarray  # before clamping
    opacities: np.ndarray
    # kept for the reverse pass
    t_cam: np.ndarray
    jac: np.ndarray
    cov3d: np.ndarray
    dirs: np.ndarray
    dir_norms: np.ndarray
    basis: np.ndarray
    sh_degree: int


def _camera_arrays(intrinsics: CameraIntrinsics, pose: CameraPose):
    return (pose.rotation, pose.translation, pose.center,
            float(intrinsics.fx), float(intrinsics.fy), float(intrinsics.cx), float(intrinsics.cy))


def project_arrays(positions, rotations, log_scales, opacity_logits, sh, sh_degree,
                   intrinsics: CameraIntrinsics, pose: CameraPose,
                   config: RasterConfig = DEFAULT_RASTER) -> Projection:
    W, tw, campos, fx, fy, cx, cy = _camera_arrays(intrinsics, pose)
    n = len(positions)
    t = positions @ W.T + tw
    tz = t[:, 2]
    safe_z = np.where(tz > config.near, tz, 1.0)
    u = fx * t[:, 0] / safe_z + cx
    v = fy * t[:, 1] / safe_z + cy
    half_w, half_h = 0.5 * intrinsics.width, 0.5 * intrinsics.height
    visible = ((tz > config.near)
               & (np.abs(u - half_w) <= config.guard_band * half_w)
               & (np.abs(v - half_h) <= config.guard_band * half_h))

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / safe_z
    jac[:, 0, 2] = -fx * t[:, 0] / safe_z ** 2
    jac[:, 1, 1] = fy / safe_z
    jac[:, 1, 2] = -fy * t[:, 1] / safe_z ** 2
    cov3d = covariance_from_rs(rotations, log_scales)
    M = jac @ W
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += config.dilation
    cov2d[:, 1, 1] += config.dilation
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conics = np.stack([cov2d[:, 1, 1], -cov2d[:, 0, 1], cov2d[:, 0, 0]], axis=1) / det[:, None]

    dirs = positions - campos
    dir_norms = np.linalg.norm(dirs, axis=1)
    dirs = dirs / np.where(dir_norms > 0, dir_norms, 1.0)[:, None]
    basis = sh_basis(dirs, sh_degree)
    k = basis.shape[1]
    colors_raw = np.einsum("nk,nkc->nc", basis, sh[:, :k, :]) + 0.5
    colors = np.clip(colors_raw, 0.0, 1.0)

    return Projection(visible=visible, means2d=np.stack([u, v], axis=1), cov2d=cov2d,
                      conics=conics, depths=tz, colors=colors, colors_raw=colors_raw,
                      opacities=sigmoid(opacity_logits), t_cam=t, jac=jac, cov3d=cov3d,
                      dirs=dirs, dir_norms=dir_norms, basis=basis, sh_degree=sh_degree)


def project_cloud(cloud: GaussianCloud, intrinsics, pose, config=DEFAULT_RASTER) -> Projection:
    return project_arrays(cloud.positions, cloud.rotations, cloud.log_scales,
                          cloud.opacity_logits, cloud.sh, cloud.active_sh_degree,
                          intrinsics, pose, config)


def project_gaussian(primitive, intrinsics, pose, config=DEFAULT_RASTER, sh_degree=None):
    """Project one primitive; returns None when it is culled."""
    sh = np.asarray(primitive.sh_coeffs, dtype=np.float64)[None]
    if sh_degree is None:
        sh_degree = int(round(np.sqrt(sh.shape[1]))) - 1
    proj = project_arrays(np.asarray(primitive.position, dtype=np.float64)[None],
                          np.asarray(primitive.rotation, dtype=np.float64)[None],
                          np.asarray(primitive.log_scales, dtype=np.float64)[None],
                          np.array([primitive.opacity_logit], dtype=np.float64),
                          sh, sh_degree, intrinsics, pose, config)
    if not proj.visible[0]:
        return None
    return ProjectedGaussian(proj.means2d[0], proj.cov2d[0], float(proj.depths[0]),
                             proj.colors[0], float(proj.opacities[0]))


def depth_order(proj: Projection) -> np.ndarray:
    """Visible Gaussian indices by ascending depth, ties broken by index."""
    idx = np.flatnonzero(proj.visible)
    return idx[np.lexsort((idx, proj.depths[idx]))]


def bin_tiles(proj: Projection, width: int, height: int, config=DEFAULT_RASTER):
    """Assign depth-sorted Gaussians to every tile their footprint box overlaps.

    Returns ``(tile_ranges, instances)``: ``instances`` lists Gaussian indices
    grouped by tile, depth-sorted inside each group; ``tile_ranges[t]`` is the
    half-open slice of tile ``t``.
    """
    ts = config.tile_size
    tiles_x = -(-width // ts)
    tiles_y = -(-height // ts)
    order = depth_order(proj)
    op = proj.opacities[order]
    # Past this Mahalanobis radius the alpha cutoff rejects every pixel anyway,
    # so binning by it keeps the tiled result identical to a full per-pixel sort.
    with np.errstate(divide="ignore"):
        k2 = np.maximum(config.footprint_sigma ** 2,
                        2.0 * np.log(op / config.alpha_min))
    live = op >= config.alpha_min
    k = np.sqrt(np.where(live, k2, 0.0))
    ex = k * np.sqrt(proj.cov2d[order, 0, 0])
    ey = k * np.sqrt(proj.cov2d[order, 1, 1])
    u, v = proj.means2d[order, 0], proj.means2d[order, 1]
    px0 = np.clip(np.floor(u - ex - 0.5) - 1, 0, width - 1).astype(np.int64)
    px1 = np.clip(np.floor(u + ex - 0.5) + 1, -1, width - 1).astype(np.int64)
    py0 = np.clip(np.floor(v - ey - 0.5) - 1, 0, height - 1).astype(np.int64)
    py1 = np.clip(np.floor(v + ey - 0.5) + 1, -1, height - 1).astype(np.int64)
    empty = ~live | (px1 < px0) | (py1 < py0) | (u + ex < -1) | (v + ey < -1)
    tx0, tx1 = px0 // ts, px1 // ts
    ty0, ty1 = py0 // ts, py1 // ts
    nx = np.where(empty, 0, tx1 - tx0 + 1)
    ny = np.where(empty, 0, ty1 - ty0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(order)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    width_t = np.maximum(nx, 1)[rep]
    tile = (ty0[rep] + local // width_t) * tiles_x + (tx0[rep] + local % width_t)
    perm = np.argsort(tile, kind="stable")
    instances = order[rep][perm].astype(np.int64)
    tile_sorted = tile[perm]
    bounds = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))
    tile_ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return tile_ranges, instances


@njit(cache=True, parallel=True)
def _raster_forward(tile_ranges, instances, means2d, conics, colors, opacities,
                    width, height, tile_size, background, alpha_min, alpha_max, t_min):
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    image = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    n_clamped = np.zeros((height, width), dtype=np.int64)
    id_sum = np.zeros((height, width), dtype=np.int64)
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last_j = start
                for j in range(start, end):
                    gid = instances[j]
                    dx = fx - means2d[gid, 0]
                    dy = fy - means2d[gid, 1]
                    power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) \
                        - conics[gid, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opacities[gid] * math.exp(power)
                    clamped = alpha > alpha_max
                    if clamped:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    test_t = T * (1.0 - alpha)
                    if test_t < t_min:
                        break
                    w = alpha * T
                    r += colors[gid, 0] * w
                    g += colors[gid, 1] * w
                    b += colors[gid, 2] * w
                    T = test_t
                    last_j = j + 1
                    n_contrib[py, px] += 1
                    id_sum[py, px] += gid + 1
                    if clamped:
                        n_clamped[py, px] += 1
                image[py, px, 0] = r + T * background[0]
                image[py, px, 1] = g + T * background[1]
                image[py, px, 2] = b + T * background[2]
                final_t[py, px] = T
                last[py, px] = last_j
    return image, final_t, last, n_contrib, n_clamped, id_sum


@njit(cache=True)
def _raster_bruteforce(order, means2d, conics, colors, opacities, width, height,
                       background, alpha_min, alpha_max, t_min):
    image = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    for py in range(height):
        for px in range(width):
            T = 1.0
            acc = np.zeros(3)
            for gid in order:
                dx = px + 0.5 - means2d[gid, 0]
                dy = py + 0.5 - means2d[gid, 1]
                power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) \
                    - conics[gid, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = min(alpha_max, opacities[gid] * math.exp(power))
                if alpha < alpha_min:
                    continue
                nxt = T * (1.0 - alpha)
                if nxt < t_min:
                    break
                for c in range(3):
                    acc[c] += colors[gid, c] * (alpha * T)
                T = nxt
            for c in range(3):
                image[py, px, c] = acc[c] + T * background[c]
            final_t[py, px] = T
    return image, final_t


@njit(cache=True, parallel=True)
def _raster_backward(tile_ranges, instances, means2d, conics, colors, opacities,
                     width, height, tile_size, background, alpha_min, alpha_max,
                     final_t, last, grad_image):
    """Reverse pass; gradients land in per-instance slots so tiles never collide."""
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    m = instances.shape[0]
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                fx = px + 0.5
                fy = py + 0.5
                t_final = final_t[py, px]
                T = t_final
                d0 = grad_image[py, px, 0]
                d1 = grad_image[py, px, 1]
                d2 = grad_image[py, px, 2]
                bg_dot = background[0] * d0 + background[1] * d1 + background[2] * d2
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                for j in range(last[py, px] - 1, start - 1, -1):
                    gid = instances[j]
                    dx = fx - means2d[gid, 0]
                    dy = fy - means2d[gid, 1]
                    ca = conics[gid, 0]
                    cb = conics[gid, 1]
                    cc = conics[gid, 2]
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    alpha = opacities[gid] * G
                    clamped = alpha > alpha_max
                    if clamped:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    c0 = colors[gid, 0]
                    c1 = colors[gid, 1]
                    c2 = colors[gid, 2]
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    lc0 = c0
                    lc1 = c1
                    lc2 = c2
                    g_color[j, 0] += w * d0
                    g_color[j, 1] += w * d1
                    g_color[j, 2] += w * d2
                    d_alpha = T * ((c0 - acc0) * d0 + (c1 - acc1) * d1 + (c2 - acc2) * d2)
                    d_alpha -= t_final / (1.0 - alpha) * bg_dot
                    last_alpha = alpha
                    if clamped:
                        continue
                    d_power = d_alpha * alpha
                    g_opacity[j] += d_alpha * G
                    g_mean[j, 0] += d_power * (ca * dx + cb * dy)
                    g_mean[j, 1] += d_power * (cc * dy + cb * dx)
                    g_conic[j, 0] += -0.5 * d_power * dx * dx
                    g_conic[j, 1] += -d_power * dx * dy
                    g_conic[j, 2] += -0.5 * d_power * dy * dy
    return g_mean, g_conic, g_color, g_opacity


@dataclass
class RenderResult:
    image: np.ndarray          # (H, W, 3)
    transmittance: np.ndarray  # (H, W)
    projection: Projection
    tile_ranges: np.ndarray
    instances: np.ndarray
    last: np.ndarray
    n_contrib: np.ndarray
    n_clamped: np.ndarray
    contrib_ids: np.ndarray
    touched: np.ndarray        # Gaussians binned to at least one tile
    tiles_touched: np.ndarray

    def signature(self):
        """Discrete state of the pass; changes only when a cutoff or clamp flips."""
        p = self.projection
        return (p.visible.tobytes(), ((p.colors_raw < 0) | (p.colors_raw > 1)).tobytes(),
                self.n_contrib.tobytes(), self.n_clamped.tobytes(), self.contrib_ids.tobytes())


def _background(config):
    return np.asarray(config.background, dtype=np.float64).reshape(3)


def render_projection(proj: Projection, width: int, height: int,
                      config: RasterConfig = DEFAULT_RASTER) -> RenderResult:
    tile_ranges, instances = bin_tiles(proj, width, height, config)
    image, final_t, last, n_contrib, n_clamped, id_sum = _raster_forward(
        tile_ranges, instances, proj.means2d, proj.conics, proj.colors, proj.opacities,
        width, height, config.tile_size, _background(config),
        config.alpha_min, config.alpha_max, config.transmittance_min)
    tiles_touched = np.bincount(instances, minlength=len(proj.visible))
    return RenderResult(image, final_t, proj, tile_ranges, instances, last, n_contrib,
                        n_clamped, id_sum, tiles_touched > 0, tiles_touched)


def render(cloud: GaussianCloud, view, config: RasterConfig = DEFAULT_RASTER) -> RenderResult:
    """Render ``cloud`` from ``view`` (anything with ``intrinsics`` and ``pose``)."""
    intr = view.intrinsics
    proj = project_cloud(cloud, intr, view.pose, config)
    return render_projection(proj, intr.width, intr.height, config)


def render_bruteforce(cloud: GaussianCloud, view, config: RasterConfig = DEFAULT_RASTER):
    """Reference compositor: every pixel walks the full depth-sorted list."""
    intr = view.intrinsics
    proj = project_cloud(cloud, intr, view.pose, config)
    order = depth_order(proj).astype(np.int64)
    return _raster_bruteforce(order, proj.means2d, proj.conics, proj.colors, proj.opacities,
                              intr.width, intr.height, _background(config),
                              config.alpha_min, config.alpha_max, config.transmittance_min)


def raster_backward(result: RenderResult, grad_image, config: RasterConfig = DEFAULT_RASTER):
    """Gradients of the loss w.r.t. 2D means, conics, colors and opacities.

    Returns per-Gaussian arrays ``(g_mean (N,2), g_conic (N,3), g_color (N,3),
    g_opacity (N,))``; instance slots are summed in a fixed order, so the
    result does not depend on the thread count.
    """
    p = result.projection
    h, w = result.image.shape[:2]
    gm, gk, gc, go = _raster_backward(
        result.tile_ranges, result.instances, p.means2d, p.conics, p.colors, p.opacities,
        w, h, config.tile_size, _background(config), config.alpha_min, config.alpha_max,
        result.transmittance, result.last, np.ascontiguousarray(grad_image, dtype=np.float64))
    n = len(p.visible)
    inst = result.instances
    out = []
    for arr in (gm, gk, gc):
        acc = np.zeros((n, arr.shape[1]))
        np.add.at(acc, inst, arr)
        out.append(acc)
    g_op = np.zeros(n)
    np.add.at(g_op, inst, go)
    out.append(g_op)
    return tuple(out)


def set_num_threads(n: int):
    """Bound kernel parallelism; 0 means all available cores."""
    numba.set_num_threads(numba.config.NUMBA_NUM_THREADS if n <= 0 else
                          min(n, numba.config.NUMBA_NUM_THREADS))


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)

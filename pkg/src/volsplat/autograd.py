"""Training loss and analytic gradients of the full render pipeline.

The reverse pass walks the compositing order back to front in the raster
kernel, then chains through projection, covariance construction and the SH
color model here.  ``finite_difference_oracle`` re-runs the forward pass and
is kept independent of everything below ``loss``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gaussians import PARAM_NAMES, GaussianCloud, quat_to_rotmat, quat_to_rotmat_vjp
from .rasterizer import DEFAULT_RASTER, RasterConfig, raster_backward, render
from .sh import sh_basis_grad

# D-SSIM = 1 - SSIM, not halved.
DSSIM_SCALE = 1.0


@dataclass(frozen=True)
class LossConfig:
    lambda_ssim: float = 0.2
    window_size: int = 11
    window_sigma: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and positive")


@dataclass
class ParamGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    mean2d_norm: np.ndarray  # |dL/d mean2d| in NDC units, the densification signal
    touched: np.ndarray

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud):
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(cloud.sh), np.zeros(n), np.zeros(n, dtype=bool))


def gaussian_taps(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size=11, sigma=1.5):
    g = gaussian_taps(size, sigma)
    return np.outer(g, g)


_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _filter_valid(x, taps):
    """Separable valid-mode filtering over the last two axes."""
    k = len(taps)
    x = sliding_window_view(x, k, axis=-2) @ taps
    return sliding_window_view(x, k, axis=-1) @ taps


def _filter_full(x, taps):
    # adjoint of _filter_valid for a symmetric kernel
    p = len(taps) - 1
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return _filter_valid(np.pad(x, pad), taps)


def _ssim_parts(a, b, taps):
    mu_a, mu_b, e_aa, e_bb, e_ab = _filter_valid(np.stack([a, b, a * a, b * b, a * b]), taps)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + _C1
    num2 = 2 * cov + _C2
    den1 = mu_a ** 2 + mu_b ** 2 + _C1
    den2 = var_a + var_b + _C2
    return mu_a, mu_b, num1, num2, den1, den2


def ssim_with_grad(a, b, window_size=11, sigma=1.5, want_grad=True):
    """Channel-averaged SSIM over valid window positions and d SSIM / d a."""
    taps = gaussian_taps(window_size, sigma)
    h, w, channels = a.shape
    if h < window_size or w < window_size:
        raise ValueError(f"SSIM needs images of at least {window_size}x{window_size}")
    x = np.moveaxis(a, -1, 0)
    y = np.moveaxis(b, -1, 0)
    mu_x, mu_y, n1, n2, d1, d2 = _ssim_parts(x, y, taps)
    smap = (n1 * n2) / (d1 * d2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    # S = n1 n2 / (d1 d2) with n1 = 2 mu_x mu_y + C1, n2 = 2 (E_xy - mu_x mu_y) + C2,
    # d1 = mu_x^2 + mu_y^2 + C1, d2 = E_xx - mu_x^2 + var_y + C2
    g = 1.0 / smap.size
    dS_dn1 = n2 / (d1 * d2)
    dS_dn2 = n1 / (d1 * d2)
    dS_dd1 = -smap / d1
    dS_dd2 = -smap / d2
    d_mu_x = g * (dS_dn1 * 2 * mu_y + dS_dn2 * (-2 * mu_y)
                  + dS_dd1 * 2 * mu_x + dS_dd2 * (-2 * mu_x))
    d_e_xx = g * dS_dd2
    d_e_xy = g * dS_dn2 * 2
    b_mu, b_xx, b_xy = _filter_full(np.stack([d_mu_x, d_e_xx, d_e_xy]), taps)
    grad = b_mu + 2 * x * b_xx + y * b_xy
    return value, np.moveaxis(grad, 0, -1)


def loss(rendered, target, config: LossConfig = LossConfig()):
    value, _ = loss_and_grad(rendered, target, config, want_grad=False)
    return value


def loss_and_grad(rendered, target, config: LossConfig = LossConfig(), want_grad=True):
    """``(1 - lambda) * L1 + lambda * (1 - SSIM)`` and its image gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    lam = config.lambda_ssim
    diff = rendered - target
    value = (1.0 - lam) * np.abs(diff).mean()
    grad = (1.0 - lam) * np.sign(diff) / diff.size if want_grad else None
    if lam > 0.0:
        s, gs = ssim_with_grad(rendered, target, config.window_size, config.window_sigma,
                               want_grad)
        value += lam * DSSIM_SCALE * (1.0 - s)
        if want_grad:
            grad = grad - lam * DSSIM_SCALE * gs
    return float(value), grad


def projection_backward(cloud: GaussianCloud, view, proj, g_mean, g_conic, g_color, g_opacity):
    """Chain 2D-footprint gradients back to the cloud parameters."""
    n = len(cloud)
    vis = proj.visible
    grads = ParamGradients.zeros_like(cloud)
    if not np.any(vis):
        return grads
    W = view.pose.rotation
    fx, fy = view.intrinsics.fx, view.intrinsics.fy
    g_mean = np.where(vis[:, None], g_mean, 0.0)
    g_conic = np.where(vis[:, None], g_conic, 0.0)
    g_color = np.where(vis[:, None], g_color, 0.0)
    g_opacity = np.where(vis, g_opacity, 0.0)

    # opacity
    op = proj.opacities
    grads.opacity_logits = g_opacity * op * (1.0 - op)

    # color -> SH coefficients and view direction
    raw = proj.colors_raw
    g_raw = g_color * ((raw > 0.0) & (raw < 1.0))
    k = proj.basis.shape[1]
    grads.sh[:, :k, :] = proj.basis[:, :, None] * g_raw[:, None, :]
    dbasis = sh_basis_grad(proj.dirs, proj.sh_degree)          # (N, K, 3)
    g_basis = np.einsum("nkc,nc->nk", cloud.sh[:, :k, :], g_raw)
    g_dir = np.einsum("nk,nkd->nd", g_basis, dbasis)
    d = proj.dirs
    g_pos = (g_dir - d * np.sum(g_dir * d, axis=1, keepdims=True)) / \
        np.where(proj.dir_norms > 0, proj.dir_norms, 1.0)[:, None]

    # conic -> 2D covariance
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    C = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gc = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    G2 = -C @ Gc @ C

    # 2D covariance -> 3D covariance and Jacobian
    J = proj.jac
    M = J @ W
    cov3 = proj.cov3d
    G3 = np.swapaxes(M, 1, 2) @ G2 @ M
    GM = 2.0 * G2 @ M @ cov3
    GJ = GM @ W.T

    t = proj.t_cam
    tz = np.where(vis, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    g_t = np.zeros((n, 3))
    g_t[:, 0] = GJ[:, 0, 2] * (-fx / tz ** 2) + g_mean[:, 0] * fx / tz
    g_t[:, 1] = GJ[:, 1, 2] * (-fy / tz ** 2) + g_mean[:, 1] * fy / tz
    g_t[:, 2] = (GJ[:, 0, 0] * (-fx / tz ** 2) + GJ[:, 0, 2] * (2 * fx * tx / tz ** 3)
                 + GJ[:, 1, 1] * (-fy / tz ** 2) + GJ[:, 1, 2] * (2 * fy * ty / tz ** 3)
                 - g_mean[:, 0] * fx * tx / tz ** 2 - g_mean[:, 1] * fy * ty / tz ** 2)
    g_pos += g_t @ W
    grads.positions = np.where(vis[:, None], g_pos, 0.0)

    # 3D covariance -> rotation and log-scales
    R = quat_to_rotmat(cloud.rotations)
    s2 = np.exp(2.0 * cloud.log_scales)
    G3 = 0.5 * (G3 + np.swapaxes(G3, 1, 2))
    RtGR = np.swapaxes(R, 1, 2) @ G3 @ R
    grads.log_scales = 2.0 * s2 * np.diagonal(RtGR, axis1=1, axis2=2)
    g_R = 2.0 * G3 @ R * s2[:, None, :]
    grads.rotations = quat_to_rotmat_vjp(cloud.rotations, g_R)
    grads.log_scales = np.where(vis[:, None], grads.log_scales, 0.0)
    grads.rotations = np.where(vis[:, None], grads.rotations, 0.0)

    w, h = view.intrinsics.width, view.intrinsics.height
    ndc = g_mean * np.array([0.5 * w, 0.5 * h])
    grads.mean2d_norm = np.linalg.norm(ndc, axis=1)
    return grads


def backward(cloud: GaussianCloud, view, target, loss_config: LossConfig = LossConfig(),
             raster_config: RasterConfig = DEFAULT_RASTER, result=None):
    """Loss of rendering ``cloud`` from ``view`` against ``target`` and its gradients."""
    if result is None:
        result = render(cloud, view, raster_config)
    value, g_img = loss_and_grad(result.image, target, loss_config)
    g_mean, g_conic, g_color, g_op = raster_backward(result, g_img, raster_config)
    grads = projection_backward(cloud, view, result.projection, g_mean, g_conic, g_color, g_op)
    grads.touched = result.touched.copy()
    return value, grads


def get_param(cloud: GaussianCloud, name: str, index: tuple) -> float:
    return float(getattr(cloud, name)[index])


def finite_difference_oracle(cloud: GaussianCloud, view, target, name: str, index, step=1e-4,
                             loss_config: LossConfig = LossConfig(),
                             raster_config: RasterConfig = DEFAULT_RASTER, loss_fn=None):
    """Central difference of the loss w.r.t. one scalar parameter.

    ``loss_fn(cloud)`` overrides the render-and-compare objective.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if loss_fn is None:
        loss_fn = lambda c: loss(render(c, view, raster_config).image, target, loss_config)
    index = tuple(np.atleast_1d(index))
    probe = cloud.copy()
    arr = getattr(probe, name)
    base = arr[index]
    arr[index] = base + step
    up = loss_fn(probe)
    arr[index] = base - step
    down = loss_fn(probe)
    return (up - down) / (2.0 * step)

"""Real spherical-harmonics basis up to degree 3 and its direction derivative.

Coefficient layout is (N, K, 3): K basis functions, one column per color
channel.  Basis signs follow the usual splatting convention (Condon-Shortley
phase kept).
"""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def sh_basis(dirs, degree):
    """Basis values (N, (degree+1)^2) for unit directions (N, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy),
                C3[1] * x * y * z,
                C3[2] * y * (4 * zz - xx - yy),
                C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                C3[4] * x * (4 * zz - xx - yy),
                C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree):
    """Partial derivatives of each basis function, shape (N, K, 3).

    Components of the direction are treated as independent variables; the
    caller handles the normalization.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [(C2[0] * y, C2[0] * x, zero),
                 (zero, C2[1] * z, C2[1] * y),
                 (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
                 (C2[3] * z, zero, C2[3] * x),
                 (2 * C2[4] * x, -2 * C2[4] * y, zero)]
    if degree >= 3:
        rows += [(C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
                 (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
                 (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
                 (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
                 (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
                 (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def resolve_color(sh_coeffs, direction, degree=None):
    """View-dependent RGB, ``0.5 + sum_k basis_k * coeff_k`` clamped below at 0.

    ``sh_coeffs`` is (K, 3) or (N, K, 3); ``direction`` must be unit length.
    The upper clamp to 1 happens at compositing time.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    if degree is None:
        degree = int(round(np.sqrt(sh_coeffs.shape[-2]))) - 1
    k = (degree + 1) ** 2
    basis = sh_basis(direction, degree)
    rgb = np.einsum("...k,...kc->...c", basis, sh_coeffs[..., :k, :]) + 0.5
    return np.maximum(rgb, 0.0)

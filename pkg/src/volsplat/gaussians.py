"""Gaussian primitive parameterization and closed-form shape quantities.

A primitive is stored unconstrained: log-scales, an opacity logit and a
scalar-first quaternion.  Covariance, volume and condition number are all
derived from those fields.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, SingularMatrixError

SH_C0 = 0.28209479177387814
VOLUME_CONST = 4.0 / 3.0 * np.pi

PARAM_NAMES = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidParameterError(f"{name}: non-finite input")


def quat_to_rotmat(q):
    """Rotation matrices for scalar-first quaternions of shape (..., 4).

    Inputs are normalized first, so nearly-unit quaternions are accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull a gradient w.r.t. the rotation matrix back to the raw quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # through the normalization q / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def covariance_from_rs(rotation, log_scales):
    """Return ``R diag(exp(log_scales))**2 R^T``; batched over leading axes."""
    rotation = np.asarray(rotation, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    _check_finite("covariance_from_rs", rotation, log_scales)
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * log_scales)
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def gaussian_density(position, cov, x):
    """Unnormalized kernel ``exp(-0.5 (x-mu)^T cov^-1 (x-mu))``."""
    position = np.asarray(position, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_finite("gaussian_density", position, cov, x)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 1e-12 * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        raise SingularMatrixError("gaussian_density: covariance is singular")
    d = x - position
    m = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * m))


def ellipsoid_volume(log_scales):
    """Volume of the ellipsoid of inertia, (4/3) pi s1 s2 s3.

    Works on a single 3-vector or an (N, 3) array.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    _check_finite("ellipsoid_volume", log_scales)
    return VOLUME_CONST * np.exp(np.sum(log_scales, axis=-1))


def condition_number(log_scales):
    """Ratio of largest to smallest covariance eigenvalue, (s_max / s_min)^2."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    _check_finite("condition_number", log_scales)
    return np.exp(2.0 * (np.max(log_scales, axis=-1) - np.min(log_scales, axis=-1)))


def split_eigenvalues(eigenvalues, kappa):
    """Divide every covariance eigenvalue by the condition number ``kappa``."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(eigenvalues <= 0):
        raise InvalidParameterError("split_eigenvalues: eigenvalues must be positive")
    if np.any(kappa < 1.0) or not np.all(np.isfinite(kappa)):
        raise InvalidParameterError("split_eigenvalues: kappa must be >= 1")
    return eigenvalues / kappa[..., None] if kappa.ndim else eigenvalues / kappa


def split_log_scales(log_scales, floor=-np.inf):
    """Child log-scales for a volumetric split.

    Equivalent to ``split_eigenvalues`` on ``exp(2 log_scales)``, followed by
    clamping at ``floor``.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    half_log_kappa = np.max(log_scales, axis=-1) - np.min(log_scales, axis=-1)
    return np.maximum(log_scales - half_log_kappa[..., None], floor)


@dataclass
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (K, 3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_rs(self.rotation, self.log_scales)


def _empty_moments(n, sh_shape):
    return {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "sh": np.zeros((n,) + sh_shape),
    }


@dataclass
class GaussianCloud:
    """Structure-of-arrays population of Gaussians.

    Besides the learnable parameters the cloud carries the Adam moments and
    the densification statistics, so every resize keeps them in lockstep.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    active_sh_degree: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    exp_avg: dict = field(default=None, repr=False)
    exp_avg_sq: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        n = len(self.positions)
        if self.sh.ndim != 3 or self.sh.shape[2] != 3:
            raise InvalidParameterError("sh must have shape (N, K, 3)")
        degree = int(round(np.sqrt(self.sh.shape[1]))) - 1
        if num_sh_coeffs(degree) != self.sh.shape[1] or not 0 <= degree <= 3:
            raise InvalidParameterError(f"unsupported SH coefficient count {self.sh.shape[1]}")
        for name in PARAM_NAMES:
            if len(getattr(self, name)) != n:
                raise InvalidParameterError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        self.active_sh_degree = min(self.active_sh_degree, degree)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        if self.exp_avg is None:
            self.exp_avg = _empty_moments(n, self.sh.shape[1:])
        if self.exp_avg_sq is None:
            self.exp_avg_sq = _empty_moments(n, self.sh.shape[1:])

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def covariances(self):
        return covariance_from_rs(self.rotations, self.log_scales)

    def volumes(self):
        return ellipsoid_volume(self.log_scales)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i].copy(), self.rotations[i].copy(),
                                 self.log_scales[i].copy(), float(self.opacity_logits[i]),
                                 self.sh[i].copy())

    def copy(self) -> "GaussianCloud":
        return self.select(np.arange(len(self)))

    def select(self, index) -> "GaussianCloud":
        """New cloud holding the rows picked by ``index`` (mask or integer array)."""
        return GaussianCloud(
            **{name: getattr(self, name)[index].copy() for name in PARAM_NAMES},
            active_sh_degree=self.active_sh_degree,
            grad_accum=self.grad_accum[index].copy(),
            grad_count=self.grad_count[index].copy(),
            exp_avg={k: v[index].copy() for k, v in self.exp_avg.items()},
            exp_avg_sq={k: v[index].copy() for k, v in self.exp_avg_sq.items()},
        )

    def keep(self, index):
        """Drop every row not picked by ``index``, in place."""
        other = self.select(index)
        self.__dict__.update(other.__dict__)

    def append(self, **params):
        """Append rows in place; moments and statistics start at zero."""
        n_new = len(params["positions"])
        for name in PARAM_NAMES:
            arr = np.asarray(params[name], dtype=np.float64)
            if len(arr) != n_new:
                raise InvalidParameterError(f"appended {name} has wrong length")
            setattr(self, name, np.concatenate([getattr(self, name), arr]))
        zeros = _empty_moments(n_new, self.sh.shape[1:])
        for k in self.exp_avg:
            self.exp_avg[k] = np.concatenate([self.exp_avg[k], zeros[k]])
            self.exp_avg_sq[k] = np.concatenate([self.exp_avg_sq[k], zeros[k]])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n_new)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n_new)])

    def reset_stats(self):
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0.0

    def validate(self):
        """Check the primitive invariants; raise on violation."""
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"{name} contains non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidParameterError("rotation quaternions are not unit norm")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise InvalidParameterError("scales must be positive and finite")

    @classmethod
    def from_arrays(cls, positions, log_scales, opacity_logits, sh, rotations=None,
                    active_sh_degree=None) -> "GaussianCloud":
        positions = np.asarray(positions, dtype=np.float64)
        if rotations is None:
            rotations = np.zeros((len(positions), 4))
            rotations[:, 0] = 1.0
        sh = np.asarray(sh, dtype=np.float64)
        if active_sh_degree is None:
            active_sh_degree = int(round(np.sqrt(sh.shape[1]))) - 1
        return cls(positions, rotations, log_scales, opacity_logits, sh,
                   active_sh_degree=active_sh_degree)

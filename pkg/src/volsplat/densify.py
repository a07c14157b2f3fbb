"""Adam optimization and adaptive density control.

Gradient-driven clone/split and opacity pruning follow the usual splatting
recipe.  ``volumetric_densify`` adds the volume criterion: any Gaussian whose
ellipsoid of inertia exceeds ``volume_threshold`` is replaced by two children
whose covariance eigenvalues are divided by the parent's condition number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (PARAM_NAMES, GaussianCloud, ellipsoid_volume, logit,
                        quat_to_rotmat, sigmoid, split_log_scales)


@dataclass
class AdcConfig:
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    grad_threshold: float = 0.0002
    percent_dense: float = 0.01          # clone/split boundary as a fraction of the extent
    volume_threshold: float = 0.03
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000   # 0 disables
    max_gaussians: int = 3_400_000
    grad_mode: str = "mean"              # "mean" (sum / views seen) or "sum"
    split_factor: float = 1.6
    volumetric: bool = True
    volumetric_after_stop: bool = False
    child_opacity: str = "inherit"       # or "halve"
    scale_floor: float = 1e-6            # child log-scale floor, fraction of the extent

    def __post_init__(self):
        for name in ("densify_interval", "grad_threshold", "percent_dense", "volume_threshold",
                     "prune_opacity", "max_gaussians", "split_factor", "scale_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.densify_start >= self.densify_stop:
            raise ValueError("densify_start must be below densify_stop")
        if self.grad_mode not in ("mean", "sum"):
            raise ValueError("grad_mode must be 'mean' or 'sum'")
        if self.child_opacity not in ("inherit", "halve"):
            raise ValueError("child_opacity must be 'inherit' or 'halve'")
        if self.opacity_reset_interval < 0:
            raise ValueError("opacity_reset_interval must be >= 0")


def exponential_lr(step, lr_init, lr_final, max_steps):
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if lr_init == lr_final:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)


@dataclass
class OptimState:
    extent: float = 1.0
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    position_lr_max_steps: int = 30_000
    sh_dc_lr: float = 2.5e-3
    sh_rest_lr: float = 2.5e-3 / 20.0
    opacity_lr: float = 5e-2
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    lr_overrides: dict = field(default_factory=dict)

    def learning_rates(self, step=None):
        step = self.step if step is None else step
        lrs = {
            "positions": self.extent * exponential_lr(step, self.position_lr_init,
                                                      self.position_lr_final,
                                                      self.position_lr_max_steps),
            "rotations": self.rotation_lr,
            "log_scales": self.scaling_lr,
            "opacity_logits": self.opacity_lr,
            "sh": (self.sh_dc_lr, self.sh_rest_lr),
        }
        lrs.update(self.lr_overrides)
        return lrs


def adam_step(cloud: GaussianCloud, grads, state: OptimState):
    """One Adam update of every parameter group; quaternions are renormalized."""
    gdict = grads if isinstance(grads, dict) else grads.as_dict()
    n = len(cloud)
    for name in PARAM_NAMES:
        if len(gdict[name]) != n:
            raise ValueError(f"gradient {name} has length {len(gdict[name])}, cloud has {n}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lrs = state.learning_rates(t)
    for name in PARAM_NAMES:
        g = gdict[name]
        m = cloud.exp_avg[name]
        v = cloud.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lrs[name]
        if name == "sh":
            lr = np.full((1, cloud.sh.shape[1], 1), lr[1])
            lr[:, 0, :] = lrs["sh"][0]
        param = getattr(cloud, name)
        param -= lr / bc1 * m / (np.sqrt(v) / math.sqrt(bc2) + state.eps)
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)


def accumulate_stats(cloud: GaussianCloud, grads):
    """Add one view's screen-space gradient norms to the densification signal."""
    touched = grads.touched
    cloud.grad_accum[touched] += grads.mean2d_norm[touched]
    cloud.grad_count[touched] += 1


def densify_signal(cloud: GaussianCloud, mode="mean"):
    if mode == "sum":
        return cloud.grad_accum.copy()
    out = np.zeros(len(cloud))
    seen = cloud.grad_count > 0
    out[seen] = cloud.grad_accum[seen] / cloud.grad_count[seen]
    return out


def enforce_cap(n_current: int, max_gaussians: int, priorities) -> np.ndarray:
    """Positions of the pending insertions that fit under the cap.

    Every pending insertion grows the population by one.  Highest priority
    wins; ties go to the lower position.
    """
    priorities = np.asarray(priorities, dtype=np.float64)
    room = max(0, int(max_gaussians) - int(n_current))
    order = np.lexsort((np.arange(len(priorities)), -priorities))
    return np.sort(order[:room])


def _sample_in_parent(cloud, idx, rng):
    R = quat_to_rotmat(cloud.rotations[idx])
    z = rng.normal(size=(len(idx), 3)) * np.exp(cloud.log_scales[idx])
    return cloud.positions[idx] + np.einsum("nij,nj->ni", R, z)


def _rows(cloud, idx, **override):
    rows = {name: getattr(cloud, name)[idx].copy() for name in PARAM_NAMES}
    rows.update(override)
    return rows


def _replace_with_children(cloud, parents, children_rows):
    cloud.append(**children_rows)
    keep = np.ones(len(cloud), dtype=bool)
    keep[parents] = False
    cloud.keep(keep)


def gradient_densify(cloud: GaussianCloud, config: AdcConfig, extent: float, rng):
    """Clone small and split large Gaussians with a high screen-space gradient.

    Returns ``(cloned, split)``.  The densification signal is reset afterwards.
    """
    signal = densify_signal(cloud, config.grad_mode)
    marked = np.flatnonzero(signal >= config.grad_threshold)
    admitted = marked[enforce_cap(len(cloud), config.max_gaussians, signal[marked])]
    max_scale = np.exp(cloud.log_scales[admitted].max(axis=1)) if len(admitted) else np.zeros(0)
    boundary = config.percent_dense * extent
    clones = admitted[max_scale < boundary]
    splits = admitted[max_scale >= boundary]

    if len(clones):
        cloud.append(**_rows(cloud, clones, positions=_sample_in_parent(cloud, clones, rng)))
    if len(splits):
        twice = np.repeat(splits, 2)
        children = _rows(cloud, twice, positions=_sample_in_parent(cloud, twice, rng),
                         log_scales=cloud.log_scales[twice] - math.log(config.split_factor))
        _replace_with_children(cloud, splits, children)
    cloud.reset_stats()
    return len(clones), len(splits)


def volumetric_densify(cloud: GaussianCloud, config: AdcConfig, extent: float, rng) -> int:
    """Split every Gaussian whose ellipsoid volume exceeds the threshold.

    Each violator is replaced by two children drawn from its own distribution,
    with log-scales lowered by half the log condition number (eigenvalues
    divided by it), rotation, SH and opacity inherited.  Children are not
    re-examined in the same call.
    """
    if not config.volumetric or len(cloud) == 0:
        return 0
    volumes = ellipsoid_volume(cloud.log_scales)
    over = np.flatnonzero(volumes > config.volume_threshold)
    if len(over) == 0:
        return 0
    parents = over[enforce_cap(len(cloud), config.max_gaussians, volumes[over])]
    if len(parents) == 0:
        return 0
    twice = np.repeat(parents, 2)
    floor = math.log(config.scale_floor * extent)
    child_scales = split_log_scales(cloud.log_scales[twice], floor)
    opacity = cloud.opacity_logits[twice]
    if config.child_opacity == "halve":
        opacity = logit(0.5 * sigmoid(opacity))
    children = _rows(cloud, twice, positions=_sample_in_parent(cloud, twice, rng),
                     log_scales=child_scales, opacity_logits=opacity)
    _replace_with_children(cloud, parents, children)
    return len(parents)


def prune(cloud: GaussianCloud, config: AdcConfig) -> int:
    low = sigmoid(cloud.opacity_logits) < config.prune_opacity
    removed = int(np.count_nonzero(low))
    if removed:
        cloud.keep(~low)
    return removed


def opacity_reset(cloud: GaussianCloud, ceiling=0.01):
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, logit(ceiling))
    cloud.exp_avg["opacity_logits"][:] = 0.0
    cloud.exp_avg_sq["opacity_logits"][:] = 0.0

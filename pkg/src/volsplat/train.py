"""Training loop: render, loss, backward, Adam, then density control."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import LossConfig, backward
from .densify import (AdcConfig, OptimState, accumulate_stats, adam_step, gradient_densify,
                      opacity_reset, prune, volumetric_densify)
from .gaussians import GaussianCloud
from .metrics import psnr, volume_histogram
from .rasterizer import DEFAULT_RASTER, RasterConfig, render

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 30_000
    adc: AdcConfig = field(default_factory=AdcConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    raster: RasterConfig = DEFAULT_RASTER
    sh_degree: int = 3
    sh_increase_interval: int = 1000
    seed: int = 0
    eval_interval: int = 1000          # 0 disables periodic evaluation
    histogram_iterations: tuple = (4000, 8000, 12000)
    histogram_threshold: float | None = None  # defaults to the volume threshold
    lr_overrides: dict = field(default_factory=dict)


@dataclass
class DensifyEvent:
    iteration: int
    cloned: int
    split: int
    volume_split: int
    pruned: int
    reset: bool
    count: int


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list                  # dicts: iteration, loss, n, psnr, wall_time
    events: list               # DensifyEvent per density-control step
    histograms: dict           # iteration -> VolumeHistogram
    max_count: int = 0


def evaluate_psnr(cloud, views, raster=DEFAULT_RASTER):
    return [psnr(render(cloud, v, raster).image, v.image) for v in views]


def _fit_cap(cloud, cap):
    if len(cloud) <= cap:
        return cloud
    keep = (np.arange(cap) * len(cloud)) // cap
    log.warning("seed cloud has %d points, keeping %d to respect the cap", len(cloud), cap)
    return cloud.select(keep)


def train(cloud: GaussianCloud, views, config: TrainConfig, extent: float = 1.0,
          test_views=None, callback=None) -> TrainResult:
    """Optimize ``cloud`` against the images of ``views``.

    ``callback(iteration, cloud, loss)`` runs after every iteration.  The run is
    a pure function of its inputs and ``config.seed``.
    """
    adc = config.adc
    rng = np.random.default_rng(config.seed)
    cloud = _fit_cap(cloud.copy(), adc.max_gaussians)
    cloud.active_sh_degree = 0 if config.sh_increase_interval > 0 else cloud.sh_degree
    state = OptimState(extent=extent, lr_overrides=dict(config.lr_overrides))
    eval_views = test_views if test_views else views
    hist_threshold = (config.histogram_threshold if config.histogram_threshold is not None
                      else adc.volume_threshold)
    result = TrainResult(cloud, [], [], {}, len(cloud))
    queue = []
    start = time.perf_counter()

    for it in range(1, config.iterations + 1):
        if config.sh_increase_interval > 0 and it % config.sh_increase_interval == 0:
            cloud.active_sh_degree = min(cloud.active_sh_degree + 1, cloud.sh_degree)
        if not queue:
            queue = list(rng.permutation(len(views)))
        view = views[queue.pop()]

        loss_value, grads = backward(cloud, view, view.image, config.loss, config.raster)
        adam_step(cloud, grads, state)
        if it < adc.densify_stop:
            accumulate_stats(cloud, grads)

        in_window = adc.densify_start <= it < adc.densify_stop
        on_interval = it % adc.densify_interval == 0
        if on_interval and (in_window or (adc.volumetric_after_stop and it >= adc.densify_stop)):
            cloned = split = 0
            if in_window:
                cloned, split = gradient_densify(cloud, adc, extent, rng)
            vsplit = volumetric_densify(cloud, adc, extent, rng)
            pruned = prune(cloud, adc) if in_window else 0
            result.events.append(DensifyEvent(it, cloned, split, vsplit, pruned, False, len(cloud)))
        if (adc.opacity_reset_interval and it % adc.opacity_reset_interval == 0
                and it < adc.densify_stop):
            opacity_reset(cloud)
            result.events.append(DensifyEvent(it, 0, 0, 0, 0, True, len(cloud)))
        result.max_count = max(result.max_count, len(cloud))

        if it in config.histogram_iterations:
            result.histograms[it] = volume_histogram(cloud, threshold=hist_threshold, iteration=it)
        if (config.eval_interval and it % config.eval_interval == 0) or it == config.iterations:
            scores = evaluate_psnr(cloud, eval_views, config.raster) if eval_views else []
            row = dict(iteration=it, loss=loss_value, n=len(cloud),
                       psnr=float(np.mean(scores)) if scores else float("nan"),
                       wall_time=time.perf_counter() - start)
            result.log.append(row)
            log.info("iter %d loss %.5f N %d psnr %.2f", it, loss_value, len(cloud), row["psnr"])
        if callback is not None:
            callback(it, cloud, loss_value)

    result.cloud = cloud
    return result

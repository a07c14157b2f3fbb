"""``volsplat`` command line: train, render, eval and analyze-volumes.

Exit codes: 0 success, 1 configuration error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .autograd import LossConfig
from .colmap import load_colmap_sparse
from .densify import AdcConfig
from .errors import ParseError, UnsupportedModelError
from .metrics import (psnr, ssim, volume_histogram, write_histogram_csv,
                      write_view_metrics_csv, psnr_for_report)
from .ply import export_checkpoint, import_checkpoint
from .rasterizer import render, set_num_threads, to_uint8
from .camera import TrainingView
from .scene import load_scene, seed_cloud
from .train import TrainConfig, train

log = logging.getLogger("volsplat")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2

ADC_KEYS = {f.name for f in dataclasses.fields(AdcConfig)}
LOSS_KEYS = {f.name for f in dataclasses.fields(LossConfig)}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    scene: Path | None = None
    init: str = "colmap"
    downsample: int = 1
    iters: int = 30_000
    out: Path = Path("output")
    seed: int = 0
    threads: int = 0              # 0 = all cores
    deterministic: bool = False
    sh_degree: int = 3
    test_every: int = 8
    normalize: bool = False
    eval_interval: int = 1000
    histogram_iterations: tuple = (4000, 8000, 12000)
    ply_path: Path | None = None
    adc: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)

    def adc_config(self) -> AdcConfig:
        try:
            return AdcConfig(**self.adc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(**self.loss)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"adc", "loss"}
# flag name -> config key where they differ
FLAG_ALIASES = {"vth": "volume_threshold"}


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of keys to values")
    return data


def _parse_float(text):
    value = float(text)
    if math.isnan(value):
        raise argparse.ArgumentTypeError("NaN is not a valid threshold")
    return value


def build_run_config(values: dict) -> RunConfig:
    """Sort a flat key/value mapping into run, density-control and loss fields."""
    run = RunConfig()
    for key, value in values.items():
        key = FLAG_ALIASES.get(key, key).replace("-", "_")
        if key in ADC_KEYS:
            run.adc[key] = value
        elif key in LOSS_KEYS:
            run.loss[key] = value
        elif key in RUN_KEYS:
            setattr(run, key, value)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if run.scene is not None:
        run.scene = Path(run.scene)
    run.out = Path(run.out)
    if run.ply_path is not None:
        run.ply_path = Path(run.ply_path)
    run.histogram_iterations = tuple(int(i) for i in run.histogram_iterations)
    if run.init not in ("colmap", "ply"):
        raise ConfigError(f"init must be 'colmap' or 'ply', got {run.init!r}")
    if run.downsample not in (1, 2, 4):
        raise ConfigError("downsample must be 1, 2 or 4")
    if run.iters < 0:
        raise ConfigError("iters must be non-negative")
    if run.threads < 0:
        raise ConfigError("threads must be >= 0")
    if run.test_every < 0:
        raise ConfigError("test_every must be >= 0")
    return run


def _require_dir(path, what="scene directory"):
    if path is None:
        raise ConfigError("--scene is required")
    if not Path(path).is_dir():
        raise ConfigError(f"{what} {path} does not exist")


def _require_file(path, what="checkpoint"):
    if not Path(path).is_file():
        raise ConfigError(f"{what} {path} does not exist")


def _apply_threads(run: RunConfig):
    # the kernels reduce in a fixed order, so one thread is only a safeguard
    set_num_threads(1 if run.deterministic else run.threads)


def cmd_train(run: RunConfig) -> int:
    _require_dir(run.scene)
    adc = run.adc_config()
    config = TrainConfig(iterations=run.iters, adc=adc, loss=run.loss_config(),
                         sh_degree=run.sh_degree, seed=run.seed, eval_interval=run.eval_interval,
                         histogram_iterations=run.histogram_iterations)
    _apply_threads(run)
    scene = load_scene(run.scene, run.init, run.downsample, run.test_every, run.normalize,
                       ply_path=run.ply_path)
    cloud = seed_cloud(scene.points, run.sh_degree, scene.extent)
    result = train(cloud, scene.train_views, config, scene.extent, scene.test_views)

    run.out.mkdir(parents=True, exist_ok=True)
    export_checkpoint(result.cloud, run.out / "point_cloud.ply")
    with open(run.out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "N", "PSNR", "wall_time"])
        for row in result.log:
            w.writerow([row["iteration"], f"{row['loss']:.6f}", row["n"],
                        f"{psnr_for_report(row['psnr']):.4f}", f"{row['wall_time']:.3f}"])
    for it, hist in sorted(result.histograms.items()):
        write_histogram_csv(run.out / f"volume_histogram_{it}.csv", hist)
    print(f"trained {len(result.cloud)} Gaussians, checkpoint written to "
          f"{run.out / 'point_cloud.ply'}")
    return EXIT_OK


def cmd_render(run: RunConfig, checkpoint) -> int:
    _require_file(checkpoint)
    _require_dir(run.scene)
    _apply_threads(run)
    cloud = import_checkpoint(checkpoint)
    _, records = load_colmap_sparse(run.scene)
    run.out.mkdir(parents=True, exist_ok=True)
    for intr, pose, name in records:
        view = TrainingView(intr.downsampled(run.downsample), pose, name=name)
        image = render(cloud, view).image
        Image.fromarray(to_uint8(image)).save(run.out / f"{Path(name).stem}.png")
    print(f"rendered {len(records)} views to {run.out}")
    return EXIT_OK


def cmd_eval(run: RunConfig, checkpoint) -> int:
    _require_file(checkpoint)
    _require_dir(run.scene)
    _apply_threads(run)
    cloud = import_checkpoint(checkpoint)
    scene = load_scene(run.scene, "colmap", run.downsample, run.test_every, run.normalize)
    views = scene.test_views or scene.train_views
    rows = []
    for v in views:
        image = render(cloud, v).image
        rows.append((v.name, psnr(image, v.image), ssim(image, v.image)))
    run.out.mkdir(parents=True, exist_ok=True)
    write_view_metrics_csv(run.out / "eval.csv", rows)
    mean_p = np.mean([psnr_for_report(p) for _, p, _ in rows])
    mean_s = np.mean([s for _, _, s in rows])
    print(f"{len(rows)} views  PSNR {mean_p:.3f}  SSIM {mean_s:.4f}")
    return EXIT_OK


def cmd_analyze_volumes(run: RunConfig, checkpoint, threshold) -> int:
    _require_file(checkpoint)
    cloud = import_checkpoint(checkpoint)
    hist = volume_histogram(cloud, threshold=threshold)
    run.out.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(run.out / "volume_histogram.csv", hist)
    print(f"N = {hist.total}")
    print(f"fraction with volume <= {threshold:g}: {hist.fraction_below:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file of key: value settings")
    common.add_argument("--scene", type=Path)
    common.add_argument("--init", choices=("colmap", "ply"))
    common.add_argument("--ply-path", type=Path, help="point cloud used with --init ply")
    common.add_argument("--downsample", type=int, choices=(1, 2, 4))
    common.add_argument("--iters", type=int)
    common.add_argument("--vth", type=_parse_float, help="volume threshold, 'inf' disables")
    common.add_argument("--max-gaussians", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    common.add_argument("--deterministic", action="store_true", default=None)
    common.add_argument("--test-every", type=int, help="hold out every n-th image")
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="volsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="optimize a scene")
    p = sub.add_parser("render", parents=[common], help="render every scene camera to PNG")
    p.add_argument("checkpoint", type=Path)
    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM on held-out views")
    p.add_argument("checkpoint", type=Path)
    p = sub.add_parser("analyze-volumes", parents=[common], help="ellipsoid volume histogram")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--threshold", type=_parse_float, default=0.03)
    return parser


_NOT_CONFIG = {"command", "config", "checkpoint", "threshold", "verbose"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = load_config_file(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items() if v is not None and k not in _NOT_CONFIG}
        values.update(flags)
        run = build_run_config(values)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "render":
            return cmd_render(run, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(run, args.checkpoint)
        return cmd_analyze_volumes(run, args.checkpoint, args.threshold)
    except (ParseError, UnsupportedModelError, OSError) as exc:
        print(f"volsplat: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"volsplat: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

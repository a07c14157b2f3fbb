"""PLY point clouds and Gaussian checkpoints.

Checkpoints use the attribute names of the reference splatting layout
(x y z nx ny nz f_dc_* f_rest_* opacity scale_* rot_*), so existing viewers
and loaders pick them up.
"""
from __future__ import annotations

from pathlib import Path
from struct import error as struct_error

import numpy as np
from plyfile import PlyData, PlyElement, PlyHeaderParseError, PlyElementParseError

from .colmap import SparsePoints
from .errors import ParseError
from .gaussians import GaussianCloud


def _read(path) -> PlyData:
    try:
        return PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise ParseError(path, f"header line {getattr(exc, 'line', '?')}", str(exc)) from None
    except PlyElementParseError as exc:
        raise ParseError(path, f"element {exc.element.name if exc.element else '?'} "
                               f"row {exc.row}", str(exc)) from None
    except (ValueError, struct_error) as exc:  # truncated bodies surface as these
        raise ParseError(path, "body", str(exc)) from None


def _vertex(ply: PlyData, path):
    if "vertex" not in ply:
        raise ParseError(path, "header", "no vertex element")
    return ply["vertex"]


def load_ply_points(path) -> SparsePoints:
    """Read x/y/z and optional red/green/blue; missing colors become mid-gray."""
    ply = _read(path)
    v = _vertex(ply, path)
    names = [p.name for p in v.properties]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(path, "header", f"vertex element lacks property {axis!r}")
    xyz = np.stack([np.asarray(v[a], dtype=np.float64) for a in "xyz"], axis=1)
    if all(c in names for c in ("red", "green", "blue")):
        raw = np.stack([np.asarray(v[c]) for c in ("red", "green", "blue")], axis=1)
        if np.issubdtype(raw.dtype, np.integer):
            colors = raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
        else:
            colors = raw.astype(np.float64)
    else:
        colors = np.full_like(xyz, 0.5)
    if not np.all(np.isfinite(xyz)):
        raise ParseError(path, "body", "non-finite vertex position")
    return SparsePoints(xyz, colors)


def write_ply_points(path, points: SparsePoints, binary=True, with_color=True):
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if with_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(len(points), dtype=fields)
    for i, a in enumerate("xyz"):
        data[a] = points.positions[:, i]
    if with_color:
        rgb = np.round(np.clip(points.colors, 0, 1) * 255).astype(np.uint8)
        for i, c in enumerate(("red", "green", "blue")):
            data[c] = rgb[:, i]
    el = PlyElement.describe(data, "vertex")
    PlyData([el], text=not binary, byte_order="<").write(str(path))


def checkpoint_attributes(sh_degree: int):
    n_rest = 3 * ((sh_degree + 1) ** 2 - 1)
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def export_checkpoint(cloud: GaussianCloud, path, dtype="f8"):
    """Write ``cloud`` as binary little-endian PLY.

    ``dtype="f8"`` (default) round-trips bit-exactly; ``"f4"`` matches viewers
    that only accept single precision.
    """
    path = Path(path)
    n = len(cloud)
    # f_rest is channel-major: all coefficients of R, then G, then B
    f_rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    columns = np.concatenate([
        cloud.positions, np.zeros((n, 3)), cloud.sh[:, 0, :], f_rest,
        cloud.opacity_logits[:, None], cloud.log_scales, cloud.rotations], axis=1)
    names = checkpoint_attributes(cloud.sh_degree)
    data = np.empty(n, dtype=[(a, dtype) for a in names])
    for i, a in enumerate(names):
        data[a] = columns[:, i]
    el = PlyElement.describe(data, "vertex")
    try:
        PlyData([el], byte_order="<").write(str(path))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def import_checkpoint(path) -> GaussianCloud:
    ply = _read(path)
    v = _vertex(ply, path)
    names = {p.name for p in v.properties}
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [a for a in required if a not in names]
    if missing:
        raise ParseError(path, "header", f"missing checkpoint properties {missing}")
    col = lambda a: np.asarray(v[a], dtype=np.float64)
    rest = sorted((a for a in names if a.startswith("f_rest_")), key=lambda a: int(a[7:]))
    n_coeffs = len(rest) // 3 + 1
    if len(rest) % 3 or n_coeffs not in (1, 4, 9, 16):
        raise ParseError(path, "header", f"unexpected f_rest count {len(rest)}")
    n = len(col("x"))
    sh = np.zeros((n, n_coeffs, 3))
    sh[:, 0, :] = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)
    if rest:
        sh[:, 1:, :] = np.stack([col(a) for a in rest], axis=1).reshape(n, 3, n_coeffs - 1) \
            .transpose(0, 2, 1)
    return GaussianCloud(
        positions=np.stack([col(a) for a in "xyz"], axis=1),
        rotations=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        opacity_logits=col("opacity"),
        sh=sh,
        active_sh_degree=3,
    )

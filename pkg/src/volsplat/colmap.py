"""Reader and writer for COLMAP sparse models (text and binary layouts)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .errors import ParseError, UnsupportedModelError

# model id -> (name, number of params); only the pinhole family is supported
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3), 1: ("PINHOLE", 4), 2: ("SIMPLE_RADIAL", 4), 3: ("RADIAL", 5),
    4: ("OPENCV", 8), 5: ("OPENCV_FISHEYE", 8), 6: ("FULL_OPENCV", 12), 7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4), 9: ("RADIAL_FISHEYE", 5), 10: ("THIN_PRISM_FISHEYE", 12),
}
MODEL_IDS = {name: mid for mid, (name, _) in CAMERA_MODELS.items()}
SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


@dataclass
class ColmapCamera:
    id: int
    model: str
    width: int
    height: int
    params: tuple


@dataclass
class ColmapImage:
    id: int
    qvec: tuple
    tvec: tuple
    camera_id: int
    name: str


@dataclass
class SparsePoint:
    position: np.ndarray
    color: np.ndarray


class SparsePoints:
    """Array-backed sequence of :class:`SparsePoint`."""

    def __init__(self, positions, colors=None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if colors is None:
            colors = np.full_like(self.positions, 0.5)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.positions):
            raise ValueError("positions and colors differ in length")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return SparsePoint(self.positions[i], self.colors[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_list(cls, points):
        points = list(points)
        return cls(np.array([p.position for p in points]).reshape(-1, 3),
                   np.array([p.color for p in points]).reshape(-1, 3))


def camera_to_intrinsics(cam: ColmapCamera) -> CameraIntrinsics:
    if cam.model == "SIMPLE_PINHOLE":
        f, cx, cy = cam.params
        return CameraIntrinsics(f, f, cx, cy, cam.width, cam.height, cam.model)
    if cam.model == "PINHOLE":
        fx, fy, cx, cy = cam.params
        return CameraIntrinsics(fx, fy, cx, cy, cam.width, cam.height, cam.model)
    raise UnsupportedModelError(cam.model, SUPPORTED_MODELS)


# ---- text ----

def _text_lines(path):
    """Yield (line number, stripped line) skipping comments."""
    with open(path, "r") as fh:
        for num, line in enumerate(fh, start=1):
            line = line.strip()
            if line.startswith("#"):
                continue
            yield num, line


def read_cameras_text(path):
    cameras = {}
    for num, line in _text_lines(path):
        if not line:
            continue
        parts = line.split()
        try:
            cam_id, model = int(parts[0]), parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = tuple(float(p) for p in parts[4:])
        except (IndexError, ValueError) as exc:
            raise ParseError(path, f"line {num}", f"bad camera record: {exc}") from None
        if model in MODEL_IDS and len(params) != CAMERA_MODELS[MODEL_IDS[model]][1]:
            raise ParseError(path, f"line {num}", f"{model} expects "
                             f"{CAMERA_MODELS[MODEL_IDS[model]][1]} params, got {len(params)}")
        cameras[cam_id] = ColmapCamera(cam_id, model, width, height, params)
    return cameras


def read_images_text(path):
    images = {}
    lines = list(_text_lines(path))
    i = 0
    while i < len(lines):
        num, line = lines[i]
        if not line:
            i += 1
            continue
        parts = line.split()
        try:
            image_id = int(parts[0])
            qvec = tuple(float(x) for x in parts[1:5])
            tvec = tuple(float(x) for x in parts[5:8])
            camera_id = int(parts[8])
            name = " ".join(parts[9:])
            if len(qvec) != 4 or len(tvec) != 3 or not name:
                raise ValueError("truncated record")
        except (IndexError, ValueError) as exc:
            raise ParseError(path, f"line {num}", f"bad image record: {exc}") from None
        images[image_id] = ColmapImage(image_id, qvec, tvec, camera_id, name)
        i += 2  # the following line lists 2D observations (possibly empty)
    return images


def read_points3d_text(path):
    xyz, rgb = [], []
    for num, line in _text_lines(path):
        if not line:
            continue
        parts = line.split()
        try:
            xyz.append([float(x) for x in parts[1:4]])
            rgb.append([int(x) for x in parts[4:7]])
            float(parts[7])
            if len(xyz[-1]) != 3 or len(rgb[-1]) != 3:
                raise ValueError("truncated record")
        except (IndexError, ValueError) as exc:
            raise ParseError(path, f"line {num}", f"bad point record: {exc}") from None
    return SparsePoints(np.array(xyz, dtype=np.float64).reshape(-1, 3),
                        np.array(rgb, dtype=np.float64).reshape(-1, 3) / 255.0)


# ---- binary ----

class _Reader:
    def __init__(self, path):
        self.path = path
        self.fh = open(path, "rb")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.fh.close()

    def read(self, fmt):
        offset = self.fh.tell()
        size = struct.calcsize("<" + fmt)
        data = self.fh.read(size)
        if len(data) != size:
            raise ParseError(self.path, f"byte {offset}", "unexpected end of file")
        return struct.unpack("<" + fmt, data)

    def read_cstring(self):
        offset = self.fh.tell()
        out = bytearray()
        while True:
            ch = self.fh.read(1)
            if not ch:
                raise ParseError(self.path, f"byte {offset}", "unterminated string")
            if ch == b"\x00":
                return out.decode("utf-8")
            out += ch

    def skip(self, n):
        offset = self.fh.tell()
        data = self.fh.read(n)
        if len(data) != n:
            raise ParseError(self.path, f"byte {offset}", "unexpected end of file")


def read_cameras_binary(path):
    cameras = {}
    with _Reader(path) as r:
        (count,) = r.read("Q")
        for _ in range(count):
            offset = r.fh.tell()
            cam_id, model_id, width, height = r.read("iiQQ")
            if model_id not in CAMERA_MODELS:
                raise ParseError(path, f"byte {offset}", f"unknown camera model id {model_id}")
            model, n_params = CAMERA_MODELS[model_id]
            params = r.read("d" * n_params)
            cameras[cam_id] = ColmapCamera(cam_id, model, width, height, tuple(params))
    return cameras


def read_images_binary(path):
    images = {}
    with _Reader(path) as r:
        (count,) = r.read("Q")
        for _ in range(count):
            props = r.read("idddddddi")
            name = r.read_cstring()
            (n_obs,) = r.read("Q")
            r.skip(24 * n_obs)
            images[props[0]] = ColmapImage(props[0], tuple(props[1:5]), tuple(props[5:8]),
                                           props[8], name)
    return images


def read_points3d_binary(path):
    with _Reader(path) as r:
        (count,) = r.read("Q")
        xyz = np.empty((count, 3))
        rgb = np.empty((count, 3))
        for i in range(count):
            props = r.read("QdddBBBd")
            xyz[i] = props[1:4]
            rgb[i] = props[4:7]
            (track_len,) = r.read("Q")
            r.skip(8 * track_len)
    return SparsePoints(xyz, rgb / 255.0)


# ---- writers (fixtures, synthetic scenes) ----

def write_colmap_text(directory, cameras, images, points: SparsePoints):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in cameras:
            fh.write(f"{c.id} {c.model} {c.width} {c.height} "
                     + " ".join(repr(float(p)) for p in c.params) + "\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        for im in images:
            vals = " ".join(repr(float(x)) for x in (*im.qvec, *im.tvec))
            fh.write(f"{im.id} {vals} {im.camera_id} {im.name}\n\n")
    rgb = np.round(points.colors * 255).astype(int)
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        for i, (p, c) in enumerate(zip(points.positions, rgb), start=1):
            fh.write(f"{i} " + " ".join(repr(float(x)) for x in p) + f" {c[0]} {c[1]} {c[2]} 0.0\n")


def write_colmap_binary(directory, cameras, images, points: SparsePoints):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(cameras)))
        for c in cameras:
            fh.write(struct.pack("<iiQQ", c.id, MODEL_IDS[c.model], c.width, c.height))
            fh.write(struct.pack("<" + "d" * len(c.params), *c.params))
    with open(d / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(images)))
        for im in images:
            fh.write(struct.pack("<idddddddi", im.id, *im.qvec, *im.tvec, im.camera_id))
            fh.write(im.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", 0))
    rgb = np.round(points.colors * 255).astype(int)
    with open(d / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for i, (p, c) in enumerate(zip(points.positions, rgb), start=1):
            fh.write(struct.pack("<QdddBBBd", i, *p, *c, 0.0))
            fh.write(struct.pack("<Q", 0))


def find_sparse_dir(directory) -> Path:
    d = Path(directory)
    for cand in (d, d / "sparse" / "0", d / "sparse"):
        if any((cand / f"cameras.{ext}").exists() for ext in ("bin", "txt")):
            return cand
    raise FileNotFoundError(f"no COLMAP model (cameras.bin/txt) under {d}")


def load_colmap_sparse(directory):
    """Parse a COLMAP model.

    Returns ``(points, records)`` where ``records`` is a name-sorted list of
    ``(CameraIntrinsics, CameraPose, image_name)``.  Binary files win when both
    encodings are present.
    """
    d = find_sparse_dir(directory)

    def pick(stem):
        for ext, reader in (("bin", "binary"), ("txt", "text")):
            p = d / f"{stem}.{ext}"
            if p.exists():
                return p, reader
        raise FileNotFoundError(f"missing {stem}.bin/.txt in {d}")

    cam_path, kind = pick("cameras")
    cameras = (read_cameras_binary if kind == "binary" else read_cameras_text)(cam_path)
    img_path, kind = pick("images")
    images = (read_images_binary if kind == "binary" else read_images_text)(img_path)
    pts_path, kind = pick("points3D")
    points = (read_points3d_binary if kind == "binary" else read_points3d_text)(pts_path)

    intrinsics = {cid: camera_to_intrinsics(c) for cid, c in cameras.items()}
    records = []
    for im in sorted(images.values(), key=lambda im: im.name):
        if im.camera_id not in intrinsics:
            raise ParseError(img_path, f"image {im.id}", f"unknown camera id {im.camera_id}")
        q = np.asarray(im.qvec, dtype=np.float64)
        q = q / np.linalg.norm(q)
        records.append((intrinsics[im.camera_id], CameraPose(tuple(q), tuple(im.tvec)), im.name))
    return points, records

import itertools

import numpy as np
import pytest
from PIL import Image
from plyfile import PlyData

from volsplat.camera import CameraIntrinsics, CameraPose
from volsplat.colmap import (ColmapCamera, ColmapImage, SparsePoints, load_colmap_sparse,
                             write_colmap_binary, write_colmap_text)
from volsplat.errors import ParseError, UnsupportedModelError
from volsplat.gaussians import logit
from volsplat.ply import (checkpoint_attributes, export_checkpoint, import_checkpoint,
                          load_ply_points, write_ply_points)
from volsplat.scene import box_downsample, load_images, load_scene, seed_cloud, stride_indices
from volsplat.synthetic import orbit_views, random_cloud, write_scene

CAMERAS = [ColmapCamera(1, "PINHOLE", 40, 30, (50.0, 52.0, 20.0, 15.0))]
IMAGES = [ColmapImage(2, (0.9, 0.1, -0.2, 0.3), (0.5, -1.0, 2.0), 1, "b.png"),
          ColmapImage(1, (1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1, "a.png")]
POINTS = SparsePoints([[0.0, 0.0, 1.0], [1.5, -2.0, 3.25], [0.1, 0.2, 0.3]],
                      np.array([[255, 0, 0], [0, 128, 255], [10, 20, 30]]) / 255.0)

MINIMAL_TEXT = {
    "cameras.txt": "# comment\n1 SIMPLE_PINHOLE 40 30 50 20 15\n",
    "images.txt": "1 1 0 0 0 0 0 0 1 a.png\n10 20 -1\n2 1 0 0 0 1 2 3 1 b.png\n\n",
    "points3D.txt": "1 0 0 1 255 0 0 0.5 1 0\n2 1 1 1 0 255 0 0.5\n3 2 2 2 0 0 255 0.1\n",
}


def write_files(d, files):
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text)
    return d


def test_minimal_text_fixture(tmp_path):
    points, records = load_colmap_sparse(write_files(tmp_path, MINIMAL_TEXT))
    assert len(points) == 3 and len(records) == 2
    intr, pose, name = records[0]
    assert name == "a.png"
    assert (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height) == (50, 50, 20, 15, 40, 30)
    np.testing.assert_array_equal(records[1][1].translation, [1, 2, 3])
    np.testing.assert_array_equal(points.colors[0], [1, 0, 0])


def test_text_and_binary_agree(tmp_path):
    write_colmap_text(tmp_path / "t", CAMERAS, IMAGES, POINTS)
    write_colmap_binary(tmp_path / "b", CAMERAS, IMAGES, POINTS)
    pt, rt = load_colmap_sparse(tmp_path / "t")
    pb, rb = load_colmap_sparse(tmp_path / "b")
    assert np.array_equal(pt.positions, pb.positions)
    assert np.array_equal(pt.colors, pb.colors)
    assert [r[2] for r in rt] == [r[2] for r in rb] == ["a.png", "b.png"]
    for (it, pt_, _), (ib, pb_, _) in zip(rt, rb):
        assert it == ib
        assert np.array_equal(pt_.qvec, pb_.qvec) and np.array_equal(pt_.tvec, pb_.tvec)


def test_sparse_subdirectory_layout(tmp_path):
    write_colmap_text(tmp_path / "sparse" / "0", CAMERAS, IMAGES, POINTS)
    _, records = load_colmap_sparse(tmp_path)
    assert len(records) == 2


def test_unsupported_camera_model(tmp_path):
    files = dict(MINIMAL_TEXT, **{"cameras.txt": "1 OPENCV 40 30 50 50 20 15 0 0 0 0\n"})
    with pytest.raises(UnsupportedModelError, match="OPENCV"):
        load_colmap_sparse(write_files(tmp_path, files))


def test_malformed_text_names_line(tmp_path):
    files = dict(MINIMAL_TEXT, **{"points3D.txt": "1 0 0 1 255 0 0 0.5\n2 1 x 1 0 255 0 0.5\n"})
    with pytest.raises(ParseError) as err:
        load_colmap_sparse(write_files(tmp_path, files))
    assert "points3D.txt" in str(err.value) and "line 2" in str(err.value)


def test_truncated_binary_names_offset(tmp_path):
    write_colmap_binary(tmp_path, CAMERAS, IMAGES, POINTS)
    data = (tmp_path / "images.bin").read_bytes()
    (tmp_path / "images.bin").write_bytes(data[:30])
    with pytest.raises(ParseError) as err:
        load_colmap_sparse(tmp_path)
    assert "images.bin" in str(err.value) and "byte" in str(err.value)


def test_missing_model(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_colmap_sparse(tmp_path)


ASCII_PLY = """ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
0 0 0 255 0 0
1 0 0 0 255 0
0 1 0 0 0 255
0 0 1 51 102 153
"""


def test_ascii_ply_with_colors(tmp_path):
    (tmp_path / "a.ply").write_text(ASCII_PLY)
    pts = load_ply_points(tmp_path / "a.ply")
    assert len(pts) == 4
    np.testing.assert_allclose(pts.colors[3], [0.2, 0.4, 0.6])
    np.testing.assert_array_equal(pts.positions[2], [0, 1, 0])


def test_binary_ply_matches_ascii(tmp_path):
    (tmp_path / "a.ply").write_text(ASCII_PLY)
    pts = load_ply_points(tmp_path / "a.ply")
    write_ply_points(tmp_path / "b.ply", pts, binary=True)
    again = load_ply_points(tmp_path / "b.ply")
    assert np.array_equal(pts.positions, again.positions)
    assert np.array_equal(pts.colors, again.colors)


def test_ply_without_colors_is_gray(tmp_path):
    write_ply_points(tmp_path / "p.ply", SparsePoints(np.eye(3)), with_color=False)
    pts = load_ply_points(tmp_path / "p.ply")
    assert np.all(pts.colors == 0.5)


def test_malformed_ply_header(tmp_path):
    (tmp_path / "bad.ply").write_text("ply\nformat nonsense 1.0\nend_header\n")
    with pytest.raises(ParseError):
        load_ply_points(tmp_path / "bad.ply")


def test_seed_cloud_tetrahedron():
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) + [[0, 0, 0], [0.1, 0, 0], [0, 0, 0], [0, 0, 0.3]]
    cloud = seed_cloud(SparsePoints(verts), sh_degree=1)
    for i in range(4):
        d = sorted(np.linalg.norm(verts[i] - verts[j]) for j in range(4) if j != i)
        np.testing.assert_allclose(np.exp(cloud.log_scales[i]), np.mean(d[:3]), rtol=1e-12)
    np.testing.assert_allclose(cloud.opacity_logits, logit(0.1))
    assert np.all(cloud.rotations == [1, 0, 0, 0])
    assert cloud.sh.shape == (4, 4, 3) and np.all(cloud.sh[:, 1:] == 0)


def test_seed_cloud_nearest_neighbours_bruteforce():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    cloud = seed_cloud(SparsePoints(pts))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    expected = np.sort(dist, axis=1)[:, 1:4].mean(axis=1)
    np.testing.assert_allclose(np.exp(cloud.log_scales[:, 0]), expected, rtol=1e-12)


def test_seed_cloud_fallback_and_gray():
    cloud = seed_cloud(SparsePoints([[1.0, 2.0, 3.0]]), extent=10.0)
    np.testing.assert_allclose(np.exp(cloud.log_scales), 0.1)
    assert np.all(cloud.sh[:, 0] == 0)
    with pytest.raises(ValueError):
        seed_cloud(SparsePoints(np.zeros((0, 3))))


def test_box_downsample_constant():
    out = box_downsample(np.full((8, 8, 3), 0.37), 2)
    assert out.shape == (4, 4, 3)
    np.testing.assert_allclose(out, 0.37, rtol=1e-15)


def test_intrinsics_downsampling():
    k = CameraIntrinsics(1000.0, 900.0, 400.0, 300.0, 800, 600).downsampled(4)
    assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (250, 225, 100, 75, 200, 150)


def test_stride_selection():
    idx = stride_indices(300)
    assert len(idx) == 200 and len(set(idx)) == 200
    expected = [int(np.floor(i * 1.5)) for i in range(200)]
    assert list(idx) == expected
    assert list(stride_indices(7)) == list(range(7))


def _image_records(tmp_path, n, size=(8, 8)):
    (tmp_path / "images").mkdir()
    intr = CameraIntrinsics(10.0, 10.0, size[0] / 2, size[1] / 2, *size)
    records = []
    for i in range(n):
        name = f"{i:03d}.png"
        Image.fromarray(np.full((size[1], size[0], 3), i % 256, np.uint8)).save(tmp_path / "images" / name)
        records.append((intr, CameraPose((1, 0, 0, 0), (0, 0, i)), name))
    return records


def test_load_images_cap_and_downsample(tmp_path):
    records = _image_records(tmp_path, 300)
    views = load_images(records, tmp_path / "images", factor=2)
    assert len(views) == 200
    assert views[1].name == "001.png" and views[2].name == "003.png"
    assert views[0].image.shape == (4, 4, 3)
    assert views[0].intrinsics.fx == 5.0
    np.testing.assert_allclose(views[2].image, 3 / 255)


def test_load_images_undecodable(tmp_path):
    records = _image_records(tmp_path, 2)
    (tmp_path / "images" / "001.png").write_bytes(b"not an image")
    with pytest.raises(OSError, match="001.png"):
        load_images(records, tmp_path / "images")


def test_load_images_rejects_factor(tmp_path):
    with pytest.raises(ValueError):
        load_images([], tmp_path, factor=3)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 17, sh_degree=3, sh_noise=0.3)
    export_checkpoint(cloud, tmp_path / "c.ply")
    back = import_checkpoint(tmp_path / "c.ply")
    for name, arr in cloud.params().items():
        assert np.array_equal(arr, getattr(back, name)), name
    names = [p.name for p in PlyData.read(str(tmp_path / "c.ply"))["vertex"].properties]
    assert names == checkpoint_attributes(3)
    assert sum(n.startswith("f_rest_") for n in names) == 45


def test_checkpoint_single_gaussian_layout(tmp_path):
    cloud = random_cloud(np.random.default_rng(1), 1, sh_degree=0)
    export_checkpoint(cloud, tmp_path / "one.ply")
    ply = PlyData.read(str(tmp_path / "one.ply"))
    assert ply["vertex"].count == 1 and not ply.text
    names = [p.name for p in ply["vertex"].properties]
    for expected in itertools.chain(["x", "y", "z", "opacity"],
                                    (f"f_dc_{i}" for i in range(3)),
                                    (f"scale_{i}" for i in range(3)),
                                    (f"rot_{i}" for i in range(4))):
        assert expected in names


def test_checkpoint_unwritable(tmp_path):
    cloud = random_cloud(np.random.default_rng(1), 2)
    with pytest.raises(OSError):
        export_checkpoint(cloud, tmp_path / "missing" / "c.ply")


def test_load_scene_split(tmp_path):
    gt = random_cloud(np.random.default_rng(2), 10)
    write_scene(tmp_path, gt, orbit_views(10, width=32, height=32))
    scene = load_scene(tmp_path, test_every=8)
    assert [v.name for v in scene.test_views] == ["view_000.png", "view_008.png"]
    assert len(scene.train_views) == 8
    assert len(scene.points) == 200
    ply_scene = load_scene(tmp_path, init="ply", test_every=0, downsample=2)
    assert np.allclose(ply_scene.points.positions, scene.points.positions, atol=1e-6)
    assert ply_scene.train_views[0].image.shape == (16, 16, 3)
    normalized = load_scene(tmp_path, normalize=True)
    centers = np.array([v.pose.center for v in normalized.train_views + normalized.test_views])
    assert np.linalg.norm(centers.max(0) - centers.min(0)) == pytest.approx(1.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volsplat.camera import CameraPose, TrainingView
from volsplat.gaussians import GaussianPrimitive, covariance_from_rs, logit, rgb_to_sh_dc
from volsplat.rasterizer import (RasterConfig, bin_tiles, project_cloud, project_gaussian,
                                 render, render_bruteforce)
from volsplat.synthetic import orbit_views, random_cloud

from helpers import IDENTITY, cloud_from, front_view


def primitive(position, log_scales, rotation=IDENTITY, opacity=0.8, color=(0.5, 0.5, 0.5)):
    sh = rgb_to_sh_dc(np.asarray(color, float))[None]
    return GaussianPrimitive(np.asarray(position, float), np.asarray(rotation, float),
                             np.asarray(log_scales, float), float(logit(opacity)), sh)


def test_on_axis_projection():
    view = front_view(64, 48, f=80.0)
    s, z = 0.2, 5.0
    g = project_gaussian(primitive([0, 0, z], np.log([s] * 3)), view.intrinsics, view.pose)
    np.testing.assert_allclose(g.mean2d, [32.0, 24.0])
    np.testing.assert_allclose(g.cov2d, np.diag([(80 * s / z) ** 2 + 0.3] * 2), rtol=1e-12)
    assert g.depth == z


def test_behind_camera_culled():
    view = front_view()
    assert project_gaussian(primitive([0, 0, -1.0], np.log([0.1] * 3)),
                            view.intrinsics, view.pose) is None
    assert project_gaussian(primitive([0, 0, 0.005], np.log([0.1] * 3)),
                            view.intrinsics, view.pose) is None


def test_guard_band_culling():
    view = front_view(64, 64, f=64.0)
    # u = 32 + 64 x / z; the band ends at 32 + 1.3 * 32
    inside = project_gaussian(primitive([0.64, 0, 1.0], np.log([0.01] * 3)), view.intrinsics, view.pose)
    outside = project_gaussian(primitive([0.66, 0, 1.0], np.log([0.01] * 3)), view.intrinsics, view.pose)
    assert inside is not None and outside is None


def test_projected_covariance_matches_numerical_jacobian():
    rng = np.random.default_rng(2)
    for _ in range(10):
        eye = rng.normal(size=3) * 2 + [0, 0, -5]
        pose = CameraPose.look_at(eye, rng.normal(size=3) * 0.2)
        intr = front_view(64, 64, f=70.0).intrinsics
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        mu = rng.normal(size=3) * 0.3
        ls = np.log(rng.uniform(0.05, 0.3, size=3))
        g = project_gaussian(primitive(mu, ls, q), intr, pose)
        R, t = pose.rotation, pose.translation

        def pi(x):
            c = R @ x + t
            return np.array([intr.fx * c[0] / c[2] + intr.cx, intr.fy * c[1] / c[2] + intr.cy])

        h = 1e-6
        Jw = np.stack([(pi(mu + h * e) - pi(mu - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        expected = Jw @ covariance_from_rs(q, ls) @ Jw.T + 0.3 * np.eye(2)
        np.testing.assert_allclose(g.cov2d, expected, rtol=1e-3)
        np.testing.assert_allclose(g.mean2d, pi(mu), rtol=1e-12)


def test_single_saturated_gaussian():
    view = front_view(32, 32, cx=16.5, cy=16.5)
    cloud = cloud_from([[0, 0, 2.0]], 5.0, 0.999999, [[0.2, 0.6, 1.0]])
    image = render(cloud, view).image
    np.testing.assert_allclose(image[16, 16], 0.99 * np.array([0.2, 0.6, 1.0]), atol=1e-12)


def test_two_layer_compositing():
    view = front_view(32, 32, cx=16.5, cy=16.5)
    bg = (0.1, 0.2, 0.3)
    # same screen footprint: scale proportional to depth
    cloud = cloud_from([[0, 0, 1.0], [0, 0, 2.0]], [[0.05] * 3, [0.1] * 3], 0.5,
                       [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    image = render(cloud, view, RasterConfig(background=bg)).image
    expected = 0.5 * np.array([1.0, 0, 0]) + 0.25 * np.array([0, 1.0, 0]) + 0.25 * np.array(bg)
    np.testing.assert_allclose(image[16, 16], expected, atol=1e-12)


def test_zero_opacity_gives_background():
    bg = (0.2, 0.4, 0.6)
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 20)
    cloud.opacity_logits[:] = -60.0
    view = orbit_views(1)[0]
    res = render(cloud, view, RasterConfig(background=bg))
    assert np.array_equal(res.image, np.broadcast_to(bg, res.image.shape))
    assert np.all(res.transmittance == 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_tiled_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 40, sh_degree=2, sh_noise=0.2, scale_range=(0.02, 0.4))
    view = orbit_views(4, width=64, height=48, jitter_rng=rng)[seed % 4]
    res = render(cloud, view)
    image, T = render_bruteforce(cloud, view)
    assert np.array_equal(res.image, image)
    assert np.array_equal(res.transmittance, T)


def test_weights_sum_to_one_minus_transmittance():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 30, opacity_range=(0.5, 0.99))
    cloud.sh[:, 0, :] = rgb_to_sh_dc(np.ones(3))
    res = render(cloud, orbit_views(1)[0])
    weight_sum = res.image[..., 0]
    assert np.all(weight_sum >= 0) and np.all(weight_sum <= 1 + 1e-12)
    assert np.all((res.transmittance >= 0) & (res.transmittance <= 1))
    np.testing.assert_allclose(weight_sum, 1 - res.transmittance, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_order_invariance(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 15)
    view = orbit_views(1)[0]
    perm = rng.permutation(len(cloud))
    assert np.array_equal(render(cloud, view).image, render(cloud.select(perm), view).image)


def test_tile_binning_covers_three_sigma():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 25, opacity_range=(0.01, 0.05))
    view = orbit_views(1, width=80, height=64)[0]
    proj = project_cloud(cloud, view.intrinsics, view.pose)
    ranges, instances = bin_tiles(proj, 80, 64)
    tiles_x = 5
    for i in np.flatnonzero(proj.visible):
        cov = proj.cov2d[i]
        u, v = proj.means2d[i]
        rx, ry = 3 * np.sqrt(cov[0, 0]), 3 * np.sqrt(cov[1, 1])
        for ty in range(4):
            for tx in range(tiles_x):
                overlaps = (u + rx >= tx * 16 and u - rx <= tx * 16 + 16
                            and v + ry >= ty * 16 and v - ry <= ty * 16 + 16)
                if overlaps:
                    lo, hi = ranges[ty * tiles_x + tx]
                    assert i in instances[lo:hi]


def test_tiles_sorted_by_depth():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 30)
    view = orbit_views(1)[0]
    proj = project_cloud(cloud, view.intrinsics, view.pose)
    ranges, instances = bin_tiles(proj, 64, 64)
    for lo, hi in ranges:
        d = proj.depths[instances[lo:hi]]
        assert np.all(np.diff(d) >= 0)

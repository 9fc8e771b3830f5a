import numpy as np
import pytest

from anchorsplat import _blend, rasterizer
from anchorsplat.gaussgen import NeuralGaussians
from anchorsplat.rasterizer import (
    RasterConfig,
    Splats2D,
    build_covariance,
    build_covariance_backward,
    build_tile_layout,
    project,
    project_backward,
    rasterize,
    rasterize_backward,
)
from anchorsplat.scene_io import Camera

import oracles


def make_camera(width=64, height=64, fx=100.0, w2c=None):
    return Camera(width, height, fx, fx, width / 2, height / 2, np.eye(4) if w2c is None else w2c)


# --- covariance ---------------------------------------------------------------


def test_covariance_identity():
    cov = build_covariance(np.array([[1.0, 0, 0, 0]]), np.array([[1.0, 1, 1]]))
    np.testing.assert_allclose(cov[0], np.eye(3), atol=1e-15)


def test_covariance_diag_squares_scales():
    cov = build_covariance(np.array([[1.0, 0, 0, 0]]), np.array([[2.0, 1, 1]]))
    np.testing.assert_allclose(cov[0], np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_covariance_matches_oracle(rng):
    for _ in range(50):
        q = rng.normal(0, 1, 4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 2.0, 3)
        cov = build_covariance(q[None], s[None])[0]
        np.testing.assert_allclose(cov, oracles.covariance_oracle(q, s), atol=1e-12)
        assert np.min(np.linalg.eigvalsh(cov)) >= -1e-12


def test_covariance_backward_fd(rng):
    q = rng.normal(0, 1, 4)
    q /= np.linalg.norm(q)
    s = rng.uniform(0.2, 1.0, 3)
    probe = rng.normal(0, 1, (3, 3))

    d_q, d_s = build_covariance_backward(q[None], s[None], probe[None])

    def fn(theta):
        cov = build_covariance(theta[:4][None], theta[4:][None])[0]
        return float((cov * probe).sum())

    numeric = oracles.central_difference(fn, np.concatenate([q, s]))
    analytic = np.concatenate([d_q[0], d_s[0]])
    assert oracles.rel_err(analytic, numeric) < 1e-6


# --- projection ---------------------------------------------------------------


def gaussians_single(mean, q=(1.0, 0, 0, 0), s=(0.1, 0.1, 0.1), opacity=0.5, color=(1.0, 0, 0)):
    return NeuralGaussians(
        means=np.array([mean], dtype=float),
        opacities=np.array([opacity]),
        colors=np.array([color], dtype=float),
        quaternions=np.array([q], dtype=float),
        scales=np.array([s], dtype=float),
        parent_anchor=np.array([0]),
        offset_index=np.array([0]),
    )


def test_project_on_axis():
    cam = make_camera()
    g = gaussians_single([0.0, 0.0, 2.0], s=(1.0, 1.0, 1.0))
    splats, cache = project(g, cam, RasterConfig())
    assert len(splats) == 1
    np.testing.assert_allclose(splats.mean2d[0], [32.0, 32.0], atol=1e-12)
    np.testing.assert_allclose(
        splats.cov2d[0], np.diag([2500.3, 2500.3]), atol=1e-9
    )
    assert splats.depth[0] == pytest.approx(2.0)


def test_project_culls_behind():
    cam = make_camera()
    g = gaussians_single([0.0, 0.0, -1.0])
    splats, cache = project(g, cam, RasterConfig())
    assert len(splats) == 0


def test_project_cov_matches_numeric_jacobian(rng):
    cam = make_camera(fx=90.0)
    for _ in range(20):
        mean = rng.uniform(-0.5, 0.5, 3) + [0, 0, 2.5]
        q = rng.normal(0, 1, 4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.05, 0.3, 3)
        g = gaussians_single(mean, q=q, s=s)
        splats, _ = project(g, cam, RasterConfig())
        cov3d = build_covariance(q[None], s[None])[0]

        def proj_map(p):
            t = cam.rotation @ p + cam.translation
            return np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])

        J = np.zeros((2, 3))
        h = 1e-6
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            J[:, i] = (proj_map(mean + dp) - proj_map(mean - dp)) / (2 * h)
        expect = J @ cov3d @ J.T + 0.3 * np.eye(2)
        assert oracles.rel_err(splats.cov2d[0].ravel(), expect.ravel()) < 1e-6


def test_project_backward_fd(rng):
    cam = make_camera(fx=75.0)
    mean = np.array([0.3, -0.2, 2.0])
    q = rng.normal(0, 1, 4)
    q /= np.linalg.norm(q)
    s = rng.uniform(0.1, 0.4, 3)
    probe_m = rng.normal(0, 1, 2)
    probe_c = rng.normal(0, 1, (2, 2))

    g = gaussians_single(mean, q=q, s=s)
    splats, cache = project(g, cam, RasterConfig())
    d_means, d_cov3d = project_backward(splats, cache, probe_m[None], probe_c[None])

    cov3d0 = build_covariance(q[None], s[None])[0]

    def fn(theta):
        p = theta[:3]
        cov = theta[3:].reshape(3, 3)
        t = cam.rotation @ p + cam.translation
        u = cam.fx * t[0] / t[2] + cam.cx
        v = cam.fy * t[1] / t[2] + cam.cy
        J = np.array(
            [
                [cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2],
                [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2],
            ]
        )
        M = J @ cam.rotation
        c2 = M @ cov @ M.T + 0.3 * np.eye(2)
        return float(u * probe_m[0] + v * probe_m[1] + (c2 * probe_c).sum())

    theta0 = np.concatenate([mean, cov3d0.ravel()])
    numeric = oracles.central_difference(fn, theta0)
    analytic = np.concatenate([d_means[0], d_cov3d[0].ravel()])
    assert oracles.rel_err(analytic, numeric) < 1e-6


# --- tiling -------------------------------------------------------------------


def random_splats(rng, n, width=64, height=64, sigma_px=(1.5, 6.0), alpha=(0.2, 0.95)):
    mean2d = np.stack(
        [rng.uniform(-4, width + 4, n), rng.uniform(-4, height + 4, n)], axis=1
    )
    cov = np.zeros((n, 2, 2))
    for i in range(n):
        angle = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        sig = rng.uniform(*sigma_px, 2)
        cov[i] = rot @ np.diag(sig ** 2) @ rot.T + 0.3 * np.eye(2)
    return Splats2D(
        mean2d=mean2d,
        cov2d=cov,
        depth=rng.uniform(0.5, 10.0, n),
        opacity=rng.uniform(*alpha, n),
        color=rng.uniform(0, 1, (n, 3)),
        source_index=np.arange(n),
    )


def test_layout_depth_sorted_and_aabb(rng):
    splats = random_splats(rng, 60)
    layout = build_tile_layout(splats, 64, 64, 16)
    n_tiles = layout.tiles_x * layout.tiles_y
    for tile in range(n_tiles):
        ids = layout.splat_ids[layout.tile_offsets[tile] : layout.tile_offsets[tile + 1]]
        keys = [(splats.depth[s], splats.source_index[s]) for s in ids]
        assert keys == sorted(keys)
    # every splat appears in every tile its 3-sigma box overlaps
    for s in range(len(splats)):
        rx = 3 * np.sqrt(splats.cov2d[s, 0, 0])
        ry = 3 * np.sqrt(splats.cov2d[s, 1, 1])
        x0, x1 = splats.mean2d[s, 0] - rx, splats.mean2d[s, 0] + rx
        y0, y1 = splats.mean2d[s, 1] - ry, splats.mean2d[s, 1] + ry
        for tile in range(n_tiles):
            ty, tx = divmod(tile, layout.tiles_x)
            tx0, tx1 = tx * 16, tx * 16 + 15
            ty0, ty1 = ty * 16, ty * 16 + 15
            overlaps = x1 >= tx0 and x0 <= tx1 and y1 >= ty0 and y0 <= ty1
            ids = layout.splat_ids[layout.tile_offsets[tile] : layout.tile_offsets[tile + 1]]
            if overlaps:
                assert s in ids


# --- forward ------------------------------------------------------------------


def centered_splat(opacity=0.5, color=(1.0, 0, 0), px=20.0, py=20.0, depth=1.0, idx=0):
    return dict(
        mean2d=[px, py],
        cov2d=np.eye(2) * 4.0,
        depth=depth,
        opacity=opacity,
        color=color,
        source_index=idx,
    )


def splats_from(dicts):
    return Splats2D(
        mean2d=np.array([d["mean2d"] for d in dicts], dtype=float),
        cov2d=np.array([d["cov2d"] for d in dicts], dtype=float),
        depth=np.array([d["depth"] for d in dicts], dtype=float),
        opacity=np.array([d["opacity"] for d in dicts], dtype=float),
        color=np.array([d["color"] for d in dicts], dtype=float),
        source_index=np.array([d["source_index"] for d in dicts]),
    )


def test_single_splat_center_pixel():
    cam = make_camera(width=40, height=40)
    splats = splats_from([centered_splat()])
    out = rasterize(splats, cam, RasterConfig(background=np.zeros(3)))
    np.testing.assert_allclose(out.image[20, 20], [0.5, 0, 0], atol=1e-12)
    assert out.final_transmittance[20, 20] == pytest.approx(0.5)


def test_two_coincident_splats_blend():
    cam = make_camera(width=40, height=40)
    c1 = np.array([1.0, 0.0, 0.0])
    c2 = np.array([0.0, 1.0, 0.0])
    splats = splats_from(
        [
            centered_splat(color=c1, depth=1.0, idx=0),
            centered_splat(color=c2, depth=2.0, idx=1),
        ]
    )
    out = rasterize(splats, cam, RasterConfig(background=np.zeros(3)))
    np.testing.assert_allclose(out.image[20, 20], 0.5 * c1 + 0.25 * c2, atol=1e-12)


def test_background_composite():
    cam = make_camera(width=8, height=8)
    splats = splats_from([centered_splat(px=100, py=100)])  # off screen
    out = rasterize(splats, cam, RasterConfig(background=np.array([0.2, 0.4, 0.6])))
    np.testing.assert_allclose(out.image, np.broadcast_to([0.2, 0.4, 0.6], (8, 8, 3)))


def test_tiled_matches_reference_with_thresholds_disabled(rng):
    cam = make_camera()
    cfg = RasterConfig(sigma_skip=0.0, t_stop=0.0, background=np.array([0.1, 0.1, 0.1]))
    for _ in range(5):
        splats = random_splats(rng, 100)
        out = rasterize(splats, cam, cfg)
        ref, _ = oracles.render_reference(
             64, 64, splats.mean2d, splats.cov2d, splats.depth, splats.opacity,
            splats.color, splats.source_index, background=(0.1, 0.1, 0.1),
        )
        assert np.max(np.abs(out.image - ref)) <= 1e-6


def test_tiled_matches_reference_with_default_thresholds(rng):
    # a skipped splat can cost up to sigma_skip * (own color + later light)
    # per pixel, so the 2e-3 bound needs colors below ~0.25
    cam = make_camera()
    cfg = RasterConfig(background=np.zeros(3))
    splats = random_splats(rng, 100, sigma_px=(0.5, 1.2))
    splats.color[:] = splats.color * 0.25
    out = rasterize(splats, cam, cfg)
    ref, _ = oracles.render_reference(
        64, 64, splats.mean2d, splats.cov2d, splats.depth, splats.opacity,
        splats.color, splats.source_index,
    )
    assert np.max(np.abs(out.image - ref)) <= 2e-3


def test_matches_scalar_reference_small(rng):
    cam = make_camera(width=12, height=10)
    cfg = RasterConfig(sigma_skip=0.0, t_stop=0.0, background=np.zeros(3))
    splats = random_splats(rng, 8, width=12, height=10, sigma_px=(1.0, 3.0))
    out = rasterize(splats, cam, cfg)
    ref = oracles.render_reference_scalar(
        12, 10, splats.mean2d, splats.cov2d, splats.depth, splats.opacity,
        splats.color, splats.source_index,
    )
    np.testing.assert_allclose(out.image, ref, atol=1e-9)


def test_energy_identity(rng):
    cam = make_camera()
    cfg = RasterConfig(background=np.zeros(3))
    for _ in range(5):
        splats = random_splats(rng, 60)
        splats.color[:] = 1.0  # white colors measure the blending weights
        out = rasterize(splats, cam, cfg)
        total = out.image[..., 0] + out.final_transmittance
        assert np.max(np.abs(total - 1.0)) < 1e-9


def test_bit_identical_across_runs(rng):
    cam = make_camera()
    splats = random_splats(rng, 80)
    cfg = RasterConfig()
    a = rasterize(splats, cam, cfg).image
    b = rasterize(splats, cam, cfg).image
    assert np.array_equal(a, b)


def test_numba_and_numpy_paths_agree(rng):
    if _blend.blend_forward_numba is None:
        pytest.skip("numba unavailable")
    cam = make_camera()
    splats = random_splats(rng, 70)
    cfg = RasterConfig(background=np.array([0.05, 0.0, 0.2]))
    conic, ok = rasterizer._pack_conics(splats.cov2d)
    layout = build_tile_layout(splats, 64, 64, cfg.tile_size)
    args = (
        64, 64, cfg.tile_size, layout.tiles_x, layout.tile_offsets, layout.splat_ids,
        splats.mean2d, conic, splats.opacity, splats.color,
        np.asarray(cfg.background), cfg.sigma_skip, cfg.t_stop,
    )
    img_a = np.zeros((64, 64, 3)); t_a = np.ones((64, 64))
    img_b = np.zeros((64, 64, 3)); t_b = np.ones((64, 64))
    _blend.blend_forward_numba(*args, img_a, t_a)
    _blend.blend_forward_numpy(*args, img_b, t_b)
    np.testing.assert_allclose(img_a, img_b, atol=1e-12)
    np.testing.assert_allclose(t_a, t_b, atol=1e-12)


# --- backward -----------------------------------------------------------------


def test_backward_zero_upstream(rng):
    cam = make_camera(width=16, height=16)
    splats = random_splats(rng, 6, width=16, height=16)
    out = rasterize(splats, cam, RasterConfig())
    grads = rasterize_backward(out, np.zeros((16, 16, 3)))
    assert np.all(grads.d_mean2d == 0)
    assert np.all(grads.d_cov2d == 0)
    assert np.all(grads.d_opacity == 0)
    assert np.all(grads.d_color == 0)


def test_backward_single_splat_color_grad():
    cam = make_camera(width=40, height=40)
    splats = splats_from([centered_splat()])
    cfg = RasterConfig(sigma_skip=0.0, t_stop=0.0, background=np.zeros(3))
    out = rasterize(splats, cam, cfg)
    dl = np.zeros((40, 40, 3))
    dl[20, 20, 0] = 1.0
    grads = rasterize_backward(out, dl)
    # d pixel / d color_red = sigma at the center = 0.5
    assert grads.d_color[0, 0] == pytest.approx(0.5, abs=1e-12)

    def fn(color_red):
        s2 = splats_from([centered_splat(color=(color_red[0], 0, 0))])
        o2 = rasterize(s2, cam, cfg)
        return float(o2.image[20, 20, 0])

    numeric = oracles.central_difference(fn, np.array([1.0]))
    assert abs(numeric[0] - grads.d_color[0, 0]) < 1e-8


def test_backward_matches_fd_full(rng):
    cam = make_camera(width=24, height=24)
    n = 20
    splats = random_splats(rng, n, width=24, height=24, sigma_px=(1.5, 4.0))
    cfg = RasterConfig(sigma_skip=0.0, t_stop=0.0, background=np.array([0.3, 0.1, 0.0]))
    dl = rng.normal(0, 1, (24, 24, 3))

    out = rasterize(splats, cam, cfg)
    grads = rasterize_backward(out, dl)

    def render_flat(theta):
        pos = 0
        m2 = theta[pos : pos + 2 * n].reshape(n, 2); pos += 2 * n
        cv = theta[pos : pos + 3 * n].reshape(n, 3); pos += 3 * n
        op = theta[pos : pos + n]; pos += n
        co = theta[pos : pos + 3 * n].reshape(n, 3)
        cov = np.zeros((n, 2, 2))
        cov[:, 0, 0] = cv[:, 0]
        cov[:, 0, 1] = cov[:, 1, 0] = cv[:, 1]
        cov[:, 1, 1] = cv[:, 2]
        s2 = Splats2D(m2, cov, splats.depth, op, co, splats.source_index)
        o2 = rasterize(s2, cam, cfg)
        return float((o2.image * dl).sum())

    theta0 = np.concatenate(
        [
            splats.mean2d.ravel(),
            np.stack([splats.cov2d[:, 0, 0], splats.cov2d[:, 0, 1], splats.cov2d[:, 1, 1]], 1).ravel(),
            splats.opacity,
            splats.color.ravel(),
        ]
    )
    numeric = oracles.central_difference(render_flat, theta0, h=1e-5)
    d_cov_packed = np.stack(
        [
            grads.d_cov2d[:, 0, 0],
            grads.d_cov2d[:, 0, 1] + grads.d_cov2d[:, 1, 0],
            grads.d_cov2d[:, 1, 1],
        ],
        axis=1,
    )
    analytic = np.concatenate(
        [grads.d_mean2d.ravel(), d_cov_packed.ravel(), grads.d_opacity, grads.d_color.ravel()]
    )
    assert oracles.rel_err(analytic, numeric, floor=1e-4) < 1e-6


def test_backward_consistent_with_active_thresholds(rng):
    # gradients must describe the function actually computed, including
    # skip/termination; FD of that same function agrees away from threshold
    # boundaries
    cam = make_camera(width=16, height=16)
    n = 8
    splats = random_splats(rng, n, width=16, height=16, alpha=(0.5, 0.9))
    cfg = RasterConfig(background=np.zeros(3))
    dl = rng.normal(0, 1, (16, 16, 3))
    out = rasterize(splats, cam, cfg)
    grads = rasterize_backward(out, dl)

    def fn(colors):
        s2 = splats_from(
            [
                dict(
                    mean2d=splats.mean2d[i],
                    cov2d=splats.cov2d[i],
                    depth=splats.depth[i],
                    opacity=splats.opacity[i],
                    color=colors[3 * i : 3 * i + 3],
                    source_index=i,
                )
                for i in range(n)
            ]
        )
        o2 = rasterize(s2, cam, cfg)
        return float((o2.image * dl).sum())

    numeric = oracles.central_difference(fn, splats.color.ravel(), h=1e-5)
    assert oracles.rel_err(grads.d_color.ravel(), numeric, floor=1e-4) < 1e-6

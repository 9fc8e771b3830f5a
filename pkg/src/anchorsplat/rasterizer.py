"""Differentiable tile-based splatting.

World-space Gaussians are projected to screen-space 2D Gaussians (EWA-style
first-order projection with a small low-pass dilation), binned into square
tiles by the axis-aligned bounding box of their extent, depth-sorted, and
front-to-back alpha blended. The backward pass returns exact gradients of
the blended image w.r.t. every Gaussian attribute, under the same skip and
termination rules used forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _blend
from .errors import InternalError

LOWPASS = 0.3  # px^2 added to the 2D covariance diagonal
BIN_SIGMA_CUT = 1e-9  # binning radius grows until truncated sigma falls below this


@dataclass
class RasterConfig:
    tile_size: int = 16
    sigma_skip: float = 1.0 / 255.0
    t_stop: float = 1e-4
    near: float = 0.01
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))


def quat_to_rotmats(q):
    """Batched unit-quaternion (w, x, y, z) to rotation matrices (G, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(quaternions, scales):
    """Sigma = R S S^T R^T for unit quaternions and positive scales (batched)."""
    q = np.atleast_2d(np.asarray(quaternions, dtype=np.float64))
    s = np.atleast_2d(np.asarray(scales, dtype=np.float64))
    R = quat_to_rotmats(q)
    N = R * s[:, None, :]  # R @ diag(s)
    return N @ N.transpose(0, 2, 1)


def build_covariance_backward(quaternions, scales, d_cov):
    """Chain dL/dSigma back to (dL/dq_unit, dL/ds)."""
    q = np.asarray(quaternions, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    d_cov = np.asarray(d_cov, dtype=np.float64)
    R = quat_to_rotmats(q)
    N = R * s[:, None, :]
    d_N = (d_cov + d_cov.transpose(0, 2, 1)) @ N
    d_s = (d_N * R).sum(axis=1)
    d_R = d_N * s[:, None, :]

    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dR_dw = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(-1, 3, 3)
    dR_dx = 2.0 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(-1, 3, 3)
    dR_dy = 2.0 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(-1, 3, 3)
    dR_dz = 2.0 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(-1, 3, 3)
    d_q = np.stack(
        [
            (d_R * dR_dw).sum(axis=(1, 2)),
            (d_R * dR_dx).sum(axis=(1, 2)),
            (d_R * dR_dy).sum(axis=(1, 2)),
            (d_R * dR_dz).sum(axis=(1, 2)),
        ],
        axis=1,
    )
    return d_q, d_s


@dataclass
class Splats2D:
    """Screen-space Gaussians ready for blending (columnar)."""

    mean2d: np.ndarray  # (S, 2) pixels
    cov2d: np.ndarray  # (S, 2, 2) pixels^2, low-pass dilated
    depth: np.ndarray  # (S,) camera-space z
    opacity: np.ndarray  # (S,)
    color: np.ndarray  # (S, 3)
    source_index: np.ndarray  # (S,) index into the pre-projection Gaussian batch

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass
class ProjCache:
    camera: object
    t_cam: np.ndarray  # (S, 3)
    cov3d: np.ndarray  # (S, 3, 3)
    n_input: int
    dropped_nonfinite: int


def project(gaussians, camera, cfg):
    """Project world Gaussians to screen splats; drops behind-near and
    non-finite results. Returns (Splats2D, ProjCache)."""
    means = gaussians.means
    n = means.shape[0]
    t_all = camera.world_to_cam_points(means)
    in_front = t_all[:, 2] > cfg.near
    idx = np.flatnonzero(in_front)

    t = t_all[idx]
    cov3d = build_covariance(gaussians.quaternions[idx], gaussians.scales[idx])
    tz = t[:, 2]
    u = camera.fx * t[:, 0] / tz + camera.cx
    v = camera.fy * t[:, 1] / tz + camera.cy
    mean2d = np.stack([u, v], axis=1)

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * t[:, 0] / tz ** 2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * t[:, 1] / tz ** 2
    M = J @ camera.rotation[None, :, :]
    cov2d = M @ cov3d @ M.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    finite = np.isfinite(mean2d).all(axis=1) & np.isfinite(cov2d).all(axis=(1, 2))
    dropped = int(idx.size - finite.sum())
    if dropped:
        keep = np.flatnonzero(finite)
        idx, t, cov3d, mean2d, cov2d = idx[keep], t[keep], cov3d[keep], mean2d[keep], cov2d[keep]

    splats = Splats2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=t[:, 2].copy(),
        opacity=gaussians.opacities[idx].astype(np.float64),
        color=gaussians.colors[idx].astype(np.float64),
        source_index=idx,
    )
    cache = ProjCache(camera=camera, t_cam=t, cov3d=cov3d, n_input=n, dropped_nonfinite=dropped)
    return splats, cache


def project_backward(splats, cache, d_mean2d, d_cov2d):
    """Chain splat gradients to world means and 3D covariances.

    The Jacobian's dependence on the camera-space mean is included, so the
    returned gradients are exact. Returns (d_means (n_input, 3),
    d_cov3d (S, 3, 3)) with dropped Gaussians receiving zeros.
    """
    cam = cache.camera
    t = cache.t_cam
    tz = t[:, 2]
    fx, fy = cam.fx, cam.fy

    J = np.zeros((t.shape[0], 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * t[:, 0] / tz ** 2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * t[:, 1] / tz ** 2
    R = cam.rotation
    M = J @ R[None, :, :]

    d_cov3d = M.transpose(0, 2, 1) @ d_cov2d @ M
    d_M = (d_cov2d + d_cov2d.transpose(0, 2, 1)) @ M @ cache.cov3d
    d_J = d_M @ R.T[None, :, :]

    d_t = np.zeros_like(t)
    # mean2d = (fx tx / tz + cx, fy ty / tz + cy)
    d_t[:, 0] += d_mean2d[:, 0] * fx / tz
    d_t[:, 1] += d_mean2d[:, 1] * fy / tz
    d_t[:, 2] += -d_mean2d[:, 0] * fx * t[:, 0] / tz ** 2
    d_t[:, 2] += -d_mean2d[:, 1] * fy * t[:, 1] / tz ** 2
    # J entries that depend on t
    d_t[:, 0] += d_J[:, 0, 2] * (-fx / tz ** 2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy / tz ** 2)
    d_t[:, 2] += d_J[:, 0, 0] * (-fx / tz ** 2)
    d_t[:, 2] += d_J[:, 1, 1] * (-fy / tz ** 2)
    d_t[:, 2] += d_J[:, 0, 2] * (2.0 * fx * t[:, 0] / tz ** 3)
    d_t[:, 2] += d_J[:, 1, 2] * (2.0 * fy * t[:, 1] / tz ** 3)

    d_means = np.zeros((cache.n_input, 3))
    d_means[splats.source_index] = d_t @ R
    return d_means, d_cov3d


@dataclass
class TileLayout:
    tile_size: int
    tiles_x: int
    tiles_y: int
    splat_ids: np.ndarray  # flat, depth-ordered within each tile
    tile_offsets: np.ndarray  # (tiles_x * tiles_y + 1,)


def build_tile_layout(splats, width, height, tile_size):
    """Bin splats into tiles overlapped by their extent box.

    The box half-extent per axis is r * sqrt(cov_ii) with r >= 3, enlarged
    for high opacities until the truncated contribution is below
    BIN_SIGMA_CUT, so tiling is visually exact versus an untiled renderer.
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    s = len(splats)
    if s == 0:
        return TileLayout(tile_size, tiles_x, tiles_y, np.zeros(0, np.int64), np.zeros(n_tiles + 1, np.int64))

    order = np.lexsort((splats.source_index, splats.depth))
    mx = splats.mean2d[order, 0]
    my = splats.mean2d[order, 1]
    alpha = np.abs(splats.opacity[order])
    var_x = splats.cov2d[order, 0, 0]
    var_y = splats.cov2d[order, 1, 1]

    r_factor = np.full(s, 3.0)
    big = alpha > BIN_SIGMA_CUT
    r_factor[big] = np.maximum(3.0, np.sqrt(2.0 * np.log(alpha[big] / BIN_SIGMA_CUT)))
    rx = r_factor * np.sqrt(np.maximum(var_x, 0.0))
    ry = r_factor * np.sqrt(np.maximum(var_y, 0.0))

    tx0 = np.clip(np.floor((mx - rx) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx + rx) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my - ry) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my + ry) / tile_size), 0, tiles_y - 1).astype(np.int64)
    visible = big & (mx + rx >= 0) & (mx - rx <= width - 1) & (my + ry >= 0) & (my - ry <= height - 1)

    nx = np.where(visible, tx1 - tx0 + 1, 0)
    ny = np.where(visible, ty1 - ty0 + 1, 0)
    n_entries = nx * ny
    total = int(n_entries.sum())
    if total == 0:
        return TileLayout(tile_size, tiles_x, tiles_y, np.zeros(0, np.int64), np.zeros(n_tiles + 1, np.int64))

    rep = np.repeat(np.arange(s), n_entries)  # sorted-position of each entry
    starts = np.concatenate([[0], np.cumsum(n_entries)[:-1]])
    local = np.arange(total) - np.repeat(starts, n_entries)
    nx_rep = np.repeat(np.maximum(nx, 1), n_entries)
    ox = local % nx_rep
    oy = local // nx_rep
    tile_id = (np.repeat(ty0, n_entries) + oy) * tiles_x + (np.repeat(tx0, n_entries) + ox)

    entry_order = np.lexsort((rep, tile_id))
    splat_ids = order[rep[entry_order]]
    tile_counts = np.bincount(tile_id, minlength=n_tiles)
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(tile_counts, out=tile_offsets[1:])
    return TileLayout(tile_size, tiles_x, tiles_y, splat_ids.astype(np.int64), tile_offsets)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    final_transmittance: np.ndarray  # (H, W)
    layout: TileLayout
    conic: np.ndarray  # (S, 3) packed inverse covariances (a, b, c)
    splats: Splats2D
    config: RasterConfig
    width: int
    height: int
    singular_skipped: int


def _pack_conics(cov2d):
    """Invert 2x2 covariances to packed conics; flags singular ones."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det >= 1e-12
    safe = np.where(ok, det, 1.0)
    conic = np.stack([c / safe, -b / safe, a / safe], axis=1)
    conic[~ok] = 0.0
    return conic, ok


def rasterize(splats, camera, cfg):
    """Front-to-back alpha blending over depth-sorted per-tile splat lists."""
    width, height = camera.width, camera.height
    conic, ok = _pack_conics(splats.cov2d)
    singular = int((~ok).sum())
    usable = splats if not singular else _mask_splats(splats, ok)
    if singular:
        conic = conic[ok]
    layout = build_tile_layout(usable, width, height, cfg.tile_size)
    image = np.zeros((height, width, 3))
    t_final = np.ones((height, width))
    _blend.blend_forward(
        height,
        width,
        cfg.tile_size,
        layout.tiles_x,
        layout.tile_offsets,
        layout.splat_ids,
        usable.mean2d,
        conic,
        usable.opacity,
        usable.color,
        np.asarray(cfg.background, dtype=np.float64),
        float(cfg.sigma_skip),
        float(cfg.t_stop),
        image,
        t_final,
    )
    return RenderOutput(
        image=image,
        final_transmittance=t_final,
        layout=layout,
        conic=conic,
        splats=usable,
        config=cfg,
        width=width,
        height=height,
        singular_skipped=singular,
    )


def _mask_splats(splats, mask):
    return Splats2D(
        mean2d=splats.mean2d[mask],
        cov2d=splats.cov2d[mask],
        depth=splats.depth[mask],
        opacity=splats.opacity[mask],
        color=splats.color[mask],
        source_index=splats.source_index[mask],
    )


@dataclass
class SplatGradients:
    d_mean2d: np.ndarray  # (S, 2)
    d_cov2d: np.ndarray  # (S, 2, 2)
    d_opacity: np.ndarray  # (S,)
    d_color: np.ndarray  # (S, 3)


def rasterize_backward(output, dl_dimage):
    """Gradients of the blended image w.r.t. splat attributes.

    Replays the forward traversal (same tile lists, same skip/stop rules),
    so the result is the exact reverse-mode gradient of the image actually
    produced by :func:`rasterize`.
    """
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)
    if dl_dimage.shape != output.image.shape:
        raise InternalError("dl_dimage shape does not match the rendered image")
    splats = output.splats
    s = len(splats)
    d_mean2d = np.zeros((s, 2))
    d_conic = np.zeros((s, 3))
    d_opacity = np.zeros(s)
    d_color = np.zeros((s, 3))
    cfg = output.config
    _blend.blend_backward(
        output.height,
        output.width,
        cfg.tile_size,
        output.layout.tiles_x,
        output.layout.tile_offsets,
        output.layout.splat_ids,
        splats.mean2d,
        output.conic,
        splats.opacity,
        splats.color,
        output.image,
        dl_dimage,
        float(cfg.sigma_skip),
        float(cfg.t_stop),
        d_mean2d,
        d_conic,
        d_opacity,
        d_color,
    )
    # conic = inv(cov2d): dL/dcov = -M^T Gm M^T with Gm the symmetric matrix
    # gradient implied by the packed (a, b, c) parameterization.
    a = output.conic[:, 0]
    b = output.conic[:, 1]
    c = output.conic[:, 2]
    Minv = np.empty((s, 2, 2))
    Minv[:, 0, 0] = a
    Minv[:, 0, 1] = b
    Minv[:, 1, 0] = b
    Minv[:, 1, 1] = c
    Gm = np.empty((s, 2, 2))
    Gm[:, 0, 0] = d_conic[:, 0]
    Gm[:, 0, 1] = 0.5 * d_conic[:, 1]
    Gm[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gm[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -Minv @ Gm @ Minv
    return SplatGradients(d_mean2d=d_mean2d, d_cov2d=d_cov2d, d_opacity=d_opacity, d_color=d_color)

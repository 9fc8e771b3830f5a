"""Hot per-pixel alpha-blending kernels, in two interchangeable flavors.

``*_loops`` are plain scalar loops compiled with numba when available;
``*_numpy`` are vectorized fallbacks (per tile, arrays over pixels). The
selected implementation is exported as ``blend_forward`` / ``blend_backward``
(see accel.NUMBA_ENABLED). Both compute the same front-to-back compositing:

    C(px) = sum_i c_i * sigma_i * prod_{j<i} (1 - sigma_j) + T_final * bg
    sigma_i = alpha_i * exp(-0.5 * d^T conic d)

with per-splat skip when sigma < sigma_skip and per-pixel stop once the
transmittance drops below t_stop. The backward kernel replays the identical
traversal, so gradients match the function actually computed.
"""

import math

import numpy as np

from . import accel


def _blend_forward_loops(
    height,
    width,
    tile_size,
    tiles_x,
    tile_offsets,
    tile_splats,
    mean2d,
    conic,
    opacity,
    color,
    background,
    sigma_skip,
    t_stop,
    image,
    t_final,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                t = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for idx in range(lo, hi):
                    s = tile_splats[idx]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = (
                        -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy)
                        - conic[s, 1] * dx * dy
                    )
                    sigma = opacity[s] * math.exp(power)
                    if sigma < sigma_skip:
                        continue
                    w = sigma * t
                    cr += w * color[s, 0]
                    cg += w * color[s, 1]
                    cb += w * color[s, 2]
                    t *= 1.0 - sigma
                    if t < t_stop:
                        break
                image[py, px, 0] = cr + t * background[0]
                image[py, px, 1] = cg + t * background[1]
                image[py, px, 2] = cb + t * background[2]
                t_final[py, px] = t


def _blend_backward_loops(
    height,
    width,
    tile_size,
    tiles_x,
    tile_offsets,
    tile_splats,
    mean2d,
    conic,
    opacity,
    color,
    image,
    dl_dimage,
    sigma_skip,
    t_stop,
    d_mean2d,
    d_conic,
    d_opacity,
    d_color,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                gr = dl_dimage[py, px, 0]
                gg = dl_dimage[py, px, 1]
                gb = dl_dimage[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                fr = image[py, px, 0]
                fg = image[py, px, 1]
                fb = image[py, px, 2]
                t = 1.0
                ar = 0.0
                ag = 0.0
                ab = 0.0
                for idx in range(lo, hi):
                    s = tile_splats[idx]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = (
                        -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy)
                        - conic[s, 1] * dx * dy
                    )
                    gauss = math.exp(power)
                    sigma = opacity[s] * gauss
                    if sigma < sigma_skip:
                        continue
                    w = sigma * t
                    wr = w * color[s, 0]
                    wg = w * color[s, 1]
                    wb = w * color[s, 2]
                    inv_om = 1.0 / (1.0 - sigma)
                    # everything composited behind this splat, incl. background tail
                    rem_r = fr - ar - wr
                    rem_g = fg - ag - wg
                    rem_b = fb - ab - wb
                    d_sigma = (
                        gr * (t * color[s, 0] - rem_r * inv_om)
                        + gg * (t * color[s, 1] - rem_g * inv_om)
                        + gb * (t * color[s, 2] - rem_b * inv_om)
                    )
                    d_color[s, 0] += gr * w
                    d_color[s, 1] += gg * w
                    d_color[s, 2] += gb * w
                    d_opacity[s] += d_sigma * gauss
                    dp = d_sigma * sigma
                    d_conic[s, 0] += dp * (-0.5 * dx * dx)
                    d_conic[s, 1] += dp * (-dx * dy)
                    d_conic[s, 2] += dp * (-0.5 * dy * dy)
                    d_mean2d[s, 0] += dp * (conic[s, 0] * dx + conic[s, 1] * dy)
                    d_mean2d[s, 1] += dp * (conic[s, 1] * dx + conic[s, 2] * dy)
                    ar += wr
                    ag += wg
                    ab += wb
                    t *= 1.0 - sigma
                    if t < t_stop:
                        break


def blend_forward_numpy(
    height,
    width,
    tile_size,
    tiles_x,
    tile_offsets,
    tile_splats,
    mean2d,
    conic,
    opacity,
    color,
    background,
    sigma_skip,
    t_stop,
    image,
    t_final,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty, tx = divmod(tile, tiles_x)
        y0, x0 = ty * tile_size, tx * tile_size
        y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
        lo, hi = tile_offsets[tile], tile_offsets[tile + 1]
        ys, xs = np.mgrid[y0:y1, x0:x1]
        ys = ys.ravel().astype(np.float64)
        xs = xs.ravel().astype(np.float64)
        t = np.ones(ys.size)
        acc = np.zeros((ys.size, 3))
        for idx in range(lo, hi):
            s = tile_splats[idx]
            dx = xs - mean2d[s, 0]
            dy = ys - mean2d[s, 1]
            power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
            sigma = opacity[s] * np.exp(power)
            use = (sigma >= sigma_skip) & (t >= t_stop)
            w = np.where(use, sigma * t, 0.0)
            acc += w[:, None] * color[s]
            t = np.where(use, t * (1.0 - sigma), t)
        out = acc + t[:, None] * background
        image[y0:y1, x0:x1, :] = out.reshape(y1 - y0, x1 - x0, 3)
        t_final[y0:y1, x0:x1] = t.reshape(y1 - y0, x1 - x0)


def blend_backward_numpy(
    height,
    width,
    tile_size,
    tiles_x,
    tile_offsets,
    tile_splats,
    mean2d,
    conic,
    opacity,
    color,
    image,
    dl_dimage,
    sigma_skip,
    t_stop,
    d_mean2d,
    d_conic,
    d_opacity,
    d_color,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty, tx = divmod(tile, tiles_x)
        y0, x0 = ty * tile_size, tx * tile_size
        y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
        lo, hi = tile_offsets[tile], tile_offsets[tile + 1]
        if hi == lo:
            continue
        grad = dl_dimage[y0:y1, x0:x1, :].reshape(-1, 3)
        if not grad.any():
            continue
        final = image[y0:y1, x0:x1, :].reshape(-1, 3)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        ys = ys.ravel().astype(np.float64)
        xs = xs.ravel().astype(np.float64)
        t = np.ones(ys.size)
        acc = np.zeros((ys.size, 3))
        for idx in range(lo, hi):
            s = tile_splats[idx]
            dx = xs - mean2d[s, 0]
            dy = ys - mean2d[s, 1]
            power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
            gauss = np.exp(power)
            sigma = opacity[s] * gauss
            use = (sigma >= sigma_skip) & (t >= t_stop)
            w = np.where(use, sigma * t, 0.0)
            wc = w[:, None] * color[s]
            rem = final - acc - wc
            inv_om = 1.0 / (1.0 - sigma)
            d_sigma = np.where(
                use,
                (grad * (t[:, None] * color[s] - rem * inv_om[:, None])).sum(axis=1),
                0.0,
            )
            d_color[s] += grad.T @ w
            d_opacity[s] += d_sigma @ gauss
            dp = d_sigma * sigma
            d_conic[s, 0] += dp @ (-0.5 * dx * dx)
            d_conic[s, 1] += dp @ (-dx * dy)
            d_conic[s, 2] += dp @ (-0.5 * dy * dy)
            d_mean2d[s, 0] += dp @ (conic[s, 0] * dx + conic[s, 1] * dy)
            d_mean2d[s, 1] += dp @ (conic[s, 1] * dx + conic[s, 2] * dy)
            acc += wc
            t = np.where(use, t * (1.0 - sigma), t)


blend_forward_numba = accel.njit_kernel(_blend_forward_loops)
blend_backward_numba = accel.njit_kernel(_blend_backward_loops)

if accel.NUMBA_ENABLED:
    blend_forward = blend_forward_numba
    blend_backward = blend_backward_numba
else:  # pure-numpy fallback (ANCHORSPLAT_NO_NUMBA=1 or numba missing)
    blend_forward = blend_forward_numpy
    blend_backward = blend_backward_numpy

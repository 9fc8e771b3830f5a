"""Benchmark the two blending-kernel implementations.

Times the numba-compiled scalar kernels against the pure-numpy fallbacks on
the same random splat scenes (forward and backward). Run directly:

    python benchmarks/bench_blend.py [--splats 2000] [--size 256] [--repeats 5]
"""

import argparse
import time

import numpy as np

from anchorsplat import _blend, rasterizer


def make_scene(rng, n, width, height):
    mean2d = np.stack(
        [rng.uniform(0, width, n), rng.uniform(0, height, n)], axis=1
    )
    cov = np.zeros((n, 2, 2))
    for i in range(n):
        angle = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        sig = rng.uniform(1.0, 6.0, 2)
        cov[i] = rot @ np.diag(sig ** 2) @ rot.T + 0.3 * np.eye(2)
    return rasterizer.Splats2D(
        mean2d=mean2d,
        cov2d=cov,
        depth=rng.uniform(0.5, 10.0, n),
        opacity=rng.uniform(0.2, 0.95, n),
        color=rng.uniform(0, 1, (n, 3)),
        source_index=np.arange(n),
    )


def bench(kernel_fwd, kernel_bwd, args_fwd, args_bwd, repeats):
    f_img, f_t = args_fwd[-2], args_fwd[-1]
    kernel_fwd(*args_fwd)  # warm-up (JIT compile on the numba path)
    best_f = np.inf
    for _ in range(repeats):
        f_img[:] = 0
        f_t[:] = 1
        tic = time.perf_counter()
        kernel_fwd(*args_fwd)
        best_f = min(best_f, time.perf_counter() - tic)
    kernel_bwd(*args_bwd)
    best_b = np.inf
    for _ in range(repeats):
        for grad_arr in args_bwd[-4:]:
            grad_arr[:] = 0
        tic = time.perf_counter()
        kernel_bwd(*args_bwd)
        best_b = min(best_b, time.perf_counter() - tic)
    return best_f, best_b


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--splats", type=int, default=2000)
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    h = w = args.size
    splats = make_scene(rng, args.splats, w, h)
    conic, _ = rasterizer._pack_conics(splats.cov2d)
    layout = rasterizer.build_tile_layout(splats, w, h, 16)
    bg = np.zeros(3)
    image = np.zeros((h, w, 3))
    t_final = np.ones((h, w))
    common = (
        h, w, 16, layout.tiles_x, layout.tile_offsets, layout.splat_ids,
        splats.mean2d, conic, splats.opacity, splats.color,
    )
    fwd_args = common + (bg, 1.0 / 255.0, 1e-4, image, t_final)

    dl = rng.normal(0, 1, (h, w, 3))
    n = len(splats)
    grads = (np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))
    bwd_args = common + (image, dl, 1.0 / 255.0, 1e-4) + grads

    print(f"{args.splats} splats, {w}x{h}, tile 16, best of {args.repeats}")
    rows = []
    if _blend.blend_forward_numba is not None:
        f, b = bench(_blend.blend_forward_numba, _blend.blend_backward_numba, fwd_args, bwd_args, args.repeats)
        rows.append(("numba", f, b))
    else:
        print("numba unavailable; benchmarking the fallback only")
    f, b = bench(_blend.blend_forward_numpy, _blend.blend_backward_numpy, fwd_args, bwd_args, args.repeats)
    rows.append(("numpy", f, b))

    print(f"{'path':<8} {'forward':>12} {'backward':>12}")
    for name, f, b in rows:
        print(f"{name:<8} {f * 1000:>10.2f}ms {b * 1000:>10.2f}ms")
    if len(rows) == 2:
        print(
            f"{'speedup':<8} {rows[1][1] / rows[0][1]:>11.1f}x {rows[1][2] / rows[0][2]:>11.1f}x"
        )


if __name__ == "__main__":
    main()

"""Anchor scaffold: voxelized initialization, per-anchor learnable state,
and gradient/opacity-driven growing and pruning.

Anchors live at sparse-voxel centers and never move; each carries a 32-d
feature, two positive per-axis scale vectors (stored as logs), and k
learnable offsets that place its per-view Gaussians. The grid is stored as
a structure of arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

FEATURE_DIM = 32


def round_half_away(x):
    """Elementwise round-half-away-from-zero (np.round is half-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def voxel_keys(positions, voxel_size):
    """Integer voxel keys of world positions at the given resolution."""
    return round_half_away(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


@dataclass(frozen=True)
class Anchor:
    """Read-only view of one anchor (grid storage is columnar)."""

    position: np.ndarray
    feature: np.ndarray
    offset_scale: np.ndarray
    base_scale: np.ndarray
    offsets: np.ndarray
    level: int


@dataclass
class AnchorGrid:
    """All anchors of a scene plus the base-resolution occupancy set."""

    voxel_size: float
    positions: np.ndarray  # (A, 3), fixed after creation
    features: np.ndarray  # (A, 32)
    log_offset_scale: np.ndarray  # (A, 3)
    log_base_scale: np.ndarray  # (A, 3)
    offsets: np.ndarray  # (A, k, 3)
    levels: np.ndarray  # (A,) int, growth level of origin (>= 1)
    occupied: set = field(default_factory=set)

    @property
    def n_anchors(self):
        return self.positions.shape[0]

    @property
    def k(self):
        return self.offsets.shape[1]

    @property
    def offset_scale(self):
        return np.exp(self.log_offset_scale)

    @property
    def base_scale(self):
        return np.exp(self.log_base_scale)

    def anchor(self, i):
        return Anchor(
            position=self.positions[i],
            feature=self.features[i],
            offset_scale=np.exp(self.log_offset_scale[i]),
            base_scale=np.exp(self.log_base_scale[i]),
            offsets=self.offsets[i],
            level=int(self.levels[i]),
        )

    def learnable_items(self):
        yield "features", self.features
        yield "offsets", self.offsets
        yield "log_offset_scale", self.log_offset_scale
        yield "log_base_scale", self.log_base_scale

    def filtered(self, keep_mask):
        keep_mask = np.asarray(keep_mask, dtype=bool)
        kept = self.positions[keep_mask]
        return AnchorGrid(
            voxel_size=self.voxel_size,
            positions=kept,
            features=self.features[keep_mask].copy(),
            log_offset_scale=self.log_offset_scale[keep_mask].copy(),
            log_base_scale=self.log_base_scale[keep_mask].copy(),
            offsets=self.offsets[keep_mask].copy(),
            levels=self.levels[keep_mask].copy(),
            occupied={tuple(k) for k in voxel_keys(kept, self.voxel_size)},
        )


def _new_grid(centers, voxel_size, k, init_scale=None, levels=None, features=None):
    n = centers.shape[0]
    if init_scale is None:
        log_scale = np.full((n, 3), np.log(voxel_size))
    else:
        log_scale = np.log(np.broadcast_to(np.asarray(init_scale, dtype=np.float64), (n, 3))).copy()
    return AnchorGrid(
        voxel_size=float(voxel_size),
        positions=centers,
        features=np.zeros((n, FEATURE_DIM)) if features is None else features,
        log_offset_scale=log_scale,
        log_base_scale=log_scale.copy(),
        offsets=np.zeros((n, k, 3)),
        levels=np.ones(n, dtype=np.int64) if levels is None else levels,
        occupied={tuple(key) for key in voxel_keys(centers, voxel_size)},
    )


def voxelize(points, voxel_size, k=10):
    """Build one anchor per occupied voxel: centers round(P/eps)*eps, deduped."""
    if voxel_size <= 0:
        raise ValidationError("voxel size must be positive")
    pos = np.asarray(points.positions if hasattr(points, "positions") else points, dtype=np.float64)
    pos = pos.reshape(-1, 3)
    if pos.shape[0] < 1:
        raise ValidationError("voxelize needs at least one point")
    if not np.all(np.isfinite(pos)):
        raise ValidationError("voxelize: non-finite point coordinates")
    keys = voxel_keys(pos, voxel_size)
    uniq = np.unique(keys, axis=0)  # sorted lexicographically: deterministic order
    centers = uniq.astype(np.float64) * voxel_size
    return _new_grid(centers, voxel_size, k)


def auto_voxel_size(points):
    """Median nearest-neighbor distance over all points."""
    pos = np.asarray(points.positions if hasattr(points, "positions") else points, dtype=np.float64)
    pos = pos.reshape(-1, 3)
    if pos.shape[0] < 2:
        raise ValidationError("auto voxel size needs at least 2 points; set it manually")
    tree = cKDTree(pos)
    dists, _ = tree.query(pos, k=2)
    return float(np.median(dists[:, 1]))


def init_random_grid(count, bounds_min, bounds_max, voxel_size, k=10):
    """Roughly `count` lattice points filling the box, then voxelized.

    Per-axis lattice counts scale with the box extents so spacing is uniform.
    Used when a dataset ships no SfM points.
    """
    if count < 1:
        raise ValidationError("grid point count must be >= 1")
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0) or not np.all(np.isfinite(extent)):
        raise ValidationError("degenerate bounds for random grid init")
    density = (count / float(np.prod(extent))) ** (1.0 / 3.0)
    n_axis = np.maximum(1, np.ceil(extent * density)).astype(int)
    axes = [lo[a] + (np.arange(n_axis[a]) + 0.5) * extent[a] / n_axis[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    return voxelize(pts, voxel_size, k=k)


@dataclass
class RefinementConfig:
    interval: int = 100  # N: iterations averaged per refinement round
    tau_g: float = 0.0  # base gradient threshold (trainer sets mult * voxel_size)
    levels: int = 3
    keep_prob: float = 0.5
    prune_opacity: float = 0.5
    enable_grow: bool = True
    enable_prune: bool = True

    def level_voxel_size(self, base_size, m):
        return base_size / 4.0 ** (m - 1)

    def level_threshold(self, m):
        return self.tau_g * 2.0 ** (m - 1)


class RefinementAccumulator:
    """Running statistics for one refinement round.

    Per multi-resolution voxel: summed screen-gradient norms and counts of
    the Gaussians that fell inside it. Per anchor: summed per-iteration mean
    opacity of its surviving Gaussians and the number of iterations it
    produced at least one survivor.
    """

    def __init__(self, n_anchors, base_voxel_size, levels=3):
        self.base_voxel_size = float(base_voxel_size)
        self.levels = int(levels)
        self.grad_sums = [dict() for _ in range(self.levels)]
        self.opacity_sum = np.zeros(n_anchors)
        self.visit_count = np.zeros(n_anchors, dtype=np.int64)
        self.iterations = 0

    def level_voxel_size(self, m):
        return self.base_voxel_size / 4.0 ** (m - 1)

    def reset(self, n_anchors):
        self.grad_sums = [dict() for _ in range(self.levels)]
        self.opacity_sum = np.zeros(n_anchors)
        self.visit_count = np.zeros(n_anchors, dtype=np.int64)
        self.iterations = 0


def accumulate_refinement_stats(acc, positions, grad_norms, opacities, parent_ids):
    """Fold one iteration's post-filter Gaussians into the accumulator."""
    acc.iterations += 1
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if n == 0:
        return acc
    grad_norms = np.asarray(grad_norms, dtype=np.float64).reshape(-1)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
    parent_ids = np.asarray(parent_ids, dtype=np.int64).reshape(-1)

    for m in range(1, acc.levels + 1):
        keys = voxel_keys(positions, acc.level_voxel_size(m))
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        sums = np.bincount(inverse, weights=grad_norms, minlength=len(uniq))
        counts = np.bincount(inverse, minlength=len(uniq))
        table = acc.grad_sums[m - 1]
        for row, s, c in zip(uniq, sums, counts):
            key = (int(row[0]), int(row[1]), int(row[2]))
            if key in table:
                old = table[key]
                table[key] = (old[0] + s, old[1] + int(c))
            else:
                table[key] = (float(s), int(c))

    op_sum = np.bincount(parent_ids, weights=opacities, minlength=acc.opacity_sum.size)
    op_cnt = np.bincount(parent_ids, minlength=acc.opacity_sum.size)
    seen = op_cnt > 0
    acc.opacity_sum[seen] += op_sum[seen] / op_cnt[seen]
    acc.visit_count[seen] += 1
    return acc


def grow_anchors(grid, acc, cfg, rng):
    """Add anchors at multi-resolution voxels whose mean gradient exceeds the
    level threshold, with random candidate elimination.

    Returns (new_grid, n_added). The accumulator is left untouched so the
    pruning pass can read the same round; the caller resets it afterwards.
    """
    if not cfg.enable_grow or grid.n_anchors == 0:
        return grid, 0

    new_centers = []
    new_levels = []
    occupied = set(grid.occupied)
    for m in range(1, cfg.levels + 1):
        eps_m = acc.level_voxel_size(m)
        tau_m = cfg.level_threshold(m)
        table = acc.grad_sums[m - 1]
        for key in sorted(table.keys()):
            total, count = table[key]
            if count == 0 or total / count <= tau_m:
                continue
            center = np.array(key, dtype=np.float64) * eps_m
            base_key = tuple(voxel_keys(center[None, :], grid.voxel_size)[0])
            if base_key in occupied:
                continue
            if rng.random() >= cfg.keep_prob:
                continue
            occupied.add(base_key)
            new_centers.append(center)
            new_levels.append(m)

    if not new_centers:
        return grid, 0

    centers = np.asarray(new_centers)
    levels = np.asarray(new_levels, dtype=np.int64)
    # Feature init: copy from the nearest pre-existing anchor (ties -> lowest index).
    tree = cKDTree(grid.positions)
    _, nearest = tree.query(centers, k=1)
    log_scales = np.log(np.array([acc.level_voxel_size(m) for m in levels]))[:, None]
    log_scales = np.repeat(log_scales, 3, axis=1)

    merged = AnchorGrid(
        voxel_size=grid.voxel_size,
        positions=np.vstack([grid.positions, centers]),
        features=np.vstack([grid.features, grid.features[nearest].copy()]),
        log_offset_scale=np.vstack([grid.log_offset_scale, log_scales]),
        log_base_scale=np.vstack([grid.log_base_scale, log_scales.copy()]),
        offsets=np.vstack([grid.offsets, np.zeros((len(centers), grid.k, 3))]),
        levels=np.concatenate([grid.levels, levels]),
        occupied=occupied,
    )
    return merged, len(new_centers)


def prune_anchors(grid, acc, cfg):
    """Drop anchors whose round-accumulated opacity fell below the threshold.

    Anchors with zero visits are kept (no evidence). Returns
    (new_grid, keep_mask).
    """
    keep = np.ones(grid.n_anchors, dtype=bool)
    if cfg.enable_prune:
        n = min(grid.n_anchors, acc.opacity_sum.size)
        visited = acc.visit_count[:n] > 0
        weak = acc.opacity_sum[:n] < cfg.prune_opacity
        keep[:n] = ~(visited & weak)
    if keep.all():
        return grid, keep
    return grid.filtered(keep), keep

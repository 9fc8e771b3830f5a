"""Per-view neural Gaussian generation.

Pipeline for one camera: frustum-cull anchors, decode attributes, assemble
candidate Gaussians at anchor + offset * offset_scale, then drop candidates
whose raw opacity falls below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_EFFECTIVE_OPACITY = 1e-4  # keeps blending defined when the filter is off


@dataclass
class FilterConfig:
    tau_alpha: float = 0.0
    frustum_margin: float = 1.0  # multiple of each anchor's max offset_scale
    enable_frustum: bool = True
    enable_opacity: bool = True
    near: float = 0.01


@dataclass
class NeuralGaussians:
    """Columnar batch of per-view Gaussians."""

    means: np.ndarray  # (G, 3)
    opacities: np.ndarray  # (G,) raw tanh output for candidates
    colors: np.ndarray  # (G, 3)
    quaternions: np.ndarray  # (G, 4) unit
    scales: np.ndarray  # (G, 3) positive
    parent_anchor: np.ndarray  # (G,) index into the visible-anchor list's source grid
    offset_index: np.ndarray  # (G,) 0..k-1

    def __len__(self):
        return self.means.shape[0]

    def take(self, mask_or_idx):
        return NeuralGaussians(
            means=self.means[mask_or_idx],
            opacities=self.opacities[mask_or_idx],
            colors=self.colors[mask_or_idx],
            quaternions=self.quaternions[mask_or_idx],
            scales=self.scales[mask_or_idx],
            parent_anchor=self.parent_anchor[mask_or_idx],
            offset_index=self.offset_index[mask_or_idx],
        )


def cull_anchors(grid, camera, cfg):
    """Indices of anchors whose margin-expanded position is inside the frustum."""
    all_idx = np.arange(grid.n_anchors)
    if not cfg.enable_frustum or grid.n_anchors == 0:
        return all_idx
    t = camera.world_to_cam_points(grid.positions)
    z = t[:, 2]
    in_front = z > cfg.near
    margin = cfg.frustum_margin * grid.offset_scale.max(axis=1)
    u = np.full(z.shape, np.nan)
    v = np.full(z.shape, np.nan)
    np.divide(camera.fx * t[:, 0], z, out=u, where=in_front)
    np.divide(camera.fy * t[:, 1], z, out=v, where=in_front)
    u += camera.cx
    v += camera.cy
    mx = np.zeros_like(z)
    my = np.zeros_like(z)
    np.divide(margin * camera.fx, z, out=mx, where=in_front)
    np.divide(margin * camera.fy, z, out=my, where=in_front)
    inside = (
        in_front
        & (u >= -mx)
        & (u <= camera.width + mx)
        & (v >= -my)
        & (v <= camera.height + my)
    )
    return all_idx[inside]


def spawn_gaussians(grid, visible_idx, heads):
    """Assemble the k candidate Gaussians of every visible anchor.

    Means are anchor_position + offset * offset_scale (componentwise);
    opacities are the raw head outputs and may still be non-positive.
    Ordering is (anchor index, offset index), fixed for determinism.
    """
    v = len(visible_idx)
    k = grid.k
    anchor_pos = grid.positions[visible_idx]
    offset_scale = grid.offset_scale[visible_idx]
    offsets = grid.offsets[visible_idx]
    means = anchor_pos[:, None, :] + offsets * offset_scale[:, None, :]
    return NeuralGaussians(
        means=means.reshape(v * k, 3),
        opacities=heads.alpha_raw.reshape(v * k),
        colors=heads.colors.reshape(v * k, 3),
        quaternions=heads.quaternions.reshape(v * k, 4),
        scales=heads.scales.reshape(v * k, 3),
        parent_anchor=np.repeat(np.asarray(visible_idx, dtype=np.int64), k),
        offset_index=np.tile(np.arange(k, dtype=np.int64), v),
    )


def spawn_backward(d_means, visible_idx, grid):
    """Chain mean gradients to offsets and log offset_scale.

    d_means is (V*k, 3) in spawn order. Returns
    (d_offsets (V, k, 3), d_log_offset_scale (V, 3)).
    """
    v = len(visible_idx)
    k = grid.k
    d_means = d_means.reshape(v, k, 3)
    offset_scale = grid.offset_scale[visible_idx]
    offsets = grid.offsets[visible_idx]
    d_offsets = d_means * offset_scale[:, None, :]
    d_scale = (d_means * offsets).sum(axis=1)
    d_log_offset_scale = d_scale * offset_scale
    return d_offsets, d_log_offset_scale


def opacity_filter(candidates, cfg):
    """Keep candidates with raw opacity >= tau_alpha.

    Returns (survivors, keep_mask). With the filter disabled everything is
    kept and effective opacity is clamped away from zero.
    """
    raw = candidates.opacities
    if cfg.enable_opacity:
        keep = raw >= cfg.tau_alpha
        survivors = candidates.take(keep)
        return survivors, keep
    keep = np.ones(len(candidates), dtype=bool)
    survivors = candidates.take(keep)
    survivors.opacities = np.maximum(raw, MIN_EFFECTIVE_OPACITY)
    return survivors, keep

"""One-view forward/backward orchestration.

Composes cull -> view context -> decode -> spawn -> opacity filter ->
project -> rasterize, keeping every intermediate needed to push image-space
gradients all the way back to anchor state and MLP parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoders as dec
from . import gaussgen, rasterizer


@dataclass
class ViewRender:
    camera: object
    visible_idx: np.ndarray
    ctx: object  # ViewContext
    heads: object  # DecodedHeads
    candidates: object  # NeuralGaussians (V * k)
    survivors: object  # NeuralGaussians post-filter
    keep_mask: np.ndarray
    splats: object  # Splats2D
    proj_cache: object
    output: object  # RenderOutput
    filter_cfg: object = None

    @property
    def image(self):
        return self.output.image

    @property
    def n_visible_anchors(self):
        return int(len(self.visible_idx))

    @property
    def n_rasterized(self):
        return int(len(self.survivors))


def render_view(grid, decoder_set, camera, filter_cfg, raster_cfg):
    """Render one camera; returns a ViewRender with all backward caches."""
    visible_idx = gaussgen.cull_anchors(grid, camera, filter_cfg)
    ctx = dec.view_context(
        grid.positions[visible_idx],
        grid.features[visible_idx],
        camera.camera_position,
        decoder_set.f_weight,
    )
    heads = dec.decode_attributes(ctx, decoder_set, grid.base_scale[visible_idx])
    candidates = gaussgen.spawn_gaussians(grid, visible_idx, heads)
    survivors, keep_mask = gaussgen.opacity_filter(candidates, filter_cfg)
    splats, proj_cache = rasterizer.project(survivors, camera, raster_cfg)
    output = rasterizer.rasterize(splats, camera, raster_cfg)
    return ViewRender(
        camera=camera,
        visible_idx=visible_idx,
        ctx=ctx,
        heads=heads,
        candidates=candidates,
        survivors=survivors,
        keep_mask=keep_mask,
        splats=splats,
        proj_cache=proj_cache,
        output=output,
        filter_cfg=filter_cfg,
    )


@dataclass
class ViewGradients:
    """Per-view gradients on anchor state, plus refinement statistics."""

    visible_idx: np.ndarray
    d_features: np.ndarray  # (V, 32)
    d_offsets: np.ndarray  # (V, k, 3)
    d_log_offset_scale: np.ndarray  # (V, 3)
    d_log_base_scale: np.ndarray  # (V, 3)
    screen_grad_norms: np.ndarray  # (G,) per surviving Gaussian, 0 if not rasterized


def render_backward(view, decoder_set, grid, dl_dimage, d_scales_direct=None):
    """Backpropagate image gradients (plus any direct scale-regularizer
    gradients on the survivors) into MLP buffers and anchor-state gradients.
    """
    vr = view
    v = vr.n_visible_anchors
    k = grid.k
    g = len(vr.survivors)

    splat_grads = rasterizer.rasterize_backward(vr.output, dl_dimage)
    d_means_surv, d_cov3d = rasterizer.project_backward(
        vr.splats, vr.proj_cache, splat_grads.d_mean2d, splat_grads.d_cov2d
    )
    kept = vr.splats.source_index  # survivor rows that actually rasterized

    d_q_kept, d_s_kept = rasterizer.build_covariance_backward(
        vr.survivors.quaternions[kept], vr.survivors.scales[kept], d_cov3d
    )

    d_opacity_surv = np.zeros(g)
    d_color_surv = np.zeros((g, 3))
    d_quat_surv = np.zeros((g, 4))
    d_scale_surv = np.zeros((g, 3)) if d_scales_direct is None else np.array(d_scales_direct)
    d_opacity_surv[kept] = splat_grads.d_opacity
    d_color_surv[kept] = splat_grads.d_color
    d_quat_surv[kept] = d_q_kept
    d_scale_surv[kept] += d_s_kept
    if vr.filter_cfg is not None and not vr.filter_cfg.enable_opacity:
        # effective opacity was max(raw, floor): clamped entries get no gradient
        clamped = vr.candidates.opacities < gaussgen.MIN_EFFECTIVE_OPACITY
        d_opacity_surv[clamped] = 0.0

    # Scatter survivor gradients back into the (V, k) candidate layout;
    # filtered-out candidates receive no gradient.
    flat_idx = np.flatnonzero(vr.keep_mask)
    d_alpha = np.zeros((v, k))
    d_colors = np.zeros((v, k, 3))
    d_quats = np.zeros((v, k, 4))
    d_scales = np.zeros((v, k, 3))
    d_means_flat = np.zeros((v * k, 3))
    d_alpha.reshape(-1)[flat_idx] = d_opacity_surv
    d_colors.reshape(-1, 3)[flat_idx] = d_color_surv
    d_quats.reshape(-1, 4)[flat_idx] = d_quat_surv
    d_scales.reshape(-1, 3)[flat_idx] = d_scale_surv
    d_means_flat[flat_idx] = d_means_surv

    upstream = dec.HeadGradients(
        d_alpha_raw=d_alpha, d_colors=d_colors, d_quaternions=d_quats, d_scales=d_scales
    )
    d_features, d_log_base_scale = dec.backward(decoder_set, vr.ctx, vr.heads, upstream)
    d_offsets, d_log_offset_scale = gaussgen.spawn_backward(d_means_flat, vr.visible_idx, grid)

    norms = np.zeros(g)
    norms[kept] = np.linalg.norm(splat_grads.d_mean2d, axis=1)
    return ViewGradients(
        visible_idx=vr.visible_idx,
        d_features=d_features,
        d_offsets=d_offsets,
        d_log_offset_scale=d_log_offset_scale,
        d_log_base_scale=d_log_base_scale,
        screen_grad_norms=norms,
    )

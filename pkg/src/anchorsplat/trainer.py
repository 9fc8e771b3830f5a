"""End-to-end optimization: loss, Adam updates, refinement scheduling,
checkpointing, and the per-iteration CSV log.

Anchor positions stay fixed; offsets, features, log-scales and all MLP
parameters are optimized with per-group learning rates. Every run is fully
deterministic for a given config + seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import decoders as dec
from . import metrics, render
from .config import RunConfig, config_to_text, parse_config_text
from .errors import IntegrityError, InternalError, ValidationError
from .gaussgen import FilterConfig
from .rasterizer import RasterConfig
from .scaffold import (
    AnchorGrid,
    RefinementAccumulator,
    RefinementConfig,
    accumulate_refinement_stats,
    auto_voxel_size,
    grow_anchors,
    init_random_grid,
    prune_anchors,
    voxelize,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.001
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2


@dataclass
class LossResult:
    loss: float
    l1: float
    ssim_value: float
    ssim_term: float
    vol_term: float
    d_rendered: np.ndarray
    d_scales: np.ndarray


def compute_loss(rendered, target, scales, cfg):
    """L1 + lambda_ssim * (1 - SSIM) + lambda_vol * sum of scale products.

    Returns the loss with analytic gradients w.r.t. the rendered image and
    the per-Gaussian scales.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError("rendered/target shape mismatch")
    diff = rendered - target
    n = diff.size
    l1 = float(np.abs(diff).mean())
    d_rendered = np.sign(diff) / n

    ssim_value, d_ssim = metrics.ssim_with_grad(
        rendered,
        target,
        window=cfg.ssim_window,
        sigma=cfg.ssim_sigma,
        c1=cfg.ssim_c1,
        c2=cfg.ssim_c2,
    )
    ssim_term = cfg.lambda_ssim * (1.0 - ssim_value)
    d_rendered = d_rendered - cfg.lambda_ssim * d_ssim

    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    prods = scales.prod(axis=1)
    vol_term = cfg.lambda_vol * float(prods.sum())
    d_scales = cfg.lambda_vol * np.stack(
        [
            scales[:, 1] * scales[:, 2],
            scales[:, 0] * scales[:, 2],
            scales[:, 0] * scales[:, 1],
        ],
        axis=1,
    )
    loss = l1 + ssim_term + vol_term
    return LossResult(loss, l1, ssim_value, ssim_term, vol_term, d_rendered, d_scales)


@dataclass
class TrainState:
    grid: AnchorGrid
    decoders: dec.DecoderSet
    moments: dict  # name -> [m, v] arrays matching the parameter shapes
    iteration: int
    accumulator: RefinementAccumulator
    rng: np.random.Generator
    sampler_order: np.ndarray
    sampler_pos: int
    config: RunConfig
    skipped_updates: int = 0

    def param_items(self):
        yield from self.grid.learnable_items()
        yield from self.decoders.param_items()


def init_moments(state):
    state.moments = {name: [np.zeros_like(p), np.zeros_like(p)] for name, p in state.param_items()}


def adam_step(state, grads, lrs):
    """One Adam update over every learnable tensor.

    grads/lrs are {name: array}/{name: float}; missing gradients count as
    zero. Tensors with non-finite gradients are skipped and counted.
    """
    state.iteration += 1
    t = state.iteration
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, param in state.param_items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        if not np.all(np.isfinite(g)):
            state.skipped_updates += 1
            continue
        m, v = state.moments[name]
        if m.shape != param.shape:
            raise InternalError(f"moment/parameter shape mismatch for '{name}'")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        param -= step
    return state


def _group_of(name):
    if name == "offsets":
        return "offsets"
    if name == "features":
        return "features"
    if name in ("log_offset_scale", "log_base_scale"):
        return "scales"
    return "mlp"


def learning_rates(state, cfg):
    """Per-tensor learning rates for the current iteration."""
    frac = min(1.0, state.iteration / max(1, cfg.iterations))
    lr_offsets = cfg.lr_offsets * cfg.lr_offsets_final ** frac
    table = {
        "offsets": lr_offsets,
        "features": cfg.lr_features,
        "scales": cfg.lr_scales,
        "mlp": cfg.lr_mlp,
    }
    return {name: table[_group_of(name)] for name, _ in state.param_items()}


@dataclass
class LogRow:
    iteration: int
    loss: float
    l1: float
    ssim_term: float
    vol_term: float
    psnr: float
    anchors: int
    gaussians: int
    ms_per_iter: float


LOG_HEADER = "iter,loss,l1,ssim_term,vol_term,psnr,anchors,gaussians,ms_per_iter"


def write_train_log(rows, path):
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.iteration},{r.loss!r},{r.l1!r},{r.ssim_term!r},{r.vol_term!r},"
                f"{metrics.format_psnr(r.psnr)},{r.anchors},{r.gaussians},{r.ms_per_iter:.3f}\n"
            )


def init_state(scene, cfg):
    """Build the initial scaffold + decoders from a scene and config."""
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.resolved_voxel_size()
    if len(scene.points) >= 1:
        if eps is None:
            if len(scene.points) < 2:
                raise ValidationError("auto voxel size needs >= 2 points; set voxel_size")
            eps = auto_voxel_size(scene.points)
        grid = voxelize(scene.points, eps, k=cfg.k)
    else:
        if eps is None:
            raise ValidationError("no SfM points: voxel_size must be set explicitly")
        centers = np.stack([cam.camera_position for cam in scene.cameras])
        mid = 0.5 * (centers.min(axis=0) + centers.max(axis=0))
        half = 0.5 * (centers.max(axis=0) - centers.min(axis=0))
        half = np.maximum(half * cfg.random_grid_expand, eps * 4)
        grid = init_random_grid(cfg.random_grid_count, mid - half, mid + half, eps, k=cfg.k)

    decoder_set = dec.DecoderSet.create(cfg.k, rng)
    state = TrainState(
        grid=grid,
        decoders=decoder_set,
        moments={},
        iteration=0,
        accumulator=RefinementAccumulator(grid.n_anchors, grid.voxel_size, cfg.levels),
        rng=rng,
        sampler_order=np.zeros(0, dtype=np.int64),
        sampler_pos=0,
        config=cfg,
    )
    init_moments(state)
    return state


def _filter_config(cfg):
    return FilterConfig(
        tau_alpha=cfg.tau_alpha,
        frustum_margin=cfg.frustum_margin,
        enable_frustum=cfg.enable_frustum,
        enable_opacity=cfg.enable_opacity,
        near=cfg.near,
    )


def _raster_config(cfg, scene_kind):
    return RasterConfig(
        tile_size=cfg.tile_size,
        sigma_skip=cfg.sigma_skip,
        t_stop=cfg.t_stop,
        near=cfg.near,
        background=np.asarray(cfg.resolved_background(scene_kind)),
    )


def _refine_config(cfg, voxel_size):
    return RefinementConfig(
        interval=cfg.refine_every,
        tau_g=cfg.tau_g_mult * voxel_size,
        levels=cfg.levels,
        keep_prob=cfg.keep_prob,
        prune_opacity=cfg.prune_opacity,
        enable_grow=cfg.enable_grow,
        enable_prune=cfg.enable_prune,
    )


def _next_view(state, train_indices):
    if state.sampler_pos >= state.sampler_order.size:
        state.sampler_order = state.rng.permutation(train_indices)
        state.sampler_pos = 0
    view = int(state.sampler_order[state.sampler_pos])
    state.sampler_pos += 1
    return view


def _resize_moments_grown(state, n_added):
    for name, param in state.grid.learnable_items():
        m, v = state.moments[name]
        pad = np.zeros((n_added,) + param.shape[1:])
        state.moments[name] = [np.vstack([m, pad]) if m.ndim > 1 else np.concatenate([m, pad]),
                               np.vstack([v, pad.copy()]) if v.ndim > 1 else np.concatenate([v, pad.copy()])]


def _resize_moments_pruned(state, keep_mask):
    for name, _ in state.grid.learnable_items():
        m, v = state.moments[name]
        state.moments[name] = [m[keep_mask].copy(), v[keep_mask].copy()]


def train(scene, cfg, progress=None):
    """Run the optimization loop; returns (TrainState, [LogRow])."""
    if scene.train_indices.size == 0:
        raise ValidationError("scene has an empty train split")
    state = init_state(scene, cfg)
    rows = train_more(state, scene, cfg.iterations, progress=progress)
    return state, rows


def train_more(state, scene, n_iterations, progress=None):
    """Advance an existing state by n_iterations on the scene's train split."""
    cfg = state.config
    filter_cfg = _filter_config(cfg)
    raster_cfg = _raster_config(cfg, scene.kind)
    refine_cfg = _refine_config(cfg, state.grid.voxel_size)
    loss_cfg = LossConfig(lambda_ssim=cfg.lambda_ssim, lambda_vol=cfg.lambda_vol)
    train_indices = scene.train_indices
    refine_end = int(cfg.refine_end_frac * cfg.iterations)
    refinement_on = cfg.enable_grow or cfg.enable_prune

    rows = []
    for _ in range(n_iterations):
        tic = time.perf_counter()
        view_idx = _next_view(state, train_indices)
        camera = scene.cameras[view_idx]
        target = scene.images[view_idx]

        view = render.render_view(state.grid, state.decoders, camera, filter_cfg, raster_cfg)
        loss = compute_loss(view.image, target, view.survivors.scales, loss_cfg)

        state.decoders.zero_grad()
        grads_anchor = render.render_backward(
            view, state.decoders, state.grid, loss.d_rendered, d_scales_direct=loss.d_scales
        )

        grads = {name: np.zeros_like(p) for name, p in state.grid.learnable_items()}
        vis = grads_anchor.visible_idx
        grads["features"][vis] = grads_anchor.d_features
        grads["offsets"][vis] = grads_anchor.d_offsets
        grads["log_offset_scale"][vis] = grads_anchor.d_log_offset_scale
        grads["log_base_scale"][vis] = grads_anchor.d_log_base_scale
        grads.update(dict(state.decoders.grad_items()))

        adam_step(state, grads, learning_rates(state, cfg))

        accumulate_refinement_stats(
            state.accumulator,
            view.survivors.means,
            grads_anchor.screen_grad_norms,
            view.survivors.opacities,
            view.survivors.parent_anchor,
        )

        it = state.iteration
        if refinement_on and cfg.refine_every > 0 and it % cfg.refine_every == 0:
            if cfg.refine_start <= it <= refine_end and state.accumulator.iterations > 0:
                grown, n_added = grow_anchors(state.grid, state.accumulator, refine_cfg, state.rng)
                state.grid = grown
                if n_added:
                    _resize_moments_grown(state, n_added)
                pruned, keep_mask = prune_anchors(state.grid, state.accumulator, refine_cfg)
                state.grid = pruned
                if not keep_mask.all():
                    _resize_moments_pruned(state, keep_mask)
                if state.grid.n_anchors == 0:
                    raise InternalError("all anchors pruned; lower prune threshold or check data")
            state.accumulator.reset(state.grid.n_anchors)

        ms = (time.perf_counter() - tic) * 1000.0
        row = LogRow(
            iteration=it,
            loss=loss.loss,
            l1=loss.l1,
            ssim_term=loss.ssim_term,
            vol_term=loss.vol_term,
            psnr=metrics.psnr(view.image, target),
            anchors=state.grid.n_anchors,
            gaussians=view.n_rasterized,
            ms_per_iter=ms,
        )
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def render_camera(state, camera, scene_kind="colmap", overrides=None):
    """Render one camera from a trained state using its stored config."""
    cfg = state.config
    filter_cfg = _filter_config(cfg)
    raster_cfg = _raster_config(cfg, scene_kind)
    if overrides:
        for key, value in overrides.items():
            if hasattr(filter_cfg, key):
                setattr(filter_cfg, key, value)
            elif hasattr(raster_cfg, key):
                setattr(raster_cfg, key, value)
            else:
                raise ValidationError(f"unknown render override '{key}'")
    return render.render_view(state.grid, state.decoders, camera, filter_cfg, raster_cfg)


# --- checkpoint serialization ------------------------------------------------


def save_checkpoint(state, path):
    """Serialize the complete training state (bit-exact round trip)."""
    arrays = {
        "grid.positions": state.grid.positions,
        "grid.features": state.grid.features,
        "grid.log_offset_scale": state.grid.log_offset_scale,
        "grid.log_base_scale": state.grid.log_base_scale,
        "grid.offsets": state.grid.offsets,
        "grid.levels": state.grid.levels,
        "sampler.order": state.sampler_order,
        "refine.opacity_sum": state.accumulator.opacity_sum,
        "refine.visit_count": state.accumulator.visit_count,
    }
    for name, param in state.decoders.param_items():
        arrays[f"dec.{name}"] = param
    for name, (m, v) in state.moments.items():
        arrays[f"adam.m.{name}"] = m
        arrays[f"adam.v.{name}"] = v
    for lvl, table in enumerate(state.accumulator.grad_sums):
        keys = sorted(table.keys())
        arrays[f"refine.keys{lvl}"] = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        arrays[f"refine.vals{lvl}"] = np.asarray(
            [[table[key][0], float(table[key][1])] for key in keys], dtype=np.float64
        ).reshape(-1, 2)

    meta = {
        "iteration": state.iteration,
        "sampler_pos": state.sampler_pos,
        "skipped_updates": state.skipped_updates,
        "voxel_size": state.grid.voxel_size,
        "k": state.grid.k,
        "levels": state.accumulator.levels,
        "acc_iterations": state.accumulator.iterations,
        "rng_state": state.rng.bit_generator.state,
    }
    chunks = {
        "config": config_to_text(state.config).encode("utf-8"),
        "meta": ckpt.pack_json(meta),
        "arrays": ckpt.pack_arrays(arrays),
    }
    ckpt.write_container(path, chunks)


def load_checkpoint(path):
    """Restore a TrainState saved by save_checkpoint."""
    chunks = ckpt.read_container(path)
    for required in ("config", "meta", "arrays"):
        if required not in chunks:
            raise IntegrityError(f"{path}: missing chunk '{required}'")
    meta = ckpt.unpack_json(chunks["meta"], str(path))
    arrays = ckpt.unpack_arrays(chunks["arrays"], str(path))
    cfg = parse_config_text(chunks["config"].decode("utf-8"), where=f"{path}#config")

    from .scaffold import voxel_keys

    positions = arrays["grid.positions"]
    grid = AnchorGrid(
        voxel_size=float(meta["voxel_size"]),
        positions=positions,
        features=arrays["grid.features"],
        log_offset_scale=arrays["grid.log_offset_scale"],
        log_base_scale=arrays["grid.log_base_scale"],
        offsets=arrays["grid.offsets"],
        levels=arrays["grid.levels"],
        occupied={tuple(key) for key in voxel_keys(positions, float(meta["voxel_size"]))},
    )
    k = int(meta["k"])
    rng = np.random.default_rng()
    decoder_set = dec.DecoderSet(
        k=k,
        f_weight=_mlp_from(arrays, "f_weight"),
        f_opacity=_mlp_from(arrays, "f_opacity"),
        f_color=_mlp_from(arrays, "f_color"),
        f_quat=_mlp_from(arrays, "f_quat"),
        f_scale=_mlp_from(arrays, "f_scale"),
    )
    acc = RefinementAccumulator(grid.n_anchors, grid.voxel_size, int(meta["levels"]))
    acc.opacity_sum = arrays["refine.opacity_sum"]
    acc.visit_count = arrays["refine.visit_count"]
    acc.iterations = int(meta["acc_iterations"])
    for lvl in range(acc.levels):
        keys = arrays[f"refine.keys{lvl}"]
        vals = arrays[f"refine.vals{lvl}"]
        acc.grad_sums[lvl] = {
            (int(krow[0]), int(krow[1]), int(krow[2])): (float(vrow[0]), int(vrow[1]))
            for krow, vrow in zip(keys, vals)
        }

    state = TrainState(
        grid=grid,
        decoders=decoder_set,
        moments={},
        iteration=int(meta["iteration"]),
        accumulator=acc,
        rng=rng,
        sampler_order=arrays["sampler.order"],
        sampler_pos=int(meta["sampler_pos"]),
        config=cfg,
        skipped_updates=int(meta["skipped_updates"]),
    )
    rng_state = meta["rng_state"]
    state.rng.bit_generator.state = rng_state
    state.moments = {}
    for name, param in state.param_items():
        m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
        if m_key not in arrays or v_key not in arrays:
            raise IntegrityError(f"{path}: missing optimizer moments for '{name}'")
        state.moments[name] = [arrays[m_key], arrays[v_key]]
    return state


def _mlp_from(arrays, name):
    try:
        return dec.MlpParams(
            w1=arrays[f"dec.{name}.w1"],
            b1=arrays[f"dec.{name}.b1"],
            w2=arrays[f"dec.{name}.w2"],
            b2=arrays[f"dec.{name}.b2"],
        )
    except KeyError as exc:
        raise IntegrityError(f"checkpoint missing decoder tensor for '{name}'") from exc

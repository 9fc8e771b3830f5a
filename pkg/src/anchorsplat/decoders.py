"""The five tiny MLPs that decode per-view Gaussian attributes.

One weight net blends a multi-resolution feature bank into a view-adapted
anchor feature; four attribute heads decode opacity, color, quaternion and
scale for all k Gaussians of an anchor in a single pass. Forward and
reverse passes are written out by hand so gradients are exact and cheap to
audit.

Layout: every net is Linear -> ReLU -> Linear with hidden width 32. Head
inputs are [blended_feature (32), distance (1), direction (3)]; the weight
net sees only [distance, direction].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, ValidationError

HIDDEN_DIM = 32
FEATURE_DIM = 32


@dataclass
class MlpParams:
    """2-layer perceptron parameters plus mirrored gradient buffers."""

    w1: np.ndarray  # (in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, out)
    b2: np.ndarray  # (out,)
    g_w1: np.ndarray = None
    g_b1: np.ndarray = None
    g_w2: np.ndarray = None
    g_b2: np.ndarray = None

    def __post_init__(self):
        if self.g_w1 is None:
            self.zero_grad(alloc=True)

    @classmethod
    def create(cls, n_in, n_out, rng, hidden=HIDDEN_DIM):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        lim1 = 1.0 / np.sqrt(n_in)
        lim2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-lim1, lim1, size=(n_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.uniform(-lim2, lim2, size=(hidden, n_out)),
            b2=np.zeros(n_out),
        )

    @property
    def n_in(self):
        return self.w1.shape[0]

    @property
    def n_out(self):
        return self.w2.shape[1]

    def zero_grad(self, alloc=False):
        if alloc:
            self.g_w1 = np.zeros_like(self.w1)
            self.g_b1 = np.zeros_like(self.b1)
            self.g_w2 = np.zeros_like(self.w2)
            self.g_b2 = np.zeros_like(self.b2)
        else:
            self.g_w1[:] = 0.0
            self.g_b1[:] = 0.0
            self.g_w2[:] = 0.0
            self.g_b2[:] = 0.0

    def n_params(self):
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


def mlp_forward(p, x):
    """Batched forward pass; returns (output, cache for backward)."""
    if x.shape[1] != p.n_in:
        raise InternalError(f"MLP input width {x.shape[1]} != expected {p.n_in}")
    pre = x @ p.w1 + p.b1
    act = np.maximum(pre, 0.0)
    out = act @ p.w2 + p.b2
    return out, (x, pre, act)


def mlp_backward(p, cache, d_out):
    """Accumulate parameter gradients; returns gradient w.r.t. the input."""
    x, pre, act = cache
    if d_out.shape != (x.shape[0], p.n_out):
        raise InternalError("MLP upstream gradient shape mismatch")
    p.g_w2 += act.T @ d_out
    p.g_b2 += d_out.sum(axis=0)
    d_act = d_out @ p.w2.T
    d_pre = d_act * (pre > 0.0)  # ReLU subgradient at 0 is 0
    p.g_w1 += x.T @ d_pre
    p.g_b1 += d_pre.sum(axis=0)
    return d_pre @ p.w1.T


@dataclass
class DecoderSet:
    """Weight net + four attribute heads for k Gaussians per anchor."""

    k: int
    f_weight: MlpParams  # (distance, direction) -> 3 bank logits
    f_opacity: MlpParams  # 36 -> k
    f_color: MlpParams  # 36 -> 3k
    f_quat: MlpParams  # 36 -> 4k
    f_scale: MlpParams  # 36 -> 3k

    @classmethod
    def create(cls, k, rng):
        head_in = FEATURE_DIM + 4
        return cls(
            k=k,
            f_weight=MlpParams.create(4, 3, rng),
            f_opacity=MlpParams.create(head_in, k, rng),
            f_color=MlpParams.create(head_in, 3 * k, rng),
            f_quat=MlpParams.create(head_in, 4 * k, rng),
            f_scale=MlpParams.create(head_in, 3 * k, rng),
        )

    def named_mlps(self):
        yield "f_weight", self.f_weight
        yield "f_opacity", self.f_opacity
        yield "f_color", self.f_color
        yield "f_quat", self.f_quat
        yield "f_scale", self.f_scale

    def param_items(self):
        for name, mlp in self.named_mlps():
            yield f"{name}.w1", mlp.w1
            yield f"{name}.b1", mlp.b1
            yield f"{name}.w2", mlp.w2
            yield f"{name}.b2", mlp.b2

    def grad_items(self):
        for name, mlp in self.named_mlps():
            yield f"{name}.w1", mlp.g_w1
            yield f"{name}.b1", mlp.g_b1
            yield f"{name}.w2", mlp.g_w2
            yield f"{name}.b2", mlp.g_b2

    def zero_grad(self):
        for _, mlp in self.named_mlps():
            mlp.zero_grad()


def pool_feature(features, group):
    """Average consecutive groups of `group` entries, repeated back to width.

    The adjoint of this map is the map itself (the pooling matrix is
    symmetric), which backward() relies on.
    """
    v, d = features.shape
    pooled = features.reshape(v, d // group, group).mean(axis=2)
    return np.repeat(pooled, group, axis=1)


@dataclass
class ViewContext:
    """Per-visible-anchor view geometry and blended features (batched)."""

    distances: np.ndarray  # (V,)
    directions: np.ndarray  # (V, 3) unit
    bank_weights: np.ndarray  # (V, 3) softmax, rows sum to 1
    blended_features: np.ndarray  # (V, 32)
    cache: tuple = None


def view_context(positions, features, camera_position, f_weight):
    """Camera-relative distance/direction and feature-bank blending."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(-1, FEATURE_DIM)
    cam = np.asarray(camera_position, dtype=np.float64).reshape(3)

    delta = positions - cam
    dist = np.linalg.norm(delta, axis=1)
    if np.any(dist == 0.0):
        raise ValidationError("camera coincides with an anchor position")
    direction = delta / dist[:, None]

    w_in = np.concatenate([dist[:, None], direction], axis=1)
    logits, w_cache = mlp_forward(f_weight, w_in)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    weights = expv / expv.sum(axis=1, keepdims=True)

    pool1 = pool_feature(features, 2)
    pool2 = pool_feature(features, 4)
    blended = (
        weights[:, 0:1] * features + weights[:, 1:2] * pool1 + weights[:, 2:3] * pool2
    )
    return ViewContext(
        distances=dist,
        directions=direction,
        bank_weights=weights,
        blended_features=blended,
        cache=(features, pool1, pool2, weights, w_cache),
    )


@dataclass
class DecodedHeads:
    """Raw per-anchor head outputs for k Gaussians (pre-assembly)."""

    alpha_raw: np.ndarray  # (V, k) in (-1, 1)
    colors: np.ndarray  # (V, k, 3) in (0, 1)
    quaternions: np.ndarray  # (V, k, 4) unit rows
    scales: np.ndarray  # (V, k, 3) in (0, base_scale)
    zero_quat_count: int
    cache: tuple = None


def decode_attributes(ctx, decoders, base_scale):
    """One-pass decode of all four heads for every visible anchor."""
    v = ctx.distances.shape[0]
    k = decoders.k
    head_in = np.concatenate(
        [ctx.blended_features, ctx.distances[:, None], ctx.directions], axis=1
    )

    a_out, a_cache = mlp_forward(decoders.f_opacity, head_in)
    alpha_raw = np.tanh(a_out)

    c_out, c_cache = mlp_forward(decoders.f_color, head_in)
    colors = 1.0 / (1.0 + np.exp(-c_out))

    q_out, q_cache = mlp_forward(decoders.f_quat, head_in)
    q_raw = q_out.reshape(v, k, 4)
    q_norm = np.linalg.norm(q_raw, axis=2)
    degenerate = q_norm == 0.0
    zero_count = int(degenerate.sum())
    safe_norm = np.where(degenerate, 1.0, q_norm)
    quaternions = q_raw / safe_norm[:, :, None]
    if zero_count:
        quaternions[degenerate] = np.array([1.0, 0.0, 0.0, 0.0])

    s_out, s_cache = mlp_forward(decoders.f_scale, head_in)
    s_sig = 1.0 / (1.0 + np.exp(-s_out))
    base = np.asarray(base_scale, dtype=np.float64).reshape(v, 3)
    scales = s_sig.reshape(v, k, 3) * base[:, None, :]

    return DecodedHeads(
        alpha_raw=alpha_raw,
        colors=colors.reshape(v, k, 3),
        quaternions=quaternions,
        scales=scales,
        zero_quat_count=zero_count,
        cache=(head_in, a_cache, c_cache, q_cache, s_cache, q_raw, safe_norm, degenerate, s_sig, base),
    )


@dataclass
class HeadGradients:
    """Upstream gradients flowing into the decoded heads."""

    d_alpha_raw: np.ndarray  # (V, k)
    d_colors: np.ndarray  # (V, k, 3)
    d_quaternions: np.ndarray  # (V, k, 4), w.r.t. the normalized rows
    d_scales: np.ndarray  # (V, k, 3)


def backward(decoders, ctx, heads, upstream):
    """Reverse pass through heads, feature bank and weight net.

    Accumulates into every MLP's gradient buffers and returns
    (d_features (V, 32), d_log_base_scale (V, 3)) for the anchor state.
    Geometry inputs (distance, direction) lead only to fixed positions, so
    their gradients are dropped.
    """
    head_in, a_cache, c_cache, q_cache, s_cache, q_raw, safe_norm, degenerate, s_sig, base = heads.cache
    v, k = heads.alpha_raw.shape

    d_a_out = upstream.d_alpha_raw * (1.0 - heads.alpha_raw ** 2)
    d_head_in = mlp_backward(decoders.f_opacity, a_cache, d_a_out)

    colors_flat = heads.colors.reshape(v, 3 * k)
    d_c_out = upstream.d_colors.reshape(v, 3 * k) * colors_flat * (1.0 - colors_flat)
    d_head_in += mlp_backward(decoders.f_color, c_cache, d_c_out)

    # Through row normalization: dr = (g - q (g . q)) / |r|; constant rows get 0.
    q_unit = heads.quaternions
    g = upstream.d_quaternions
    dot = (g * q_unit).sum(axis=2, keepdims=True)
    d_q_raw = (g - q_unit * dot) / safe_norm[:, :, None]
    if heads.zero_quat_count:
        d_q_raw[degenerate] = 0.0
    d_head_in += mlp_backward(decoders.f_quat, q_cache, d_q_raw.reshape(v, 4 * k))

    d_s_sig_3d = upstream.d_scales * base[:, None, :]
    d_base = (upstream.d_scales * s_sig.reshape(v, k, 3)).sum(axis=1)
    d_log_base_scale = d_base * base
    d_s_out = d_s_sig_3d.reshape(v, 3 * k) * s_sig * (1.0 - s_sig)
    d_head_in += mlp_backward(decoders.f_scale, s_cache, d_s_out)

    d_blended = d_head_in[:, :FEATURE_DIM]

    features, pool1, pool2, weights, w_cache = ctx.cache
    d_weights = np.stack(
        [
            (d_blended * features).sum(axis=1),
            (d_blended * pool1).sum(axis=1),
            (d_blended * pool2).sum(axis=1),
        ],
        axis=1,
    )
    d_features = (
        weights[:, 0:1] * d_blended
        + weights[:, 1:2] * pool_feature(d_blended, 2)
        + weights[:, 2:3] * pool_feature(d_blended, 4)
    )
    # Softmax Jacobian, then the weight net (its geometry inputs are fixed).
    d_logits = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
    mlp_backward(decoders.f_weight, w_cache, d_logits)

    return d_features, d_log_base_scale

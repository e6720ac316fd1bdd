"""Compress per-frame state tokens into latent groups shaped like VAE frames.

The pipeline is: keep every k-th frame of the (T, s, d) token sequence,
fuse each kept frame's s tokens into a (c, h, w) feature map with a
two-layer transformer decoder read out by h*w learnable queries, then
channel-concatenate every m consecutive maps into one (m*c, h, w) group.
With m*c pinned to the VAE channel count, the T/(m*k) groups drop into
the denoiser's token sequence as if they were extra latent frames.

No positional encoding is applied to the state tokens: they are an
unordered set within a frame, and fusion is permutation-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent_stack import C_VAE, StateTokenSequence
from .rng import Rng
from .tensor_engine import (
    AttentionWeights,
    ParameterSet,
    ShapeError,
    Tensor,
    concat,
    expand,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    narrow,
    reshape,
    transpose,
)

__all__ = [
    "AdapterConfig",
    "LatentGroups",
    "AdapterWeights",
    "build_adapter_weights",
    "subsample",
    "fuse_frame_tokens",
    "fuse_frames",
    "group_merge",
    "group_unmerge",
    "adapt",
    "TABLE3_GRID",
]

# the iso-compute ablation grid: all rows give the same group count for fixed T
TABLE3_GRID = ((1, 8), (2, 4), (4, 2), (8, 1))


@dataclass
class AdapterConfig:
    k: int  # temporal subsample stride
    m: int  # merge group size
    c: int  # per-frame channel count
    heads: int = 4
    d_model: int = 64

    def __post_init__(self):
        if self.m * self.c != C_VAE:
            raise ValueError(f"adapter requires m*c == {C_VAE}, got {self.m}*{self.c}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if min(self.k, self.m, self.c, self.heads, self.d_model) < 1:
            raise ValueError("adapter config values must be positive")

    def groups_for(self, T: int) -> int:
        if T % (self.m * self.k) != 0:
            raise ValueError(f"clip length {T} not divisible by m*k = {self.m * self.k}")
        return T // (self.m * self.k)


@dataclass
class LatentGroups:
    groups: Tensor  # (G, 16, h, w)

    def __post_init__(self):
        if self.groups.shape[1] != C_VAE:
            raise ShapeError(f"latent groups must have {C_VAE} channels, got {self.groups.shape[1]}")

    @property
    def G(self) -> int:
        return self.groups.shape[0]


@dataclass
class DecoderLayerWeights:
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    ln_self: tuple[Tensor, Tensor]
    ln_cross: tuple[Tensor, Tensor]
    ln_ff: tuple[Tensor, Tensor]
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class AdapterWeights:
    config: AdapterConfig
    h: int
    w: int
    queries: Tensor  # (h*w, d_model)
    in_proj_w: Tensor  # (d, d_model)
    in_proj_b: Tensor
    layers: list[DecoderLayerWeights]
    out_proj_w: Tensor  # (d_model, c)
    out_proj_b: Tensor


def _attn_weights(params: ParameterSet, prefix: str, dm: int, rng: Rng, group: str) -> AttentionWeights:
    scale = 0.02
    return AttentionWeights(
        wq=params.add(f"{prefix}.wq", rng.split("wq").normal((dm, dm), scale), group).tensor,
        wk=params.add(f"{prefix}.wk", rng.split("wk").normal((dm, dm), scale), group).tensor,
        wv=params.add(f"{prefix}.wv", rng.split("wv").normal((dm, dm), scale), group).tensor,
        wo=params.add(f"{prefix}.wo", rng.split("wo").normal((dm, dm), scale), group).tensor,
    )


def _ln_weights(params: ParameterSet, prefix: str, dm: int, group: str) -> tuple[Tensor, Tensor]:
    g = params.add(f"{prefix}.gamma", np.ones(dm), group).tensor
    b = params.add(f"{prefix}.beta", np.zeros(dm), group).tensor
    return g, b


def build_adapter_weights(
    config: AdapterConfig,
    d_token: int,
    h: int,
    w: int,
    params: ParameterSet,
    rng: Rng,
    n_layers: int = 2,
) -> AdapterWeights:
    """All adapter parameters live in group="adapter" (trained from scratch)."""
    dm = config.d_model
    scale = 0.02
    grp = "adapter"
    queries = params.add("adapter.queries", rng.split("queries").normal((h * w, dm), scale), grp).tensor
    in_w = params.add("adapter.in_proj.w", rng.split("inw").normal((d_token, dm), scale), grp).tensor
    in_b = params.add("adapter.in_proj.b", np.zeros(dm), grp).tensor
    layers = []
    for i in range(n_layers):
        lrng = rng.split(f"layer{i}")
        ffh = 4 * dm
        layers.append(
            DecoderLayerWeights(
                self_attn=_attn_weights(params, f"adapter.layers.{i}.self_attn", dm, lrng.split("self"), grp),
                cross_attn=_attn_weights(params, f"adapter.layers.{i}.cross_attn", dm, lrng.split("cross"), grp),
                ln_self=_ln_weights(params, f"adapter.layers.{i}.ln_self", dm, grp),
                ln_cross=_ln_weights(params, f"adapter.layers.{i}.ln_cross", dm, grp),
                ln_ff=_ln_weights(params, f"adapter.layers.{i}.ln_ff", dm, grp),
                ff_w1=params.add(f"adapter.layers.{i}.ff.w1", lrng.split("ffw1").normal((dm, ffh), scale), grp).tensor,
                ff_b1=params.add(f"adapter.layers.{i}.ff.b1", np.zeros(ffh), grp).tensor,
                ff_w2=params.add(f"adapter.layers.{i}.ff.w2", lrng.split("ffw2").normal((ffh, dm), scale), grp).tensor,
                ff_b2=params.add(f"adapter.layers.{i}.ff.b2", np.zeros(dm), grp).tensor,
            )
        )
    out_w = params.add("adapter.out_proj.w", rng.split("outw").normal((dm, config.c), scale), grp).tensor
    out_b = params.add("adapter.out_proj.b", np.zeros(config.c), grp).tensor
    return AdapterWeights(
        config=config, h=h, w=w, queries=queries,
        in_proj_w=in_w, in_proj_b=in_b, layers=layers,
        out_proj_w=out_w, out_proj_b=out_b,
    )


def subsample(tokens: StateTokenSequence | Tensor, k: int) -> Tensor:
    """Keep frames 0, k, 2k, ...; strict divisibility, no padding."""
    t = tokens.tokens if isinstance(tokens, StateTokenSequence) else tokens
    T = t.shape[0]
    if T % k != 0:
        raise ShapeError(f"subsample: T={T} not divisible by k={k}")
    if k == 1:
        return t
    kept = t.data[::k].copy()
    if t.requires_grad:
        # route through narrow/concat so gradients flow when tokens are live
        parts = [narrow(t, 0, i, 1) for i in range(0, T, k)]
        return concat(parts, axis=0)
    return Tensor(kept)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = matmul(x, w)
    return y + expand(b, y.shape)


def fuse_frames(frame_tokens: Tensor, weights: AdapterWeights) -> Tensor:
    """Fuse (F, s, d) token frames into (F, c, h, w) feature maps.

    Two pre-norm decoder layers: query self-attention, cross-attention to
    the frame's tokens, feed-forward; each sublayer residual.
    """
    cfg = weights.config
    F, s, d = frame_tokens.shape
    x = _linear(frame_tokens, weights.in_proj_w, weights.in_proj_b)  # (F, s, dm)
    hw = weights.h * weights.w
    q = expand(reshape(weights.queries, (1, hw, cfg.d_model)), (F, hw, cfg.d_model))
    for layer in weights.layers:
        qn = layer_norm(q, *layer.ln_self)
        q = q + multi_head_attention(qn, qn, layer.self_attn, cfg.heads)
        qn = layer_norm(q, *layer.ln_cross)
        q = q + multi_head_attention(qn, x, layer.cross_attn, cfg.heads)
        qn = layer_norm(q, *layer.ln_ff)
        q = q + _linear(gelu(_linear(qn, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2)
    out = _linear(q, weights.out_proj_w, weights.out_proj_b)  # (F, hw, c)
    out = transpose(out, (0, 2, 1))  # (F, c, hw)
    return reshape(out, (F, cfg.c, weights.h, weights.w))


def fuse_frame_tokens(frame_tokens: Tensor, weights: AdapterWeights) -> Tensor:
    """Single-frame fusion: (s, d) -> (c, h, w)."""
    s, d = frame_tokens.shape
    batched = fuse_frames(reshape(frame_tokens, (1, s, d)), weights)
    return reshape(batched, batched.shape[1:])


def group_merge(features: Tensor, m: int) -> LatentGroups:
    """Channel-concatenate every m consecutive feature maps.

    Frame order within a group is preserved in channel order: frame j of a
    group occupies channels [j*c, (j+1)*c).
    """
    Tk, c, h, w = features.shape
    if Tk % m != 0:
        raise ShapeError(f"group_merge: {Tk} frames not divisible by m={m}")
    merged = reshape(features, (Tk // m, m * c, h, w))
    return LatentGroups(groups=merged)


def group_unmerge(groups: LatentGroups, m: int) -> Tensor:
    """Inverse of group_merge (channel split back into frames)."""
    G, mc, h, w = groups.groups.shape
    if mc % m != 0:
        raise ShapeError(f"group_unmerge: {mc} channels not divisible by m={m}")
    return reshape(groups.groups, (G * m, mc // m, h, w))


def adapt(tokens: StateTokenSequence, weights: AdapterWeights) -> LatentGroups:
    """subsample -> per-frame fuse -> group merge."""
    cfg = weights.config
    t = tokens.tokens if isinstance(tokens, StateTokenSequence) else tokens
    cfg.groups_for(t.shape[0])  # validate divisibility up front
    kept = subsample(t, cfg.k)
    fused = fuse_frames(kept, weights)
    return group_merge(fused, cfg.m)

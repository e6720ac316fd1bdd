"""Toy latent-video diffusion transformer with the frozen/trainable split.

Latent frames (target noise, source encodings, geometry groups) become
h*w tokens each through one shared input projector and are concatenated
along the frame axis in the fixed order [target | source | geometry].
Learned segment / frame / spatial embeddings mark token roles (with a
from-scratch backbone there is no pretrained prior distinguishing noisy
from clean latents). Pose embeddings are added to their segment's tokens
before every block. Full non-causal self-attention; the output projector
reads the target segment only.

The fine-tuning partition mirrors the usual "freeze the prior" recipe:
input/output projectors and all self-attention weights are trainable
(group "backbone"), feed-forward weights, layer norms, embedding tables
and the timestep MLP are frozen after the warm-up stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry_adapter import LatentGroups
from .latent_stack import C_VAE, LatentVideo
from .rng import Rng
from .tensor_engine import (
    AttentionWeights,
    NonFiniteError,
    Parameter,
    ParameterSet,
    ShapeError,
    Tensor,
    concat,
    expand,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    narrow,
    reshape,
    transpose,
)

__all__ = [
    "SEGMENT_TARGET",
    "SEGMENT_SOURCE",
    "SEGMENT_GEOMETRY",
    "TokenSequence",
    "BlockWeights",
    "DiTWeights",
    "build_dit_weights",
    "assemble_sequence",
    "timestep_features",
    "dit_forward",
    "trainable_partition",
    "classify_parameter",
]

SEGMENT_TARGET, SEGMENT_SOURCE, SEGMENT_GEOMETRY = 0, 1, 2
TIMESTEP_FEATURES = 32


@dataclass
class TokenSequence:
    tokens: Tensor  # (N, D)
    segment_ids: np.ndarray  # (N,) in {0,1,2}
    frame_ids: np.ndarray  # (N,) temporal index within segment
    spatial_ids: np.ndarray  # (N, 2) row, col
    counts: tuple[int, int, int]  # (T_tgt, T_src, G)
    hw: tuple[int, int]  # (h, w)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class BlockWeights:
    attn: AttentionWeights
    ln_attn: tuple[Tensor, Tensor]
    ln_ff: tuple[Tensor, Tensor]
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class DiTWeights:
    D: int
    heads: int
    h: int
    w: int
    in_proj_w: Tensor  # (16, D)
    in_proj_b: Tensor
    blocks: list[BlockWeights]
    ln_f: tuple[Tensor, Tensor]
    out_proj_w: Tensor  # (D, 16)
    out_proj_b: Tensor
    seg_emb: Tensor  # (3, D)
    frame_emb: Tensor  # (max_frames, D)
    spat_emb: Tensor  # (h*w, D)
    t_mlp_w1: Tensor  # (TIMESTEP_FEATURES, D)
    t_mlp_b1: Tensor
    t_mlp_w2: Tensor  # (D, D)
    t_mlp_b2: Tensor

    @property
    def max_frames(self) -> int:
        return self.frame_emb.shape[0]


def build_dit_weights(
    D: int,
    n_blocks: int,
    heads: int,
    h: int,
    w: int,
    max_frames: int,
    params: ParameterSet,
    rng: Rng,
) -> DiTWeights:
    if D % heads != 0:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    scale = 0.02
    blocks = []
    for i in range(n_blocks):
        brng = rng.split(f"block{i}")
        ffh = 4 * D
        attn = AttentionWeights(
            wq=params.add(f"dit.blocks.{i}.attn.wq", brng.split("wq").normal((D, D), scale), "backbone").tensor,
            wk=params.add(f"dit.blocks.{i}.attn.wk", brng.split("wk").normal((D, D), scale), "backbone").tensor,
            wv=params.add(f"dit.blocks.{i}.attn.wv", brng.split("wv").normal((D, D), scale), "backbone").tensor,
            wo=params.add(f"dit.blocks.{i}.attn.wo", brng.split("wo").normal((D, D), scale), "backbone").tensor,
        )
        blocks.append(
            BlockWeights(
                attn=attn,
                ln_attn=(
                    params.add(f"dit.blocks.{i}.ln_attn.gamma", np.ones(D), "frozen").tensor,
                    params.add(f"dit.blocks.{i}.ln_attn.beta", np.zeros(D), "frozen").tensor,
                ),
                ln_ff=(
                    params.add(f"dit.blocks.{i}.ln_ff.gamma", np.ones(D), "frozen").tensor,
                    params.add(f"dit.blocks.{i}.ln_ff.beta", np.zeros(D), "frozen").tensor,
                ),
                ff_w1=params.add(f"dit.blocks.{i}.ff.w1", brng.split("ffw1").normal((D, ffh), scale), "frozen").tensor,
                ff_b1=params.add(f"dit.blocks.{i}.ff.b1", np.zeros(ffh), "frozen").tensor,
                ff_w2=params.add(f"dit.blocks.{i}.ff.w2", brng.split("ffw2").normal((ffh, D), scale), "frozen").tensor,
                ff_b2=params.add(f"dit.blocks.{i}.ff.b2", np.zeros(D), "frozen").tensor,
            )
        )
    return DiTWeights(
        D=D, heads=heads, h=h, w=w,
        in_proj_w=params.add("dit.in_proj.w", rng.split("inw").normal((C_VAE, D), scale), "backbone").tensor,
        in_proj_b=params.add("dit.in_proj.b", np.zeros(D), "backbone").tensor,
        blocks=blocks,
        ln_f=(
            params.add("dit.ln_f.gamma", np.ones(D), "frozen").tensor,
            params.add("dit.ln_f.beta", np.zeros(D), "frozen").tensor,
        ),
        out_proj_w=params.add("dit.out_proj.w", rng.split("outw").normal((D, C_VAE), scale), "backbone").tensor,
        out_proj_b=params.add("dit.out_proj.b", np.zeros(C_VAE), "backbone").tensor,
        seg_emb=params.add("dit.emb.segment", rng.split("segemb").normal((3, D), scale), "frozen").tensor,
        frame_emb=params.add("dit.emb.frame", rng.split("frameemb").normal((max_frames, D), scale), "frozen").tensor,
        spat_emb=params.add("dit.emb.spatial", rng.split("spatemb").normal((h * w, D), scale), "frozen").tensor,
        t_mlp_w1=params.add("dit.tmlp.w1", rng.split("tw1").normal((TIMESTEP_FEATURES, D), scale), "frozen").tensor,
        t_mlp_b1=params.add("dit.tmlp.b1", np.zeros(D), "frozen").tensor,
        t_mlp_w2=params.add("dit.tmlp.w2", rng.split("tw2").normal((D, D), scale), "frozen").tensor,
        t_mlp_b2=params.add("dit.tmlp.b2", np.zeros(D), "frozen").tensor,
    )


def _tokens_from_frames(frames: Tensor, weights: DiTWeights) -> Tensor:
    """(F, 16, h, w) -> (F*h*w, D) through the shared input projector."""
    F, C, h, w = frames.shape
    x = reshape(frames, (F, C, h * w))
    x = transpose(x, (0, 2, 1))  # (F, hw, 16)
    x = reshape(x, (F * h * w, C))
    y = matmul(x, weights.in_proj_w)
    return y + expand(weights.in_proj_b, y.shape)


def assemble_sequence(
    noisy_target: Tensor,
    source_latents: LatentVideo,
    geometry: LatentGroups,
    weights: DiTWeights,
) -> TokenSequence:
    """Concatenate [target | source | geometry] along the frame axis as tokens."""
    src = source_latents.latents
    geo = geometry.groups
    h, w = weights.h, weights.w
    for name, t in (("target", noisy_target), ("source", src), ("geometry", geo)):
        if t.shape[1:] != (C_VAE, h, w):
            raise ShapeError(f"{name} frames must be (*, {C_VAE}, {h}, {w}), got {t.shape}")
    t_tgt, t_src, g = noisy_target.shape[0], src.shape[0], geo.shape[0]
    if max(t_tgt, t_src, g) > weights.max_frames:
        raise ShapeError(
            f"segment length exceeds frame-embedding table: "
            f"{max(t_tgt, t_src, g)} > {weights.max_frames}"
        )

    all_frames = concat([noisy_target, src, geo], axis=0)
    tokens = _tokens_from_frames(all_frames, weights)  # (N, D)

    hw = h * w
    seg_ids = np.repeat([SEGMENT_TARGET, SEGMENT_SOURCE, SEGMENT_GEOMETRY], [t_tgt * hw, t_src * hw, g * hw])
    frame_ids = np.concatenate([
        np.repeat(np.arange(t_tgt), hw),
        np.repeat(np.arange(t_src), hw),
        np.repeat(np.arange(g), hw),
    ])
    rows, cols = np.divmod(np.arange(hw), w)
    spatial = np.tile(np.stack([rows, cols], axis=1), (t_tgt + t_src + g, 1))
    flat_spatial = np.tile(np.arange(hw), t_tgt + t_src + g)

    tokens = tokens + gather_rows(weights.seg_emb, seg_ids)
    tokens = tokens + gather_rows(weights.frame_emb, frame_ids)
    tokens = tokens + gather_rows(weights.spat_emb, flat_spatial)
    return TokenSequence(
        tokens=tokens,
        segment_ids=seg_ids,
        frame_ids=frame_ids,
        spatial_ids=spatial,
        counts=(t_tgt, t_src, g),
        hw=(h, w),
    )


def timestep_features(t: float) -> np.ndarray:
    """Sinusoidal features of the scalar diffusion time."""
    half = TIMESTEP_FEATURES // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = freqs * float(t)
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _expand_pose_rows(emb: Tensor, hw: int) -> Tensor:
    """(T, D) pose embeddings -> (T*hw, D), one row per token."""
    T, D = emb.shape
    e = reshape(emb, (T, 1, D))
    e = expand(e, (T, hw, D))
    return reshape(e, (T * hw, D))


def dit_forward(
    seq: TokenSequence,
    t: float,
    src_pose_emb: Tensor,
    tgt_pose_emb: Tensor,
    weights: DiTWeights,
) -> Tensor:
    """Predict the velocity field over the target segment.

    The timestep embedding is added to every token once at the input; pose
    embeddings are added to their segment's tokens before every block.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"diffusion time {t} outside [0, 1]")
    t_tgt, t_src, g = seq.counts
    h, w = seq.hw
    hw = h * w
    if tgt_pose_emb.shape != (t_tgt, weights.D):
        raise ShapeError(f"target pose embedding must be ({t_tgt}, {weights.D}), got {tgt_pose_emb.shape}")
    if src_pose_emb.shape != (t_src, weights.D):
        raise ShapeError(f"source pose embedding must be ({t_src}, {weights.D}), got {src_pose_emb.shape}")

    x = seq.tokens
    n = x.shape[0]

    tfeat = Tensor(timestep_features(t))
    temb = matmul(reshape(tfeat, (1, TIMESTEP_FEATURES)), weights.t_mlp_w1)
    temb = gelu(temb + expand(weights.t_mlp_b1, temb.shape))
    temb = matmul(temb, weights.t_mlp_w2) + reshape(weights.t_mlp_b2, (1, weights.D))
    x = x + expand(temb, (n, weights.D))

    pose_add = concat(
        [
            _expand_pose_rows(tgt_pose_emb, hw),
            _expand_pose_rows(src_pose_emb, hw),
            Tensor.zeros((g * hw, weights.D)),
        ],
        axis=0,
    )

    for i, block in enumerate(weights.blocks):
        try:
            x = x + pose_add
            xn = layer_norm(x, *block.ln_attn)
            x = x + multi_head_attention(xn, xn, block.attn, weights.heads)
            xn = layer_norm(x, *block.ln_ff)
            ff = matmul(xn, block.ff_w1)
            ff = gelu(ff + expand(block.ff_b1, ff.shape))
            ff = matmul(ff, block.ff_w2)
            x = x + (ff + expand(block.ff_b2, ff.shape))
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite activation in block {i}: {e}") from e

    x = layer_norm(x, *weights.ln_f)
    tgt = narrow(x, 0, 0, t_tgt * hw)
    v = matmul(tgt, weights.out_proj_w)
    v = v + expand(weights.out_proj_b, v.shape)
    v = reshape(v, (t_tgt, hw, C_VAE))
    v = transpose(v, (0, 2, 1))
    return reshape(v, (t_tgt, C_VAE, h, w))


# -- the fine-tuning partition --

_FROZEN_DIT_MARKERS = (".ff.", ".ln_attn.", ".ln_ff.")


def classify_parameter(name: str) -> str:
    """Stage-B trainability by parameter name; raises on unknown names."""
    if name.startswith(("adapter.", "pose.")):
        return "trainable"
    if name.startswith(("vae.", "lrm.")):
        return "frozen"
    if name.startswith("dit."):
        if name.startswith(("dit.in_proj.", "dit.out_proj.")):
            return "trainable"
        if ".attn." in name:
            return "trainable"
        if any(m in name for m in _FROZEN_DIT_MARKERS) or name.startswith(
            ("dit.ln_f.", "dit.emb.", "dit.tmlp.")
        ):
            return "frozen"
    raise ValueError(f"unclassified parameter {name!r}")


def trainable_partition(params: ParameterSet) -> tuple[list[Parameter], list[Parameter]]:
    """Split every parameter into (trainable, frozen) per the fine-tuning scheme.

    Adapters and pose MLPs are always trainable; the frozen encoders never
    are; within the denoiser only the projectors and self-attention weights
    train. Every parameter lands in exactly one side.
    """
    trainable, frozen = [], []
    for p in params:
        side = classify_parameter(p.name)
        (trainable if side == "trainable" else frozen).append(p)
    return trainable, frozen

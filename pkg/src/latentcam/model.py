"""Wiring: frozen encoders + adapter + pose MLPs + denoiser as one model.

`VideoModel.build(config, seed)` constructs every parameter from named RNG
splits in a fixed registration order, which is what makes checkpoints and
reruns bit-reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dit_backbone import DiTWeights, assemble_sequence, build_dit_weights, dit_forward
from .geometry_adapter import AdapterConfig, AdapterWeights, LatentGroups, adapt, build_adapter_weights
from .latent_stack import C_VAE, LatentVideo, LrmEncoder, StateTokenSequence, VaeCodec
from .pose_adapter import build_pose_mlp_weights, source_pose_embed, target_pose_embed
from .rng import Rng
from .scene_synth import Trajectory
from .tensor_engine import ParameterSet, Tensor

__all__ = ["ModelConfig", "VideoModel"]


@dataclass
class ModelConfig:
    D: int = 128  # denoiser width
    B: int = 4  # denoiser blocks
    heads: int = 4
    s: int = 16  # state tokens per frame
    d: int = 64  # state token width
    d_model: int = 64  # adapter decoder width
    adapter_heads: int = 4
    patch: int = 8
    k: int = 4
    m: int = 2
    resolution: tuple[int, int] = (32, 32)
    max_frames: int = 16
    seed: int = 0

    @property
    def c(self) -> int:
        if C_VAE % self.m != 0:
            raise ValueError(f"m={self.m} does not divide the VAE channel count {C_VAE}")
        return C_VAE // self.m

    @property
    def latent_hw(self) -> tuple[int, int]:
        w, h = self.resolution
        if h % self.patch or w % self.patch:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["resolution"] = tuple(d.get("resolution", (32, 32)))
        return cls(**d)


class VideoModel:
    def __init__(self, config: ModelConfig, params: ParameterSet, vae: VaeCodec,
                 lrm: LrmEncoder, adapter: AdapterWeights, pose_src, pose_tgt,
                 dit: DiTWeights):
        self.config = config
        self.params = params
        self.vae = vae
        self.lrm = lrm
        self.adapter = adapter
        self.pose_src = pose_src
        self.pose_tgt = pose_tgt
        self.dit = dit

    @classmethod
    def build(cls, config: ModelConfig, seed: int | None = None) -> "VideoModel":
        seed = config.seed if seed is None else seed
        params = ParameterSet()
        rng = Rng(seed).split("init")
        h, w = config.latent_hw
        vae = VaeCodec(patch=config.patch, seed=seed, params=params)
        lrm = LrmEncoder(s=config.s, d=config.d, seed=seed, params=params)
        acfg = AdapterConfig(k=config.k, m=config.m, c=config.c,
                             heads=config.adapter_heads, d_model=config.d_model)
        adapter = build_adapter_weights(acfg, config.d, h, w, params, rng.split("adapter"))
        pose_src = build_pose_mlp_weights("source", config.D, params, rng.split("pose_src"))
        pose_tgt = build_pose_mlp_weights("target", config.D, params, rng.split("pose_tgt"))
        dit = build_dit_weights(config.D, config.B, config.heads, h, w,
                                config.max_frames, params, rng.split("dit"))
        return cls(config, params, vae, lrm, adapter, pose_src, pose_tgt, dit)

    # -- conditioning pathways --

    def geometry_groups(self, tokens: StateTokenSequence, zero: bool = False) -> LatentGroups:
        if zero:
            g = self.adapter.config.groups_for(tokens.T)
            h, w = self.config.latent_hw
            return LatentGroups(groups=Tensor.zeros((g, C_VAE, h, w)))
        return adapt(tokens, self.adapter)

    def pose_embeddings(self, src_traj: Trajectory, tgt_traj: Trajectory, zero: bool = False):
        if zero:
            return (
                Tensor.zeros((len(src_traj), self.config.D)),
                Tensor.zeros((len(tgt_traj), self.config.D)),
            )
        ref = src_traj.poses[0]
        return (
            source_pose_embed(src_traj, self.pose_src, ref),
            target_pose_embed(tgt_traj, self.pose_tgt, ref),
        )

    def velocity(
        self,
        z_t: Tensor,
        t: float,
        source_latents: LatentVideo,
        tokens: StateTokenSequence,
        src_traj: Trajectory,
        tgt_traj: Trajectory,
        zero_geometry: bool = False,
        zero_pose: bool = False,
    ) -> Tensor:
        geometry = self.geometry_groups(tokens, zero=zero_geometry)
        src_emb, tgt_emb = self.pose_embeddings(src_traj, tgt_traj, zero=zero_pose)
        seq = assemble_sequence(z_t, source_latents, geometry, self.dit)
        return dit_forward(seq, t, src_emb, tgt_emb, self.dit)

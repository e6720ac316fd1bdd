"""Frozen stand-ins for the two pretrained encoders the pipeline assumes.

VaeCodec maps each non-overlapping p x p x 3 patch through a fixed seeded
row-orthonormal 16 x (3 p^2) matrix; decoding applies the transpose
(least-norm reconstruction). The first three rows span the per-channel DC
components so smooth content survives the projection; the rest are a
random orthonormal completion.

LrmEncoder is the oracle-fed recurrent state: per frame it embeds
(downsampled pixels, downsampled log-depth, the 12-value pose) through a
fixed linear map, adds the result into a persistent token state, and
RMS-renormalizes each token. Tokens at frame t depend on frames 0..t only.

Both encoders' parameters live in group="frozen" and are generated from a
named seed; there are no external weight files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .scene_synth import Trajectory, VideoClip
from .tensor_engine import ParameterSet, ShapeError, Tensor

__all__ = [
    "LatentVideo",
    "StateTokenSequence",
    "VaeCodec",
    "LrmEncoder",
    "vae_encode",
    "vae_decode",
    "lrm_encode",
    "C_VAE",
]

C_VAE = 16  # latent channel count, fixed to match the merge constraint m*c == 16
LRM_POOL = 8  # frames and log-depth are average-pooled to LRM_POOL^2 before embedding
DEPTH_CAP = 1e4  # sky sentinel clamp before log


@dataclass
class LatentVideo:
    latents: Tensor  # (T, 16, h, w)
    source_clip_id: str = ""

    def __post_init__(self):
        if self.latents.shape[1] != C_VAE:
            raise ShapeError(f"latent channel extent must be {C_VAE}, got {self.latents.shape[1]}")


@dataclass
class StateTokenSequence:
    tokens: Tensor  # (T, s, d)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def s(self) -> int:
        return self.tokens.shape[1]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]


class VaeCodec:
    """Deterministic per-frame patch projector with orthonormal rows.

    The 16 rows are the leading principal directions of patches drawn from
    a seeded calibration set rendered at construction time: the desk-scale
    analogue of "pretrained" for a linear codec, and the L2-optimal choice
    of frozen subspace. The matrix is a pure function of (patch, seed).
    """

    CALIBRATION_SCENES = 6
    CALIBRATION_FRAMES = 4

    def __init__(self, patch: int = 8, seed: int = 0, params: ParameterSet | None = None):
        self.patch = int(patch)
        self.seed = int(seed)
        dim = 3 * patch * patch
        if C_VAE > dim:
            raise ValueError(f"patch {patch} too small for {C_VAE} latent channels")
        self.enc = self._calibrate()
        if params is not None:
            params.add("vae.enc", self.enc, "frozen")
            self.enc = params["vae.enc"].data

    def _calibrate(self) -> np.ndarray:
        from .scene_synth import Intrinsics, make_scene, make_trajectory, render_clip

        rng = Rng(self.seed).split("vae-calibration")
        side = self.patch * 4
        intr = Intrinsics.default((side, side))
        chunks = []
        for i in range(self.CALIBRATION_SCENES):
            scene_seed = int(rng.split(f"scene{i}").integers(0, 2**62))
            scene = make_scene(scene_seed, n_objects=4, dynamic=(i % 2 == 0))
            for kind in ("orbit", "smooth_random"):
                traj_seed = int(rng.split(f"traj{i}/{kind}").integers(0, 2**62))
                traj = make_trajectory(traj_seed, kind, self.CALIBRATION_FRAMES, intr)
                clip = render_clip(scene, traj)
                chunks.append(self._split_patches(clip.frames.data)[0].reshape(-1, 3 * self.patch**2))
        x = np.concatenate(chunks)
        # no mean subtraction: encode must stay linear (zero frame -> zero latent)
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        basis = vt[:C_VAE]
        # canonical signs: largest-magnitude component of each row is positive
        flips = np.sign(basis[np.arange(C_VAE), np.argmax(np.abs(basis), axis=1)])
        return np.ascontiguousarray(basis * flips[:, None])

    def _split_patches(self, frames: np.ndarray) -> tuple[np.ndarray, int, int]:
        T, C, H, W = frames.shape
        p = self.patch
        if H % p or W % p:
            raise ShapeError(f"frame size {H}x{W} not divisible by patch {p}")
        h, w = H // p, W // p
        x = frames.reshape(T, C, h, p, w, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)  # (T,h,w,C,p,p): channel-major patch layout
        return x.reshape(T, h * w, C * p * p), h, w

    def encode(self, frames: np.ndarray) -> np.ndarray:
        patches, h, w = self._split_patches(frames)
        lat = patches @ self.enc.T  # (T, hw, 16)
        T = lat.shape[0]
        return np.ascontiguousarray(lat.transpose(0, 2, 1).reshape(T, C_VAE, h, w))

    def decode(self, latents: np.ndarray, clamp: bool = True) -> np.ndarray:
        T, C, h, w = latents.shape
        if C != C_VAE:
            raise ShapeError(f"expected {C_VAE} latent channels, got {C}")
        p = self.patch
        lat = latents.reshape(T, C, h * w).transpose(0, 2, 1)
        patches = lat @ self.enc  # least-norm pseudo-inverse: E^T
        x = patches.reshape(T, h, w, 3, p, p).transpose(0, 3, 1, 4, 2, 5)
        frames = np.ascontiguousarray(x.reshape(T, 3, h * p, w * p))
        if clamp:
            frames = np.clip(frames, 0.0, 1.0)
        return frames

    @property
    def latent_hw(self):
        return lambda H, W: (H // self.patch, W // self.patch)


def vae_encode(codec: VaeCodec, clip: VideoClip, clip_id: str = "") -> LatentVideo:
    return LatentVideo(latents=Tensor(codec.encode(clip.frames.data)), source_clip_id=clip_id)


def vae_decode(codec: VaeCodec, latents: LatentVideo | Tensor, clamp: bool = True) -> Tensor:
    arr = latents.latents.data if isinstance(latents, LatentVideo) else latents.data
    return Tensor(codec.decode(arr, clamp=clamp))


class LrmEncoder:
    """Oracle-fed recurrent state-token encoder (frozen)."""

    def __init__(self, s: int = 16, d: int = 64, seed: int = 0, params: ParameterSet | None = None):
        self.s = int(s)
        self.d = int(d)
        self.seed = int(seed)
        rng = Rng(seed).split("lrm")
        pool = LRM_POOL
        in_dim = 3 * pool * pool + pool * pool + 12
        e = d
        self.phi = rng.split("phi").normal((e, in_dim), scale=1.0 / np.sqrt(in_dim))
        self.update = rng.split("update").normal((s * d, e), scale=1.0 / np.sqrt(e))
        init = rng.split("state").normal((s, d))
        init /= np.sqrt(np.mean(init * init, axis=1, keepdims=True))
        self.init_state = init
        if params is not None:
            params.add("lrm.phi", self.phi, "frozen")
            params.add("lrm.update", self.update, "frozen")
            params.add("lrm.init_state", self.init_state, "frozen")
            self.phi = params["lrm.phi"].data
            self.update = params["lrm.update"].data
            self.init_state = params["lrm.init_state"].data


def _block_pool(img: np.ndarray, out_side: int) -> np.ndarray:
    """Average-pool (C,H,W) down to (C, out_side, out_side)."""
    C, H, W = img.shape
    if H % out_side or W % out_side:
        raise ShapeError(f"cannot pool {H}x{W} to {out_side}x{out_side} with integer blocks")
    fh, fw = H // out_side, W // out_side
    return img.reshape(C, out_side, fh, out_side, fw).mean(axis=(2, 4))


def lrm_encode(encoder: LrmEncoder, clip: VideoClip, depth: Tensor | None = None,
               poses: Trajectory | None = None) -> StateTokenSequence:
    """Recurrent state update over frames; causal by construction."""
    depth = clip.depth if depth is None else depth
    poses = clip.trajectory if poses is None else poses
    T = clip.frames.shape[0]
    if depth.shape[0] != T or len(poses) != T:
        raise ShapeError(
            f"clip/depth/pose lengths differ: {T} vs {depth.shape[0]} vs {len(poses)}"
        )
    frames = clip.frames.data
    depths = depth.data
    state = encoder.init_state.copy()
    out = np.empty((T, encoder.s, encoder.d))
    for t in range(T):
        fx = _block_pool(frames[t], LRM_POOL).reshape(-1)
        dlog = np.log(np.clip(depths[t], 1e-6, DEPTH_CAP))
        dx = _block_pool(dlog, LRM_POOL).reshape(-1)
        pose = poses.poses[t]
        pv = np.concatenate([pose.rotation.reshape(-1), pose.translation])
        feats = np.concatenate([fx, dx, pv])
        delta = (encoder.update @ (encoder.phi @ feats)).reshape(encoder.s, encoder.d)
        state = state + delta
        rms = np.sqrt(np.mean(state * state, axis=1, keepdims=True))
        if np.any(rms == 0.0):
            raise ValueError("degenerate all-zero state token; encoder weights corrupt")
        state = state / rms
        out[t] = state
    return StateTokenSequence(tokens=Tensor(out))

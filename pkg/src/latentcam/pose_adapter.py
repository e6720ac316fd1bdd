"""Camera-pose conditioning: 12-value relative extrinsics through small MLPs.

Poses are flattened [row-major 3x3 rotation | translation] expressed
relative to a reference pose — the source trajectory's first frame for
both the source and target pathways, so target paths live in the source's
coordinate system. Two independent two-layer MLPs (source / target) map
each 12-vector to a denoiser-width embedding that is ADDED to the matching
segment's tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .scene_synth import CameraPose, Trajectory
from .tensor_engine import ParameterSet, Tensor, expand, matmul, tanh

__all__ = [
    "POSE_DIM",
    "PoseMlpWeights",
    "build_pose_mlp_weights",
    "encode_pose",
    "encode_trajectory",
    "pose_embed",
    "source_pose_embed",
    "target_pose_embed",
]

POSE_DIM = 12
_IDENTITY_VECTOR = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0, 0, 0, 0])


@dataclass
class PoseMlpWeights:
    w1: Tensor  # (12, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, D)
    b2: Tensor


def build_pose_mlp_weights(name: str, out_dim: int, params: ParameterSet, rng: Rng,
                           hidden: int | None = None) -> PoseMlpWeights:
    hidden = 4 * out_dim if hidden is None else hidden
    scale = 0.02
    return PoseMlpWeights(
        w1=params.add(f"pose.{name}.w1", rng.split("w1").normal((POSE_DIM, hidden), scale), "pose").tensor,
        b1=params.add(f"pose.{name}.b1", np.zeros(hidden), "pose").tensor,
        w2=params.add(f"pose.{name}.w2", rng.split("w2").normal((hidden, out_dim), scale), "pose").tensor,
        b2=params.add(f"pose.{name}.b2", np.zeros(out_dim), "pose").tensor,
    )


def encode_pose(pose: CameraPose, reference: CameraPose) -> np.ndarray:
    """reference^-1 o pose, flattened to 12 values.

    Bitwise-identical (pose, reference) pairs short-circuit to the exact
    identity vector, so the reference frame always encodes to [I | 0].
    """
    if pose.equals(reference):
        return _IDENTITY_VECTOR.copy()
    r_rel = reference.rotation.T @ pose.rotation
    t_rel = reference.rotation.T @ (pose.translation - reference.translation)
    return np.concatenate([r_rel.reshape(-1), t_rel])


def encode_trajectory(poses: Trajectory, reference: CameraPose) -> np.ndarray:
    return np.stack([encode_pose(p, reference) for p in poses.poses])


def pose_embed(poses: Trajectory, weights: PoseMlpWeights, reference: CameraPose) -> Tensor:
    """One embedding row per frame; row i depends on pose i (and the reference) only."""
    vecs = Tensor(encode_trajectory(poses, reference))
    h = matmul(vecs, weights.w1)
    h = tanh(h + expand(weights.b1, h.shape))
    out = matmul(h, weights.w2)
    return out + expand(weights.b2, out.shape)


def source_pose_embed(poses: Trajectory, weights: PoseMlpWeights,
                      reference: CameraPose | None = None) -> Tensor:
    """Source pathway; the reference defaults to the trajectory's own first frame."""
    return pose_embed(poses, weights, poses.poses[0] if reference is None else reference)


def target_pose_embed(poses: Trajectory, weights: PoseMlpWeights,
                      reference: CameraPose) -> Tensor:
    """Target pathway; the reference must be the source trajectory's first frame."""
    return pose_embed(poses, weights, reference)

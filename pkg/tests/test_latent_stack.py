import numpy as np
import pytest

from latentcam import latent_stack as ls
from latentcam.latent_stack import LrmEncoder, VaeCodec, lrm_encode, vae_decode, vae_encode
from latentcam.scene_synth import (
    Intrinsics,
    Trajectory,
    VideoClip,
    make_scene,
    make_trajectory,
    render_clip,
)
from latentcam.tensor_engine import ShapeError, Tensor

INTR = Intrinsics.default((32, 32))


def demo_clip(seed=0, T=4, dynamic=False):
    scene = make_scene(seed, n_objects=3, dynamic=dynamic)
    traj = make_trajectory(seed, "smooth_random", T, INTR)
    return scene, render_clip(scene, traj)


class TestVae:
    def test_shape_algebra(self):
        codec = VaeCodec(patch=8, seed=1)
        _, clip = demo_clip()
        lat = vae_encode(codec, clip)
        assert lat.latents.shape == (4, 16, 4, 4)

    def test_zero_clip_zero_latents(self):
        codec = VaeCodec(patch=8, seed=1)
        frames = np.zeros((2, 3, 32, 32))
        assert np.all(codec.encode(frames) == 0.0)

    def test_encoder_rows_orthonormal(self):
        codec = VaeCodec(patch=8, seed=3)
        gram = codec.enc @ codec.enc.T
        assert np.max(np.abs(gram - np.eye(16))) < 1e-12

    def test_projection_idempotence(self):
        codec = VaeCodec(patch=8, seed=2)
        _, clip = demo_clip(seed=5)
        once = codec.encode(clip.frames.data)
        again = codec.encode(codec.decode(once, clamp=False))
        assert np.max(np.abs(again - once)) < 1e-10

    def test_decode_matches_explicit_projector(self):
        codec = VaeCodec(patch=8, seed=4)
        _, clip = demo_clip(seed=6)
        recon = codec.decode(codec.encode(clip.frames.data), clamp=False)
        projector = codec.enc.T @ codec.enc  # (3p^2, 3p^2) orthogonal projection
        patches, h, w = codec._split_patches(clip.frames.data)
        projected = patches @ projector.T
        expected = projected.reshape(-1, h, w, 3, 8, 8).transpose(0, 3, 1, 4, 2, 5).reshape(clip.frames.shape)
        assert np.max(np.abs(recon - expected)) < 1e-12

    def test_zero_latents_decode_to_zero(self):
        codec = VaeCodec(patch=8, seed=1)
        out = codec.decode(np.zeros((1, 16, 4, 4)), clamp=False)
        assert np.all(out == 0.0)

    def test_linearity(self):
        codec = VaeCodec(patch=8, seed=7)
        rng = np.random.default_rng(0)
        x = rng.random((2, 3, 32, 32))
        y = rng.random((2, 3, 32, 32))
        lhs = codec.encode(1.7 * x + 0.3 * y)
        rhs = 1.7 * codec.encode(x) + 0.3 * codec.encode(y)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_divisibility_error(self):
        codec = VaeCodec(patch=8, seed=1)
        with pytest.raises(ShapeError):
            codec.encode(np.zeros((1, 3, 30, 32)))

    def test_roundtrip_psnr_regression_bound(self):
        codec = VaeCodec(patch=8, seed=0)
        worst = np.inf
        for seed in range(4):
            _, clip = demo_clip(seed=seed, T=4)
            recon = codec.decode(codec.encode(clip.frames.data))
            mse = float(np.mean((recon - clip.frames.data) ** 2))
            worst = min(worst, 10.0 * np.log10(1.0 / mse))
        assert worst >= PINNED_VAE_PSNR_DB

    def test_determinism_across_instances(self):
        a = VaeCodec(patch=8, seed=11).enc
        b = VaeCodec(patch=8, seed=11).enc
        assert np.array_equal(a, b)


# Measured 16.33 dB minimum over the seeded held-out fixtures at p=8 (the
# optimal 16-dim linear subspace for this renderer's content; see ledger),
# pinned with a small cushion as a regression bound.
PINNED_VAE_PSNR_DB = 16.0


class TestLrm:
    def test_causality_future_perturbation(self):
        encoder = LrmEncoder(s=8, d=32, seed=1)
        _, clip = demo_clip(seed=2, T=5)
        base = lrm_encode(encoder, clip).tokens.data
        frames = clip.frames.data.copy()
        frames[3] = np.clip(frames[3] + 0.1, 0, 1)
        bumped = VideoClip(frames=Tensor(frames), depth=clip.depth, trajectory=clip.trajectory)
        tokens = lrm_encode(encoder, bumped).tokens.data
        assert np.array_equal(tokens[:3], base[:3])
        assert not np.array_equal(tokens[3:], base[3:])

    def test_identical_prefix_identical_tokens(self):
        encoder = LrmEncoder(s=8, d=32, seed=1)
        _, clip = demo_clip(seed=3, T=6)
        short = VideoClip(
            frames=Tensor(clip.frames.data[:4].copy()),
            depth=Tensor(clip.depth.data[:4].copy(), allow_nonfinite=True),
            trajectory=Trajectory(poses=clip.trajectory.poses[:4], intrinsics=INTR,
                                  kind=clip.trajectory.kind),
        )
        full = lrm_encode(encoder, clip).tokens.data
        pre = lrm_encode(encoder, short).tokens.data
        assert np.array_equal(pre, full[:4])

    def test_token_rms_unit(self):
        encoder = LrmEncoder(seed=2)
        _, clip = demo_clip(seed=4, T=5)
        tokens = lrm_encode(encoder, clip).tokens.data
        rms = np.sqrt(np.mean(tokens * tokens, axis=2))
        assert np.max(np.abs(rms - 1.0)) < 1e-9

    def test_depth_sensitivity(self):
        encoder = LrmEncoder(seed=3)
        scene, clip = demo_clip(seed=7, T=5)
        moved = make_scene(7, n_objects=3, dynamic=False)
        # push one sphere 0.5 units farther from the scene center along depth
        moved.objects[0].center = moved.objects[0].center + np.array([0.0, 0.0, 0.5])
        clip2 = render_clip(moved, clip.trajectory)
        t1 = lrm_encode(encoder, clip).tokens.data
        t2 = lrm_encode(encoder, clip2).tokens.data
        rel = np.linalg.norm(t1 - t2, axis=(1, 2)) / np.linalg.norm(t1, axis=(1, 2))
        assert np.all(rel > 1e-3)

    def test_length_mismatch(self):
        encoder = LrmEncoder(seed=1)
        _, clip = demo_clip(seed=1, T=4)
        bad_depth = Tensor(clip.depth.data[:3].copy(), allow_nonfinite=True)
        with pytest.raises(ShapeError):
            lrm_encode(encoder, clip, depth=bad_depth)

    def test_shapes_and_determinism(self):
        encoder = LrmEncoder(s=16, d=64, seed=5)
        _, clip = demo_clip(seed=8, T=4)
        a = lrm_encode(encoder, clip).tokens.data
        b = lrm_encode(encoder, clip).tokens.data
        assert a.shape == (4, 16, 64)
        assert np.array_equal(a, b)


class TestFrozenRegistration:
    def test_parameters_registered_frozen(self):
        from latentcam.tensor_engine import ParameterSet

        params = ParameterSet()
        VaeCodec(patch=8, seed=1, params=params)
        LrmEncoder(s=4, d=8, seed=1, params=params)
        assert {p.group for p in params} == {"frozen"}
        assert "vae.enc" in params and "lrm.update" in params

"""Quantitative evaluation: alignment, pose errors, PSNR, cycle consistency,
photometric pose fitting, and the adapter ablation runner.

Pose errors follow trajectory-evaluation practice: estimated translations
are aligned to ground truth with a closed-form least-squares similarity
transform first (generated videos carry scale ambiguity); Abs(t) is the
mean aligned per-frame translation error in millimeters, Rel(t)/Rel(R) are
consecutive-frame relative errors (odometry-style) in millimeters/degrees.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .scene_synth import (
    CameraPose,
    Intrinsics,
    Scene,
    Trajectory,
    VideoClip,
    render,
)
from .tensor_engine import ShapeError, Tensor

__all__ = [
    "SimilarityTransform",
    "PoseErrorReport",
    "PsnrReport",
    "DegenerateConfigurationError",
    "umeyama_align",
    "pose_errors",
    "psnr",
    "cycle_consistency",
    "grid_pose_fit",
    "ablation_run",
    "write_report",
    "REPORT_SCHEMA_PATH",
]

REPORT_SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "schemas", "report.schema.json")

PSNR_INF = math.inf  # sentinel for identical inputs (MSE == 0)


class DegenerateConfigurationError(ValueError):
    """Point set does not determine a unique similarity transform."""


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # (3,3), det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("similarity scale must be positive")
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("similarity rotation not orthonormal to 1e-9")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def apply_rotation(self, rotations: np.ndarray) -> np.ndarray:
        return self.rotation @ rotations


def umeyama_align(est_points: np.ndarray, gt_points: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity fit: minimizes sum ||gt - (s R est + t)||^2.

    Centroids, 3x3 cross-covariance, SVD with determinant sign correction,
    scale from the corrected singular-value trace over the source variance.
    """
    est = np.asarray(est_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ShapeError(f"point sets must be (n,3) and matching, got {est.shape} vs {gt.shape}")
    n = est.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 correspondences, got {n}")

    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    de = est - mu_e
    dg = gt - mu_g
    var_e = float(np.mean(np.sum(de * de, axis=1)))
    if var_e < 1e-24:
        raise DegenerateConfigurationError("source points are all coincident")

    cov = dg.T @ de / n
    u, d, vt = np.linalg.svd(cov)
    # colinear points leave the rotation about the line undetermined
    if d[1] <= max(d[0], math.sqrt(var_e)) * 1e-12:
        raise DegenerateConfigurationError("points are colinear; rotation undetermined")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_e)
    if scale <= 0:
        raise DegenerateConfigurationError("non-positive scale; reflection-dominated fit")
    trans = mu_g - scale * rot @ mu_e
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


@dataclass
class PoseErrorReport:
    abs_t_mm: float
    rel_t_mm: float
    rel_r_deg: float
    per_frame_abs_t_mm: list[float] = field(default_factory=list)
    per_frame_rel_t_mm: list[float] = field(default_factory=list)
    per_frame_rel_r_deg: list[float] = field(default_factory=list)

    def __post_init__(self):
        if min(self.abs_t_mm, self.rel_t_mm, self.rel_r_deg) < 0:
            raise ValueError("pose errors cannot be negative")

    def to_dict(self) -> dict:
        return {
            "abs_t_mm": self.abs_t_mm,
            "rel_t_mm": self.rel_t_mm,
            "rel_R_deg": self.rel_r_deg,
            "per_frame": {
                "abs_t_mm": self.per_frame_abs_t_mm,
                "rel_t_mm": self.per_frame_rel_t_mm,
                "rel_R_deg": self.per_frame_rel_r_deg,
            },
        }


def _geodesic_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    # atan2 form: well-conditioned near zero, unlike acos((trace-1)/2)
    m = r_a.T @ r_b
    skew = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = float(np.linalg.norm(skew))
    c = (float(np.trace(m)) - 1.0) / 2.0
    return math.degrees(math.atan2(s, c))


def _poses_of(traj) -> list[CameraPose]:
    # estimated trajectories are allowed to violate Trajectory invariants
    return traj.poses if isinstance(traj, Trajectory) else list(traj)


def pose_errors(est, gt) -> PoseErrorReport:
    """Umeyama-aligned absolute/relative translation and rotation errors.

    Accepts Trajectory objects or plain CameraPose sequences (fitted
    estimates need not satisfy smoothness invariants).
    """
    est_poses, gt_poses = _poses_of(est), _poses_of(gt)
    if len(est_poses) != len(gt_poses):
        raise ValueError(f"trajectory lengths differ: {len(est_poses)} vs {len(gt_poses)}")
    if len(est_poses) < 3:
        raise ValueError("need at least 3 frames for pose evaluation")
    t_est = np.stack([p.translation for p in est_poses])
    t_gt = np.stack([p.translation for p in gt_poses])
    sim = umeyama_align(t_est, t_gt)
    t_hat = sim.apply(t_est)
    r_hat = np.stack([sim.rotation @ p.rotation for p in est_poses])
    r_gt = np.stack([p.rotation for p in gt_poses])

    abs_t = np.linalg.norm(t_hat - t_gt, axis=1) * 1000.0
    dt_hat = np.diff(t_hat, axis=0)
    dt_gt = np.diff(t_gt, axis=0)
    rel_t = np.linalg.norm(dt_hat - dt_gt, axis=1) * 1000.0
    rel_r = [
        _geodesic_deg(r_hat[i].T @ r_hat[i + 1], r_gt[i].T @ r_gt[i + 1])
        for i in range(len(est_poses) - 1)
    ]
    return PoseErrorReport(
        abs_t_mm=float(abs_t.mean()),
        rel_t_mm=float(rel_t.mean()),
        rel_r_deg=float(np.mean(rel_r)),
        per_frame_abs_t_mm=[float(x) for x in abs_t],
        per_frame_rel_t_mm=[float(x) for x in rel_t],
        per_frame_rel_r_deg=[float(x) for x in rel_r],
    )


@dataclass
class PsnrReport:
    per_frame_db: list[float]
    mean_db: float  # mean over finite entries
    n_infinite: int

    def to_dict(self) -> dict:
        return {
            "per_frame_db": [None if math.isinf(v) else v for v in self.per_frame_db],
            "mean_db": None if math.isinf(self.mean_db) else self.mean_db,
            "n_infinite": self.n_infinite,
        }


def psnr(a, b) -> PsnrReport:
    """Peak signal-to-noise in dB per frame for [0,1]-ranged frames.

    Frames with zero MSE score the infinity sentinel and are excluded from
    the mean (reported via n_infinite).
    """
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    per = []
    n_inf = 0
    for i in range(a.shape[0]):
        mse = float(np.mean((a[i] - b[i]) ** 2))
        if mse == 0.0:
            per.append(PSNR_INF)
            n_inf += 1
        else:
            per.append(10.0 * math.log10(1.0 / mse))
    finite = [v for v in per if not math.isinf(v)]
    mean = float(np.mean(finite)) if finite else PSNR_INF
    return PsnrReport(per_frame_db=per, mean_db=mean, n_infinite=n_inf)


def cycle_consistency(frames, trajectory: Trajectory, scene_is_static: bool = True) -> PsnrReport:
    """Mean PSNR over mirrored frame pairs (i, T-1-i) of a palindrome pass."""
    if trajectory.kind != "palindrome":
        raise ValueError(f"cycle consistency needs a palindrome trajectory, got {trajectory.kind!r}")
    if not scene_is_static:
        raise ValueError("cycle consistency is only meaningful for static scenes")
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    T = arr.shape[0]
    if T != len(trajectory):
        raise ValueError("frame count must match trajectory length")
    firsts = arr[: T // 2]
    mirrors = arr[T - 1: T - 1 - T // 2: -1] if T // 2 else arr[:0]
    return psnr(firsts, mirrors)


def _yaw_pitch_pose(init: CameraPose, yaw: float, pitch: float, delta: np.ndarray) -> CameraPose:
    cy, sy = math.cos(yaw), math.sin(yaw)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    right = init.rotation[:, 0]
    cp, sp = math.cos(pitch), math.sin(pitch)
    k = right / np.linalg.norm(right)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    r_pitch = np.eye(3) + sp * kx + (1 - cp) * (kx @ kx)
    rot = r_yaw @ r_pitch @ init.rotation
    # franka-style cleanup: renormalize so CameraPose's 1e-9 invariant holds
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return CameraPose(rotation=rot, translation=init.translation + delta)


def grid_pose_fit(
    frame,
    scene: Scene,
    time: float,
    init: CameraPose,
    intrinsics: Intrinsics,
    radius: float = 0.05,
    steps: int = 4,
    grid_points: int = 7,
    angle_radius: float | None = None,
) -> CameraPose:
    """Photometric pose recovery by per-axis grid refinement.

    Coordinate descent over x/y/z translation plus yaw and pitch, comparing
    the frame against renders of the known scene; each round shrinks the
    search radius 3x around the best candidate. Best-effort contract: always
    returns the best pose found, even for uninformative frames.
    """
    target = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    angle_radius = radius if angle_radius is None else angle_radius

    def cost(params) -> float:
        dx, dy, dz, yaw, pitch = params
        pose = _yaw_pitch_pose(init, yaw, pitch, np.array([dx, dy, dz]))
        rendered, _ = render(scene, pose, intrinsics, time)
        return float(np.mean((rendered.data - target) ** 2))

    best = [0.0, 0.0, 0.0, 0.0, 0.0]
    best_cost = cost(best)
    t_rad, a_rad = radius, angle_radius
    for _ in range(steps):
        for axis in range(5):
            r = t_rad if axis < 3 else a_rad
            center = best[axis]
            for value in np.linspace(center - r, center + r, grid_points):
                cand = list(best)
                cand[axis] = float(value)
                c = cost(cand)
                if c < best_cost:
                    best_cost = c
                    best = cand
        t_rad /= 3.0
        a_rad /= 3.0
    return _yaw_pitch_pose(init, best[3], best[4], np.array(best[:3]))


# -- ablation machinery --

def validate_ablation_grid(grid, T: int, c_vae: int = 16) -> list[tuple[int, int, int]]:
    """Reject invalid (k, m) entries before any training starts."""
    validated = []
    for k, m in grid:
        if c_vae % m != 0:
            raise ValueError(f"grid entry (k={k}, m={m}): m*c={c_vae} has no integral c")
        if T % (m * k) != 0:
            raise ValueError(f"grid entry (k={k}, m={m}) does not divide T={T}")
        validated.append((int(k), int(m), c_vae // m))
    return validated


def ablation_run(
    model_config,
    grid,
    dataset_dir: str,
    stage_a_checkpoint: str,
    *,
    budget_steps: int = 200,
    eval_seeds=(0, 1),
    sample_steps: int = 10,
    train_seed: int = 0,
    out_dir: str | None = None,
    pose_fit_steps: int = 3,
) -> list[dict]:
    """Train stage B per (k, m) from one shared stage A checkpoint and score
    cycle PSNR and pose errors on palindrome generations. One row per config.
    """
    from dataclasses import replace

    from . import fm_trainer
    from .checkpoint import load_checkpoint
    from .latent_stack import lrm_encode, vae_encode
    from .scene_synth import load_clip, load_manifest, make_trajectory, scene_from_spec

    manifest = load_manifest(dataset_dir)
    T = manifest["T"]
    validated = validate_ablation_grid(grid, T)
    ckpt_hash = load_checkpoint(stage_a_checkpoint).header["config_hash"]

    rows = []
    for k, m, c in validated:
        cfg = replace(model_config, k=k, m=m)
        model, _, losses = fm_trainer.train(
            cfg, dataset_dir, "B", steps=budget_steps, seed=train_seed,
            checkpoint_in=stage_a_checkpoint,
        )
        intr = Intrinsics.default(tuple(manifest["resolution"]))
        cycle_vals, abs_t, rel_t, rel_r = [], [], [], []
        per_clip = []
        for seed in eval_seeds:
            scene_entry = manifest["scenes"][seed % len(manifest["scenes"])]
            scene = scene_from_spec(scene_entry["scene"])
            src_dir = os.path.join(dataset_dir, scene_entry["trajectories"][0]["path"])
            src_clip = load_clip(src_dir)
            tgt_traj = make_trajectory(10_000 + seed, "palindrome", T, intr)

            Z_s = vae_encode(model.vae, src_clip)
            S = lrm_encode(model.lrm, src_clip)
            latents = fm_trainer.sample(model, Z_s, S, src_clip.trajectory, tgt_traj,
                                        steps=sample_steps, seed=seed)
            frames = model.vae.decode(latents)
            cyc = cycle_consistency(frames, tgt_traj, scene_is_static=not scene_entry["scene"]["dynamic"])
            cycle_vals.append(cyc.mean_db if not math.isinf(cyc.mean_db) else 99.0)

            fitted = []
            for i in range(T):
                fitted.append(
                    grid_pose_fit(frames[i], scene, float(i), tgt_traj.poses[i], intr,
                                  radius=0.05, steps=pose_fit_steps)
                )
            rep = pose_errors(fitted, tgt_traj)
            abs_t.append(rep.abs_t_mm)
            rel_t.append(rep.rel_t_mm)
            rel_r.append(rep.rel_r_deg)
            per_clip.append({
                "eval_seed": seed,
                "cycle_psnr_db": cycle_vals[-1],
                "abs_t_mm": rep.abs_t_mm,
                "rel_t_mm": rep.rel_t_mm,
                "rel_R_deg": rep.rel_r_deg,
            })
        h, w = model.config.latent_hw
        groups = T // (m * k)
        rows.append({
            "k": k, "m": m, "c": c,
            "cycle_psnr_db": float(np.mean(cycle_vals)),
            "abs_t_mm": float(np.mean(abs_t)),
            "rel_t_mm": float(np.mean(rel_t)),
            "rel_R_deg": float(np.mean(rel_r)),
            "final_loss": float(np.mean(losses[-20:])) if losses else None,
            "dit_tokens": (T + T + groups) * h * w,
            "latent_groups": groups,
            "stage_a_checkpoint_hash": ckpt_hash,
            "per_clip": per_clip,
        })

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_ablation_csv(os.path.join(out_dir, "ablation.csv"), rows)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump({"rows": rows}, fh, indent=1, sort_keys=True)
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "m", "cycle_psnr", "abs_t", "rel_t", "rel_R"])
        for r in rows:
            writer.writerow([r["k"], r["m"], f"{r['cycle_psnr_db']:.4f}",
                             f"{r['abs_t_mm']:.4f}", f"{r['rel_t_mm']:.4f}",
                             f"{r['rel_R_deg']:.6f}"])


def write_report(path, config: dict, *, cycle: PsnrReport | None = None,
                 pose: PoseErrorReport | None = None,
                 psnr_report: PsnrReport | None = None,
                 per_clip: list | None = None) -> None:
    """One JSON document per evaluation run (schema in schemas/report.schema.json)."""
    doc: dict = {"config": config, "per_clip": per_clip or []}
    doc["cycle_psnr"] = cycle.to_dict() if cycle else None
    doc["psnr"] = psnr_report.to_dict() if psnr_report else None
    if pose:
        doc["abs_t_mm"] = pose.abs_t_mm
        doc["rel_t_mm"] = pose.rel_t_mm
        doc["rel_R_deg"] = pose.rel_r_deg
        doc["pose_per_frame"] = pose.to_dict()["per_frame"]
    else:
        doc["abs_t_mm"] = doc["rel_t_mm"] = doc["rel_R_deg"] = None
        doc["pose_per_frame"] = None
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)

"""Procedural posed multi-trajectory video synthesis with ground-truth depth.

Scenes are a handful of (possibly drifting) Lambert-shaded spheres over a
checkered ground plane, rendered by per-pixel ray casting through a pinhole
camera. Everything is a pure function of (scene, pose, intrinsics, time),
which is what makes the downstream geometric-consistency checks exact.

World coordinates are right-handed with +y up; 1 unit = 1 meter. Cameras
use the x-right / y-down / z-forward convention, stored camera-to-world.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor_engine import Tensor, load_tensor, save_tensor

__all__ = [
    "CameraPose",
    "Intrinsics",
    "Trajectory",
    "SceneObject",
    "Scene",
    "VideoClip",
    "look_at",
    "make_scene",
    "make_trajectory",
    "render",
    "render_clip",
    "make_dataset",
    "load_clip",
    "load_trajectory",
    "save_trajectory",
    "load_manifest",
    "scene_from_spec",
    "TRAJECTORY_KINDS",
]

TRAJECTORY_KINDS = ("orbit", "dolly", "smooth_random", "palindrome")

DEPTH_INF = np.inf
SKY_COLOR = np.array([0.55, 0.70, 0.92])
LIGHT_DIR = np.array([-0.35, 0.85, -0.40]) / np.linalg.norm([-0.35, 0.85, -0.40])
AMBIENT = 0.25
SMOOTHNESS_BOUND = 0.5  # max consecutive translation delta, scene units


@dataclass
class CameraPose:
    """Camera-to-world extrinsics: world_point = rotation @ cam_point + translation."""

    rotation: np.ndarray  # (3,3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal to 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("camera rotation must have det +1")

    def equals(self, other: "CameraPose") -> bool:
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass
class Intrinsics:
    focal: float
    principal_point: tuple[float, float]
    resolution: tuple[int, int]  # (W, H)

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal_point
        w, h = self.resolution
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point must lie inside the image")

    @staticmethod
    def default(resolution=(32, 32), fov_deg: float = 55.0) -> "Intrinsics":
        w, h = resolution
        focal = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return Intrinsics(focal=focal, principal_point=(w / 2.0, h / 2.0), resolution=(w, h))


@dataclass
class Trajectory:
    poses: list[CameraPose]
    intrinsics: Intrinsics
    kind: str

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if len(self.poses) < 2:
            raise ValueError("trajectory needs at least 2 poses")
        trans = np.stack([p.translation for p in self.poses])
        deltas = np.linalg.norm(np.diff(trans, axis=0), axis=1)
        if deltas.max() >= SMOOTHNESS_BOUND:
            raise ValueError(
                f"trajectory violates smoothness bound: max step {deltas.max():.3f} >= {SMOOTHNESS_BOUND}"
            )
        if self.kind == "palindrome":
            T = len(self.poses)
            for i in range(T):
                if not self.poses[i].equals(self.poses[T - 1 - i]):
                    raise ValueError(f"palindrome trajectory broken at index {i}")

    def __len__(self) -> int:
        return len(self.poses)

    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])


@dataclass
class SceneObject:
    center: np.ndarray  # (3,) at t=0
    radius: float
    color: np.ndarray  # (3,) in [0,1]
    velocity: np.ndarray  # (3,) per frame

    def center_at(self, time: float) -> np.ndarray:
        return self.center + self.velocity * time


@dataclass
class Scene:
    objects: list[SceneObject]
    ground_height: float
    checker_colors: tuple[np.ndarray, np.ndarray]
    seed: int
    n_objects: int = 0
    dynamic: bool = False

    def __post_init__(self):
        self.n_objects = len(self.objects)
        for obj in self.objects:
            if obj.radius <= 0:
                raise ValueError("sphere radii must be positive")

    def spec(self) -> dict:
        """Compact reconstruction recipe (used by dataset manifests)."""
        return {"seed": self.seed, "n_objects": self.n_objects, "dynamic": self.dynamic}

    def within_bounding_box(self, T: int, half_extent: float = 5.0) -> bool:
        for t in (0, max(0, T - 1)):
            for obj in self.objects:
                c = obj.center_at(t)
                if np.any(np.abs(c) + obj.radius > half_extent):
                    return False
        return True


@dataclass
class VideoClip:
    frames: Tensor  # (T, 3, H, W) in [0,1]
    depth: Tensor  # (T, 1, H, W), +inf marks sky
    trajectory: Trajectory

    def __post_init__(self):
        T = self.frames.shape[0]
        if T != len(self.trajectory):
            raise ValueError("clip length must match trajectory length")
        if self.depth.shape[0] != T:
            raise ValueError("depth length must match frame count")
        f = self.frames.data
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("frame values must lie in [0,1]")

    def __len__(self) -> int:
        return self.frames.shape[0]


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Proper camera-to-world rotation looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    n = np.linalg.norm(x)
    if n < 1e-12:
        # looking straight up/down; pick a stable right vector
        x = np.cross(f, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(f, x)
    r = np.stack([x, y, f], axis=1)
    # re-orthonormalize so the 1e-9 invariant survives accumulated roundoff
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return CameraPose(rotation=r, translation=eye)


def make_scene(seed: int, n_objects: int = 4, dynamic: bool = False) -> Scene:
    """Deterministic sphere-and-plane scene; dynamic scenes drift >=1 sphere."""
    if not (1 <= n_objects <= 16):
        raise ValueError(f"n_objects must be in [1,16], got {n_objects}")
    rng = Rng(seed).split("scene")
    objects = []
    for i in range(n_objects):
        r = rng.split(f"obj{i}")
        center = np.array([
            r.uniform(low=-2.0, high=2.0),
            r.uniform(low=0.4, high=2.2),
            r.uniform(low=-2.0, high=2.0),
        ])
        radius = float(r.uniform(low=0.3, high=0.8))
        color = r.uniform((3,), low=0.15, high=0.95)
        if dynamic:
            velocity = r.normal((3,), scale=0.008)
            if i == 0:
                # guarantee visible motion in at least one object
                velocity = velocity + np.array([0.012, 0.0, 0.009])
        else:
            velocity = np.zeros(3)
        objects.append(SceneObject(center=center, radius=radius, color=color, velocity=velocity))
    checker = (np.array([0.82, 0.82, 0.84]), np.array([0.25, 0.3, 0.32]))
    return Scene(objects=objects, ground_height=0.0, checker_colors=checker, seed=int(seed), dynamic=dynamic)


def scene_from_spec(spec: dict) -> Scene:
    return make_scene(spec["seed"], spec["n_objects"], spec["dynamic"])


def _orbit_pose(theta: float, radius: float, height: float, target: np.ndarray) -> CameraPose:
    eye = np.array([radius * math.cos(theta), height, radius * math.sin(theta)])
    return CameraPose(look_at(eye, target).rotation, eye)


def make_trajectory(seed: int, kind: str, T: int, intrinsics: Intrinsics) -> Trajectory:
    """Smooth seeded camera path of the requested kind, looking at the scene."""
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if T < 2:
        raise ValueError("trajectory length must be >= 2")
    rng = Rng(seed).split(f"traj/{kind}")
    target = np.array([
        rng.uniform(low=-0.4, high=0.4),
        rng.uniform(low=0.6, high=1.2),
        rng.uniform(low=-0.4, high=0.4),
    ])

    if kind == "orbit":
        radius = float(rng.uniform(low=4.0, high=6.0))
        height = float(rng.uniform(low=1.0, high=2.5))
        theta0 = float(rng.uniform(low=0.0, high=2 * math.pi))
        # keep per-step arc length safely under the smoothness bound
        dtheta = min(2 * math.pi / T, 0.35 / radius)
        poses = [_orbit_pose(theta0 + i * dtheta, radius, height, target) for i in range(T)]
    elif kind == "dolly":
        direction = rng.normal((3,))
        direction[1] = abs(direction[1]) * 0.2
        direction /= np.linalg.norm(direction)
        far_dist = float(rng.uniform(low=5.0, high=7.0))
        # keep the per-frame step under the smoothness bound for short clips
        span = min(far_dist - 2.5, 0.4 * (T - 1))
        far = target + direction * far_dist
        near = target + direction * (far_dist - span)
        far[1] = max(far[1], 0.8)
        near[1] = max(near[1], 0.8)
        poses = []
        for i in range(T):
            a = i / (T - 1)
            eye = far * (1 - a) + near * a
            poses.append(look_at(eye, target))
    elif kind == "smooth_random":
        poses = _smooth_random_poses(rng, T, target)
    elif kind == "palindrome":
        half = (T + 1) // 2
        base = _smooth_random_poses(rng, max(half, 2), target)[:half]
        poses = [base[i] if i < half else base[T - 1 - i] for i in range(T)]
    return Trajectory(poses=poses, intrinsics=intrinsics, kind=kind)


def _smooth_random_poses(rng: Rng, T: int, target: np.ndarray) -> list[CameraPose]:
    # random walk on a shell around the target, heavily smoothed
    radius = float(rng.uniform(low=3.5, high=5.5))
    theta = float(rng.uniform(low=0.0, high=2 * math.pi))
    height = float(rng.uniform(low=1.0, high=2.5))
    steps = rng.normal((T, 3), scale=1.0)
    path = np.cumsum(steps, axis=0)
    # moving-average smoothing, then rescale to a gentle arc
    kernel = np.ones(5) / 5.0
    smooth = np.stack([np.convolve(path[:, i], kernel, mode="same") for i in range(3)], axis=1)
    smooth -= smooth[0]
    span = np.abs(smooth).max()
    if span > 1.5:
        smooth *= 1.5 / span
    deltas = np.linalg.norm(np.diff(smooth, axis=0), axis=1)
    peak = deltas.max() if len(deltas) else 0.0
    if peak > 0.3:
        smooth *= 0.3 / peak
    anchor = np.array([radius * math.cos(theta), height, radius * math.sin(theta)])
    poses = []
    for i in range(T):
        eye = anchor + smooth[i]
        eye[1] = max(eye[1], 0.5)
        poses.append(look_at(eye, target))
    return poses


def _pixel_rays(pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """World-space unit-z-normalized ray directions, shape (H, W, 3)."""
    w, h = intr.resolution
    cx, cy = intr.principal_point
    us = (np.arange(w) + 0.5 - cx) / intr.focal
    vs = (np.arange(h) + 0.5 - cy) / intr.focal
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # (H,W,3), z=1
    return dirs_cam @ pose.rotation.T


def render(scene: Scene, pose: CameraPose, intrinsics: Intrinsics, time: float = 0.0):
    """Ray-cast one frame; returns (frame (3,H,W) in [0,1], depth (1,H,W)).

    Depth is distance along the camera z axis; sky pixels carry +inf.
    """
    w, h = intrinsics.resolution
    if w < 8 or h < 8:
        raise ValueError("resolution must be at least 8x8")
    dirs = _pixel_rays(pose, intrinsics)  # z-normalized: depth == ray parameter
    origin = pose.translation

    best_t = np.full((h, w), DEPTH_INF)
    color = np.broadcast_to(SKY_COLOR, (h, w, 3)).copy()
    a = np.einsum("hwc,hwc->hw", dirs, dirs)

    # spheres
    for obj in scene.objects:
        c = obj.center_at(time)
        oc = origin - c
        b = 2.0 * (dirs @ oc)
        cc = float(oc @ oc - obj.radius * obj.radius)
        disc = b * b - 4.0 * a * cc
        hit = disc > 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_hit = (-b - sq) / (2.0 * a)
        hit &= (t_hit > 1e-9) & (t_hit < best_t)
        if not hit.any():
            continue
        pts = origin + dirs * t_hit[..., None]
        normals = (pts - c) / obj.radius
        lam = AMBIENT + (1.0 - AMBIENT) * np.maximum(normals @ LIGHT_DIR, 0.0)
        shade = obj.color[None, None, :] * lam[..., None]
        color = np.where(hit[..., None], shade, color)
        best_t = np.where(hit, t_hit, best_t)

    # ground plane y = ground_height with checker shading
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = (scene.ground_height - origin[1]) / dy
    hit = np.isfinite(t_plane) & (t_plane > 1e-9) & (t_plane < best_t)
    if hit.any():
        pts = origin + dirs * t_plane[..., None]
        parity = (np.floor(pts[..., 0]) + np.floor(pts[..., 2])).astype(np.int64) & 1
        c0, c1 = scene.checker_colors
        checker = np.where(parity[..., None] == 0, c0[None, None, :], c1[None, None, :])
        lam = AMBIENT + (1.0 - AMBIENT) * max(float(LIGHT_DIR[1]), 0.0)
        shade = checker * lam
        color = np.where(hit[..., None], shade, color)
        best_t = np.where(hit, t_plane, best_t)

    frame = np.clip(color.transpose(2, 0, 1), 0.0, 1.0)
    depth = best_t[None, :, :]
    return Tensor(frame), Tensor(depth, allow_nonfinite=True)


def render_clip(scene: Scene, trajectory: Trajectory) -> VideoClip:
    """Frame t is rendered at scene time t under pose t."""
    frames, depths = [], []
    for t, pose in enumerate(trajectory.poses):
        f, d = render(scene, pose, trajectory.intrinsics, time=float(t))
        frames.append(f.data)
        depths.append(d.data)
    return VideoClip(
        frames=Tensor(np.stack(frames)),
        depth=Tensor(np.stack(depths), allow_nonfinite=True),
        trajectory=trajectory,
    )


# -- dataset generation and on-disk layout --

def save_trajectory(path, trajectory: Trajectory) -> None:
    doc = {
        "kind": trajectory.kind,
        "intrinsics": {
            "focal": trajectory.intrinsics.focal,
            "principal_point": list(trajectory.intrinsics.principal_point),
            "resolution": list(trajectory.intrinsics.resolution),
        },
        "frames": [
            {
                "rotation": [float(x) for x in p.rotation.reshape(-1)],
                "translation": [float(x) for x in p.translation],
            }
            for p in trajectory.poses
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_trajectory(path) -> Trajectory:
    with open(path) as fh:
        doc = json.load(fh)
    intr = Intrinsics(
        focal=doc["intrinsics"]["focal"],
        principal_point=tuple(doc["intrinsics"]["principal_point"]),
        resolution=tuple(doc["intrinsics"]["resolution"]),
    )
    poses = [
        CameraPose(
            rotation=np.array(fr["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(fr["translation"], dtype=np.float64),
        )
        for fr in doc["frames"]
    ]
    return Trajectory(poses=poses, intrinsics=intr, kind=doc["kind"])


def load_clip(traj_dir) -> VideoClip:
    traj = load_trajectory(os.path.join(traj_dir, "poses.json"))
    frames = load_tensor(os.path.join(traj_dir, "frames.t64"))
    depth = load_tensor(os.path.join(traj_dir, "depth.t64"))
    return VideoClip(frames=Tensor(frames), depth=Tensor(depth, allow_nonfinite=True), trajectory=traj)


def load_manifest(dataset_dir) -> dict:
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        return json.load(fh)


def make_dataset(
    seed: int,
    n_scenes: int,
    trajectories_per_scene: int,
    T: int,
    resolution,
    out_dir,
    force: bool = False,
    dynamic: bool = False,
    kinds: tuple[str, ...] = ("orbit", "smooth_random"),
    n_objects: int = 4,
) -> dict:
    """Render per-scene clips + depths + poses and write a manifest.

    Training consumers draw unordered source/target pairs per scene, so
    trajectories_per_scene must be at least 2.
    """
    if trajectories_per_scene < 2:
        raise ValueError("need at least 2 trajectories per scene for source/target pairs")
    out_dir = str(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"refusing to overwrite non-empty {out_dir!r} (pass force=True)")
    os.makedirs(out_dir, exist_ok=True)

    intr = Intrinsics.default(tuple(resolution))
    rng = Rng(seed).split("dataset")
    scenes = []
    for s in range(n_scenes):
        scene_seed = int(rng.split(f"scene{s}").integers(0, 2**62))
        scene = make_scene(scene_seed, n_objects=n_objects, dynamic=dynamic)
        scene_dir = os.path.join(out_dir, f"scene_{s}")
        entries = []
        for j in range(trajectories_per_scene):
            kind = kinds[j % len(kinds)]
            traj_seed = int(rng.split(f"scene{s}/traj{j}").integers(0, 2**62))
            traj = make_trajectory(traj_seed, kind, T, intr)
            clip = render_clip(scene, traj)
            traj_dir = os.path.join(scene_dir, f"traj_{j}")
            os.makedirs(traj_dir, exist_ok=True)
            save_tensor(os.path.join(traj_dir, "frames.t64"), clip.frames.data)
            save_tensor(os.path.join(traj_dir, "depth.t64"), clip.depth.data)
            save_trajectory(os.path.join(traj_dir, "poses.json"), traj)
            entries.append({"id": j, "kind": kind, "path": f"scene_{s}/traj_{j}"})
        scenes.append({"id": s, "scene": scene.spec(), "trajectories": entries})

    manifest = {
        "seed": int(seed),
        "T": int(T),
        "resolution": list(resolution),
        "trajectories_per_scene": int(trajectories_per_scene),
        "dynamic": bool(dynamic),
        "n_objects": int(n_objects),
        "scenes": scenes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest

"""Command-line entry point: synth / train / generate / eval / ablate.

Heavy imports happen inside handlers so LATENTCAM_THREADS can cap BLAS
parallelism before numpy loads. Every artifact embeds the config hash.

Exit codes: 2 config validation, 3 I/O failure, 4 missing stage A
checkpoint, 5 shape-incompatible trajectory, 6 layout mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING_STAGE_A = 4
EXIT_BAD_TRAJECTORY = 5
EXIT_LAYOUT = 6


def _apply_thread_cap() -> None:
    cap = os.environ.get("LATENTCAM_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _load_config(args):
    from .config import ConfigError, RunConfig, parse_overrides

    try:
        overrides = parse_overrides(getattr(args, "set", None))
        return RunConfig.load(getattr(args, "config", None), overrides,
                              allow_lr_mismatch=getattr(args, "allow_lr_mismatch", False))
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def cmd_synth(args) -> int:
    from .checkpoint import config_hash
    from .scene_synth import make_dataset

    cfg = _load_config(args)
    d = cfg.data
    try:
        manifest = make_dataset(
            seed=d["seed"], n_scenes=d["n_scenes"],
            trajectories_per_scene=d["trajectories_per_scene"], T=d["T"],
            resolution=d["resolution"], out_dir=args.out, force=args.force,
            dynamic=d["dynamic"], n_objects=d["n_objects"],
        )
        manifest["config_hash"] = config_hash(cfg.to_dict())
        with open(os.path.join(args.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
    except (OSError, FileExistsError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    n_clips = sum(len(s["trajectories"]) for s in manifest["scenes"])
    print(f"dataset: {len(manifest['scenes'])} scenes x {d['trajectories_per_scene']} trajectories "
          f"({n_clips} clips, T={d['T']}, {d['resolution'][0]}x{d['resolution'][1]}) -> {args.out}")
    print(f"config_hash: {manifest['config_hash']}")
    return 0


def cmd_train(args) -> int:
    from . import fm_trainer
    from .checkpoint import config_hash

    cfg = _load_config(args)
    stage = cfg.train["stage"]
    if stage == "B" and not args.checkpoint_in:
        print("stage B requires --checkpoint-in pointing at a stage A checkpoint", file=sys.stderr)
        return EXIT_MISSING_STAGE_A
    if args.checkpoint_in and not os.path.exists(args.checkpoint_in):
        print(f"checkpoint not found: {args.checkpoint_in}", file=sys.stderr)
        return EXIT_MISSING_STAGE_A
    try:
        model, opt, losses = fm_trainer.train(
            cfg.model_config(), args.dataset, stage,
            steps=args.steps if args.steps is not None else cfg.train["steps"],
            seed=cfg.train["seed"],
            lr_other=cfg.train["lr_other"], lr_adapter=cfg.train["lr_adapter"],
            checkpoint_in=args.checkpoint_in, checkpoint_out=args.checkpoint_out,
            log_path=args.log,
            checkpoint_every=cfg.train["checkpoint_every"] or None,
            run_config=cfg.to_dict(),
        )
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_STAGE_A
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    mean_tail = sum(losses[-20:]) / max(1, len(losses[-20:])) if losses else float("nan")
    print(f"stage {stage}: {len(losses)} steps, final-20 mean loss {mean_tail:.6f}")
    print(f"lr_adapter/lr_other = {opt.lr_adapter / opt.lr_other}")
    print(f"config_hash: {config_hash(cfg.to_dict())}")
    return 0


def _write_ppm(path, frames) -> None:
    """Horizontal preview strip, binary P6; deterministic byte-for-byte."""
    import numpy as np

    T, _, H, W = frames.shape
    strip = np.concatenate([frames[i] for i in range(T)], axis=2)  # (3, H, T*W)
    img = np.clip(np.round(strip * 255.0), 0, 255).astype(np.uint8)
    raster = img.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{T * W} {H}\n255\n".encode())
        fh.write(raster)


def cmd_generate(args) -> int:
    from . import fm_trainer
    from .checkpoint import load_checkpoint
    from .latent_stack import lrm_encode, vae_encode
    from .scene_synth import load_clip, load_trajectory
    from .tensor_engine import save_tensor

    try:
        model, ckpt = fm_trainer.model_from_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_MISSING_STAGE_A
    try:
        src_clip = load_clip(args.source)
        tgt_traj = load_trajectory(args.target_poses)
    except (OSError, KeyError, ValueError) as e:
        print(f"layout error: {e}", file=sys.stderr)
        return EXIT_LAYOUT

    cfg = model.config
    problems = []
    if len(tgt_traj) > cfg.max_frames:
        problems.append(f"target length {len(tgt_traj)} exceeds model frame table {cfg.max_frames}")
    src_T = len(src_clip.trajectory)
    if src_T % (cfg.m * cfg.k) != 0:
        problems.append(f"source length {src_T} not divisible by m*k={cfg.m * cfg.k}")
    if tuple(tgt_traj.intrinsics.resolution) != tuple(cfg.resolution):
        problems.append(
            f"target resolution {tgt_traj.intrinsics.resolution} != model resolution {cfg.resolution}"
        )
    if problems:
        for p in problems:
            print(f"incompatible trajectory: {p}", file=sys.stderr)
        return EXIT_BAD_TRAJECTORY

    Z_s = vae_encode(model.vae, src_clip)
    S = lrm_encode(model.lrm, src_clip)
    latents = fm_trainer.sample(
        model, Z_s, S, src_clip.trajectory, tgt_traj,
        steps=args.steps, seed=args.seed, zero_geometry=args.zero_geometry,
    )
    frames = model.vae.decode(latents)

    os.makedirs(args.out, exist_ok=True)
    save_tensor(os.path.join(args.out, "latents.t64"), latents)
    save_tensor(os.path.join(args.out, "frames.t64"), frames)
    _write_ppm(os.path.join(args.out, "preview.ppm"), frames)
    with open(args.target_poses) as fh:
        poses_doc = json.load(fh)
    with open(os.path.join(args.out, "poses.json"), "w") as fh:
        json.dump(poses_doc, fh, indent=1, sort_keys=True)
    metadata = {
        "checkpoint": os.path.abspath(args.checkpoint),
        "checkpoint_hash": ckpt.header["config_hash"],
        "config_hash": ckpt.header["config_hash"],
        "source": os.path.abspath(args.source),
        "sample_seed": args.seed,
        "sample_steps": args.steps,
        "zero_geometry": bool(args.zero_geometry),
        "palindrome": tgt_traj.kind == "palindrome",
        "cycle_eval_ready": tgt_traj.kind == "palindrome",
        "stage": ckpt.stage,
    }
    with open(os.path.join(args.out, "metadata.json"), "w") as fh:
        json.dump(metadata, fh, indent=1, sort_keys=True)
    print(f"generated {frames.shape[0]} frames -> {args.out} "
          f"(palindrome={metadata['palindrome']}, seed={args.seed})")
    return 0


def _read_generated(path):
    from .scene_synth import load_trajectory
    from .tensor_engine import load_tensor

    needed = ["frames.t64", "poses.json", "metadata.json"]
    missing = [n for n in needed if not os.path.exists(os.path.join(path, n))]
    if missing:
        raise FileNotFoundError(f"generated dir {path} missing {missing}")
    frames = load_tensor(os.path.join(path, "frames.t64"))
    traj = load_trajectory(os.path.join(path, "poses.json"))
    with open(os.path.join(path, "metadata.json")) as fh:
        metadata = json.load(fh)
    return frames, traj, metadata


def cmd_eval(args) -> int:
    from . import eval_harness as ev
    from .scene_synth import load_manifest, scene_from_spec
    from .tensor_engine import load_tensor

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, f"report_{args.mode}.json")
    try:
        if args.mode == "psnr":
            frames, traj, metadata = _read_generated(args.generated)
            truth = load_tensor(os.path.join(args.truth, "frames.t64"))
            if truth.shape != frames.shape:
                print(f"layout error: frame shapes differ {truth.shape} vs {frames.shape}",
                      file=sys.stderr)
                return EXIT_LAYOUT
            rep = ev.psnr(frames, truth)
            ev.write_report(report_path, {"mode": "psnr", "config_hash": metadata["config_hash"]},
                            psnr_report=rep)
            _psnr_csv(os.path.join(args.out, "report_psnr.csv"), rep)
            shown = "inf" if rep.n_infinite == len(rep.per_frame_db) else f"{rep.mean_db:.3f}"
            print(f"psnr: mean {shown} dB over {len(rep.per_frame_db)} frames "
                  f"({rep.n_infinite} infinite)")
        elif args.mode == "cycle":
            frames, traj, metadata = _read_generated(args.generated)
            rep = ev.cycle_consistency(frames, traj)
            ev.write_report(report_path, {"mode": "cycle", "config_hash": metadata["config_hash"]},
                            cycle=rep)
            _psnr_csv(os.path.join(args.out, "report_cycle.csv"), rep)
            shown = "inf" if rep.n_infinite == len(rep.per_frame_db) else f"{rep.mean_db:.3f}"
            print(f"cycle consistency: mean {shown} dB over {len(rep.per_frame_db)} mirrored pairs "
                  f"({rep.n_infinite} infinite)")
        elif args.mode == "pose":
            frames, traj, metadata = _read_generated(args.generated)
            manifest = load_manifest(args.truth)
            scene_entry = _find_scene(manifest, args.scene)
            scene = scene_from_spec(scene_entry["scene"])
            intr = traj.intrinsics
            fitted = [
                ev.grid_pose_fit(frames[i], scene, float(i), traj.poses[i], intr,
                                 radius=args.fit_radius, steps=args.fit_steps)
                for i in range(frames.shape[0])
            ]
            rep = ev.pose_errors(fitted, traj)
            ev.write_report(report_path, {"mode": "pose", "config_hash": metadata["config_hash"],
                                          "scene": scene_entry["scene"]}, pose=rep)
            with open(os.path.join(args.out, "report_pose.csv"), "w") as fh:
                fh.write("abs_t_mm,rel_t_mm,rel_R_deg\n")
                fh.write(f"{rep.abs_t_mm:.6f},{rep.rel_t_mm:.6f},{rep.rel_r_deg:.8f}\n")
            print(f"pose errors: Abs(t) {rep.abs_t_mm:.3f} mm, Rel(t) {rep.rel_t_mm:.3f} mm, "
                  f"Rel(R) {rep.rel_r_deg:.5f} deg")
    except FileNotFoundError as e:
        print(f"layout error: {e}", file=sys.stderr)
        return EXIT_LAYOUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LAYOUT
    print(f"report: {report_path}")
    return 0


def _find_scene(manifest, scene_id):
    for entry in manifest["scenes"]:
        if entry["id"] == scene_id:
            return entry
    raise FileNotFoundError(f"scene {scene_id} not in manifest")


def _psnr_csv(path, rep) -> None:
    with open(path, "w") as fh:
        fh.write("frame,psnr_db\n")
        for i, v in enumerate(rep.per_frame_db):
            fh.write(f"{i},{'' if v != v or v == float('inf') else f'{v:.4f}'}\n")


DEFAULT_GRID = [[1, 8], [2, 4], [4, 2], [8, 1]]


def cmd_ablate(args) -> int:
    from . import eval_harness as ev

    cfg = _load_config(args)
    if args.grid:
        try:
            with open(args.grid) as fh:
                grid = [tuple(row) for row in json.load(fh)]
        except (OSError, json.JSONDecodeError) as e:
            print(f"grid error: {e}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        grid = [tuple(row) for row in DEFAULT_GRID]
    try:
        ev.validate_ablation_grid(grid, cfg.data["T"])
    except ValueError as e:
        print(f"invalid grid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if not os.path.exists(args.stage_a):
        print(f"stage A checkpoint not found: {args.stage_a}", file=sys.stderr)
        return EXIT_MISSING_STAGE_A
    rows = ev.ablation_run(
        cfg.model_config(), grid, args.dataset, args.stage_a,
        budget_steps=args.budget, train_seed=cfg.train["seed"], out_dir=args.out,
        sample_steps=cfg.sample["steps"],
    )
    print(f"{'k':>3} {'m':>3} {'cycle_psnr':>11} {'abs_t':>9} {'rel_t':>9} {'rel_R':>9}")
    for r in rows:
        print(f"{r['k']:>3} {r['m']:>3} {r['cycle_psnr_db']:>11.3f} {r['abs_t_mm']:>9.3f} "
              f"{r['rel_t_mm']:>9.3f} {r['rel_R_deg']:>9.5f}")
    print(f"wrote {os.path.join(args.out, 'ablation.csv')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentcam",
        description="Desk-scale novel-trajectory video synthesis with geometry-latent conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value by dot path")
        p.add_argument("--allow-lr-mismatch", action="store_true",
                       help="permit lr_adapter != 3*lr_other (warns)")

    p = sub.add_parser("synth", help="generate a posed synthetic dataset")
    add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty out dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint-in", dest="checkpoint_in")
    p.add_argument("--checkpoint-out", dest="checkpoint_out", required=True)
    p.add_argument("--log", help="ndjson training log path")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="synthesize a novel trajectory from a source clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="trajectory dir with frames/depth/poses")
    p.add_argument("--target-poses", dest="target_poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-geometry", action="store_true",
                   help="ablation: replace geometry latents with zeros")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generated output")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True,
                   help="trajectory dir (psnr) or dataset root (pose); unused for cycle")
    p.add_argument("--mode", choices=["pose", "cycle", "psnr"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", type=int, default=0, help="scene id for pose mode")
    p.add_argument("--fit-radius", type=float, default=0.05)
    p.add_argument("--fit-steps", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="adapter (k,m) ablation sweep")
    add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage-a", dest="stage_a", required=True, help="shared stage A checkpoint")
    p.add_argument("--grid", help="JSON file: list of [k, m] rows (default: the standard grid)")
    p.add_argument("--budget", type=int, default=200, help="stage B steps per grid entry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

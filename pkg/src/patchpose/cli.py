"""Command-line entry points: onboard, estimate, synth, eval.

Exit codes: 0 success, 1 completed with degraded instances (fallback poses
used), 2 structural error (bad paths, schema mismatches, build failures).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .metrics import average_recall, mspd, mssd
from .onboard import DirectorySource, OracleSource, load_db, save_db
from .pipeline import (
    RunConfig,
    estimate_dataset,
    onboard_object,
    read_result_csv,
    write_manifest,
    write_result_csv,
)
from .render import load_mesh, sample_surface
from .scenes import DEFAULT_SCENE_CAMERA, NoiseSpec, load_dataset, write_synth_dataset

EXIT_OK = 0
EXIT_DEGRADED = 1
EXIT_ERROR = 2


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--alpha", type=float, help="viewpoint spacing, degrees")
    p.add_argument("--delta", type=float, help="in-plane roll step, degrees")
    p.add_argument("--pca", dest="d_pca", type=int, help="PCA dimension")
    p.add_argument("--gamma", type=float, help="coverage/similarity trade-off")
    p.add_argument("--topk", dest="top_k", type=int, help="templates kept per instance")
    p.add_argument("--iters", dest="ransac_iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--d-px", dest="d_px", type=float, help="template apparent size")
    p.add_argument("--oracle-dim", dest="oracle_dim", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--patch-depth", dest="patch_depth", choices=["center", "median"])
    p.add_argument(
        "--strict-eq2",
        dest="strict_eq2",
        action="store_const",
        const=True,
        help="uncentered PCA projection",
    )


def _resolve_config(args) -> RunConfig:
    keys = (
        "alpha delta d_pca gamma top_k ransac_iterations seed jobs d_px "
        "oracle_dim image_size patch_size patch_depth strict_eq2"
    ).split()
    overrides = {k: getattr(args, k, None) for k in keys}
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_onboard(args) -> int:
    cfg = _resolve_config(args)
    mesh_path = Path(args.mesh)
    if not mesh_path.exists():
        print(f"error: mesh not found: {mesh_path}", file=sys.stderr)
        return EXIT_ERROR
    mesh = load_mesh(mesh_path, scale=args.scale)
    if args.descr_dir:
        source = DirectorySource(args.descr_dir)
    else:
        source = OracleSource(dim=cfg.oracle_dim, seed=cfg.seed)
    t0 = time.perf_counter()
    db = onboard_object(mesh, cfg, source, object_id=args.object_id)
    elapsed = time.perf_counter() - t0
    save_db(db, args.out)
    total = sum(len(e.descriptors) for e in db.entries)
    print(f"views: {db.n_views}  patches: {total}  elapsed: {elapsed:.1f}s")
    if args.time_budget and elapsed > args.time_budget:
        print(
            f"warning: onboarding took {elapsed:.1f}s, over the "
            f"{args.time_budget:.0f}s budget",
            file=sys.stderr,
        )
    write_manifest(
        str(args.out) + ".manifest.json",
        "onboard",
        cfg,
        {"mesh": mesh_path},
        {"outputs": [str(args.out)], "elapsed_s": elapsed},
    )
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(args.scenes)
    db = load_db(args.db)
    obj_ids = sorted({i.obj_id for im in dataset.images for i in im.instances})
    target = args.obj_id if args.obj_id is not None else (obj_ids[0] if obj_ids else None)
    if target is None:
        print("error: dataset has no instances", file=sys.stderr)
        return EXIT_ERROR
    results = estimate_dataset(
        {target: db},
        dataset,
        cfg,
        oracle=args.oracle,
        descriptor_dir=args.descr_dir,
    )
    write_result_csv(results, args.out)
    sidecar = Path(str(args.out) + ".diagnostics.jsonl")
    degraded = 0
    with open(sidecar, "w") as fh:
        for r in results:
            d = r.diagnostics
            degraded += int(d.fallback)
            fh.write(
                json.dumps(
                    {
                        "scene_id": r.scene_id,
                        "im_id": r.im_id,
                        "obj_id": r.obj_id,
                        "fallback": d.fallback,
                        "reason": d.reason,
                        "template": d.template_index,
                        "wae": None if d.wae == float("inf") else d.wae,
                        "inliers": d.inliers,
                        "error": r.error,
                        "time_s": r.time_s,
                    }
                )
                + "\n"
            )
    write_manifest(
        str(args.out) + ".manifest.json",
        "estimate",
        cfg,
        {"db": args.db},
        {"outputs": [str(args.out), str(sidecar)], "instances": len(results),
         "fallbacks": degraded},
    )
    print(f"instances: {len(results)}  fallbacks: {degraded}  -> {args.out}")
    return EXIT_DEGRADED if degraded else EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    mesh_path = Path(args.mesh)
    if not mesh_path.exists():
        print(f"error: mesh not found: {mesh_path}", file=sys.stderr)
        return EXIT_ERROR
    mesh = load_mesh(mesh_path, scale=args.scale)
    noise = NoiseSpec(
        depth_sigma=args.depth_sigma,
        mask_erode=args.mask_erode,
        occluder_fraction=args.occluder,
    )
    root = write_synth_dataset(
        args.out,
        mesh,
        args.n,
        obj_id=args.obj_id if args.obj_id is not None else 1,
        K=DEFAULT_SCENE_CAMERA,
        seed=cfg.seed,
        noise=noise,
    )
    write_manifest(
        Path(root) / "manifest.json", "synth", cfg, {"mesh": mesh_path},
        {"n_scenes": args.n, "noise": vars(noise) if hasattr(noise, "__dict__") else {
            "depth_sigma": noise.depth_sigma,
            "mask_erode": noise.mask_erode,
            "occluder_fraction": noise.occluder_fraction,
        }},
    )
    print(f"wrote {args.n} scenes to {root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(args.scenes)
    rows = read_result_csv(args.results)
    gt_index = {}
    for image in dataset.images:
        for inst in image.instances:
            gt_index[(image.scene_id, image.im_id, inst.obj_id)] = (image, inst)
    samples = {}
    syms = {}
    records = []
    for row in rows:
        key = (row["scene_id"], row["im_id"], row["obj_id"])
        if key not in gt_index:
            print(f"warning: no ground truth for {key}", file=sys.stderr)
            continue
        image, inst = gt_index[key]
        obj = row["obj_id"]
        if obj not in samples:
            mesh = dataset.load_model(obj)
            samples[obj] = sample_surface(mesh, cfg.model_sample_size, seed=cfg.seed)
            syms[obj] = dataset.symmetries(obj, step_deg=cfg.sym_step_deg)
        records.append(
            {
                "scene_id": row["scene_id"],
                "im_id": row["im_id"],
                "obj_id": obj,
                "mssd": mssd(row["pose"], inst.gt_pose, samples[obj], syms[obj]),
                "mspd": mspd(row["pose"], inst.gt_pose, samples[obj], syms[obj], image.K),
                "diameter": dataset.diameter(obj),
                "image_width": image.K.width,
            }
        )
    if not records:
        print("error: no result rows matched the ground truth", file=sys.stderr)
        return EXIT_ERROR
    report = average_recall(records)
    print(report.table())
    if args.out_csv:
        report.write_csv(args.out_csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchpose",
        description="Template-matching 6D pose estimation and benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("onboard", help="build a template database from a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="output .g6db path")
    p.add_argument("--object-id", default="object")
    p.add_argument("--scale", type=float, default=1.0, help="mesh unit scale (0.001 for mm)")
    p.add_argument("--oracle", action="store_true", help="use oracle descriptors (default)")
    p.add_argument("--descr-dir", help="directory of per-view G6DR files")
    p.add_argument("--time-budget", type=float, help="soft onboarding budget, seconds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_onboard)

    p = sub.add_parser("estimate", help="estimate poses for a scene directory")
    p.add_argument("--db", required=True)
    p.add_argument("--scenes", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="output result CSV")
    p.add_argument("--obj-id", type=int, help="object id to estimate (default: first)")
    p.add_argument("--oracle", action="store_true", help="closed-loop oracle descriptors")
    p.add_argument("--descr-dir", help="directory of per-instance G6DR files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--obj-id", type=int)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--depth-sigma", type=float, default=0.0, help="depth noise, meters")
    p.add_argument("--mask-erode", type=int, default=0)
    p.add_argument("--occluder", type=float, default=0.0, help="mask fraction removed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a result CSV against dataset ground truth")
    p.add_argument("--scenes", required=True, help="dataset root with ground truth")
    p.add_argument("--results", required=True, help="result CSV from 'estimate'")
    p.add_argument("--out-csv", help="write per-instance errors here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Desk-scale benchmark: onboard a synthetic object, estimate 6D poses on
generated scenes, and report BOP-style recall.

Runs the full pipeline through the CLI surfaces (onboard / synth /
estimate / eval), so it doubles as an end-to-end smoke test:

    python scripts/run_synthetic_benchmark.py --out /tmp/bench --n 25
    python scripts/run_synthetic_benchmark.py --noise --occlusion 0.3
"""

import argparse
import sys
import time
from pathlib import Path

from patchpose.cli import main as cli_main
from patchpose.render import bumpy_sphere_mesh, save_mesh_ply


def run(cmd):
    print("+ patchpose " + " ".join(cmd))
    code = cli_main(cmd)
    if code not in (0, 1):
        sys.exit(code)
    return code


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="/tmp/patchpose-bench")
    ap.add_argument("--n", type=int, default=25, help="number of scenes")
    ap.add_argument("--alpha", type=float, default=30.0)
    ap.add_argument("--pca", type=int, default=128)
    ap.add_argument("--oracle-dim", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", action="store_true", help="2 mm depth noise")
    ap.add_argument("--occlusion", type=float, default=0.0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / "object.ply"
    save_mesh_ply(bumpy_sphere_mesh(0.1, 48, 64, bump=0.12, seed=5), mesh_path)

    common = [
        "--alpha", str(args.alpha), "--pca", str(args.pca),
        "--oracle-dim", str(args.oracle_dim), "--seed", str(args.seed),
    ]
    db = out / "object.g6db"
    t0 = time.perf_counter()
    run(["onboard", "--mesh", str(mesh_path), "--out", str(db), "--oracle",
         "--time-budget", "300"] + common)
    print(f"onboarding: {time.perf_counter() - t0:.1f}s")

    ds = out / "dataset"
    synth = ["synth", "--mesh", str(mesh_path), "--out", str(ds), "--n", str(args.n)]
    if args.noise:
        synth += ["--depth-sigma", "0.002"]
    if args.occlusion > 0:
        synth += ["--occluder", str(args.occlusion)]
    run(synth + common)

    results = out / "results.csv"
    t0 = time.perf_counter()
    code = run(["estimate", "--db", str(db), "--scenes", str(ds),
                "--out", str(results), "--oracle"] + common)
    dt = time.perf_counter() - t0
    print(f"estimation: {dt:.1f}s total, {dt / args.n:.2f}s/scene"
          + ("  (some instances used the fallback)" if code == 1 else ""))

    run(["eval", "--scenes", str(ds), "--results", str(results),
         "--out-csv", str(out / "per_instance_errors.csv")] + common)
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()

"""End-to-end estimation wiring shared by the CLI and the test harness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidTransform, orthonormalized
from .match import EmptyInstanceError, crop_instance, select_top_k
from .onboard import (
    DirectorySource,
    OracleSource,
    PatchGridSpec,
    TemplateDatabase,
    build_template_database,
    load_raw_grid,
)
from .pose import (
    PoseDiagnostics,
    RansacConfig,
    ransac_kabsch,
    select_final_pose,
    weighted_alignment_error,
)
from .render import TriMesh, sample_surface
from .scenes import Dataset, InstanceRecord, SceneImage


@dataclass
class RunConfig:
    """All pipeline tunables with their defaults."""

    alpha: float = 25.0
    delta: float = 60.0
    d_pca: int = 256
    gamma: float = 0.3
    top_k: int = 15
    tau_factor: float = 0.05
    ransac_iterations: int = 512
    d_px: float = 336.0
    seed: int = 0
    oracle_dim: int = 384
    image_size: int = 420
    patch_size: int = 14
    strict_eq2: bool = False  # disable PCA mean-centering
    refit: bool = True
    patch_depth: str = "center"
    crop_expand: float = 0.10
    model_sample_size: int = 1024
    sym_step_deg: float = 6.0
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.alpha <= 90:
            raise ValueError("alpha must be in (0, 90]")
        if 360.0 % self.delta != 0:
            raise ValueError("delta must divide 360")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.top_k < 1 or self.ransac_iterations < 1:
            raise ValueError("top_k and ransac_iterations must be >= 1")
        if self.tau_factor <= 0 or self.d_px <= 0:
            raise ValueError("tau_factor and d_px must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must divide image_size")
        if self.patch_depth not in ("center", "median"):
            raise ValueError("patch_depth must be 'center' or 'median'")

    @property
    def grid(self) -> PatchGridSpec:
        return PatchGridSpec(self.image_size, self.patch_size)

    def ransac(self) -> RansacConfig:
        return RansacConfig(
            iterations=self.ransac_iterations,
            tau_factor=self.tau_factor,
            seed=self.seed,
            refit=self.refit,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_file(path, overrides: dict | None = None) -> "RunConfig":
        """Flat key=value config file; explicit overrides win."""
        values = {}
        text = Path(path).read_text()
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = raw
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return RunConfig(**_coerce_fields(values))


def _coerce_fields(values: dict) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(raw, str):
            out[key] = raw
            continue
        t = types[key]
        if t in ("bool", bool):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif t in ("int", int):
            out[key] = int(raw)
        elif t in ("float", float):
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def onboard_object(
    mesh: TriMesh, cfg: RunConfig, descriptor_source=None, object_id: str = "object"
) -> TemplateDatabase:
    """Build a template database using the config's rendering settings."""
    source = descriptor_source or OracleSource(dim=cfg.oracle_dim, seed=cfg.seed)
    return build_template_database(
        mesh,
        cfg.alpha,
        cfg.delta,
        cfg.d_pca,
        source,
        object_id=object_id,
        grid=cfg.grid,
        d_px=cfg.d_px,
        center_pca=not cfg.strict_eq2,
    )


@dataclass
class InstanceResult:
    scene_id: int
    im_id: int
    obj_id: int
    pose: RigidTransform
    score: float
    time_s: float
    diagnostics: PoseDiagnostics
    error: str = ""


def estimate_instance(
    db: TemplateDatabase,
    image: SceneImage,
    inst: InstanceRecord,
    model_sample: np.ndarray,
    cfg: RunConfig,
    *,
    oracle: bool = False,
    descriptor_grid: np.ndarray | None = None,
):
    """Estimate the pose of one segmented instance.

    Exactly one descriptor path must be available: ``oracle=True`` computes
    closed-loop oracle features from the instance's ground-truth pose;
    otherwise ``descriptor_grid`` supplies the raw backbone grid for the
    crop.
    """
    if oracle:
        if inst.gt_pose is None:
            raise ValueError("oracle mode needs ground-truth poses in the dataset")
        source = ("oracle", inst.gt_pose, cfg.oracle_dim, cfg.seed)
    elif descriptor_grid is not None:
        source = descriptor_grid
    else:
        raise ValueError("no descriptor source for the instance")
    scene = crop_instance(
        source,
        image.depth,
        inst.mask,
        image.K,
        db,
        expand=cfg.crop_expand,
        patch_depth=cfg.patch_depth,
    )
    sets = select_top_k(db, scene, cfg.top_k, cfg.gamma)
    rcfg = cfg.ransac()
    tree = cKDTree(scene.scene_cloud)
    hypotheses = []
    for cs in sets:
        hyp = ransac_kabsch(cs, db.diameter, rcfg)
        if hyp is None:
            continue
        hyp.wae = weighted_alignment_error(
            hyp.transform,
            cs.model_points,
            scene,
            model_sample,
            db.diameter,
            tau_factor=cfg.tau_factor,
            scene_tree=tree,
        )
        hypotheses.append(hyp)
    return select_final_pose(
        hypotheses,
        scene,
        db,
        best_template=sets[0].template_index,
        model_centroid=np.asarray(model_sample).mean(axis=0),
    )


def estimate_dataset(
    dbs: dict,
    dataset: Dataset,
    cfg: RunConfig,
    *,
    oracle: bool = False,
    descriptor_dir=None,
) -> list:
    """Run the estimator over every instance of a dataset.

    ``dbs`` maps obj_id to its TemplateDatabase.  Per-instance failures are
    recorded, not raised.  Rows come back sorted by (scene, image,
    instance) regardless of scheduling.
    """
    samples = {}
    for obj_id in dbs:
        mesh = dataset.load_model(obj_id)
        samples[obj_id] = sample_surface(mesh, cfg.model_sample_size, seed=cfg.seed)

    tasks = []
    for image in dataset.images:
        for inst in image.instances:
            if inst.obj_id in dbs:
                tasks.append((image, inst))

    def run(task):
        image, inst = task
        grid = None
        if descriptor_dir is not None:
            path = (
                Path(descriptor_dir)
                / f"{image.im_id:06d}_{inst.index:06d}.g6dr"
            )
            grid, _meta = load_raw_grid(path)
        t0 = time.perf_counter()
        try:
            pose, diag = estimate_instance(
                dbs[inst.obj_id],
                image,
                inst,
                samples[inst.obj_id],
                cfg,
                oracle=oracle,
                descriptor_grid=grid,
            )
            err = ""
        except (EmptyInstanceError, ValueError) as exc:
            pose, diag, err = None, PoseDiagnostics(fallback=True, reason=str(exc)), str(exc)
        elapsed = time.perf_counter() - t0
        score = 0.0
        if pose is not None and not diag.fallback:
            score = 1.0 / (1.0 + diag.wae)
        return InstanceResult(
            scene_id=image.scene_id,
            im_id=image.im_id,
            obj_id=inst.obj_id,
            pose=pose,
            score=score,
            time_s=elapsed,
            diagnostics=diag,
            error=err,
        )

    if cfg.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    results.sort(key=lambda r: (r.scene_id, r.im_id, r.obj_id))
    return results


def write_result_csv(results: list, path) -> None:
    """BOP-convention result rows: R row-major, t in millimeters."""
    with open(path, "w") as fh:
        fh.write("scene_id,im_id,obj_id,score,R,t,time\n")
        for r in results:
            if r.pose is None:
                continue
            rr = " ".join(f"{x:.17g}" for x in r.pose.rotation.ravel())
            tt = " ".join(f"{x:.17g}" for x in r.pose.translation * 1000.0)
            fh.write(
                f"{r.scene_id},{r.im_id},{r.obj_id},{r.score:.6f},{rr},{tt},{r.time_s:.4f}\n"
            )


def read_result_csv(path) -> list:
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("scene_id"):
        raise ValueError(f"{path}: missing result CSV header")
    for line in lines[1:]:
        if not line.strip():
            continue
        scene_id, im_id, obj_id, score, rr, tt, t = line.split(",")
        rot = orthonormalized(np.fromstring(rr, sep=" ").reshape(3, 3))
        tra = np.fromstring(tt, sep=" ") / 1000.0
        rows.append(
            {
                "scene_id": int(scene_id),
                "im_id": int(im_id),
                "obj_id": int(obj_id),
                "score": float(score),
                "pose": RigidTransform(rot, tra),
                "time": float(t),
            }
        )
    return rows


def write_manifest(path, command: str, cfg: RunConfig, inputs: dict, extra: dict | None = None):
    """Reproducibility record: config, seeds, and input file hashes."""
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "inputs": {str(k): _sha256(v) for k, v in inputs.items()},
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

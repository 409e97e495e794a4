"""Synthetic scene generation and the on-disk dataset layout.

Synthetic observations substitute for real benchmark captures: a random
pose fully inside the frame, ray-cast depth, an exact instance mask, and
optional degradations (Gaussian depth noise, mask erosion, a planar
occluder cut).  Datasets are written in a BOP-flavored layout so the
synthetic dump and real-data ingestion share one loader:

    root/
      models/obj_{id:06d}.ply          ASCII PLY, millimeters
      models/models_info.json          diameter (mm) + symmetry lists
      scene/scene_camera.json          per-image cam_K and depth_scale
      scene/scene_gt.json              per-image ground-truth poses (mm)
      scene/depth/{im:06d}.png         16-bit PNG, value * depth_scale = mm
      scene/mask_visib/{im:06d}_{inst:06d}.png
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geom import CameraIntrinsics, RigidTransform, random_rotation
from .metrics import GroundTruthInstance, SymmetrySet
from .render import DepthImage, TriMesh, load_mesh, mesh_diameter, raycast_depth, save_mesh_ply

DEFAULT_SCENE_CAMERA = CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)
DEPTH_SCALE_MM = 0.1  # stored value * 0.1 = millimeters


class SceneGenerationError(RuntimeError):
    """No in-frame pose found within the retry budget."""


class DatasetError(RuntimeError):
    """Dataset layout or schema problem."""


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0  # meters
    mask_erode: int = 0  # pixels
    occluder_fraction: float = 0.0


@dataclass
class SceneObservation:
    """One rendered observation: depth image, degraded instance mask."""

    depth: DepthImage
    mask: np.ndarray  # detector-style instance mask (possibly degraded)
    K: CameraIntrinsics


def synth_scene(
    mesh: TriMesh,
    K: CameraIntrinsics,
    pose_seed: int,
    noise: NoiseSpec = NoiseSpec(),
    *,
    object_id: str = "object",
    z_range: tuple = (2.2, 3.5),
):
    """Generate one synthetic observation plus its ground truth.

    The pose has a uniformly random rotation; the translation places the
    mesh bounding-box center at a random image position with the whole
    object inside the frame, at a depth of ``z_range`` diameters.  Raises
    SceneGenerationError when no pose fits within 100 attempts.
    """
    rng = np.random.default_rng(pose_seed)
    d = mesh_diameter(mesh)
    c0 = mesh.center
    r_m = float(np.linalg.norm(mesh.vertices - c0, axis=1).max())
    for _ in range(100):
        rot = random_rotation(rng)
        z = d * rng.uniform(*z_range)
        if z <= r_m:
            continue
        rho = K.focal * r_m / math.sqrt(z * z - r_m * r_m) + 3.0
        if 2 * rho >= min(K.width, K.height) - 4:
            continue
        u0 = rng.uniform(rho, K.width - 1 - rho)
        v0 = rng.uniform(rho, K.height - 1 - rho)
        anchor = np.array([(u0 - K.cx) * z / K.fx, (v0 - K.cy) * z / K.fy, z])
        pose = RigidTransform(rot, anchor - rot @ c0)
        render = raycast_depth(mesh, pose, K)
        full_mask = render.mask
        if not full_mask.any():
            continue
        if (
            full_mask[0, :].any()
            or full_mask[-1, :].any()
            or full_mask[:, 0].any()
            or full_mask[:, -1].any()
        ):
            continue
        depth = render.depth.data.copy()
        mask = full_mask.copy()
        if noise.depth_sigma > 0:
            hit = depth > 0
            depth[hit] = np.maximum(
                depth[hit] + rng.normal(0.0, noise.depth_sigma, hit.sum()), 1e-6
            )
        if noise.mask_erode > 0:
            mask = ndimage.binary_erosion(mask, iterations=noise.mask_erode)
        if noise.occluder_fraction > 0:
            mask = _planar_cut(mask, noise.occluder_fraction, rng)
        if not mask.any():
            continue
        obs = SceneObservation(
            depth=DepthImage(K.width, K.height, depth), mask=mask, K=K
        )
        gt = GroundTruthInstance(
            pose=pose,
            object_id=object_id,
            mask=full_mask,
            visibility_fraction=float(mask.sum() / full_mask.sum()),
        )
        return obs, gt
    raise SceneGenerationError("no in-frame pose found in 100 attempts")


def _planar_cut(mask: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Remove ~``fraction`` of mask pixels on one side of a random line."""
    ys, xs = np.nonzero(mask)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    proj = xs * math.cos(theta) + ys * math.sin(theta)
    cut = np.quantile(proj, 1.0 - fraction)
    out = mask.copy()
    out[ys[proj > cut], xs[proj > cut]] = False
    return out


# ---------------------------------------------------------------------------
# PNG helpers


def _write_depth_png(path, depth_m: np.ndarray) -> None:
    counts = np.round(depth_m * 1000.0 / DEPTH_SCALE_MM)
    if counts.max(initial=0) > 65535:
        raise DatasetError("depth exceeds the 16-bit range at this depth_scale")
    Image.fromarray(counts.astype(np.uint16)).save(path)


def _read_depth_png(path, depth_scale_mm: float) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr * depth_scale_mm / 1000.0


def _write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


def _read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 0


# ---------------------------------------------------------------------------
# dataset writing / loading


def write_synth_dataset(
    out_dir,
    mesh: TriMesh,
    n_scenes: int,
    *,
    obj_id: int = 1,
    K: CameraIntrinsics = DEFAULT_SCENE_CAMERA,
    seed: int = 0,
    noise: NoiseSpec = NoiseSpec(),
    models_info_extra: dict | None = None,
    z_range: tuple = (2.2, 3.5),
) -> Path:
    """Write a self-contained synthetic dataset; returns the root path."""
    root = Path(out_dir)
    (root / "models").mkdir(parents=True, exist_ok=True)
    scene = root / "scene"
    (scene / "depth").mkdir(parents=True, exist_ok=True)
    (scene / "mask_visib").mkdir(parents=True, exist_ok=True)

    save_mesh_ply(mesh, root / "models" / f"obj_{obj_id:06d}.ply", scale=1000.0)
    info = {"diameter": mesh_diameter(mesh) * 1000.0}
    info.update(models_info_extra or {})
    (root / "models" / "models_info.json").write_text(
        json.dumps({str(obj_id): info}, indent=1)
    )

    cam = {}
    gt = {}
    for im_id in range(n_scenes):
        obs, truth = synth_scene(
            mesh, K, pose_seed=seed + im_id, noise=noise, object_id=str(obj_id),
            z_range=z_range,
        )
        _write_depth_png(scene / "depth" / f"{im_id:06d}.png", obs.depth.data)
        _write_mask_png(scene / "mask_visib" / f"{im_id:06d}_000000.png", obs.mask)
        cam[str(im_id)] = {
            "cam_K": [K.fx, 0.0, K.cx, 0.0, K.fy, K.cy, 0.0, 0.0, 1.0],
            "depth_scale": DEPTH_SCALE_MM,
        }
        gt[str(im_id)] = [
            {
                "obj_id": obj_id,
                "cam_R_m2c": truth.pose.rotation.ravel().tolist(),
                "cam_t_m2c": (truth.pose.translation * 1000.0).tolist(),
                "visib_fract": truth.visibility_fraction,
            }
        ]
    (scene / "scene_camera.json").write_text(json.dumps(cam, indent=1))
    (scene / "scene_gt.json").write_text(json.dumps(gt, indent=1))
    return root


@dataclass
class InstanceRecord:
    index: int
    obj_id: int
    mask: np.ndarray
    gt_pose: RigidTransform | None = None
    visib_fract: float = 1.0


@dataclass
class SceneImage:
    scene_id: int
    im_id: int
    K: CameraIntrinsics
    depth: DepthImage
    instances: list = field(default_factory=list)


@dataclass
class Dataset:
    root: Path
    models_info: dict
    images: list

    def model_path(self, obj_id: int) -> Path:
        p = self.root / "models" / f"obj_{obj_id:06d}.ply"
        if not p.exists():
            raise DatasetError(f"missing model file {p}")
        return p

    def load_model(self, obj_id: int) -> TriMesh:
        return load_mesh(self.model_path(obj_id), scale=0.001)

    def diameter(self, obj_id: int) -> float:
        try:
            return self.models_info[str(obj_id)]["diameter"] / 1000.0
        except KeyError:
            raise DatasetError(
                f"models_info.json lacks a diameter for object {obj_id}"
            ) from None

    def symmetries(self, obj_id: int, step_deg: float = 6.0) -> SymmetrySet:
        info = self.models_info.get(str(obj_id), {})
        return SymmetrySet.from_models_info(info, step_deg=step_deg, scale=0.001)


def load_dataset(root) -> Dataset:
    """Load a dataset in the layout written by ``write_synth_dataset``."""
    root = Path(root)
    scene = root / "scene"
    cam_path = scene / "scene_camera.json"
    if not cam_path.exists():
        raise DatasetError(f"missing {cam_path}")
    cameras = json.loads(cam_path.read_text())
    gt_path = scene / "scene_gt.json"
    gts = json.loads(gt_path.read_text()) if gt_path.exists() else {}
    info_path = root / "models" / "models_info.json"
    models_info = json.loads(info_path.read_text()) if info_path.exists() else {}

    images = []
    for im_key in sorted(cameras, key=int):
        entry = cameras[im_key]
        try:
            kk = entry["cam_K"]
            depth_scale = entry["depth_scale"]
        except KeyError as e:
            raise DatasetError(f"scene_camera.json image {im_key}: missing {e}") from None
        depth_png = scene / "depth" / f"{int(im_key):06d}.png"
        if not depth_png.exists():
            raise DatasetError(f"missing depth image {depth_png}")
        depth = _read_depth_png(depth_png, depth_scale)
        h, w = depth.shape
        K = CameraIntrinsics(kk[0], kk[4], kk[2], kk[5], w, h)
        img = SceneImage(
            scene_id=0,
            im_id=int(im_key),
            K=K,
            depth=DepthImage(w, h, depth),
        )
        for idx, g in enumerate(gts.get(im_key, [])):
            mask_png = scene / "mask_visib" / f"{int(im_key):06d}_{idx:06d}.png"
            if not mask_png.exists():
                raise DatasetError(f"missing mask {mask_png}")
            pose = RigidTransform(
                np.asarray(g["cam_R_m2c"], dtype=np.float64).reshape(3, 3),
                np.asarray(g["cam_t_m2c"], dtype=np.float64) / 1000.0,
            )
            img.instances.append(
                InstanceRecord(
                    index=idx,
                    obj_id=int(g["obj_id"]),
                    mask=_read_mask_png(mask_png),
                    gt_pose=pose,
                    visib_fract=float(g.get("visib_fract", 1.0)),
                )
            )
        images.append(img)
    if not images:
        raise DatasetError(f"{root}: no images found")
    return Dataset(root=root, models_info=models_info, images=images)

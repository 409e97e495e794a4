"""Scene-side feature assembly and template retrieval.

A segmented detection is cropped to the template resolution, its patch
centers are lifted to 3D from the depth image, and every template is scored
with mutual nearest-neighbor cosine matches.  The top-k templates yield
3D-3D correspondence sets in the object model frame for pose estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, backproject
from .onboard import PatchGridSpec, TemplateDatabase, oracle_descriptors, project_descriptors
from .render import DepthImage


class EmptyInstanceError(ValueError):
    """Mask empty or no valid depth under the mask."""


@dataclass(frozen=True)
class CropMap:
    """Affine map from crop pixel coordinates to original image pixels."""

    x0: float
    y0: float
    sx: float
    sy: float

    def to_original(self, u_crop, v_crop):
        u = self.x0 + (np.asarray(u_crop, dtype=np.float64) + 0.5) * self.sx - 0.5
        v = self.y0 + (np.asarray(v_crop, dtype=np.float64) + 0.5) * self.sy - 0.5
        return u, v


@dataclass
class SceneInstance:
    """One segmented detection, ready for template matching."""

    crop_map: CropMap
    descriptors: np.ndarray  # (N_s, D_PCA) float32, unit rows
    centers_3d: np.ndarray  # (N_s, 3) scene-camera frame
    scene_cloud: np.ndarray  # (M, 3) all masked valid-depth pixels lifted
    mask: np.ndarray  # bool, original resolution
    depth: np.ndarray  # float64, original resolution (meters, 0 invalid)
    K: CameraIntrinsics
    median_depth: float

    def __post_init__(self):
        if len(self.descriptors) != len(self.centers_3d):
            raise ValueError("descriptor / center count mismatch")
        if len(self.centers_3d) and np.any(self.centers_3d[:, 2] <= 0):
            raise ValueError("scene patch centers must have positive depth")


@dataclass
class CorrespondenceSet:
    """Mutual 3D-3D matches between one template and the scene."""

    template_index: int
    scene_points: np.ndarray  # (C, 3) scene-camera frame
    model_points: np.ndarray  # (C, 3) object model frame
    similarities: np.ndarray  # (C,)
    score: float

    def __len__(self) -> int:
        return len(self.scene_points)


def square_crop_box(mask: np.ndarray, expand: float = 0.10):
    """Square box around the mask, expanded per side, clamped to the image.

    Returns (x0, y0, w, h) integers.  Clamping may make the box
    non-square at the image border.
    """
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise EmptyInstanceError("mask has no foreground pixels")
    r0, r1 = np.nonzero(rows)[0][[0, -1]]
    c0, c1 = np.nonzero(cols)[0][[0, -1]]
    h = r1 - r0 + 1
    w = c1 - c0 + 1
    side = max(w + 2 * expand * w, h + 2 * expand * h)
    cx = (c0 + c1 + 1) / 2.0
    cy = (r0 + r1 + 1) / 2.0
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    side = int(round(side))
    ih, iw = mask.shape
    x0 = max(0, min(x0, iw - 1))
    y0 = max(0, min(y0, ih - 1))
    x1 = min(iw, x0 + side)
    y1 = min(ih, y0 + side)
    return x0, y0, x1 - x0, y1 - y0


def crop_instance(
    descriptor_source,
    depth: DepthImage,
    mask: np.ndarray,
    K: CameraIntrinsics,
    db: TemplateDatabase,
    *,
    expand: float = 0.10,
    patch_depth: str = "center",
) -> SceneInstance:
    """Build a SceneInstance from a detection mask and aligned depth.

    ``descriptor_source`` is one of

    * a ``(grid_h, grid_w, D)`` raw descriptor array for the crop (real
      backbone output; projected here with the object's PCA basis),
    * ``("oracle", pose, dim, seed)`` with the ground-truth camera-from-object
      pose, for closed-loop tests: descriptors are oracle features of the
      model-frame patch points.

    ``patch_depth`` selects the per-patch depth sample: the mapped center
    pixel ("center") or the median of valid masked depths over the patch
    footprint ("median").
    """
    mask = np.asarray(mask, dtype=bool)
    dimg = depth.data
    if mask.shape != dimg.shape:
        raise ValueError("mask and depth must share a resolution")
    grid = db.grid
    x0, y0, w, h = square_crop_box(mask, expand)
    cmap = CropMap(x0, y0, w / grid.image_size, h / grid.image_size)

    half = grid.patch_size // 2
    g = grid.grid
    cell = np.arange(g) * grid.patch_size + half
    uu, vv = np.meshgrid(cell, cell)  # crop pixel coords, (g, g)
    ou, ov = cmap.to_original(uu.ravel(), vv.ravel())
    pu = np.clip(np.rint(ou).astype(int), 0, mask.shape[1] - 1)
    pv = np.clip(np.rint(ov).astype(int), 0, mask.shape[0] - 1)

    fg = mask[pv, pu]
    if patch_depth == "center":
        z = dimg[pv, pu]
    elif patch_depth == "median":
        z = _patch_median_depth(dimg, mask, cmap, grid)
    else:
        raise ValueError("patch_depth must be 'center' or 'median'")
    valid = fg & (z > 0)
    if not valid.any():
        raise EmptyInstanceError("no valid-depth foreground patches")
    centers = backproject(pu[valid], pv[valid], z[valid], K)

    if isinstance(descriptor_source, tuple) and descriptor_source[0] == "oracle":
        _, gt_pose, dim, seed = descriptor_source
        model_pts = gt_pose.inverse().apply(centers)
        raw = oracle_descriptors(model_pts, db.diameter, dim, seed)
    else:
        arr = np.asarray(descriptor_source)
        if arr.shape[:2] != (g, g):
            raise ValueError(f"descriptor grid must be {g}x{g}")
        raw = arr.reshape(g * g, -1)[valid]
    desc, kept = project_descriptors(raw, db.pca)
    centers = centers[kept]

    mm = mask & (dimg > 0)
    ys, xs = np.nonzero(mm)
    if len(ys) == 0:
        raise EmptyInstanceError("no valid depth inside the mask")
    cloud = backproject(xs, ys, dimg[ys, xs], K)
    return SceneInstance(
        crop_map=cmap,
        descriptors=desc,
        centers_3d=centers,
        scene_cloud=cloud,
        mask=mask,
        depth=dimg,
        K=K,
        median_depth=float(np.median(dimg[ys, xs])),
    )


def _patch_median_depth(dimg, mask, cmap: CropMap, grid: PatchGridSpec):
    g = grid.grid
    p = grid.patch_size
    out = np.zeros(g * g)
    ih, iw = dimg.shape
    k = 0
    for r in range(g):
        for c in range(g):
            u0, v0 = cmap.to_original(c * p, r * p)
            u1, v1 = cmap.to_original((c + 1) * p, (r + 1) * p)
            a0, a1 = int(np.floor(v0)), int(np.ceil(v1))
            b0, b1 = int(np.floor(u0)), int(np.ceil(u1))
            win_d = dimg[max(0, a0) : min(ih, a1), max(0, b0) : min(iw, b1)]
            win_m = mask[max(0, a0) : min(ih, a1), max(0, b0) : min(iw, b1)]
            vals = win_d[win_m & (win_d > 0)]
            out[k] = np.median(vals) if len(vals) else 0.0
            k += 1
    return out


def similarity_matrix(scene: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    """Dense pairwise cosine similarity (inputs must have unit rows)."""
    s = np.asarray(scene)
    t = np.asarray(tmpl)
    if s.shape[1] != t.shape[1]:
        raise ValueError("descriptor dimensions differ")
    return s @ t.T


def mutual_matches(S: np.ndarray) -> list:
    """Mutual nearest-neighbor pairs of a similarity matrix.

    A pair (j, q) is kept iff q is the argmax of row j and j the argmax of
    column q, with ties broken by the lowest index.  Output is sorted by j
    and forms an injective partial matching.
    """
    S = np.asarray(S)
    if S.size == 0:
        return []
    if not np.all(np.isfinite(S)):
        raise ValueError("similarity matrix must be finite")
    best_q = np.argmax(S, axis=1)  # first max per row
    best_j = np.argmax(S, axis=0)  # first max per column
    js = np.arange(S.shape[0])
    keep = best_j[best_q] == js
    return [(int(j), int(best_q[j]), float(S[j, best_q[j]])) for j in js[keep]]


def template_score(c_i: int, n_s: int, mean_sim: float, gamma: float) -> float:
    """Coverage / similarity trade-off: gamma*C/N + (1-gamma)*mean_sim."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    if n_s <= 0:
        raise ValueError("scene patch count must be positive")
    if c_i == 0:
        mean_sim = 0.0
    return gamma * (c_i / n_s) + (1.0 - gamma) * mean_sim


def select_top_k(
    db: TemplateDatabase, scene: SceneInstance, k: int, gamma: float
) -> list:
    """Score every template and return the top-k correspondence sets.

    Templates are ranked by ``template_score`` (stable sort, ties by lower
    template index).  Model-frame correspondence points are the template
    patch centers mapped through the inverse template pose.  Sets may hold
    fewer than 3 pairs; downstream pose search skips those, and if no
    template reaches 3 mutual matches the caller falls back to the
    best-scoring template pose.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_s = len(scene.descriptors)
    if n_s == 0:
        raise EmptyInstanceError("scene instance has no descriptors")
    stack, offsets = db.descriptor_stack()
    sims = scene.descriptors @ stack.T  # (N_s, total_patches)

    js = np.arange(n_s)
    scores = np.empty(db.n_views)
    mutual = []  # (scene_idx, template_idx, sims) triples per view
    for i in range(db.n_views):
        S = sims[:, offsets[i] : offsets[i + 1]]
        best_q = np.argmax(S, axis=1)
        best_j = np.argmax(S, axis=0)
        keep = best_j[best_q] == js
        jj = js[keep]
        qq = best_q[keep]
        ss = S[jj, qq]
        mutual.append((jj, qq, ss))
        mean_sim = float(ss.mean()) if len(jj) else 0.0
        scores[i] = template_score(len(jj), n_s, mean_sim, gamma)

    order = np.argsort(-scores, kind="stable")
    out = []
    for i in order[: min(k, db.n_views)]:
        jj, qq, ss = mutual[i]
        model_centers = db.entries[i].model_centers()
        out.append(
            CorrespondenceSet(
                template_index=int(i),
                scene_points=scene.centers_3d[jj] if len(jj) else np.empty((0, 3)),
                model_points=model_centers[qq] if len(jj) else np.empty((0, 3)),
                similarities=ss.astype(np.float64),
                score=float(scores[i]),
            )
        )
    return out

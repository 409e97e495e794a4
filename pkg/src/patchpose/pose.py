"""Pose hypothesis generation and selection.

Per candidate template, a seeded RANSAC loop samples correspondence
triplets, solves the closed-form Kabsch alignment, and keeps the hypothesis
with the most inliers (distance below 0.05 x object diameter).  Hypotheses
are then ranked by the Weighted Alignment Error: mean distance of the
transformed correspondences to the observed scene surface, divided by the
fraction of model points that land in the visible, depth-consistent region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import (
    DegenerateGeometryError,
    RigidTransform,
    backproject,
    kabsch,
    orthonormalized,
)
from .match import CorrespondenceSet, SceneInstance
from .onboard import TemplateDatabase

MIN_SCENE_CLOUD_POINTS = 20  # below this the depth signal is too sparse


class UnposeableInstanceError(RuntimeError):
    """Neither depth support nor a mask centroid is available."""


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 512
    tau_factor: float = 0.05
    min_inliers: int = 6
    seed: int = 0
    refit: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tau_factor <= 0:
            raise ValueError("tau_factor must be positive")


@dataclass
class PoseHypothesis:
    transform: RigidTransform  # model frame -> scene camera frame
    inliers: int
    inlier_rms: float
    template_index: int
    wae: float = math.inf


@dataclass
class PoseDiagnostics:
    fallback: bool = False
    reason: str = ""
    template_index: int = -1
    wae: float = math.inf
    inliers: int = 0


def ransac_kabsch(
    corr: CorrespondenceSet, d: float, cfg: RansacConfig
) -> PoseHypothesis | None:
    """Robust rigid fit of a correspondence set; None if support is too weak.

    Each iteration draws three distinct pairs with a seeded PRNG, rejects
    near-degenerate model-side triplets (triangle area below 1e-12 * d^2),
    and counts inliers within tau = tau_factor * d.  The best sample (most
    inliers, ties by lower inlier RMS, then earlier iteration) is refit on
    its full inlier set unless ``cfg.refit`` is disabled.
    """
    n = len(corr)
    if n < 3:
        return None
    src = np.asarray(corr.model_points, dtype=np.float64)
    dst = np.asarray(corr.scene_points, dtype=np.float64)
    tau = cfg.tau_factor * d
    area_min = 1e-12 * d * d
    rng = np.random.default_rng(cfg.seed)
    iters = cfg.iterations

    # three distinct indices per iteration: smallest entries of a random row
    idx = np.argpartition(rng.random((iters, n)), 2, axis=1)[:, :3]
    a = src[idx]  # (iters, 3, 3)
    b = dst[idx]
    area = 0.5 * np.linalg.norm(
        np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]), axis=1
    )
    valid = area >= area_min

    # batched Kabsch on the minimal samples
    ca = a.mean(axis=1, keepdims=True)
    cb = b.mean(axis=1, keepdims=True)
    h = np.matmul((a - ca).transpose(0, 2, 1), b - cb)
    u, _, vt = np.linalg.svd(h)
    v = vt.transpose(0, 2, 1)
    ut = u.transpose(0, 2, 1)
    det = np.linalg.det(np.matmul(v, ut))
    v_fixed = v.copy()
    v_fixed[:, :, 2] *= np.sign(det)[:, None]
    rot = np.matmul(v_fixed, ut)  # (iters, 3, 3)
    trans = cb[:, 0, :] - np.einsum("kij,kj->ki", rot, ca[:, 0, :])

    pred = np.einsum("kij,nj->kni", rot, src) + trans[:, None, :]
    residual = np.linalg.norm(pred - dst[None], axis=2)  # (iters, n)
    inl = residual < tau
    counts = inl.sum(axis=1)
    counts[~valid] = -1
    sumsq = np.sum(residual * residual * inl, axis=1)
    rms_all = np.sqrt(sumsq / np.maximum(counts, 1))
    rms_all[counts <= 0] = math.inf

    # best: most inliers, ties by lower RMS, then earliest iteration
    best_it = int(np.lexsort((np.arange(iters), rms_all, -counts))[0])
    best_count = int(counts[best_it])
    if best_count < cfg.min_inliers:
        return None
    best_mask = inl[best_it]
    best_transform = RigidTransform(orthonormalized(rot[best_it]), trans[best_it])
    transform = best_transform
    if cfg.refit and best_count >= 3:
        try:
            transform = kabsch(src[best_mask], dst[best_mask])
        except DegenerateGeometryError:
            pass
    residual = np.linalg.norm(transform.apply(src) - dst, axis=1)
    mask = residual < tau
    count = int(mask.sum())
    if count < cfg.min_inliers:  # refit may only be accepted if it keeps support
        transform, mask, count = best_transform, best_mask, best_count
        residual = np.linalg.norm(transform.apply(src) - dst, axis=1)
    rms = float(np.sqrt(np.mean(residual[mask] ** 2))) if count else math.inf
    return PoseHypothesis(
        transform=transform,
        inliers=count,
        inlier_rms=rms,
        template_index=corr.template_index,
    )


def weighted_alignment_error(
    transform: RigidTransform,
    corr_model_pts: np.ndarray,
    scene: SceneInstance,
    model_sample: np.ndarray,
    d: float,
    *,
    tau_factor: float = 0.05,
    scene_tree: cKDTree | None = None,
    mask_only: bool = False,
) -> float:
    """Alignment error of a pose candidate; +inf when unsupported.

    Numerator: mean nearest-neighbor distance from the transformed
    correspondence points to the scene cloud.  Denominator: fraction of
    transformed model-sample points that project inside the instance mask
    and agree with the observed depth within 2 * tau (tau = tau_factor * d);
    ``mask_only`` relaxes the depth agreement requirement.
    """
    if len(scene.scene_cloud) < 1 or len(model_sample) < 1:
        raise ValueError("need a scene cloud and a model sample")
    tree = scene_tree if scene_tree is not None else cKDTree(scene.scene_cloud)
    pts = transform.apply(np.asarray(corr_model_pts, dtype=np.float64))
    dists, _ = tree.query(pts, k=1)
    numerator = float(np.mean(dists)) if len(pts) else math.inf

    sample_cam = transform.apply(np.asarray(model_sample, dtype=np.float64))
    z = sample_cam[:, 2]
    front = z > 0
    supported = np.zeros(len(sample_cam), dtype=bool)
    if front.any():
        k = scene.K
        u = k.fx * sample_cam[front, 0] / z[front] + k.cx
        v = k.fy * sample_cam[front, 1] / z[front] + k.cy
        pu = np.rint(u).astype(int)
        pv = np.rint(v).astype(int)
        ok = (pu >= 0) & (pu < k.width) & (pv >= 0) & (pv < k.height)
        pu, pv = pu[ok], pv[ok]
        in_mask = scene.mask[pv, pu]
        if mask_only:
            hit = in_mask
        else:
            depth_px = scene.depth[pv, pu]
            hit = in_mask & (depth_px > 0) & (
                np.abs(z[front][ok] - depth_px) <= 2.0 * tau_factor * d
            )
        idx = np.nonzero(front)[0][ok]
        supported[idx] = hit
    denominator = float(np.mean(supported))
    if denominator == 0.0:
        return math.inf
    return numerator / denominator


def fallback_pose(
    scene: SceneInstance, db: TemplateDatabase, best_template: int,
    model_centroid: np.ndarray | None = None,
) -> RigidTransform:
    """Best-scoring template's rotation placed at the mask centroid and median depth."""
    ys, xs = np.nonzero(scene.mask)
    if len(ys) == 0:
        raise UnposeableInstanceError("empty mask and empty scene cloud")
    if scene.median_depth <= 0:
        raise UnposeableInstanceError("no depth available for the fallback")
    anchor = backproject(float(xs.mean()), float(ys.mean()), scene.median_depth, scene.K)
    rotation = db.entries[best_template].pose.rotation
    centroid = (
        np.asarray(model_centroid, dtype=np.float64)
        if model_centroid is not None
        else db.model_point_cloud().mean(axis=0)
    )
    return RigidTransform(rotation, anchor - rotation @ centroid)


def select_final_pose(
    hypotheses: list,
    scene: SceneInstance,
    db: TemplateDatabase,
    best_template: int,
    model_centroid: np.ndarray | None = None,
):
    """Pick the hypothesis minimizing the WAE, or fall back when unsupported.

    The fallback (sparse depth: fewer than 20 cloud points, no surviving
    hypothesis, or all scores +inf) uses the best-scoring template's
    rotation with the model centroid placed at the back-projected mask
    centroid and median depth.  Returns ``(pose, diagnostics)``.
    """
    scored = [h for h in hypotheses if h is not None]
    degraded = None
    if len(scene.scene_cloud) < MIN_SCENE_CLOUD_POINTS:
        degraded = f"scene cloud has {len(scene.scene_cloud)} (< {MIN_SCENE_CLOUD_POINTS}) points"
    elif not scored:
        degraded = "no pose hypothesis survived"
    elif all(math.isinf(h.wae) for h in scored):
        degraded = "all hypotheses scored +inf WAE"
    if degraded is not None:
        pose = fallback_pose(scene, db, best_template, model_centroid)
        return pose, PoseDiagnostics(
            fallback=True, reason=degraded, template_index=best_template
        )
    best = min(scored, key=lambda h: (h.wae, -h.inliers, h.template_index))
    return best.transform, PoseDiagnostics(
        fallback=False,
        template_index=best.template_index,
        wae=best.wae,
        inliers=best.inliers,
    )

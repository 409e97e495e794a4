"""Symmetry-aware pose error metrics and recall aggregation.

MSSD is the maximum surface distance (meters) and MSPD the maximum pixel
projection distance between the estimated and ground-truth poses, each
minimized over the object's declared symmetries.  Recall is averaged over
the standard threshold grids; the reported AR is the mean of the MSSD and
MSPD recalls (the visibility-based third metric is flagged as not
computed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, RigidTransform

MSSD_THRESHOLD_STEPS = np.arange(1, 11) * 0.05  # fractions of the diameter
MSPD_THRESHOLD_STEPS = np.arange(1, 11) * 5.0  # pixels at 640 px width


@dataclass
class SymmetrySet:
    """Model-frame symmetry transforms; the identity is always present."""

    transforms: list

    def __post_init__(self):
        if not self.transforms or not self.transforms[0].almost_equal(
            RigidTransform.identity(), tol=1e-12
        ):
            self.transforms = [RigidTransform.identity()] + list(self.transforms)

    @staticmethod
    def identity_only() -> "SymmetrySet":
        return SymmetrySet(transforms=[])

    @staticmethod
    def from_models_info(
        info: dict, step_deg: float = 6.0, scale: float = 1.0
    ) -> "SymmetrySet":
        """Parse BOP-style symmetry lists.

        ``symmetries_discrete`` holds 4x4 row-major matrices,
        ``symmetries_continuous`` axis/offset dicts sampled every
        ``step_deg`` degrees.  Translations are multiplied by ``scale``.
        """
        out = []
        for flat in info.get("symmetries_discrete", []):
            m = np.asarray(flat, dtype=np.float64).reshape(4, 4)
            out.append(RigidTransform(m[:3, :3], m[:3, 3] * scale))
        for sym in info.get("symmetries_continuous", []):
            axis = np.asarray(sym["axis"], dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            offset = np.asarray(sym.get("offset", [0, 0, 0]), dtype=np.float64) * scale
            n = max(1, int(round(360.0 / step_deg)))
            for k in range(1, n):
                r = _axis_angle(axis, math.radians(k * step_deg))
                out.append(RigidTransform(r, offset - r @ offset))
        return SymmetrySet(transforms=out)

    def __len__(self) -> int:
        return len(self.transforms)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    x, y, z = axis
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


@dataclass
class GroundTruthInstance:
    pose: RigidTransform  # camera-from-object
    object_id: str
    mask: np.ndarray  # exact (undegraded) visibility mask
    visibility_fraction: float = 1.0


def mssd(
    T_est: RigidTransform,
    T_gt: RigidTransform,
    model_pts: np.ndarray,
    sym: SymmetrySet,
) -> float:
    """Symmetry-aware maximum surface distance in meters."""
    pts = np.asarray(model_pts, dtype=np.float64)
    est = T_est.apply(pts)
    best = math.inf
    for s in sym.transforms:
        gt = T_gt.compose(s).apply(pts)
        best = min(best, float(np.linalg.norm(est - gt, axis=1).max()))
    return best


def mspd(
    T_est: RigidTransform,
    T_gt: RigidTransform,
    model_pts: np.ndarray,
    sym: SymmetrySet,
    K: CameraIntrinsics,
) -> float:
    """Symmetry-aware maximum projection distance in pixels.

    A symmetry branch with any point at or behind the camera contributes
    +inf.
    """
    pts = np.asarray(model_pts, dtype=np.float64)
    est = T_est.apply(pts)
    if np.any(est[:, 2] <= 0):
        return math.inf
    pe = _pixels(est, K)
    best = math.inf
    for s in sym.transforms:
        gt = T_gt.compose(s).apply(pts)
        if np.any(gt[:, 2] <= 0):
            continue  # +inf branch never wins the min
        pg = _pixels(gt, K)
        best = min(best, float(np.linalg.norm(pe - pg, axis=1).max()))
    return best


def _pixels(pts_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    z = pts_cam[:, 2]
    return np.stack(
        [K.fx * pts_cam[:, 0] / z + K.cx, K.fy * pts_cam[:, 1] / z + K.cy], axis=1
    )


def mssd_recall(error: float, diameter: float) -> float:
    """Fraction of the MSSD threshold grid this error passes."""
    return float(np.mean(error < MSSD_THRESHOLD_STEPS * diameter))


def mspd_recall(error: float, image_width: int) -> float:
    """Fraction of the MSPD threshold grid this error passes."""
    r = image_width / 640.0
    return float(np.mean(error < MSPD_THRESHOLD_STEPS * r))


@dataclass
class ARReport:
    per_object: dict  # obj_id -> {"ar_mssd", "ar_mspd", "ar", "count"}
    mean_ar_mssd: float
    mean_ar_mspd: float
    mean_ar: float
    records: list = field(default_factory=list)
    vsd_note: str = "AR_VSD not computed; AR is the mean of MSSD and MSPD recalls"

    def table(self) -> str:
        lines = [
            f"{'object':<12}{'n':>6}{'AR_MSSD':>10}{'AR_MSPD':>10}{'AR':>10}",
        ]
        for obj, row in sorted(self.per_object.items()):
            lines.append(
                f"{obj:<12}{row['count']:>6}{row['ar_mssd']:>10.4f}"
                f"{row['ar_mspd']:>10.4f}{row['ar']:>10.4f}"
            )
        lines.append(
            f"{'mean':<12}{sum(r['count'] for r in self.per_object.values()):>6}"
            f"{self.mean_ar_mssd:>10.4f}{self.mean_ar_mspd:>10.4f}{self.mean_ar:>10.4f}"
        )
        lines.append(f"note: {self.vsd_note}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("scene_id,im_id,obj_id,mssd_m,mspd_px,mssd_recall,mspd_recall\n")
            for r in self.records:
                fh.write(
                    f"{r['scene_id']},{r['im_id']},{r['obj_id']},"
                    f"{r['mssd']:.9g},{r['mspd']:.9g},"
                    f"{r['mssd_recall']:.4f},{r['mspd_recall']:.4f}\n"
                )


def average_recall(records: list) -> ARReport:
    """Aggregate per-instance errors into per-object and mean recalls.

    Each record needs: obj_id, mssd (m), mspd (px), diameter (m),
    image_width (px); scene_id / im_id are carried through when present.
    """
    if not records:
        raise ValueError("need at least one instance")
    enriched = []
    for r in records:
        rr = dict(r)
        rr.setdefault("scene_id", 0)
        rr.setdefault("im_id", 0)
        rr["mssd_recall"] = mssd_recall(r["mssd"], r["diameter"])
        rr["mspd_recall"] = mspd_recall(r["mspd"], r["image_width"])
        enriched.append(rr)
    per_object = {}
    for obj in sorted({r["obj_id"] for r in enriched}):
        rows = [r for r in enriched if r["obj_id"] == obj]
        ar_m = float(np.mean([r["mssd_recall"] for r in rows]))
        ar_p = float(np.mean([r["mspd_recall"] for r in rows]))
        per_object[obj] = {
            "ar_mssd": ar_m,
            "ar_mspd": ar_p,
            "ar": 0.5 * (ar_m + ar_p),
            "count": len(rows),
        }
    mean_m = float(np.mean([v["ar_mssd"] for v in per_object.values()]))
    mean_p = float(np.mean([v["ar_mspd"] for v in per_object.values()]))
    return ARReport(
        per_object=per_object,
        mean_ar_mssd=mean_m,
        mean_ar_mspd=mean_p,
        mean_ar=0.5 * (mean_m + mean_p),
        records=enriched,
    )

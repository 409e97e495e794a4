import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchpose.geom import CameraIntrinsics, RigidTransform, random_rotation
from patchpose.metrics import (
    SymmetrySet,
    average_recall,
    mspd,
    mssd,
    mspd_recall,
    mssd_recall,
)
from patchpose.render import box_mesh, sample_surface

K = CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)


@pytest.fixture(scope="module")
def model_pts():
    return sample_surface(box_mesh(0.1, 0.1, 0.2), 500, seed=0)


def pose_at(z=0.6, rot=None, t_extra=(0, 0, 0)):
    rot = np.eye(3) if rot is None else rot
    return RigidTransform(rot, np.array([0.0, 0.0, z]) + np.asarray(t_extra, dtype=float))


IDENTITY_SYM = SymmetrySet.identity_only()


def rot_z(angle_deg):
    a = math.radians(angle_deg)
    return np.array(
        [[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]]
    )


# ---------------------------------------------------------------------------
# MSSD


def test_mssd_zero_at_ground_truth(model_pts):
    t = pose_at()
    assert mssd(t, t, model_pts, IDENTITY_SYM) == pytest.approx(0.0, abs=1e-12)


def test_mssd_pure_translation_is_exact(model_pts):
    t_gt = pose_at()
    shift = np.array([0.01, -0.02, 0.03])
    t_est = pose_at(t_extra=shift)
    assert mssd(t_est, t_gt, model_pts, IDENTITY_SYM) == pytest.approx(
        np.linalg.norm(shift), rel=1e-12
    )


def test_mssd_symmetry_cancels_declared_rotation(model_pts):
    sym = SymmetrySet(transforms=[RigidTransform(rot_z(180.0), np.zeros(3))])
    t_gt = pose_at(rot=random_rotation(np.random.default_rng(0)))
    t_est = RigidTransform(t_gt.rotation @ rot_z(180.0), t_gt.translation)
    with_sym = mssd(t_est, t_gt, model_pts, sym)
    without = mssd(t_est, t_gt, model_pts, IDENTITY_SYM)
    assert with_sym == pytest.approx(0.0, abs=1e-9)
    assert without > 0.01  # the box is not actually 180-degree symmetric about x/y


def test_mssd_invariant_under_declared_symmetry_of_estimate(model_pts):
    # exact only when the evaluation points are closed under the symmetry,
    # so evaluate on the union of the sample and its symmetric image
    sigma = RigidTransform(rot_z(180.0), np.zeros(3))
    sym = SymmetrySet(transforms=[sigma])
    closed_pts = np.vstack([model_pts, sigma.apply(model_pts)])
    rng = np.random.default_rng(1)
    t_gt = pose_at(rot=random_rotation(rng))
    t_est = pose_at(rot=random_rotation(rng), t_extra=[0.002, 0, 0])
    base = mssd(t_est, t_gt, closed_pts, sym)
    t_est_sym = RigidTransform(t_est.rotation @ rot_z(180.0), t_est.translation)
    assert mssd(t_est_sym, t_gt, closed_pts, sym) == pytest.approx(base, abs=1e-9)


def test_mssd_matches_brute_force(model_pts):
    rng = np.random.default_rng(2)
    sym = SymmetrySet(transforms=[RigidTransform(rot_z(120.0), np.zeros(3)),
                                  RigidTransform(rot_z(240.0), np.zeros(3))])
    t_gt = pose_at(rot=random_rotation(rng))
    t_est = pose_at(rot=random_rotation(rng))
    best = math.inf
    for s in sym.transforms:
        gt_pts = t_gt.apply(s.apply(model_pts))
        est_pts = t_est.apply(model_pts)
        best = min(best, float(np.max(np.sqrt(((est_pts - gt_pts) ** 2).sum(1)))))
    assert mssd(t_est, t_gt, model_pts, sym) == pytest.approx(best, rel=1e-12)


# ---------------------------------------------------------------------------
# MSPD


def test_mspd_zero_at_ground_truth(model_pts):
    t = pose_at()
    assert mspd(t, t, model_pts, IDENTITY_SYM, K) == pytest.approx(0.0, abs=1e-12)


def test_mspd_depth_motion_of_principal_point_is_free():
    pts = np.zeros((1, 3))  # model point at the origin
    t_gt = pose_at(z=0.5)
    t_est = pose_at(z=1.5)  # pure depth change along the principal ray
    assert mspd(t_est, t_gt, pts, IDENTITY_SYM, K) == pytest.approx(0.0, abs=1e-9)


def test_mspd_matches_brute_force(model_pts):
    rng = np.random.default_rng(3)
    t_gt = pose_at(rot=random_rotation(rng))
    t_est = RigidTransform(
        t_gt.rotation @ rot_z(2.0), t_gt.translation + [0.001, 0, 0.002]
    )
    best = 0.0
    est = t_est.apply(model_pts)
    gt = t_gt.apply(model_pts)
    for p, q in zip(est, gt):
        up = (K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)
        uq = (K.fx * q[0] / q[2] + K.cx, K.fy * q[1] / q[2] + K.cy)
        best = max(best, math.hypot(up[0] - uq[0], up[1] - uq[1]))
    assert mspd(t_est, t_gt, model_pts, IDENTITY_SYM, K) == pytest.approx(best, rel=1e-12)


def test_mspd_behind_camera_is_infinite(model_pts):
    t_gt = pose_at()
    t_est = pose_at(z=-0.5)
    assert math.isinf(mspd(t_est, t_gt, model_pts, IDENTITY_SYM, K))


def test_metrics_zero_iff_symmetry_equivalent(model_pts):
    rng = np.random.default_rng(4)
    t_gt = pose_at(rot=random_rotation(rng))
    t_other = RigidTransform(t_gt.rotation @ rot_z(31.0), t_gt.translation)
    assert mssd(t_other, t_gt, model_pts, IDENTITY_SYM) > 1e-4
    assert mspd(t_other, t_gt, model_pts, IDENTITY_SYM, K) > 1e-2


# ---------------------------------------------------------------------------
# symmetry parsing


def test_symmetry_set_always_contains_identity():
    s = SymmetrySet(transforms=[])
    assert len(s) == 1
    assert s.transforms[0].almost_equal(RigidTransform.identity())


def test_symmetry_from_models_info_discrete_and_continuous():
    flat = np.eye(4)
    flat[:3, :3] = rot_z(180.0)
    info = {
        "symmetries_discrete": [flat.ravel().tolist()],
        "symmetries_continuous": [{"axis": [0, 0, 1], "offset": [0, 0, 0]}],
    }
    s = SymmetrySet.from_models_info(info, step_deg=90.0)
    # identity + one discrete + three continuous samples (90, 180, 270)
    assert len(s) == 5


def test_symmetry_offset_scaling():
    flat = np.eye(4)
    flat[:3, 3] = [10.0, 0.0, 0.0]  # millimeters
    info = {"symmetries_discrete": [flat.ravel().tolist()]}
    s = SymmetrySet.from_models_info(info, scale=0.001)
    np.testing.assert_allclose(s.transforms[1].translation, [0.01, 0, 0])


# ---------------------------------------------------------------------------
# recall aggregation


def test_average_recall_all_perfect():
    records = [
        {"obj_id": 1, "mssd": 0.0, "mspd": 0.0, "diameter": 0.2, "image_width": 640}
        for _ in range(5)
    ]
    rep = average_recall(records)
    assert rep.mean_ar == pytest.approx(1.0)


def test_average_recall_all_failed():
    records = [
        {"obj_id": 1, "mssd": 0.3, "mspd": 1000.0, "diameter": 0.2, "image_width": 640}
    ]
    # 0.3 m > 0.5 * 0.2 m and 1000 px > 50 px
    assert average_recall(records).mean_ar == pytest.approx(0.0)


def test_average_recall_hand_enumerated_thresholds():
    d = 0.2
    rec = {"obj_id": 1, "mssd": 0.27 * d, "mspd": 17.0, "diameter": d, "image_width": 640}
    rep = average_recall([rec])
    # 0.27d passes {0.30, 0.35, 0.40, 0.45, 0.50}d -> 5/10
    assert rep.per_object[1]["ar_mssd"] == pytest.approx(0.5)
    # 17 px passes {20, 25, 30, 35, 40, 45, 50} -> 7/10
    assert rep.per_object[1]["ar_mspd"] == pytest.approx(0.7)
    assert rep.mean_ar == pytest.approx(0.6)


def test_recall_threshold_scaling_with_image_width():
    assert mspd_recall(17.0, 640) == pytest.approx(0.7)
    assert mspd_recall(17.0, 1280) == pytest.approx(0.9)  # r = 2: passes 10r..50r


@given(st.floats(1.001, 10.0))
@settings(max_examples=30, deadline=None)
def test_average_recall_monotone_under_error_scaling(factor):
    rng = np.random.default_rng(5)
    records = [
        {
            "obj_id": 1,
            "mssd": float(rng.uniform(0, 0.15)),
            "mspd": float(rng.uniform(0, 60)),
            "diameter": 0.2,
            "image_width": 640,
        }
        for _ in range(20)
    ]
    base = average_recall(records).mean_ar
    scaled = [dict(r, mssd=r["mssd"] * factor, mspd=r["mspd"] * factor) for r in records]
    assert average_recall(scaled).mean_ar <= base + 1e-12


def test_report_table_and_csv(tmp_path):
    records = [
        {"obj_id": 1, "mssd": 0.0, "mspd": 0.0, "diameter": 0.2, "image_width": 640},
        {"obj_id": 2, "mssd": 0.05, "mspd": 12.0, "diameter": 0.2, "image_width": 640},
    ]
    rep = average_recall(records)
    table = rep.table()
    assert "AR_MSSD" in table and "mean" in table and "not computed" in table
    out = tmp_path / "errors.csv"
    rep.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("scene_id,im_id,obj_id")
    assert len(lines) == 3

import numpy as np
import pytest

from patchpose.geom import rotation_angle_rad
from patchpose.pipeline import estimate_instance
from patchpose.render import raycast_depth
from patchpose.scenes import (
    DEFAULT_SCENE_CAMERA,
    DatasetError,
    NoiseSpec,
    load_dataset,
    synth_scene,
    write_synth_dataset,
)

from conftest import SMALL_CFG


def test_synth_zero_noise_matches_render_bit_exactly(blob_mesh):
    obs, gt = synth_scene(blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=0)
    render = raycast_depth(blob_mesh, gt.pose, DEFAULT_SCENE_CAMERA)
    assert np.array_equal(obs.depth.data, render.depth.data)
    assert np.array_equal(gt.mask, render.mask)
    assert np.array_equal(obs.mask, render.mask)
    assert gt.visibility_fraction == 1.0


def test_synth_object_fully_inside_frame(blob_mesh):
    for seed in range(5):
        obs, gt = synth_scene(blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=seed)
        m = gt.mask
        assert m.any()
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def test_synth_occluder_removes_requested_fraction(blob_mesh):
    for seed in (1, 2, 3):
        obs, gt = synth_scene(
            blob_mesh,
            DEFAULT_SCENE_CAMERA,
            pose_seed=seed,
            noise=NoiseSpec(occluder_fraction=0.3),
        )
        frac = obs.mask.sum() / gt.mask.sum()
        assert frac == pytest.approx(0.7, abs=0.02)
        assert gt.visibility_fraction == pytest.approx(frac)


def test_synth_depth_noise_statistics(blob_mesh):
    sigma = 0.002
    obs, gt = synth_scene(
        blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=4, noise=NoiseSpec(depth_sigma=sigma)
    )
    clean = raycast_depth(blob_mesh, gt.pose, DEFAULT_SCENE_CAMERA).depth.data
    hit = clean > 0
    resid = obs.depth.data[hit] - clean[hit]
    assert np.std(resid) == pytest.approx(sigma, rel=0.1)
    assert abs(np.mean(resid)) < 3 * sigma / np.sqrt(hit.sum()) * 3


def test_synth_mask_erosion_shrinks_mask(blob_mesh):
    obs, gt = synth_scene(
        blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=5, noise=NoiseSpec(mask_erode=2)
    )
    assert obs.mask.sum() < gt.mask.sum()
    assert not (obs.mask & ~gt.mask).any()


def test_synth_deterministic_per_seed(blob_mesh):
    a_obs, a_gt = synth_scene(blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=6)
    b_obs, b_gt = synth_scene(blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=6)
    assert np.array_equal(a_obs.depth.data, b_obs.depth.data)
    assert np.array_equal(a_gt.pose.rotation, b_gt.pose.rotation)
    assert np.array_equal(a_gt.pose.translation, b_gt.pose.translation)


def test_synth_generation_error_when_object_cannot_fit(blob_mesh):
    from patchpose.geom import CameraIntrinsics
    from patchpose.scenes import SceneGenerationError

    tiny = CameraIntrinsics(550.0, 550.0, 8.0, 8.0, 16, 16)
    with pytest.raises(SceneGenerationError):
        synth_scene(blob_mesh, tiny, pose_seed=0)


# ---------------------------------------------------------------------------
# dataset round trip


def test_dataset_round_trip(tmp_path, blob_mesh):
    root = write_synth_dataset(tmp_path / "ds", blob_mesh, n_scenes=3, seed=9)
    ds = load_dataset(root)
    assert len(ds.images) == 3
    assert ds.diameter(1) == pytest.approx(0.2154, abs=1e-3)
    for im in ds.images:
        assert len(im.instances) == 1
        inst = im.instances[0]
        assert inst.obj_id == 1
        assert inst.mask.any()
        # depth quantization at 0.1 mm
        obs, gt = synth_scene(blob_mesh, DEFAULT_SCENE_CAMERA, pose_seed=9 + im.im_id)
        assert np.max(np.abs(im.depth.data - obs.depth.data)) < 1e-4
        assert inst.gt_pose.almost_equal(gt.pose, tol=1e-9)
    mesh = ds.load_model(1)
    assert len(mesh.vertices) == len(blob_mesh.vertices)
    np.testing.assert_allclose(mesh.vertices, blob_mesh.vertices, atol=1e-7)


def test_dataset_missing_files_reported(tmp_path, blob_mesh):
    root = write_synth_dataset(tmp_path / "ds", blob_mesh, n_scenes=1, seed=0)
    (root / "scene" / "depth" / "000000.png").unlink()
    with pytest.raises(DatasetError, match="depth"):
        load_dataset(root)


def test_dataset_missing_camera_json(tmp_path):
    with pytest.raises(DatasetError, match="scene_camera"):
        load_dataset(tmp_path)


def test_dataset_missing_mask(tmp_path, blob_mesh):
    root = write_synth_dataset(tmp_path / "ds", blob_mesh, n_scenes=1, seed=0)
    (root / "scene" / "mask_visib" / "000000_000000.png").unlink()
    with pytest.raises(DatasetError, match="mask"):
        load_dataset(root)


def test_pipeline_round_trip_through_dataset(tmp_path, blob_mesh, small_db, small_sample):
    # end-to-end: dump to disk, re-load, estimate with oracle descriptors
    root = write_synth_dataset(tmp_path / "ds", blob_mesh, n_scenes=2, seed=20)
    ds = load_dataset(root)
    for im in ds.images:
        inst = im.instances[0]
        pose, diag = estimate_instance(
            small_db, im, inst, small_sample, SMALL_CFG, oracle=True
        )
        assert not diag.fallback
        rot_err = np.degrees(rotation_angle_rad(pose.rotation, inst.gt_pose.rotation))
        trans_err = np.linalg.norm(pose.translation - inst.gt_pose.translation)
        assert rot_err < 5.0
        assert trans_err < 0.05 * small_db.diameter

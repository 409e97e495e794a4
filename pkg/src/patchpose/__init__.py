"""Training-free 6D object pose estimation from patch descriptor templates."""

from .geom import (
    CameraIntrinsics,
    RigidTransform,
    ViewpointSet,
    backproject,
    compose,
    fibonacci_viewpoints,
    invert,
    kabsch,
    project,
    standoff_distance,
)
from .match import CorrespondenceSet, SceneInstance, crop_instance, mutual_matches, select_top_k, similarity_matrix, template_score
from .metrics import ARReport, GroundTruthInstance, SymmetrySet, average_recall, mspd, mssd
from .onboard import (
    PatchGridSpec,
    PcaBasis,
    TemplateDatabase,
    TemplateEntry,
    build_template_database,
    fit_pca,
    load_db,
    load_raw_grid,
    oracle_descriptors,
    project_descriptors,
    save_db,
    save_raw_grid,
    valid_patch_indices,
)
from .pipeline import RunConfig, estimate_dataset, estimate_instance, onboard_object
from .pose import PoseHypothesis, RansacConfig, ransac_kabsch, select_final_pose, weighted_alignment_error
from .render import DepthImage, TemplateRender, TriMesh, load_mesh, mesh_diameter, raycast_depth, render_templates, sample_surface
from .scenes import NoiseSpec, SceneObservation, load_dataset, synth_scene, write_synth_dataset

__version__ = "0.1.0"

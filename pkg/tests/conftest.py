import os

# cap BLAS at one thread so the timing-sensitive tests measure
# single-threaded estimation; must happen before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from patchpose.geom import CameraIntrinsics
from patchpose.onboard import OracleSource, build_template_database
from patchpose.pipeline import RunConfig
from patchpose.render import bumpy_sphere_mesh, sample_surface

# small-but-realistic shared setup: 10x10 patch grid, sparse view sphere
SMALL_CFG = RunConfig(
    alpha=45.0,
    delta=60.0,
    d_pca=48,
    oracle_dim=96,
    image_size=140,
    patch_size=14,
    d_px=112.0,
    top_k=10,
)

TEST_CAMERA = CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)


@pytest.fixture(scope="session")
def blob_mesh():
    return bumpy_sphere_mesh(0.1, 24, 32, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL_CFG


@pytest.fixture(scope="session")
def small_db(blob_mesh):
    cfg = SMALL_CFG
    return build_template_database(
        blob_mesh,
        cfg.alpha,
        cfg.delta,
        cfg.d_pca,
        OracleSource(dim=cfg.oracle_dim, seed=cfg.seed),
        object_id="blob",
        grid=cfg.grid,
        d_px=cfg.d_px,
    )


@pytest.fixture(scope="session")
def small_sample(blob_mesh):
    return sample_surface(blob_mesh, SMALL_CFG.model_sample_size, seed=SMALL_CFG.seed)

"""Template database construction and on-disk formats.

A template database holds, per rendered view, PCA-compressed unit-norm patch
descriptors, the 3D patch centers in the view's camera frame, and the
camera-from-object pose.  Descriptors come either from raw descriptor grid
files ("G6DR", one per view) or from the built-in geometric oracle used for
closed-loop testing.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import CameraIntrinsics, RigidTransform, backproject, fibonacci_base_count
from .render import DepthImage, TriMesh, iter_template_renders, mesh_diameter

DB_MAGIC = b"G6DB"
RAW_MAGIC = b"G6DR"
FORMAT_VERSION = 1

ORACLE_BANDWIDTH = 0.35  # RBF bandwidth in diameter-normalized coordinates


class OnboardError(RuntimeError):
    """Template database construction failure."""


class FormatError(ValueError):
    """Malformed, truncated or corrupted database / descriptor file."""


class InsufficientDataError(ValueError):
    """Not enough samples to fit the requested PCA dimension."""


@dataclass(frozen=True)
class PatchGridSpec:
    """Square patch grid: ``grid = image_size / patch_size`` cells per side."""

    image_size: int = 420
    patch_size: int = 14

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must divide image_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def center_pixel(self, row: int, col: int) -> tuple:
        """(row_px, col_px) of a cell center, integer floor convention."""
        half = self.patch_size // 2
        return row * self.patch_size + half, col * self.patch_size + half


@dataclass
class PcaBasis:
    """Mean vector and orthonormal projection basis (columns = components)."""

    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, D_PCA)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        d, d_pca = self.basis.shape
        if d != self.mean.shape[0] or d_pca > d:
            raise ValueError("basis shape inconsistent with mean")
        gram_err = np.max(np.abs(self.basis.T @ self.basis - np.eye(d_pca)))
        if gram_err >= 1e-6:
            raise ValueError(f"basis columns not orthonormal (err {gram_err:.2e})")

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class TemplateEntry:
    """One rendered view: descriptors (unit rows), 3D patch centers, pose."""

    descriptors: np.ndarray  # (N_i, D_PCA) float32, unit rows
    centers: np.ndarray  # (N_i, 3) float32, template-camera frame
    pose: RigidTransform  # camera-from-object

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        self.centers = np.asarray(self.centers, dtype=np.float32)
        if len(self.descriptors) != len(self.centers):
            raise ValueError("descriptor / center count mismatch")
        if len(self.descriptors) < 1:
            raise ValueError("template entry has no patches")
        norms = np.linalg.norm(self.descriptors.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0)) >= 1e-6:
            raise ValueError("descriptor rows must be unit norm")

    def model_centers(self) -> np.ndarray:
        """Patch centers mapped to the object model frame."""
        return self.pose.inverse().apply(self.centers.astype(np.float64))


@dataclass
class TemplateDatabase:
    """Per-object bank of template entries plus the shared PCA basis."""

    object_id: str
    entries: list
    pca: PcaBasis
    diameter: float
    raw_dim: int
    K_R: CameraIntrinsics
    grid: PatchGridSpec

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")
        dims = {e.descriptors.shape[1] for e in self.entries}
        if len(dims) > 1:
            raise ValueError("entries disagree on descriptor dimension")
        self._stack = None
        self._model_points = None

    @property
    def n_views(self) -> int:
        return len(self.entries)

    @property
    def d_pca(self) -> int:
        return self.pca.output_dim

    def descriptor_stack(self):
        """All template descriptors concatenated, with per-view offsets."""
        if self._stack is None:
            desc = np.concatenate([e.descriptors for e in self.entries], axis=0)
            counts = np.array([len(e.descriptors) for e in self.entries])
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._stack = (np.ascontiguousarray(desc), offsets)
        return self._stack

    def model_point_cloud(self) -> np.ndarray:
        """Union of all model-frame patch centers (a surface sample)."""
        if self._model_points is None:
            self._model_points = np.concatenate(
                [e.model_centers() for e in self.entries], axis=0
            )
        return self._model_points

    def equals(self, other: "TemplateDatabase") -> bool:
        """Field-for-field equality (bit-exact arrays)."""
        if (
            self.object_id != other.object_id
            or self.n_views != other.n_views
            or self.diameter != other.diameter
            or self.raw_dim != other.raw_dim
            or self.K_R != other.K_R
            or self.grid != other.grid
        ):
            return False
        if not (
            np.array_equal(self.pca.mean, other.pca.mean)
            and np.array_equal(self.pca.basis, other.pca.basis)
        ):
            return False
        for a, b in zip(self.entries, other.entries):
            if not (
                np.array_equal(a.descriptors, b.descriptors)
                and np.array_equal(a.centers, b.centers)
                and np.array_equal(a.pose.rotation, b.pose.rotation)
                and np.array_equal(a.pose.translation, b.pose.translation)
            ):
                return False
        return True


# ---------------------------------------------------------------------------
# patch extraction


def valid_patch_indices(mask: np.ndarray, grid: PatchGridSpec) -> list:
    """Grid cells whose center pixel lands on a mask-true pixel."""
    if mask.shape != (grid.image_size, grid.image_size):
        raise ValueError("mask size does not match the grid spec")
    half = grid.patch_size // 2
    g = grid.grid
    centers = np.arange(g) * grid.patch_size + half
    hit = mask[np.ix_(centers, centers)]
    rows, cols = np.nonzero(hit)
    return list(zip(rows.tolist(), cols.tolist()))


def lift_patch_centers(
    depth: DepthImage, indices, K_R: CameraIntrinsics, grid: PatchGridSpec | None = None
) -> np.ndarray:
    """Back-project patch-center pixels using the rendered depth."""
    grid = grid or PatchGridSpec(depth.width, 14)
    half = grid.patch_size // 2
    if not indices:
        return np.empty((0, 3), dtype=np.float64)
    rows = np.array([r for r, _ in indices])
    cols = np.array([c for _, c in indices])
    v_px = rows * grid.patch_size + half
    u_px = cols * grid.patch_size + half
    z = depth.data[v_px, u_px]
    if np.any(z <= 0):
        raise OnboardError("zero depth at a valid patch center")
    return backproject(u_px, v_px, z, K_R)


# ---------------------------------------------------------------------------
# PCA


def fit_pca(descriptors: np.ndarray, d_pca: int, center: bool = True) -> PcaBasis:
    """Mean-centered PCA of descriptor rows.

    Components are ordered by descending eigenvalue; each column's sign is
    fixed so its largest-magnitude entry is positive.  ``center=False``
    reproduces the strict uncentered projection (mean stored as zeros).
    """
    x = np.asarray(descriptors)
    m, d = x.shape
    if m <= d_pca:
        raise InsufficientDataError(f"need more than {d_pca} samples, got {m}")
    if d_pca > d:
        raise InsufficientDataError(f"d_pca {d_pca} exceeds descriptor dim {d}")
    mean = np.zeros(d)
    if center:
        mean = x.astype(np.float64).mean(axis=0) if m <= 65536 else _chunked_mean(x)
    cov = _chunked_cov(x, mean)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_pca]
    basis = evecs[:, order]
    # deterministic sign: largest-magnitude component of each column positive
    peaks = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[peaks, np.arange(d_pca)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    return PcaBasis(mean=mean, basis=basis)


def _chunked_mean(x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    total = np.zeros(x.shape[1], dtype=np.float64)
    for i in range(0, len(x), chunk):
        total += x[i : i + chunk].astype(np.float64).sum(axis=0)
    return total / len(x)


def _chunked_cov(x: np.ndarray, mean: np.ndarray, chunk: int = 65536) -> np.ndarray:
    d = x.shape[1]
    cov = np.zeros((d, d), dtype=np.float64)
    for i in range(0, len(x), chunk):
        c = x[i : i + chunk].astype(np.float64) - mean
        cov += c.T @ c
    return cov / (len(x) - 1)


def project_descriptors(feats: np.ndarray, pca: PcaBasis):
    """Project raw descriptors and L2-normalize rows.

    Returns ``(projected, kept)`` where ``kept`` indexes the input rows that
    survived; rows that project to zero norm are dropped with a warning.
    """
    f = np.asarray(feats, dtype=np.float64)
    if f.shape[1] != pca.input_dim:
        raise ValueError("descriptor dimension does not match the PCA basis")
    proj = (f - pca.mean) @ pca.basis
    norms = np.linalg.norm(proj, axis=1)
    kept = np.nonzero(norms > 0)[0]
    if len(kept) < len(f):
        warnings.warn(f"dropped {len(f) - len(kept)} zero-norm projected descriptors")
    proj = proj[kept] / norms[kept, None]
    return proj.astype(np.float32), kept


# ---------------------------------------------------------------------------
# oracle descriptors


def oracle_descriptors(
    points_model_frame: np.ndarray, d: float, dim: int, seed: int
) -> np.ndarray:
    """Deterministic geometry-derived descriptors (test stand-in for a ViT).

    Coordinates are normalized by the object diameter, passed through a
    seeded random projection with sinusoidal lifting (random Fourier
    features of an RBF kernel), and L2-normalized, so cosine similarity
    decays smoothly with 3D distance on the surface.
    """
    if dim < 16:
        raise ValueError("descriptor dimension must be >= 16")
    pts = np.asarray(points_model_frame, dtype=np.float64).reshape(-1, 3) / d
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=1.0 / ORACLE_BANDWIDTH, size=(dim, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=dim)
    feats = np.cos(pts @ w.T + phase)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return feats.astype(np.float32)


class OracleSource:
    """Descriptor source computing oracle features from model-frame points."""

    def __init__(self, dim: int, seed: int):
        self.dim = dim
        self.seed = seed

    def view_descriptors(self, view_index, model_points, indices, grid):
        return oracle_descriptors(model_points, self._diameter, self.dim, self.seed)

    def bind(self, diameter: float):
        self._diameter = diameter
        return self


class DirectorySource:
    """Descriptor source reading one raw grid file ("G6DR") per view."""

    def __init__(self, directory):
        self.files = sorted(Path(directory).glob("*.g6dr"))
        self.dim = None

    def check_count(self, n_views: int):
        if len(self.files) != n_views:
            raise OnboardError(
                f"descriptor directory has {len(self.files)} files, expected {n_views}"
            )

    def view_descriptors(self, view_index, model_points, indices, grid):
        arr, _meta = load_raw_grid(self.files[view_index])
        if arr.shape[0] != grid.grid or arr.shape[1] != grid.grid:
            raise OnboardError(
                f"{self.files[view_index].name}: grid {arr.shape[:2]} does not "
                f"match the {grid.grid}x{grid.grid} patch grid"
            )
        if self.dim is None:
            self.dim = arr.shape[2]
        elif arr.shape[2] != self.dim:
            raise OnboardError("descriptor dimension differs between views")
        rows = np.array([r for r, _ in indices])
        cols = np.array([c for _, c in indices])
        return arr[rows, cols]


def default_template_intrinsics(grid: PatchGridSpec) -> CameraIntrinsics:
    """Square rendering camera matching the patch grid resolution."""
    size = grid.image_size
    f = 1.5 * size
    return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)


def build_template_database(
    mesh: TriMesh,
    alpha: float,
    delta: float,
    d_pca: int,
    descriptor_source,
    *,
    object_id: str = "object",
    grid: PatchGridSpec | None = None,
    K_R: CameraIntrinsics | None = None,
    d_px: float = 336.0,
    center_pca: bool = True,
) -> TemplateDatabase:
    """Render all viewpoints and assemble the template database.

    ``descriptor_source`` is an ``OracleSource`` or ``DirectorySource``.
    PCA is fit on the union of all views' foreground descriptors, then each
    view's bank is projected and unit-normalized.
    """
    grid = grid or PatchGridSpec()
    K_R = K_R or default_template_intrinsics(grid)
    if K_R.width != grid.image_size or K_R.height != grid.image_size:
        raise OnboardError("rendering intrinsics must match the patch grid size")
    diameter = mesh_diameter(mesh)
    if isinstance(descriptor_source, OracleSource):
        descriptor_source.bind(diameter)
    if isinstance(descriptor_source, DirectorySource):
        n_views = fibonacci_base_count(alpha) * int(round(360.0 / delta))
        descriptor_source.check_count(n_views)

    raw_banks = []
    center_banks = []
    poses = []
    half = grid.patch_size // 2
    for i, render in enumerate(iter_template_renders(mesh, alpha, delta, d_px, K_R)):
        indices = valid_patch_indices(render.mask, grid)
        if not indices:
            raise OnboardError(f"view {i} has no valid patches; increase d_px")
        rows = np.array([r for r, _ in indices])
        cols = np.array([c for _, c in indices])
        v_px = rows * grid.patch_size + half
        u_px = cols * grid.patch_size + half
        z = render.depth.data[v_px, u_px]
        if np.any(z <= 0):
            raise OnboardError(f"view {i}: zero depth under a mask-true patch center")
        centers = backproject(u_px, v_px, z, K_R)
        model_points = render.pose.inverse().apply(centers)
        feats = descriptor_source.view_descriptors(i, model_points, indices, grid)
        if len(feats) != len(indices):
            raise OnboardError(f"view {i}: descriptor row count mismatch")
        raw_banks.append(np.asarray(feats, dtype=np.float32))
        center_banks.append(centers)
        poses.append(render.pose)

    all_raw = np.concatenate(raw_banks, axis=0)
    pca = fit_pca(all_raw, d_pca, center=center_pca)
    # quantize to storage precision up front so save/load round-trips bit-exactly
    pca = PcaBasis(
        mean=pca.mean.astype(np.float32).astype(np.float64),
        basis=pca.basis.astype(np.float32).astype(np.float64),
    )
    entries = []
    for feats, centers, pose in zip(raw_banks, center_banks, poses):
        desc, kept = project_descriptors(feats, pca)
        entries.append(
            TemplateEntry(descriptors=desc, centers=centers[kept], pose=pose)
        )
    return TemplateDatabase(
        object_id=object_id,
        entries=entries,
        pca=pca,
        diameter=diameter,
        raw_dim=all_raw.shape[1],
        K_R=K_R,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# binary formats (little-endian throughout)


def save_db(db: TemplateDatabase, path) -> None:
    """Write a template database ("G6DB" v1) with a trailing payload CRC32."""
    oid = db.object_id.encode("utf-8")
    if len(oid) > 255:
        raise ValueError("object_id longer than 255 bytes")
    parts = [struct.pack("<B", len(oid)), oid]
    parts.append(
        struct.pack(
            "<III", db.raw_dim, db.d_pca, db.n_views
        )
    )
    k = db.K_R
    parts.append(struct.pack("<5d", db.diameter, k.fx, k.fy, k.cx, k.cy))
    parts.append(struct.pack("<III", k.width, k.height, db.grid.patch_size))
    parts.append(db.pca.mean.astype("<f4").tobytes())
    parts.append(np.asfortranarray(db.pca.basis.astype("<f4")).tobytes(order="F"))
    for e in db.entries:
        parts.append(struct.pack("<I", len(e.descriptors)))
        rt = np.hstack([e.pose.rotation, e.pose.translation[:, None]])
        parts.append(rt.astype("<f8").tobytes())
        parts.append(np.ascontiguousarray(e.descriptors, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(e.centers, dtype="<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count, shape=None):
        arr = np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype)
        return arr.reshape(shape) if shape is not None else arr


def load_db(path) -> TemplateDatabase:
    """Read a "G6DB" file, verifying magic, version and checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise FormatError("truncated file")
    if blob[:4] != DB_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {DB_MAGIC!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    payload = blob[6:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc_stored:
        raise FormatError("checksum failure")
    r = _Reader(payload)
    (oid_len,) = r.unpack("<B")
    object_id = r.take(oid_len).decode("utf-8")
    raw_dim, d_pca, n_views = r.unpack("<III")
    diameter, fx, fy, cx, cy = r.unpack("<5d")
    width, height, patch = r.unpack("<III")
    mean = r.array("<f4", raw_dim).astype(np.float64)
    basis = (
        r.array("<f4", raw_dim * d_pca)
        .reshape(d_pca, raw_dim)  # column-major payload: transpose back
        .T.astype(np.float64)
    )
    entries = []
    for _ in range(n_views):
        (n_i,) = r.unpack("<I")
        rt = r.array("<f8", 12, shape=(3, 4))
        desc = r.array("<f4", n_i * d_pca, shape=(n_i, d_pca))
        centers = r.array("<f4", n_i * 3, shape=(n_i, 3))
        entries.append(
            TemplateEntry(
                descriptors=desc.copy(),
                centers=centers.copy(),
                pose=RigidTransform(rt[:, :3], rt[:, 3]),
            )
        )
    if r.pos != len(payload):
        raise FormatError("trailing bytes after last view block")
    return TemplateDatabase(
        object_id=object_id,
        entries=entries,
        pca=PcaBasis(mean=mean, basis=basis),
        diameter=diameter,
        raw_dim=raw_dim,
        K_R=CameraIntrinsics(fx, fy, cx, cy, width, height),
        grid=PatchGridSpec(width, patch),
    )


def save_raw_grid(grid_array: np.ndarray, path, patch: int, layer: int = 0) -> None:
    """Write a raw descriptor grid ("G6DR" v1) with a trailing payload CRC32."""
    arr = np.ascontiguousarray(grid_array, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("grid must be (grid_h, grid_w, D)")
    grid_h, grid_w, dim = arr.shape
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    payload = struct.pack("<HHIHH", grid_w, grid_h, dim, patch, layer) + arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_raw_grid(path):
    """Read a "G6DR" file; returns ``(grid_h x grid_w x D array, meta dict)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise FormatError("truncated file")
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {RAW_MAGIC!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    payload = blob[6:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc_stored:
        raise FormatError("checksum failure")
    if len(payload) < 12:
        raise FormatError("truncated header")
    grid_w, grid_h, dim, patch, layer = struct.unpack("<HHIHH", payload[:12])
    body = payload[12:]
    expected = grid_h * grid_w * dim * 4
    if len(body) != expected:
        raise FormatError(f"payload size {len(body)} != expected {expected}")
    arr = np.frombuffer(body, dtype="<f4").reshape(grid_h, grid_w, dim).copy()
    return arr, {"patch": patch, "layer": layer}

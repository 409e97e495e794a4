"""Triangle meshes and CPU depth rendering.

Meshes are loaded from ASCII OBJ / ASCII PLY, ray-cast with a numba
Moeller-Trumbore kernel over a median-split BVH.  The BVH is built once per
mesh in the model frame; rays are transformed per view, so rendering many
viewpoints shares one acceleration structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from numba import njit, prange
from scipy.spatial import ConvexHull

from .geom import (
    CameraIntrinsics,
    RigidTransform,
    fibonacci_viewpoints,
    standoff_distance,
)

_BRUTE_FORCE_DIAMETER_LIMIT = 5000
_BVH_LEAF_SIZE = 4


class MeshError(ValueError):
    """Mesh parsing or validation failure."""


class FramingError(RuntimeError):
    """A rendered mask touches the image border (standoff too close)."""


@dataclass
class TriMesh:
    """Triangle mesh: vertices (V, 3) meters, faces (F, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray
    _bvh: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.shape[0] < 1:
            raise MeshError("mesh has no faces")
        if not np.all(np.isfinite(v)):
            raise MeshError("mesh has non-finite vertex coordinates")
        if f.min(initial=0) < 0 or f.max(initial=-1) >= v.shape[0]:
            raise MeshError("face index out of range")
        self.vertices = v
        self.faces = f

    @property
    def center(self) -> np.ndarray:
        """Center of the axis-aligned bounding box."""
        return 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))

    def bvh(self) -> tuple:
        if self._bvh is None:
            self._bvh = _build_bvh(self.vertices, self.faces)
        return self._bvh


@dataclass
class DepthImage:
    """Per-pixel depth in meters, 0 where no surface was hit."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64).reshape(self.height, self.width)
        if not np.all(np.isfinite(d)) or d.min(initial=0.0) < 0:
            raise ValueError("depth values must be finite and >= 0")
        self.data = d


@dataclass
class TemplateRender:
    depth: DepthImage
    mask: np.ndarray  # bool (height, width)
    pose: RigidTransform  # camera-from-object

    def __post_init__(self):
        if not np.array_equal(self.mask, self.depth.data > 0):
            # mask may only shrink the hit set, never add to it
            extra = self.mask & ~(self.depth.data > 0)
            if extra.any():
                raise ValueError("mask contains pixels without depth")


# ---------------------------------------------------------------------------
# mesh IO


def load_mesh(path, scale: float = 1.0) -> TriMesh:
    """Load an ASCII OBJ or ASCII PLY mesh with triangular faces.

    Coordinates are multiplied by ``scale`` (use 0.001 for millimeter
    models).
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".obj":
        verts, faces = _parse_obj(text)
    elif path.suffix.lower() == ".ply":
        verts, faces = _parse_ply(text)
    else:
        raise MeshError(f"unsupported mesh format: {path.suffix}")
    if not verts:
        raise MeshError("mesh has no vertices")
    return TriMesh(np.asarray(verts) * scale, np.asarray(faces))


def _parse_obj(text: str):
    verts, faces = [], []
    for ln, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"line {ln}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MeshError(f"line {ln}: bad vertex coordinate") from None
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise MeshError(f"line {ln}: bad face index {tok!r}") from None
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) != 3:
                raise MeshError(f"line {ln}: only triangular faces are supported")
            faces.append(idx)
    return verts, faces


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError("line 1: not a PLY file")
    n_vert = n_face = None
    vert_props = []
    elements = []  # (name, count) in header order
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MeshError(f"line {i}: only ASCII PLY is supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2])))
            if parts[1] == "vertex":
                n_vert = int(parts[2])
            elif parts[1] == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and elements and elements[-1][0] == "vertex":
            if parts[1] != "list":
                vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    else:
        raise MeshError("missing end_header")
    if n_vert is None or n_face is None:
        raise MeshError("PLY header lacks vertex or face element")
    try:
        ix, iy, iz = (vert_props.index(c) for c in ("x", "y", "z"))
    except ValueError:
        raise MeshError("PLY vertex element lacks x/y/z properties") from None

    verts, faces = [], []
    for name, count in elements:
        for _ in range(count):
            if i >= len(lines):
                raise MeshError(f"line {i + 1}: unexpected end of file")
            parts = lines[i].split()
            ln = i + 1
            i += 1
            if name == "vertex":
                try:
                    verts.append([float(parts[ix]), float(parts[iy]), float(parts[iz])])
                except (ValueError, IndexError):
                    raise MeshError(f"line {ln}: bad vertex row") from None
            elif name == "face":
                try:
                    k = int(parts[0])
                    idx = [int(p) for p in parts[1 : 1 + k]]
                except (ValueError, IndexError):
                    raise MeshError(f"line {ln}: bad face row") from None
                if k != 3:
                    raise MeshError(f"line {ln}: only triangular faces are supported")
                faces.append(idx)
    return verts, faces


def save_mesh_ply(mesh: TriMesh, path, scale: float = 1.0) -> None:
    """Write an ASCII PLY file, coordinates multiplied by ``scale``."""
    v = mesh.vertices * scale
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(v)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for p in v:
            fh.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# geometry helpers


def mesh_diameter(mesh: TriMesh) -> float:
    """Maximum pairwise vertex distance.

    Exact: brute force for small vertex counts, otherwise brute force over
    the convex hull vertices (the maximum is attained on the hull).
    """
    v = mesh.vertices
    if len(v) < 2:
        raise ValueError("diameter needs at least two vertices")
    if len(v) > _BRUTE_FORCE_DIAMETER_LIMIT:
        hull = ConvexHull(v)
        v = v[hull.vertices]
    best = 0.0
    for i in range(0, len(v), 512):
        chunk = v[i : i + 512]
        d2 = np.sum((chunk[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Uniform area-weighted surface sample of ``n`` points (seeded)."""
    v = mesh.vertices
    tri = v[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    which = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    t = tri[which]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


# ---------------------------------------------------------------------------
# primitive meshes (tests and synthetic scenes)


def box_mesh(sx: float, sy: float, sz: float) -> TriMesh:
    """Axis-aligned box centered at the origin."""
    hx, hy, hz = sx / 2, sy / 2, sz / 2
    verts = np.array(
        [[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)]
    )
    # vertex index = 4*xi + 2*yi + zi
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return TriMesh(verts, np.asarray(faces))


def uv_sphere_mesh(radius: float, rings: int = 24, segments: int = 32) -> TriMesh:
    """Latitude-longitude sphere centered at the origin."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        phi = math.pi * i / rings
        for j in range(segments):
            theta = 2 * math.pi * j / segments
            verts.append(
                [
                    radius * math.sin(phi) * math.cos(theta),
                    radius * math.sin(phi) * math.sin(theta),
                    radius * math.cos(phi),
                ]
            )
    verts.append([0.0, 0.0, -radius])
    top, bottom = 0, len(verts) - 1
    ring = lambda i, j: 1 + (i - 1) * segments + (j % segments)
    faces = []
    for j in range(segments):
        faces.append([top, ring(1, j), ring(1, j + 1)])
        faces.append([bottom, ring(rings - 1, j + 1), ring(rings - 1, j)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    return TriMesh(np.asarray(verts), np.asarray(faces))


def bumpy_sphere_mesh(
    radius: float, rings: int = 24, segments: int = 32, bump: float = 0.15, seed: int = 0
) -> TriMesh:
    """Sphere with smooth seeded radial bumps; breaks rotational symmetry."""
    base = uv_sphere_mesh(1.0, rings, segments)
    rng = np.random.default_rng(seed)
    lobes = rng.normal(size=(6, 3))
    lobes /= np.linalg.norm(lobes, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * math.pi, size=6)
    freqs = rng.uniform(1.5, 3.5, size=6)
    dirs = base.vertices
    mod = np.zeros(len(dirs))
    for lobe, ph, fr in zip(lobes, phases, freqs):
        mod += np.cos(fr * (dirs @ lobe) * math.pi + ph)
    mod = 1.0 + bump * mod / 6.0
    return TriMesh(dirs * (radius * mod)[:, None], base.faces.copy())


# ---------------------------------------------------------------------------
# BVH construction (numpy) and traversal (numba)


def _build_bvh(vertices: np.ndarray, faces: np.ndarray):
    tri = vertices[faces]  # (F, 3, 3)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    centroid = tri.mean(axis=1)

    node_min, node_max = [], []
    node_left, node_right = [], []
    node_start, node_count = [], []
    order = []

    def build(idx: np.ndarray) -> int:
        node = len(node_min)
        node_min.append(lo[idx].min(axis=0))
        node_max.append(hi[idx].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        if len(idx) <= _BVH_LEAF_SIZE:
            node_start[node] = len(order)
            node_count[node] = len(idx)
            order.extend(idx.tolist())
            return node
        span = node_max[node] - node_min[node]
        axis = int(np.argmax(span))
        mid = len(idx) // 2
        part = idx[np.argpartition(centroid[idx, axis], mid)]
        left = build(part[:mid])
        right = build(part[mid:])
        node_left[node] = left
        node_right[node] = right
        return node

    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        build(np.arange(len(faces)))
    finally:
        sys.setrecursionlimit(limit)

    order = np.asarray(order, dtype=np.int64)
    tri_ordered = tri[order]
    v0 = np.ascontiguousarray(tri_ordered[:, 0])
    e1 = np.ascontiguousarray(tri_ordered[:, 1] - tri_ordered[:, 0])
    e2 = np.ascontiguousarray(tri_ordered[:, 2] - tri_ordered[:, 0])
    return (
        np.asarray(node_min),
        np.asarray(node_max),
        np.asarray(node_left, dtype=np.int64),
        np.asarray(node_right, dtype=np.int64),
        np.asarray(node_start, dtype=np.int64),
        np.asarray(node_count, dtype=np.int64),
        v0,
        e1,
        e2,
    )


@njit(cache=True, inline="always")
def _slab_hit(bmin, bmax, ox, oy, oz, ix, iy, iz, tmax):
    t0 = 1e-12
    t1 = tmax
    for k in range(3):
        o = ox if k == 0 else (oy if k == 1 else oz)
        inv = ix if k == 0 else (iy if k == 1 else iz)
        lo = (bmin[k] - o) * inv
        hi = (bmax[k] - o) * inv
        if lo > hi:
            lo, hi = hi, lo
        if lo > t0:
            t0 = lo
        if hi < t1:
            t1 = hi
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def _cast_ray(
    node_min, node_max, left, right, start, count, v0, e1, e2, ox, oy, oz, dx, dy, dz
):
    best = np.inf
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(node_min[node], node_max[node], ox, oy, oz, ix, iy, iz, best):
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                # Moeller-Trumbore
                px = dy * e2[i, 2] - dz * e2[i, 1]
                py = dz * e2[i, 0] - dx * e2[i, 2]
                pz = dx * e2[i, 1] - dy * e2[i, 0]
                det = e1[i, 0] * px + e1[i, 1] * py + e1[i, 2] * pz
                if abs(det) < 1e-14:
                    continue
                inv = 1.0 / det
                tx = ox - v0[i, 0]
                ty = oy - v0[i, 1]
                tz = oz - v0[i, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < -1e-10 or u > 1.0 + 1e-10:
                    continue
                qx = ty * e1[i, 2] - tz * e1[i, 1]
                qy = tz * e1[i, 0] - tx * e1[i, 2]
                qz = tx * e1[i, 1] - ty * e1[i, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < -1e-10 or u + v > 1.0 + 1e-10:
                    continue
                t = (e2[i, 0] * qx + e2[i, 1] * qy + e2[i, 2] * qz) * inv
                if 1e-9 < t < best:
                    best = t
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best


@njit(cache=True, parallel=True)
def _render_depth(
    node_min, node_max, left, right, start, count, v0, e1, e2,
    rot_ct, origin, fx, fy, cx, cy, width, height, out,
):
    # rot_ct: camera-to-model rotation (model_dir = rot_ct @ cam_dir)
    for r in prange(height):
        for c in range(width):
            dxc = (c - cx) / fx
            dyc = (r - cy) / fy
            dx = rot_ct[0, 0] * dxc + rot_ct[0, 1] * dyc + rot_ct[0, 2]
            dy = rot_ct[1, 0] * dxc + rot_ct[1, 1] * dyc + rot_ct[1, 2]
            dz = rot_ct[2, 0] * dxc + rot_ct[2, 1] * dyc + rot_ct[2, 2]
            t = _cast_ray(
                node_min, node_max, left, right, start, count, v0, e1, e2,
                origin[0], origin[1], origin[2], dx, dy, dz,
            )
            out[r, c] = 0.0 if t == np.inf else t


def raycast_depth(mesh: TriMesh, pose: RigidTransform, K: CameraIntrinsics) -> TemplateRender:
    """Render a depth map of ``mesh`` under a camera-from-object pose.

    The ray through pixel (u, v) is the back-projection ray of integer pixel
    coordinates (u, v); recorded depth is camera-frame z of the nearest hit
    (0 on miss), so ``backproject(u, v, depth[v, u])`` lies exactly on the
    surface.
    """
    bvh = mesh.bvh()
    inv = pose.inverse()
    origin = inv.translation  # camera center in model frame
    out = np.empty((K.height, K.width), dtype=np.float64)
    _render_depth(
        *bvh,
        np.ascontiguousarray(inv.rotation),
        np.ascontiguousarray(origin),
        K.fx, K.fy, K.cx, K.cy, K.width, K.height, out,
    )
    depth = DepthImage(K.width, K.height, out)
    return TemplateRender(depth=depth, mask=out > 0, pose=pose)


# ---------------------------------------------------------------------------
# template rendering


def template_pose(view: RigidTransform, mesh: TriMesh, z: float) -> RigidTransform:
    """Place the mesh bounding-box center at depth ``z`` on the optical axis."""
    t = np.array([0.0, 0.0, z]) - view.rotation @ mesh.center
    return RigidTransform(view.rotation, t)


def iter_template_renders(
    mesh: TriMesh, alpha: float, delta: float, d_px: float, K_R: CameraIntrinsics
) -> Iterator[TemplateRender]:
    """Stream renders for every Fibonacci viewpoint at the standoff distance."""
    d = mesh_diameter(mesh)
    z = standoff_distance(d, d_px, K_R)
    views = fibonacci_viewpoints(alpha, delta)
    for i, view in enumerate(views.views):
        render = raycast_depth(mesh, template_pose(view, mesh, z), K_R)
        m = render.mask
        if m[0, :].any() or m[-1, :].any() or m[:, 0].any() or m[:, -1].any():
            raise FramingError(
                f"view {i}: mask touches the image border; reduce d_px (= {d_px})"
            )
        yield render


def render_templates(
    mesh: TriMesh, alpha: float, delta: float, d_px: float, K_R: CameraIntrinsics
) -> list:
    """Render all templates eagerly. See ``iter_template_renders``."""
    return list(iter_template_renders(mesh, alpha, delta, d_px, K_R))

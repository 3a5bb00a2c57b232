"""Truncated SDF voxel grids and the mesh machinery around them.

Conventions, fixed repo-wide:

- World frame is the unit cube [-0.5, 0.5]^3. A grid of resolution D has
  voxel_size = 1/D and origin at the center of voxel (0, 0, 0), i.e.
  (-0.5 + voxel_size/2) on each axis.
- ``values`` is a (D, D, D) float32 array indexed [ix, iy, iz].
- Negative values inside the surface; every stored value satisfies
  |v| <= tau_trunc.
- Patches are enumerated lexicographically by (z, y, x) patch coordinate:
  z slowest, x fastest. ``patch_grid_coords`` is the single source of truth.
- Serialized grids ("VSDF") store values x-fastest, which for the in-memory
  layout above is Fortran raveling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voxdiff import kernels


def default_truncation(resolution: int) -> float:
    """Three voxels of truncation band; keeps iso interpolation smooth."""
    return 3.0 / resolution


def default_origin(resolution: int) -> np.ndarray:
    h = 1.0 / resolution
    return np.full(3, -0.5 + 0.5 * h)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TsdfGrid:
    values: np.ndarray
    tau_trunc: float
    voxel_size: float
    origin: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"values must be cubic (D,D,D), got {v.shape}")
        if self.tau_trunc <= 0:
            raise ValueError("tau_trunc must be positive")
        if not np.isfinite(v).all():
            raise ValueError("grid contains non-finite values")
        bound = self.tau_trunc * (1.0 + 1e-5)
        if np.abs(v).max() > bound:
            raise ValueError(
                f"|values| exceed tau_trunc: max {np.abs(v).max():.6g} > {self.tau_trunc:.6g}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (D, D, D, 3)."""
        D = self.resolution
        ax = self.origin[None, :] + np.arange(D)[:, None] * self.voxel_size
        gx, gy, gz = np.meshgrid(ax[:, 0], ax[:, 1], ax[:, 2], indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class PatchSequence:
    """Split view of a TsdfGrid: (N, P, P, P) with N = (D/P)^3."""

    patches: np.ndarray
    grid_resolution: int
    tau_trunc: float
    voxel_size: float
    origin: np.ndarray

    def __post_init__(self):
        p = self.patches
        if p.ndim != 4 or len(set(p.shape[1:])) != 1:
            raise ValueError(f"patches must be (N,P,P,P), got {p.shape}")
        side = round(len(p) ** (1 / 3))
        if side ** 3 != len(p):
            raise ValueError(f"patch count {len(p)} is not a perfect cube")
        if side * p.shape[1] != self.grid_resolution:
            raise ValueError("patch count inconsistent with grid resolution")

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def count(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class OccupancyGrid:
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.dtype != np.bool_ or self.bits.ndim != 3:
            raise ValueError("bits must be a 3D boolean array")

    @property
    def resolution(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) and not np.isfinite(v).all():
            raise ValueError("mesh has non-finite vertices")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


# ---------------------------------------------------------------------------
# patch order
# ---------------------------------------------------------------------------


def patch_grid_coords(side: int) -> np.ndarray:
    """(N, 3) integer (px, py, pz) for patch index n; z slowest, x fastest."""
    n = np.arange(side ** 3)
    return np.stack([n % side, (n // side) % side, n // side ** 2], axis=1)


def split_patches(g: TsdfGrid, patch_size: int) -> PatchSequence:
    D, P = g.resolution, patch_size
    if P <= 0 or D % P != 0:
        raise ValueError(f"patch size {P} does not divide resolution {D}")
    G = D // P
    blocks = g.values.reshape(G, P, G, P, G, P)
    # axes: (px, ox, py, oy, pz, oz) -> (pz, py, px, ox, oy, oz)
    patches = blocks.transpose(4, 2, 0, 1, 3, 5).reshape(G ** 3, P, P, P).copy()
    return PatchSequence(patches, D, g.tau_trunc, g.voxel_size, g.origin)


def merge_patches(ps: PatchSequence) -> TsdfGrid:
    G = round(ps.count ** (1 / 3))
    if G ** 3 != ps.count:
        raise ValueError(f"patch count {ps.count} is not a perfect cube")
    P = ps.patch_size
    blocks = ps.patches.reshape(G, G, G, P, P, P)  # (pz, py, px, ox, oy, oz)
    values = blocks.transpose(2, 3, 1, 4, 0, 5).reshape(G * P, G * P, G * P).copy()
    return TsdfGrid(values, ps.tau_trunc, ps.voxel_size, ps.origin)


def to_occupancy(g: TsdfGrid, resolution: int) -> OccupancyGrid:
    """Downsample to occupancy: a block is occupied if any source voxel is."""
    D, R = g.resolution, resolution
    if R <= 0 or D % R != 0:
        raise ValueError(f"target resolution {R} does not divide {D}")
    b = D // R
    occ = g.values < 0
    bits = occ.reshape(R, b, R, b, R, b).any(axis=(1, 3, 5))
    return OccupancyGrid(bits)


# ---------------------------------------------------------------------------
# analytic SDF primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        d = points - np.asarray(self.center)
        return np.linalg.norm(d, axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    half_extents: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Union:
    parts: tuple

    def __init__(self, *parts):
        object.__setattr__(self, "parts", tuple(parts))
        if not self.parts:
            raise ValueError("union needs at least one part")

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        out = self.parts[0].evaluate(points)
        for part in self.parts[1:]:
            out = np.minimum(out, part.evaluate(points))
        return out


@dataclass(frozen=True)
class Difference:
    base: object
    cut: object

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return np.maximum(self.base.evaluate(points), -self.cut.evaluate(points))


def primitive_from_spec(spec: dict):
    """Build a primitive tree from plain data (dataset manifests, CLI)."""
    kind = spec.get("type")
    if kind == "sphere":
        return Sphere(float(spec["radius"]), tuple(spec.get("center", (0, 0, 0))))
    if kind == "box":
        return Box(tuple(spec["half_extents"]), tuple(spec.get("center", (0, 0, 0))))
    if kind == "union":
        return Union(*[primitive_from_spec(s) for s in spec["parts"]])
    if kind == "difference":
        return Difference(primitive_from_spec(spec["base"]),
                          primitive_from_spec(spec["cut"]))
    raise ValueError(f"unknown primitive type: {kind!r}")


def primitive_to_spec(prim) -> dict:
    if isinstance(prim, Sphere):
        return {"type": "sphere", "radius": prim.radius, "center": list(prim.center)}
    if isinstance(prim, Box):
        return {"type": "box", "half_extents": list(prim.half_extents),
                "center": list(prim.center)}
    if isinstance(prim, Union):
        return {"type": "union", "parts": [primitive_to_spec(p) for p in prim.parts]}
    if isinstance(prim, Difference):
        return {"type": "difference", "base": primitive_to_spec(prim.base),
                "cut": primitive_to_spec(prim.cut)}
    raise ValueError(f"unknown primitive: {type(prim).__name__}")


def analytic_sdf(primitive, resolution: int, tau_trunc: float | None = None) -> TsdfGrid:
    """Sample a primitive's exact SDF at voxel centers, clamped to the band."""
    D = resolution
    if tau_trunc is None:
        tau_trunc = default_truncation(D)
    origin = default_origin(D)
    h = 1.0 / D
    ax = origin[0] + np.arange(D) * h
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    sdf = primitive.evaluate(pts)
    values = np.clip(sdf, -tau_trunc, tau_trunc).astype(np.float32)
    return TsdfGrid(values, tau_trunc, h, origin)


# ---------------------------------------------------------------------------
# meshes: construction, voxelization, iso-surface extraction
# ---------------------------------------------------------------------------


def box_mesh(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    hx, hy, hz = half_extents
    cx, cy, cz = center
    verts = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ]) + np.array([cx, cy, cz])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ])
    return TriangleMesh(verts, faces)


def icosphere(radius: float = 0.5, center=(0.0, 0.0, 0.0),
              subdivisions: int = 3) -> TriangleMesh:
    """Geodesic sphere via repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center)
    return TriangleMesh(v, np.array(faces))


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box and scale the longest axis to 0.9 world units."""
    if len(mesh.vertices) == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = (hi - lo).max()
    if extent <= 0:
        raise ValueError("mesh has zero extent")
    scale = 0.9 / extent
    centered = (mesh.vertices - (lo + hi) / 2.0) * scale
    return TriangleMesh(centered, mesh.faces)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge used exactly twice, once per direction."""
    if len(mesh.faces) == 0:
        return False
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    V = len(mesh.vertices)
    keys = edges[:, 0] * V + edges[:, 1]
    rev = edges[:, 1] * V + edges[:, 0]
    uk, counts = np.unique(keys, return_counts=True)
    if (counts != 1).any():
        return False
    return np.array_equal(uk, np.unique(rev))


def voxelize_mesh(mesh: TriangleMesh, resolution: int,
                  tau_trunc: float | None = None,
                  sign_rule: str = "winding") -> TsdfGrid:
    """Sample a truncated signed distance field from a triangle mesh.

    The mesh is normalized into the unit cube (5% padding) first. Distances
    are exact point-to-triangle; sign comes from the generalized winding
    number thresholded at 0.5. With ``sign_rule="strict"`` the mesh must be
    watertight, otherwise signing is refused.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if not np.isfinite(mesh.vertices).all():
        raise ValueError("mesh has non-finite vertices")
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    if sign_rule not in ("winding", "strict"):
        raise ValueError(f"unknown sign rule: {sign_rule!r}")
    if sign_rule == "strict" and not is_watertight(mesh):
        raise ValueError("cannot sign distances: mesh is not watertight "
                         "(pass sign_rule='winding' to accept the winding-number sign)")

    D = resolution
    if tau_trunc is None:
        tau_trunc = default_truncation(D)
    mesh = normalize_mesh(mesh)
    origin = default_origin(D)
    h = 1.0 / D

    ax = origin[0] + np.arange(D) * h
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    tris = mesh.vertices[mesh.faces]

    dist = kernels.mesh_distances(pts, tris)
    wind = kernels.winding_numbers(pts, tris)
    signed = np.where(wind > 0.5, -dist, dist)
    values = np.clip(signed, -tau_trunc, tau_trunc).reshape(D, D, D).astype(np.float32)
    return TsdfGrid(values, tau_trunc, h, origin)


def extract_isosurface(g: TsdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes at the given level; vertices deduplicated per grid edge."""
    if abs(iso) >= g.tau_trunc:
        raise ValueError(f"|iso| must be below tau_trunc ({g.tau_trunc:.6g})")
    tri_keys = kernels.collect_triangles(g.values, iso)
    if len(tri_keys) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    D = g.resolution
    uniq, inverse = np.unique(tri_keys.ravel(), return_inverse=True)
    # table order winds clockwise seen from outside under our sign
    # convention; swap to outward-facing normals
    faces = inverse.reshape(-1, 3)[:, [0, 2, 1]]

    axis = uniq % 3
    cell = uniq // 3
    bz = cell % D
    by = (cell // D) % D
    bx = cell // (D * D)
    v0 = g.values[bx, by, bz].astype(np.float64)
    step = np.eye(3, dtype=np.int64)[axis]
    nx, ny, nz = bx + step[:, 0], by + step[:, 1], bz + step[:, 2]
    v1 = g.values[nx, ny, nz].astype(np.float64)
    t = (iso - v0) / (v1 - v0)
    base = np.stack([bx, by, bz], axis=1).astype(np.float64)
    verts = g.origin + (base + t[:, None] * step) * g.voxel_size

    # drop faces that collapsed to a point or segment
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    faces = faces[area2 > 1e-12 * g.voxel_size ** 2]

    used = np.unique(faces.ravel())
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[faces])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

VSDF_MAGIC = b"VSDF"
VSDF_VERSION = 1
_VSDF_HEADER = struct.Struct("<4sHIff3f")


def save_vsdf(g: TsdfGrid, path) -> None:
    header = _VSDF_HEADER.pack(VSDF_MAGIC, VSDF_VERSION, g.resolution,
                               g.tau_trunc, g.voxel_size,
                               g.origin[0], g.origin[1], g.origin[2])
    payload = np.ascontiguousarray(
        g.values.ravel(order="F"), dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_vsdf(path) -> TsdfGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _VSDF_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, D, tau, h, ox, oy, oz = _VSDF_HEADER.unpack_from(raw)
    if magic != VSDF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VSDF_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _VSDF_HEADER.size + D ** 3 * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_VSDF_HEADER.size)
    values = flat.reshape((D, D, D), order="F").copy()
    return TsdfGrid(values, tau, h, np.array([ox, oy, oz]))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0] not in ("v", "f"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: malformed vertex record")
            verts.append([float(x) for x in parts[1:4]])
        else:
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for i in range(1, len(idx) - 1):  # fan-triangulate polygons
                tri = (idx[0], idx[i], idx[i + 1])
                if len(set(tri)) == 3:
                    faces.append(tri)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(v, f)

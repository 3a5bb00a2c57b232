"""Geometry hot loops: numba-compiled kernels with pure-numpy fallbacks.

Each public function dispatches on ``numba_active()``. Setting the
environment variable ``VOXDIFF_NUMBA=0`` forces the numpy path; any other
value (or unset) uses the compiled kernels when numba is importable. The two
paths compute the same quantities; tests compare them directly and
``benchmarks/bench_kernels.py`` times them against each other.

The numpy fallbacks chunk over points to bound the (points x triangles)
intermediate arrays. The numba kernels additionally skip triangles whose
bounding box cannot beat the running minimum, which is why they win big on
distance queries.
"""

from __future__ import annotations

import os

import numpy as np

from voxdiff._mc_tables import (
    EDGE_AXIS,
    EDGE_BASE,
    TRI_COUNT,
    TRI_TABLE,
)

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, but the
    HAVE_NUMBA = False  # fallback path must survive without it

ENV_FLAG = "VOXDIFF_NUMBA"


def numba_active() -> bool:
    """True when the compiled path should run (checked per call)."""
    return HAVE_NUMBA and os.environ.get(ENV_FLAG, "1") != "0"


# ---------------------------------------------------------------------------
# point -> mesh unsigned distance
# ---------------------------------------------------------------------------


def _closest_dist2_numpy(p, a, b, c):
    """Squared point-triangle distances, vectorized over triangles.

    p: (3,), a/b/c: (T, 3). Region classification follows the standard
    barycentric walk (vertex, edge, face regions).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    denom_face = va + vb + vc
    safe = np.where(denom_face == 0.0, 1.0, denom_face)
    v_face = vb / safe
    w_face = vc / safe
    closest = a + ab * v_face[:, None] + ac * w_face[:, None]

    t_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0.0, 1.0,
                                (d4 - d3) + (d5 - d6))
    on_bc = (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0)
    closest = np.where(on_bc[:, None], b + t_bc[:, None] * (c - b), closest)

    t_ac = d2 / np.where(d2 - d6 == 0.0, 1.0, d2 - d6)
    on_ac = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
    closest = np.where(on_ac[:, None], a + t_ac[:, None] * ac, closest)

    t_ab = d1 / np.where(d1 - d3 == 0.0, 1.0, d1 - d3)
    on_ab = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
    closest = np.where(on_ab[:, None], a + t_ab[:, None] * ab, closest)

    on_c = (d6 >= 0.0) & (d5 <= d6)
    closest = np.where(on_c[:, None], c, closest)
    on_b = (d3 >= 0.0) & (d4 <= d3)
    closest = np.where(on_b[:, None], b, closest)
    on_a = (d1 <= 0.0) & (d2 <= 0.0)
    closest = np.where(on_a[:, None], a, closest)

    diff = p - closest
    return (diff * diff).sum(1)


def _mesh_distances_numpy(points, tri_a, tri_b, tri_c):
    out = np.empty(len(points), dtype=np.float64)
    for i, p in enumerate(points):
        out[i] = np.sqrt(_closest_dist2_numpy(p, tri_a, tri_b, tri_c).min())
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _point_tri_dist2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
        abx, aby, abz = bx - ax, by - ay, bz - az
        acx, acy, acz = cx - ax, cy - ay, cz - az
        apx, apy, apz = px - ax, py - ay, pz - az
        d1 = abx * apx + aby * apy + abz * apz
        d2 = acx * apx + acy * apy + acz * apz
        if d1 <= 0.0 and d2 <= 0.0:
            return apx * apx + apy * apy + apz * apz
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            return bpx * bpx + bpy * bpy + bpz * bpz
        vc = d1 * d4 - d3 * d2
        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            t = d1 / (d1 - d3)
            dx = apx - t * abx
            dy = apy - t * aby
            dz = apz - t * abz
            return dx * dx + dy * dy + dz * dz
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        if d6 >= 0.0 and d5 <= d6:
            return cpx * cpx + cpy * cpy + cpz * cpz
        vb = d5 * d2 - d1 * d6
        if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            t = d2 / (d2 - d6)
            dx = apx - t * acx
            dy = apy - t * acy
            dz = apz - t * acz
            return dx * dx + dy * dy + dz * dz
        va = d3 * d6 - d5 * d4
        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            dx = px - (bx + t * (cx - bx))
            dy = py - (by + t * (cy - by))
            dz = pz - (bz + t * (cz - bz))
            return dx * dx + dy * dy + dz * dz
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        qx = ax + abx * v + acx * w
        qy = ay + aby * v + acy * w
        qz = az + abz * v + acz * w
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz

    @njit(cache=True)
    def _mesh_distances_numba(points, tri_a, tri_b, tri_c, tri_lo, tri_hi):
        M = points.shape[0]
        T = tri_a.shape[0]
        out = np.empty(M, dtype=np.float64)
        for i in range(M):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            best = 1e30
            for t in range(T):
                # reject on box distance before the exact test
                dx = max(tri_lo[t, 0] - px, 0.0, px - tri_hi[t, 0])
                dy = max(tri_lo[t, 1] - py, 0.0, py - tri_hi[t, 1])
                dz = max(tri_lo[t, 2] - pz, 0.0, pz - tri_hi[t, 2])
                if dx * dx + dy * dy + dz * dz >= best:
                    continue
                d2 = _point_tri_dist2(
                    px, py, pz,
                    tri_a[t, 0], tri_a[t, 1], tri_a[t, 2],
                    tri_b[t, 0], tri_b[t, 1], tri_b[t, 2],
                    tri_c[t, 0], tri_c[t, 1], tri_c[t, 2])
                if d2 < best:
                    best = d2
            out[i] = np.sqrt(best)
        return out


def mesh_distances(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the nearest triangle.

    points: (M, 3) float64; triangles: (T, 3, 3) float64.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    tri_a = np.ascontiguousarray(triangles[:, 0], dtype=np.float64)
    tri_b = np.ascontiguousarray(triangles[:, 1], dtype=np.float64)
    tri_c = np.ascontiguousarray(triangles[:, 2], dtype=np.float64)
    if numba_active():
        tri_lo = np.minimum(np.minimum(tri_a, tri_b), tri_c)
        tri_hi = np.maximum(np.maximum(tri_a, tri_b), tri_c)
        return _mesh_distances_numba(points, tri_a, tri_b, tri_c, tri_lo, tri_hi)
    return _mesh_distances_numpy(points, tri_a, tri_b, tri_c)


# ---------------------------------------------------------------------------
# generalized winding number
# ---------------------------------------------------------------------------


def _winding_numbers_numpy(points, tri_a, tri_b, tri_c, chunk=512):
    out = np.empty(len(points), dtype=np.float64)
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]  # (m, 3)
        a = tri_a[None, :, :] - p[:, None, :]  # (m, T, 3)
        b = tri_b[None, :, :] - p[:, None, :]
        c = tri_c[None, :, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = (a * np.cross(b, c)).sum(2)
        denom = (la * lb * lc + (a * b).sum(2) * lc
                 + (b * c).sum(2) * la + (c * a).sum(2) * lb)
        omega = 2.0 * np.arctan2(det, denom)
        out[lo:lo + chunk] = omega.sum(1) / (4.0 * np.pi)
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _winding_numbers_numba(points, tri_a, tri_b, tri_c):
        M = points.shape[0]
        T = tri_a.shape[0]
        out = np.empty(M, dtype=np.float64)
        for i in range(M):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            total = 0.0
            for t in range(T):
                axx = tri_a[t, 0] - px
                axy = tri_a[t, 1] - py
                axz = tri_a[t, 2] - pz
                bxx = tri_b[t, 0] - px
                bxy = tri_b[t, 1] - py
                bxz = tri_b[t, 2] - pz
                cxx = tri_c[t, 0] - px
                cxy = tri_c[t, 1] - py
                cxz = tri_c[t, 2] - pz
                la = np.sqrt(axx * axx + axy * axy + axz * axz)
                lb = np.sqrt(bxx * bxx + bxy * bxy + bxz * bxz)
                lc = np.sqrt(cxx * cxx + cxy * cxy + cxz * cxz)
                crx = bxy * cxz - bxz * cxy
                cry = bxz * cxx - bxx * cxz
                crz = bxx * cxy - bxy * cxx
                det = axx * crx + axy * cry + axz * crz
                ab = axx * bxx + axy * bxy + axz * bxz
                bc = bxx * cxx + bxy * cxy + bxz * cxz
                ca = cxx * axx + cxy * axy + cxz * axz
                denom = la * lb * lc + ab * lc + bc * la + ca * lb
                total += 2.0 * np.arctan2(det, denom)
            out[i] = total / (4.0 * np.pi)
        return out


def winding_numbers(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Generalized winding number of the mesh around each query point.

    Approximately 1 deep inside a closed mesh, 0 outside; the inside test
    thresholds at 0.5, which stays meaningful for slightly open meshes.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    tri_a = np.ascontiguousarray(triangles[:, 0], dtype=np.float64)
    tri_b = np.ascontiguousarray(triangles[:, 1], dtype=np.float64)
    tri_c = np.ascontiguousarray(triangles[:, 2], dtype=np.float64)
    if numba_active():
        return _winding_numbers_numba(points, tri_a, tri_b, tri_c)
    return _winding_numbers_numpy(points, tri_a, tri_b, tri_c)


# ---------------------------------------------------------------------------
# marching cubes triangle collection
# ---------------------------------------------------------------------------
# Both paths emit triangles as triples of canonical global edge keys
# key = ((bx*D + by)*D + bz)*3 + axis; interpolation happens once per unique
# key in geometry.extract_isosurface, so shared edges dedupe exactly.


def _collect_triangles_numpy(values, iso):
    D = values.shape[0]
    inside = (values < iso).astype(np.int32)
    ci = (inside[:-1, :-1, :-1]
          | inside[1:, :-1, :-1] << 1
          | inside[1:, 1:, :-1] << 2
          | inside[:-1, 1:, :-1] << 3
          | inside[:-1, :-1, 1:] << 4
          | inside[1:, :-1, 1:] << 5
          | inside[1:, 1:, 1:] << 6
          | inside[:-1, 1:, 1:] << 7)
    active = np.argwhere((ci > 0) & (ci < 255))
    if len(active) == 0:
        return np.empty((0, 3), dtype=np.int64)
    codes = ci[active[:, 0], active[:, 1], active[:, 2]]
    counts = TRI_COUNT[codes]
    chunks = []
    for slot in range(5):
        m = counts > slot
        if not m.any():
            break
        local = TRI_TABLE[codes[m], 3 * slot:3 * slot + 3].astype(np.int64)
        base = active[m][:, None, :] + EDGE_BASE[local]
        axis = EDGE_AXIS[local]
        keys = ((base[..., 0] * D + base[..., 1]) * D + base[..., 2]) * 3 + axis
        chunks.append(keys)
    return np.concatenate(chunks, axis=0)


if HAVE_NUMBA:

    @njit(cache=True)
    def _collect_triangles_numba(values, iso, tri_table, tri_count,
                                 edge_base, edge_axis):
        D = values.shape[0]
        n = 0
        for i in range(D - 1):
            for j in range(D - 1):
                for k in range(D - 1):
                    ci = 0
                    if values[i, j, k] < iso:
                        ci |= 1
                    if values[i + 1, j, k] < iso:
                        ci |= 2
                    if values[i + 1, j + 1, k] < iso:
                        ci |= 4
                    if values[i, j + 1, k] < iso:
                        ci |= 8
                    if values[i, j, k + 1] < iso:
                        ci |= 16
                    if values[i + 1, j, k + 1] < iso:
                        ci |= 32
                    if values[i + 1, j + 1, k + 1] < iso:
                        ci |= 64
                    if values[i, j + 1, k + 1] < iso:
                        ci |= 128
                    n += tri_count[ci]
        out = np.empty((n, 3), dtype=np.int64)
        w = 0
        for i in range(D - 1):
            for j in range(D - 1):
                for k in range(D - 1):
                    ci = 0
                    if values[i, j, k] < iso:
                        ci |= 1
                    if values[i + 1, j, k] < iso:
                        ci |= 2
                    if values[i + 1, j + 1, k] < iso:
                        ci |= 4
                    if values[i, j + 1, k] < iso:
                        ci |= 8
                    if values[i, j, k + 1] < iso:
                        ci |= 16
                    if values[i + 1, j, k + 1] < iso:
                        ci |= 32
                    if values[i + 1, j + 1, k + 1] < iso:
                        ci |= 64
                    if values[i, j + 1, k + 1] < iso:
                        ci |= 128
                    for tri in range(tri_count[ci]):
                        for v in range(3):
                            e = tri_table[ci, 3 * tri + v]
                            bx = i + edge_base[e, 0]
                            by = j + edge_base[e, 1]
                            bz = k + edge_base[e, 2]
                            out[w, v] = ((bx * D + by) * D + bz) * 3 + edge_axis[e]
                        w += 1
        return out


def collect_triangles(values: np.ndarray, iso: float) -> np.ndarray:
    """Marching-cubes pass one: (n, 3) canonical edge keys, row-sorted.

    Row order is canonicalized by lexsort so the numba and numpy paths
    produce identical output.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if numba_active():
        tris = _collect_triangles_numba(values, float(iso), TRI_TABLE,
                                        TRI_COUNT, EDGE_BASE, EDGE_AXIS)
    else:
        tris = _collect_triangles_numpy(values, float(iso))
    if len(tris) == 0:
        return tris
    order = np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))
    return tris[order]

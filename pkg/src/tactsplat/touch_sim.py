"""Simulated tactile acquisition on a triangle mesh.

A grasp places several finger contacts near an area-sampled center; each
finger reads a local patch of surface points by casting an orthographic grid
of rays along the inward surface normal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshEmpty, NoContact

log = logging.getLogger(__name__)

LEAF_SIZE = 4


@dataclass
class TouchPatch:
    sensor_pose: np.ndarray     # 4x4 sensor-to-world; z axis along the inward normal
    points: np.ndarray          # (M, 3) world coordinates
    patch_radius: float
    grasp_id: int = 0
    finger_id: int = 0

    @property
    def contact(self):
        return self.sensor_pose[:3, 3]


@dataclass
class _BVH:
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_order: np.ndarray


def _build_bvh(v0, v1, v2, leaf_size=LEAF_SIZE) -> _BVH:
    lo = np.minimum(np.minimum(v0, v1), v2)
    hi = np.maximum(np.maximum(v0, v1), v2)
    cen = (lo + hi) * 0.5
    order = np.arange(len(v0))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node():
        for lst in (bmin, bmax):
            lst.append(None)
        for lst in (left, right, start, count):
            lst.append(-1)
        return len(left) - 1

    root = new_node()
    stack = [(root, 0, len(order))]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        bmin[node] = lo[idx].min(axis=0)
        bmax[node] = hi[idx].max(axis=0)
        if e - s <= leaf_size:
            start[node], count[node] = s, e - s
            continue
        c = cen[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[s:e] = idx[srt]
        mid = (s + e) // 2
        ln, rn = new_node(), new_node()
        left[node], right[node] = ln, rn
        stack.append((rn, mid, e))
        stack.append((ln, s, mid))
    return _BVH(np.array(bmin), np.array(bmax), np.array(left), np.array(right),
                np.array(start), np.array(count), order)


class TriangleMesh:
    """Triangle soup with a bounding-volume hierarchy for ray queries.

    Zero-area triangles are dropped at construction; triangle ids refer to the
    cleaned index array.
    """

    def __init__(self, vertices, triangles, normals=None):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle index out of range")
        v = vertices[triangles]
        area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        keep = area2 > 0
        if not np.all(keep):
            log.debug("dropping %d degenerate triangles", int((~keep).sum()))
        self.vertices = vertices
        self.triangles = triangles[keep]
        self.vertex_normals = None if normals is None else np.asarray(normals, dtype=np.float64)
        if len(self.triangles) == 0:
            self._bvh = None
            return
        v0, v1, v2 = (vertices[self.triangles[:, k]] for k in range(3))
        self._v = (v0, v1, v2)
        n = np.cross(v1 - v0, v2 - v0)
        self.areas = 0.5 * np.linalg.norm(n, axis=1)
        self.face_normals = n / (2.0 * self.areas[:, None])
        self._bvh = _build_bvh(v0, v1, v2)

    def __len__(self):
        return len(self.triangles)

    @property
    def bounds(self):
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    @property
    def diagonal(self):
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def shading_normals(self, tri, bary):
        """Interpolated vertex normals when available, else face normals."""
        if self.vertex_normals is None:
            return self.face_normals[tri]
        vn = self.vertex_normals[self.triangles[tri]]
        n = np.einsum("nk,nkc->nc", bary, vn)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def intersect(self, origins, directions):
        """Nearest positive-t hit per ray; see :func:`ray_mesh_intersect`."""
        return ray_mesh_intersect(self, origins, directions)

    def sample_surface(self, n, rng):
        """Area-weighted random surface points with their face normals."""
        tri = rng.choice(len(self.triangles), size=n, p=self.areas / self.areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        b = np.column_stack([1 - s, s * (1 - r2), s * r2])
        v0, v1, v2 = (vk[tri] for vk in self._v)
        pts = b[:, 0:1] * v0 + b[:, 1:2] * v1 + b[:, 2:3] * v2
        return pts, self.face_normals[tri], tri


@dataclass
class RayHits:
    hit: np.ndarray
    t: np.ndarray
    triangle: np.ndarray
    point: np.ndarray
    bary: np.ndarray = field(repr=False)


def watertight_intersect(orig, dirs, v0, v1, v2):
    """Watertight ray/triangle test, vectorized over pairs.

    Returns (t, barycentrics) with t = inf for misses or non-positive t.
    """
    kz = np.argmax(np.abs(dirs), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    r = np.arange(len(dirs))
    dz = dirs[r, kz]
    swap = dz < 0
    kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
    sx = dirs[r, kx] / dz
    sy = dirs[r, ky] / dz
    sz = 1.0 / dz
    A, B, C = v0 - orig, v1 - orig, v2 - orig
    ax, ay = A[r, kx] - sx * A[r, kz], A[r, ky] - sy * A[r, kz]
    bx, by = B[r, kx] - sx * B[r, kz], B[r, ky] - sy * B[r, kz]
    cx, cy = C[r, kx] - sx * C[r, kz], C[r, ky] - sy * C[r, kz]
    U = cx * by - cy * bx
    V = ax * cy - ay * cx
    W = bx * ay - by * ax
    outside = ((U < 0) | (V < 0) | (W < 0)) & ((U > 0) | (V > 0) | (W > 0))
    det = U + V + W
    with np.errstate(divide="ignore", invalid="ignore"):
        T = U * sz * A[r, kz] + V * sz * B[r, kz] + W * sz * C[r, kz]
        t = T / det
    miss = outside | (det == 0) | ~(t > 0)
    t = np.where(miss, np.inf, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        bary = np.column_stack([U, V, W]) / det[:, None]
    return t, bary


def _slab(orig, inv, bmin, bmax, tmax):
    with np.errstate(invalid="ignore"):
        t0 = (bmin - orig) * inv
        t1 = (bmax - orig) * inv
    # 0 * inf: the origin sits on a slab plane of an axis the ray runs parallel to,
    # so that axis does not bound the ray at all
    flat = np.isnan(t0) | np.isnan(t1)
    lo = np.max(np.where(flat, -np.inf, np.minimum(t0, t1)), axis=1)
    hi = np.min(np.where(flat, np.inf, np.maximum(t0, t1)), axis=1)
    # a little slack keeps grazing rays from slipping between boxes
    slack = np.where(np.isfinite(hi), 1e-9 * (1.0 + np.abs(hi)), 0.0)
    return (hi + slack >= np.maximum(lo, 0.0)) & (lo <= tmax)


def _reduce_best(ray, t, tri, n_rays):
    """Per-ray lexicographic minimum of (t, triangle id)."""
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    fin = np.isfinite(t)
    ray, t, tri = ray[fin], t[fin], tri[fin]
    if len(ray):
        order = np.lexsort((tri, t, ray))
        ray, t, tri = ray[order], t[order], tri[order]
        first = np.ones(len(ray), dtype=bool)
        first[1:] = ray[1:] != ray[:-1]
        best_t[ray[first]] = t[first]
        best_tri[ray[first]] = tri[first]
    return best_t, best_tri


def ray_mesh_intersect(mesh: TriangleMesh, origins, directions) -> RayHits:
    """Nearest positive-t intersection per ray through BVH traversal.

    Rays are traversed breadth first as (ray, node) pairs; ties in t resolve
    to the lowest triangle id.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins, directions = np.broadcast_arrays(origins, directions)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    if mesh._bvh is not None and n:
        bvh = mesh._bvh
        with np.errstate(divide="ignore"):
            inv = 1.0 / directions
        ray = np.arange(n)
        node = np.zeros(n, dtype=np.int64)
        v0, v1, v2 = mesh._v
        while len(ray):
            ok = _slab(origins[ray], inv[ray], bvh.bmin[node], bvh.bmax[node], best_t[ray])
            ray, node = ray[ok], node[ok]
            leaf = bvh.count[node] > 0
            lr, ln = ray[leaf], node[leaf]
            if len(lr):
                cnt = bvh.count[ln]
                pr = np.repeat(lr, cnt)
                off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri = bvh.tri_order[np.repeat(bvh.start[ln], cnt) + off]
                t, _ = watertight_intersect(origins[pr], directions[pr], v0[tri], v1[tri], v2[tri])
                cand_t = np.concatenate([t, best_t[lr]])
                cand_tri = np.concatenate([tri, best_tri[lr]])
                cand_ray = np.concatenate([pr, lr])
                cand_t = np.where(cand_tri < 0, np.inf, cand_t)
                bt, btri = _reduce_best(cand_ray, cand_t, cand_tri, n)
                upd = np.unique(lr)
                best_t[upd], best_tri[upd] = bt[upd], btri[upd]
            ir, inode = ray[~leaf], node[~leaf]
            ray = np.concatenate([ir, ir])
            node = np.concatenate([bvh.left[inode], bvh.right[inode]])
    return _finish_hits(mesh, origins, directions, best_t, best_tri)


def _finish_hits(mesh, origins, directions, best_t, best_tri):
    hit = best_tri >= 0
    point = np.full(origins.shape, np.nan)
    bary = np.full(origins.shape, np.nan)
    if np.any(hit):
        idx = np.nonzero(hit)[0]
        v0, v1, v2 = (vk[best_tri[idx]] for vk in mesh._v)
        t, b = watertight_intersect(origins[idx], directions[idx], v0, v1, v2)
        bary[idx] = b
        point[idx] = b[:, 0:1] * v0 + b[:, 1:2] * v1 + b[:, 2:3] * v2
    return RayHits(hit, best_t, best_tri, point, bary)


def brute_force_intersect(mesh: TriangleMesh, origins, directions) -> RayHits:
    """Reference: test every ray against every triangle."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins, directions = np.broadcast_arrays(origins, directions)
    n, m = len(origins), len(mesh)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    v0, v1, v2 = mesh._v
    for k in range(m):
        t, _ = watertight_intersect(origins, directions, np.broadcast_to(v0[k], (n, 3)),
                                    np.broadcast_to(v1[k], (n, 3)), np.broadcast_to(v2[k], (n, 3)))
        better = t < best_t
        best_t = np.where(better, t, best_t)
        best_tri = np.where(better, k, best_tri)
    return _finish_hits(mesh, origins, directions, best_t, best_tri)


def _tangent_frame(normal, angle=0.0):
    """Orthonormal (x, y, z) with z = normal, rotated in-plane by ``angle``."""
    z = np.asarray(normal, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0, 0]) if abs(z[0]) < 0.9 else np.array([0, 1.0, 0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c, s = np.cos(angle), np.sin(angle)
    return c * x + s * y, -s * x + c * y, z


def sample_patch(mesh: TriangleMesh, contact_point, inward_normal, patch_radius, points_per_patch,
                 seed=0, grasp_id=0, finger_id=0) -> TouchPatch:
    """Ray-cast a square orthographic sensor grid along the inward normal.

    The grid (side 2*patch_radius) starts 2*patch_radius outside the contact;
    hits farther than patch_radius from the contact are discarded. The seed
    only sets the in-plane orientation of the grid.
    """
    contact = np.asarray(contact_point, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ex, ey, ez = _tangent_frame(inward_normal, rng.uniform(0, 2 * np.pi))
    k = max(1, int(round(np.sqrt(points_per_patch))))
    g = np.linspace(-patch_radius, patch_radius, k) if k > 1 else np.zeros(1)
    gu, gv = np.meshgrid(g, g, indexing="ij")
    standoff = max(2.0 * patch_radius, 1e-6)
    origins = contact + gu.reshape(-1, 1) * ex + gv.reshape(-1, 1) * ey - standoff * ez
    hits = ray_mesh_intersect(mesh, origins, np.broadcast_to(ez, origins.shape))
    pts = hits.point[hits.hit]
    pts = pts[np.linalg.norm(pts - contact, axis=1) <= patch_radius + 1e-9]
    if len(pts) == 0:
        raise NoContact(f"no sensor ray hit the surface near {contact}")
    _, first = np.unique(pts, axis=0, return_index=True)
    pts = pts[np.sort(first)]
    pose = np.eye(4)
    pose[:3, :3] = np.column_stack([ex, ey, ez])
    pose[:3, 3] = contact
    return TouchPatch(pose, pts, float(patch_radius), int(grasp_id), int(finger_id))


def default_patch_radius(mesh: TriangleMesh):
    return 0.02 * mesh.diagonal


def sample_grasps(mesh: TriangleMesh, n_grasps, fingers_per_grasp, patch_radius=None,
                  points_per_patch=256, seed=0, max_tries=50) -> list[TouchPatch]:
    """Sample ``n_grasps`` grasps of ``fingers_per_grasp`` finger readings each."""
    if mesh is None or len(mesh) == 0:
        raise MeshEmpty("cannot sample touches on an empty mesh")
    if patch_radius is None:
        patch_radius = default_patch_radius(mesh)
    rng = np.random.default_rng(seed)
    ball = 4.0 * patch_radius
    patches = []
    for gid in range(n_grasps):
        center, normal, _ = mesh.sample_surface(1, rng)
        center, normal = center[0], normal[0]
        tx, ty, _ = _tangent_frame(normal)
        for fid in range(fingers_per_grasp):
            for _ in range(max_tries):
                # uniform offset in the ball, flattened onto the tangent plane, snapped along -normal
                off = rng.normal(size=3)
                off *= ball * rng.random() ** (1 / 3) / np.linalg.norm(off)
                p = center + off[0] * tx + off[1] * ty
                hit = ray_mesh_intersect(mesh, p + ball * normal, -normal)
                if not hit.hit[0]:
                    continue
                contact = hit.point[0]
                inward = -mesh.face_normals[hit.triangle[0]]
                try:
                    patches.append(sample_patch(mesh, contact, inward, patch_radius, points_per_patch,
                                                seed=int(rng.integers(2**31)), grasp_id=gid, finger_id=fid))
                    break
                except NoContact:
                    continue
            else:
                raise NoContact(f"could not place finger {fid} of grasp {gid}")
    return patches


def touch_points_from_patches(patches):
    if not patches:
        return np.zeros((0, 3))
    return np.concatenate([p.points for p in patches])

"""Desk-scale synthetic datasets: glossy shapes ray traced with Phong shading.

Each preset provides a shape to render (an analytic sphere or a triangle
mesh), a triangle mesh for touch simulation, and a material. Rendering is a
single primary ray per pixel with no shadows or secondary bounces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import Camera
from .touch_sim import TriangleMesh


# -- shapes ---------------------------------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def trace(self, origins, dirs):
        """Nearest positive hit: (hit mask, t, points, outward normals)."""
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=1)
        a = np.sum(dirs * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 0, t0, t1)
        hit &= t > 0
        t = np.where(hit, t, np.inf)
        pts = origins + np.where(hit, t, 0.0)[:, None] * dirs
        nrm = (pts - self.center) / self.radius
        return hit, t, pts, nrm

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class MeshShape:
    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh

    def trace(self, origins, dirs):
        h = self.mesh.intersect(origins, dirs)
        nrm = np.zeros_like(origins)
        if np.any(h.hit):
            nrm[h.hit] = self.mesh.shading_normals(h.triangle[h.hit], h.bary[h.hit])
        pts = np.where(h.hit[:, None], h.point, origins)
        return h.hit, h.t, pts, nrm

    def bounds(self):
        return self.mesh.bounds


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Vertices, triangles and vertex normals of a subdivided icosahedron."""
    p = (1 + 5 ** 0.5) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts)
    return v * radius + np.asarray(center), np.array(faces, dtype=np.int64), v.copy()


def box_mesh(half=0.8, divisions=6):
    """Axis-aligned cube with each face split into a divisions x divisions grid."""
    verts, tris = [], []
    g = np.linspace(-half, half, divisions + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            base = len(verts)
            for i in g:
                for j in g:
                    p = np.zeros(3)
                    p[axis], p[a1], p[a2] = sign * half, i, j
                    verts.append(p)
            n = divisions + 1
            for i in range(divisions):
                for j in range(divisions):
                    q = [base + i * n + j, base + (i + 1) * n + j,
                         base + (i + 1) * n + j + 1, base + i * n + j + 1]
                    t1, t2 = (q[0], q[1], q[2]), (q[0], q[2], q[3])
                    if sign < 0:
                        t1, t2 = t1[::-1], t2[::-1]
                    tris += [t1, t2]
    return np.array(verts), np.array(tris, dtype=np.int64)


def _torus(R, r, nu, nv, center, axis_swap=True):
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (R + r * np.cos(vv)) * np.cos(uu)
    y = (R + r * np.cos(vv)) * np.sin(uu)
    z = r * np.sin(vv)
    nx, ny, nz = np.cos(vv) * np.cos(uu), np.cos(vv) * np.sin(uu), np.sin(vv)
    pts = np.stack([x, y, z], -1).reshape(-1, 3)
    nrm = np.stack([nx, ny, nz], -1).reshape(-1, 3)
    if axis_swap:  # torus in the x-z plane
        pts, nrm = pts[:, [0, 2, 1]], nrm[:, [0, 2, 1]]
    tris = []
    for i in range(nu):
        for j in range(nv):
            a, b = i * nv + j, ((i + 1) % nu) * nv + j
            c, d = ((i + 1) % nu) * nv + (j + 1) % nv, i * nv + (j + 1) % nv
            tris += [(a, b, c), (a, c, d)]
    return pts + center, np.array(tris, dtype=np.int64), nrm


def _cone(base_center, tip, r0, r1, n=16):
    axis = tip - base_center
    L = np.linalg.norm(axis)
    w = axis / L
    helper = np.array([0, 0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0, 0])
    u = np.cross(w, helper)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
    slope = (r0 - r1) / L
    nrm = ring + slope * w
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    pts = np.concatenate([base_center + r0 * ring, tip + r1 * ring])
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, n + j), (i, n + j, n + i)]
    return pts, np.array(tris, dtype=np.int64), np.concatenate([nrm, nrm])


def teapot_like_mesh():
    """A squashed-sphere body with a torus handle and a conical spout."""
    bv, bt, bn = icosphere(3)
    scale = np.array([0.75, 0.75, 0.55])
    bv = bv * scale
    bn = bn / scale
    bn /= np.linalg.norm(bn, axis=1, keepdims=True)
    hv, ht, hn = _torus(0.28, 0.06, 24, 8, np.array([-0.8, 0.0, 0.05]))
    sv, st, sn = _cone(np.array([0.6, 0.0, -0.05]), np.array([1.05, 0.0, 0.3]), 0.14, 0.05)
    parts = [(bv, bt, bn), (hv, ht, hn), (sv, st, sn)]
    verts, tris, nrms, off = [], [], [], 0
    for v, t, n in parts:
        verts.append(v)
        tris.append(t + off)
        nrms.append(n)
        off += len(v)
    return np.concatenate(verts), np.concatenate(tris), np.concatenate(nrms)


# -- scene specification ------------------------------------------------------------------

@dataclass
class Material:
    diffuse: tuple = (0.75, 0.35, 0.25)
    kd: float = 1.0
    ks: float = 0.6
    shininess: float = 40.0


@dataclass
class CameraRig:
    count: int = 5
    radius: float = 4.0
    elevation: float = np.deg2rad(25.0)
    width: int = 64
    height: int = 64
    fov: float = np.deg2rad(40.0)
    target: tuple = (0.0, 0.0, 0.0)
    azimuth_offset: float = 0.0


@dataclass
class SceneSpec:
    shape: object
    mesh: TriangleMesh
    material: Material = field(default_factory=Material)
    lights: list = field(default_factory=lambda: [
        (np.array([3.0, -2.0, 4.0]), 0.8),
        (np.array([-3.0, 3.0, 2.5]), 0.5),
        (np.array([0.5, 4.0, -2.0]), 0.35),
    ])
    background: tuple = (0.0, 0.0, 0.0)
    rig: CameraRig = field(default_factory=CameraRig)
    name: str = "scene"

    def __post_init__(self):
        m = self.material
        if m.ks < 0 or m.shininess < 1 or self.rig.count < 1:
            raise ValueError("need ks >= 0, shininess >= 1, camera count >= 1")


PRESETS = ("sphere", "cube", "teapot-like")


def make_preset(name, ks=0.6, views=5, size=64, shininess=40.0) -> SceneSpec:
    rig = CameraRig(count=views, width=size, height=size)
    if name == "sphere":
        v, t, n = icosphere(4)
        return SceneSpec(Sphere(), TriangleMesh(v, t, n), Material(ks=ks, shininess=shininess),
                         rig=rig, name=name)
    if name == "cube":
        v, t = box_mesh()
        mesh = TriangleMesh(v, t)
        return SceneSpec(MeshShape(mesh), mesh, Material(diffuse=(0.3, 0.45, 0.75), ks=ks,
                                                         shininess=shininess), rig=rig, name=name)
    if name in ("teapot-like", "teapot"):
        v, t, n = teapot_like_mesh()
        mesh = TriangleMesh(v, t, n)
        return SceneSpec(MeshShape(mesh), mesh, Material(diffuse=(0.7, 0.6, 0.3), ks=ks,
                                                         shininess=shininess), rig=rig, name="teapot-like")
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


# -- cameras ------------------------------------------------------------------------------

def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([0.0, 1.0, 0.0]))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    E = np.eye(4)
    E[:3, :3] = np.stack([r, d, f])
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def intrinsics_from_fov(fov, width, height):
    f = 0.5 * height / np.tan(0.5 * fov)
    return f, f, (width - 1) / 2.0, (height - 1) / 2.0


def orbit_cameras(count, radius, elevation, target=(0.0, 0.0, 0.0), width=64, height=64,
                  fov=np.deg2rad(40.0), azimuth_offset=0.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a circle, all looking at ``target``; fov is vertical."""
    fx, fy, cx, cy = intrinsics_from_fov(fov, width, height)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(count):
        az = azimuth_offset + 2 * np.pi * k / count
        eye = target + radius * np.array([np.cos(elevation) * np.cos(az),
                                          np.cos(elevation) * np.sin(az), np.sin(elevation)])
        cams.append(Camera(fx, fy, cx, cy, look_at(eye, target), width, height))
    return cams


def spiral_cameras(count, radius=4.0, elevation_range=(-60.0, 75.0), target=(0.0, 0.0, 0.0), width=64,
                   height=64, fov=np.deg2rad(40.0), azimuth_offset=0.0) -> list[Camera]:
    """Cameras on a golden-angle spiral between two elevations (degrees), looking at ``target``."""
    fx, fy, cx, cy = intrinsics_from_fov(fov, width, height)
    target = np.asarray(target, dtype=np.float64)
    lo, hi = np.deg2rad(elevation_range[0]), np.deg2rad(elevation_range[1])
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for k in range(count):
        # uniform in sin(elevation) spreads views evenly over the spherical band
        s = np.sin(lo) + (np.sin(hi) - np.sin(lo)) * (k + 0.5) / count
        el, az = np.arcsin(s), azimuth_offset + golden * k
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(fx, fy, cx, cy, look_at(eye, target), width, height))
    return cams


def rig_cameras(rig: CameraRig):
    return orbit_cameras(rig.count, rig.radius, rig.elevation, rig.target, rig.width, rig.height,
                         rig.fov, rig.azimuth_offset)


def pixel_rays(camera: Camera):
    """World-space origins and unit directions through every pixel center, row major."""
    v, u = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], -1)
    d = d.reshape(-1, 3) @ camera.rotation  # camera -> world
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


# -- rendering ----------------------------------------------------------------------------

def shade(points, normals, eye, material: Material, lights):
    V = eye - points
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    out = np.zeros_like(points)
    diffuse = np.asarray(material.diffuse, dtype=np.float64)
    for pos, intensity in lights:
        L = pos - points
        L /= np.linalg.norm(L, axis=1, keepdims=True)
        ndl = np.sum(normals * L, axis=1)
        R = 2 * ndl[:, None] * normals - L
        spec = np.maximum(0.0, np.sum(R * V, axis=1)) ** material.shininess
        spec = np.where(ndl > 0, spec, 0.0)
        out += intensity * (material.kd * np.maximum(0.0, ndl)[:, None] * diffuse
                            + material.ks * spec[:, None])
    return out


def render_view(spec: SceneSpec, camera: Camera):
    """(RGB image in [0,1], camera-space depth map) for one camera."""
    origins, dirs = pixel_rays(camera)
    hit, t, pts, nrm = spec.shape.trace(origins, dirs)
    img = np.tile(np.asarray(spec.background, dtype=np.float64), (len(dirs), 1))
    depth = np.zeros(len(dirs))
    if np.any(hit):
        img[hit] = np.clip(shade(pts[hit], nrm[hit], camera.center, spec.material, spec.lights), 0, 1)
        depth[hit] = camera.to_camera(pts[hit])[:, 2]
    H, W = camera.height, camera.width
    return img.reshape(H, W, 3), depth.reshape(H, W)


def render_ground_truth(spec: SceneSpec, cameras=None):
    """Render every rig camera. Returns a list of (image, depth, camera)."""
    cameras = rig_cameras(spec.rig) if cameras is None else cameras
    return [(*render_view(spec, cam), cam) for cam in cameras]


def backproject_depth(depth, camera: Camera, mask=None):
    v, u = np.nonzero(depth > 0 if mask is None else mask)
    return camera.backproject(u.astype(np.float64), v.astype(np.float64), depth[v, u])


def ground_truth_pointcloud(depths, cameras, stride=1):
    """Back-project all positive-depth pixels of every view; keep every ``stride``-th point."""
    pts = [backproject_depth(d, c) for d, c in zip(depths, cameras)]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    return pts[::max(1, int(stride))]


def sparse_vision_points(images, depths, cameras, n_points=400, noise=0.03, outlier_fraction=0.1,
                         highlight_threshold=0.85, highlight_push=0.25, seed=0):
    """A sparse, noisy colored point cloud standing in for structure-from-motion output.

    Points come from random foreground pixels of the training views with
    isotropic noise. Pixels brighter than ``highlight_threshold`` are pushed
    behind the surface along the view ray, the typical failure of feature
    matching on specular highlights. A fraction of uniform outliers fills the
    bounding box.
    """
    rng = np.random.default_rng(seed)
    fg = [(k, np.column_stack(np.nonzero(d > 0))) for k, d in enumerate(depths)]
    fg = [(k, px) for k, px in fg if len(px)]
    if not fg:
        return np.zeros((0, 3)), np.zeros((0, 3))
    n_in = int(round(n_points * (1 - outlier_fraction)))
    views = rng.integers(len(fg), size=n_in)
    pts, cols = [], []
    for k in range(len(fg)):
        cnt = int(np.sum(views == k))
        if cnt == 0:
            continue
        view, px = fg[k]
        sel = px[rng.integers(len(px), size=cnt)]
        v, u = sel[:, 0], sel[:, 1]
        cam, img = cameras[view], images[view]
        z = depths[view][v, u]
        c = img[v, u]
        bright = c.max(axis=1) > highlight_threshold
        z = z + np.where(bright, highlight_push * rng.random(cnt), 0.0)
        pts.append(cam.backproject(u.astype(float), v.astype(float), z))
        cols.append(c)
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    pts = pts + rng.normal(scale=noise, size=pts.shape)
    n_out = n_points - len(pts)
    if n_out > 0:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.1 * (hi - lo)
        pts = np.concatenate([pts, rng.uniform(lo - pad, hi + pad, size=(n_out, 3))])
        cols = np.concatenate([cols, rng.random((n_out, 3))])
    return pts, cols


# -- complete fixtures ----------------------------------------------------------------

@dataclass
class SceneData:
    spec: SceneSpec
    train_cameras: list
    train_images: list
    train_depths: list
    test_cameras: list
    test_images: list
    test_depths: list
    gt_points: np.ndarray
    vision_points: np.ndarray
    vision_colors: np.ndarray


def build_scene(preset="sphere", views=5, test_views=16, ks=0.6, size=64, shininess=40.0, seed=0,
                sparse_points=400, sparse_noise=0.03, gt_stride=1) -> SceneData:
    """Render train and test views, the ground-truth cloud and a sparse vision cloud.

    Training views sit on the preset's orbit ring; test views follow a
    spiral that also covers the underside. The ground-truth cloud is the
    back-projection of the test depth maps, the same protocol used for
    predicted clouds.
    """
    spec = make_preset(preset, ks=ks, views=views, size=size, shininess=shininess)
    train = render_ground_truth(spec)
    r = spec.rig
    tcams = spiral_cameras(test_views, r.radius, target=r.target, width=size, height=size, fov=r.fov,
                           azimuth_offset=0.5)
    test = render_ground_truth(spec, tcams)
    imgs, deps, cams = (list(x) for x in zip(*train))
    timgs, tdeps, _ = (list(x) for x in zip(*test))
    gt = ground_truth_pointcloud(tdeps, tcams, gt_stride)
    vp, vc = sparse_vision_points(imgs, deps, cams, n_points=sparse_points, noise=sparse_noise, seed=seed)
    return SceneData(spec, cams, imgs, deps, tcams, timgs, tdeps, gt, vp, vc)

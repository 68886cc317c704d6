"""Gaussian parameterization, covariance construction, projection and SH color.

All routines are vectorized over a leading Gaussian axis and work in float64.
Quaternions are stored as (w, x, y, z). Camera space follows the usual
splatting convention: +x right, +y down, +z forward, so visible points have
positive z. Pixel centers sit at integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BehindCamera, ValidationError

VISION = 0
TOUCH = 1

NEAR_PLANE = 0.01
SCREEN_DILATION = 0.3
MAX_SH_DEGREE = 3
SH_BASES = (MAX_SH_DEGREE + 1) ** 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """Structure-of-arrays container for every learnable Gaussian parameter.

    ``sh_coeffs`` has shape (N, 16, 3): band coefficients for degree <= 3, per
    RGB channel. ``set_tag`` marks vision (0) or touch (1) membership.
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    set_tag: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh.reshape(n, -1, 3)
        if sh.shape[1] < SH_BASES:
            sh = np.concatenate([sh, np.zeros((n, SH_BASES - sh.shape[1], 3))], axis=1)
        self.sh_coeffs = sh
        self.set_tag = np.asarray(self.set_tag, dtype=np.uint8).reshape(n)

    PARAMS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs")

    def __len__(self):
        return self.means.shape[0]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def covariances(self):
        return covariance_from_params(self.rotations, self.log_scales)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{k: getattr(self, k).copy() for k in self.PARAMS + ("set_tag",)})

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(**{k: getattr(self, k)[idx] for k in self.PARAMS + ("set_tag",)})

    @staticmethod
    def concat(sets) -> "GaussianSet":
        keys = GaussianSet.PARAMS + ("set_tag",)
        return GaussianSet(**{k: np.concatenate([getattr(s, k) for s in sets]) for k in keys})

    def counts(self):
        """Return (vision count, touch count)."""
        return int(np.sum(self.set_tag == VISION)), int(np.sum(self.set_tag == TOUCH))


@dataclass
class GradientSet:
    """Gradients with the same shapes as the learnable fields of a GaussianSet."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    mean2d_norm: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, SH_BASES, 3)), np.zeros(n))

    def __iadd__(self, other: "GradientSet"):
        for k in GaussianSet.PARAMS:
            getattr(self, k).__iadd__(getattr(other, k))
        if other.mean2d_norm is not None:
            if self.mean2d_norm is None:
                self.mean2d_norm = other.mean2d_norm.copy()
            else:
                self.mean2d_norm = self.mean2d_norm + other.mean2d_norm
        return self

    def scaled(self, s: float) -> "GradientSet":
        return GradientSet(*(getattr(self, k) * s for k in GaussianSet.PARAMS),
                           mean2d_norm=self.mean2d_norm)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in GaussianSet.PARAMS)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)

    def validate(self):
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValidationError("world_to_camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")
        return self

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def project_points(self, points):
        """Pixel coordinates and camera-space depth for world points (no culling)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def backproject(self, u, v, depth):
        """Lift pixel coordinates with camera-space z back to world points."""
        x = (np.asarray(u) - self.cx) / self.fx * depth
        y = (np.asarray(v) - self.cy) / self.fy * depth
        pc = np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)
        return (pc - self.translation) @ self.rotation


# -- quaternions and covariance ------------------------------------------------

def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R):
    """Inverse of quat_to_rotmat for a single proper rotation (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def covariance_from_params(rotation, log_scale):
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); quaternion renormalized."""
    R = quat_to_rotmat(rotation)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(rotation, log_scale, dL_dcov):
    """Pull a (symmetric) gradient on Sigma back to the quaternion and log-scales."""
    q = np.asarray(rotation, dtype=np.float64)
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / qn
    R = quat_to_rotmat(qh)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    G = 0.5 * (dL_dcov + np.swapaxes(dL_dcov, -1, -2))
    dM = 2.0 * G @ M
    d_log_s = np.sum(dM * R, axis=-2) * s
    dR = dM * s[..., None, :]

    w, x, y, z = np.moveaxis(qh, -1, 0)
    r = dR.reshape(dR.shape[:-2] + (9,))
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = np.moveaxis(r, -1, 0)
    dw = 2 * (-z * r01 + y * r02 + z * r10 - x * r12 - y * r20 + x * r21)
    dx = 2 * (y * r01 + z * r02 + y * r10 - 2 * x * r11 - w * r12 + z * r20 + w * r21 - 2 * x * r22)
    dy = 2 * (-2 * y * r00 + x * r01 + w * r02 + x * r10 + z * r12 - w * r20 + z * r21 - 2 * y * r22)
    dz = 2 * (-2 * z * r00 - w * r01 + x * r02 + w * r10 - 2 * z * r11 + y * r12 + x * r20 + y * r21)
    dqh = np.stack([dw, dx, dy, dz], axis=-1)
    dq = (dqh - qh * np.sum(qh * dqh, axis=-1, keepdims=True)) / qn
    return dq, d_log_s


# -- 3D influence ----------------------------------------------------------------

def inverse_covariance_from_params(rotation, log_scale):
    """Sigma^-1 = R S^-2 R^T, exact without a matrix inversion."""
    R = quat_to_rotmat(rotation)
    M = R * np.exp(-np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def gaussian_influence_3d(x, mean, cov):
    """Unnormalized Gaussian falloff exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    inv = np.linalg.inv(np.asarray(cov, dtype=np.float64))
    m = np.einsum("...i,...ij,...j->...", d, inv, d)
    return np.exp(-0.5 * m)


# -- projection --------------------------------------------------------------------

class Projection(NamedTuple):
    mean2d: np.ndarray      # (N, 2) pixels
    cov2d_raw: np.ndarray   # (N, 2, 2)
    cov2d: np.ndarray       # (N, 2, 2), dilated by SCREEN_DILATION * I
    depth: np.ndarray       # (N,) camera-space z
    t_cam: np.ndarray       # (N, 3)
    J: np.ndarray           # (N, 2, 3)
    valid: np.ndarray       # (N,) bool, in front of the near plane


def projection_jacobian(t_cam, fx, fy):
    x, y, z = t_cam[..., 0], t_cam[..., 1], t_cam[..., 2]
    J = np.zeros(t_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project_gaussians(means, covs, camera: Camera, near=NEAR_PLANE) -> Projection:
    W = camera.rotation
    t = np.asarray(means, dtype=np.float64) @ W.T + camera.translation
    valid = t[:, 2] > near
    # keep invalid rows finite; callers must drop them via `valid`
    tz = np.where(valid, t[:, 2], 1.0)
    ts = np.column_stack([t[:, 0], t[:, 1], tz])
    mean2d = np.column_stack([camera.fx * ts[:, 0] / tz + camera.cx,
                              camera.fy * ts[:, 1] / tz + camera.cy])
    J = projection_jacobian(ts, camera.fx, camera.fy)
    T = J @ W
    raw = T @ covs @ np.swapaxes(T, -1, -2)
    cov2d = raw + SCREEN_DILATION * np.eye(2)
    return Projection(mean2d, raw, cov2d, t[:, 2].copy(), ts, J, valid)


def project_gaussian(mean, cov, camera: Camera, near=NEAR_PLANE):
    """Project a single Gaussian. Returns (mean2d, cov2d_raw, cov2d, depth)."""
    p = project_gaussians(np.asarray(mean)[None], np.asarray(cov)[None], camera, near)
    if not p.valid[0]:
        raise BehindCamera(f"camera-space depth {p.depth[0]:.4g} <= near plane {near}")
    return p.mean2d[0], p.cov2d_raw[0], p.cov2d[0], p.depth[0]


def projection_backward(proj: Projection, covs, camera: Camera, d_mean2d, d_cov2d, d_depth):
    """Gradients of projected quantities back to world means and 3D covariances.

    ``d_cov2d`` is a full 2x2 matrix gradient; it is symmetrized here.
    """
    W = camera.rotation
    J = proj.J
    T = J @ W
    G = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, -1, -2))
    d_cov3d = np.swapaxes(T, -1, -2) @ G @ T
    dT = 2.0 * G @ T @ covs
    dJ = dT @ W.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    z2, z3 = z * z, z * z * z
    dt = np.zeros_like(proj.t_cam)
    dt[:, 0] = d_mean2d[:, 0] * fx / z - dJ[:, 0, 2] * fx / z2
    dt[:, 1] = d_mean2d[:, 1] * fy / z - dJ[:, 1, 2] * fy / z2
    dt[:, 2] = (-d_mean2d[:, 0] * fx * x / z2 - d_mean2d[:, 1] * fy * y / z2
                - dJ[:, 0, 0] * fx / z2 + dJ[:, 0, 2] * 2 * fx * x / z3
                - dJ[:, 1, 1] * fy / z2 + dJ[:, 1, 2] * 2 * fy * y / z3
                + d_depth)
    return dt @ W, d_cov3d


# -- spherical harmonics ---------------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(dirs, degree=MAX_SH_DEGREE):
    """Real SH basis (Condon-Shortley phase) for unit directions; returns (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs, degree=MAX_SH_DEGREE):
    """d basis / d (x, y, z), treating the components as independent; (..., B, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    o = np.zeros_like(x)
    rows = [(o, o, o)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(o, -c, o), (o, o, c), (-c, o, o)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, o), (o, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
                 (c[3] * z, o, c[3] * x), (2 * c[4] * x, -2 * c[4] * y, o)]
    if degree >= 3:
        c = SH_C3
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), o),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
                 (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
                 (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, o)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_color(sh_coeffs, view_direction, degree=MAX_SH_DEGREE):
    """RGB from SH coefficients (..., B, 3) along unit view directions (..., 3).

    Adds the 0.5 offset and clamps each channel at zero.
    """
    nb = (degree + 1) ** 2
    basis = sh_basis(view_direction, degree)
    raw = np.einsum("...b,...bc->...c", basis, np.asarray(sh_coeffs)[..., :nb, :]) + 0.5
    return np.maximum(raw, 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def view_directions(means, camera: Camera):
    v = np.asarray(means, dtype=np.float64) - camera.center
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12), n


def sh_color_backward(sh_coeffs, means, camera: Camera, degree, d_color):
    """Gradients of clamped SH color w.r.t. coefficients and Gaussian means."""
    dirs, norm = view_directions(means, camera)
    nb = (degree + 1) ** 2
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nb,nbc->nc", basis, sh_coeffs[:, :nb, :]) + 0.5
    g = np.where(raw > 0, d_color, 0.0)
    d_sh = np.zeros_like(sh_coeffs)
    d_sh[:, :nb, :] = basis[:, :, None] * g[:, None, :]
    d_basis = np.einsum("nbc,nc->nb", sh_coeffs[:, :nb, :], g)
    d_dir = np.einsum("nb,nbk->nk", d_basis, sh_basis_jacobian(dirs, degree))
    d_means = (d_dir - dirs * np.sum(dirs * d_dir, axis=-1, keepdims=True)) / norm
    return d_sh, d_means

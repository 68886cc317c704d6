"""Persistence: dataset directories, checkpoints, point clouds, meshes, touches.

Dataset layout::

    scene/
      transforms_train.json  transforms_test.json
      images/*.png  depth/*.png (16-bit, depth_scale units per scene unit)
      points3d.ply  (sparse colored vision cloud)  gt_points.ply
      touches.json  mesh.obj

Manifest transforms are camera-to-world, row major, with the camera looking
down -z and +y up. ``camera_angle_x`` is the horizontal field of view; pixels
are square, so the vertical field of view follows from the image aspect.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from . import core_math as cm
from .core_math import Camera, GaussianSet
from .errors import (MalformedJson, MalformedManifest, MalformedPly, MissingFile,
                     UnsupportedVersion, ValidationError)
from .touch_sim import TouchPatch, TriangleMesh

log = logging.getLogger(__name__)

GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])
DEFAULT_DEPTH_SCALE = 1000.0
CHECKPOINT_VERSION = 1


# -- cameras and manifests ---------------------------------------------------------

def camera_from_transform(transform_matrix, camera_angle_x, width, height) -> Camera:
    c2w = np.asarray(transform_matrix, dtype=np.float64) @ GL_TO_CV
    w2c = np.linalg.inv(c2w)
    w2c[3] = [0, 0, 0, 1]
    f = 0.5 * width / np.tan(0.5 * camera_angle_x)
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0, w2c, width, height)


def camera_to_transform(camera: Camera):
    """(transform_matrix, camera_angle_x) for a camera."""
    R, t = camera.rotation, camera.translation
    c2w = np.eye(4)
    c2w[:3, :3] = R.T
    c2w[:3, 3] = -R.T @ t
    return c2w @ GL_TO_CV, 2.0 * np.arctan(0.5 * camera.width / camera.fx)


@dataclass
class Frame:
    file_path: str
    transform_matrix: np.ndarray
    depth_path: str | None = None


@dataclass
class DatasetManifest:
    camera_angle_x: float
    frames: list
    depth_scale: float = DEFAULT_DEPTH_SCALE
    split: str = "train"

    def to_json(self):
        return {
            "camera_angle_x": self.camera_angle_x,
            "depth_scale": self.depth_scale,
            "split": self.split,
            "frames": [{"file_path": f.file_path,
                        "transform_matrix": np.asarray(f.transform_matrix).tolist(),
                        **({"depth_path": f.depth_path} if f.depth_path else {})}
                       for f in self.frames],
        }


def _orthonormal(R, tol=1e-6):
    return np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise MalformedManifest(f"{path}: top level must be an object")
    for key in ("camera_angle_x", "frames"):
        if key not in raw:
            raise MalformedManifest(f"{path}: missing field '{key}'")
    frames = []
    for i, fr in enumerate(raw["frames"]):
        if "file_path" not in fr or "transform_matrix" not in fr:
            raise MalformedManifest(f"{path}: frames[{i}] needs 'file_path' and 'transform_matrix'")
        T = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if T.shape != (4, 4):
            raise MalformedManifest(f"{path}: frames[{i}].transform_matrix must be 4x4, got {T.shape}")
        if not _orthonormal(T[:3, :3]):
            raise MalformedManifest(f"{path}: frames[{i}].transform_matrix rotation is not orthonormal")
        frames.append(Frame(fr["file_path"], T, fr.get("depth_path")))
    return DatasetManifest(float(raw["camera_angle_x"]), frames,
                           float(raw.get("depth_scale", DEFAULT_DEPTH_SCALE)), raw.get("split", "train"))


# -- images -----------------------------------------------------------------------

def _resolve(root: Path, rel: str, suffix=".png"):
    p = root / rel
    if p.suffix == "" and not p.exists():
        p = p.with_suffix(suffix)
    return p


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path, image):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_depth_png(path, depth, depth_scale=DEFAULT_DEPTH_SCALE):
    q = np.clip(np.rint(np.asarray(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_depth_png(path, depth_scale=DEFAULT_DEPTH_SCALE):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"depth map not found: {path}")
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.float64)
    return q / depth_scale


# -- dataset ----------------------------------------------------------------------

@dataclass
class Split:
    cameras: list
    images: list
    depths: list | None


def load_split(manifest_path) -> Split:
    manifest_path = Path(manifest_path)
    man = read_manifest(manifest_path)
    root = manifest_path.parent
    cams, imgs, depths = [], [], []
    for fr in man.frames:
        img = read_image(_resolve(root, fr.file_path))
        H, W = img.shape[:2]
        cams.append(camera_from_transform(fr.transform_matrix, man.camera_angle_x, W, H))
        imgs.append(img)
        if fr.depth_path:
            depths.append(read_depth_png(_resolve(root, fr.depth_path), man.depth_scale))
    return Split(cams, imgs, depths if len(depths) == len(imgs) and depths else None)


def load_dataset(path, split="train"):
    """(cameras, images, optional GT depths) of one split of a dataset directory."""
    s = load_split(Path(path) / f"transforms_{split}.json")
    return s.cameras, s.images, s.depths


def save_split(root, split, cameras, images, depths=None, depth_scale=DEFAULT_DEPTH_SCALE):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if depths is not None:
        (root / "depth").mkdir(parents=True, exist_ok=True)
    frames, angle = [], None
    for k, (cam, img) in enumerate(zip(cameras, images)):
        name = f"{split}_{k:03d}"
        write_image(root / "images" / f"{name}.png", img)
        dpath = None
        if depths is not None:
            write_depth_png(root / "depth" / f"{name}.png", depths[k], depth_scale)
            dpath = f"depth/{name}.png"
        T, angle = camera_to_transform(cam)
        frames.append(Frame(f"images/{name}.png", T, dpath))
    man = DatasetManifest(float(angle if angle is not None else 0.0), frames, depth_scale, split)
    (root / f"transforms_{split}.json").write_text(json.dumps(man.to_json(), indent=2))
    return man


# -- point clouds -----------------------------------------------------------------------

def save_points(path, points, colors=None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.empty(len(points), dtype=fields)
    arr["x"], arr["y"], arr["z"] = points.T
    if colors is not None:
        c = np.clip(np.rint(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
        arr["red"], arr["green"], arr["blue"] = c.T
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


def load_points(path):
    """(points, colors or None) from a vertex PLY."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"point cloud not found: {path}")
    try:
        v = PlyData.read(str(path))["vertex"].data
    except (PlyParseError, KeyError, ValueError, EOFError) as e:
        raise MalformedPly(f"{path}: {e}") from e
    pts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    names = v.dtype.names
    cols = None
    if all(n in names for n in ("red", "green", "blue")):
        cols = np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64) / 255.0
    return pts, cols


# -- checkpoints ---------------------------------------------------------------------------

N_REST = 3 * (cm.SH_BASES - 1)


def _checkpoint_fields():
    f = [(n, "<f4") for n in ("x", "y", "z", "nx", "ny", "nz")]
    f += [(f"f_dc_{i}", "<f4") for i in range(3)]
    f += [(f"f_rest_{i}", "<f4") for i in range(N_REST)]
    f += [("opacity", "<f4")]
    f += [(f"scale_{i}", "<f4") for i in range(3)]
    f += [(f"rot_{i}", "<f4") for i in range(4)]
    f += [("set_tag", "u1")]
    return f


def _f64_fields(fields):
    return [(n, "<f8" if t == "<f4" else t) for n, t in fields]


def save_checkpoint(gaussians: GaussianSet, path, precision="double"):
    """Binary little-endian splat PLY with an extra ``set_tag`` uchar property.

    Floats are written as doubles by default so a round trip is bit exact;
    ``precision="float"`` writes the common float32 layout.
    """
    fields = _checkpoint_fields()
    if precision == "double":
        fields = _f64_fields(fields)
    g = gaussians
    arr = np.zeros(len(g), dtype=fields)
    arr["x"], arr["y"], arr["z"] = g.means.T
    for i in range(3):
        arr[f"f_dc_{i}"] = g.sh_coeffs[:, 0, i]
    # rest coefficients are stored channel-major, as in the community layout
    rest = np.transpose(g.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(len(g), -1)
    for i in range(N_REST):
        arr[f"f_rest_{i}"] = rest[:, i]
    arr["opacity"] = g.opacity_logits
    for i in range(3):
        arr[f"scale_{i}"] = g.log_scales[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = g.rotations[:, i]
    arr["set_tag"] = g.set_tag
    el = PlyElement.describe(arr, "vertex")
    ply = PlyData([el], byte_order="<", comments=[f"tactsplat checkpoint v{CHECKPOINT_VERSION}"])
    ply.write(str(path))


def load_checkpoint(path) -> GaussianSet:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint not found: {path}")
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except (PlyParseError, KeyError, ValueError, EOFError, IndexError) as e:
        raise MalformedPly(f"{path}: {e}") from e
    for c in ply.comments:
        if c.startswith("tactsplat checkpoint v"):
            try:
                ver = int(c.rsplit("v", 1)[1])
            except ValueError as e:
                raise MalformedPly(f"{path}: bad version comment {c!r}") from e
            if ver > CHECKPOINT_VERSION:
                raise UnsupportedVersion(f"{path}: checkpoint version {ver} > {CHECKPOINT_VERSION}")
    names = set(v.dtype.names)
    required = {"x", "y", "z", "opacity"} | {f"f_dc_{i}" for i in range(3)} \
        | {f"scale_{i}" for i in range(3)} | {f"rot_{i}" for i in range(4)}
    missing = required - names
    if missing:
        raise MalformedPly(f"{path}: missing properties {sorted(missing)}")
    n = len(v)
    means = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    sh = np.zeros((n, cm.SH_BASES, 3))
    sh[:, 0, :] = np.column_stack([v[f"f_dc_{i}"] for i in range(3)])
    rest_names = sorted((k for k in names if k.startswith("f_rest_")), key=lambda s: int(s[7:]))
    if rest_names:
        nb = len(rest_names) // 3
        if nb * 3 != len(rest_names) or nb + 1 > cm.SH_BASES:
            raise MalformedPly(f"{path}: unexpected f_rest count {len(rest_names)}")
        rest = np.column_stack([v[k] for k in rest_names]).reshape(n, 3, nb)
        sh[:, 1:nb + 1, :] = np.transpose(rest, (0, 2, 1))
    if "set_tag" in names:
        tags = np.asarray(v["set_tag"], dtype=np.uint8)
        if np.any(tags > cm.TOUCH):
            raise MalformedPly(f"{path}: set_tag values must be 0 or 1")
    else:
        log.warning("%s has no set_tag property; tagging all Gaussians as VISION", path)
        tags = np.zeros(n, dtype=np.uint8)
    g = GaussianSet(means,
                    np.column_stack([v[f"rot_{i}"] for i in range(4)]),
                    np.column_stack([v[f"scale_{i}"] for i in range(3)]),
                    np.asarray(v["opacity"]), sh, tags)
    arrays = [g.means, g.rotations, g.log_scales, g.opacity_logits, g.sh_coeffs]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise MalformedPly(f"{path}: non-finite parameters")
    if np.any(np.linalg.norm(g.rotations, axis=1) == 0):
        raise MalformedPly(f"{path}: zero quaternion")
    return g


# -- touches -------------------------------------------------------------------------------

def _check_pose(pose, where):
    if pose.shape != (4, 4):
        raise ValidationError(f"{where}: sensor_pose must have 16 entries")
    if not _orthonormal(pose[:3, :3]):
        raise ValidationError(f"{where}: sensor_pose rotation is not orthonormal")


def save_touches(patches, path):
    out = [{"grasp_id": int(p.grasp_id), "finger_id": int(p.finger_id),
            "sensor_pose": np.asarray(p.sensor_pose, dtype=np.float64).reshape(-1).tolist(),
            "patch_radius": float(p.patch_radius),
            "points": np.asarray(p.points, dtype=np.float64).reshape(-1).tolist()}
           for p in patches]
    Path(path).write_text(json.dumps(out))


def load_touches(path) -> list[TouchPatch]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"touch file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedJson(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(raw, list):
        raise MalformedJson(f"{path}: expected a JSON array of patches")
    patches = []
    for i, r in enumerate(raw):
        try:
            pose = np.asarray(r["sensor_pose"], dtype=np.float64)
            pts = np.asarray(r["points"], dtype=np.float64)
            radius, gid, fid = float(r["patch_radius"]), int(r["grasp_id"]), int(r["finger_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedJson(f"{path}: patch {i}: {e}") from e
        if pose.size != 16 or pts.size % 3:
            raise ValidationError(f"{path}: patch {i}: bad sensor_pose or points length")
        pose = pose.reshape(4, 4)
        _check_pose(pose, f"{path}: patch {i}")
        patches.append(TouchPatch(pose, pts.reshape(-1, 3), radius, gid, fid))
    if not patches:
        log.warning("%s holds no touches; the transmittance loss will be disabled", path)
    return patches


# -- meshes ------------------------------------------------------------------------------------

def save_obj(path, mesh: TriangleMesh):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    if mesh.vertex_normals is not None:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertex_normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    """Triangles-only OBJ reader; polygons are fan-triangulated, normals optional."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"mesh not found: {path}")
    verts, norms, faces, face_norms = [], [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [p.split("/") for p in parts[1:]]
                vi = [int(p[0]) for p in idx]
                ni = [int(p[2]) if len(p) > 2 and p[2] else None for p in idx]
                vi = [i - 1 if i > 0 else len(verts) + i for i in vi]
                for k in range(1, len(vi) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    face_norms.append([ni[0], ni[k], ni[k + 1]])
        except (ValueError, IndexError) as e:
            raise ValidationError(f"{path}:{lineno}: cannot parse {line!r}") from e
    normals = None
    # per-vertex normals only when every face corner references the same-indexed normal
    if norms and len(norms) == len(verts) and all(
            fn == [v + 1 for v in f] for f, fn in zip(faces, face_norms)):
        normals = np.asarray(norms)
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                        normals)

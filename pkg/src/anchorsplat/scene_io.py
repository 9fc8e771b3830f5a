"""Posed-image dataset loading: COLMAP text and Blender-style transforms.json.

Both loaders produce a :class:`Scene` — a list of pinhole cameras, their
images as float RGB arrays in [0, 1], a sparse point cloud, and a per-view
train/test split tag. Scenes are treated as immutable after load.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import ParseError, ValidationError

SUPPORTED_CAMERA_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


def quat_to_rotmat(q):
    """Rotation matrix of a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R):
    """Unit (w, x, y, z) quaternion of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    K = (
        np.array(
            [
                [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
                [R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
                [R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1], 0],
                [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
            ]
        )
        / 3.0
    )
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4, row-major, camera looks along +z

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ValidationError("world_to_camera must be 4x4")
        R = w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValidationError("world_to_camera rotation block is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point outside image")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def camera_position(self):
        """World-space camera center, -R^T t."""
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, points):
        """Map world points (N, 3) into camera coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def project_points(self, points):
        """Project world points to pixel coordinates; returns (uv (N, 2), z (N,))."""
        t = self.world_to_cam_points(points)
        z = t[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * t[:, 0] / z + self.cx
            v = self.fy * t[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray  # (M, 3)
    colors: np.ndarray | None = None  # (M, 3) in [0, 1]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValidationError("point cloud contains non-finite coordinates")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if col.shape[0] != pos.shape[0]:
                raise ValidationError("colors/positions length mismatch")
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class Scene:
    cameras: tuple
    images: tuple  # per-view HxWx3 float arrays in [0, 1]
    points: PointCloud
    is_test: np.ndarray  # (n_views,) bool; all-False until split_train_test
    kind: str = "colmap"  # "colmap" | "transforms"
    image_names: tuple = ()

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValidationError("camera/image count mismatch")
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValidationError("image shape does not match its camera")
        mask = np.asarray(self.is_test, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "is_test", mask)

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def train_indices(self):
        return np.flatnonzero(~self.is_test)

    @property
    def test_indices(self):
        return np.flatnonzero(self.is_test)


def read_image(path):
    """Decode a PNG to float RGB in [0, 1]; RGBA is composited over white."""
    with Image.open(path) as im:
        if im.mode == "RGBA":
            arr = np.asarray(im, dtype=np.float64) / 255.0
            rgb, a = arr[..., :3], arr[..., 3:4]
            arr = rgb * a + (1.0 - a)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    arr.setflags(write=False)
    return arr


def write_png(path, image):
    """Write a float [0, 1] HxWx3 image as 8-bit PNG (round half up)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def _iter_content_lines(path):
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _parse_floats(parts, path, lineno):
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: expected numeric fields") from exc


def _read_cameras_txt(path):
    cameras = {}
    for lineno, line in _iter_content_lines(path):
        parts = line.split()
        if len(parts) < 5:
            raise ParseError(f"{path}:{lineno}: too few fields for a camera entry")
        cam_id = int(parts[0])
        model = parts[1]
        if model not in SUPPORTED_CAMERA_MODELS:
            raise ParseError(f"{path}:{lineno}: unsupported camera model '{model}'")
        width, height = int(parts[2]), int(parts[3])
        params = _parse_floats(parts[4:], path, lineno)
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"{path}:{lineno}: SIMPLE_PINHOLE needs 3 params")
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            if len(params) != 4:
                raise ParseError(f"{path}:{lineno}: PINHOLE needs 4 params")
            fx, fy, cx, cy = params
        cameras[cam_id] = (width, height, fx, fy, cx, cy)
    if not cameras:
        raise ParseError(f"{path}: no camera entries found")
    return cameras


def _read_images_txt(path):
    # two lines per image; the second (POINTS2D) may be empty, so blank
    # lines are significant here, unlike the other COLMAP files
    entries = []
    expecting_points = False
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if expecting_points:
                expecting_points = False  # POINTS2D payload ignored
                continue
            if not line:
                continue
            parts = line.split()
            if len(parts) < 10:
                raise ParseError(f"{path}:{lineno}: too few fields for an image entry")
            qvec = _parse_floats(parts[1:5], path, lineno)
            tvec = _parse_floats(parts[5:8], path, lineno)
            cam_id = int(parts[8])
            name = parts[9]
            entries.append((qvec, tvec, cam_id, name))
            expecting_points = True
    if not entries:
        raise ParseError(f"{path}: no image entries found")
    return entries


def _read_points3d_txt(path):
    positions = []
    colors = []
    for lineno, line in _iter_content_lines(path):
        parts = line.split()
        if len(parts) < 7:
            raise ParseError(f"{path}:{lineno}: too few fields for a 3D point")
        vals = _parse_floats(parts[1:7], path, lineno)
        positions.append(vals[0:3])
        colors.append([v / 255.0 for v in vals[3:6]])
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    return positions, colors


def load_colmap_text(dir_path):
    """Load a COLMAP text model (cameras/images/points3D.txt + images/)."""
    dir_path = os.fspath(dir_path)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        full = os.path.join(dir_path, name)
        if not os.path.isfile(full):
            raise FileNotFoundError(f"missing COLMAP file: {full}")
    cam_params = _read_cameras_txt(os.path.join(dir_path, "cameras.txt"))
    entries = _read_images_txt(os.path.join(dir_path, "images.txt"))
    entries.sort(key=lambda e: e[3])  # deterministic view order by image name

    cameras = []
    images = []
    names = []
    for qvec, tvec, cam_id, name in entries:
        if cam_id not in cam_params:
            raise ParseError(f"images.txt references unknown camera id {cam_id}")
        width, height, fx, fy, cx, cy = cam_params[cam_id]
        w2c = np.eye(4)
        w2c[:3, :3] = quat_to_rotmat(qvec)
        w2c[:3, 3] = tvec
        cameras.append(Camera(width, height, fx, fy, cx, cy, w2c))
        img_path = os.path.join(dir_path, "images", name)
        if not os.path.isfile(img_path):
            raise FileNotFoundError(f"missing image file: {img_path}")
        images.append(read_image(img_path))
        names.append(name)

    positions, colors = _read_points3d_txt(os.path.join(dir_path, "points3D.txt"))
    points = PointCloud(positions, colors if len(colors) else None)
    return Scene(
        cameras=tuple(cameras),
        images=tuple(images),
        points=points,
        is_test=np.zeros(len(cameras), dtype=bool),
        kind="colmap",
        image_names=tuple(names),
    )


def load_transforms_json(file_path):
    """Load a Blender-style transforms.json plus its referenced images."""
    file_path = os.fspath(file_path)
    if not os.path.isfile(file_path):
        raise FileNotFoundError(f"missing transforms file: {file_path}")
    with open(file_path, "r") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{file_path}: invalid JSON: {exc}") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ParseError(f"{file_path}: missing camera_angle_x or frames")
    angle_x = float(meta["camera_angle_x"])
    base = os.path.dirname(file_path)

    cameras = []
    images = []
    names = []
    for i, frame in enumerate(meta["frames"]):
        if "transform_matrix" not in frame or "file_path" not in frame:
            raise ParseError(f"{file_path}: frame {i} missing fields")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ParseError(f"{file_path}: frame {i} transform is not 4x4")
        if abs(np.linalg.det(c2w[:3, :3])) < 1e-12:
            raise ValidationError(f"{file_path}: frame {i} matrix is not invertible")
        w2c = np.linalg.inv(c2w)
        rel = frame["file_path"]
        img_path = os.path.join(base, rel)
        if not os.path.splitext(img_path)[1]:
            img_path += ".png"
        img = read_image(img_path)
        height, width = img.shape[:2]
        fx = fy = 0.5 * width / math.tan(0.5 * angle_x)
        cameras.append(Camera(width, height, fx, fy, width / 2.0, height / 2.0, w2c))
        images.append(img)
        names.append(os.path.basename(img_path))

    if not cameras:
        raise ParseError(f"{file_path}: no frames")
    points = PointCloud(np.zeros((0, 3)))
    return Scene(
        cameras=tuple(cameras),
        images=tuple(images),
        points=points,
        is_test=np.zeros(len(cameras), dtype=bool),
        kind="transforms",
        image_names=tuple(names),
    )


def split_train_test(scene, rule):
    """Tag views as train/test.

    rule is ``"every-nth:<n>"`` (views with index % n == 0 become test),
    ``"list:<i>,<j>,..."``, or an explicit iterable of test indices.
    """
    n = scene.n_views
    mask = np.zeros(n, dtype=bool)
    if isinstance(rule, str):
        rule = rule.strip()
        if rule.startswith("every-nth:"):
            try:
                step = int(rule.split(":", 1)[1])
            except ValueError as exc:
                raise ValidationError(f"bad split rule '{rule}'") from exc
            if step < 1:
                raise ValidationError("every-nth step must be >= 1")
            mask[::step] = True
        elif rule.startswith("list:"):
            body = rule.split(":", 1)[1].strip()
            try:
                idx = [int(part) for part in body.split(",") if part.strip()]
            except ValueError as exc:
                raise ValidationError(f"bad split rule '{rule}'") from exc
            rule = idx
        else:
            raise ValidationError(f"unknown split rule '{rule}'")
    if not isinstance(rule, str):
        idx = np.asarray(list(rule), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError("explicit test index out of range")
        mask[idx] = True
    if mask.all():
        raise ValidationError("split rule leaves an empty train set")
    return replace(scene, is_test=mask)


def write_colmap_text(scene, dir_path):
    """Write a Scene back out as a COLMAP text model (with PNG images)."""
    dir_path = os.fspath(dir_path)
    os.makedirs(os.path.join(dir_path, "images"), exist_ok=True)

    with open(os.path.join(dir_path, "cameras.txt"), "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for i, cam in enumerate(scene.cameras):
            fh.write(
                f"{i + 1} PINHOLE {cam.width} {cam.height} "
                f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}\n"
            )

    with open(os.path.join(dir_path, "images.txt"), "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for i, cam in enumerate(scene.cameras):
            name = scene.image_names[i] if scene.image_names else f"view_{i:04d}.png"
            q = [float(v) for v in rotmat_to_quat(cam.rotation)]
            t = [float(v) for v in cam.translation]
            fh.write(
                f"{i + 1} {q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} "
                f"{t[0]!r} {t[1]!r} {t[2]!r} {i + 1} {name}\n\n"
            )
            write_png(os.path.join(dir_path, "images", name), scene.images[i])

    with open(os.path.join(dir_path, "points3D.txt"), "w") as fh:
        fh.write("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
        pos = scene.points.positions
        col = scene.points.colors
        for i in range(len(scene.points)):
            if col is not None:
                rgb = np.floor(np.clip(col[i], 0, 1) * 255.0 + 0.5).astype(int)
            else:
                rgb = np.array([128, 128, 128])
            x, y, z = (float(v) for v in pos[i])
            fh.write(f"{i + 1} {x!r} {y!r} {z!r} {rgb[0]} {rgb[1]} {rgb[2]} 0.0\n")

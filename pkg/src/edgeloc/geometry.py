"""Rigid transforms, camera projection with distortion, and triangle meshes.

Conventions used throughout the package:

* Translations, vertices and depths are in millimeters; angles exposed in
  configuration are in degrees, internal math is in radians.
* A pose maps points from the station (object) frame into the camera
  frame: ``p_cam = pose.apply(p_station)``. The camera looks along +z.
* Pixel coordinates are (x, y) with x = column, y = row, and integer
  coordinates at pixel centers.

All types are immutable after construction and all operations are pure,
so instances can be shared freely across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    """Projection of a point with non-positive camera depth."""


def _as_readonly(a, shape, dtype=np.float64):
    out = np.asarray(a, dtype=dtype).reshape(shape).copy()
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z ordering)

def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _rotvec_to_quat(rv):
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        # first-order expansion, exact enough below the norm cutoff
        return np.array([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]])
    axis = rv / angle
    s = np.sin(0.5 * angle)
    return np.array([np.cos(0.5 * angle), s * axis[0], s * axis[1], s * axis[2]])


def _quat_to_rotvec(q):
    w, x, y, z = q
    if w < 0:  # keep the short rotation
        w, x, y, z = -w, -x, -y, -z
    sin_half = np.sqrt(x * x + y * y + z * z)
    if sin_half < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * np.arctan2(sin_half, w)
    return (angle / sin_half) * np.array([x, y, z])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element stored as a unit quaternion plus translation (mm)."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too small")
        object.__setattr__(self, "quaternion", _as_readonly(q / n, (4,)))
        object.__setattr__(self, "translation", _as_readonly(self.translation, (3,)))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @staticmethod
    def from_rotvec(rotvec_rad, translation_mm=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(_rotvec_to_quat(rotvec_rad), translation_mm)

    @staticmethod
    def from_axis_angle_deg(axis, angle_deg, translation_mm=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return RigidTransform.from_rotvec(axis * np.deg2rad(angle_deg), translation_mm)

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        """Build from a 4x4 (or 3x4) homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        # Shepperd's method, branch on the largest diagonal term
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                          (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(r)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
            q = np.empty(4)
            q[0] = (r[k, j] - r[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (r[j, i] + r[i, j]) / s
            q[1 + k] = (r[k, i] + r[i, k]) / s
        return RigidTransform(q, m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quaternion)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def rotation_vector(self) -> np.ndarray:
        """Axis-angle vector in radians."""
        return _quat_to_rotvec(self.quaternion)

    def rotation_angle_deg(self) -> float:
        return float(np.rad2deg(np.linalg.norm(self.rotation_vector())))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        q = _quat_mul(self.quaternion, other.quaternion)
        t = self.apply(other.translation)
        return RigidTransform(q, t)

    def invert(self) -> "RigidTransform":
        w, x, y, z = self.quaternion
        q_inv = np.array([w, -x, -y, -z])
        t_inv = -_quat_to_matrix(q_inv) @ self.translation
        return RigidTransform(q_inv, t_inv)

    def apply(self, points) -> np.ndarray:
        """Map one point (3,) or many (N, 3) through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def __repr__(self):
        q = np.array2string(self.quaternion, precision=6, suppress_small=True)
        t = np.array2string(self.translation, precision=3, suppress_small=True)
        return f"RigidTransform(q={q}, t={t} mm)"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.invert()


def pose_error(estimate: RigidTransform, truth: RigidTransform) -> RigidTransform:
    """Relative transform between two camera poses of the same scene.

    Both arguments map station points into their respective camera frames.
    The result maps estimated-camera coordinates into true-camera
    coordinates; its translation is the estimated camera origin expressed
    in the true camera frame.
    """
    return truth.compose(estimate.invert())


# ---------------------------------------------------------------------------
# camera model


@dataclass(frozen=True)
class CameraModel:
    """Perspective camera with radial (k1..k3) and tangential (p1, p2) distortion.

    With all coefficients zero this reduces exactly to a pinhole camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def distort_normalized(self, xn, yn):
        """Apply the distortion polynomial to normalized image coordinates."""
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        xd = xn * radial + 2.0 * self.p1 * xn * yn + self.p2 * (r2 + 2.0 * xn * xn)
        yd = yn * radial + self.p1 * (r2 + 2.0 * yn * yn) + 2.0 * self.p2 * xn * yn
        return xd, yd

    def _distort_jacobian(self, xn, yn):
        """d(xd, yd)/d(xn, yn), entries broadcast over the inputs."""
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        dr = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2)
        j00 = radial + 2.0 * xn * xn * dr + 2.0 * self.p1 * yn + 6.0 * self.p2 * xn
        j01 = 2.0 * xn * yn * dr + 2.0 * self.p1 * xn + 2.0 * self.p2 * yn
        j10 = 2.0 * xn * yn * dr + 2.0 * self.p2 * yn + 2.0 * self.p1 * xn
        j11 = radial + 2.0 * yn * yn * dr + 6.0 * self.p1 * yn + 2.0 * self.p2 * xn
        return j00, j01, j10, j11

    def undistort_normalized(self, xd, yd, iters: int = 25, tol: float = 1e-14):
        """Invert the distortion polynomial by Newton iteration."""
        xd = np.asarray(xd, dtype=np.float64)
        yd = np.asarray(yd, dtype=np.float64)
        xn, yn = xd.copy(), yd.copy()
        for _ in range(iters):
            fx_, fy_ = self.distort_normalized(xn, yn)
            rx, ry = fx_ - xd, fy_ - yd
            j00, j01, j10, j11 = self._distort_jacobian(xn, yn)
            det = j00 * j11 - j01 * j10
            dx = (j11 * rx - j01 * ry) / det
            dy = (-j10 * rx + j00 * ry) / det
            xn -= dx
            yn -= dy
            if max(np.max(np.abs(dx)), np.max(np.abs(dy))) < tol:
                break
        return xn, yn

    def project(self, point_cam) -> np.ndarray:
        """Project one camera-frame point (mm) to a distorted pixel.

        Raises BehindCameraError when the point depth is <= 0.
        """
        p = np.asarray(point_cam, dtype=np.float64).reshape(3)
        if p[2] <= 0.0:
            raise BehindCameraError(f"point depth {p[2]:.3f} mm is not in front of the camera")
        xn, yn = p[0] / p[2], p[1] / p[2]
        xd, yd = self.distort_normalized(xn, yn)
        return np.array([self.fx * xd + self.cx, self.fy * yd + self.cy])

    def project_many(self, points_cam):
        """Vectorized projection; returns (pixels (N,2), valid (N,) bool)."""
        p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
        z = p[:, 2]
        valid = z > 1e-9
        zsafe = np.where(valid, z, 1.0)
        xn, yn = p[:, 0] / zsafe, p[:, 1] / zsafe
        xd, yd = self.distort_normalized(xn, yn)
        pix = np.stack([self.fx * xd + self.cx, self.fy * yd + self.cy], axis=1)
        return pix, valid

    def unproject(self, pixel, depth_mm: float) -> np.ndarray:
        """Camera-frame point at the given depth along the pixel's ray."""
        xd = (pixel[0] - self.cx) / self.fx
        yd = (pixel[1] - self.cy) / self.fy
        xn, yn = self.undistort_normalized(xd, yd)
        return np.array([float(xn) * depth_mm, float(yn) * depth_mm, depth_mm])

    def pixel_jacobian(self, point_cam) -> np.ndarray:
        """Analytic 2x3 derivative of the projected pixel wrt the 3D point."""
        p = np.asarray(point_cam, dtype=np.float64).reshape(3)
        x, y, z = p
        xn, yn = x / z, y / z
        j00, j01, j10, j11 = self._distort_jacobian(xn, yn)
        # d(xn, yn)/d(x, y, z)
        jn = np.array([[1.0 / z, 0.0, -x / (z * z)],
                       [0.0, 1.0 / z, -y / (z * z)]])
        jd = np.array([[j00, j01], [j10, j11]])
        return np.diag([self.fx, self.fy]) @ jd @ jn

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "k1": self.k1, "k2": self.k2, "k3": self.k3,
            "p1": self.p1, "p2": self.p2,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CameraModel":
        return CameraModel(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
            k3=float(d.get("k3", 0.0)),
            p1=float(d.get("p1", 0.0)), p2=float(d.get("p2", 0.0)),
        )


@lru_cache(maxsize=8)
def camera_ray_grid(camera: CameraModel) -> np.ndarray:
    """Undistorted normalized ray directions for every pixel center.

    Returns an (height, width, 2) array of (xn, yn); the ray through pixel
    (x, y) is (xn, yn, 1) * depth. Cached per camera, so rasterization and
    backprojection share one Newton solve per camera.
    """
    xs = np.arange(camera.width, dtype=np.float64)
    ys = np.arange(camera.height, dtype=np.float64)
    xd = (xs[None, :] - camera.cx) / camera.fx
    yd = (ys[:, None] - camera.cy) / camera.fy
    xd_grid = np.broadcast_to(xd, (camera.height, camera.width)).copy()
    yd_grid = np.broadcast_to(yd, (camera.height, camera.width)).copy()
    xn, yn = camera.undistort_normalized(xd_grid, yd_grid)
    out = np.stack([xn, yn], axis=2)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle soup with a per-face object label (0 is background)."""

    vertices: np.ndarray
    faces: np.ndarray
    face_object_id: np.ndarray

    def __post_init__(self):
        v = _as_readonly(self.vertices, (-1, 3))
        f = _as_readonly(self.faces, (-1, 3), dtype=np.int32)
        ids = np.asarray(self.face_object_id, dtype=np.int32).reshape(-1)
        if len(ids) != len(f):
            raise ValueError("face_object_id length must match faces")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        ids = ids.copy()
        ids.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_object_id", ids)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @staticmethod
    def from_faces(vertices, faces, object_id: int = 1) -> "TriangleMesh":
        faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        return TriangleMesh(vertices, faces, np.full(len(faces), object_id, np.int32))


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, ids, off = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        ids.append(m.face_object_id)
        off += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(faces), np.concatenate(ids))


def _triangle_areas(vertices, faces):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def load_obj(path) -> TriangleMesh:
    """Load a Wavefront OBJ mesh; polygons are fan-triangulated.

    Each ``o``/``g`` statement starts a new object label (first label is 1).
    Zero-area faces are dropped.
    """
    path = Path(path)
    vertices: list = []
    faces: list = []
    ids: list = []
    current_id = 1
    seen_faces_for_id = False
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag in ("o", "g"):
                if seen_faces_for_id:
                    current_id += 1
                    seen_faces_for_id = False
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    raw = int(tok.split("/")[0])
                    idx.append(raw - 1 if raw > 0 else len(vertices) + raw)
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[i], idx[i + 1]])
                    ids.append(current_id)
                seen_faces_for_id = True
    if not faces:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32), np.zeros(0, np.int32))
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int32)
    keep = _triangle_areas(v, f) > 1e-12
    return TriangleMesh(v, f[keep], np.asarray(ids, np.int32)[keep])


def save_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    order = np.argsort(mesh.face_object_id, kind="stable")
    last_id = None
    for fi in order:
        oid = int(mesh.face_object_id[fi])
        if oid != last_id:
            lines.append(f"o part{oid}")
            last_id = oid
        a, b, c = (int(i) + 1 for i in mesh.faces[fi])
        lines.append(f"f {a} {b} {c}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# pose uncertainty


@dataclass(frozen=True, eq=False)
class UncertaintyBox:
    """Per-axis bounds on a pose perturbation (translation mm, rotation deg)."""

    translation_half_mm: np.ndarray
    rotation_half_deg: np.ndarray

    def __post_init__(self):
        t = _as_readonly(self.translation_half_mm, (3,))
        r = _as_readonly(self.rotation_half_deg, (3,))
        if np.any(t < 0) or np.any(r < 0):
            raise ValueError("half-widths must be non-negative")
        object.__setattr__(self, "translation_half_mm", t)
        object.__setattr__(self, "rotation_half_deg", r)

    @staticmethod
    def symmetric(translation_mm: float, rotation_deg: float) -> "UncertaintyBox":
        return UncertaintyBox(np.full(3, float(translation_mm)), np.full(3, float(rotation_deg)))

    def scaled(self, factor: float) -> "UncertaintyBox":
        return UncertaintyBox(self.translation_half_mm * factor, self.rotation_half_deg * factor)

    def corner_transforms(self):
        """The 64 extreme perturbations (every sign combination per axis)."""
        out = []
        t_half = self.translation_half_mm
        r_half = np.deg2rad(self.rotation_half_deg)
        for mask in range(64):
            signs = np.array([1.0 if mask & (1 << i) else -1.0 for i in range(6)])
            rv = signs[3:] * r_half
            out.append(RigidTransform.from_rotvec(rv, signs[:3] * t_half))
        return out

    def contains(self, delta: RigidTransform, margin: float = 0.0) -> bool:
        """Componentwise membership test, with a relative tolerance margin."""
        t_lim = self.translation_half_mm * (1.0 + margin) + 1e-9
        r_lim = self.rotation_half_deg * (1.0 + margin) + 1e-9
        rv_deg = np.abs(np.rad2deg(delta.rotation_vector()))
        return bool(np.all(np.abs(delta.translation) <= t_lim) and np.all(rv_deg <= r_lim))


def sample_pose_perturbation(box: UncertaintyBox, rng) -> RigidTransform:
    """Uniform per-axis perturbation inside the box.

    ``rng`` is an integer seed or a numpy Generator; a given seed always
    yields the same transform.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    t = gen.uniform(-box.translation_half_mm, box.translation_half_mm)
    r = gen.uniform(-np.deg2rad(box.rotation_half_deg), np.deg2rad(box.rotation_half_deg))
    # degenerate axes: uniform(-0, 0) is fine and returns 0
    return RigidTransform.from_rotvec(r, t)


# ---------------------------------------------------------------------------
# JSON pose / camera files


def save_pose(pose: RigidTransform, path) -> None:
    doc = {
        "quaternion_wxyz": [float(v) for v in pose.quaternion],
        "translation_mm": [float(v) for v in pose.translation],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_pose(path) -> RigidTransform:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return RigidTransform(np.asarray(doc["quaternion_wxyz"], dtype=np.float64),
                          np.asarray(doc["translation_mm"], dtype=np.float64))


def save_camera(camera: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera.to_json_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_camera(path) -> CameraModel:
    return CameraModel.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

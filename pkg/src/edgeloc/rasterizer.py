"""Software rasterizer producing depth, normal and object-id buffers.

Vertices are projected through the full distortion model, so renders line
up with real (distorted) imagery without any post-warp. Straight mesh
edges become curves under distortion; triangles are adaptively subdivided
until every projected edge midpoint sits within SUBDIV_TOL_PX of its
chord, after which straight-edge coverage tests are accurate to that
tolerance. Per-pixel depth is exact regardless: it comes from
intersecting the pixel's undistorted ray with the face plane.

Rasterization is deterministic: faces are processed in index order and a
depth tie keeps the earlier face, so rendering a scene twice is
bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraModel, RigidTransform, TriangleMesh, camera_ray_grid
from . import imageio

SUBDIV_TOL_PX = 0.25
_MAX_SUBDIV_LEVEL = 8
_NEAR_MM = 1e-3

# 8-neighborhood offsets (dy, dx)
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class EmptyMeshError(ValueError):
    """Rasterization of a mesh with no faces."""


class UnrenderedPixelError(ValueError):
    """Backprojection of a pixel not covered by any object."""


@dataclass(frozen=True, eq=False)
class GeometryBuffer:
    """Per-pixel depth (mm, +inf where empty), unit normal and object id."""

    depth: np.ndarray
    normal: np.ndarray
    object_id: np.ndarray

    def __post_init__(self):
        for arr in (self.depth, self.normal, self.object_id):
            arr.flags.writeable = False

    @property
    def rendered(self) -> np.ndarray:
        return self.object_id != 0


def _clip_near(tri: np.ndarray, near: float):
    """Clip one camera-space triangle against z >= near; yields triangles."""
    inside = tri[:, 2] >= near
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        a_in, b_in = inside[i], inside[(i + 1) % 3]
        if a_in:
            poly.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    return [np.array([poly[0], poly[i], poly[i + 1]]) for i in range(1, len(poly) - 1)]


def _needs_subdivision(pix: np.ndarray, mid_pix: np.ndarray) -> bool:
    """True when any projected edge midpoint strays from its chord line."""
    for i in range(3):
        a, b = pix[i], pix[(i + 1) % 3]
        m = mid_pix[i]
        chord = b - a
        length = np.hypot(chord[0], chord[1])
        if length < 1e-9:
            dev = np.hypot(m[0] - a[0], m[1] - a[1])
        else:
            dev = abs(chord[0] * (m[1] - a[1]) - chord[1] * (m[0] - a[0])) / length
        if dev > SUBDIV_TOL_PX:
            return True
    return False


def rasterize(mesh: TriangleMesh, pose: RigidTransform, camera: CameraModel) -> GeometryBuffer:
    """Z-buffer render of the mesh seen from ``pose`` (station -> camera).

    For every covered pixel: depth of the nearest surface along the pixel
    ray, that face's unit normal oriented toward the camera (camera
    frame), and the face's object label. Ties keep the lowest face index.
    """
    if mesh.n_faces == 0:
        raise EmptyMeshError("mesh has no faces")

    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    object_id = np.zeros((h, w), dtype=np.int32)

    rays = camera_ray_grid(camera)  # (h, w, 2) normalized directions
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)

    verts_cam = pose.apply(mesh.vertices)

    for fi in range(mesh.n_faces):
        tri = verts_cam[mesh.faces[fi]]
        if np.all(tri[:, 2] < _NEAR_MM):
            continue
        # face plane n.p = d, normal flipped to point at the camera (d < 0)
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = float(n @ tri[0])
        if d > 0.0:
            n, d = -n, -d
        if d == 0.0:
            continue  # plane through the camera center projects to a line
        oid = int(mesh.face_object_id[fi])

        stack = [(t, 0) for t in _clip_near(tri, _NEAR_MM)]
        while stack:
            t3d, level = stack.pop()
            pix, valid = camera.project_many(t3d)
            if not valid.all():
                continue
            mids = 0.5 * (t3d + np.roll(t3d, -1, axis=0))
            mid_pix, mid_valid = camera.project_many(mids)
            if level < _MAX_SUBDIV_LEVEL and mid_valid.all() and _needs_subdivision(pix, mid_pix):
                m01, m12, m20 = mids
                v0, v1, v2 = t3d
                stack.extend(((np.array([v0, m01, m20]), level + 1),
                              (np.array([m01, v1, m12]), level + 1),
                              (np.array([m20, m12, v2]), level + 1),
                              (np.array([m01, m12, m20]), level + 1)))
                continue
            _fill_triangle(pix, n, d, oid, fi, depth, normal, object_id, rays, xs, ys)

    return GeometryBuffer(depth, normal, object_id)


def _fill_triangle(pix, n, d, oid, fi, depth, normal, object_id, rays, xs, ys):
    h, w = depth.shape
    x0 = max(0, int(np.ceil(pix[:, 0].min())))
    x1 = min(w - 1, int(np.floor(pix[:, 0].max())))
    y0 = max(0, int(np.ceil(pix[:, 1].min())))
    y1 = min(h - 1, int(np.floor(pix[:, 1].max())))
    if x0 > x1 or y0 > y1:
        return

    # consistent winding so interior pixels have positive edge functions
    area = ((pix[1, 0] - pix[0, 0]) * (pix[2, 1] - pix[0, 1])
            - (pix[1, 1] - pix[0, 1]) * (pix[2, 0] - pix[0, 0]))
    order = (0, 1, 2) if area > 0 else (0, 2, 1)
    p = pix[list(order)]

    gx = xs[x0:x1 + 1][None, :]
    gy = ys[y0:y1 + 1][:, None]
    inside = np.ones((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
    for i in range(3):
        ax, ay = p[i]
        bx, by = p[(i + 1) % 3]
        e = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        # shared boundary pixels go to exactly one of the two triangles
        on_edge_ok = (by - ay) > 0 or ((by - ay) == 0 and (bx - ax) > 0)
        inside &= (e > 0) | ((e == 0) & on_edge_ok)
        if not inside.any():
            return

    r = rays[y0:y1 + 1, x0:x1 + 1]
    denom = n[0] * r[:, :, 0] + n[1] * r[:, :, 1] + n[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = d / denom
    hit = inside & np.isfinite(s) & (s > _NEAR_MM)

    dslice = depth[y0:y1 + 1, x0:x1 + 1]
    closer = hit & (s < dslice)
    if not closer.any():
        return
    dslice[closer] = s[closer]
    object_id[y0:y1 + 1, x0:x1 + 1][closer] = oid
    normal[y0:y1 + 1, x0:x1 + 1][closer] = n


def _shift(arr, dy, dx):
    """Neighbor values with edge replication, so the frame border is inert."""
    padded = np.pad(arr, [(1, 1), (1, 1)] + [(0, 0)] * (arr.ndim - 2), mode="edge")
    h, w = arr.shape[:2]
    return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def salient_edges(buf: GeometryBuffer, normal_thresh_deg: float = 30.0,
                  depth_thresh_mm: float = 5.0):
    """Mark pixels bordering a geometric discontinuity.

    A rendered pixel is an edge when an 8-neighbor is unrendered
    (silhouette), or differs in depth by more than ``depth_thresh_mm``, or
    in face normal by more than ``normal_thresh_deg``. Discontinuity pairs
    are marked on the nearer-depth side only, which keeps edges one pixel
    wide; exact depth ties fall back to row-major order.

    Returns ``(edges, render_mask)``. The mask is the region template
    scoring may trust: the object cover eroded by one pixel (so background
    pixels hugging the silhouette never count as rendered non-edges) with
    the edge pixels themselves kept in, so silhouettes stay scoreable.
    """
    if normal_thresh_deg <= 0 or depth_thresh_mm <= 0:
        raise ValueError("thresholds must be positive")
    rendered = buf.rendered
    cos_thresh = np.cos(np.deg2rad(normal_thresh_deg))

    edges = np.zeros_like(rendered)
    for dy, dx in _OFFSETS:
        n_rend = _shift(rendered, dy, dx)
        n_depth = _shift(buf.depth, dy, dx)
        n_normal = _shift(buf.normal, dy, dx)

        silhouette = rendered & ~n_rend

        both = rendered & n_rend
        with np.errstate(invalid="ignore"):  # inf - inf in unrendered pairs
            depth_disc = both & (np.abs(buf.depth - n_depth) > depth_thresh_mm)
        ndot = np.einsum("ijk,ijk->ij", buf.normal, n_normal)
        normal_disc = both & (ndot < cos_thresh)

        precede = dy > 0 or (dy == 0 and dx > 0)
        nearer = (buf.depth < n_depth) | ((buf.depth == n_depth) & precede)
        edges |= silhouette | ((depth_disc | normal_disc) & nearer)

    mask = ndimage.binary_erosion(rendered, structure=np.ones((3, 3), bool)) | edges
    return edges, mask


def backproject(buf: GeometryBuffer, pixel, camera: CameraModel,
                pose: RigidTransform) -> np.ndarray:
    """Station-frame 3D point (mm) under a rendered pixel."""
    x, y = int(round(pixel[0])), int(round(pixel[1]))
    if buf.object_id[y, x] == 0:
        raise UnrenderedPixelError(f"pixel ({x}, {y}) is not rendered")
    z = buf.depth[y, x]
    xn, yn = camera_ray_grid(camera)[y, x]
    p_cam = np.array([xn * z, yn * z, z])
    return pose.invert().apply(p_cam)


def shade_flat(buf: GeometryBuffer, ambient: int = 40, diffuse: int = 170,
               background: int = 10) -> np.ndarray:
    """Headlight-shaded grayscale render, for exercising the image pipeline."""
    facing = np.clip(-buf.normal[:, :, 2], 0.0, 1.0)
    img = np.full(buf.depth.shape, float(background))
    img[buf.rendered] = ambient + diffuse * facing[buf.rendered]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def dump_geometry_buffer(buf: GeometryBuffer, out_dir, prefix: str = "render"):
    """Write depth (16-bit PGM, mm clamped), normals (PPM) and cover mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = np.where(np.isfinite(buf.depth), buf.depth, 65535.0)
    depth_u16 = np.clip(np.round(depth), 0, 65535).astype(np.uint16)
    depth_path = out_dir / f"{prefix}_depth.pgm"
    imageio.write_pgm16(depth_path, depth_u16)

    rgb = np.zeros(buf.normal.shape, dtype=np.uint8)
    rend = buf.rendered
    rgb[rend] = np.clip(np.round((buf.normal[rend] + 1.0) * 127.5), 0, 255).astype(np.uint8)
    normal_path = out_dir / f"{prefix}_normal.ppm"
    imageio.write_ppm(normal_path, rgb)
    return [depth_path, normal_path]


def dump_edge_map(edges: np.ndarray, path):
    imageio.write_pgm8(path, edges.astype(bool))
    return Path(path)

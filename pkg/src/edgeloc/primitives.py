"""Procedural meshes for tests, fixtures and the synthetic harness."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh, merge_meshes

_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],  # -z
    [4, 5, 6], [4, 6, 7],  # +z
    [0, 1, 5], [0, 5, 4],  # -y
    [2, 3, 7], [2, 7, 6],  # +y
    [0, 4, 7], [0, 7, 3],  # -x
    [1, 2, 6], [1, 6, 5],  # +x
], dtype=np.int32)


def box(extents, center=(0.0, 0.0, 0.0), object_id: int = 1) -> TriangleMesh:
    """Axis-aligned box; ``extents`` are full side lengths in mm."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    cx, cy, cz = center
    verts = np.array([
        [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
        [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
    ]) + np.array([cx, cy, cz])
    return TriangleMesh.from_faces(verts, _BOX_FACES, object_id)


def quad(size_x: float, size_y: float, center=(0.0, 0.0, 0.0), object_id: int = 1) -> TriangleMesh:
    """Flat rectangle in the local xy plane."""
    hx, hy = size_x / 2.0, size_y / 2.0
    verts = np.array([[-hx, -hy, 0], [hx, -hy, 0], [hx, hy, 0], [-hx, hy, 0]],
                     dtype=np.float64) + np.asarray(center, dtype=np.float64)
    return TriangleMesh.from_faces(verts, [[0, 1, 2], [0, 2, 3]], object_id)


def tube(radius: float, length: float, facets: int = 16, caps: bool = True,
         object_id: int = 1) -> TriangleMesh:
    """Cylinder along the x axis, optionally without end caps.

    The facet count controls how coarse the discretization is; adjacent
    facet normals differ by 360/facets degrees.
    """
    if facets < 3:
        raise ValueError("need at least 3 facets")
    ang = np.linspace(0.0, 2.0 * np.pi, facets, endpoint=False)
    ring = np.stack([np.zeros(facets), radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    left = ring + np.array([-length / 2.0, 0.0, 0.0])
    right = ring + np.array([length / 2.0, 0.0, 0.0])
    verts = [left, right]
    faces = []
    for i in range(facets):
        j = (i + 1) % facets
        faces.append([i, facets + i, facets + j])
        faces.append([i, facets + j, j])
    if caps:
        verts.append(np.array([[-length / 2.0, 0.0, 0.0], [length / 2.0, 0.0, 0.0]]))
        c_left, c_right = 2 * facets, 2 * facets + 1
        for i in range(facets):
            j = (i + 1) % facets
            faces.append([c_left, j, i])
            faces.append([c_right, facets + i, facets + j])
    return TriangleMesh.from_faces(np.vstack(verts), faces, object_id)


def wedge(size_x: float, size_y: float, size_z: float, center=(0.0, 0.0, 0.0),
          object_id: int = 1) -> TriangleMesh:
    """Right-angle triangular prism, sloped face between +z and +x."""
    hx, hy, hz = size_x / 2.0, size_y / 2.0, size_z / 2.0
    verts = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [-hx, -hy, hz],
        [-hx, hy, -hz], [hx, hy, -hz], [-hx, hy, hz],
    ]) + np.asarray(center, dtype=np.float64)
    faces = [
        [0, 1, 2], [3, 5, 4],       # triangular ends
        [0, 4, 1], [0, 3, 4],       # bottom (-z)
        [0, 2, 5], [0, 5, 3],       # back (-x)
        [1, 4, 5], [1, 5, 2],       # sloped face
    ]
    return TriangleMesh.from_faces(verts, faces, object_id)


def reference_bracket() -> TriangleMesh:
    """Edge-rich, rotationally asymmetric part used by the synthetic scenarios.

    A staircase tower of blocks on a wide studded base plate, about
    150 x 110 mm across and 170 mm deep. Two properties matter for
    monocular localization and are deliberate here: surface points span a
    depth range comparable to the footprint (parallax pins the
    translation-versus-tilt ambiguity), and faces carry dense small studs
    whose local edge structure survives the scale changes a seed-pose
    error induces. The -z side faces the camera when posed at a positive
    depth.
    """
    parts = [
        box((150.0, 110.0, 16.0), center=(0.0, 0.0, 0.0), object_id=1),
        box((64.0, 46.0, 34.0), center=(-14.0, -8.0, -24.0), object_id=2),
        box((44.0, 32.0, 34.0), center=(-2.0, 2.0, -58.0), object_id=3),
        box((30.0, 22.0, 34.0), center=(-10.0, 8.0, -92.0), object_id=4),
        box((18.0, 14.0, 34.0), center=(0.0, -2.0, -126.0), object_id=5),
        box((10.0, 8.0, 26.0), center=(-6.0, 2.0, -156.0), object_id=6),
        box((7.0, 30.0, 36.0), center=(48.0, -24.0, -26.0), object_id=7),
        wedge(26.0, 16.0, 16.0, center=(-48.0, 28.0, -16.0), object_id=8),
    ]
    # studs on the base plate around the tower, plus a few on the steps;
    # the layout is irregular so no rotation maps the part onto itself
    stud_xy = [
        (-62, -42), (-38, -44), (-12, -46), (16, -42), (40, -46), (62, -40),
        (-64, -14), (58, -12), (-66, 12), (36, 10), (60, 16),
        (-62, 38), (-36, 42), (-10, 44), (14, 40), (38, 44), (62, 42),
        (30, -18), (44, 28), (-30, 30),
    ]
    for i, (sx, sy) in enumerate(stud_xy):
        w = 9.0 if i % 3 else 12.0
        parts.append(box((w, w, 7.0), center=(sx, sy, -11.5), object_id=9))
    # step-face studs at staggered depths
    for sx, sy, sz in [(-34, -22, -44), (8, -20, -44), (-26, 14, -78),
                       (12, 6, -78), (-18, 2, -112), (2, 14, -112)]:
        parts.append(box((8.0, 8.0, 6.0), center=(sx, sy, sz), object_id=10))
    return merge_meshes(parts)


def keyed_tube(radius: float = 30.0, length: float = 150.0, facets: int = 16) -> TriangleMesh:
    """Cylinder with a key flat, studs and an end collar.

    From a distance it reads as a plain tube (long parallel silhouette
    lines, so a seed rotated far in-plane matches nothing), but the key
    features pin the full 6-DoF pose once roughly aligned.
    """
    parts = [tube(radius, length, facets=facets, caps=True, object_id=1)]
    parts.append(box((14.0, 10.0, 8.0), center=(-length / 2 + 7.0, 0.0, -radius - 3.0),
                     object_id=2))
    parts.append(box((10.0, 44.0, 10.0), center=(length / 2 - 5.0, 0.0, 0.0), object_id=3))
    for i, sx in enumerate((-30.0, -2.0, 24.0, 46.0)):
        sy = 6.0 if i % 2 else -6.0
        parts.append(box((8.0, 8.0, 6.0), center=(sx, sy, -radius - 2.0), object_id=4))
    return merge_meshes(parts)


def subdivide(mesh: TriangleMesh) -> TriangleMesh:
    """Split every triangle into four at its edge midpoints."""
    verts = [mesh.vertices]
    n = len(mesh.vertices)
    faces, ids = [], []
    for fi, (a, b, c) in enumerate(mesh.faces):
        pa, pb, pc = mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]
        m = np.array([(pa + pb) / 2, (pb + pc) / 2, (pc + pa) / 2])
        verts.append(m)
        mab, mbc, mca = n, n + 1, n + 2
        n += 3
        oid = mesh.face_object_id[fi]
        faces.extend([[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]])
        ids.extend([oid] * 4)
    return TriangleMesh(np.vstack(verts), np.asarray(faces, np.int32), np.asarray(ids, np.int32))

"""Triangle meshes: validation, OBJ/STL files, and procedural test shapes.

OBJ input must already be triangulated; faces with more than three vertices
are rejected with a clear error.  STL input is the binary little-endian
layout.  The procedural generators produce watertight shapes used by tests
and benchmark scenes; the compound shapes (L/T blocks) are deliberately free
of rotational symmetry so registration against them has a unique answer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import MeshFormatError, ValidationError
from .ply_io import write_atomic

_MIN_AREA = 1e-12  # square meters


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices in meters and triangles as vertex-index triples."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0:
            raise ValidationError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise ValidationError("triangle index out of range")
        areas = 0.5 * np.linalg.norm(
            np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)
        if np.any(areas <= _MIN_AREA):
            raise ValidationError(
                f"{int(np.sum(areas <= _MIN_AREA))} degenerate triangle(s) "
                f"with area <= {_MIN_AREA} m^2")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices - self.centroid(), axis=1).max())


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris))


def transform_mesh(mesh: TriangleMesh, pose) -> TriangleMesh:
    from .geometry import apply_points
    return TriangleMesh(apply_points(pose, mesh.vertices), mesh.triangles)


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise MeshFormatError(
                        f"{path}:{lineno}: face has {len(refs)} vertices; "
                        "only triangulated meshes are supported")
                idx = []
                for ref in refs:
                    s = ref.split("/")[0]
                    i = int(s)
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(idx)
    if not faces:
        raise MeshFormatError(f"{path}: no faces found")
    try:
        return TriangleMesh(np.array(vertices), np.array(faces))
    except ValidationError as e:
        raise MeshFormatError(f"{path}: {e}") from None


def save_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    write_atomic(path, ("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# binary STL
# ---------------------------------------------------------------------------

def load_stl(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 84:
        raise MeshFormatError(f"{path}: too short for binary STL")
    if blob[:5] == b"solid" and b"facet" in blob[:200]:
        raise MeshFormatError(f"{path}: ASCII STL is not supported, use binary")
    (count,) = struct.unpack_from("<I", blob, 80)
    expected = 84 + 50 * count
    if len(blob) < expected:
        raise MeshFormatError(f"{path}: truncated binary STL")
    rec = np.frombuffer(blob, dtype=np.dtype([
        ("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]),
        count=count, offset=84)
    tri_pts = rec["v"].astype(float).reshape(-1, 3)
    # deduplicate exactly equal vertices to get an indexed mesh
    uniq, inverse = np.unique(tri_pts, axis=0, return_inverse=True)
    try:
        return TriangleMesh(uniq, inverse.reshape(-1, 3))
    except ValidationError as e:
        raise MeshFormatError(f"{path}: {e}") from None


def save_stl(path, mesh: TriangleMesh) -> None:
    v = mesh.vertices[mesh.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    rec = np.zeros(len(v), dtype=np.dtype([
        ("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
    rec["normal"] = n
    rec["v"] = v
    write_atomic(path, b"\x00" * 80 + struct.pack("<I", len(v)) + rec.tobytes())


# ---------------------------------------------------------------------------
# procedural shapes
# ---------------------------------------------------------------------------

def make_box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    sx, sy, sz = np.asarray(size, dtype=float) / 2.0
    cx, cy, cz = center
    corners = np.array([[x, y, z]
                        for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    corners += [cx, cy, cz]
    quads = [  # outward-facing winding per axis pair
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(tris))


def make_icosphere(radius=0.5, subdivisions=2, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = verts.tolist()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.asarray(verts[i]) + np.asarray(verts[j])
                verts.append((m / np.linalg.norm(m)).tolist())
                cache[key] = len(verts) - 1
            return cache[key]

        tris = [t for a, b, c in tris
                for t in ((a, midpoint(a, b), midpoint(a, c)),
                          (b, midpoint(b, c), midpoint(a, b)),
                          (c, midpoint(a, c), midpoint(b, c)),
                          (midpoint(a, b), midpoint(b, c), midpoint(a, c)))]
    v = np.asarray(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(tris))


def make_cylinder(radius=0.25, height=0.6, segments=24,
                  center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + i), (j, segments + j, segments + i)]
        tris += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(verts + np.asarray(center, dtype=float), np.array(tris))


def make_l_block() -> TriangleMesh:
    """Asymmetric L-shaped bracket, roughly 16 x 10 x 6 cm."""
    return merge_meshes(
        make_box((0.16, 0.06, 0.04), center=(0.0, 0.0, 0.02)),
        make_box((0.05, 0.06, 0.08), center=(-0.055, 0.0, 0.08)),
        make_box((0.04, 0.10, 0.03), center=(0.04, 0.02, 0.055)))


def make_t_block() -> TriangleMesh:
    """Asymmetric T-shaped block, roughly 14 x 12 x 7 cm."""
    return merge_meshes(
        make_box((0.14, 0.05, 0.05), center=(0.0, 0.0, 0.025)),
        make_box((0.04, 0.12, 0.04), center=(0.02, 0.035, 0.07)),
        make_box((0.03, 0.03, 0.06), center=(-0.045, -0.01, 0.08)))


def make_step_block() -> TriangleMesh:
    """Three-step staircase block, roughly 12 x 8 x 9 cm."""
    return merge_meshes(
        make_box((0.12, 0.08, 0.03), center=(0.0, 0.0, 0.015)),
        make_box((0.08, 0.08, 0.03), center=(-0.02, 0.0, 0.045)),
        make_box((0.04, 0.05, 0.03), center=(-0.04, 0.015, 0.075)))


def make_plane(size=3.0, z=0.0, cells=6) -> TriangleMesh:
    """Large planar mesh used as scene background (label 0)."""
    xs = np.linspace(-size / 2, size / 2, cells + 1)
    xv, yv = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([xv.ravel(), yv.ravel(), np.full(xv.size, float(z))])
    tris = []
    for i in range(cells):
        for j in range(cells):
            a = i * (cells + 1) + j
            b = a + 1
            c = a + cells + 1
            d = c + 1
            tris += [(a, c, b), (b, c, d)]
    return TriangleMesh(verts, np.array(tris))

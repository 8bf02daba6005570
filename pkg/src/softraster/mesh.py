"""Triangle meshes with per-vertex colors, plus the small set of mesh
operators the renderer and the fitting loops need: face normals, a
uniform graph Laplacian, vertex displacement, and two procedural
fixtures (icosphere, colorized cube)."""

import numpy as np


def _as_readonly(a, dtype):
    out = np.array(a, dtype=dtype, order="C")
    out.setflags(write=False)
    return out


class Mesh:
    """Immutable triangle mesh.

    vertices : (V, 3) float64, model-space positions
    faces    : (F, 3) int64, indices into vertices (counter-clockwise
               winding seen from outside)
    colors   : (V, 3) float64 in [0, 1], per-vertex albedo

    The arrays are copied and marked read-only so a mesh can be shared
    between a forward tape and later gradient checks without aliasing
    surprises.  Derived connectivity (the 1-ring used by the Laplacian)
    is built lazily and cached.
    """

    def __init__(self, vertices, faces, colors=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if not np.issubdtype(faces.dtype, np.integer):
            raise ValueError("faces must be an integer array")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("vertices contain non-finite values")
        nv = vertices.shape[0]
        if faces.size and (faces.min() < 0 or faces.max() >= nv):
            raise ValueError("face index out of range")
        same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if np.any(same):
            raise ValueError(f"face {int(np.nonzero(same)[0][0])} repeats a vertex index")
        if colors is None:
            colors = np.ones((nv, 3))
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (nv, 3):
            raise ValueError(f"colors must be ({nv}, 3), got {colors.shape}")
        if colors.size and (np.min(colors) < 0.0 or np.max(colors) > 1.0):
            raise ValueError("colors must lie in [0, 1]")

        self.vertices = _as_readonly(vertices, np.float64)
        self.faces = _as_readonly(faces, np.int64)
        self.colors = _as_readonly(colors, np.float64)
        self._neighbors = None

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def vertex_neighbors(self):
        """1-ring adjacency as (neighbor_sum_index, degree).

        Returns (edges, degree) where edges is a (E2, 2) int array of
        directed edges i -> j (both directions of every undirected mesh
        edge, deduplicated) and degree[i] counts the distinct neighbors
        of vertex i.  Cached after the first call.
        """
        if self._neighbors is None:
            f = self.faces
            if f.size == 0:
                edges = np.zeros((0, 2), dtype=np.int64)
            else:
                e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
                e = np.concatenate([e, e[:, ::-1]], axis=0)
                edges = np.unique(e, axis=0)
            degree = np.bincount(edges[:, 0], minlength=self.num_vertices).astype(np.int64)
            self._neighbors = (edges, degree)
        return self._neighbors


class FaceNormals:
    """Per-face unit normals with a flag for degenerate faces."""

    def __init__(self, normals, degenerate):
        self.normals = _as_readonly(normals, np.float64)
        self.degenerate = _as_readonly(degenerate, bool)


def compute_face_normals(mesh):
    """Unit normals of (v1-v0) x (v2-v0) per face.

    Faces with (numerically) zero area get a zero normal and are marked
    degenerate instead of producing NaNs.
    """
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    degenerate = norm < 1e-12
    safe = np.where(degenerate, 1.0, norm)
    n = n / safe[:, None]
    n[degenerate] = 0.0
    return FaceNormals(n, degenerate)


def uniform_laplacian(mesh, values):
    """Uniform graph Laplacian over the vertex 1-ring.

    delta_i = mean_{j in N(i)} values_j - values_i, with delta_i = 0
    for isolated vertices.  `values` is (V, C) or (V,); the result has
    the same shape.
    """
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if values.shape[0] != mesh.num_vertices:
        raise ValueError("values must have one row per vertex")
    edges, degree = mesh.vertex_neighbors()
    acc = np.zeros_like(values)
    # edges are sorted by source vertex, so bincount-style accumulation
    # is deterministic
    for c in range(values.shape[1]):
        acc[:, c] = np.bincount(edges[:, 0], weights=values[edges[:, 1], c],
                                minlength=mesh.num_vertices)
    deg = np.maximum(degree, 1).astype(np.float64)
    delta = acc / deg[:, None] - values
    delta[degree == 0] = 0.0
    return delta[:, 0] if squeeze else delta


def displace(mesh, displacements):
    """New mesh with vertices + displacements; faces and colors carried over."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.shape != mesh.vertices.shape:
        raise ValueError(f"displacements must be {mesh.vertices.shape}, got {d.shape}")
    return Mesh(mesh.vertices + d, mesh.faces, mesh.colors)


# ---------------------------------------------------------------------------
# procedural fixtures


def make_ico_sphere(subdivisions=1, radius=1.0):
    """Icosphere of the given radius centered at the origin.

    Starts from a regular icosahedron (12 vertices, 20 faces) and
    applies midpoint subdivision; every level multiplies the face count
    by four.  Levels above 5 are rejected (the face count grows as
    20 * 4^n).  Colors default to white.
    """
    if not 0 <= subdivisions <= 5:
        raise ValueError("subdivisions must be in [0, 5]")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts / np.linalg.norm(verts[0]))

    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    vertices = np.array(verts) * radius
    return Mesh(vertices, np.array(faces, dtype=np.int64))


_CUBE_FACE_COLORS = np.array([
    [0.9, 0.1, 0.1],   # +x red
    [0.1, 0.9, 0.1],   # -x green
    [0.1, 0.1, 0.9],   # +y blue
    [0.9, 0.9, 0.1],   # -y yellow
    [0.9, 0.1, 0.9],   # +z magenta
    [0.1, 0.9, 0.9],   # -z cyan
])


def make_unit_cube():
    """Axis-aligned unit cube centered at the origin with six flat face colors.

    Each of the six sides gets its own four vertices (24 total, 12
    triangles) so the colors stay constant across a side instead of
    blending at shared corners.  The distinct side colors are what make
    the cube useful as a pose-fitting target: any rotation changes the
    rendered image.
    """
    # side -> (normal axis, sign); vertices wound counter-clockwise
    # seen from outside
    sides = [
        (0, +1), (0, -1), (1, +1), (1, -1), (2, +1), (2, -1),
    ]
    vertices = []
    faces = []
    colors = []
    for si, (axis, sign) in enumerate(sides):
        u_axis = (axis + 1) % 3
        v_axis = (axis + 2) % 3
        base = len(vertices)
        for du, dv in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]:
            p = np.zeros(3)
            p[axis] = 0.5 * sign
            p[u_axis] = du
            p[v_axis] = dv
            vertices.append(p)
            colors.append(_CUBE_FACE_COLORS[si])
        if sign > 0:
            faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
        else:
            faces += [(base, base + 2, base + 1), (base, base + 3, base + 2)]
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64), np.array(colors))

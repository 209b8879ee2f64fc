"""Conforming triangulations with tagged boundary parts.

A mesh is a flat list of vertices, counterclockwise triangles, and boundary
edges tagged either ``D`` (homogeneous Dirichlet, pressure pinned to zero)
or ``N`` (zero normal flux).  Every geometric boundary edge must carry
exactly one tag, and at least one edge must be Neumann; the Dirichlet part
may be empty.  Meshes are immutable after construction and safe to share
across workers.

Text format (one mesh per file)::

    vertices M
    x y            # M lines
    triangles K
    i j k          # K lines, 0-based vertex indices
    boundary B
    i j TAG        # B lines, TAG is D or N

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import numpy as np

DIRICHLET = "D"
NEUMANN = "N"


class MeshError(ValueError):
    """Raised for unreadable files or meshes violating an invariant."""


class TriMesh:
    """Immutable conforming triangulation of a polygonal 2D domain.

    Parameters
    ----------
    vertices : (M, 2) float array
    triangles : (K, 3) int array
        Vertex indices; triangles are reoriented counterclockwise on
        construction, which fixes the sign convention for areas and
        gradients once and for all.
    boundary_edges : (B, 2) int array
    boundary_tags : length-B sequence of "D"/"N"
    """

    def __init__(self, vertices, triangles, boundary_edges, boundary_tags):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = np.asarray(list(boundary_tags), dtype="U1")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (M, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be a (K, 3) array")
        self.boundary_edges = self.boundary_edges.reshape(-1, 2)
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshError("one tag per boundary edge required")
        self._orient_ccw()
        self._validate()
        self.areas = self._signed_areas()
        self.h = float(self._edge_lengths().max()) if len(self.triangles) else 0.0
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)
        self.boundary_edges.setflags(write=False)

    # -- derived quantities ------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def total_area(self):
        return float(self.areas.sum())

    def corner_coords(self):
        """Vertex coordinates per triangle, shape (K, 3, 2)."""
        return self.vertices[self.triangles]

    def centroids(self):
        return self.corner_coords().mean(axis=1)

    def dirichlet_vertex_mask(self):
        """Boolean mask of vertices incident to a Dirichlet-tagged edge."""
        mask = np.zeros(self.num_vertices, dtype=bool)
        dir_edges = self.boundary_edges[self.boundary_tags == DIRICHLET]
        mask[dir_edges.ravel()] = True
        return mask

    def min_angle_deg(self):
        """Smallest interior angle over all triangles (shape diagnostic).

        Reported only; no shape-regularity threshold is enforced.
        """
        xy = self.corner_coords()
        angles = []
        for i in range(3):
            a = xy[:, (i + 1) % 3] - xy[:, i]
            b = xy[:, (i + 2) % 3] - xy[:, i]
            cosang = (a * b).sum(axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angles))

    def edge_set(self):
        """Map from sorted vertex pair to incidence count over triangles."""
        counts = {}
        for k, (i, j, m) in enumerate(self.triangles):
            for a, b in ((i, j), (j, m), (m, i)):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    # -- construction helpers ----------------------------------------------

    def _signed_areas(self):
        xy = self.corner_coords()
        d1 = xy[:, 1] - xy[:, 0]
        d2 = xy[:, 2] - xy[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def _edge_lengths(self):
        xy = self.corner_coords()
        lengths = np.stack(
            [
                np.linalg.norm(xy[:, 1] - xy[:, 0], axis=1),
                np.linalg.norm(xy[:, 2] - xy[:, 1], axis=1),
                np.linalg.norm(xy[:, 0] - xy[:, 2], axis=1),
            ],
            axis=1,
        )
        return lengths.max(axis=1)

    def _orient_ccw(self):
        areas = self._signed_areas()
        flip = areas < 0
        if flip.any():
            tri = self.triangles.copy()
            tri[flip, 1], tri[flip, 2] = self.triangles[flip, 2], self.triangles[flip, 1]
            self.triangles = tri

    def _validate(self):
        nv = self.num_vertices
        if self.num_triangles == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= nv:
            raise MeshError("triangle vertex index out of range")
        if len(self.boundary_edges) and (
            self.boundary_edges.min() < 0 or self.boundary_edges.max() >= nv
        ):
            raise MeshError("boundary edge vertex index out of range")

        areas = self._signed_areas()
        bad = np.flatnonzero(areas <= 0)
        if bad.size:
            raise MeshError(f"inverted or degenerate triangle {bad[0]}")

        used = np.zeros(nv, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError(f"unused vertex {int(np.flatnonzero(~used)[0])} (non-conforming)")

        counts = self.edge_set()
        over = [e for e, c in counts.items() if c > 2]
        if over:
            raise MeshError(f"non-conforming mesh: edge {over[0]} shared by >2 triangles")

        geometric_boundary = {e for e, c in counts.items() if c == 1}
        tagged = {}
        for (i, j), tag in zip(self.boundary_edges, self.boundary_tags):
            key = (min(i, j), max(i, j))
            if key in tagged:
                raise MeshError(f"boundary edge {key} tagged twice")
            if tag not in (DIRICHLET, NEUMANN):
                raise MeshError(f"unknown boundary tag {tag!r} on edge {key}")
            tagged[key] = tag
        missing = geometric_boundary - set(tagged)
        if missing:
            raise MeshError(f"untagged boundary edge {sorted(missing)[0]}")
        spurious = set(tagged) - geometric_boundary
        if spurious:
            raise MeshError(f"edge {sorted(spurious)[0]} tagged as boundary but interior")
        if NEUMANN not in self.boundary_tags:
            raise MeshError("at least one boundary edge must be tagged N")


# -- file I/O ---------------------------------------------------------------


def load_mesh(path) -> TriMesh:
    """Read a mesh from the plain-text node/element/edge format."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.readlines()
    lines = []
    for lineno, line in enumerate(raw, start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            lines.append((lineno, stripped))
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshError(f"{path}: unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    def section(name):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshError(f"{path}:{lineno}: expected '{name} <count>', got {text!r}")
        try:
            return int(parts[1])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad count in {text!r}") from None

    nv = section("vertices")
    verts = np.empty((nv, 2))
    for k in range(nv):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 2:
            raise MeshError(f"{path}:{lineno}: vertex {k} needs two coordinates")
        try:
            verts[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad coordinate in vertex {k}") from None

    nt = section("triangles")
    tris = np.empty((nt, 3), dtype=np.int64)
    for k in range(nt):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 3:
            raise MeshError(f"{path}:{lineno}: triangle {k} needs three indices")
        try:
            tris[k] = [int(p) for p in parts]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad index in triangle {k}") from None

    nb = section("boundary")
    edges = np.empty((nb, 2), dtype=np.int64)
    tags = []
    for k in range(nb):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 3:
            raise MeshError(
                f"{path}:{lineno}: untagged boundary edge (expected 'i j TAG')"
            )
        try:
            edges[k] = [int(parts[0]), int(parts[1])]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad index in boundary edge {k}") from None
        tags.append(parts[2])

    if pos != len(lines):
        lineno, text = lines[pos]
        raise MeshError(f"{path}:{lineno}: trailing content {text!r}")
    return TriMesh(verts, tris, edges, tags)


def save_mesh(mesh: TriMesh, path):
    """Write a mesh in the plain-text format accepted by :func:`load_mesh`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"vertices {mesh.num_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x!r} {y!r}\n")
        fh.write(f"triangles {mesh.num_triangles}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")
        fh.write(f"boundary {len(mesh.boundary_edges)}\n")
        for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{i} {j} {tag}\n")


# -- refinement and generators ----------------------------------------------


def refine_uniform_with_map(mesh: TriMesh):
    """Split each triangle into 4 congruent children via edge midpoints.

    Returns ``(fine_mesh, midpoint_parents)`` where ``midpoint_parents`` is an
    (n_new, 2) array giving, for every appended vertex, the coarse edge whose
    midpoint it is.  Parent vertices keep their indices, so a coarse nodal
    field prolongs exactly with :func:`prolong_nodal` and restricts by
    truncation.
    """
    verts = [tuple(v) for v in mesh.vertices]
    midpoint_index = {}
    parents = []

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        idx = midpoint_index.get(key)
        if idx is None:
            idx = len(verts)
            verts.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
            midpoint_index[key] = idx
            parents.append(key)
        return idx

    tris = []
    for i, j, k in mesh.triangles:
        mij, mjk, mki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        tris.extend([(i, mij, mki), (mij, j, mjk), (mki, mjk, k), (mij, mjk, mki)])

    edges, tags = [], []
    for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = midpoint(i, j)
        edges.extend([(i, m), (m, j)])
        tags.extend([tag, tag])

    fine = TriMesh(np.array(verts), np.array(tris), np.array(edges), tags)
    return fine, np.array(parents, dtype=np.int64)


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Uniform midpoint refinement; boundary tags are inherited."""
    return refine_uniform_with_map(mesh)[0]


def prolong_nodal(values, midpoint_parents):
    """Transfer a coarse nodal field to the once-refined mesh (exact for P1)."""
    values = np.asarray(values, dtype=float)
    mids = 0.5 * (values[midpoint_parents[:, 0]] + values[midpoint_parents[:, 1]])
    return np.concatenate([values, mids])


def structured_square(n: int, dirichlet_sides=()) -> TriMesh:
    """Unit square split into 2*n^2 right triangles.

    ``dirichlet_sides`` is any subset of {"left", "right", "bottom", "top"};
    the remaining sides are Neumann.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    sides = set(dirichlet_sides)
    unknown = sides - {"left", "right", "bottom", "top"}
    if unknown:
        raise MeshError(f"unknown side {sorted(unknown)[0]!r}")
    if sides == {"left", "right", "bottom", "top"}:
        raise MeshError("at least one side must remain Neumann")

    coords = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords, coords)
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            tris.append((vid(i, j), vid(i + 1, j), vid(i, j + 1)))
            tris.append((vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))

    def tag(side):
        return DIRICHLET if side in sides else NEUMANN

    edges, tags = [], []
    for i in range(n):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags.append(tag("bottom"))
        edges.append((vid(i, n), vid(i + 1, n)))
        tags.append(tag("top"))
    for j in range(n):
        edges.append((vid(0, j), vid(0, j + 1)))
        tags.append(tag("left"))
        edges.append((vid(n, j), vid(n, j + 1)))
        tags.append(tag("right"))

    return TriMesh(verts, np.array(tris), np.array(edges), tags)

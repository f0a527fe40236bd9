"""Triangle mesh type and geometry operators.

Sparse matrices throughout are ``scipy.sparse.csr_matrix`` with duplicates
summed and column indices sorted, so a row slice lists its entries in column
order.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshValidationError(ValueError):
    """Raised when mesh arrays violate the face/vertex invariants."""


class DegenerateFaceError(ValueError):
    def __init__(self, face_index, area):
        super().__init__(f"face {face_index} is degenerate (area {area:.3e} m^2)")
        self.face_index = int(face_index)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertex positions (meters) with fixed triangle connectivity.

    Faces are counter-clockwise seen from outside. Arrays are copied and made
    read-only on construction so a Mesh can be shared freely.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must be n x 3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshValidationError(f"faces must be f x 3, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(np.argmax((f < 0).any(1) | (f >= len(v)).any(1)))
            raise MeshValidationError(f"face {bad} indexes outside [0, {len(v)})")
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshValidationError(f"face {int(np.argmax(repeated))} repeats a vertex")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces)

    def translated(self, offset):
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def edges(self):
        """Unique undirected edges as an (e, 2) array with ``e[:, 0] < e[:, 1]``."""
        return mesh_edges(self.faces)


def mesh_edges(faces):
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def adjacency(faces, n):
    """Symmetric 0/1 vertex adjacency matrix."""
    e = mesh_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.sort_indices()
    return a


def _face_cross(vertices, faces):
    v = np.asarray(vertices)
    f = np.asarray(faces)
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(_face_cross(vertices, faces), axis=1)


def face_normals(mesh):
    """Unit normal per face, oriented by the winding (right-hand rule)."""
    c = _face_cross(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(c, axis=1)
    bad = 0.5 * norm <= DEGENERATE_AREA
    if bad.any():
        i = int(np.argmax(bad))
        raise DegenerateFaceError(i, 0.5 * norm[i])
    return c / norm[:, None]


def vertex_normals(mesh):
    """Area-weighted average of incident face normals, normalized.

    Isolated vertices get a zero normal.
    """
    c = _face_cross(mesh.vertices, mesh.faces)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], c)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def surface_area(mesh):
    return float(face_areas(mesh.vertices, mesh.faces).sum())


def graph_laplacian(mesh, *, with_warnings=False):
    """Combinatorial Laplacian ``L = D - A`` of the edge graph.

    Rows of isolated vertices are zero; with ``with_warnings=True`` a list of
    messages naming them is returned alongside the matrix.
    """
    n = mesh.n_vertices
    a = adjacency(mesh.faces, n)
    deg = np.asarray(a.sum(axis=1)).ravel()
    lap = (sparse.diags(deg) - a).tocsr()
    lap.sum_duplicates()
    lap.sort_indices()
    if not with_warnings:
        return lap
    isolated = np.flatnonzero(deg == 0)
    warnings = [f"vertex {i} is isolated; its Laplacian row is zero" for i in isolated]
    return lap, warnings


def edge_length_graph(mesh):
    e = mesh_edges(mesh.faces)
    length = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    return sparse.csr_matrix(
        (np.concatenate([length, length]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n),
    )


def geodesic_distances(mesh, seeds):
    """Dijkstra distance along edges from the nearest seed vertex.

    Vertices in components without a seed get ``inf`` (and a logged warning).
    """
    seeds = np.unique(np.asarray(seeds, dtype=np.int64).ravel())
    if seeds.size == 0:
        raise ValueError("at least one seed vertex is required")
    if seeds.min() < 0 or seeds.max() >= mesh.n_vertices:
        raise ValueError("seed index out of range")
    dist = csgraph.dijkstra(edge_length_graph(mesh), directed=False, indices=seeds, min_only=True)
    dist[seeds] = 0.0
    unreached = np.isinf(dist)
    if unreached.any():
        logger.warning("%d vertices are unreachable from the seed set", int(unreached.sum()))
    return dist


def knn_neighborhoods(source, target, k):
    """Indices of the ``k`` target vertices nearest to each source vertex.

    Rows are sorted by distance; ties go to the lower index.
    """
    src = source.vertices if isinstance(source, Mesh) else np.asarray(source, dtype=np.float64)
    tgt = target.vertices if isinstance(target, Mesh) else np.asarray(target, dtype=np.float64)
    if k > len(tgt):
        raise ValueError(f"k={k} exceeds the {len(tgt)} target vertices")
    if k < 1:
        raise ValueError("k must be positive")
    d2 = ((src[:, None, :] - tgt[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def smooth_field(values, faces, n, iterations, step=0.5):
    """Uniform Laplacian smoothing of a per-vertex field (``iterations`` passes)."""
    a = adjacency(faces, n)
    deg = np.asarray(a.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    out = np.array(values, dtype=np.float64)
    for _ in range(iterations):
        avg = (a @ out) / (deg[:, None] if out.ndim == 2 else deg)
        out = (1.0 - step) * out + step * avg
    return out


def submesh(mesh, face_mask):
    """Faces selected by ``face_mask`` with vertices reindexed.

    Returns ``(Mesh, vertex_ids)`` where ``vertex_ids[i]`` is the parent index
    of sub-vertex ``i`` (in increasing order).
    """
    faces = mesh.faces[np.asarray(face_mask, dtype=bool)]
    ids = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    return Mesh(mesh.vertices[ids], remap[faces]), ids


def boundary_vertices(faces):
    """Vertices on edges used by exactly one face."""
    f = np.asarray(faces)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def indicator_matrix(columns, n_cols):
    """0/1 selection matrix with a single 1 per row at ``columns[row]``."""
    columns = np.asarray(columns, dtype=np.int64)
    rows = np.arange(len(columns))
    m = sparse.csr_matrix((np.ones(len(columns)), (rows, columns)), shape=(len(columns), n_cols))
    m.sort_indices()
    return m

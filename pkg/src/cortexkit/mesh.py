"""Indexed triangle mesh with the geometric queries used across the surface stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import NonManifold


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), dict(self.attributes))

    def corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals(self, normalize=True) -> np.ndarray:
        """Face normals; unnormalized length is twice the face area."""
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        if normalize:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def vertex_areas(self) -> np.ndarray:
        """One third of the incident face areas (barycentric lumping)."""
        third = np.repeat(self.face_areas() / 3.0, 3)
        return np.bincount(self.faces.ravel(), weights=third, minlength=self.n_vertices)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals."""
        fn = self.face_normals(normalize=False)
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` pairs."""
        e = np.sort(self.directed_edges(), axis=1)
        return np.unique(e, axis=0)

    def directed_edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        e = self.edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def components(self) -> tuple[int, np.ndarray]:
        """Connected components of the vertex graph; isolated vertices count."""
        return connected_components(self.adjacency(), directed=False)

    def check_manifold(self, allow_boundary: bool = False) -> None:
        """Raise NonManifold unless every edge has two faces with opposite orientation.

        With ``allow_boundary`` edges with a single face are accepted too.
        """
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            bad = f[(f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])][0]
            raise NonManifold("degenerate face", edge=bad[:2])
        d = self.directed_edges()
        und, counts = np.unique(np.sort(d, axis=1), axis=0, return_counts=True)
        bad = (counts > 2) | (counts < (1 if allow_boundary else 2))
        if np.any(bad):
            raise NonManifold(f"edge with {counts[bad][0]} incident faces", edge=und[bad][0])
        dirs, dcounts = np.unique(d, axis=0, return_counts=True)
        if np.any(dcounts != 1):
            raise NonManifold("inconsistent face orientation", edge=dirs[dcounts != 1][0])

    def remove_unreferenced(self) -> "TriangleMesh":
        used = np.unique(self.faces)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[self.faces], dict(self.attributes))


def icosahedron(radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return TriangleMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Loop-style midpoint subdivision of the icosahedron, projected to the sphere."""
    mesh = icosahedron(1.0)
    v, f = mesh.vertices, mesh.faces
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(3, -1).T + len(v)
        mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
        v = np.vstack([v, mid])
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = inv[:, 0], inv[:, 1], inv[:, 2]
        f = np.vstack(
            [np.column_stack([a, ab, ca]), np.column_stack([b, bc, ab]),
             np.column_stack([c, ca, bc]), np.column_stack([ab, bc, ca])]
        )
    return TriangleMesh(v * radius, f)


def grid_patch(nx: int, ny: int, spacing: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Planar triangulated grid in the plane ``z`` (normals along +z)."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, float(z))])
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(v, f)


def boundary_vertices(mesh: TriangleMesh) -> np.ndarray:
    """Indices of vertices on edges that have a single incident face."""
    und, counts = np.unique(np.sort(mesh.directed_edges(), axis=1), axis=0, return_counts=True)
    return np.unique(und[counts == 1])

"""Per-vertex measurements on cortical surfaces and their ROI summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import EmptyMesh, OutOfBounds
from .io import LabelTable
from .mesh import TriangleMesh
from .surfgen import cotan_laplacian
from .voxelgrid import LabelVolume

RAY_LENGTH_MM = 2.0
RAY_STEP_MM = 0.25
MAX_OUTSIDE_VOX = 5
DEFAULT_FWHM = 15.0


@dataclass(frozen=True)
class SmoothSpec:
    fwhm_mm: float = DEFAULT_FWHM

    def __post_init__(self):
        if not self.fwhm_mm > 0:
            raise ValueError("fwhm_mm must be positive")


def sample_labels_to_surface(
    vol: LabelVolume,
    mesh: TriangleMesh,
    table: LabelTable,
    outward: bool = False,
    candidates=None,
) -> np.ndarray:
    """Per-vertex cortical label by ray sampling along the vertex normal.

    Steps of 0.25 mm from the vertex up to 2 mm into the surface (away from
    it with ``outward``); the first cortical label wins. Vertices whose ray
    finds nothing take the nearest cortical voxel within the same 2 mm, else 0.
    """
    labels = vol.labels
    dims = np.asarray(vol.header.dims)
    vs = np.asarray(vol.header.voxel_size_mm)
    cortical = np.asarray(sorted(table.cortical_ids() if candidates is None else candidates))
    is_cand = np.zeros(max(int(labels.max()), int(cortical.max(initial=0))) + 1, dtype=bool)
    is_cand[cortical] = True

    pos = mesh.vertices
    idx0 = np.floor(pos / vs).astype(np.int64)
    outside = np.max(np.maximum(-idx0, idx0 - (dims - 1)), axis=1)
    if np.any(outside > MAX_OUTSIDE_VOX):
        bad = int(np.argmax(outside))
        raise OutOfBounds(f"vertex {bad} lies {int(outside[bad])} voxels outside the volume")

    direction = mesh.vertex_normals() * (1.0 if outward else -1.0)
    n_steps = int(round(RAY_LENGTH_MM / RAY_STEP_MM))
    result = np.zeros(mesh.n_vertices, dtype=np.int64)
    pending = np.ones(mesh.n_vertices, dtype=bool)
    for s in range(n_steps + 1):
        if not pending.any():
            break
        pts = pos[pending] + (s * RAY_STEP_MM) * direction[pending]
        lab = _lookup(labels, pts, vs)
        hit = is_cand[lab]
        where = np.flatnonzero(pending)
        result[where[hit]] = lab[hit]
        pending[where[hit]] = False

    if pending.any() and len(cortical):
        vox = np.argwhere(np.isin(labels, cortical))
        if len(vox):
            tree = cKDTree((vox + 0.5) * vs)
            d, j = tree.query(pos[pending], distance_upper_bound=RAY_LENGTH_MM)
            found = np.isfinite(d)
            where = np.flatnonzero(pending)
            vx = vox[j[found]]
            result[where[found]] = labels[vx[:, 0], vx[:, 1], vx[:, 2]]
    return result


def _lookup(labels, pts, vs):
    idx = np.floor(pts / vs).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(labels.shape)), axis=1)
    out = np.zeros(len(pts), dtype=np.int64)
    i = idx[inside]
    out[inside] = labels[i[:, 0], i[:, 1], i[:, 2]]
    return out


# ---------------------------------------------------------------------------
# point to mesh distance


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p`` (rows broadcast), after Ericson."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class MeshDistance:
    """Exact point-to-triangle-mesh distance with a centroid k-d tree prefilter."""

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise EmptyMesh("mesh has no faces")
        self.mesh = mesh
        a, b, c = mesh.corners()
        self.a, self.b, self.c = a, b, c
        cen = (a + b + c) / 3.0
        self.radius = np.max(np.stack([np.linalg.norm(x - cen, axis=1) for x in (a, b, c)]), axis=0)
        self.tree = cKDTree(cen)
        self.vtree = cKDTree(mesh.vertices)

    def query(self, points, chunk: int = 4096):
        """Returns ``(distance, closest_point)`` for every query point."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        dist = np.empty(len(points))
        closest = np.empty_like(points)
        rmax = self.radius.max()
        for start in range(0, len(points), chunk):
            p = points[start : start + chunk]
            # nearest vertex bounds the answer; faces farther than that cannot win
            ub, _ = self.vtree.query(p)
            cands = self.tree.query_ball_point(p, ub + rmax + 1e-9)
            lens = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
            q = np.repeat(np.arange(len(p)), lens)
            f = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands])
            cp = closest_points_on_triangles(p[q], self.a[f], self.b[f], self.c[f])
            d = np.linalg.norm(cp - p[q], axis=1)
            order = np.lexsort((d, q))
            first = np.ones(len(order), dtype=bool)
            first[1:] = q[order][1:] != q[order][:-1]
            best = order[first]
            dist[start : start + len(p)] = d[best]
            closest[start : start + len(p)] = cp[best]
        return dist, closest


def thickness(white: TriangleMesh, pial: TriangleMesh) -> np.ndarray:
    """Symmetric closest-distance thickness at each white vertex.

    ``t(v) = (d(v, pial) + d(q, white)) / 2`` where ``q`` is the pial point
    nearest to ``v``.
    """
    if white.n_faces == 0 or pial.n_faces == 0:
        raise EmptyMesh("thickness needs two non-empty meshes")
    d_wp, q = MeshDistance(pial).query(white.vertices)
    d_qw, _ = MeshDistance(white).query(q)
    return 0.5 * (d_wp + d_qw)


def mean_curvature(mesh: TriangleMesh) -> np.ndarray:
    """Signed mean curvature ``|S X| / (2 m)``, positive where the surface bends away from its normal."""
    stiffness, mass = cotan_laplacian(mesh)
    hn = stiffness @ mesh.vertices
    h = np.linalg.norm(hn, axis=1) / (2.0 * mass)
    sign = np.sign(np.einsum("ij,ij->i", hn, mesh.vertex_normals()))
    return np.where(sign < 0, -h, h)


def smoothing_iterations(mesh: TriangleMesh, fwhm_mm: float) -> int:
    mean_sq_edge = float(np.mean(mesh.edge_lengths() ** 2))
    return int(round(fwhm_mm ** 2 / (16.0 * math.log(2.0) * mean_sq_edge)))


def _smoothing_operator(mesh: TriangleMesh):
    mass = mesh.vertex_areas()
    e = mesh.edges()
    deg = np.bincount(e.ravel(), minlength=mesh.n_vertices)
    share = mass / np.maximum(deg, 1)
    # symmetric exchange weights; sum_j w_ij <= m_i / 2 keeps each update a convex combination
    w = 0.5 * np.minimum(share[e[:, 0]], share[e[:, 1]])
    n = mesh.n_vertices
    W = sp.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n),
    )
    inv_m = 1.0 / mass
    keep = 1.0 - inv_m * np.asarray(W.sum(axis=1)).ravel()
    P = (sp.diags(inv_m) @ W + sp.diags(keep)).tocsr()
    return P, mass


def smooth_scalar(values, mesh: TriangleMesh, spec: SmoothSpec = SmoothSpec(), iterations: int | None = None):
    """Iterated mass-conservative neighbourhood averaging.

    Each step is a convex combination of a vertex and its neighbours, so
    constants are fixed points, the extremes never grow, and the
    area-weighted sum is preserved.
    """
    x = np.asarray(values, dtype=float).copy()
    if len(x) != mesh.n_vertices:
        raise ValueError("one value per vertex required")
    n_iter = smoothing_iterations(mesh, spec.fwhm_mm) if iterations is None else iterations
    P, _ = _smoothing_operator(mesh)
    for _ in range(n_iter):
        x = P @ x
    return x


def roi_stats(labeling, thickness_map, curvature, mesh: TriangleMesh) -> dict:
    """Vertex-area weighted per-ROI means and ROI areas.

    Returns ``{roi: {"thickness": .., "curvature": .., "area": ..}}`` where
    curvature is the mean absolute curvature.
    """
    labeling = np.asarray(labeling)
    t = np.asarray(thickness_map, dtype=float)
    h = np.abs(np.asarray(curvature, dtype=float))
    if not (len(labeling) == len(t) == len(h) == mesh.n_vertices):
        raise ValueError("labeling, thickness and curvature need one value per vertex")
    area = mesh.vertex_areas()
    out = {}
    for roi in np.unique(labeling):
        sel = labeling == roi
        a = area[sel]
        total = math.fsum(a)
        out[int(roi)] = {
            "thickness": math.fsum(a * t[sel]) / total if total > 0 else float("nan"),
            "curvature": math.fsum(a * h[sel]) / total if total > 0 else float("nan"),
            "area": total,
        }
    return out


def surface_dice(a, b, mesh: TriangleMesh) -> dict:
    """Area-weighted Dice per label present in either labeling (label 0 excluded)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != mesh.n_vertices or len(b) != mesh.n_vertices:
        raise ValueError("labelings must cover every vertex")
    area = mesh.vertex_areas()
    out = {}
    for lab in np.union1d(np.unique(a), np.unique(b)):
        if lab == 0:
            continue
        in_a = a == lab
        in_b = b == lab
        den = math.fsum(area[in_a]) + math.fsum(area[in_b])
        out[int(lab)] = 2.0 * math.fsum(area[in_a & in_b]) / den if den > 0 else float("nan")
    return out

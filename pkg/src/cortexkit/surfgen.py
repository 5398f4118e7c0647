"""Surface generation and spectral geometry on triangle meshes."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree
from skimage import measure

from .errors import (
    DegenerateOrientation,
    EmptyMask,
    MultiComponent,
    SolverNoConvergence,
    ZeroEmbeddingVector,
)
from .mesh import TriangleMesh
from .voxelgrid import BinaryMask

log = logging.getLogger(__name__)

EIGEN_RESIDUAL_TOL = 1e-8
EIGEN_MAX_ITER = 10_000
ORIENTATION_MIN_CORR = 0.1
INTERSECTION_TOL = 1e-9
# binary data puts every ambiguous face saddle exactly at 0.5; the offset breaks that tie
MC_TIE_OFFSET = 1e-3


def marching_cubes(mask: BinaryMask, iso: float = 0.5) -> TriangleMesh:
    """Isosurface of a binary mask in world mm, outward-oriented.

    Uses the Lewiner variant (topologically consistent case table), so the
    output is a closed 2-manifold. At ``iso = 0.5`` the level is nudged below
    the face saddles and vertices are snapped back to edge midpoints, so
    foreground voxels sharing only an edge are always joined and voxels
    sharing only a corner stay separate.
    """
    bits = np.asarray(mask.bits, dtype=bool)
    if not bits.any():
        raise EmptyMask("marching cubes on an empty mask")
    vs = np.asarray(mask.header.voxel_size_mm, dtype=float)
    padded = np.pad(bits, 1).astype(np.float32)
    tie = iso == 0.5
    level = iso - MC_TIE_OFFSET if tie else iso
    verts, faces, _normals, _values = measure.marching_cubes(padded, level=level, method="lewiner")
    verts = verts.astype(np.float64)
    if tie:
        # every vertex sits on a voxel edge; put it back on the exact midpoint
        verts = np.round(verts * 2.0) / 2.0
    # padded index i maps to world (i - 1 + 0.5) * vs
    verts = (verts - 0.5) * vs
    faces = faces[:, [0, 2, 1]]  # skimage winds inward for a bright-inside mask
    mesh = TriangleMesh(verts, faces).remove_unreferenced()
    if mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, [0, 2, 1]]
    return mesh


@dataclass
class TopologyReport:
    euler: int
    genus: int
    components: int
    defect_count: int


def euler_defects(mesh: TriangleMesh) -> TopologyReport:
    """Euler characteristic and handle count of a closed manifold mesh."""
    mesh.check_manifold()
    n_comp, comp = connected_components(_face_vertex_graph(mesh), directed=False)
    edges = mesh.edges()
    v_count = np.bincount(comp, minlength=n_comp)
    e_count = np.bincount(comp[edges[:, 0]], minlength=n_comp)
    f_count = np.bincount(comp[mesh.faces[:, 0]], minlength=n_comp)
    chi = v_count - e_count + f_count
    genus = (2 - chi) // 2
    return TopologyReport(
        euler=int(chi.sum()),
        genus=int(genus.sum()),
        components=int(n_comp),
        defect_count=int(genus.sum()),
    )


def _face_vertex_graph(mesh: TriangleMesh) -> sp.csr_matrix:
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1]])
    cols = np.concatenate([f[:, 1], f[:, 2]])
    n = mesh.n_vertices
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def triangle_quality(a, b, c) -> np.ndarray:
    """``4 sqrt(3) A / (e1^2 + e2^2 + e3^2)``; zero for zero-length triangles."""
    a, b, c = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (a, b, c))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    e2 = np.sum((b - a) ** 2, axis=1) + np.sum((c - b) ** 2, axis=1) + np.sum((a - c) ** 2, axis=1)
    return np.divide(4.0 * np.sqrt(3.0) * area, e2, out=np.zeros_like(area), where=e2 > 0)


def mesh_quality(mesh: TriangleMesh) -> tuple[np.ndarray, float]:
    q = triangle_quality(*mesh.corners())
    return q, float(q.mean()) if len(q) else float("nan")


# ---------------------------------------------------------------------------
# Laplace-Beltrami


def cotan_laplacian(mesh: TriangleMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Cotangent stiffness matrix and lumped (barycentric) mass.

    Off-diagonal ``S_ij = -(cot a + cot b) / 2`` over the two angles opposite
    edge ij (one angle on boundary edges); negative weights from obtuse
    triangles are kept.
    """
    mesh.check_manifold(allow_boundary=True)
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u = v[i] - v[o]
        w = v[j] - v[o]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sp.diags(diag)).tocsr()
    stiffness.sum_duplicates()
    mass = mesh.vertex_areas()
    if np.any(mass <= 0):
        raise SolverNoConvergence("vertex with zero lumped mass (isolated vertex?)")
    n_obtuse = int(np.sum(vals < 0))
    if n_obtuse:
        log.debug("cotan laplacian: %d negative half-weights from obtuse angles", n_obtuse)
    return stiffness, mass


@dataclass
class SpectralEmbedding:
    eigenvalues: np.ndarray  # (k,)
    eigenfunctions: np.ndarray  # (n_vertices, k)
    mass_orthonormal: bool = True
    residuals: np.ndarray | None = None


def smallest_eigenpairs(stiffness, mass, k: int = 3) -> SpectralEmbedding:
    """First ``k`` non-constant generalized eigenpairs of ``S f = lam M f``.

    Shift-invert Lanczos slightly below zero; the constant mode is dropped
    and the rest is Rayleigh-Ritz refined in the constant-free subspace.
    """
    stiffness = sp.csr_matrix(stiffness)
    mass = np.asarray(mass, dtype=float)
    n = stiffness.shape[0]
    n_comp, _ = connected_components(stiffness != 0, directed=False)
    if n_comp > 1:
        raise MultiComponent(f"Laplacian kernel has dimension {n_comp} (mesh not connected)")
    if n <= k + 1:
        raise SolverNoConvergence(f"need more than {k + 1} vertices, got {n}")
    M = sp.diags(mass).tocsc()
    total = mass.sum()
    # shift on the scale of the first nonzero eigenvalue of a sphere of equal area
    sigma = -0.1 * 8.0 * np.pi / total
    # fixed start vector: ARPACK's random default would make near-degenerate modes irreproducible
    v0 = np.random.default_rng(0).standard_normal(n)
    try:
        vals, vecs = eigsh(
            stiffness.tocsc(), k=k + 1, M=M, sigma=sigma, which="LM",
            tol=0, maxiter=EIGEN_MAX_ITER, v0=v0,
        )
    except (ArpackNoConvergence, ArpackError) as exc:
        raise SolverNoConvergence(f"eigensolver failed after {EIGEN_MAX_ITER} iterations: {exc}") from exc
    order = np.argsort(vals)
    vecs = vecs[:, order[1:]]
    # deflate the constant mode, then refine within the subspace
    vecs = vecs - np.outer(np.ones(n), mass @ vecs / total)
    gram_m = vecs.T @ (mass[:, None] * vecs)
    gram_s = vecs.T @ (stiffness @ vecs)
    lam, coef = eigh(gram_s, gram_m)
    f = vecs @ coef
    res = np.linalg.norm(stiffness @ f - (mass[:, None] * f) * lam, axis=0)
    norm_m = np.sqrt(np.einsum("ij,ij->j", f, mass[:, None] * f))
    if np.any(res > EIGEN_RESIDUAL_TOL * norm_m) or np.any(lam <= 0):
        raise SolverNoConvergence(f"eigen-residuals {res} exceed tolerance")
    return SpectralEmbedding(lam, f, True, res)


def orient_eigenfunctions(emb: SpectralEmbedding, vertices, axes=(0, 1, 2)) -> SpectralEmbedding:
    """Reorder and sign-fix eigenfunctions so function i tracks coordinate ``axes[i]``.

    The permutation maximizes the summed absolute Pearson correlation; signs
    make each correlation positive.
    """
    f = emb.eigenfunctions
    coords = np.asarray(vertices, dtype=float)[:, list(axes)]
    k = f.shape[1]
    corr = np.zeros((k, len(axes)))
    fc = f - f.mean(axis=0)
    xc = coords - coords.mean(axis=0)
    fn = np.linalg.norm(fc, axis=0)
    xn = np.linalg.norm(xc, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (fc.T @ xc) / np.outer(fn, xn)
    corr = np.nan_to_num(corr)
    if np.all(np.abs(corr) < ORIENTATION_MIN_CORR):
        raise DegenerateOrientation(f"no eigenfunction correlates above {ORIENTATION_MIN_CORR} with any axis")
    best, best_score = None, -1.0
    for perm in itertools.permutations(range(k), len(axes)):
        score = sum(abs(corr[perm[a], a]) for a in range(len(axes)))
        if score > best_score + 1e-15:
            best, best_score = perm, score
    perm = list(best)
    signs = np.array([1.0 if corr[perm[a], a] >= 0 else -1.0 for a in range(len(axes))])
    res = emb.residuals[perm] if emb.residuals is not None else None
    return SpectralEmbedding(emb.eigenvalues[perm], f[:, perm] * signs, emb.mass_orthonormal, res)


def spectral_sphere_map(mesh: TriangleMesh, axes=(0, 1, 2), embedding: SpectralEmbedding | None = None) -> TriangleMesh:
    """Map a genus-0 surface to the unit sphere via its first three eigenfunctions."""
    if embedding is None:
        stiffness, mass = cotan_laplacian(mesh)
        embedding = orient_eigenfunctions(smallest_eigenpairs(stiffness, mass, 3), mesh.vertices, axes)
    f = embedding.eigenfunctions
    norms = np.linalg.norm(f, axis=1)
    tiny = 1e-12 * norms.max()
    bad = np.flatnonzero(norms <= tiny)
    if len(bad):
        raise ZeroEmbeddingVector(int(bad[0]))
    sphere = TriangleMesh(f / norms[:, None], mesh.faces.copy())
    sphere.attributes["eigenvalues"] = embedding.eigenvalues
    return sphere


def metric_distortion(mesh: TriangleMesh, sphere_map: TriangleMesh) -> float:
    """Mean absolute log edge-length ratio after removing the global log scale."""
    if mesh.faces.shape != sphere_map.faces.shape or np.any(mesh.faces != sphere_map.faces):
        raise ValueError("meshes must share connectivity")
    e = mesh.edges()
    a = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    b = np.linalg.norm(sphere_map.vertices[e[:, 0]] - sphere_map.vertices[e[:, 1]], axis=1)
    log_ratio = np.log(b / a)
    return float(np.mean(np.abs(log_ratio - log_ratio.mean())))


# ---------------------------------------------------------------------------
# self-intersections


def triangles_intersect(p: np.ndarray, q: np.ndarray, tol: float = INTERSECTION_TOL) -> np.ndarray:
    """Vectorized triangle/triangle intersection for ``(N, 3, 3)`` corner arrays."""
    p = np.asarray(p, dtype=float).reshape(-1, 3, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3, 3)
    dq = _plane_distances(p, q)  # q's corners vs p's plane
    dp = _plane_distances(q, p)
    sep = (np.all(dq > tol, axis=1) | np.all(dq < -tol, axis=1)
           | np.all(dp > tol, axis=1) | np.all(dp < -tol, axis=1))
    coplanar = np.all(np.abs(dq) <= tol, axis=1) & np.all(np.abs(dp) <= tol, axis=1)
    hit = np.zeros(len(p), dtype=bool)
    todo = ~sep & ~coplanar
    if todo.any():
        hit[todo] = _edges_hit(p[todo], q[todo], dp[todo], tol) | _edges_hit(q[todo], p[todo], dq[todo], tol)
    cop = ~sep & coplanar
    if cop.any():
        hit[cop] = _coplanar_intersect(p[cop], q[cop], tol)
    return hit


def _plane_distances(tri, pts):
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    return np.einsum("nj,nkj->nk", n, pts - tri[:, :1])


def _barycentric_inside(tri, x, tol):
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, x - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    ok = den > 0
    den = np.where(ok, den, 1.0)
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    u = 1.0 - v - w
    # tolerance in mm, converted to barycentric units by the triangle size
    scale = np.sqrt(np.maximum(d00, d11))
    t = tol / np.where(scale > 0, scale, 1.0)
    return ok & (u >= -t) & (v >= -t) & (w >= -t)


def _edges_hit(seg_tri, tri, d_seg, tol):
    """Does any edge of ``seg_tri`` pierce ``tri``? ``d_seg``: seg_tri corners vs tri's plane."""
    hit = np.zeros(len(tri), dtype=bool)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        da, db = d_seg[:, i], d_seg[:, j]
        crosses = ((da <= tol) & (db >= -tol)) | ((da >= -tol) & (db <= tol))
        crosses &= ~((np.abs(da) <= tol) & (np.abs(db) <= tol))
        if not crosses.any():
            continue
        denom = np.where(da - db == 0, 1.0, da - db)
        t = np.clip(da / denom, 0.0, 1.0)
        x = seg_tri[:, i] + t[:, None] * (seg_tri[:, j] - seg_tri[:, i])
        hit |= crosses & _barycentric_inside(tri, x, tol)
    return hit


def _segments_intersect_2d(a, b, c, d, tol):
    def orient(p, q, r):
        return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 <= tol) & (o3 * o4 <= tol) & _bbox_overlap_2d(a, b, c, d, tol)


def _bbox_overlap_2d(a, b, c, d, tol):
    lo1, hi1 = np.minimum(a, b), np.maximum(a, b)
    lo2, hi2 = np.minimum(c, d), np.maximum(c, d)
    return np.all((lo1 <= hi2 + tol) & (lo2 <= hi1 + tol), axis=1)


def _coplanar_intersect(p, q, tol):
    n = np.abs(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
    drop = np.argmax(n, axis=1)
    keep = np.array([[1, 2], [0, 2], [0, 1]])[drop]
    rows = np.arange(len(p))[:, None]
    p2 = np.stack([p[rows, k, keep] for k in range(3)], axis=1)
    q2 = np.stack([q[rows, k, keep] for k in range(3)], axis=1)
    hit = np.zeros(len(p), dtype=bool)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        for k, m in ((0, 1), (1, 2), (2, 0)):
            hit |= _segments_intersect_2d(p2[:, i], p2[:, j], q2[:, k], q2[:, m], tol)
    hit |= _inside_2d(p2, q2[:, 0], tol) | _inside_2d(q2, p2[:, 0], tol)
    return hit


def _inside_2d(tri, x, tol):
    def cross(a, b, c):
        return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    s1 = cross(tri[:, 0], tri[:, 1], x)
    s2 = cross(tri[:, 1], tri[:, 2], x)
    s3 = cross(tri[:, 2], tri[:, 0], x)
    return ((s1 >= -tol) & (s2 >= -tol) & (s3 >= -tol)) | ((s1 <= tol) & (s2 <= tol) & (s3 <= tol))


def candidate_pairs(mesh: TriangleMesh, tol: float = INTERSECTION_TOL) -> np.ndarray:
    """Face pairs whose bounding boxes overlap and that share no vertex."""
    a, b, c = mesh.corners()
    cen = (a + b + c) / 3.0
    radius = np.max(np.stack([np.linalg.norm(x - cen, axis=1) for x in (a, b, c)]), axis=0)
    if len(cen) < 2:
        return np.empty((0, 2), dtype=np.int64)
    tree = cKDTree(cen)
    pairs = tree.query_pairs(2.0 * radius.max() + tol, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    lo = np.minimum(np.minimum(a, b), c) - tol
    hi = np.maximum(np.maximum(a, b), c) + tol
    i, j = pairs[:, 0], pairs[:, 1]
    overlap = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    pairs = pairs[overlap]
    fi, fj = mesh.faces[pairs[:, 0]], mesh.faces[pairs[:, 1]]
    shared = np.any(fi[:, :, None] == fj[:, None, :], axis=(1, 2))
    pairs = pairs[~shared]
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def self_intersections(mesh: TriangleMesh, tol: float = INTERSECTION_TOL, chunk: int = 200_000):
    """Count intersecting non-adjacent face pairs; returns ``(count, pairs)``."""
    pairs = candidate_pairs(mesh, tol)
    tri = mesh.vertices[mesh.faces]
    hits = []
    for start in range(0, len(pairs), chunk):
        sl = pairs[start : start + chunk]
        hits.append(sl[triangles_intersect(tri[sl[:, 0]], tri[sl[:, 1]], tol)])
    found = np.concatenate(hits) if hits else np.empty((0, 2), dtype=np.int64)
    return len(found), found

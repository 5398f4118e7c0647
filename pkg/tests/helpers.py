"""Shared generators and brute-force oracles for the test suite."""

import numpy as np
from scipy import ndimage
from scipy.optimize import linprog
from skimage.measure import euler_number

from cortexkit.io import DType, VolumeHeader
from cortexkit.mesh import TriangleMesh, icosphere
from cortexkit.voxelgrid import BinaryMask


def as_mask(bits, vs=1.0):
    bits = np.asarray(bits, dtype=bool)
    return BinaryMask(VolumeHeader(bits.shape, (vs,) * 3, DType.U8), bits)


def is_digital_sphere(bits):
    """One solid piece without tunnels or cavities under both 6- and 26-connectivity."""
    if ndimage.label(bits)[1] != 1 or ndimage.label(bits, np.ones((3, 3, 3)))[1] != 1:
        return False
    padded = np.pad(bits, 1)
    if ndimage.label(~padded)[1] != 1:
        return False
    return euler_number(padded, connectivity=1) == 1 and euler_number(padded, connectivity=3) == 1


def random_blob(seed, size=16, sigma=2.0):
    """Smoothed-noise blob that is a digital ball; retries with derived seeds until one is."""
    rng = np.random.default_rng(seed)
    while True:
        field = ndimage.gaussian_filter(rng.normal(size=(size,) * 3), sigma)
        centre = np.indices((size,) * 3) - (size - 1) / 2
        field -= 0.01 * np.sum(centre**2, axis=0) / size
        bits = field > np.quantile(field, rng.uniform(0.7, 0.9))
        lab, n = ndimage.label(bits)
        if n == 0:
            continue
        bits = lab == 1 + np.argmax(np.bincount(lab.ravel())[1:])
        bits = ndimage.binary_fill_holes(bits)
        bits[[0, -1], :, :] = bits[:, [0, -1], :] = bits[:, :, [0, -1]] = False
        if bits.sum() > 8 and is_digital_sphere(bits):
            return bits


def voxel_torus(n=16, major=5.0, minor=2.0):
    x, y, z = np.indices((n, n, n)) - (n - 1) / 2
    return (np.sqrt(x**2 + y**2) - major) ** 2 + z**2 <= minor**2


def voxel_ball(n, radius, centre=None):
    c = np.full(3, n / 2.0) if centre is None else np.asarray(centre, float)
    g = np.indices((n, n, n)).transpose(1, 2, 3, 0) + 0.5
    return np.linalg.norm(g - c, axis=-1) <= radius


def ellipsoid(axes, subdivisions=3):
    m = icosphere(subdivisions)
    return TriangleMesh(m.vertices * np.asarray(axes, float), m.faces.copy())


def lp_triangles_intersect(p, q):
    """Feasibility of sum a_i p_i = sum b_j q_j over two barycentric simplices."""
    a_eq = np.zeros((5, 6))
    a_eq[:3, :3] = p.T
    a_eq[:3, 3:] = -q.T
    a_eq[3, :3] = 1
    a_eq[4, 3:] = 1
    res = linprog(np.zeros(6), A_eq=a_eq, b_eq=[0, 0, 0, 1, 1], bounds=[(0, None)] * 6, method="highs")
    return res.status == 0


def brute_self_intersections(mesh):
    v, f = mesh.vertices, mesh.faces
    count = 0
    for i in range(len(f)):
        for j in range(i + 1, len(f)):
            if set(f[i]) & set(f[j]):
                continue
            count += lp_triangles_intersect(v[f[i]], v[f[j]])
    return count


def procrustes_rotation(a, b):
    """Orthogonal R minimizing |a R - b|."""
    u, _, vt = np.linalg.svd(a.T @ b)
    return u @ vt


def bumpy_ball(seed, size=24, radius=7.0, amplitude=0.25, stretch=1.3):
    """Star-shaped genus-0 blob: a ball with random low-order radial bumps and axis stretch."""
    rng = np.random.default_rng(seed)
    while True:
        g = np.indices((size,) * 3).transpose(1, 2, 3, 0) + 0.5 - size / 2.0 + rng.uniform(-0.5, 0.5, 3)
        g = g / rng.uniform(1.0, stretch, 3)
        r = np.linalg.norm(g, axis=-1)
        u = g / np.maximum(r, 1e-9)[..., None]
        bumps = np.zeros(r.shape)
        for _ in range(4):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            bumps += rng.uniform(-1, 1) * np.exp(-4.0 * (1.0 - u @ d))
        bits = r <= radius * (1.0 + amplitude * bumps / 2.0)
        if is_digital_sphere(bits):
            return bits

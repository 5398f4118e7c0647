from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexkit import voxelgrid as vg
from cortexkit.errors import EmptyVolume, MissingWhiteMatter
from cortexkit.io import DType, VolumeHeader, default_label_table
from cortexkit.pipeline import make_phantom
from cortexkit.voxelgrid import BinaryMask, Connectivity, LabelVolume, StructuringElement

TABLE = default_label_table()
FACE1 = StructuringElement(1, Connectivity.FACE6)


def hdr(dims, vs=1.0, dtype=DType.U16):
    return VolumeHeader(dims, (vs,) * 3 if np.isscalar(vs) else vs, dtype)


def mask(bits):
    bits = np.asarray(bits, dtype=bool)
    return BinaryMask(hdr(bits.shape), bits)


def random_mask(seed, shape=(8, 8, 8), p=0.3):
    return mask(np.random.default_rng(seed).random(shape) < p)


# brute-force morphology oracle: explicit neighbourhood offsets, outside the grid is background for
# dilation and foreground for erosion


def _offsets(conn, radius):
    unit = [d for d in product((-1, 0, 1), repeat=3) if 0 < sum(map(abs, d)) <= int(conn)]
    reach = {(0, 0, 0)}
    for _ in range(radius):
        reach = {(a[0] + b[0], a[1] + b[1], a[2] + b[2]) for a in reach for b in unit + [(0, 0, 0)]}
    return reach


def brute_dilate(bits, conn, radius):
    out = np.zeros_like(bits)
    n = bits.shape
    for idx in np.argwhere(bits):
        for d in _offsets(conn, radius):
            j = idx + d
            if np.all(j >= 0) and np.all(j < n):
                out[tuple(j)] = True
    return out


def brute_erode(bits, conn, radius):
    return ~brute_dilate_with_border(~bits, conn, radius)


def brute_dilate_with_border(bits, conn, radius):
    # pad with a margin so that the outside contributes as background of ~bits (i.e. foreground of bits)
    pad = radius
    big = np.pad(bits, pad, constant_values=False)
    return brute_dilate(big, conn, radius)[pad:-pad, pad:-pad, pad:-pad]


# conform


def test_conform_identity_bitwise():
    h = hdr((5, 6, 7))
    data = np.random.default_rng(0).integers(0, 20, (5, 6, 7)).astype(np.uint16)
    h2, out = vg.conform(h, data, h)
    assert h2 == h and out.tobytes() == data.tobytes()


def test_conform_upsample_blocks():
    rng = np.random.default_rng(1)
    data = rng.integers(1, 9, (8, 8, 8)).astype(np.uint16)
    src = hdr((8, 8, 8), 2.0)
    target = vg.conform_header(src, 1.0)
    assert target.dims == (16, 16, 16)
    _, out = vg.conform(src, data, target)
    oracle = np.zeros((16, 16, 16), np.uint16)
    for i, j, k in product(range(16), repeat=3):
        oracle[i, j, k] = data[i // 2, j // 2, k // 2]
    assert np.array_equal(out, oracle)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), vs=st.sampled_from([0.7, 1.3, 2.0, 0.5]))
def test_conform_never_invents_labels(seed, vs):
    rng = np.random.default_rng(seed)
    data = rng.choice([0, 3, 17, 41], size=(5, 4, 6)).astype(np.uint16)
    data[0, 0, 0] = 3
    src = hdr((5, 4, 6), vs)
    _, out = vg.conform(src, data, vg.conform_header(src))
    assert set(np.unique(out)) <= set(np.unique(data))


def test_conform_trilinear_intensity():
    src = hdr((2, 1, 1), 2.0, DType.F32)
    data = np.array([0.0, 4.0], np.float32).reshape(2, 1, 1)
    target = VolumeHeader((4, 2, 2), (1, 1, 1), DType.F32)
    _, out = vg.conform(src, data, target, labels=False)
    # 1 mm centres 0.5,1.5,2.5,3.5 -> source coords -0.25,0.25,0.75,1.25, clamped at the edges
    assert np.allclose(out[:, 0, 0], [0.0, 1.0, 3.0, 4.0])


def test_conform_empty_rejected():
    h = hdr((2, 2, 2))
    with pytest.raises(EmptyVolume):
        vg.conform(h, np.zeros((2, 2, 2)), h)


# morphology


def test_closure_solid_cube_unchanged():
    bits = np.zeros((7, 7, 7), bool)
    bits[2:5, 2:5, 2:5] = True
    assert np.array_equal(vg.closure(mask(bits), FACE1).bits, bits)


def test_closure_fills_centre_hole():
    bits = np.zeros((5, 5, 5), bool)
    bits[1:4, 1:4, 1:4] = True
    bits[2, 2, 2] = False
    out = vg.closure(mask(bits), FACE1).bits
    oracle = brute_erode(brute_dilate(bits, 1, 1), 1, 1)
    assert np.array_equal(out, oracle)
    assert out[2, 2, 2]


def test_closure_empty():
    assert not vg.closure(mask(np.zeros((4, 4, 4)))).bits.any()


@pytest.mark.parametrize("conn", list(Connectivity))
@pytest.mark.parametrize("radius", [1, 2])
def test_morphology_matches_brute_force(conn, radius):
    for seed in range(5):
        m = random_mask(seed, (6, 6, 6), 0.2)
        se = StructuringElement(radius, conn)
        assert np.array_equal(vg.dilate(m, se).bits, brute_dilate(m.bits, conn, radius))
        assert np.array_equal(vg.erode(m, se).bits, brute_erode(m.bits, conn, radius))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), conn=st.sampled_from(list(Connectivity)), radius=st.integers(1, 2))
def test_erode_dilate_duality(seed, conn, radius):
    m = random_mask(seed)
    se = StructuringElement(radius, conn)
    assert np.array_equal(vg.erode(m, se).bits, ~vg.dilate(m.with_bits(~m.bits), se).bits)


def test_closure_idempotent_200():
    for seed in range(200):
        m = random_mask(seed)
        c = vg.closure(m, FACE1)
        assert np.array_equal(vg.closure(c, FACE1).bits, c.bits)
        assert np.all(c.bits >= m.bits)


# brainmask


def test_brainmask_subcortical_blob_is_closure():
    labels = np.zeros((12, 12, 12), np.uint16)
    labels[4:8, 4:8, 4:8] = TABLE.by_name("Hippocampus (lh)").internal_id
    labels[5, 5, 5] = 0
    vol = LabelVolume(hdr(labels.shape), labels)
    out = vg.make_brainmask(vol, TABLE)
    oracle = vg.closure(BinaryMask(vol.header, labels != 0), vg.BRAINMASK_SE).bits
    assert np.array_equal(out.bits, oracle)
    assert out.bits[5, 5, 5]


def _single_voxel(name):
    labels = np.zeros((9, 9, 9), np.uint16)
    labels[4, 4, 4] = TABLE.by_name(name).internal_id
    return LabelVolume(hdr(labels.shape), labels)


def test_brainmask_cortical_padding():
    out = vg.make_brainmask(_single_voxel("superiorfrontal (lh)"), TABLE).bits
    for d in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        assert out[4 + d[0], 4 + d[1], 4 + d[2]]
    assert out.sum() == 7


@pytest.mark.parametrize("name", ["parsorbitalis (lh, rh)", "lateralorbitofrontal (lh)", "lateralorbitofrontal (rh)"])
def test_brainmask_no_padding_for_orbital(name):
    out = vg.make_brainmask(_single_voxel(name), TABLE).bits
    assert out.sum() == 1


# connected components


def bfs_components(bits, conn):
    offs = [d for d in product((-1, 0, 1), repeat=3) if 0 < sum(map(abs, d)) <= int(conn)]
    seen = np.zeros(bits.shape, int)
    sizes = []
    for idx in np.argwhere(bits.transpose(2, 1, 0)):
        start = tuple(idx[::-1])
        if seen[start]:
            continue
        sizes.append(0)
        q = deque([start])
        seen[start] = len(sizes)
        while q:
            v = q.popleft()
            sizes[-1] += 1
            for d in offs:
                w = tuple(np.add(v, d))
                if all(0 <= w[a] < bits.shape[a] for a in range(3)) and bits[w] and not seen[w]:
                    seen[w] = len(sizes)
                    q.append(w)
    return seen, sizes


def test_two_disjoint_voxels():
    bits = np.zeros((4, 4, 4), bool)
    bits[0, 0, 0] = bits[3, 3, 3] = True
    _, sizes = vg.connected_components(mask(bits))
    assert sizes.tolist() == [1, 1]


def test_diagonal_voxels():
    bits = np.zeros((3, 3, 3), bool)
    bits[0, 0, 0] = bits[1, 1, 1] = True
    assert len(vg.connected_components(mask(bits), Connectivity.VERTEX26)[1]) == 1
    assert len(vg.connected_components(mask(bits), Connectivity.FACE6)[1]) == 2


@pytest.mark.parametrize("conn", list(Connectivity))
def test_components_match_bfs(conn):
    for seed in range(10):
        m = random_mask(seed, p=0.35)
        ids, sizes = vg.connected_components(m, conn)
        oracle_ids, oracle_sizes = bfs_components(m.bits, conn)
        assert np.array_equal(ids, oracle_ids)
        assert sizes.tolist() == oracle_sizes


# lateralization


def _two_hemisphere(dims=(16, 16, 16)):
    labels = np.zeros(dims, np.uint16)
    labels[2:4, 6:10, 6:10] = 1  # left WM
    labels[12:14, 6:10, 6:10] = 19  # right WM
    return labels


def test_lateralize_strict_dominance():
    labels = np.zeros((80, 4, 4), np.uint16)
    labels[10, 1, 1] = 1  # left WM centroid x = 10.5 mm
    labels[70, 1, 1] = 19  # right WM centroid x = 70.5 mm
    labels[20, 1, 1] = 35  # 10 mm from left, 50 mm from right
    fs = vg.lateralize(LabelVolume(hdr(labels.shape), labels), TABLE)
    assert fs[20, 1, 1] == 1003


def test_lateralize_identity_without_merged():
    labels = _two_hemisphere()
    labels[7, 7, 7] = TABLE.by_name("Hippocampus (lh)").internal_id
    vol = LabelVolume(hdr(labels.shape), labels)
    assert np.array_equal(vg.fs_to_internal(vg.lateralize(vol, TABLE), TABLE), labels)


def test_lateralize_clusters_independent():
    labels = _two_hemisphere()
    labels[4:6, 7:9, 7:9] = 35  # next to left WM
    labels[10:12, 7:9, 7:9] = 35  # next to right WM
    fs = vg.lateralize(LabelVolume(hdr(labels.shape), labels), TABLE)
    # hand centroids: left WM x=3.0, right x=13.0; clusters at x=5.0 and x=11.0
    assert np.all(fs[4:6, 7:9, 7:9] == 1003)
    assert np.all(fs[10:12, 7:9, 7:9] == 2003)
    assert np.count_nonzero(fs == 1003) + np.count_nonzero(fs == 2003) == np.count_nonzero(labels == 35)


def test_lateralize_tie_goes_left():
    labels = np.zeros((9, 3, 3), np.uint16)
    labels[0, 1, 1] = 1
    labels[8, 1, 1] = 19
    labels[4, 1, 1] = 35
    fs = vg.lateralize(LabelVolume(hdr(labels.shape), labels), TABLE)
    assert fs[4, 1, 1] == 1003


def test_lateralize_missing_wm():
    labels = np.zeros((5, 5, 5), np.uint16)
    labels[1, 1, 1] = 35
    labels[3, 3, 3] = 19
    with pytest.raises(MissingWhiteMatter):
        vg.lateralize(LabelVolume(hdr(labels.shape), labels), TABLE)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_merge_then_lateralize_round_trip(seed):
    vol, _ = make_phantom(seed)
    fs = vg.to_fs_codes(vol, TABLE)
    # ground truth FreeSurfer codes: cortex on the right half gets the 2000 series
    right = np.zeros(vol.labels.shape, bool)
    right[32:] = True
    cortical = (fs >= 1000) & (fs < 2000)
    truth = fs.copy()
    truth[cortical & right] += 1000
    merged = vg.fs_to_internal(truth, TABLE)
    assert np.array_equal(vg.lateralize(LabelVolume(vol.header, merged), TABLE), truth)


def test_lateralize_preserves_cluster_voxels():
    vol, _ = make_phantom(4)
    fs = vg.lateralize(vol, TABLE)
    assert np.array_equal(vg.fs_to_internal(fs, TABLE), vol.labels)


# sagittal merge


def test_sagittal_all_78_to_50():
    ids = np.array(TABLE.ids, np.uint16)
    labels = np.zeros((len(ids), 1, 1), np.uint16)
    labels[:, 0, 0] = ids
    out = vg.merge_sagittal(LabelVolume(hdr(labels.shape), labels), TABLE)
    assert len(np.unique(out.labels)) == 50


def test_sagittal_midline_identity():
    mid = [e.internal_id for e in TABLE if e.laterality.value in ("Midline", "MergedPair")]
    labels = np.array(mid, np.uint16).reshape(-1, 1, 1)
    out = vg.merge_sagittal(LabelVolume(hdr(labels.shape), labels), TABLE)
    assert np.array_equal(out.labels, labels)


def test_sagittal_pairs_collapse():
    lh = TABLE.by_name("Hippocampus (lh)").internal_id
    rh = TABLE.by_name("Hippocampus (rh)").internal_id
    labels = np.array([lh, rh], np.uint16).reshape(2, 1, 1)
    out = vg.merge_sagittal(LabelVolume(hdr(labels.shape), labels), TABLE).labels
    assert out[0, 0, 0] == out[1, 0, 0] == lh

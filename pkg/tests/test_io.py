import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexkit import io
from cortexkit.errors import (
    BadLaterality,
    BadMagic,
    DuplicateId,
    MalformedOff,
    TruncatedFile,
    UnsupportedDtype,
)
from cortexkit.io import DType, VolumeHeader
from cortexkit.mesh import TriangleMesh, icosahedron


def test_zero_u8_volume(tmp_path):
    h = VolumeHeader((2, 2, 2), (1.0, 1.0, 1.0), DType.U8)
    io.write_volume(h, np.zeros((2, 2, 2), np.uint8), tmp_path / "z.fslv")
    h2, data = io.read_volume(tmp_path / "z.fslv")
    assert h2.dims == (2, 2, 2)
    assert data.size == 8 and not data.any()


def test_f32_payload_bytes(tmp_path):
    # 3.5 = 1.75 * 2^1 -> sign 0, exponent 128, mantissa 0x600000 -> 0x40600000
    h = VolumeHeader((1, 1, 1), (1.0, 1.0, 1.0), DType.F32)
    path = tmp_path / "v.fslv"
    io.write_volume(h, np.array([[[3.5]]]), path)
    assert path.read_bytes()[-4:] == bytes([0x00, 0x00, 0x60, 0x40])


def test_header_layout(tmp_path):
    h = VolumeHeader((3, 4, 5), (1.0, 2.0, 0.5), DType.U16)
    path = tmp_path / "v.fslv"
    io.write_volume(h, np.zeros((3, 4, 5), np.uint16), path)
    raw = path.read_bytes()
    assert raw[:4] == b"FSLV"
    assert struct.unpack_from("<HBx3I3f", raw, 4) == (1, 1, 3, 4, 5, 1.0, 2.0, 0.5)
    assert len(raw) == 32 + 3 * 4 * 5 * 2


def test_x_fastest_order(tmp_path):
    h = VolumeHeader((2, 3, 1), (1, 1, 1), DType.U8)
    data = np.arange(6, dtype=np.uint8).reshape((2, 3, 1), order="F")
    path = tmp_path / "v.fslv"
    io.write_volume(h, data, path)
    assert list(path.read_bytes()[32:]) == [0, 1, 2, 3, 4, 5]
    assert data[1, 0, 0] == 1


def test_zero_dims_rejected():
    with pytest.raises(ValueError):
        VolumeHeader((0, 2, 2), (1, 1, 1))


dtypes = st.sampled_from([DType.U8, DType.U16, DType.F32])


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 5)] * 3),
    vox=st.tuples(*[st.floats(0.1, 4.0)] * 3),
    dtype=dtypes,
    seed=st.integers(0, 2**31),
)
def test_volume_round_trip(tmp_path_factory, dims, vox, dtype, seed):
    rng = np.random.default_rng(seed)
    if dtype is DType.F32:
        data = rng.normal(size=dims).astype(np.float32)
    else:
        data = rng.integers(0, np.iinfo(dtype.numpy).max, size=dims, endpoint=True).astype(dtype.numpy)
    h = VolumeHeader(dims, vox, dtype)
    path = tmp_path_factory.mktemp("rt") / "v.fslv"
    io.write_volume(h, data, path)
    h2, d2 = io.read_volume(path)
    assert h2 == h
    assert d2.dtype == data.dtype and d2.tobytes() == data.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.fslv"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        io.read_volume(p)


def test_truncated(tmp_path):
    h = VolumeHeader((4, 4, 4), (1, 1, 1), DType.U16)
    p = tmp_path / "v.fslv"
    io.write_volume(h, np.zeros((4, 4, 4)), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncatedFile) as exc:
        io.read_volume(p)
    assert exc.value.offset is not None


def test_unsupported_fslv_dtype(tmp_path):
    h = VolumeHeader((1, 1, 1), (1, 1, 1), DType.U8)
    p = tmp_path / "v.fslv"
    io.write_volume(h, np.zeros((1, 1, 1)), p)
    raw = bytearray(p.read_bytes())
    raw[6] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtype):
        io.read_volume(p)


def _nifti_bytes(datatype, bitpix, dims, payload):
    # built field by field from the NIfTI-1 header layout, independent of the writer
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, 2.0, 2.0, 2.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + payload


def test_nifti_int32_unsupported(tmp_path):
    p = tmp_path / "v.nii"
    p.write_bytes(_nifti_bytes(8, 32, (1, 1, 1), struct.pack("<i", 7)))
    with pytest.raises(UnsupportedDtype):
        io.read_volume(p)


def test_nifti_uint8(tmp_path):
    p = tmp_path / "v.nii"
    p.write_bytes(_nifti_bytes(2, 8, (2, 1, 1), bytes([4, 9])))
    h, data = io.read_volume(p)
    assert h.dims == (2, 1, 1) and h.voxel_size_mm == (2.0, 2.0, 2.0)
    assert data[:, 0, 0].tolist() == [4, 9]


def test_nifti_writer_round_trip(tmp_path):
    h = VolumeHeader((3, 2, 2), (1, 1, 1), DType.U16)
    data = np.arange(12, dtype=np.uint16).reshape(3, 2, 2)
    io.write_nifti(h, data, tmp_path / "v.nii")
    h2, d2 = io.read_volume(tmp_path / "v.nii")
    assert h2 == h and np.array_equal(d2, data)


def test_prob_stack_round_trip(tmp_path):
    h = VolumeHeader((2, 2, 2), (1, 1, 1), DType.F32)
    probs = np.random.default_rng(0).dirichlet(np.ones(3), size=(2, 2, 2)).astype(np.float32)
    io.write_prob_stack(h, probs, tmp_path / "p")
    _, back = io.read_prob_stack(tmp_path / "p")
    assert np.array_equal(back, probs)


# meshes


def test_single_triangle(tmp_path):
    p = tmp_path / "t.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = io.read_mesh(p)
    assert m.n_vertices == 3 and m.n_faces == 1


def test_icosahedron_round_trip(tmp_path):
    m = icosahedron()
    io.write_mesh(m, tmp_path / "a.off")
    m2 = io.read_mesh(tmp_path / "a.off")
    assert (m2.n_vertices, m2.n_faces) == (12, 20)
    assert np.array_equal(m2.vertices, m.vertices) and np.array_equal(m2.faces, m.faces)
    io.write_mesh(m2, tmp_path / "b.off")
    assert (tmp_path / "a.off").read_bytes() == (tmp_path / "b.off").read_bytes()


def test_face_index_out_of_range(tmp_path):
    p = tmp_path / "t.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n")
    with pytest.raises(MalformedOff) as exc:
        io.read_mesh(p)
    assert exc.value.line == 6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_off_round_trip_random(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    m = TriangleMesh(rng.normal(size=(6, 3)) * 1e3, rng.integers(0, 6, size=(4, 3)))
    d = tmp_path_factory.mktemp("off")
    io.write_mesh(m, d / "m.off")
    m2 = io.read_mesh(d / "m.off")
    assert np.array_equal(m2.vertices, m.vertices) and np.array_equal(m2.faces, m.faces)


# label table


def test_hippocampus_row():
    t = io.parse_label_table(["13\tHippocampus (lh)\t17\tLeft\t"])
    e = t[13]
    assert e.fs_code == 17 and e.laterality is io.Laterality.LEFT and not e.is_cortical


def test_merged_pair_row():
    t = io.parse_label_table(["35\tcaudalmiddlefrontal (lh, rh)\t1003\tMergedPair\t35"])
    e = t[35]
    assert e.laterality is io.Laterality.MERGED_PAIR
    assert e.fs_codes == (1003, 2003)
    assert e.is_cortical


def test_duplicate_id():
    with pytest.raises(DuplicateId):
        io.parse_label_table(["1\ta\t2\tLeft\t", "1\tb\t3\tLeft\t"])


def test_bad_laterality():
    with pytest.raises(BadLaterality):
        io.parse_label_table(["1\ta\t2\tUp\t"])


def test_shipped_table_counts():
    t = io.default_label_table()
    assert len(t.ids) == 78
    assert len(t.fs_codes) == 95
    assert len(t.sagittal_ids()) == 50


def test_shipped_table_known_rows():
    t = io.default_label_table()
    assert t.by_name("Hippocampus (lh)").fs_code == 17
    assert t.by_fs_code(2003).internal_id == 35
    assert t.by_fs_code(1003).internal_id == 35
    assert t[1].fs_code == 2 and t[19].fs_code == 41


def test_csv_helpers(tmp_path):
    io.write_csv(tmp_path / "a.csv", ["a", "b"], [(1, float("nan")), ("x", 0.1)])
    text = (tmp_path / "a.csv").read_text().splitlines()
    assert text == ["a,b", "1,NA", "x,0.10000000000000001"]
    rows = io.read_csv(tmp_path / "a.csv")
    assert rows[1] == {"a": "x", "b": "0.10000000000000001"}


def test_vertex_map_round_trip(tmp_path):
    v = np.random.default_rng(1).normal(size=17)
    io.write_vertex_map(tmp_path / "m.csv", v)
    assert np.array_equal(io.read_vertex_map(tmp_path / "m.csv"), v)

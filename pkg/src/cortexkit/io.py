"""Readers and writers for volumes, meshes, label tables and CSV tables.

Volumes are held in memory as numpy arrays of shape ``(nx, ny, nz)``; on
disk the voxels are stored x-fastest (Fortran order), little-endian.
"""

from __future__ import annotations

import csv
import enum
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadLaterality,
    BadMagic,
    DuplicateId,
    IoFailure,
    MalformedOff,
    TruncatedFile,
    UnsupportedDtype,
)
from .mesh import TriangleMesh

log = logging.getLogger(__name__)

FSLV_MAGIC = b"FSLV"
FSLV_VERSION = 1
_FSLV_HEADER = struct.Struct("<4sHBB3I3f")

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"


class DType(enum.IntEnum):
    U8 = 0
    U16 = 1
    F32 = 2

    @property
    def numpy(self) -> np.dtype:
        return np.dtype({0: "<u1", 1: "<u2", 2: "<f4"}[int(self)])

    @classmethod
    def from_numpy(cls, dtype) -> "DType":
        dtype = np.dtype(dtype)
        for member in cls:
            if member.numpy == dtype.newbyteorder("<"):
                return member
        raise UnsupportedDtype(f"no volume dtype for numpy {dtype}")


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    voxel_size_mm: tuple
    dtype_code: DType = DType.U16

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        # voxel sizes are stored as f32; keep them f32-exact so round trips are bitwise
        vox = tuple(float(np.float32(v)) for v in self.voxel_size_mm)
        if len(vox) != 3 or not all(np.isfinite(v) and v > 0 for v in vox):
            raise ValueError(f"voxel sizes must be 3 positive reals, got {self.voxel_size_mm}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size_mm", vox)
        object.__setattr__(self, "dtype_code", DType(self.dtype_code))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def with_dtype(self, dtype_code) -> "VolumeHeader":
        return VolumeHeader(self.dims, self.voxel_size_mm, dtype_code)


# ---------------------------------------------------------------------------
# volumes


def read_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read an FSLV or NIfTI-1 (``n+1``) volume.

    Returns the header and a ``(nx, ny, nz)`` array in the stored dtype.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:4] == FSLV_MAGIC:
        return _read_fslv(raw)
    if len(raw) >= NIFTI_HEADER_SIZE and raw[344:348] == NIFTI_MAGIC:
        return _read_nifti(raw)
    if len(raw) < 4:
        raise TruncatedFile("file shorter than magic", offset=len(raw))
    raise BadMagic(f"unrecognised magic {raw[:4]!r} in {path}", offset=0)


def _read_fslv(raw: bytes):
    if len(raw) < _FSLV_HEADER.size:
        raise TruncatedFile("FSLV header incomplete", offset=len(raw))
    magic, version, dtype, _pad, nx, ny, nz, vx, vy, vz = _FSLV_HEADER.unpack_from(raw)
    if version != FSLV_VERSION:
        raise BadMagic(f"unsupported FSLV version {version}", offset=4)
    try:
        dtype_code = DType(dtype)
    except ValueError:
        raise UnsupportedDtype(f"FSLV dtype code {dtype}", offset=6) from None
    header = VolumeHeader((nx, ny, nz), (vx, vy, vz), dtype_code)
    return header, _payload(raw, _FSLV_HEADER.size, header)


def _payload(raw: bytes, offset: int, header: VolumeHeader, dtype=None) -> np.ndarray:
    dtype = np.dtype(dtype or header.dtype_code.numpy)
    nbytes = header.n_voxels * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedFile(
            f"expected {nbytes} payload bytes, found {max(len(raw) - offset, 0)}",
            offset=len(raw),
        )
    flat = np.frombuffer(raw, dtype=dtype, count=header.n_voxels, offset=offset)
    return flat.reshape(header.dims, order="F").copy()


_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4"), 512: np.dtype("<u2")}


def _read_nifti(raw: bytes):
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise BadMagic(f"sizeof_hdr {sizeof_hdr} (big-endian NIfTI is not supported)", offset=0)
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _bitpix = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype {datatype}", offset=70)
    ndim = dim[0]
    if not 1 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedDtype(f"only 3D NIfTI volumes are supported (dim={dim})", offset=40)
    dims = tuple(max(int(d), 1) if i < ndim else 1 for i, d in enumerate(dim[1:4]))
    vox = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    log.warning("NIfTI sform/qform ignored; stored axis order taken as-is")
    src_dtype = _NIFTI_DTYPES[datatype]
    code = {2: DType.U8, 4: DType.U16, 16: DType.F32, 512: DType.U16}[datatype]
    header = VolumeHeader(dims, vox, code)
    data = _payload(raw, int(vox_offset), header, dtype=src_dtype)
    if datatype == 4:
        if data.size and data.min() < 0:
            raise UnsupportedDtype("negative int16 values cannot be stored as U16", offset=int(vox_offset))
        data = data.astype("<u2")
    return header, data


def write_volume(header: VolumeHeader, data: np.ndarray, path) -> None:
    """Write ``data`` as an FSLV file; ``data`` is cast to the header dtype."""
    data = np.asarray(data)
    if data.size != header.n_voxels:
        raise ValueError(f"data has {data.size} voxels, header expects {header.n_voxels}")
    data = data.reshape(header.dims, order="F") if data.ndim != 3 else data
    if data.shape != header.dims:
        raise ValueError(f"data shape {data.shape} does not match header dims {header.dims}")
    head = _FSLV_HEADER.pack(
        FSLV_MAGIC, FSLV_VERSION, int(header.dtype_code), 0, *header.dims, *header.voxel_size_mm
    )
    payload = np.asarray(data, dtype=header.dtype_code.numpy).tobytes(order="F")
    try:
        Path(path).write_bytes(head + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_nifti(header: VolumeHeader, data: np.ndarray, path) -> None:
    """Minimal NIfTI-1 single-file writer (identity orientation, no scaling)."""
    datatype, bitpix = {DType.U8: (2, 8), DType.U16: (512, 16), DType.F32: (16, 32)}[header.dtype_code]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *header.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *header.voxel_size_mm, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = NIFTI_MAGIC
    payload = np.asarray(data, dtype=header.dtype_code.numpy).tobytes(order="F")
    try:
        Path(path).write_bytes(bytes(hdr) + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_prob_stack(header: VolumeHeader, probs: np.ndarray, directory) -> list[Path]:
    """Write a ``(nx, ny, nz, C)`` probability array as one F32 FSLV file per class."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    f32 = header.with_dtype(DType.F32)
    paths = []
    for c in range(probs.shape[-1]):
        path = directory / f"class_{c:03d}.fslv"
        write_volume(f32, probs[..., c], path)
        paths.append(path)
    return paths


def read_prob_stack(directory) -> tuple[VolumeHeader, np.ndarray]:
    paths = sorted(Path(directory).glob("class_*.fslv"))
    if not paths:
        raise IoFailure(f"no class_*.fslv files in {directory}")
    planes = [read_volume(p) for p in paths]
    header = planes[0][0]
    return header, np.stack([p[1] for p in planes], axis=-1)


# ---------------------------------------------------------------------------
# meshes


def write_mesh(mesh: TriangleMesh, path) -> None:
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    lines += ["%.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mesh(path) -> TriangleMesh:
    """Read an ASCII OFF triangle mesh. Blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line.split()))
    if not rows or rows[0][1] != ["OFF"]:
        raise MalformedOff('missing "OFF" header', line=rows[0][0] if rows else 1)
    if len(rows) < 2:
        raise MalformedOff("missing counts line", line=rows[0][0] + 1)
    lineno, counts = rows[1]
    try:
        nv, nf, _ne = (int(c) for c in counts)
    except ValueError:
        raise MalformedOff(f"bad counts line {' '.join(counts)!r}", line=lineno) from None
    if nv < 0 or nf < 0:
        raise MalformedOff("negative counts", line=lineno)
    body = rows[2:]
    if len(body) < nv + nf:
        raise MalformedOff(f"expected {nv + nf} element lines, found {len(body)}", line=body[-1][0] if body else lineno)
    vertices = np.empty((nv, 3))
    for i, (lineno, tok) in enumerate(body[:nv]):
        try:
            if len(tok) != 3:
                raise ValueError
            vertices[i] = [float(t) for t in tok]
        except ValueError:
            raise MalformedOff(f"bad vertex {' '.join(tok)!r}", line=lineno) from None
    faces = np.empty((nf, 3), dtype=np.int64)
    for i, (lineno, tok) in enumerate(body[nv : nv + nf]):
        try:
            idx = [int(t) for t in tok]
        except ValueError:
            raise MalformedOff(f"bad face {' '.join(tok)!r}", line=lineno) from None
        if len(idx) != 4 or idx[0] != 3:
            raise MalformedOff("only triangular faces are supported", line=lineno)
        if min(idx[1:]) < 0 or max(idx[1:]) >= nv:
            raise MalformedOff(f"face index out of range [0, {nv})", line=lineno)
        faces[i] = idx[1:]
    return TriangleMesh(vertices, faces)


# ---------------------------------------------------------------------------
# label table


class Laterality(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"
    MIDLINE = "Midline"
    MERGED_PAIR = "MergedPair"


@dataclass(frozen=True)
class LabelTableEntry:
    internal_id: int
    name: str
    fs_code: int
    laterality: Laterality
    sagittal_merge_id: Optional[int] = None
    # right-hemisphere FreeSurfer code, MergedPair entries only
    fs_code_rh: Optional[int] = None

    @property
    def fs_codes(self) -> tuple:
        if self.laterality is Laterality.MERGED_PAIR:
            return (self.fs_code, self.fs_code_rh)
        return (self.fs_code,)

    @property
    def is_cortical(self) -> bool:
        return self.fs_code >= 1000

    @property
    def sagittal_id(self) -> int:
        return self.sagittal_merge_id if self.sagittal_merge_id is not None else self.internal_id


@dataclass
class LabelTable:
    entries: list
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {e.internal_id: e for e in self.entries}

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, internal_id) -> LabelTableEntry:
        return self._by_id[internal_id]

    def __contains__(self, internal_id) -> bool:
        return internal_id in self._by_id

    @property
    def ids(self) -> list:
        return [e.internal_id for e in self.entries]

    @property
    def fs_codes(self) -> list:
        return [c for e in self.entries for c in e.fs_codes]

    def by_name(self, name: str) -> LabelTableEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def by_fs_code(self, code: int) -> LabelTableEntry:
        for e in self.entries:
            if code in e.fs_codes:
                return e
        raise KeyError(code)

    def cortical_ids(self) -> list:
        return [e.internal_id for e in self.entries if e.is_cortical]

    def subcortical_ids(self) -> list:
        return [e.internal_id for e in self.entries if not e.is_cortical]

    def sagittal_ids(self) -> list:
        """Sorted distinct class ids of the sagittal (lateral pairs merged) label space."""
        return sorted({e.sagittal_id for e in self.entries})


def parse_label_table(lines: Iterable[str]) -> LabelTable:
    entries, seen_ids, seen_codes = [], set(), set()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if cols[0] == "internal_id":
            continue
        cols += [""] * (5 - len(cols))
        internal_id, name, fs_field, lat_field, merge_field = (c.strip() for c in cols[:5])
        internal_id = int(internal_id)
        try:
            laterality = Laterality(lat_field)
        except ValueError:
            raise BadLaterality(f"line {lineno}: laterality {lat_field!r}") from None
        codes = [int(c) for c in fs_field.replace(" ", "").split(",") if c]
        if laterality is Laterality.MERGED_PAIR:
            if len(codes) == 1:
                # DKT convention: right-hemisphere parcel code = left code + 1000
                codes.append(codes[0] + 1000)
            if len(codes) != 2:
                raise BadLaterality(f"line {lineno}: MergedPair needs exactly two fs codes")
        elif len(codes) != 1:
            raise BadLaterality(f"line {lineno}: {laterality.value} entry needs one fs code")
        if internal_id in seen_ids:
            raise DuplicateId(f"line {lineno}: internal_id {internal_id} repeated")
        dup = seen_codes.intersection(codes)
        if dup:
            raise DuplicateId(f"line {lineno}: fs_code {sorted(dup)[0]} repeated")
        seen_ids.add(internal_id)
        seen_codes.update(codes)
        entries.append(
            LabelTableEntry(
                internal_id=internal_id,
                name=name,
                fs_code=codes[0],
                laterality=laterality,
                sagittal_merge_id=int(merge_field) if merge_field else None,
                fs_code_rh=codes[1] if len(codes) == 2 else None,
            )
        )
    return LabelTable(entries)


def read_label_table(path) -> LabelTable:
    try:
        with open(path, newline="") as fh:
            return parse_label_table(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def default_label_table() -> LabelTable:
    """The 78-class DKT table shipped with the package."""
    text = resources.files("cortexkit.data").joinpath("dkt_labels.tsv").read_text()
    return parse_label_table(text.splitlines())


def default_label_table_path() -> Path:
    return Path(str(resources.files("cortexkit.data").joinpath("dkt_labels.tsv")))


# ---------------------------------------------------------------------------
# CSV tables


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return "NA" if np.isnan(value) else "%.17g" % value
    if isinstance(value, np.integer):
        return int(value)
    return value


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_stats(path, records: Iterable[tuple]) -> None:
    """ROI statistics as ``roi,measure,value`` rows."""
    write_csv(path, ["roi", "measure", "value"], records)


def write_vertex_map(path, values) -> None:
    write_csv(path, ["vertex_id", "value"], enumerate(np.asarray(values).tolist()))


def read_vertex_map(path) -> np.ndarray:
    rows = read_csv(path)
    out = np.empty(len(rows))
    for row in rows:
        out[int(row["vertex_id"])] = float(row["value"])
    return out

"""Volume-domain preprocessing on label and intensity grids.

World coordinates: the center of voxel ``(i, j, k)`` sits at
``((i + 0.5) * vx, (j + 0.5) * vy, (k + 0.5) * vz)`` mm, so grids of
different resolution covering the same field of view share one frame.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyVolume, MissingWhiteMatter
from .io import DType, Laterality, LabelTable, VolumeHeader

log = logging.getLogger(__name__)

LEFT_WM_FS = 2
RIGHT_WM_FS = 41
# cortical ROIs never padded in the brainmask (optic nerve capture)
UNPADDED_ROIS = ("lateralorbitofrontal", "parsorbitalis")


@dataclass
class LabelVolume:
    header: VolumeHeader
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.header.dims:
            raise ValueError(f"labels shape {self.labels.shape} != header dims {self.header.dims}")


@dataclass
class BinaryMask:
    header: VolumeHeader
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != self.header.dims:
            raise ValueError(f"mask shape {self.bits.shape} != header dims {self.header.dims}")

    def with_bits(self, bits) -> "BinaryMask":
        return BinaryMask(self.header, bits)


class Connectivity(enum.IntEnum):
    FACE6 = 1
    EDGE18 = 2
    VERTEX26 = 3

    def structure(self) -> np.ndarray:
        return ndimage.generate_binary_structure(3, int(self))


@dataclass(frozen=True)
class StructuringElement:
    radius_vox: int = 1
    connectivity: Connectivity = Connectivity.VERTEX26

    def __post_init__(self):
        if self.radius_vox < 1:
            raise ValueError("radius_vox must be >= 1")


BRAINMASK_SE = StructuringElement(2, Connectivity.VERTEX26)


def world_coordinates(header: VolumeHeader, index) -> np.ndarray:
    return (np.asarray(index, dtype=float) + 0.5) * np.asarray(header.voxel_size_mm)


def conform_header(header: VolumeHeader, voxel_size: float = 1.0, dtype_code=None) -> VolumeHeader:
    """Isotropic target covering the same field of view."""
    extent = np.asarray(header.dims) * np.asarray(header.voxel_size_mm)
    dims = np.maximum(np.ceil(extent / voxel_size - 1e-6).astype(int), 1)
    return VolumeHeader(tuple(dims), (voxel_size,) * 3, dtype_code or header.dtype_code)


def conform(header: VolumeHeader, data: np.ndarray, target: VolumeHeader, labels: bool = True):
    """Resample onto ``target``: nearest neighbour for labels, trilinear for intensities.

    Returns ``(target_header, data)``; output dtype follows ``target.dtype_code``.
    """
    data = np.asarray(data)
    if data.size == 0 or (labels and not np.any(data)):
        raise EmptyVolume("nothing to conform")
    tv = target.voxel_size_mm
    if len(set(tv)) != 1:
        raise ValueError(f"target voxel size must be isotropic, got {tv}")
    if header.dims == target.dims and header.voxel_size_mm == tv:
        return target, data.astype(target.dtype_code.numpy, copy=True)
    src_vs = np.asarray(header.voxel_size_mm)
    axes = [
        (np.arange(target.dims[a]) + 0.5) * tv[a] / src_vs[a] - 0.5 for a in range(3)
    ]
    if labels:
        idx = [np.clip(np.floor(ax + 0.5), 0, header.dims[a] - 1).astype(np.intp) for a, ax in enumerate(axes)]
        out = data[np.ix_(*idx)]
        return target, out.astype(target.dtype_code.numpy)
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(data.astype(np.float64), coords, order=1, mode="nearest")
    dtype = target.dtype_code.numpy
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return target, out.astype(dtype)


def conform_labels(vol: LabelVolume, target: VolumeHeader) -> LabelVolume:
    header, data = conform(vol.header, vol.labels, target, labels=True)
    return LabelVolume(header, data)


# ---------------------------------------------------------------------------
# morphology


def dilate(mask: BinaryMask, se: StructuringElement = StructuringElement()) -> BinaryMask:
    bits = ndimage.binary_dilation(mask.bits, se.connectivity.structure(), iterations=se.radius_vox)
    return mask.with_bits(bits)


def erode(mask: BinaryMask, se: StructuringElement = StructuringElement()) -> BinaryMask:
    # outside the grid counts as foreground: erosion stays the adjoint of dilate,
    # so erode(m) == ~dilate(~m) exactly and closure is extensive at the border
    bits = ndimage.binary_erosion(
        mask.bits, se.connectivity.structure(), iterations=se.radius_vox, border_value=1
    )
    return mask.with_bits(bits)


def closure(mask: BinaryMask, se: StructuringElement = StructuringElement()) -> BinaryMask:
    return erode(dilate(mask, se), se)


def make_brainmask(
    vol: LabelVolume, table: LabelTable, pad_cortex: bool = True, se: StructuringElement = BRAINMASK_SE
) -> BinaryMask:
    """Closure of all labelled voxels plus a one-voxel pad around cortex."""
    bits = closure(BinaryMask(vol.header, vol.labels != 0), se).bits
    if pad_cortex:
        padded = [
            e.internal_id
            for e in table
            if e.is_cortical and not e.name.split(" ")[0].startswith(UNPADDED_ROIS)
        ]
        cortex = np.isin(vol.labels, padded)
        bits |= ndimage.binary_dilation(cortex, Connectivity.FACE6.structure())
    return BinaryMask(vol.header, bits)


def connected_components(mask: BinaryMask, connectivity: Connectivity = Connectivity.VERTEX26):
    """Label components; ids 1..K follow the on-disk scan order (x fastest).

    Returns ``(ids, sizes)`` where ``sizes[k - 1]`` is the voxel count of component k.
    """
    # ndimage scans C order, so label the transposed grid to get x-fastest ids
    ids, k = ndimage.label(mask.bits.T, structure=Connectivity(connectivity).structure())
    ids = np.ascontiguousarray(ids.T)
    sizes = np.bincount(ids.ravel(), minlength=k + 1)[1:]
    return ids, sizes


# ---------------------------------------------------------------------------
# label space conversions


def _wm_centroid(fs_labels: np.ndarray, code: int, header: VolumeHeader, side: str) -> np.ndarray:
    idx = np.argwhere(fs_labels == code)
    if len(idx) == 0:
        raise MissingWhiteMatter(f"no {side} white matter voxels (FS code {code})")
    return world_coordinates(header, idx).mean(axis=0)


def to_fs_codes(vol: LabelVolume, table: LabelTable) -> np.ndarray:
    """Map internal ids to FreeSurfer codes; merged pairs get their left code."""
    lut = np.zeros(max(table.ids) + 1, dtype=np.int64)
    for e in table:
        lut[e.internal_id] = e.fs_code
    return lut[vol.labels]


def fs_to_internal(fs_labels: np.ndarray, table: LabelTable) -> np.ndarray:
    """Inverse of lateralize: collapse FreeSurfer codes onto the 78 internal ids."""
    lut = np.zeros(max(table.fs_codes) + 1, dtype=np.uint16)
    for e in table:
        for code in e.fs_codes:
            lut[code] = e.internal_id
    return lut[fs_labels]


def lateralize(vol: LabelVolume, table: LabelTable) -> np.ndarray:
    """Restore hemisphere membership of merged cortical labels.

    Each 26-connected cluster of a MergedPair label receives the left or right
    FreeSurfer code of the nearer white-matter centroid (mm). Returns a volume
    of FreeSurfer codes; all other labels map one-to-one.
    """
    fs = to_fs_codes(vol, table)
    merged = [e for e in table if e.laterality is Laterality.MERGED_PAIR and np.any(vol.labels == e.internal_id)]
    if not merged:
        return fs
    left = _wm_centroid(fs, LEFT_WM_FS, vol.header, "left")
    right = _wm_centroid(fs, RIGHT_WM_FS, vol.header, "right")
    for e in merged:
        ids, sizes = connected_components(BinaryMask(vol.header, vol.labels == e.internal_id))
        counts = np.bincount(ids.ravel(), minlength=len(sizes) + 1)[1:]
        sums = np.stack(
            [np.bincount(ids.ravel(), weights=g.ravel(), minlength=len(sizes) + 1)[1:]
             for g in np.indices(vol.header.dims)],
            axis=1,
        )
        centroids = world_coordinates(vol.header, sums / counts[:, None])
        d_left = np.linalg.norm(centroids - left, axis=1)
        d_right = np.linalg.norm(centroids - right, axis=1)
        if np.any(d_left == d_right):
            log.info("%s: %d cluster(s) equidistant from both hemispheres, assigned left",
                     e.name, int(np.sum(d_left == d_right)))
        codes = np.where(d_left <= d_right, e.fs_code, e.fs_code_rh)
        lut = np.concatenate([[0], codes])
        sel = ids > 0
        fs[sel] = lut[ids[sel]]
    return fs


def merge_sagittal(vol: LabelVolume, table: LabelTable) -> LabelVolume:
    """Collapse left/right pairs onto their shared sagittal id (78 -> 50 classes)."""
    lut = np.arange(max(table.ids) + 1, dtype=vol.labels.dtype)
    for e in table:
        lut[e.internal_id] = e.sagittal_id
    return LabelVolume(vol.header, lut[vol.labels])


def label_volume_header(dims, voxel_size=(1.0, 1.0, 1.0)) -> VolumeHeader:
    return VolumeHeader(dims, voxel_size, DType.U16)

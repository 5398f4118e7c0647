"""Stage orchestration over a subject directory.

Layout (one folder per stage)::

    subject/
      input/      labels.fslv (internal ids), reference.fslv, manifest.json
      conform/    labels.fslv, lateralized.fslv (FreeSurfer codes)
      mask/       brainmask.fslv
      surf/       {lh,rh}.white.off, {lh,rh}.pial.off
      sphere/     {hemi}.sphere.off, {hemi}.embedding.csv
      map/        {hemi}.labels.csv
      thickness/  {hemi}.thickness.csv, {hemi}.curv.csv
      metrics/    {hemi}.mesh.csv, labels.csv
      stats/      {hemi}.roi.csv, {hemi}.thickness.smooth.csv
      timing.csv
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import evalstats, io, netref, surfgen, surfmeasure, voxelgrid
from .errors import CortexKitError, InputError, NumericalError
from .io import DType, VolumeHeader
from .voxelgrid import BinaryMask, LabelVolume

log = logging.getLogger(__name__)

STAGES = ("conform", "mask", "surf", "sphere", "map", "thickness", "metrics", "stats")
HEMIS = {"lh": (voxelgrid.LEFT_WM_FS, 1000), "rh": (voxelgrid.RIGHT_WM_FS, 2000)}
VOLUME_STAGES = ("conform", "mask")


class MissingInput(InputError):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = Path(path)


@dataclass
class PipelineConfig:
    subject_dir: Path
    label_table: Path | None = None
    stages: tuple = STAGES
    threads: int = 1
    hemi: str = "both"
    seed: int = 0
    view_weights: tuple = netref.DEFAULT_VIEW_WEIGHTS
    # volume axes matched to eigenfunctions 1..3 when orienting the sphere map
    axes: tuple = (0, 1, 2)

    def __post_init__(self):
        self.subject_dir = Path(self.subject_dir)
        if sorted(self.axes) != [0, 1, 2]:
            raise ValueError(f"axes must be a permutation of 0,1,2, not {self.axes}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.hemi not in ("left", "right", "both"):
            raise ValueError(f"hemi must be left, right or both, not {self.hemi!r}")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stage(s) {unknown}")
        self.stages = tuple(s for s in STAGES if s in self.stages)

    @property
    def hemis(self) -> list:
        return {"left": ["lh"], "right": ["rh"], "both": ["lh", "rh"]}[self.hemi]

    def table(self) -> io.LabelTable:
        return io.read_label_table(self.label_table) if self.label_table else io.default_label_table()


@dataclass
class StageTiming:
    stage: str
    hemi: str
    seconds: float


@dataclass
class RunReport:
    exit_code: int = 0
    timings: list = field(default_factory=list)
    error: str | None = None


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise MissingInput(p)


def _dir(cfg: PipelineConfig, stage: str) -> Path:
    d = cfg.subject_dir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _read_labels(path) -> LabelVolume:
    header, data = io.read_volume(path)
    return LabelVolume(header, data)


# ---------------------------------------------------------------------------
# stages


def stage_conform(cfg: PipelineConfig, table) -> None:
    src = cfg.subject_dir / "input" / "labels.fslv"
    probs = cfg.subject_dir / "input" / "probs"
    if src.exists():
        vol = _read_labels(src)
    elif probs.exists():
        vol = _aggregate_views(probs, table, cfg.view_weights)
    else:
        raise MissingInput(src)
    target = voxelgrid.conform_header(vol.header, 1.0, DType.U16)
    vol = voxelgrid.conform_labels(vol, target)
    out = _dir(cfg, "conform")
    io.write_volume(vol.header, vol.labels, out / "labels.fslv")
    fs = voxelgrid.lateralize(vol, table)
    io.write_volume(vol.header, fs.astype(np.uint16), out / "lateralized.fslv")


def _aggregate_views(probs_dir: Path, table, weights) -> LabelVolume:
    views = {}
    for view in ("coronal", "axial", "sagittal"):
        _require(probs_dir / view)
        views[view] = io.read_prob_stack(probs_dir / view)
    header = views["coronal"][0].with_dtype(DType.U16)
    labels, _ = netref.view_aggregate(
        views["coronal"][1], views["axial"][1], views["sagittal"][1], table, weights
    )
    return LabelVolume(header, labels.astype(np.uint16))


def stage_mask(cfg: PipelineConfig, table) -> None:
    src = cfg.subject_dir / "conform" / "labels.fslv"
    _require(src)
    vol = _read_labels(src)
    mask = voxelgrid.make_brainmask(vol, table, pad_cortex=True)
    io.write_volume(vol.header.with_dtype(DType.U8), mask.bits.astype(np.uint8), _dir(cfg, "mask") / "brainmask.fslv")


def hemisphere_masks(fs_labels: np.ndarray, hemi: str) -> tuple[np.ndarray, np.ndarray]:
    """White and pial solids of one hemisphere: largest face-connected piece, holes filled."""
    wm_code, cortex_base = HEMIS[hemi]
    white = fs_labels == wm_code
    cortex = (fs_labels >= cortex_base) & (fs_labels < cortex_base + 1000)
    return _solid(white), _solid(white | cortex)


def _solid(bits: np.ndarray) -> np.ndarray:
    ids, n = ndimage.label(bits)
    if n == 0:
        return bits
    sizes = np.bincount(ids.ravel())[1:]
    keep = ids == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(keep)


def stage_surf(cfg: PipelineConfig, table, hemi: str) -> None:
    src = cfg.subject_dir / "conform" / "lateralized.fslv"
    _require(src)
    header, fs = io.read_volume(src)
    white, pial = hemisphere_masks(fs, hemi)
    out = _dir(cfg, "surf")
    for name, bits in (("white", white), ("pial", pial)):
        mesh = surfgen.marching_cubes(BinaryMask(header, bits))
        io.write_mesh(mesh, out / f"{hemi}.{name}.off")


def stage_sphere(cfg: PipelineConfig, table, hemi: str) -> None:
    src = cfg.subject_dir / "surf" / f"{hemi}.white.off"
    _require(src)
    white = io.read_mesh(src)
    stiffness, mass = surfgen.cotan_laplacian(white)
    emb = surfgen.orient_eigenfunctions(surfgen.smallest_eigenpairs(stiffness, mass, 3), white.vertices, cfg.axes)
    sphere = surfgen.spectral_sphere_map(white, embedding=emb)
    out = _dir(cfg, "sphere")
    io.write_mesh(sphere, out / f"{hemi}.sphere.off")
    with open(out / f"{hemi}.embedding.csv", "w", newline="") as fh:
        fh.write("# lambda1..3 = %s\n" % " ".join("%.17g" % v for v in emb.eigenvalues))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["vertex_id", "f1", "f2", "f3"])
        for i, f in enumerate(emb.eigenfunctions):
            writer.writerow([i] + ["%.17g" % v for v in f])


def stage_map(cfg: PipelineConfig, table, hemi: str) -> None:
    labels_path = cfg.subject_dir / "conform" / "labels.fslv"
    white_path = cfg.subject_dir / "surf" / f"{hemi}.white.off"
    _require(labels_path, white_path)
    vol = _read_labels(labels_path)
    white = io.read_mesh(white_path)
    labeling = surfmeasure.sample_labels_to_surface(vol, white, table, outward=True)
    io.write_vertex_map(_dir(cfg, "map") / f"{hemi}.labels.csv", labeling)


def stage_thickness(cfg: PipelineConfig, table, hemi: str) -> None:
    white_path = cfg.subject_dir / "surf" / f"{hemi}.white.off"
    pial_path = cfg.subject_dir / "surf" / f"{hemi}.pial.off"
    _require(white_path, pial_path)
    white = io.read_mesh(white_path)
    pial = io.read_mesh(pial_path)
    out = _dir(cfg, "thickness")
    io.write_vertex_map(out / f"{hemi}.thickness.csv", surfmeasure.thickness(white, pial))
    io.write_vertex_map(out / f"{hemi}.curv.csv", surfmeasure.mean_curvature(white))


def stage_metrics(cfg: PipelineConfig, table, hemi: str) -> None:
    white_path = cfg.subject_dir / "surf" / f"{hemi}.white.off"
    sphere_path = cfg.subject_dir / "sphere" / f"{hemi}.sphere.off"
    _require(white_path, sphere_path)
    white = io.read_mesh(white_path)
    sphere = io.read_mesh(sphere_path)
    topo = surfgen.euler_defects(white)
    _, q_mean = surfgen.mesh_quality(white)
    n_si, _ = surfgen.self_intersections(white)
    rows = [
        ("vertices", white.n_vertices),
        ("faces", white.n_faces),
        ("euler", topo.euler),
        ("components", topo.components),
        ("defects", topo.defect_count),
        ("quality_mean", q_mean),
        ("self_intersections", n_si),
        ("sphere_self_intersections", surfgen.self_intersections(sphere)[0]),
        ("metric_distortion", surfgen.metric_distortion(white, sphere)),
    ]
    io.write_csv(_dir(cfg, "metrics") / f"{hemi}.mesh.csv", ["metric", "value"], rows)


def volume_metrics(cfg: PipelineConfig, table) -> None:
    pred_path = cfg.subject_dir / "conform" / "labels.fslv"
    ref_path = cfg.subject_dir / "input" / "reference.fslv"
    _require(pred_path)
    if not ref_path.exists():
        log.info("no reference segmentation at %s; skipping volume metrics", ref_path)
        return
    pred = _read_labels(pred_path)
    ref = _read_labels(ref_path)
    ref = voxelgrid.conform_labels(ref, pred.header)
    scores = evalstats.dice_per_label(ref, pred, table)
    rows = [r for r in scores.rows() if not np.isnan(r[1])]
    io.write_csv(_dir(cfg, "metrics") / "labels.csv", ["label", "dice", "avg_hd"], rows)


def stage_stats(cfg: PipelineConfig, table, hemi: str) -> None:
    lab_path = cfg.subject_dir / "map" / f"{hemi}.labels.csv"
    th_path = cfg.subject_dir / "thickness" / f"{hemi}.thickness.csv"
    curv_path = cfg.subject_dir / "thickness" / f"{hemi}.curv.csv"
    white_path = cfg.subject_dir / "surf" / f"{hemi}.white.off"
    _require(lab_path, th_path, curv_path, white_path)
    white = io.read_mesh(white_path)
    labeling = io.read_vertex_map(lab_path).astype(np.int64)
    th = io.read_vertex_map(th_path)
    curv = io.read_vertex_map(curv_path)
    stats = surfmeasure.roi_stats(labeling, th, curv, white)
    out = _dir(cfg, "stats")
    records = []
    for roi, measures in sorted(stats.items()):
        name = table[roi].name if roi in table else "unknown"
        for measure in ("thickness", "curvature", "area"):
            records.append((f"{roi}:{name}", measure, measures[measure]))
    io.write_stats(out / f"{hemi}.roi.csv", records)
    io.write_vertex_map(out / f"{hemi}.thickness.smooth.csv", surfmeasure.smooth_scalar(th, white))


HEMI_STAGES = {
    "surf": stage_surf,
    "sphere": stage_sphere,
    "map": stage_map,
    "thickness": stage_thickness,
    "metrics": stage_metrics,
    "stats": stage_stats,
}


# ---------------------------------------------------------------------------
# runner


def run(cfg: PipelineConfig) -> RunReport:
    """Run the requested stages; the timing CSV is written even on failure."""
    report = RunReport()
    try:
        table = cfg.table()
        for stage in cfg.stages:
            if stage in VOLUME_STAGES:
                t0 = time.perf_counter()
                {"conform": stage_conform, "mask": stage_mask}[stage](cfg, table)
                report.timings.append(StageTiming(stage, "-", time.perf_counter() - t0))
                continue
            if stage == "metrics":
                t0 = time.perf_counter()
                volume_metrics(cfg, table)
                report.timings.append(StageTiming("metrics", "-", time.perf_counter() - t0))
            report.timings += _run_hemis(cfg, table, stage)
    except MissingInput as exc:
        report.exit_code, report.error = 1, str(exc)
    except NumericalError as exc:
        report.exit_code, report.error = 2, f"{type(exc).__name__}: {exc}"
    except (CortexKitError, ValueError, OSError) as exc:
        report.exit_code, report.error = 1, f"{type(exc).__name__}: {exc}"
    finally:
        write_timing(cfg, report)
    if report.error:
        log.error(report.error)
    return report


def _run_hemis(cfg, table, stage) -> list:
    fn = HEMI_STAGES[stage]

    def one(hemi):
        t0 = time.perf_counter()
        fn(cfg, table, hemi)
        return StageTiming(stage, hemi, time.perf_counter() - t0)

    if cfg.threads > 1 and len(cfg.hemis) > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.threads, len(cfg.hemis))) as pool:
            return list(pool.map(one, cfg.hemis))
    return [one(h) for h in cfg.hemis]


def write_timing(cfg: PipelineConfig, report: RunReport) -> None:
    cfg.subject_dir.mkdir(parents=True, exist_ok=True)
    io.write_csv(
        cfg.subject_dir / "timing.csv",
        ["stage", "hemi", "seconds"],
        ((t.stage, t.hemi, round(t.seconds, 6)) for t in report.timings),
    )


# ---------------------------------------------------------------------------
# synthetic phantom

PHANTOM_DIMS = (64, 64, 64)
WM_RADIUS = 8.0
GM_RADIUS = 11.0
# per hemisphere: merged pairs plus one hemisphere-specific parcel
PHANTOM_PARCELS = {"lh": (35, 61, 50, 59), "rh": (35, 61, 50, 78)}
BRAINSTEM_ID = 12


def make_phantom(seed: int = 0, split_offset: float = 0.0):
    """Two spherical hemispheres with a 3 mm cortical shell cut into four parcels.

    Returns ``(LabelVolume, manifest)``. The seed moves the hemisphere centres
    by up to one voxel and rotates the parcel boundaries.
    """
    rng = np.random.default_rng(seed)
    header = VolumeHeader(PHANTOM_DIMS, (1.0, 1.0, 1.0), DType.U16)
    labels = np.zeros(PHANTOM_DIMS, dtype=np.uint16)
    centers_mm = (np.indices(PHANTOM_DIMS).reshape(3, -1).T + 0.5).reshape(*PHANTOM_DIMS, 3)
    manifest = {
        "seed": int(seed),
        "dims": list(PHANTOM_DIMS),
        "voxel_size_mm": [1.0, 1.0, 1.0],
        "wm_radius_mm": WM_RADIUS,
        "gm_radius_mm": GM_RADIUS,
        "thickness_mm": GM_RADIUS - WM_RADIUS,
        "hemispheres": {},
    }
    wm_ids = {"lh": 1, "rh": 19}
    for hemi, x0 in (("lh", 20.0), ("rh", 44.0)):
        c = np.array([x0, 32.0, 34.0]) + rng.integers(-1, 2, size=3) * np.array([0, 1, 1])
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        rel = centers_mm - c
        r = np.linalg.norm(rel, axis=-1)
        wm = r <= WM_RADIUS
        gm = (r > WM_RADIUS) & (r <= GM_RADIUS)
        u = rel @ rot
        a, b, p0, p1 = PHANTOM_PARCELS[hemi]
        parcel = np.where(u[..., 0] >= split_offset,
                          np.where(u[..., 1] >= 0, a, b),
                          np.where(u[..., 1] >= 0, p0, p1))
        labels[wm] = wm_ids[hemi]
        labels[gm] = parcel[gm]
        manifest["hemispheres"][hemi] = {"center_mm": c.tolist(), "parcels": [a, b, p0, p1]}
    stem = np.linalg.norm(centers_mm - np.array([32.0, 32.0, 12.0]), axis=-1) <= 4.0
    labels[stem & (labels == 0)] = BRAINSTEM_ID
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    manifest["label_volumes_mm3"] = {str(int(i)): int(n) for i, n in zip(ids, counts)}
    return LabelVolume(header, labels), manifest


def write_phantom(subject_dir, seed: int = 0) -> Path:
    """Write the phantom, a reference segmentation with shifted parcel borders, and the manifest."""
    out = Path(subject_dir) / "input"
    out.mkdir(parents=True, exist_ok=True)
    vol, manifest = make_phantom(seed)
    ref, _ = make_phantom(seed, split_offset=1.0)
    io.write_volume(vol.header, vol.labels, out / "labels.fslv")
    io.write_volume(ref.header, ref.labels, out / "reference.fslv")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# group statistics over measure tables


def read_measure_table(path) -> evalstats.MeasureTable:
    """CSV with ``subject`` plus optional ``repeat, diagnosis, age, sex, head_size`` and ROI columns."""
    rows = io.read_csv(path)
    if not rows:
        raise InputError(f"empty measure table {path}")
    meta = ("subject", "repeat", "diagnosis", "age", "sex", "head_size")
    cols = list(rows[0].keys())
    if "subject" not in cols:
        raise InputError(f"{path}: measure table needs a subject column")
    rois = [c for c in cols if c not in meta]
    values = np.array([[float(r[c]) for c in rois] for r in rows])

    def col(name, conv=str):
        return [conv(r[name]) for r in rows] if name in cols else None

    age = col("age", float)
    head = col("head_size", float)
    return evalstats.MeasureTable(
        rois=rois,
        values=values,
        subject=col("subject"),
        diagnosis=col("diagnosis"),
        age=np.asarray(age) if age is not None else None,
        sex=col("sex"),
        head_size=np.asarray(head) if head is not None else None,
        repeat=col("repeat"),
    )


def group_statistics(table: evalstats.MeasureTable, out_dir, covariates=("age", "sex")) -> list:
    """ICC per ROI when repeats are present, GLM per ROI when diagnoses are present."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if table.repeat is not None:
        subjects = sorted(set(table.subject))
        repeats = sorted(set(table.repeat))
        index = {(s, r): i for i, (s, r) in enumerate(zip(table.subject, table.repeat))}
        rows = []
        for j, roi in enumerate(table.rois):
            y = np.array([[table.values[index[(s, r)], j] for r in repeats] for s in subjects])
            res = evalstats.icc_absolute(y)
            rows.append((roi, res.icc, res.lower, res.upper))
        io.write_csv(out_dir / "icc.csv", ["roi", "icc", "lower", "upper"], rows)
        written.append(out_dir / "icc.csv")
    if table.diagnosis is not None:
        sub = table
        if table.repeat is not None:
            first = sorted(set(table.repeat))[0]
            keep = [i for i, r in enumerate(table.repeat) if r == first]
            sub = replace(
                table,
                values=table.values[keep],
                subject=[table.subject[i] for i in keep],
                diagnosis=[table.diagnosis[i] for i in keep],
                age=table.age[keep] if table.age is not None else None,
                sex=[table.sex[i] for i in keep] if table.sex is not None else None,
                head_size=table.head_size[keep] if table.head_size is not None else None,
                repeat=None,
            )
        rows = []
        for roi in sub.rois:
            res = evalstats.glm_group(sub, roi, covariates)
            rows.append((roi, res.beta_dx, res.t, res.signed_p))
        io.write_csv(out_dir / "glm.csv", ["roi", "beta", "t", "signed_p"], rows)
        written.append(out_dir / "glm.csv")
    return written

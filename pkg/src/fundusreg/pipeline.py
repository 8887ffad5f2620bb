"""End-to-end pair registration and batch driver.

preprocess (FOV + colour stabilisation) -> features (three-step matching)
-> estimation (fit) -> warp (mosaic composites), with one JSON report per pair.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ImageLoadError, RegistrationError
from .estimation import FitConfig, FitTrace, PairMeta, fit
from .features import DetectorConfig, KeypointSet, MatchReport, cached_detect, match_three_step
from .geometry import RegistrationModel
from .preprocess import FovMask, detect_fov, load_image, save_image, stabilise_colour
from .warp import composite, fov_overlap, residual_stats, warp_mosaic

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STATUSES = ("ok", "gate-failed-warning", "insufficient-features", "insufficient-matches",
            "degenerate", "no-fov", "io-error", "error")
MANIFEST_COLUMNS = ("moving", "reference", "eye", "field", "outdir")
SUMMARY_COLUMNS = ("moving", "reference", "eye", "field", "outdir", "status", "mode", "termination",
                   "correspondences", "residual_mean", "residual_max", "overlap_fraction", "success")
SUSPECT_RESIDUAL_PX = 10.0


@dataclass(frozen=True)
class PipelineConfig:
    fit: FitConfig = dc_field(default_factory=FitConfig)
    detector: DetectorConfig = dc_field(default_factory=DetectorConfig)
    ratio: float = 0.8
    stabilise: bool = True
    kernel_fraction: float = 0.25
    success_threshold_px: float = 30.0  # one vessel calibre
    composites: tuple = ("blend", "checkerboard", "difference")
    cache_dir: Optional[str] = None
    dump_preprocessed: bool = False
    trace: bool = False
    write_images: bool = True


_SECTIONS = {"fit": FitConfig, "detector": DetectorConfig}


def _parse_value(raw: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.startswith("[") and raw.endswith("]"):
        return tuple(_parse_value(v) for v in raw[1:-1].split(",") if v.strip())
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines, ``#`` comments, optional ``[section]`` headers (ignored)."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    """Route each key to the pipeline, fit or detector config; unknown keys raise."""
    own = {f.name for f in fields(PipelineConfig)} - set(_SECTIONS)
    top, sub = {}, {name: {} for name in _SECTIONS}
    for key, value in values.items():
        if key in own:
            top[key] = value
            continue
        for name, cls in _SECTIONS.items():
            if key in {f.name for f in fields(cls)}:
                sub[name][key] = value
                break
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "composites" in top and isinstance(top["composites"], str):
        top["composites"] = tuple(v.strip() for v in top["composites"].split(",") if v.strip())
    for name in _SECTIONS:
        if sub[name]:
            top[name] = replace(getattr(cfg, name), **sub[name])
    return replace(cfg, **top)


def load_config(path, base: PipelineConfig = None) -> PipelineConfig:
    base = PipelineConfig() if base is None else base
    return apply_overrides(base, parse_config_text(Path(path).read_text()))


# ----------------------------------------------------------------------------
# in-memory registration


class PreparedImage(NamedTuple):
    original: np.ndarray
    image: np.ndarray  # stabilised
    fov: FovMask
    keypoints: KeypointSet


def prepare_image(img: np.ndarray, cfg: PipelineConfig = PipelineConfig(), fov: FovMask = None) -> PreparedImage:
    fov = detect_fov(img) if fov is None else fov
    work = stabilise_colour(img, fov, cfg.kernel_fraction) if cfg.stabilise else img
    kp = cached_detect(work, fov, cfg.detector, cfg.cache_dir)
    return PreparedImage(img, work, fov, kp)


@dataclass
class Registration:
    model: RegistrationModel
    trace: FitTrace
    matches: MatchReport
    meta: PairMeta


def register_prepared(p1: PreparedImage, p2: PreparedImage, cfg: PipelineConfig = PipelineConfig(),
                      camera1: str = None, camera2: str = None, timings: dict = None) -> Registration:
    """Match and fit a prepared pair; image 1 is the moving image."""
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    rep = match_three_step(p1.image, p2.image, p1.fov, p2.fov, cfg.ratio, cfg.fit, cfg.detector,
                           kp1=p1.keypoints, kp2=p2.keypoints)
    t1 = time.perf_counter()
    meta = PairMeta(p1.image.shape[:2], p2.image.shape[:2], camera1, camera2)
    model, trace = fit(rep.correspondences, cfg.fit, meta)
    t2 = time.perf_counter()
    timings["matching"] = 1000 * (t1 - t0)
    timings["estimation"] = 1000 * (t2 - t1)
    return Registration(model, trace, rep, meta)


def register_images(img1: np.ndarray, img2: np.ndarray, cfg: PipelineConfig = PipelineConfig(),
                    fov1: FovMask = None, fov2: FovMask = None) -> Registration:
    return register_prepared(prepare_image(img1, cfg, fov1), prepare_image(img2, cfg, fov2), cfg)


# ----------------------------------------------------------------------------
# jobs and reports


@dataclass(frozen=True)
class PairJob:
    moving_path: str
    reference_path: str
    eye: str = "unknown"
    field: str = "unknown"
    output_dir: str = "."
    config: PipelineConfig = dc_field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.eye not in ("left", "right", "unknown"):
            raise ValueError(f"eye must be left, right or unknown, got {self.eye!r}")
        if self.field not in ("nasal", "macular", "unknown"):
            raise ValueError(f"field must be nasal, macular or unknown, got {self.field!r}")


@dataclass
class RegistrationReport:
    job: dict
    status: str
    message: str = ""
    keypoints: dict = dc_field(default_factory=dict)
    model: Optional[dict] = None
    residuals: Optional[dict] = None
    inlier_residuals: Optional[dict] = None
    suspect: bool = False
    overlap_fraction: Optional[float] = None
    termination: Optional[str] = None
    gate_passed: Optional[bool] = None
    scale_ratio: Optional[float] = None
    timings_ms: dict = dc_field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == "ok" and (self.model is None or not np.isfinite(self.model["fit_error"])):
            raise ValueError("status ok requires a model with finite fit_error")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationReport":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def success(self, threshold_px: float) -> bool:
        return self.status == "ok" and self.residuals is not None and self.residuals["mean"] <= threshold_px


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _job_dict(job: PairJob) -> dict:
    return {"moving": str(job.moving_path), "reference": str(job.reference_path), "eye": job.eye,
            "field": job.field, "output_dir": str(job.output_dir)}


def _stats_dict(s) -> dict:
    return {"mean": s.mean, "std": s.std, "max": s.max, "rel_image_pct": s.rel_image_pct, "count": s.count}


def _write_outputs(job, cfg, reg, prep1, prep2, timings):
    out = Path(job.output_dir)
    t0 = time.perf_counter()
    res, ref = warp_mosaic(prep1.original, prep2.original, reg.model, prep1.fov, prep2.fov)
    for mode in cfg.composites:
        save_image(out / f"composite_{mode}.png", composite(res, ref, mode))
    if cfg.dump_preprocessed:
        save_image(out / "preprocessed_moving.png", prep1.image)
        save_image(out / "preprocessed_reference.png", prep2.image)
    timings["warp"] = 1000 * (time.perf_counter() - t0)


def run_pair(job: PairJob) -> RegistrationReport:
    """Register one pair and write its report; failures end up in ``status``, never raised."""
    cfg = job.config
    timings = {}
    report = RegistrationReport(_job_dict(job), "error")
    out = Path(job.output_dir)
    try:
        t0 = time.perf_counter()
        img1, img2 = load_image(job.moving_path), load_image(job.reference_path)
        timings["load"] = 1000 * (time.perf_counter() - t0)
        t0 = time.perf_counter()
        prep1, prep2 = prepare_image(img1, cfg), prepare_image(img2, cfg)
        timings["preprocess_features"] = 1000 * (time.perf_counter() - t0)
        report.keypoints = {"raw1": len(prep1.keypoints), "raw2": len(prep2.keypoints)}
        reg = register_prepared(prep1, prep2, cfg, timings=timings)
        report.keypoints.update(reg.matches.counts)
        report.keypoints["correspondences"] = reg.matches.correspondences.count
        report.keypoints["homography_failed"] = reg.matches.homography_failed

        model, trace, corr = reg.model, reg.trace, reg.matches.correspondences
        report.model = model.to_dict()
        report.residuals = _stats_dict(residual_stats(model, corr))
        report.inlier_residuals = _stats_dict(residual_stats(model, corr.subset(trace.inliers)))
        report.suspect = report.residuals["mean"] > SUSPECT_RESIDUAL_PX
        report.overlap_fraction = fov_overlap(model, prep1.fov, prep2.fov)
        report.termination = trace.termination
        report.gate_passed = trace.gate_passed
        report.scale_ratio = trace.scale_ratio
        report.status = "ok" if trace.gate_passed else "gate-failed-warning"

        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "model.json", model.to_json())
        if cfg.trace:
            write_atomic(out / "trace.json", trace.to_json())
        if cfg.write_images:
            _write_outputs(job, cfg, reg, prep1, prep2, timings)
    except ImageLoadError as exc:
        report.status, report.message = "io-error", str(exc)
    except RegistrationError as exc:
        report.status, report.message = exc.status, str(exc)
    except OSError as exc:
        report.status, report.message = "io-error", str(exc)
    except Exception as exc:  # a single pair must not take the batch down
        log.exception("pair %s / %s failed", job.moving_path, job.reference_path)
        report.status, report.message = "error", f"{type(exc).__name__}: {exc}"
    report.timings_ms = {k: round(v, 3) for k, v in timings.items()}
    try:
        write_atomic(out / "report.json", report.to_json())
    except OSError as exc:
        log.error("could not write report for %s: %s", job.moving_path, exc)
        if report.status in ("ok", "gate-failed-warning"):
            report.status, report.message = "io-error", str(exc)
    return report


# ----------------------------------------------------------------------------
# batch


class ManifestRow(NamedTuple):
    line: int
    job: PairJob


def read_manifest(path, cfg: PipelineConfig = PipelineConfig(), out_root=None):
    """Parse the manifest; returns ``(rows, skipped)`` with skipped = list of (line, reason).

    Relative image paths are resolved against the manifest's directory and
    relative output directories against ``out_root`` (default: same).
    """
    path = Path(path)
    base = path.parent
    out_root = base if out_root is None else Path(out_root)
    rows, skipped = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for n, rec in enumerate(reader, 1):
            if not rec or all(not c.strip() for c in rec) or rec[0].lstrip().startswith("#"):
                continue
            rec = [c.strip() for c in rec]
            if header is None:
                if tuple(rec) != MANIFEST_COLUMNS:
                    raise ValueError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
                header = rec
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                skipped.append((n, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(rec)}"))
                continue
            moving, reference, eye, fld, outdir = rec
            if not moving or not reference or not outdir:
                skipped.append((n, "empty path"))
                continue
            try:
                job = PairJob(str(base / moving), str(base / reference), eye or "unknown", fld or "unknown",
                              str(out_root / outdir), cfg)
            except ValueError as exc:
                skipped.append((n, str(exc)))
                continue
            rows.append(ManifestRow(n, job))
    for n, reason in skipped:
        log.warning("manifest line %d skipped: %s", n, reason)
    return rows, skipped


@dataclass
class BatchSummary:
    reports: list
    skipped: list
    success_fraction: float
    summary_path: Optional[str] = None

    @property
    def all_parsed(self) -> bool:
        return not self.skipped

    @property
    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.reports)


def _summary_row(job: PairJob, rep: RegistrationReport, threshold) -> dict:
    res = rep.residuals or {}
    return {
        "moving": job.moving_path, "reference": job.reference_path, "eye": job.eye, "field": job.field,
        "outdir": job.output_dir, "status": rep.status,
        "mode": (rep.model or {}).get("mode", ""), "termination": rep.termination or "",
        "correspondences": rep.keypoints.get("correspondences", ""),
        "residual_mean": "" if not res else f"{res['mean']:.6g}",
        "residual_max": "" if not res else f"{res['max']:.6g}",
        "overlap_fraction": "" if rep.overlap_fraction is None else f"{rep.overlap_fraction:.6g}",
        "success": int(rep.success(threshold)),
    }


def run_batch(manifest, parallelism: int = 1, cfg: PipelineConfig = PipelineConfig(),
              summary_path=None, out_root=None) -> BatchSummary:
    """Run every manifest row with at most ``parallelism`` pairs in flight.

    Results are in manifest order and do not depend on ``parallelism``.
    The summary CSV (default ``summary.csv`` next to the manifest) has one
    row per pair; the success fraction counts pairs with status ok and mean
    residual within ``cfg.success_threshold_px``.
    """
    rows, skipped = read_manifest(manifest, cfg, out_root)
    jobs = [r.job for r in rows]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            reports = list(pool.map(run_pair, jobs))
    else:
        reports = [run_pair(j) for j in jobs]
    thr = cfg.success_threshold_px
    frac = float(np.mean([r.success(thr) for r in reports])) if reports else 1.0
    summary_path = Path(manifest).parent / "summary.csv" if summary_path is None else Path(summary_path)
    sio = io.StringIO()
    writer = csv.DictWriter(sio, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(_summary_row(job, rep, thr) for job, rep in zip(jobs, reports))
    sio.write(f"# success_fraction,{frac:.6g}\n")
    write_atomic(summary_path, sio.getvalue())
    return BatchSummary(reports, skipped, frac, str(summary_path))


def batch_exit_code(summary: BatchSummary, keep_going: bool) -> int:
    """0 when every row parsed and either all pairs are ok or ``keep_going`` was given."""
    if not summary.all_parsed:
        return 2
    if summary.all_ok or keep_going:
        return 0
    return 1

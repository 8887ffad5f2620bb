"""Command-line interface: ``fundusreg {register,batch,montage,inspect}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .geometry import RegistrationModel, decompose_affine, scale_ratio
from .montage import experiment_deformations, make_montage, score_montage, shared_scene, truth_to_json
from .pipeline import (PairJob, PipelineConfig, apply_overrides, batch_exit_code, load_config,
                       prepare_image, register_prepared, run_batch, run_pair, write_atomic)
from .preprocess import save_image

log = logging.getLogger("fundusreg")

SCORE_COLUMNS = ("seed", "mode", "mean_px", "std_px", "rel_image_pct", "rel_vessel_pct")


def _shape(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _seeds(text: str):
    """``3`` or ``0-9`` or ``1,4,7``."""
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--mode", choices=("one", "two", "auto"), help="distortion model (default auto)")
    p.add_argument("--seed", type=int, help="random seed for homography sampling")
    p.add_argument("--trace", action="store_true", help="write the fit trace as trace.json")
    p.add_argument("--cache-dir", type=Path, help="keypoint cache directory")
    p.add_argument("--dump-preprocessed", action="store_true", help="save colour-stabilised inputs")
    p.add_argument("--modes", default=None, help="composites to write, e.g. blend,checker,diff")
    p.add_argument("--no-images", action="store_true", help="skip composite rendering")


def build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    fit_changes = {}
    if getattr(args, "mode", None):
        fit_changes["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        fit_changes["seed"] = args.seed
    if fit_changes:
        cfg = replace(cfg, fit=replace(cfg.fit, **fit_changes))
    over = {}
    if getattr(args, "trace", False):
        over["trace"] = True
    if getattr(args, "cache_dir", None):
        over["cache_dir"] = str(args.cache_dir)
    if getattr(args, "dump_preprocessed", False):
        over["dump_preprocessed"] = True
    if getattr(args, "modes", None):
        over["composites"] = args.modes
    if getattr(args, "no_images", False):
        over["write_images"] = False
    return apply_overrides(cfg, over) if over else cfg


def cmd_register(args) -> int:
    cfg = build_config(args)
    job = PairJob(str(args.moving), str(args.reference), args.eye, args.field, str(args.out_dir), cfg)
    rep = run_pair(job)
    res = rep.residuals or {}
    print(f"status={rep.status} residual_mean={res.get('mean', float('nan')):.4g} "
          f"overlap={rep.overlap_fraction if rep.overlap_fraction is not None else float('nan'):.3f} "
          f"report={Path(args.out_dir) / 'report.json'}")
    if rep.message:
        print(rep.message, file=sys.stderr)
    return 0 if rep.status in ("ok", "gate-failed-warning") else 1


def cmd_batch(args) -> int:
    cfg = build_config(args)
    summary = run_batch(args.manifest, args.parallel, cfg, args.summary, args.out_root)
    counts = {}
    for r in summary.reports:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(f"pairs={len(summary.reports)} skipped_rows={len(summary.skipped)} "
          f"success_fraction={summary.success_fraction:.3f} statuses={json.dumps(counts, sort_keys=True)} "
          f"summary={summary.summary_path}")
    return batch_exit_code(summary, args.keep_going)


def cmd_montage(args) -> int:
    cfg = build_config(args)
    out = Path(args.out_dir)
    h, w = args.size
    shape2 = args.size2
    modes = ("one", "two") if args.model == "both" else (args.model,)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for seed in args.seeds:
        deforms = experiment_deformations(seed, (h, w), shape2, args.rotation, args.scale, args.overlap,
                                          args.k2_factor, args.projection)
        scene = shared_scene([deforms[m] for m in modes], seed)
        prep1 = None
        for mode in modes:
            deform = deforms[mode]
            mont = make_montage(deform, seed, scene=scene)
            sub = out / f"seed{seed:03d}_{mode}"
            sub.mkdir(parents=True, exist_ok=True)
            save_image(sub / "image1.png", mont.img1)
            save_image(sub / "image2.png", mont.img2)
            write_atomic(sub / "truth.json", truth_to_json(mont, deform, seed))
            if args.generate_only:
                continue
            if prep1 is None:
                prep1 = prepare_image(mont.img1, cfg, mont.fov1)
            fit_cfg = replace(cfg.fit, mode=mode)
            reg = register_prepared(prep1, prepare_image(mont.img2, cfg, mont.fov2), replace(cfg, fit=fit_cfg))
            write_atomic(sub / "model.json", reg.model.to_json())
            s = score_montage(mont.landmarks, reg.model)
            writer.writerow([seed, mode, f"{s.mean:.6g}", f"{s.std:.6g}", f"{s.rel_image_pct:.6g}",
                             f"{s.rel_vessel_pct:.6g}"])
            print(f"seed={seed} mode={mode} mean_px={s.mean:.3f} std_px={s.std:.3f} "
                  f"landmarks={s.count} termination={reg.trace.termination}")
    if not args.generate_only:
        write_atomic(out / "scores.csv", buf.getvalue())
    return 0


def cmd_inspect(args) -> int:
    data = json.loads(Path(args.path).read_text())
    if "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    model = RegistrationModel.from_dict(data)
    dec = decompose_affine(model.H)
    print(model.to_json())
    print(json.dumps({"theta_deg": float(np.degrees(dec.theta)),
                      "phi_deg": float(np.degrees(dec.phi)),
                      "lambda1": dec.lambda1, "lambda2": dec.lambda2,
                      "scale_ratio": scale_ratio(model.H)}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fundusreg", description="Fundus image pair registration.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register one pair")
    p.add_argument("moving", type=Path)
    p.add_argument("reference", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("fundusreg_out"))
    p.add_argument("--eye", choices=("left", "right", "unknown"), default="unknown")
    p.add_argument("--field", choices=("nasal", "macular", "unknown"), default="unknown")
    _common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("batch", help="register every pair of a manifest CSV")
    p.add_argument("manifest", type=Path)
    p.add_argument("--parallel", type=int, default=1, metavar="N")
    p.add_argument("--keep-going", action="store_true", help="exit 0 even if some pairs fail")
    p.add_argument("--summary", type=Path, help="summary CSV (default: next to the manifest)")
    p.add_argument("--out-root", type=Path, help="base for relative outdir entries")
    _common(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("montage", help="simulated montage validation")
    p.add_argument("--seeds", type=_seeds, default=[0])
    p.add_argument("--model", choices=("one", "two", "both"), default="both",
                   help="ground-truth distortion model(s) to simulate and fit")
    p.add_argument("--size", type=_shape, default=(1568, 2352), help="image-1 size HxW")
    p.add_argument("--size2", type=_shape, default=None, help="image-2 size HxW for the two-distortion pair")
    p.add_argument("--rotation", type=float, default=5.0, help="degrees")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--overlap", type=float, default=0.8)
    p.add_argument("--k2-factor", type=float, default=0.7,
                   help="k2 = factor * k1 for a same-size two-distortion pair (division projection)")
    p.add_argument("--projection", choices=("division", "eye"), default="division",
                   help="ground truth: division-model surrogate, or a rotating spherical eye (half turn, half crop)")
    p.add_argument("--out-dir", type=Path, default=Path("montage_out"))
    p.add_argument("--generate-only", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_montage)

    p = sub.add_parser("inspect", help="print a model (model.json or report.json)")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry points.

Subcommands: phantom, scan, recon, measure, study, report. Failures exit
nonzero with a one-line machine-readable error JSON on stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bmode import ImagingConfig, load_recording, save_recording
from .controller import ScanConfig, run_scan
from .detector import DetectorNoise
from .phantom import CurveSpec, PhantomConfig, SpinePhantom, build_phantom
from .recon import (
    NINE_DEPTHS_MM,
    compound,
    load_coronal,
    recording_hash,
    save_coronal,
    vpi_direct_multi,
    vpi_volume,
)
from .report import render_report
from .spa import append_ratings, best_slice, extract_path, measure_spa
from .study import StudyConfig, load_study, run_study


def _parse_curves(spec: str) -> list[CurveSpec]:
    """'apex:angle[:dir],...' e.g. '10.5:20:right,3:12:left'."""
    curves = []
    for part in spec.split(","):
        if not part.strip():
            continue
        fields = part.split(":")
        apex = float(fields[0])
        angle = float(fields[1])
        direction = fields[2] if len(fields) > 2 else "right"
        curves.append(CurveSpec(apex, angle, direction))
    return curves


def _load_config(path: str | None, cls, **overrides):
    kwargs = {}
    if path:
        kwargs.update(json.loads(Path(path).read_text()))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def _cmd_phantom(args) -> int:
    cfg_kwargs = {}
    if args.config:
        cfg_kwargs = json.loads(Path(args.config).read_text())
        if "curves" in cfg_kwargs:
            cfg_kwargs["curves"] = [CurveSpec(**c) for c in cfg_kwargs["curves"]]
    cfg = PhantomConfig(**cfg_kwargs)
    if args.curves is not None:
        cfg.curves = _parse_curves(args.curves)
    if args.seed is not None:
        cfg.seed = args.seed
    phantom = build_phantom(cfg)
    out = Path(args.out or "phantom.json")
    phantom.to_json(out)
    print(json.dumps({
        "phantom": str(out),
        "ground_truth": [dataclasses.asdict(a) for a in phantom.ground_truth],
    }))
    return 0


def _cmd_scan(args) -> int:
    phantom = SpinePhantom.from_json(args.phantom)
    scan_cfg = ScanConfig(mode=args.mode)
    if args.force is not None:
        scan_cfg.preset_force = args.force
    if args.speed is not None:
        scan_cfg.scan_speed = args.speed
    if args.seed is not None:
        scan_cfg.seed = args.seed
    img_cfg = ImagingConfig(seed=args.seed or 0)
    noise = None
    if args.mode == "robotic" and args.detector_sigma is not None:
        noise = DetectorNoise(sigma_mm=args.detector_sigma, seed=args.seed or 0)
    rec = run_scan(phantom, scan_cfg, img_cfg, detector_noise=noise)
    out = Path(args.out or "scan_out")
    save_recording(rec, out)
    print(json.dumps({
        "recording": str(out),
        "frames": len(rec.frames),
        "duration_s": rec.metadata.get("duration_s"),
        "flags": rec.metadata.get("flags", []),
    }))
    return 0


def _cmd_recon(args) -> int:
    rec = load_recording(args.in_dir)
    phantom = SpinePhantom.from_json(args.phantom)
    depths = np.linspace(4.0, 28.0, args.depths) if args.depths != 9 else NINE_DEPTHS_MM
    out = Path(args.out or "recon_out")
    out.mkdir(parents=True, exist_ok=True)
    src_hash = recording_hash(rec)
    if args.method == "direct":
        images = vpi_direct_multi(rec, phantom, depths, band=args.band)
    else:
        vol = compound(rec)
        images = []
        for i, d in enumerate(depths):
            img = vpi_volume(vol, phantom, d, band=args.band)
            img.slice_index = i + 1
            images.append(img)
    written = []
    for img in images:
        path = out / f"coronal_{img.slice_index:02d}.pgm"
        save_coronal(img, path, source_hash=src_hash)
        written.append(str(path))
    print(json.dumps({"coronal_images": written, "method": args.method}))
    return 0


def _cmd_measure(args) -> int:
    paths = [Path(p) for p in args.images]
    images = [load_coronal(p) for p in paths]
    slice_pos, img = best_slice(images)
    path = extract_path(img)
    angles = measure_spa(path)
    result = {
        "slice_index": images[slice_pos].slice_index,
        "path_flags": path.flags,
        "angles": [dataclasses.asdict(a) for a in angles],
    }
    if args.append:
        rows = [{
            "subject_id": args.subject, "curve_id": i + 1,
            "method": args.method, "scan_idx": args.scan_idx,
            "rater": "auto", "angle_deg": f"{a.angle:.4f}",
            "slice_index": images[slice_pos].slice_index,
            "flags": ";".join(path.flags),
        } for i, a in enumerate(angles)]
        append_ratings(args.append, rows)
        result["appended_to"] = args.append
    print(json.dumps(result))
    return 0


def _cmd_study(args) -> int:
    cfg = _load_config(args.config, StudyConfig)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.jobs is not None:
        cfg.n_jobs = args.jobs
    out = Path(args.out or "study_out")
    result = run_study(cfg, out)
    print(json.dumps({
        "study_dir": str(out),
        "ratings": str(result.rating_csv),
        "n_rows": len(result.rows),
    }))
    return 0


def _cmd_report(args) -> int:
    study = load_study(args.in_dir)
    paths = render_report(study, args.out)
    print(json.dumps({
        "markdown": str(paths["markdown"]),
        "scatter": [[str(a), str(b)] for a, b in paths.get("scatter", [])],
    }))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoliosim")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="build a spine phantom and save it as JSON")
    p.add_argument("--config", help="PhantomConfig JSON file")
    p.add_argument("--curves", help="'apex:angle[:dir],...' shorthand")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("scan", help="run a simulated scan on a phantom")
    p.add_argument("--phantom", required=True)
    p.add_argument("--mode", choices=["robotic", "manual"], default="robotic")
    p.add_argument("--force", type=float)
    p.add_argument("--speed", type=float)
    p.add_argument("--detector-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("recon", help="coronal projections from a recording")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--phantom", required=True)
    p.add_argument("--depths", type=int, default=9)
    p.add_argument("--band", type=float, default=3.0)
    p.add_argument("--method", choices=["volume", "direct"], default="direct")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_recon)

    p = sub.add_parser("measure", help="measure SPA on coronal images")
    p.add_argument("images", nargs="+")
    p.add_argument("--append", help="rating-table CSV to append to")
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--method", default="robotic")
    p.add_argument("--scan-idx", type=int, default=1)
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser("study", help="run the full simulated study protocol")
    p.add_argument("--config", help="StudyConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("report", help="render tables and figures from a study")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())

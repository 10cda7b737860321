"""Cohort generation and the 3-robotic + 3-manual x 2-rater study protocol.

``run_study`` simulates the full protocol on a synthetic cohort: each
subject is scanned three times per method with fresh posture jitter, every
scan is reconstructed at nine depths, the best slice is measured, and two
simulated raters re-measure every scan. The resulting rating table feeds
the intra-rater, inter-rater and inter-method analyses.

Everything is seeded from a single master seed through named substreams,
so a re-run from the same manifest reproduces byte-identical outputs.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bmode import ImagingConfig
from .controller import ScanConfig, run_scan
from .detector import DetectorNoise
from .phantom import CurveSpec, PhantomConfig, PhantomError, SpinePhantom, build_phantom
from .recon import NINE_DEPTHS_MM, recording_hash, save_coronal, vpi_direct_multi
from .spa import RaterModel, SpaError, append_ratings, best_slice, extract_path, measure_spa, rate
from .stats import (
    IccResult,
    RatingTable,
    StatsError,
    icc_absolute,
    linreg_r2,
    mad_summary,
    pct_below,
    sd_sem_summary,
    wilcoxon_signed_rank,
)

METHODS = ("robotic", "manual")
_CURVE_MATCH_MAX_LEVELS = 4.0


class StudyError(RuntimeError):
    pass


def _study_imaging() -> ImagingConfig:
    # reduced-fidelity preset: 0.5 mm lateral pixels, 4 fps; full statistics,
    # desk-scale cost
    return ImagingConfig(width_px=160, height_px=96, frame_rate=4.0, speckle_sigma=0.2)


@dataclass
class StudyConfig:
    n_subjects: int = 23
    n_single: int = 10
    n_double: int = 13
    angle_range: tuple[float, float] = (7.0, 31.0)
    angle_mean: float = 15.7
    angle_sd: float = 5.6
    mean_tolerance: float = 1.5
    scans_per_method: int = 3
    raters: list[RaterModel] = field(default_factory=lambda: [
        RaterModel(name="R1", angle_sigma=2.3, seed=101),   # novice
        RaterModel(name="R2", angle_sigma=2.2, seed=202),   # experienced
    ])
    detector_noise: DetectorNoise = field(default_factory=lambda: DetectorNoise(
        sigma_mm=1.5, miss_rate=0.1, misclass_rate=0.061))
    robotic: ScanConfig = field(default_factory=lambda: ScanConfig(
        mode="robotic", control_rate=15.0))
    manual: ScanConfig = field(default_factory=lambda: ScanConfig(
        mode="manual", control_rate=15.0, jitter_amplitude=1.0))
    imaging: ImagingConfig = field(default_factory=_study_imaging)
    coronal_spacing: float = 1.0
    band_mm: float = 3.0
    posture_shift_max: float = 3.0   # mm between scans
    posture_tilt_max: float = 2.0    # degrees between scans
    spine_length: float = 400.0
    torso_compliance: float = 0.0
    master_seed: int = 0
    retry_budget: int = 50
    n_jobs: int = 1

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise StudyError("need at least 2 subjects")
        if self.scans_per_method < 2:
            raise StudyError("need at least 2 scans per method")
        if self.n_single + self.n_double != self.n_subjects:
            raise StudyError("n_single + n_double must equal n_subjects")

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        """Rebuild a config from a study manifest's ``config`` entry.

        JSON turns tuples into lists and nested configs into plain dicts;
        this undoes both so a finished study can be re-run exactly.
        """
        d = dict(d)
        d["angle_range"] = tuple(d["angle_range"])
        d["raters"] = [RaterModel(**r) for r in d["raters"]]
        d["detector_noise"] = DetectorNoise(**d["detector_noise"])
        for key in ("robotic", "manual"):
            sc = dict(d[key])
            sc["pid_gains"] = tuple(sc["pid_gains"])
            sc["kalman"] = tuple(sc["kalman"])
            d[key] = ScanConfig(**sc)
        d["imaging"] = ImagingConfig(**d["imaging"])
        return cls(**d)


@dataclass
class StudyOutput:
    out_dir: Path
    rows: list[dict]
    reports: dict
    manifest: dict

    @property
    def rating_csv(self) -> Path:
        return self.out_dir / "ratings.csv"


# ---------------------------------------------------------------------------
# cohort

def _sample_angles(cfg: StudyConfig, rng) -> tuple[list[float], list[tuple[float, float]]]:
    lo, hi = cfg.angle_range
    if not (lo <= cfg.angle_mean <= hi):
        raise StudyError(
            f"target mean {cfg.angle_mean} outside requested range [{lo}, {hi}]")

    def draw(mean, sd):
        for _ in range(1000):
            a = rng.normal(mean, sd)
            if lo <= a <= hi:
                return float(a)
        raise StudyError("angle sampling failed inside the requested range")

    for _ in range(cfg.retry_budget):
        singles = [draw(cfg.angle_mean, cfg.angle_sd) for _ in range(cfg.n_single)]
        doubles = []
        for _ in range(cfg.n_double):
            major = draw(cfg.angle_mean + 2.0, cfg.angle_sd)
            minor = draw(max(lo + 1.0, cfg.angle_mean - 4.0), cfg.angle_sd * 0.7)
            doubles.append((major, min(minor, major)))
        all_angles = singles + [a for pair in doubles for a in pair]
        if abs(float(np.mean(all_angles)) - cfg.angle_mean) <= cfg.mean_tolerance:
            return singles, doubles
    raise StudyError("cohort sampling exhausted the retry budget")


def generate_cohort(cfg: StudyConfig) -> list[SpinePhantom]:
    """Sampled phantoms matching the configured curve-count and angle profile.

    Some double-curve angle pairs (a dominant major with a much smaller
    minor) are infeasible at every admissible apex placement, so when the
    placement retries run out the whole angle set is resampled.
    """
    cfg.validate()
    rng = np.random.default_rng((cfg.master_seed, 11))
    last_err = None
    for _ in range(cfg.retry_budget):
        singles, doubles = _sample_angles(cfg, rng)
        try:
            return _build_cohort(cfg, rng, singles, doubles)
        except StudyError as exc:
            last_err = exc
    raise StudyError(f"cohort generation exhausted the retry budget: {last_err}")


def _build_cohort(cfg: StudyConfig, rng, singles, doubles) -> list[SpinePhantom]:
    def build_retrying(make_config):
        # close apexes with very unequal angles can be geometrically
        # infeasible; redraw the placement until the solve succeeds
        for _ in range(cfg.retry_budget):
            try:
                return build_phantom(make_config())
            except PhantomError:
                continue
        raise StudyError("phantom construction exhausted the retry budget")

    phantoms = []
    for angle in singles:
        def single_config(angle=angle):
            thoracic = rng.random() < 0.5
            apex = float(rng.uniform(9.0, 12.5)) if thoracic else float(rng.uniform(2.5, 4.5))
            direction = "right" if rng.random() < 0.5 else "left"
            return PhantomConfig(
                spine_length=cfg.spine_length,
                torso_compliance=cfg.torso_compliance,
                curves=[CurveSpec(apex, angle, direction)],
                seed=int(rng.integers(2 ** 31)),
            )
        phantoms.append(build_retrying(single_config))
    for major, minor in doubles:
        def double_config(major=major, minor=minor):
            apex_t = float(rng.uniform(9.5, 12.5))
            apex_l = float(rng.uniform(2.5, 4.5))
            d = "right" if rng.random() < 0.5 else "left"
            other = "left" if d == "right" else "right"
            return PhantomConfig(
                spine_length=cfg.spine_length,
                torso_compliance=cfg.torso_compliance,
                curves=[CurveSpec(apex_t, major, d), CurveSpec(apex_l, minor, other)],
                seed=int(rng.integers(2 ** 31)),
            )
        phantoms.append(build_retrying(double_config))
    return phantoms


# ---------------------------------------------------------------------------
# one scan of one subject

def _match_curves(measured, truth):
    """Map each ground-truth curve index to a measured angle (or None)."""
    out = [None] * len(truth)
    used = set()
    for gi, gt in enumerate(truth):
        gt_mid = 0.5 * (gt.upper_level + gt.lower_level)
        best, best_d = None, _CURVE_MATCH_MAX_LEVELS
        for mi, mc in enumerate(measured):
            if mi in used:
                continue
            d = abs(0.5 * (mc.upper_level + mc.lower_level) - gt_mid)
            if d < best_d:
                best, best_d = mi, d
        if best is not None:
            used.add(best)
            out[gi] = measured[best]
    return out


def _scan_subject(args):
    """All scans + measurements for one subject; returns rating rows."""
    (cfg, subject_id, phantom) = args
    rows = []
    saved_images = []
    level_spacing = phantom.spacing
    for method in METHODS:
        for scan_idx in range(1, cfg.scans_per_method + 1):
            tag = f"s{subject_id:02d}_{method}{scan_idx}"
            seed_key = (cfg.master_seed, subject_id, 0 if method == "robotic" else 1, scan_idx)
            rng = np.random.default_rng(seed_key)
            shift = float(rng.uniform(-cfg.posture_shift_max, cfg.posture_shift_max))
            tilt = float(rng.uniform(-cfg.posture_tilt_max, cfg.posture_tilt_max))
            posed = phantom.with_posture(shift, tilt)

            scan_cfg = dataclasses.replace(
                cfg.robotic if method == "robotic" else cfg.manual,
                seed=int(rng.integers(2 ** 31)))
            img_cfg = dataclasses.replace(cfg.imaging, seed=int(rng.integers(2 ** 31)))
            noise = dataclasses.replace(
                cfg.detector_noise, seed=int(rng.integers(2 ** 31)))

            flags = []
            matched = None
            slice_idx = None
            image = None
            try:
                rec = run_scan(posed, scan_cfg, img_cfg,
                               detector_noise=noise if method == "robotic" else None)
                flags.extend(rec.metadata.get("flags", []))
                images = vpi_direct_multi(rec, posed, NINE_DEPTHS_MM,
                                          band=cfg.band_mm, spacing=cfg.coronal_spacing)
                slice_idx, image = best_slice(images)
                path = extract_path(image)
                flags.extend(path.flags)
                measured = measure_spa(path, level_spacing_mm=level_spacing)
                matched = _match_curves(measured, phantom.ground_truth)
            except (SpaError, ValueError, RuntimeError) as exc:
                flags.append(f"scan_failed:{type(exc).__name__}")

            if image is not None:
                saved_images.append((tag, image))

            for curve_id in range(1, len(phantom.ground_truth) + 1):
                mc = matched[curve_id - 1] if matched else None
                auto_angle = mc.angle if mc is not None else None
                curve_flags = list(flags)
                if auto_angle is None and "scan_failed" not in ";".join(flags):
                    curve_flags.append("curve_missed")
                base = {
                    "subject_id": subject_id,
                    "curve_id": curve_id,
                    "method": method,
                    "scan_idx": scan_idx,
                    "slice_index": slice_idx if slice_idx is not None else "",
                    "flags": ";".join(curve_flags),
                }
                rows.append({**base, "rater": "auto",
                             "angle_deg": f"{auto_angle:.4f}" if auto_angle is not None else ""})
                for rater in cfg.raters:
                    if auto_angle is None:
                        rows.append({**base, "rater": rater.name, "angle_deg": ""})
                    else:
                        # the master seed is part of the scan id so rater
                        # noise is independent across repeated studies
                        val = rate([mc], rater,
                                   scan_id=f"{cfg.master_seed}:{subject_id}:{method}:{scan_idx}")[0]
                        rows.append({**base, "rater": rater.name, "angle_deg": f"{val:.4f}"})
    return subject_id, rows, saved_images, [dataclasses.asdict(a) for a in phantom.ground_truth]


# ---------------------------------------------------------------------------
# analyses

def _value_map(rows, rater):
    """(subject, curve) -> {(method, scan_idx): angle} for one rater."""
    out = {}
    for r in rows:
        if r["rater"] != rater or r["angle_deg"] in ("", None):
            continue
        key = (int(r["subject_id"]), int(r["curve_id"]))
        out.setdefault(key, {})[(r["method"], int(r["scan_idx"]))] = float(r["angle_deg"])
    return out


def _icc_as_dict(res: IccResult) -> dict:
    return {"icc": res.icc, "ci_low": res.ci_low, "ci_high": res.ci_high,
            "model": res.model, "anova": res.anova}


def analyze_ratings(rows: list[dict], rater_names: list[str],
                    scans_per_method: int = 3,
                    threshold: float = 5.0) -> dict:
    """Intra-rater, inter-rater and inter-method analyses from rating rows.

    Curves with missing cells are excluded listwise per analysis; the
    below-threshold percentages are reported both against the analyzed
    and against the total curve count.
    """
    scan_cols = list(range(1, scans_per_method + 1))
    all_keys = sorted({(int(r["subject_id"]), int(r["curve_id"])) for r in rows})
    n_total = len(all_keys)
    report: dict = {"n_curves_total": n_total, "intra_rater": {},
                    "inter_rater": {}, "inter_method": {}}

    maps = {name: _value_map(rows, name) for name in rater_names}

    for method in METHODS:
        for name in rater_names:
            vm = maps[name]
            keys = [k for k in all_keys
                    if all((method, s) in vm.get(k, {}) for s in scan_cols)]
            if len(keys) < 2:
                report["intra_rater"][f"{method}_{name}"] = {"error": "insufficient data"}
                continue
            matrix = np.array([[vm[k][(method, s)] for s in scan_cols] for k in keys])
            cell: dict = {"n_curves": len(keys), "n_excluded": n_total - len(keys)}
            try:
                cell["icc"] = _icc_as_dict(icc_absolute(RatingTable(matrix), "single"))
            except StatsError as exc:
                cell["icc"] = {"error": str(exc)}
            mads = mad_summary(list(matrix))
            pct_a, cnt = pct_below(mads["per_group"], threshold)
            cell["mad"] = {k: v for k, v in mads.items() if k != "per_group"}
            cell["pct_below"] = {
                "threshold_deg": threshold,
                "pct_of_analyzed": pct_a, "count": cnt,
                "pct_of_total": 100.0 * cnt / n_total if n_total else 0.0,
            }
            cell["sd_sem"] = sd_sem_summary(list(matrix))
            report["intra_rater"][f"{method}_{name}"] = cell

    # inter-rater: means of the scans per rater, average-rating ICC
    for method in METHODS:
        keys = [k for k in all_keys
                if all(all((method, s) in maps[name].get(k, {}) for s in scan_cols)
                       for name in rater_names)]
        if len(keys) < 2 or len(rater_names) < 2:
            report["inter_rater"][method] = {"error": "insufficient data"}
            continue
        matrix = np.array([
            [float(np.mean([maps[name][k][(method, s)] for s in scan_cols]))
             for name in rater_names]
            for k in keys])
        cell = {"n_curves": len(keys), "n_excluded": n_total - len(keys)}
        try:
            cell["icc"] = _icc_as_dict(icc_absolute(RatingTable(matrix), "average"))
        except StatsError as exc:
            cell["icc"] = {"error": str(exc)}
        mads = mad_summary(list(matrix))
        pct_a, cnt = pct_below(mads["per_group"], threshold)
        cell["mad"] = {k: v for k, v in mads.items() if k != "per_group"}
        cell["pct_below"] = {
            "threshold_deg": threshold,
            "pct_of_analyzed": pct_a, "count": cnt,
            "pct_of_total": 100.0 * cnt / n_total if n_total else 0.0,
        }
        cell["sd_sem"] = sd_sem_summary(list(matrix))
        report["inter_rater"][method] = cell

    # inter-method: per-curve means of each method, per rater
    for name in rater_names:
        vm = maps[name]
        keys = [k for k in all_keys
                if all((m, s) in vm.get(k, {}) for m in METHODS for s in scan_cols)]
        if len(keys) < 3:
            report["inter_method"][name] = {"error": "insufficient data"}
            continue
        rob = np.array([float(np.mean([vm[k][("robotic", s)] for s in scan_cols])) for k in keys])
        man = np.array([float(np.mean([vm[k][("manual", s)] for s in scan_cols])) for k in keys])
        cell = {"n_curves": len(keys), "n_excluded": n_total - len(keys)}
        try:
            cell["wilcoxon_p"] = wilcoxon_signed_rank(rob, man)
        except StatsError as exc:
            cell["wilcoxon_p"] = None
            cell["wilcoxon_error"] = str(exc)
        try:
            slope, intercept, r2 = linreg_r2(man, rob)
            cell["linreg"] = {"slope": slope, "intercept": intercept, "r2": r2}
        except StatsError as exc:
            cell["linreg"] = {"error": str(exc)}
        pair_mads = np.abs(rob - man)
        pct_a, cnt = pct_below(pair_mads, threshold)
        cell["mad"] = {
            "mean": float(pair_mads.mean()),
            "sd": float(pair_mads.std(ddof=1)) if len(pair_mads) > 1 else 0.0,
            "max": float(pair_mads.max()),
        }
        cell["pct_below"] = {
            "threshold_deg": threshold,
            "pct_of_analyzed": pct_a, "count": cnt,
            "pct_of_total": 100.0 * cnt / n_total if n_total else 0.0,
        }
        cell["pairs"] = {"robotic_means": rob.tolist(), "manual_means": man.tolist(),
                         "keys": [list(k) for k in keys]}
        report["inter_method"][name] = cell
    return report


# ---------------------------------------------------------------------------
# the runner

def run_study(cfg: StudyConfig, out_dir: str | Path) -> StudyOutput:
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "coronal").mkdir(exist_ok=True)

    manifest = {
        "version": __version__,
        "config": _config_dict(cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    phantoms = generate_cohort(cfg)
    jobs = [(cfg, i + 1, ph) for i, ph in enumerate(phantoms)]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(_scan_subject, jobs))
    else:
        results = [_scan_subject(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    rows: list[dict] = []
    ground_truth = {}
    for subject_id, subject_rows, saved_images, gt in results:
        rows.extend(subject_rows)
        ground_truth[str(subject_id)] = gt
        for tag, image in saved_images:
            save_coronal(image, out / "coronal" / f"{tag}.pgm")

    csv_path = out / "ratings.csv"
    if csv_path.exists():
        csv_path.unlink()
    append_ratings(csv_path, rows)
    (out / "ground_truth.json").write_text(json.dumps(ground_truth, indent=2, sort_keys=True))

    rater_names = [r.name for r in cfg.raters]
    reports = analyze_ratings(rows, rater_names, cfg.scans_per_method)
    (out / "stats.json").write_text(json.dumps(reports, indent=2, sort_keys=True))

    return StudyOutput(out_dir=out, rows=rows, reports=reports, manifest=manifest)


def _config_dict(cfg: StudyConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def load_study(out_dir: str | Path) -> StudyOutput:
    """Rehydrate a StudyOutput from a finished study directory."""
    out = Path(out_dir)
    from .spa import read_ratings
    rows = read_ratings(out / "ratings.csv")
    reports = json.loads((out / "stats.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    return StudyOutput(out_dir=out, rows=rows, reports=reports, manifest=manifest)

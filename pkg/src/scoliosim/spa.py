"""Shadow-path extraction and spinous process angle (SPA) measurement.

The spinous-process shadow is the dark ridge running up the coronal image.
``extract_path`` traces it row by row with a continuity constraint;
``measure_spa`` smooths the traced path, locates curve apexes as lateral
extrema after regressing out the subject's rigid posture, and reports each
curve's tangent-tilt span between its most tilted levels ("tangent lines
at the slope extrema"), largest first, at most two curves.

``rate`` simulates a human rater re-measuring the same curves: a fixed
bias plus zero-mean noise, deterministic per (seed, scan id, curve index).
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .recon import CoronalImage

MAX_STEP_PX = 3          # ridge continuity: max lateral step per row
MAX_GAP_ROWS = 10        # longer gaps are flagged
SMOOTH_KERNEL_MM = 20.0
MIN_PATH_MM = 100.0
MIN_CURVE_ANGLE = 1.5        # degrees; smaller tilt spans are noise
APEX_PROMINENCE_MM = 1.0     # lateral prominence a curve apex must show
COVERAGE_FLAG = 0.8
DEFAULT_LEVEL_SPACING_MM = 400.0 / 17.0

# Angle noise contributed by one vertebral level of end-level misplacement.
LEVEL_JITTER_DEG_PER_LEVEL = 0.8


class SpaError(ValueError):
    pass


@dataclass
class SpinousPath:
    points: np.ndarray           # (n, 2) of (z, x) mm, z strictly increasing
    smoothness: float            # residual mm of the smoothed fit
    coverage: float              # traced fraction of the image z-range
    flags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class RaterModel:
    name: str = "R"
    angle_sigma: float = 0.0     # degrees
    level_jitter: float = 0.0    # vertebral levels
    bias: float = 0.0            # degrees
    seed: int = 0

    def __post_init__(self):
        if self.angle_sigma < 0:
            raise ValueError("angle_sigma must be >= 0")


_REFINE_HALFWIDTH_MM = 5.0


def _refine_subpixel(row: np.ndarray, ok: np.ndarray, pos: int, spacing: float) -> float:
    """Darkness-weighted centroid around the per-row minimum (sub-pixel).

    The window must span the full shadow width; the minimum is flat across
    it, so argmin alone lands on the left edge of the flat run.
    """
    halfwidth = max(2, int(round(_REFINE_HALFWIDTH_MM / spacing)))
    lo = max(0, pos - halfwidth)
    hi = min(len(row), pos + halfwidth + 1)
    ref = float(np.median(row[ok])) if ok.any() else 0.0
    w = np.where(ok[lo:hi], np.maximum(ref - row[lo:hi], 0.0), 0.0)
    total = float(w.sum())
    if total <= 0.0:
        return float(pos)
    return lo + float(np.dot(np.arange(hi - lo), w)) / total


def extract_path(img: CoronalImage) -> SpinousPath:
    """Trace the darkest ridge with a continuity constraint of 3 px/row."""
    pix = img.pixels
    counts = img.counts
    nz, nx = pix.shape
    data = counts > 0

    row_has_data = data.sum(axis=1) >= 5
    if not row_has_data.any():
        raise SpaError("no image data to trace")

    # per-row contrast; rows without a distinct dark ridge are gap rows
    big = np.where(data, pix, -np.inf)
    small = np.where(data, pix, np.inf)
    row_max = big.max(axis=1)
    row_min = small.min(axis=1)
    contrast = np.where(row_has_data, row_max - row_min, 0.0)
    global_contrast = float(contrast.max())
    if global_contrast < 0.1:
        raise SpaError("no traceable ridge: image is uniform")
    valid = row_has_data & (contrast > 0.35 * global_contrast)
    if valid.sum() < 5:
        raise SpaError("no traceable ridge: too few rows with contrast")

    cost = np.where(data, pix, np.inf)
    start = int(np.argmax(np.where(valid, contrast, -np.inf)))
    ridge = np.full(nz, np.nan)
    ridge[start] = _refine_subpixel(pix[start], data[start],
                                    int(np.argmin(cost[start])), img.spacing)

    for direction in (1, -1):
        pos = ridge[start]
        gap = 0
        rng_rows = range(start + direction, nz if direction == 1 else -1, direction)
        for r in rng_rows:
            if not valid[r]:
                gap += 1
                continue
            halo = MAX_STEP_PX * (gap + 1)
            lo = max(0, int(pos) - halo)
            hi = min(nx, int(pos) + halo + 1)
            seg = cost[r, lo:hi]
            if not np.isfinite(seg).any():
                gap += 1
                continue
            pos = _refine_subpixel(pix[r], data[r], lo + int(np.argmin(seg)), img.spacing)
            ridge[r] = pos
            gap = 0

    traced = np.isfinite(ridge)
    rows = np.flatnonzero(traced)
    if rows.size < 5:
        raise SpaError("no traceable ridge")

    flags = []
    gaps = np.diff(rows)
    if gaps.size and gaps.max() - 1 > MAX_GAP_ROWS:
        flags.append("long_gap")

    # interpolate interior gaps
    all_rows = np.arange(rows[0], rows[-1] + 1)
    ridge_i = np.interp(all_rows, rows, ridge[rows])

    z0, x0 = img.origin_zx
    z = z0 + all_rows * img.spacing
    x = x0 + ridge_i * img.spacing

    coverage = float((rows[-1] - rows[0] + 1) / max(row_has_data.sum(), 1))
    if coverage < COVERAGE_FLAG:
        flags.append("low_coverage")

    k = max(1, int(round(SMOOTH_KERNEL_MM / img.spacing)))
    smooth = np.convolve(x, np.ones(k) / k, mode="same")
    body = slice(k, max(k, len(x) - k))
    smoothness = float(np.sqrt(np.mean((x[body] - smooth[body]) ** 2))) if len(x) > 2 * k else 0.0

    return SpinousPath(points=np.column_stack([z, x]), smoothness=smoothness,
                       coverage=coverage, flags=flags)


def _find_apexes(zg: np.ndarray, xs: np.ndarray):
    """Apex (index, direction) of each reported curve, at most two.

    Subject posture contributes a rigid lateral shift plus tilt, so apexes
    are located on the line-detrended path, where each curve shows up as an
    interior extremum. The two most prominent extrema are kept; where a
    large curve's shoulder qualifies as a second apex it is reported too
    (the boundary between an end-of-range curve and a shoulder is declared,
    not observable from a single path).
    """
    coef = np.polyfit(zg, xs, 1)
    resid = xs - np.polyval(coef, zg)
    hi, hp = find_peaks(resid, prominence=APEX_PROMINENCE_MM)
    lo_, lp = find_peaks(-resid, prominence=APEX_PROMINENCE_MM)
    apexes = sorted(
        [(int(i), "right", float(p)) for i, p in zip(hi, hp["prominences"])]
        + [(int(i), "left", float(p)) for i, p in zip(lo_, lp["prominences"])],
        key=lambda a: -a[2])[:2]
    return sorted((i, d) for i, d, _ in apexes)


def measure_spa(
    path: SpinousPath,
    level_spacing_mm: float = DEFAULT_LEVEL_SPACING_MM,
    smooth_kernel_mm: float = SMOOTH_KERNEL_MM,
) -> list:
    """Angles between tangent lines at adjacent tilt extrema, largest first."""
    from .phantom import CurveAngle

    z = path.points[:, 0]
    if z[-1] - z[0] < MIN_PATH_MM:
        raise SpaError(f"path too short ({z[-1] - z[0]:.0f} mm < {MIN_PATH_MM} mm)")

    step = 1.0
    zg = np.arange(z[0], z[-1] + step / 2, step)
    xg = np.interp(zg, z, path.points[:, 1])
    k = max(1, int(round(smooth_kernel_mm / step)))

    def _boxcar(v: np.ndarray, linear: bool = False) -> np.ndarray:
        if linear:
            # odd extension keeps the boundary slope, so tilt extrema that
            # sit at the path ends survive the smoothing
            left = 2.0 * v[0] - v[k:0:-1]
            right = 2.0 * v[-1] - v[-2:-k - 2:-1]
        else:
            left = np.full(k, v[0])
            right = np.full(k, v[-1])
        pad = np.concatenate([left, v, right])
        return np.convolve(pad, np.ones(k) / k, mode="same")[k:-k]

    xs = _boxcar(xg, linear=True)
    slope = np.gradient(xs, zg)
    # tracing noise leaves sub-degree wiggles in the tilt; smooth it too
    theta = _boxcar(np.degrees(np.arctan(slope)))

    apexes = _find_apexes(zg, xs)

    # one window per curve, split at the apex midpoint; the curve angle is
    # the tangent-tilt span between the window's most tilted levels
    bounds = [0]
    for (a, _), (b, _) in zip(apexes, apexes[1:]):
        bounds.append((a + b) // 2)
    bounds.append(len(zg) - 1)

    out = []
    for (w0, w1), (_, direction) in zip(zip(bounds, bounds[1:]), apexes):
        win = theta[w0:w1 + 1]
        i_max = w0 + int(np.argmax(win))
        i_min = w0 + int(np.argmin(win))
        angle = float(theta[i_max] - theta[i_min])
        if angle < MIN_CURVE_ANGLE:
            continue
        out.append(CurveAngle(
            angle=angle,
            upper_level=float(max(zg[i_max], zg[i_min]) / level_spacing_mm),
            lower_level=float(min(zg[i_max], zg[i_min]) / level_spacing_mm),
            direction=direction,
        ))
    out.sort(key=lambda c: -c.angle)
    return out


def best_slice(images: list[CoronalImage]) -> tuple[int, CoronalImage]:
    """Pick the depth slice with the strongest ridge contrast."""
    if not images:
        raise SpaError("no coronal images")
    scores = []
    for img in images:
        data = img.counts > 0
        if data.sum() < 10:
            scores.append(-np.inf)
            continue
        big = np.where(data, img.pixels, -np.inf).max(axis=1)
        small = np.where(data, img.pixels, np.inf).min(axis=1)
        rows = data.sum(axis=1) >= 5
        scores.append(float(np.median((big - small)[rows])) if rows.any() else -np.inf)
    i = int(np.argmax(scores))
    return i, images[i]


def rate(angles: list, rater: RaterModel, scan_id) -> list[float]:
    """Simulated rater measurements of the given curve angles (degrees)."""
    if not angles:
        raise SpaError("nothing to rate")
    out = []
    scan_key = zlib.crc32(str(scan_id).encode())
    for idx, a in enumerate(angles):
        rng = np.random.default_rng((rater.seed, scan_key, idx))
        sigma = np.hypot(rater.angle_sigma, LEVEL_JITTER_DEG_PER_LEVEL * rater.level_jitter)
        noise = rng.normal(0.0, sigma) if sigma > 0 else 0.0
        base = a.angle if hasattr(a, "angle") else float(a)
        value = base + rater.bias + noise
        out.append(max(0.0, float(value)))
    return out


# ---------------------------------------------------------------------------
# rating-table CSV

RATING_FIELDS = ["subject_id", "curve_id", "method", "scan_idx", "rater",
                 "angle_deg", "slice_index", "flags"]


def append_ratings(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RATING_FIELDS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_ratings(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

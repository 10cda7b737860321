"""Parametric scoliotic spine phantoms.

Coordinate convention (mm):
    z -- along the spine, 0 at the sacrum base, increasing toward C7
    x -- lateral, positive toward the subject's right
    y -- depth, increasing into the body; the probe approaches from y < skin

The coronal centerline is a sum of Gaussian bumps, one per curve. A bump
``A * exp(-(z - za)^2 / (2 s^2))`` has tangent-slope extrema at ``za +/- s``,
so for an isolated curve the amplitude that yields a target tilt-difference
angle has a closed form; overlapping double curves are refined by fixed-point
iteration against the analytic tangent-angle oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

# Curve half-width in units of vertebra spacing.
CURVE_SIGMA_LEVELS = 3.0
# Minimum apex separation (vertebral levels) for a feasible double curve.
MIN_APEX_SEPARATION = 3.0
# Scapula ridge geometry (mm): protrusion above the soft back surface and
# the thickness of compressible tissue over the rigid bone.
SCAPULA_RIDGE_HEIGHT = 5.0
SCAPULA_SOFT_LAYER = 2.0
SCAPULA_BAND_HALFWIDTH = 40.0

_AMPLITUDE_TOL_DEG = 0.01
_AMPLITUDE_MAX_ITER = 80


class PhantomError(ValueError):
    """Invalid phantom configuration or infeasible curve combination."""


@dataclass(frozen=True)
class CurveSpec:
    """One coronal curve: apex position, target angle and bend direction."""

    apex_level: float          # fractional vertebra index, 0 = S1
    target_spa: float          # degrees
    direction: str = "right"   # "left" | "right"

    def sign(self) -> float:
        return 1.0 if self.direction == "right" else -1.0


@dataclass(frozen=True)
class CurveAngle:
    """An angle between the tangent lines at the two most tilted levels."""

    angle: float          # degrees, >= 0
    upper_level: float    # fractional vertebra index, upper_level > lower_level
    lower_level: float
    direction: str = "right"


@dataclass
class PhantomConfig:
    n_vertebrae: int = 18            # S1 up to C7
    spine_length: float = 400.0      # mm
    curves: list[CurveSpec] = field(default_factory=list)
    sagittal_profile: float = 10.0   # mm, kyphosis/lordosis arc amplitude
    skin_offset: float = 12.0        # mm soft tissue over the spinous tips
    back_stiffness: float = 2.5      # N/mm
    torso_compliance: float = 0.0    # deg/N whole-back bending under load
    scapula_gap: float = 0.0         # mm, 0 disables the scapula ridges
    coronal_surface_tilt: float = 0.0  # degrees
    seed: int = 0

    def validate(self) -> None:
        if self.spine_length <= 0:
            raise PhantomError("spine_length must be positive")
        if self.back_stiffness <= 0:
            raise PhantomError("back_stiffness must be positive")
        if self.n_vertebrae < 4:
            raise PhantomError("need at least 4 vertebrae")
        if len(self.curves) > 2:
            raise PhantomError("at most two curves are supported")
        for c in self.curves:
            if not (0.0 <= c.target_spa <= 45.0):
                raise PhantomError(f"target_spa {c.target_spa} outside [0, 45] deg")
            if c.direction not in ("left", "right"):
                raise PhantomError(f"unknown curve direction {c.direction!r}")
            if not (0.0 <= c.apex_level <= self.n_vertebrae - 1):
                raise PhantomError(f"apex_level {c.apex_level} outside the spine")
        if len(self.curves) == 2:
            gap = abs(self.curves[0].apex_level - self.curves[1].apex_level)
            if gap < MIN_APEX_SEPARATION:
                raise PhantomError(
                    f"curve apexes {gap:.1f} levels apart; need >= "
                    f"{MIN_APEX_SEPARATION} for a feasible double curve"
                )


class SpinePhantom:
    """Immutable spine + back-surface geometry with analytic ground truth.

    Queries are pure; instances are safe to share across threads. The
    ``with_posture`` / ``with_lumbar_bow`` constructors return modified
    copies, used for per-scan posture jitter and load-induced bending.
    """

    X_EXTENT = 80.0  # mm, valid lateral query range

    def __init__(self, config: PhantomConfig, _solve: bool = True):
        config.validate()
        self.config = config
        self.spacing = config.spine_length / (config.n_vertebrae - 1)
        self.sigma = CURVE_SIGMA_LEVELS * self.spacing
        self._amps = np.zeros(len(config.curves))
        # posture / load terms (mm, mm-per-mm slope, mm bow amplitude)
        self._shift = 0.0
        self._slope = 0.0
        self._bow_amp = 0.0
        self._bow_center = self.level_to_z(3.0)   # lumbar
        self._bow_sigma = self.sigma
        self.ground_truth: list[CurveAngle] = []
        if _solve:
            self._solve_amplitudes()
            self.ground_truth = self._measure_ground_truth()

    # ------------------------------------------------------------------
    # level / region bookkeeping

    def level_to_z(self, level: float) -> float:
        return level * self.spacing

    def z_to_level(self, z: float) -> float:
        return z / self.spacing

    @property
    def region_boundaries(self) -> dict[str, tuple[float, float]]:
        """z-ranges of sacrum / lumbar / thoracic; a partition of [0, L]."""
        z_lum = self.level_to_z(0.5)    # above S1
        z_tho = self.level_to_z(5.5)    # above L1
        return {
            "sacrum": (0.0, z_lum),
            "lumbar": (z_lum, z_tho),
            "thoracic": (z_tho, self.config.spine_length),
        }

    def region_at(self, z: float) -> str:
        for name, (lo, hi) in self.region_boundaries.items():
            if lo <= z < hi:
                return name
        return "thoracic" if z >= self.config.spine_length else "sacrum"

    # ------------------------------------------------------------------
    # centerline geometry

    def _bumps(self):
        centers = [self.level_to_z(c.apex_level) for c in self.config.curves]
        signs = [c.sign() for c in self.config.curves]
        out = [
            (zc, self.sigma, s * a)
            for zc, s, a in zip(centers, signs, self._amps)
        ]
        if self._bow_amp != 0.0:
            out.append((self._bow_center, self._bow_sigma, self._bow_amp))
        return out

    def centerline_x(self, z):
        """Coronal deviation x(z), mm. Accepts scalars or arrays."""
        z = np.asarray(z, dtype=float)
        x = np.full_like(z, self._shift) + self._slope * z
        for zc, sg, amp in self._bumps():
            x = x + amp * np.exp(-((z - zc) ** 2) / (2.0 * sg ** 2))
        return x if x.ndim else float(x)

    def centerline_slope(self, z):
        """dx/dz, analytic."""
        z = np.asarray(z, dtype=float)
        s = np.full_like(z, self._slope)
        for zc, sg, amp in self._bumps():
            s = s - amp * (z - zc) / sg ** 2 * np.exp(-((z - zc) ** 2) / (2.0 * sg ** 2))
        return s if s.ndim else float(s)

    def tangent_angle_deg(self, z):
        return np.degrees(np.arctan(self.centerline_slope(z)))

    def sagittal_depth(self, z):
        """Back-surface sagittal arc y0(z) at the spine midline, mm."""
        z = np.asarray(z, dtype=float)
        L = self.config.spine_length
        y = self.config.sagittal_profile * np.sin(2.0 * np.pi * z / L)
        return y if y.ndim else float(y)

    # ------------------------------------------------------------------
    # surfaces

    def _scapula_band(self, z):
        """Weight in [0,1] of the scapula ridge band at height z."""
        if self.config.scapula_gap <= 0:
            return np.zeros_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        zc = self.level_to_z(11.0)  # mid-thoracic
        return np.exp(-((z - zc) ** 2) / (2.0 * (SCAPULA_BAND_HALFWIDTH / 2.0) ** 2))

    def skin_height(self, z, x):
        """Soft skin surface y = S(z, x); inside the body is y > S."""
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        y = self.sagittal_depth(z) + math.tan(math.radians(self.config.coronal_surface_tilt)) * x
        if self.config.scapula_gap > 0:
            band = self._scapula_band(z)
            half_gap = self.config.scapula_gap / 2.0
            lateral = np.abs(x - self.centerline_x(z))
            ridge = 1.0 / (1.0 + np.exp(-(lateral - half_gap) / 2.0))
            y = y - SCAPULA_RIDGE_HEIGHT * band * ridge
        y = np.asarray(y)
        return y if y.ndim else float(y)

    def obstacle_height(self, z, x):
        """Rigid depth limit (scapula bone); +inf where no obstacle."""
        scalar = np.isscalar(z) and np.isscalar(x)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        shape = np.broadcast_shapes(z.shape, x.shape)
        y = np.full(shape, np.inf)
        if self.config.scapula_gap > 0:
            band = np.broadcast_to(self._scapula_band(z), shape)
            half_gap = self.config.scapula_gap / 2.0
            lateral = np.broadcast_to(np.abs(x - self.centerline_x(z)), shape)
            on_ridge = (band > 0.5) & (lateral > half_gap)
            skin = np.broadcast_to(self.skin_height(z, x), shape)
            y[on_ridge] = skin[on_ridge] + SCAPULA_SOFT_LAYER
        return float(y[0]) if scalar else y

    def spinous_tip(self, z):
        """3D point of the spinous-process tip under height z, as (x, y, z)."""
        xc = self.centerline_x(z)
        y = self.skin_height(z, xc) + self.config.skin_offset
        return np.array([float(xc), float(y), float(z)])

    @property
    def spinous_tips(self) -> np.ndarray:
        levels = np.arange(self.config.n_vertebrae, dtype=float)
        return np.array([self.spinous_tip(self.level_to_z(lv)) for lv in levels])

    def surface_query(self, z: float, x: float):
        """Skin point and outward unit normal at (z, x).

        Raises PhantomError when the query lies outside the phantom extent.
        """
        if not (0.0 <= z <= self.config.spine_length):
            raise PhantomError(f"z={z} outside [0, {self.config.spine_length}]")
        if abs(x) > self.X_EXTENT:
            raise PhantomError(f"x={x} outside +/-{self.X_EXTENT} mm extent")
        y = float(self.skin_height(z, x))
        h = 0.25
        dy_dx = (float(self.skin_height(z, x + h)) - float(self.skin_height(z, x - h))) / (2 * h)
        zl = max(0.0, z - h)
        zr = min(self.config.spine_length, z + h)
        dy_dz = (float(self.skin_height(zr, x)) - float(self.skin_height(zl, x))) / (zr - zl)
        n = np.array([dy_dx, -1.0, dy_dz])
        n /= np.linalg.norm(n)
        return np.array([x, y, z]), n

    # ------------------------------------------------------------------
    # modified copies

    def _clone(self) -> "SpinePhantom":
        other = SpinePhantom(self.config, _solve=False)
        other._amps = self._amps.copy()
        other._shift = self._shift
        other._slope = self._slope
        other._bow_amp = self._bow_amp
        other.ground_truth = self.ground_truth
        return other

    def with_posture(self, shift_mm: float, tilt_deg: float) -> "SpinePhantom":
        """Rigid coronal re-posture: lateral shift plus a constant tilt."""
        other = self._clone()
        other._shift = self._shift + shift_mm
        other._slope = self._slope + math.tan(math.radians(tilt_deg))
        return other

    def with_lumbar_bow(self, amplitude_mm: float) -> "SpinePhantom":
        """Load-induced lumbar bow; amplitude in mm at the bow apex."""
        other = self._clone()
        other._bow_amp = amplitude_mm
        return other

    def bow_amplitude_for_force(self, force_n: float) -> float:
        """Bow amplitude whose added tilt spread is compliance * force degrees."""
        extra_deg = self.config.torso_compliance * max(force_n, 0.0)
        if extra_deg <= 0:
            return 0.0
        # load exaggerates the existing deformity: bow bends the same way
        # as the curve nearest the lumbar bow center
        sign = 1.0
        if self.config.curves:
            nearest = min(self.config.curves,
                          key=lambda c: abs(self.level_to_z(c.apex_level) - self._bow_center))
            sign = nearest.sign()
        return sign * self._bow_sigma * math.sqrt(math.e) * math.tan(math.radians(extra_deg) / 2.0)

    # ------------------------------------------------------------------
    # amplitude solve + analytic ground truth

    def _curve_windows(self):
        centers = [self.level_to_z(c.apex_level) for c in self.config.curves]
        order = np.argsort(centers)
        L = self.config.spine_length
        windows = [None] * len(centers)
        sorted_centers = [centers[i] for i in order]
        for rank, idx in enumerate(order):
            lo = 0.0 if rank == 0 else 0.5 * (sorted_centers[rank - 1] + sorted_centers[rank])
            hi = L if rank == len(order) - 1 else 0.5 * (sorted_centers[rank] + sorted_centers[rank + 1])
            windows[idx] = (lo, hi)
        return windows

    def _achieved(self):
        """Per-curve (angle_deg, z_at_max_tilt, z_at_min_tilt) on the current amps."""
        z = np.arange(0.0, self.config.spine_length + 0.25, 0.25)
        theta = self.tangent_angle_deg(z)
        out = []
        for lo, hi in self._curve_windows():
            m = (z >= lo) & (z <= hi)
            zi, ti = z[m], theta[m]
            i_max, i_min = int(np.argmax(ti)), int(np.argmin(ti))
            out.append((float(ti[i_max] - ti[i_min]), float(zi[i_max]), float(zi[i_min])))
        return out

    def _solve_amplitudes(self) -> None:
        curves = self.config.curves
        if not curves:
            return
        # closed-form single-bump seed
        self._amps = np.array([
            self.sigma * math.sqrt(math.e) * math.tan(math.radians(c.target_spa) / 2.0)
            for c in curves
        ])
        if all(c.target_spa == 0 for c in curves):
            self._amps[:] = 0.0
            return
        active = [i for i, c in enumerate(curves) if c.target_spa > 0]
        for i, c in enumerate(curves):
            if c.target_spa == 0:
                self._amps[i] = 0.0
        target = np.array([curves[i].target_spa for i in active])

        def residual() -> np.ndarray:
            ach = self._achieved()
            return np.array([ach[i][0] for i in active]) - target

        # damped Newton on the window angles; overlapping bumps couple the
        # amplitudes, so the per-curve ratio update alone does not converge
        r = residual()
        for _ in range(_AMPLITUDE_MAX_ITER):
            if np.max(np.abs(r)) < _AMPLITUDE_TOL_DEG:
                return
            jac = np.zeros((len(active), len(active)))
            for col, i in enumerate(active):
                h = max(0.05, 0.02 * abs(self._amps[i]))
                self._amps[i] += h
                jac[:, col] = (residual() - r) / h
                self._amps[i] -= h
            try:
                delta = np.linalg.solve(jac, -r)
            except np.linalg.LinAlgError:
                break
            scale = 1.0
            base = self._amps.copy()
            for _ in range(6):
                for col, i in enumerate(active):
                    self._amps[i] = max(0.0, base[i] + scale * delta[col])
                r_new = residual()
                if np.max(np.abs(r_new)) < np.max(np.abs(r)):
                    r = r_new
                    break
                scale *= 0.5
            else:
                self._amps = base
                break
        errs = np.abs(residual())
        if errs.size and errs.max() > 0.5:
            raise PhantomError(
                f"amplitude solve failed to reach targets (residuals {errs.tolist()})"
            )

    def _measure_ground_truth(self) -> list[CurveAngle]:
        out = []
        for (angle, z_hi_tilt, z_lo_tilt), spec in zip(self._achieved(), self.config.curves):
            if spec.target_spa == 0:
                continue
            z_up, z_dn = max(z_hi_tilt, z_lo_tilt), min(z_hi_tilt, z_lo_tilt)
            out.append(CurveAngle(
                angle=angle,
                upper_level=self.z_to_level(z_up),
                lower_level=self.z_to_level(z_dn),
                direction=spec.direction,
            ))
        return out

    # ------------------------------------------------------------------
    # serialization

    def to_json(self, path: str | Path | None = None) -> str:
        cfg = asdict(self.config)
        z = np.arange(0.0, self.config.spine_length + 1.0, 1.0)
        doc = {
            "config": cfg,
            "centerline_pitch_mm": 1.0,
            "centerline_x": np.round(self.centerline_x(z), 6).tolist(),
            "ground_truth": [asdict(a) for a in self.ground_truth],
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "SpinePhantom":
        doc = json.loads(Path(path).read_text())
        cfg = doc["config"]
        cfg["curves"] = [CurveSpec(**c) for c in cfg["curves"]]
        return build_phantom(PhantomConfig(**cfg))


def build_phantom(config: PhantomConfig) -> SpinePhantom:
    """Construct a phantom whose analytic angles hit each curve's target SPA."""
    return SpinePhantom(config)


def ground_truth_spa(phantom: SpinePhantom) -> list[CurveAngle]:
    """Analytic SPA oracle: tilt-angle difference at the extremal levels."""
    return phantom._measure_ground_truth()

"""Synthetic B-mode frame rendering and scan recordings.

A frame images the plane spanned by the probe's lateral axis and beam axis.
Rendering is geometric: a bright skin line, a tissue background, bright
lamina bands, and a dark acoustic-shadow column under the spinous-process
tip, with optional multiplicative speckle. Columns whose probe-face gap to
the skin exceeds ``COUPLING_GAP_MM`` lose coupling and carry only the noise
floor, reproducing the black-spot artifact of lost skin contact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .phantom import SpinePhantom

COUPLING_GAP_MM = 1.0

# Rendering intensities
_TISSUE = 0.35
_SKIN = 0.9
_LAMINA = 0.75
_TIP_ECHO = 0.85

_SHADOW_HALFWIDTH_MM = 3.0
_LAMINA_TOP_MM = 1.5    # below the tip depth
_LAMINA_BOT_MM = 4.5
_RAYLEIGH_SCALE = 1.0 / math.sqrt(math.pi / 2.0)   # unit-mean Rayleigh


class RecordingError(ValueError):
    pass


@dataclass
class ImagingConfig:
    width_px: int = 640
    height_px: int = 480
    probe_width: float = 80.0    # mm
    depth: float = 60.0          # mm
    speckle_sigma: float = 0.25  # multiplicative noise scale; 0 disables
    shadow_contrast: float = 0.6
    noise_floor: float = 0.03
    frame_rate: float = 10.0     # Hz
    seed: int = 0

    @property
    def lateral_spacing(self) -> float:
        return self.probe_width / self.width_px

    @property
    def axial_spacing(self) -> float:
        return self.depth / self.height_px


@dataclass
class ProbePose:
    """Probe-face center position and orientation (radians)."""

    position: np.ndarray         # (x, y, z) mm of the face center
    pitch: float = 0.0           # about the lateral axis; beam tilts in (y, z)
    yaw: float = 0.0             # about the depth axis
    roll: float = 0.0            # not actuated; kept for the wire format
    timestamp: float = 0.0       # s

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(lateral_axis, beam_axis) unit vectors in world coordinates."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        lateral = np.array([cy, 0.0, -sy])
        beam = np.array([sy * sp, cp, cy * sp])
        return lateral, beam


@dataclass
class BModeFrame:
    pixels: np.ndarray           # (height, width) float32 in [0, 1]
    pose: ProbePose
    contact_fraction: float


@dataclass
class ScanRecording:
    frames: list[BModeFrame]
    config: ImagingConfig
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)


def _column_gaps(phantom: SpinePhantom, pose: ProbePose, cfg: ImagingConfig):
    """Per-column probe-face points and air gaps along the beam axis (mm)."""
    lateral, beam = pose.axes()
    cols = np.arange(cfg.width_px, dtype=float)
    u = (cols - cfg.width_px / 2.0) * cfg.lateral_spacing
    face = pose.position[None, :] + u[:, None] * lateral[None, :]
    fz = np.clip(face[:, 2], 0.0, phantom.config.spine_length)
    fx = np.clip(face[:, 0], -phantom.X_EXTENT, phantom.X_EXTENT)
    skin = phantom.skin_height(fz, fx)
    gaps = (skin - face[:, 1]) / max(beam[1], 1e-6)
    return u, face, gaps


def true_tip_column(phantom: SpinePhantom, pose: ProbePose, cfg: ImagingConfig) -> float:
    """Fractional column index of the true spinous tip under this pose."""
    lateral, beam = pose.axes()
    tip = phantom.spinous_tip(float(np.clip(pose.position[2], 0.0, phantom.config.spine_length)))
    u_tip = float(np.dot(tip - pose.position, lateral))
    return u_tip / cfg.lateral_spacing + cfg.width_px / 2.0


def render_frame(
    phantom: SpinePhantom,
    pose: ProbePose,
    cfg: ImagingConfig,
    frame_index: int | None = None,
) -> BModeFrame:
    """Render one frame. Deterministic for fixed (seed, frame_index, pose).

    When ``frame_index`` is omitted it is derived from the pose timestamp,
    so re-rendering the same pose gives bit-identical pixels.
    """
    if frame_index is None:
        frame_index = int(round(pose.timestamp * cfg.frame_rate))
    h, w = cfg.height_px, cfg.width_px
    rng = np.random.default_rng((cfg.seed, frame_index))

    u, face, gaps = _column_gaps(phantom, pose, cfg)
    coupled = gaps <= COUPLING_GAP_MM
    contact_fraction = float(np.mean(coupled))

    all_coupled = bool(coupled.all())
    if all_coupled:
        img = None  # body image below covers every column
    else:
        # uncoupled columns: noise floor only
        img = cfg.noise_floor * rng.uniform(0.0, 1.0, size=(h, w))

    if contact_fraction > 0.0:
        rows = np.arange(h, dtype=float)[:, None]
        r_skin = np.maximum(gaps, 0.0) / cfg.axial_spacing
        body = np.zeros((h, w))
        below_skin = rows >= r_skin[None, :]
        body[below_skin] = _TISSUE
        # skin line
        skin_line = (rows >= r_skin[None, :]) & (rows <= r_skin[None, :] + 2.0)
        body[skin_line] = _SKIN

        # spinous tip, lamina and shadow geometry
        _, beam = pose.axes()
        tip = phantom.spinous_tip(float(np.clip(pose.position[2], 0.0, phantom.config.spine_length)))
        d_tip = float(np.dot(tip - pose.position, beam))
        r_tip = d_tip / cfg.axial_spacing
        if 0.0 <= r_tip < h:
            lateral, _ = pose.axes()
            u_tip = float(np.dot(tip - pose.position, lateral))
            in_shadow = np.abs(u - u_tip) <= _SHADOW_HALFWIDTH_MM
            lam_top = r_tip + _LAMINA_TOP_MM / cfg.axial_spacing
            lam_bot = r_tip + _LAMINA_BOT_MM / cfg.axial_spacing
            lamina = (rows >= lam_top) & (rows <= lam_bot) & (~in_shadow)[None, :]
            body[lamina] = _LAMINA
            shadow = (rows >= r_tip) & in_shadow[None, :]
            body[shadow] = _TISSUE * (1.0 - cfg.shadow_contrast)
            tip_echo = (np.abs(rows - r_tip) <= 1.0) & in_shadow[None, :]
            body[tip_echo] = _TIP_ECHO

        if cfg.speckle_sigma > 0:
            factor = rng.rayleigh(scale=_RAYLEIGH_SCALE, size=(h, w))
            body = body * (1.0 + cfg.speckle_sigma * (factor - 1.0))
        body = np.clip(body, 0.0, 1.0)
        if all_coupled:
            img = body
        else:
            img[:, coupled] = body[:, coupled]

    return BModeFrame(
        pixels=img.astype(np.float32),
        pose=pose,
        contact_fraction=contact_fraction,
    )


def record_scan(
    poses: list[ProbePose],
    phantom: SpinePhantom,
    cfg: ImagingConfig,
) -> ScanRecording:
    """Render one frame per pose into a recording."""
    if not poses:
        raise RecordingError("empty pose list")
    times = [p.timestamp for p in poses]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise RecordingError("pose timestamps must be strictly increasing")
    frames = [render_frame(phantom, p, cfg, frame_index=i) for i, p in enumerate(poses)]
    return ScanRecording(frames=frames, config=cfg)


# ---------------------------------------------------------------------------
# PGM + CSV disk format

def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """8-bit binary PGM from a float image in [0, 1]."""
    data = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise RecordingError(f"{path}: not a binary PGM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / float(maxval)


_POSE_FIELDS = ["timestamp", "x", "y", "z", "roll", "pitch", "yaw", "contact_fraction"]


def save_recording(rec: ScanRecording, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "poses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_POSE_FIELDS)
        for i, fr in enumerate(rec.frames):
            write_pgm(out / f"frame_{i:05d}.pgm", fr.pixels)
            p = fr.pose
            writer.writerow([
                f"{p.timestamp:.6f}",
                f"{p.position[0]:.6f}", f"{p.position[1]:.6f}", f"{p.position[2]:.6f}",
                f"{p.roll:.9f}", f"{p.pitch:.9f}", f"{p.yaw:.9f}",
                f"{fr.contact_fraction:.6f}",
            ])
    meta = dict(rec.metadata)
    meta["imaging_config"] = asdict(rec.config)
    meta["n_frames"] = len(rec.frames)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_recording(in_dir: str | Path) -> ScanRecording:
    src = Path(in_dir)
    meta = json.loads((src / "metadata.json").read_text())
    cfg = ImagingConfig(**meta.pop("imaging_config"))
    meta.pop("n_frames", None)
    frames = []
    with open(src / "poses.csv", newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            pixels = read_pgm(src / f"frame_{i:05d}.pgm")
            pose = ProbePose(
                position=np.array([float(row["x"]), float(row["y"]), float(row["z"])]),
                roll=float(row["roll"]), pitch=float(row["pitch"]), yaw=float(row["yaw"]),
                timestamp=float(row["timestamp"]),
            )
            frames.append(BModeFrame(pixels, pose, float(row["contact_fraction"])))
    if not frames:
        raise RecordingError(f"{src}: no frames")
    return ScanRecording(frames=frames, config=cfg, metadata=meta)

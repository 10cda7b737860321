"""Simulated scanning: force PID, gain-scheduled pitch, Kalman following.

The robotic mode closes three loops on a virtual 30 Hz clock: a PID on the
contact force along the surface normal, a pitch rate proportional to the
sensed torque (gain scheduled by spinal region), and a lateral servo onto
the Kalman-fused spinous-process track. The manual mode replays a scripted
operator path (true centerline plus band-limited hand jitter and optional
fault events) at roughly twice the speed.

Contact model: the back is a linear spring; force = back_stiffness times
the mean positive penetration of the probe face, and the torque about the
probe's lateral axis comes from the pitch misalignment against the local
surface slope under load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .bmode import (
    BModeFrame,
    ImagingConfig,
    ProbePose,
    ScanRecording,
    render_frame,
)
from .detector import Detection, DetectorNoise, apply_noise, classify_region, detect
from .phantom import SpinePhantom

_FACE_SAMPLES = 21         # probe-face contact sample points across 80 mm
_FACE_U = np.linspace(-40.0, 40.0, _FACE_SAMPLES)
_TORQUE_ARM_M = 0.04       # m, lever arm converting pitch error to torque
_APPROACH_SPEED = 20.0     # mm/s
_MAX_NORMAL_STEP = 2.0     # mm per control tick
_MAX_LATERAL_RATE = 12.0   # mm/s
_LATERAL_GAIN = 3.0        # 1/s
_INTEGRATOR_LIMIT = 10.0   # N*s
_BOW_TAU = 1.0             # s, first-order lag of load-induced bending
_CONTACT_SETTLE_BAND = 0.5  # N
_LIFT_OFF_MM = 5.0


class ScanError(RuntimeError):
    pass


@dataclass
class ScanConfig:
    preset_force: float = 12.0                  # N, in [10, 15]
    scan_speed: float | None = None             # mm/s; default 4 robotic, 8 manual
    control_rate: float = 30.0                  # Hz
    pid_gains: tuple[float, float, float] = (0.3, 3.0, 0.0)   # kp, ki, kd
    k_pitch: dict[str, float] = field(default_factory=lambda: {
        "sacrum": 2.0, "lumbar": 2.0, "thoracic": 3.0,
    })
    kalman: tuple[float, float, float] = (0.05, 1.0, 10.0)    # q, r, gate_mm
    mode: str = "robotic"                       # "robotic" | "manual"
    jitter_amplitude: float = 2.0               # mm, manual hand jitter
    fault_events: list[dict] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if not (10.0 <= self.preset_force <= 15.0):
            raise ValueError("preset_force must lie in [10, 15] N")
        if self.k_pitch["thoracic"] < self.k_pitch["lumbar"]:
            raise ValueError("thoracic k_pitch must be >= lumbar k_pitch")
        if self.control_rate <= 0:
            raise ValueError("control_rate must be positive")
        if self.mode not in ("robotic", "manual"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def speed(self) -> float:
        if self.scan_speed is not None:
            return self.scan_speed
        return 4.0 if self.mode == "robotic" else 8.0


@dataclass
class RobotState:
    pose: ProbePose
    measured_force: float = 0.0
    measured_torque_x: float = 0.0
    phase: str = "approach"        # approach -> contact -> scanning -> done
    pid_integrator: float = 0.0
    prev_error: float = 0.0
    flags: list[str] = field(default_factory=list)


@dataclass
class SpineTrack:
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))  # (x, dx/dz)
    covariance: np.ndarray = field(default_factory=lambda: np.diag([100.0, 1.0]))
    history: list[tuple[float, float]] = field(default_factory=list)
    initialized: bool = False


def force_step(state: RobotState, cfg: ScanConfig, dt: float) -> float:
    """PID displacement command (mm) along the inward normal.

    Positive output pushes the probe toward the skin. A NaN force reading
    trips the safety stop: the phase goes to "done" and the command is 0.
    """
    if math.isnan(state.measured_force):
        state.phase = "done"
        state.flags.append("safety_stop")
        return 0.0
    kp, ki, kd = cfg.pid_gains
    err = cfg.preset_force - state.measured_force
    state.pid_integrator = float(np.clip(
        state.pid_integrator + err * dt, -_INTEGRATOR_LIMIT, _INTEGRATOR_LIMIT))
    deriv = (err - state.prev_error) / dt
    state.prev_error = err
    cmd = kp * err + ki * state.pid_integrator + kd * deriv
    return float(np.clip(cmd, -_MAX_NORMAL_STEP, _MAX_NORMAL_STEP))


def pitch_step(m_x: float, region: str, cfg: ScanConfig) -> float:
    """Pitch rate r_x = -k_pitch[region] * m_x (rad/s)."""
    return -cfg.k_pitch[region] * m_x


def kalman_step(
    track: SpineTrack,
    z: float,
    detection: Detection | None,
    cfg: ScanConfig,
) -> SpineTrack:
    """Constant-velocity predict in z, gated position update on detection."""
    q, r, gate = cfg.kalman
    if track.history and z <= track.history[-1][0]:
        raise ValueError("kalman_step requires strictly increasing z")

    if not track.initialized:
        if detection is None:
            return track
        state = np.array([detection.lateral_mm, 0.0])
        cov = np.diag([r ** 2, 1.0])
        return SpineTrack(state, cov, track.history + [(z, float(state[0]))], True)

    dz = z - track.history[-1][0]
    F = np.array([[1.0, dz], [0.0, 1.0]])
    Q = q * np.array([[dz ** 3 / 3.0, dz ** 2 / 2.0], [dz ** 2 / 2.0, dz]])
    x = F @ track.state
    P = F @ track.covariance @ F.T + Q

    if detection is not None:
        innov = detection.lateral_mm - x[0]
        if abs(innov) <= gate:
            S = P[0, 0] + r ** 2
            K = P[:, 0] / S
            x = x + K * innov
            P = P - np.outer(K, P[0, :])
            P = 0.5 * (P + P.T)
    return SpineTrack(x, P, track.history + [(z, float(x[0]))], True)


# ---------------------------------------------------------------------------
# contact physics

def _probe_contact(phantom: SpinePhantom, pose: ProbePose):
    """(force N, mean gap mm, clamp mm) of the rigid probe face on the spring back."""
    lateral, beam = pose.axes()
    pts = pose.position[None, :] + _FACE_U[:, None] * lateral[None, :]
    pz = np.clip(pts[:, 2], 0.0, phantom.config.spine_length)
    px = np.clip(pts[:, 0], -phantom.X_EXTENT, phantom.X_EXTENT)
    skin = phantom.skin_height(pz, px)
    obstacle = phantom.obstacle_height(pz, px)
    # rigid clamp: the face may not pass any obstacle
    over = pts[:, 1] - obstacle
    clamp = float(np.max(over))
    if clamp > 0:
        pts[:, 1] -= clamp
    penetration = np.maximum(0.0, pts[:, 1] - skin)
    force = phantom.config.back_stiffness * float(np.mean(penetration))
    return force, clamp if clamp > 0 else 0.0


def _surface_pitch(phantom: SpinePhantom, z: float, x: float) -> float:
    h = 1.0
    zl = max(0.0, z - h)
    zr = min(phantom.config.spine_length, z + h)
    slope = (float(phantom.skin_height(zr, x)) - float(phantom.skin_height(zl, x))) / (zr - zl)
    return -math.atan(slope)


def _band_limited_noise(rng, n: int, amplitude: float, smooth: int) -> np.ndarray:
    w = rng.normal(0.0, 1.0, n + 2 * smooth)
    kernel = np.ones(smooth) / smooth
    s = np.convolve(w, kernel, mode="same")[smooth:smooth + n]
    peak = max(np.max(np.abs(s)), 1e-9)
    return amplitude * s / peak


# ---------------------------------------------------------------------------
# scan loops

def run_scan(
    phantom: SpinePhantom,
    scan_cfg: ScanConfig,
    img_cfg: ImagingConfig,
    detector_noise: DetectorNoise | None = None,
) -> ScanRecording:
    """Execute one scan and return its recording (frames + control traces)."""
    scan_cfg.validate()
    if scan_cfg.mode == "manual":
        return _run_manual(phantom, scan_cfg, img_cfg)
    return _run_robotic(phantom, scan_cfg, img_cfg, detector_noise)


def _run_robotic(phantom, scan_cfg, img_cfg, detector_noise):
    dt = 1.0 / scan_cfg.control_rate
    frame_interval = 1.0 / img_cfg.frame_rate
    speed = scan_cfg.speed()
    L = phantom.config.spine_length

    z, x = 0.0, 0.0
    y = float(phantom.skin_height(0.0, 0.0)) - 20.0
    pitch = _surface_pitch(phantom, 0.0, 0.0)
    state = RobotState(pose=ProbePose(np.array([x, y, z]), pitch=pitch))
    track = SpineTrack()
    bow_amp = 0.0
    render_phantom = phantom

    frames: list[BModeFrame] = []
    force_trace, torque_trace, rx_trace, region_trace = [], [], [], []
    flags: list[str] = []
    fault_spans: list[tuple[float, float]] = []

    t = 0.0
    next_frame_t = 0.0
    frame_idx = 0
    settle_ticks = 0
    contact_loss_frames = 0
    max_t = (L / speed) + 30.0  # approach/settle allowance

    while state.phase != "done" and t < max_t:
        pose = ProbePose(np.array([x, y, z]), pitch=pitch, timestamp=t)
        force, clamp = _probe_contact(render_phantom, pose)
        if clamp > 0:
            # rigid scapula ridge: back the probe off and hold it there
            y -= clamp
            pose = ProbePose(np.array([x, y, z]), pitch=pitch, timestamp=t)
            if "scapula_contact_limited" not in flags:
                flags.append("scapula_contact_limited")
        state.pose = pose
        state.measured_force = force

        region = classify_region(None, z, phantom.region_boundaries,
                                 detector_noise, frame_index=len(force_trace))
        pitch_target = _surface_pitch(render_phantom, z, x)
        m_x = force * _TORQUE_ARM_M * (pitch - pitch_target)
        state.measured_torque_x = m_x

        if state.phase == "approach":
            if force > 0.5:
                state.phase = "contact"
            else:
                y += _APPROACH_SPEED * dt
        elif state.phase == "contact":
            y += force_step(state, scan_cfg, dt)
            if abs(force - scan_cfg.preset_force) < _CONTACT_SETTLE_BAND:
                settle_ticks += 1
                if settle_ticks >= int(0.5 * scan_cfg.control_rate):
                    state.phase = "scanning"
                    t = 0.0
                    next_frame_t = 0.0
            else:
                settle_ticks = 0
        elif state.phase == "scanning":
            y += force_step(state, scan_cfg, dt)
            r_x = pitch_step(m_x, region, scan_cfg)
            pitch += r_x * dt
            if track.initialized:
                step = _LATERAL_GAIN * (track.state[0] - x) * dt
                x += float(np.clip(step, -_MAX_LATERAL_RATE * dt, _MAX_LATERAL_RATE * dt))
            z += speed * dt

            force_trace.append(force)
            torque_trace.append(m_x)
            rx_trace.append(r_x)
            region_trace.append(region)

            if t >= next_frame_t - 1e-9:
                # load-induced bending tracked with a first-order lag
                if phantom.config.torso_compliance > 0:
                    target = phantom.bow_amplitude_for_force(force)
                    bow_amp += (target - bow_amp) * min(1.0, frame_interval / _BOW_TAU)
                    render_phantom = phantom.with_lumbar_bow(bow_amp)
                frame = render_frame(render_phantom, pose, img_cfg, frame_index=frame_idx)
                if frame.contact_fraction < 1.0:
                    contact_loss_frames += 1
                    if not fault_spans or z - fault_spans[-1][1] > 5.0:
                        fault_spans.append((z, z))
                    else:
                        fault_spans[-1] = (fault_spans[-1][0], z)
                det = detect(frame)
                if det is not None and detector_noise is not None:
                    det = apply_noise(det, detector_noise, frame_index=frame_idx)
                if det is not None:
                    # detection offset is probe-relative; track runs in world x
                    det = replace(det, lateral_mm=x + det.lateral_mm)
                try:
                    track = kalman_step(track, z, det, scan_cfg)
                except ValueError:
                    pass  # duplicate z on the very first tick
                frames.append(frame)
                frame_idx += 1
                next_frame_t += frame_interval

            if z >= L:
                state.phase = "done"
        t += dt

    if not frames:
        raise ScanError("robotic scan produced no frames")
    if contact_loss_frames:
        flags.append("coupling_loss")

    rec = ScanRecording(frames=frames, config=img_cfg)
    rec.metadata = {
        "mode": "robotic",
        "scan_config": _scan_cfg_dict(scan_cfg),
        "flags": flags,
        "fault_spans_z": [list(s) for s in fault_spans],
        "contact_loss_frames": contact_loss_frames,
        "force_trace": [round(v, 6) for v in force_trace],
        "torque_trace": [round(v, 9) for v in torque_trace],
        "rx_trace": [round(v, 9) for v in rx_trace],
        "region_trace": region_trace,
        "track_history": [[round(a, 4), round(b, 4)] for a, b in track.history],
        "duration_s": round(frames[-1].pose.timestamp - frames[0].pose.timestamp, 3),
    }
    return rec


def _run_manual(phantom, scan_cfg, img_cfg):
    speed = scan_cfg.speed()
    L = phantom.config.spine_length
    frame_interval = 1.0 / img_cfg.frame_rate
    n_frames = int(L / speed * img_cfg.frame_rate)
    rng = np.random.default_rng((scan_cfg.seed, 2))

    jitter = _band_limited_noise(rng, n_frames, scan_cfg.jitter_amplitude,
                                 smooth=max(3, int(img_cfg.frame_rate)))
    force_noise = _band_limited_noise(rng, n_frames, 2.0,
                                      smooth=max(3, int(img_cfg.frame_rate)))

    frames = []
    force_trace = []
    for i in range(n_frames):
        t = i * frame_interval
        z = min(speed * t, L)
        x = float(phantom.centerline_x(z)) + float(jitter[i])
        force = scan_cfg.preset_force + float(force_noise[i])
        penetration = force / phantom.config.back_stiffness
        y = float(phantom.skin_height(z, x)) + penetration
        pitch = _surface_pitch(phantom, z, x) + 0.02 * float(jitter[i]) / max(scan_cfg.jitter_amplitude, 1e-9)
        for ev in scan_cfg.fault_events:
            if ev["t_start"] <= t < ev["t_start"] + ev["duration"]:
                if ev["kind"] == "lift_off":
                    y -= penetration + _LIFT_OFF_MM
                    force = 0.0
                elif ev["kind"] == "wander":
                    x += ev.get("amplitude_mm", 15.0)
        pose = ProbePose(np.array([x, y, z]), pitch=pitch, timestamp=t)
        frames.append(render_frame(phantom, pose, img_cfg, frame_index=i))
        force_trace.append(force)

    if not frames:
        raise ScanError("manual scan produced no frames")
    rec = ScanRecording(frames=frames, config=img_cfg)
    rec.metadata = {
        "mode": "manual",
        "scan_config": _scan_cfg_dict(scan_cfg),
        "flags": ["coupling_loss"] if any(f.contact_fraction < 1.0 for f in frames) else [],
        "fault_events": scan_cfg.fault_events,
        "force_trace": [round(v, 6) for v in force_trace],
        "duration_s": round(frames[-1].pose.timestamp, 3),
    }
    return rec


def _scan_cfg_dict(cfg: ScanConfig) -> dict:
    d = asdict(cfg)
    d["scan_speed"] = cfg.speed()
    return d

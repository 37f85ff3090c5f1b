"""Self-calibration of the motor-to-joint transmission map.

Tendon-driven joints have no absolute joint encoders, so the affine map
between motor shaft angle and joint angle has to be recovered from the
mechanics themselves. Each joint is swept slowly against both of its
mechanical end stops under a reduced current limit; a stall (sustained
high current while the shaft stays put) marks an end stop. The shaft
position at the flexion stop is bound to the upper end of the range of
motion and the extension stop to the lower end, which yields the linear
map

    motor_pos = m_min + ratio * (joint_deg - theta_min)

with ``ratio`` in shaft radians per joint degree, signed by the tendon
routing direction. Slack in the tendon pair makes each stop read half a
deadband beyond the true stop, so the recovered ratio carries a small,
bounded overestimate; downstream consumers treat it as exact.

Profiles serialize to JSON and are versioned both by file format and by
the hand configuration they were measured against.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Mapping, Optional

from .hand_model import HandModel
from .motor_bus import MotorBackend

PROFILE_FORMAT_VERSION = 1

# Factory ceiling the servos are returned to after a calibration sweep.
DEFAULT_CURRENT_LIMIT_MA = 600.0

ProgressFn = Callable[[dict], None]


class CalibrationError(RuntimeError):
    """A sweep failed; carries the joint that could not be calibrated."""

    def __init__(self, message: str, joint: Optional[str] = None):
        super().__init__(message)
        self.joint = joint


class ProfileError(ValueError):
    """A stored profile is malformed, inconsistent, or incompatible."""


@dataclass(frozen=True)
class StallDetectorConfig:
    """Thresholds that define an end-stop stall.

    A stall is declared once the phase current has stayed at or above
    ``current_threshold_ma`` for ``window_seconds`` while the shaft moved
    less than ``position_epsilon_rad`` over the most recent window.
    """

    current_threshold_ma: float = 350.0
    window_seconds: float = 0.15
    position_epsilon_rad: float = 0.01


@dataclass(frozen=True)
class CalibrationConfig:
    """Tunables for the end-stop sweep procedure."""

    sweep_speed_rad_s: float = 1.5
    calibration_current_ma: float = 450.0
    settle_timeout_s: float = 30.0
    step_dt: float = 0.02
    min_span_rad: float = 0.2
    stall: StallDetectorConfig = field(default_factory=StallDetectorConfig)


@dataclass(frozen=True)
class JointCalibration:
    """Recovered affine map for one joint.

    Attributes:
        joint: Joint name from the hand configuration.
        motor_id: Bus id of the actuating servo.
        theta_min_deg: Joint angle bound to ``m_min`` (extension limit).
        theta_max_deg: Joint angle bound to ``m_max`` (flexion limit).
        m_min: Shaft position measured at the extension end stop, rad.
        m_max: Shaft position measured at the flexion end stop, rad.
        ratio: Shaft radians per joint degree, signed.
    """

    joint: str
    motor_id: int
    theta_min_deg: float
    theta_max_deg: float
    m_min: float
    m_max: float
    ratio: float


@dataclass(frozen=True)
class CalibrationProfile:
    """Full-hand calibration result keyed by joint name."""

    format_version: int
    hand_model_version: int
    calibrated_at: str
    joints: Mapping[str, JointCalibration]

    def joint(self, name: str) -> JointCalibration:
        return self.joints[name]


def joint_to_motor(cal: JointCalibration, joint_deg: float) -> float:
    """Maps a joint angle in degrees to a motor shaft position in radians."""
    return cal.m_min + cal.ratio * (joint_deg - cal.theta_min_deg)


def motor_to_joint(cal: JointCalibration, motor_pos: float) -> tuple[float, bool]:
    """Maps a shaft position back to a joint angle.

    Returns:
        ``(joint_deg, out_of_range)`` where the flag is set when the
        angle falls outside the calibrated range of motion. The angle is
        returned unclamped so callers can see how far out it is.
    """
    joint_deg = cal.theta_min_deg + (motor_pos - cal.m_min) / cal.ratio
    out = (
        joint_deg < cal.theta_min_deg - 1e-9
        or joint_deg > cal.theta_max_deg + 1e-9
    )
    return joint_deg, out


class StallDetector:
    """Declares a stall when current stays high while the shaft stays put."""

    def __init__(self, config: StallDetectorConfig):
        self._cfg = config
        self._window: deque[tuple[float, float]] = deque()
        self._run_start: Optional[float] = None

    def update(self, t: float, position: float, current: float) -> bool:
        """Feeds one sample; returns True once the stall criterion holds."""
        cfg = self._cfg
        if current < cfg.current_threshold_ma:
            self._run_start = None
            self._window.clear()
            return False
        if self._run_start is None:
            self._run_start = t
        self._window.append((t, position))
        while self._window[0][0] < t - cfg.window_seconds:
            self._window.popleft()
        if t - self._run_start < cfg.window_seconds:
            return False
        positions = [p for _, p in self._window]
        return max(positions) - min(positions) < cfg.position_epsilon_rad


def _emit(progress: Optional[ProgressFn], **payload) -> None:
    if progress is not None:
        progress(payload)


def _sweep_to_stall(
    backend: MotorBackend,
    motor_id: int,
    direction: float,
    config: CalibrationConfig,
    joint_name: str,
    phase: str,
) -> float:
    """Ramps the goal at constant speed until the shaft stalls.

    Returns:
        Shaft position at the stall.

    Raises:
        CalibrationError: no stall within the settle timeout, which is
            what a detached or slack tendon looks like from the bus.
    """
    detector = StallDetector(config.stall)
    t0 = backend.now()
    start = backend.read_sample(motor_id).position
    while True:
        t = backend.now() - t0
        if t > config.settle_timeout_s:
            raise CalibrationError(
                f"{joint_name}: no end stop found during {phase} within "
                f"{config.settle_timeout_s:.0f} s; tendon may be detached",
                joint=joint_name,
            )
        backend.write_goal_position(
            motor_id, start + direction * config.sweep_speed_rad_s * t
        )
        backend.advance(config.step_dt)
        sample = backend.read_sample(motor_id)
        if detector.update(backend.now() - t0, sample.position, sample.current):
            return sample.position


def _relax(backend: MotorBackend, motor_id: int, position: float, config: CalibrationConfig) -> None:
    # Park the goal on the stalled position so the current decays before
    # the next sweep starts from a clean baseline.
    backend.write_goal_position(motor_id, position)
    settle = 0.3
    for _ in range(max(1, int(settle / config.step_dt))):
        backend.advance(config.step_dt)


def calibrate_joint(
    backend: MotorBackend,
    model: HandModel,
    joint_name: str,
    config: Optional[CalibrationConfig] = None,
    progress: Optional[ProgressFn] = None,
) -> JointCalibration:
    """Calibrates a single joint by sweeping both end stops.

    The flexion-side stop is swept first (in the joint's declared tendon
    direction), then the extension-side stop. The joint is left parked at
    the middle of its measured shaft range with the factory current limit
    restored.

    Raises:
        CalibrationError: a sweep timed out or the measured span between
            stops is implausibly small.
    """
    config = config or CalibrationConfig()
    joint = model.joint(joint_name)
    rom_lo, rom_hi = model.rom(joint_name)
    backend.set_current_limit(joint.motor_id, config.calibration_current_ma)
    try:
        _emit(progress, joint=joint_name, phase="flexion_sweep")
        m_at_max = _sweep_to_stall(
            backend, joint.motor_id, float(joint.direction), config,
            joint_name, "the flexion sweep",
        )
        _relax(backend, joint.motor_id, m_at_max, config)
        _emit(progress, joint=joint_name, phase="extension_sweep")
        m_at_min = _sweep_to_stall(
            backend, joint.motor_id, -float(joint.direction), config,
            joint_name, "the extension sweep",
        )
        _relax(backend, joint.motor_id, m_at_min, config)
    finally:
        backend.set_current_limit(joint.motor_id, DEFAULT_CURRENT_LIMIT_MA)

    span = m_at_max - m_at_min
    if abs(span) < config.min_span_rad:
        raise CalibrationError(
            f"{joint_name}: shaft travel of {abs(span):.4f} rad between end "
            "stops is too small to be a real range of motion",
            joint=joint_name,
        )
    ratio = span / (rom_hi - rom_lo)
    cal = JointCalibration(
        joint=joint_name,
        motor_id=joint.motor_id,
        theta_min_deg=rom_lo,
        theta_max_deg=rom_hi,
        m_min=m_at_min,
        m_max=m_at_max,
        ratio=ratio,
    )
    # Park mid-range so the joint holds a neutral pose while its
    # neighbours calibrate.
    backend.write_goal_position(joint.motor_id, 0.5 * (m_at_min + m_at_max))
    for _ in range(int(0.4 / config.step_dt)):
        backend.advance(config.step_dt)
    _emit(progress, joint=joint_name, phase="done", ratio=ratio)
    return cal


def calibration_order(model: HandModel) -> list[str]:
    """Joint sweep order: distal to proximal per finger, wrist last.

    Distal joints are calibrated first so their parked mid-range poses do
    not load the proximal tendons while those are being swept.
    """
    ordered: list[str] = []
    for chain in model.chains:
        ordered.extend(reversed(chain.joint_order))
    seen = set(ordered)
    ordered.extend(j.name for j in model.joints if j.name not in seen)
    return ordered


def calibrate_all(
    backend: MotorBackend,
    model: HandModel,
    config: Optional[CalibrationConfig] = None,
    progress: Optional[ProgressFn] = None,
) -> CalibrationProfile:
    """Calibrates every joint and returns a complete profile.

    All-or-nothing: if any joint fails, the error propagates and no
    profile is produced.
    """
    config = config or CalibrationConfig()
    order = calibration_order(model)
    results: dict[str, JointCalibration] = {}
    for i, name in enumerate(order):
        _emit(progress, joint=name, phase="start", index=i, total=len(order))
        results[name] = calibrate_joint(backend, model, name, config, progress)
    return CalibrationProfile(
        format_version=PROFILE_FORMAT_VERSION,
        hand_model_version=model.version,
        calibrated_at=datetime.now(timezone.utc).isoformat(),
        joints=results,
    )


def profile_to_dict(profile: CalibrationProfile) -> dict:
    return {
        "format_version": profile.format_version,
        "hand_model_version": profile.hand_model_version,
        "calibrated_at": profile.calibrated_at,
        "joints": {
            name: {
                "motor_id": cal.motor_id,
                "theta_min_deg": cal.theta_min_deg,
                "theta_max_deg": cal.theta_max_deg,
                "m_min": cal.m_min,
                "m_max": cal.m_max,
                "ratio": cal.ratio,
            }
            for name, cal in profile.joints.items()
        },
    }


def profile_from_dict(data: dict) -> CalibrationProfile:
    """Rebuilds a profile from parsed JSON, validating as it goes.

    Raises:
        ProfileError: unknown format version, missing fields, or a stored
            ratio that disagrees with the stored end points.
    """
    if not isinstance(data, dict):
        raise ProfileError("profile root must be an object")
    version = data.get("format_version")
    if version != PROFILE_FORMAT_VERSION:
        raise ProfileError(
            f"unsupported profile format_version {version!r}; "
            f"this build reads version {PROFILE_FORMAT_VERSION}"
        )
    for key in ("hand_model_version", "calibrated_at", "joints"):
        if key not in data:
            raise ProfileError(f"profile is missing required field '{key}'")
    joints: dict[str, JointCalibration] = {}
    for name, entry in data["joints"].items():
        try:
            cal = JointCalibration(
                joint=name,
                motor_id=int(entry["motor_id"]),
                theta_min_deg=float(entry["theta_min_deg"]),
                theta_max_deg=float(entry["theta_max_deg"]),
                m_min=float(entry["m_min"]),
                m_max=float(entry["m_max"]),
                ratio=float(entry["ratio"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError(f"joint '{name}': bad calibration entry ({exc})")
        span_deg = cal.theta_max_deg - cal.theta_min_deg
        if span_deg <= 0:
            raise ProfileError(f"joint '{name}': empty angular range")
        implied = (cal.m_max - cal.m_min) / span_deg
        if not math.isfinite(cal.ratio) or cal.ratio == 0:
            raise ProfileError(f"joint '{name}': ratio must be finite and nonzero")
        if abs(implied - cal.ratio) > 1e-6 * max(1.0, abs(cal.ratio)):
            raise ProfileError(
                f"joint '{name}': stored ratio {cal.ratio} disagrees with "
                f"end points (implies {implied})"
            )
        joints[name] = cal
    return CalibrationProfile(
        format_version=version,
        hand_model_version=data["hand_model_version"],
        calibrated_at=str(data["calibrated_at"]),
        joints=joints,
    )


def save_profile(profile: CalibrationProfile, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile_to_dict(profile), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_profile(path: str | os.PathLike) -> CalibrationProfile:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"profile is not valid JSON: {exc}")
    return profile_from_dict(data)

"""Joint-space control loop on top of a calibrated motor bus.

The controller owns a target vector in joint degrees and, on every tick,
slews an internal setpoint toward it at a bounded speed, maps the setpoint
through the calibration profile, and writes motor goals for the joints
whose commands actually changed. All angles at this layer are joint
degrees; motor shaft radians never leak past the profile mapping.

Also provided: pure trajectory generators (single-joint sine, whole-hand
grasp cycle) and a tendon slack probe that reverses a motor slowly until
the joint starts following again.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .calibration import CalibrationProfile, JointCalibration, ProfileError
from .hand_model import HandModel, UnknownJointError
from .motor_bus import MotorBackend


class ControlError(RuntimeError):
    """A control-layer operation could not be carried out."""


class NotCalibratedError(ControlError):
    """Raised when motion is requested before a profile is installed."""


@dataclass(frozen=True)
class ControllerConfig:
    """Control loop parameters.

    Attributes:
        loop_rate_hz: Tick frequency; one backend step per tick.
        max_joint_speed_dps: Setpoint slew limit per joint, deg/s.
    """

    loop_rate_hz: float = 100.0
    max_joint_speed_dps: float = 360.0


@dataclass(frozen=True)
class SineSpec:
    """Single-joint sinusoid: offset + amplitude * sin(2*pi*f*t).

    ``offset_deg=None`` centers the motion on the middle of the joint's
    range of motion.
    """

    joint: str
    frequency_hz: float
    amplitude_deg: float
    duration_s: float
    offset_deg: Optional[float] = None


@dataclass(frozen=True)
class GraspCycleSpec:
    """Whole-hand open/close exercise pattern.

    Flexion joints run a trapezoidal open-grasp-open cycle every
    ``finger_period_s``; abduction joints hold zero; the wrist slews
    between +/- ``wrist_amplitude_deg``, flipping sign once per
    ``wrist_period_s``.
    """

    duration_s: float
    finger_period_s: float = 4.0
    wrist_period_s: float = 16.0
    wrist_amplitude_deg: float = 40.0
    grasp_fraction: float = 0.8
    slew_dps: float = 150.0


TrajectorySpec = Union[SineSpec, GraspCycleSpec]


@dataclass(frozen=True)
class SlackEstimate:
    """Result of a tendon slack probe.

    Attributes:
        joint: Probed joint.
        slack_rad: Estimated play width at the motor shaft, radians.
        travel_rad: Raw shaft reversal travel until the joint re-engaged.
        joint_moved_deg: Joint displacement consumed by the detection
            threshold, already subtracted out of ``slack_rad``.
    """

    joint: str
    slack_rad: float
    travel_rad: float
    joint_moved_deg: float


def _sine_series(spec: SineSpec, model: HandModel, t: np.ndarray) -> np.ndarray:
    lo, hi = model.rom(spec.joint)
    offset = 0.5 * (lo + hi) if spec.offset_deg is None else spec.offset_deg
    if spec.amplitude_deg < 0:
        raise ValueError("amplitude must be non-negative")
    if spec.frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    if offset - spec.amplitude_deg < lo - 1e-9 or offset + spec.amplitude_deg > hi + 1e-9:
        raise ValueError(
            f"{spec.joint}: sine sweep [{offset - spec.amplitude_deg:.1f}, "
            f"{offset + spec.amplitude_deg:.1f}] deg exceeds the range of "
            f"motion [{lo:.1f}, {hi:.1f}]"
        )
    return offset + spec.amplitude_deg * np.sin(2.0 * math.pi * spec.frequency_hz * t)


def _trapezoid_cycle(t: np.ndarray, period: float, high: float, slew_dps: float) -> np.ndarray:
    # Rise to `high`, hold, fall back to zero, hold; one cycle per period.
    phase = np.mod(t, period)
    half = period / 2.0
    rising = np.minimum(phase * slew_dps, high)
    falling = np.maximum(high - (phase - half) * slew_dps, 0.0)
    return np.where(phase < half, rising, falling)


def _wrist_toggle(t: np.ndarray, period: float, amplitude: float, slew_dps: float) -> np.ndarray:
    # Slews 0 -> +A in the first cycle, then alternates +A <-> -A.
    k = np.floor(t / period).astype(int)
    target = amplitude * np.where(k % 2 == 0, 1.0, -1.0)
    start = np.where(k == 0, 0.0, -target)
    span = target - start
    progress = np.minimum((t - k * period) * slew_dps, np.abs(span))
    return start + np.sign(span) * progress


def generate_trajectory(
    model: HandModel, spec: TrajectorySpec, rate_hz: float
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Samples a trajectory on the control grid.

    Args:
        model: Hand description (for ranges of motion and joint roles).
        spec: What to play.
        rate_hz: Sample rate; sample k sits at t = k / rate_hz.

    Returns:
        ``(times, series)`` where ``series`` maps joint names to target
        arrays the same length as ``times``. A 10 s trajectory at 100 Hz
        has exactly 1000 samples.
    """
    if rate_hz <= 0:
        raise ValueError("rate must be positive")
    if spec.duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(spec.duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    if isinstance(spec, SineSpec):
        model.joint(spec.joint)  # raises UnknownJointError early
        return t, {spec.joint: _sine_series(spec, model, t)}
    if isinstance(spec, GraspCycleSpec):
        series: dict[str, np.ndarray] = {}
        for joint in model.joints:
            if joint.kind == "WRIST":
                series[joint.name] = _wrist_toggle(
                    t, spec.wrist_period_s, spec.wrist_amplitude_deg, spec.slew_dps
                )
            elif joint.axis == "abduction":
                series[joint.name] = np.zeros_like(t)
            else:
                high = spec.grasp_fraction * joint.rom_max_deg
                series[joint.name] = _trapezoid_cycle(
                    t, spec.finger_period_s, high, spec.slew_dps
                )
        return t, series
    raise TypeError(f"unknown trajectory spec {type(spec).__name__}")


class Controller:
    """Rate-limited joint-space position controller."""

    def __init__(
        self,
        backend: MotorBackend,
        model: HandModel,
        config: Optional[ControllerConfig] = None,
    ):
        self._backend = backend
        self._model = model
        self._cfg = config or ControllerConfig()
        self._names = list(model.joint_names())
        self._index = {name: i for i, name in enumerate(self._names)}
        self._rom_lo = np.array([model.rom(n)[0] for n in self._names])
        self._rom_hi = np.array([model.rom(n)[1] for n in self._names])
        self._motor_ids = [model.joint(n).motor_id for n in self._names]
        self._profile: Optional[CalibrationProfile] = None
        self._m_min = np.zeros(len(self._names))
        self._ratio = np.ones(len(self._names))
        self._targets = np.zeros(len(self._names))
        self._setpoints = np.zeros(len(self._names))

    @property
    def model(self) -> HandModel:
        return self._model

    @property
    def backend(self) -> MotorBackend:
        return self._backend

    @property
    def config(self) -> ControllerConfig:
        return self._cfg

    @property
    def calibrated(self) -> bool:
        return self._profile is not None

    @property
    def profile(self) -> Optional[CalibrationProfile]:
        return self._profile

    def install_profile(self, profile: CalibrationProfile) -> None:
        """Adopts a calibration profile and syncs setpoints to the hand.

        Raises:
            ProfileError: profile was measured against a different hand
                configuration version or does not cover every joint.
        """
        if profile.hand_model_version != self._model.version:
            raise ProfileError(
                f"profile was calibrated against hand model version "
                f"{profile.hand_model_version}, this hand is version "
                f"{self._model.version}"
            )
        missing = [n for n in self._names if n not in profile.joints]
        if missing:
            raise ProfileError(f"profile lacks joints: {', '.join(missing)}")
        self._profile = profile
        for i, name in enumerate(self._names):
            cal = profile.joints[name]
            self._m_min[i] = cal.m_min
            self._ratio[i] = cal.ratio
        # Adopt the hand where it stands: no motion on install.
        for i, name in enumerate(self._names):
            sample = self._backend.read_sample(self._motor_ids[i])
            angle = self._motor_to_joint_deg(i, sample.position)
            self._setpoints[i] = min(max(angle, self._rom_lo[i]), self._rom_hi[i])
        self._targets[:] = self._setpoints

    def _joint_to_motor_rad(self, i: int, deg: float) -> float:
        return self._m_min[i] + self._ratio[i] * (deg - self._rom_lo[i])

    def _motor_to_joint_deg(self, i: int, motor_pos: float) -> float:
        return self._rom_lo[i] + (motor_pos - self._m_min[i]) / self._ratio[i]

    def _require_profile(self) -> None:
        if self._profile is None:
            raise NotCalibratedError(
                "no calibration profile installed; calibrate or load one first"
            )

    def set_joint_targets(self, targets: Mapping[str, float]) -> dict[str, float]:
        """Updates target angles for a subset of joints.

        Values are clamped to each joint's range of motion.

        Returns:
            The applied (possibly clamped) target per requested joint.

        Raises:
            NotCalibratedError: no profile installed.
            UnknownJointError: a name is not in the hand configuration.
            ValueError: a value is not a finite number.
        """
        self._require_profile()
        applied: dict[str, float] = {}
        staged: list[tuple[int, float]] = []
        for name, value in targets.items():
            if name not in self._index:
                raise UnknownJointError(name)
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"{name}: target must be finite, got {value!r}")
            i = self._index[name]
            clamped = min(max(value, self._rom_lo[i]), self._rom_hi[i])
            staged.append((i, clamped))
            applied[name] = clamped
        for i, value in staged:
            self._targets[i] = value
        return applied

    def jog(self, joint: str, delta_deg: float) -> float:
        """Nudges one joint's target by a relative amount.

        Returns:
            The new absolute target in degrees after clamping.
        """
        self._require_profile()
        if joint not in self._index:
            raise UnknownJointError(joint)
        current = self._targets[self._index[joint]]
        return self.set_joint_targets({joint: current + float(delta_deg)})[joint]

    def targets(self) -> dict[str, float]:
        return {n: float(self._targets[i]) for n, i in self._index.items()}

    def tick(self) -> None:
        """Advances one control period: slew setpoints, write, step."""
        dt = 1.0 / self._cfg.loop_rate_hz
        if self._profile is not None:
            max_step = self._cfg.max_joint_speed_dps * dt
            delta = np.clip(self._targets - self._setpoints, -max_step, max_step)
            moved = np.nonzero(delta != 0.0)[0]
            if moved.size:
                self._setpoints[moved] += delta[moved]
                for i in moved:
                    self._backend.write_goal_position(
                        self._motor_ids[i],
                        self._joint_to_motor_rad(i, self._setpoints[i]),
                    )
        self._backend.advance(dt)

    def run_for(self, seconds: float) -> None:
        ticks = max(1, int(round(seconds * self._cfg.loop_rate_hz)))
        for _ in range(ticks):
            self.tick()

    def run_trajectory(
        self,
        spec: TrajectorySpec,
        on_progress: Optional[Callable[[float], None]] = None,
        realtime: bool = False,
    ) -> None:
        """Plays a trajectory through the control loop.

        Args:
            spec: Trajectory to play.
            on_progress: Called with completed fraction about twice a
                second, and once with 1.0 at the end.
            realtime: Pace ticks against the wall clock instead of
                running the simulation flat out.
        """
        self._require_profile()
        rate = self._cfg.loop_rate_hz
        _, series = generate_trajectory(self._model, spec, rate)
        n = len(next(iter(series.values())))
        idx = [self._index[name] for name in series]
        columns = list(series.values())
        report_every = max(1, int(rate / 2))
        wall_start = time.monotonic()
        for k in range(n):
            for j, i in enumerate(idx):
                self._targets[i] = columns[j][k]
            self.tick()
            if realtime:
                lead = (k + 1) / rate - (time.monotonic() - wall_start)
                if lead > 0:
                    time.sleep(lead)
            if on_progress and (k + 1) % report_every == 0:
                on_progress((k + 1) / n)
        if on_progress:
            on_progress(1.0)

    def park(self, timeout_s: float = 20.0) -> None:
        """Brings every joint to 0 degrees and waits for convergence."""
        self._require_profile()
        self.set_joint_targets({n: 0.0 for n in self._names})
        worst = float(np.max(np.abs(self._setpoints - self._targets)))
        travel_s = worst / self._cfg.max_joint_speed_dps
        self.run_for(min(timeout_s, travel_s + 1.0))

    def telemetry_snapshot(self) -> dict:
        """One coherent reading of the whole hand.

        Joint angle estimates come from motor positions pushed back
        through the calibration map, so they carry slack-width error and
        are absent until a profile is installed.
        """
        joints: dict[str, dict] = {}
        for i, name in enumerate(self._names):
            sample = self._backend.read_sample(self._motor_ids[i])
            entry = {
                "motor_id": self._motor_ids[i],
                "position_rad": sample.position,
                "current_ma": sample.current,
                "temperature_c": sample.temperature,
            }
            if self._profile is not None:
                angle = self._motor_to_joint_deg(i, sample.position)
                entry["angle_deg"] = angle
                entry["target_deg"] = float(self._targets[i])
                entry["setpoint_deg"] = float(self._setpoints[i])
                entry["out_of_range"] = bool(
                    angle < self._rom_lo[i] - 1e-6 or angle > self._rom_hi[i] + 1e-6
                )
            joints[name] = entry
        snapshot = {
            "t": self._backend.now(),
            "calibrated": self.calibrated,
            "joints": joints,
        }
        tactile_read = getattr(self._backend, "tactile_read", None)
        if tactile_read is not None:
            tactile = {}
            for sensor in self._model.sensors:
                voltage, counts, touch = tactile_read(sensor.finger)
                tactile[sensor.finger] = {
                    "voltage_v": voltage,
                    "counts": counts,
                    "touch": touch,
                }
            snapshot["tactile"] = tactile
        return snapshot

    def tension_check(
        self, joints: Optional[Iterable[str]] = None
    ) -> dict[str, SlackEstimate]:
        """Probes tendon slack on the requested joints (default: all).

        The probed motors are returned to their pre-probe goals.
        """
        self._require_profile()
        names = list(joints) if joints is not None else list(self._names)
        for name in names:
            if name not in self._index:
                raise UnknownJointError(name)
        results: dict[str, SlackEstimate] = {}
        for name in names:
            i = self._index[name]
            results[name] = estimate_slack(
                self._backend, self._profile.joints[name]
            )
            # Re-assert the controller's own command after the probe.
            self._backend.write_goal_position(
                self._motor_ids[i], self._joint_to_motor_rad(i, self._setpoints[i])
            )
        self.run_for(1.0)
        return results


def estimate_slack(
    backend: MotorBackend,
    cal: JointCalibration,
    step_dt: float = 0.01,
    speed_rad_s: float = 0.25,
    engage_rad: float = 0.12,
    threshold_deg: float = 0.4,
    max_travel_rad: float = 0.2,
    reads_per_sample: int = 4,
) -> SlackEstimate:
    """Measures tendon play by reversing the motor until the joint follows.

    The motor is first driven ``engage_rad`` one way so the tendon is
    taut, then ramped back slowly. While the reversal stays inside the
    play band the joint encoder holds still; the shaft travel consumed
    before the joint moves again, minus the travel explained by the
    detection threshold itself, is the play width.

    Requires a backend with a ``read_joint_deg`` channel.

    Raises:
        ControlError: not enough headroom near the range limits, no joint
            encoder on this backend, or the joint never re-engaged
            (detached tendon).
    """
    read_joint = getattr(backend, "read_joint_deg", None)
    if read_joint is None:
        raise ControlError("backend has no joint angle channel to probe against")
    motor = cal.motor_id
    name = cal.joint

    def joint_deg() -> float:
        return sum(read_joint(name) for _ in range(reads_per_sample)) / reads_per_sample

    def ramp_to(goal: float) -> None:
        start = backend.read_sample(motor).position
        span = goal - start
        steps = max(1, int(abs(span) / (speed_rad_s * step_dt)))
        for k in range(1, steps + 1):
            backend.write_goal_position(motor, start + span * k / steps)
            backend.advance(step_dt)

    def settle(seconds: float = 0.5) -> None:
        for _ in range(int(seconds / step_dt)):
            backend.advance(step_dt)

    m0 = backend.read_sample(motor).position
    bound_lo, bound_hi = sorted((cal.m_min, cal.m_max))
    margin = engage_rad + max_travel_rad + 0.05
    if bound_hi - m0 >= margin:
        direction = 1.0
    elif m0 - bound_lo >= margin:
        direction = -1.0
    else:
        raise ControlError(
            f"{name}: not enough travel headroom near the range limits "
            "to probe slack"
        )

    ramp_to(m0 + direction * engage_rad)
    settle()
    ref_pos = backend.read_sample(motor).position
    ref_deg = joint_deg()

    goal = ref_pos
    travel = 0.0
    moved_deg = 0.0
    detected = False
    while travel < max_travel_rad:
        goal -= direction * speed_rad_s * step_dt
        backend.write_goal_position(motor, goal)
        backend.advance(step_dt)
        travel = abs(backend.read_sample(motor).position - ref_pos)
        moved_deg = abs(joint_deg() - ref_deg)
        if moved_deg > threshold_deg:
            detected = True
            break
    if not detected:
        # Leave the hand where the caller can still recover it.
        backend.write_goal_position(motor, m0)
        settle()
        raise ControlError(
            f"{name}: joint did not re-engage within {max_travel_rad} rad of "
            "reversal; tendon may be detached"
        )
    slack = max(0.0, travel - moved_deg * abs(cal.ratio))

    backend.write_goal_position(motor, m0)
    settle()
    return SlackEstimate(
        joint=name, slack_rad=slack, travel_rad=travel, joint_moved_deg=moved_deg
    )

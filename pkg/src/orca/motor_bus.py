"""Servo bus: wire framing, backend contract, and the in-process simulator.

Wire format (little-endian payloads):

    [0xFF 0xFF] [id:1] [len:1] [opcode:1] [payload:len-2] [checksum:1]

len counts opcode + payload + checksum; the checksum is the two's complement
of the byte sum over id..payload, so the sum of id..checksum is 0 mod 256.
Positions travel as signed 32-bit ticks (4096 ticks per revolution),
currents as signed 16-bit mA, temperatures as unsigned 8-bit degrees C.

The simulator reproduces the behaviors the rest of the stack is built
around: transport delay between a goal write and the start of motion, a
first-order lag toward the active goal, a symmetric backlash element of
full width slack_deadband between motor shaft and joint, slow drift of the
motor zero, hard stops at the joint's range of motion, and a current law
I = baseline + gain * |goal - shaft| saturating at the stall current (never
above the configured clamp). With a fixed seed and call sequence every
trajectory is bit-identical; Gaussian readback noise applies only to the
ground-truth joint channel used by the benchmarks, never to motor samples.
"""

from __future__ import annotations

import math
import struct
import threading
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .hand_model import HandModel
from .tactile import (
    ChannelFault,
    FsrModel,
    adc_read,
    classify_touch,
    divider_voltage,
)

TICKS_PER_REV = 4096
OP_WRITE_GOAL = 0x01
OP_READ_STATUS = 0x02
OP_PING = 0x03
_HEADER = b"\xff\xff"


class FrameError(ValueError):
    """Malformed, truncated, or corrupted wire frame."""


class UnknownMotorError(KeyError):
    """Command addressed to a motor id the backend does not own."""


@dataclass(frozen=True)
class MotorSample:
    motor_id: int
    timestamp: float  # seconds on the backend clock
    position: float  # motor shaft, radians
    current: float  # mA
    temperature: float  # degrees C


# ---------------------------------------------------------------------------
# Wire codec
# ---------------------------------------------------------------------------


def _checksum(body: bytes) -> int:
    return (-sum(body)) & 0xFF


def _build_frame(motor_id: int, opcode: int, payload: bytes) -> bytes:
    if not 0 <= motor_id <= 0xFF:
        raise FrameError(f"motor id {motor_id} does not fit one byte")
    if len(payload) + 2 > 0xFF:
        raise FrameError("payload too long")
    body = bytes((motor_id, len(payload) + 2, opcode)) + payload
    return _HEADER + body + bytes((_checksum(body),))


def rad_to_ticks(position_rad: float) -> int:
    ticks = round(position_rad * TICKS_PER_REV / math.tau)
    if not -(2**31) <= ticks < 2**31:
        raise FrameError(f"position {position_rad} rad overflows 32-bit ticks")
    return ticks


def ticks_to_rad(ticks: int) -> float:
    return ticks * math.tau / TICKS_PER_REV


def encode_goal(motor_id: int, position_rad: float) -> bytes:
    """Write-goal frame commanding a motor to a shaft position."""
    return _build_frame(motor_id, OP_WRITE_GOAL, struct.pack("<i", rad_to_ticks(position_rad)))


def encode_status(sample: MotorSample) -> bytes:
    """Status reply frame (position, current, temperature); timestamp not carried."""
    current = round(sample.current)
    temperature = round(sample.temperature)
    if not -(2**15) <= current < 2**15:
        raise FrameError(f"current {sample.current} mA overflows 16 bits")
    if not 0 <= temperature <= 0xFF:
        raise FrameError(f"temperature {sample.temperature} C overflows 8 bits")
    payload = struct.pack("<ihB", rad_to_ticks(sample.position), current, temperature)
    return _build_frame(sample.motor_id, OP_READ_STATUS, payload)


def encode_ping(motor_id: int) -> bytes:
    return _build_frame(motor_id, OP_PING, b"")


def decode_frame(buf: bytes) -> tuple:
    """Split a raw frame into (motor_id, opcode, payload), verifying integrity."""
    if len(buf) < 6:
        raise FrameError(f"frame truncated at {len(buf)} bytes")
    if buf[:2] != _HEADER:
        raise FrameError("bad header")
    length = buf[3]
    if len(buf) != length + 4:
        raise FrameError(f"length byte says {length + 4} bytes, got {len(buf)}")
    body, check = buf[2:-1], buf[-1]
    if _checksum(body) != check:
        raise FrameError("checksum mismatch")
    return buf[2], buf[4], bytes(buf[5:-1])


def decode_goal(buf: bytes) -> tuple:
    """(motor_id, position_rad) from a write-goal frame."""
    motor_id, opcode, payload = decode_frame(buf)
    if opcode != OP_WRITE_GOAL:
        raise FrameError(f"expected write-goal frame, got opcode {opcode:#x}")
    if len(payload) != 4:
        raise FrameError("write-goal payload must be 4 bytes")
    return motor_id, ticks_to_rad(struct.unpack("<i", payload)[0])


def decode_status(buf: bytes, timestamp: float = 0.0) -> MotorSample:
    """MotorSample from a status frame; timestamp is supplied by the caller."""
    motor_id, opcode, payload = decode_frame(buf)
    if opcode != OP_READ_STATUS:
        raise FrameError(f"expected status frame, got opcode {opcode:#x}")
    if len(payload) != 7:
        raise FrameError("status payload must be 7 bytes")
    ticks, current, temperature = struct.unpack("<ihB", payload)
    return MotorSample(motor_id, timestamp, ticks_to_rad(ticks), float(current), float(temperature))


# ---------------------------------------------------------------------------
# Simulation parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointSimParams:
    """Ground-truth dynamics of one joint's drivetrain."""

    true_ratio: float  # motor rad per joint deg, signed by spool direction
    motor_origin: float = 0.0  # shaft position at the extension limit, drift-free
    slack_deadband: float = 0.02  # motor rad absorbed after a direction reversal
    drift_rate: float = 0.05  # rad/h creep of the motor zero
    lag_seconds: float = 0.12  # transport delay from write to motion
    time_constant: float = 0.03  # first-order response time constant
    stall_current_ma: float = 600.0


@dataclass(frozen=True)
class SimParams:
    joints: dict
    current_limit_ma: float = 600.0
    baseline_current_ma: float = 80.0
    current_gain_ma_per_rad: float = 1500.0
    measurement_noise_deg: float = 0.08
    ambient_c: float = 25.0
    thermal_gain_c_per_ma: float = 0.03
    thermal_time_constant_s: float = 120.0
    fsr: FsrModel = field(default_factory=FsrModel)
    seed: int = 0

    @classmethod
    def for_model(cls, model: HandModel, seed: int = 0, **overrides) -> "SimParams":
        """Stock dynamics: 0.05 rad/deg spools (0.08 belt wrist, slack-free)."""
        joints = {}
        for j in model.joints:
            if j.transmission == "belt":
                joints[j.name] = JointSimParams(true_ratio=j.direction * 0.08, slack_deadband=0.0)
            else:
                joints[j.name] = JointSimParams(true_ratio=j.direction * 0.05)
        return cls(joints=joints, seed=seed, **overrides)

    @classmethod
    def randomized(cls, model: HandModel, seed: int) -> "SimParams":
        """Randomized drivetrains for recovery tests.

        Ratio magnitudes stay in [0.045, 0.08] rad/deg so the irreducible
        half-slack bias at each stop keeps ratio recovery within its bound
        even on the shortest (60 deg) spans at the maximum 0.05 rad slack.
        """
        rng = np.random.default_rng(seed)
        joints = {}
        for j in model.joints:
            joints[j.name] = JointSimParams(
                true_ratio=j.direction * rng.uniform(0.045, 0.08),
                motor_origin=rng.uniform(-math.pi, math.pi),
                slack_deadband=rng.uniform(0.0, 0.05),
                drift_rate=rng.uniform(-0.1, 0.1),
            )
        return cls(joints=joints, seed=seed)


@dataclass(frozen=True)
class SimState:
    """Snapshot returned by each simulator step."""

    t: float
    names: tuple
    motor_ids: tuple
    joint_deg: np.ndarray
    motor_pos: np.ndarray
    goal_pos: np.ndarray
    current_ma: np.ndarray
    temperature_c: np.ndarray
    drift: np.ndarray
    pending_writes: int

    def joint(self, name: str) -> float:
        return float(self.joint_deg[self.names.index(name)])


# ---------------------------------------------------------------------------
# Backend contract
# ---------------------------------------------------------------------------


class MotorBackend:
    """Minimal surface the control stack needs from a servo bus."""

    def motor_ids(self) -> list:
        raise NotImplementedError

    def write_goal_position(self, motor_id: int, position_rad: float) -> None:
        raise NotImplementedError

    def read_sample(self, motor_id: int) -> MotorSample:
        raise NotImplementedError

    def set_current_limit(self, motor_id: int, limit_ma: float) -> None:
        raise NotImplementedError

    def now(self) -> float:
        raise NotImplementedError

    def advance(self, dt: float):
        """Let dt seconds pass on the backend clock."""
        raise NotImplementedError


class SimBackend(MotorBackend):
    """Hardware-in-the-loop stand-in for the servo bus.

    The caller owns the clock: nothing moves except through advance()/step().
    All entry points are serialized on one lock so a pump thread and client
    threads can share the instance.
    """

    def __init__(self, model: HandModel, params: SimParams | None = None):
        params = params or SimParams.for_model(model)
        missing = [j.name for j in model.joints if j.name not in params.joints]
        if missing:
            raise ValueError(f"SimParams missing joints: {missing}")
        self._model = model
        self._params = params
        self._names = tuple(j.name for j in model.joints)
        self._index = {name: i for i, name in enumerate(self._names)}
        self._ids = tuple(j.motor_id for j in model.joints)
        self._by_motor = {j.motor_id: i for i, j in enumerate(model.joints)}
        n = len(self._names)

        jp = [params.joints[name] for name in self._names]
        self._ratio = np.array([p.true_ratio for p in jp])
        self._origin = np.array([p.motor_origin for p in jp])
        self._half_slack = np.array([p.slack_deadband for p in jp]) / 2.0
        self._drift_per_s = np.array([p.drift_rate for p in jp]) / 3600.0
        self._lag = np.array([p.lag_seconds for p in jp])
        self._tau = np.array([max(p.time_constant, 1e-9) for p in jp])
        self._stall = np.array([p.stall_current_ma for p in jp])
        self._rom_lo = np.array([j.rom_min_deg for j in model.joints])
        self._rom_hi = np.array([j.rom_max_deg for j in model.joints])
        self._limit = np.full(n, params.current_limit_ma)

        theta0 = np.clip(0.0, self._rom_lo, self._rom_hi)
        self._theta = theta0.astype(float)
        self._p = self._origin + self._ratio * (theta0 - self._rom_lo)
        self._m = self._p.copy()
        self._goal = self._p.copy()
        self._drift = np.zeros(n)
        self._current = np.full(n, params.baseline_current_ma)
        self._temp = np.full(n, params.ambient_c)
        self._connected = np.ones(n, dtype=bool)
        self._queues = [deque() for _ in range(n)]
        self._elapsed = 0.0
        self._rng = np.random.default_rng(params.seed)
        self._lock = threading.RLock()
        self.write_log = None  # set to a list to audit every goal write

        self._force_n = {s.finger: 0.0 for s in model.sensors}
        self._faults = {s.finger: ChannelFault() for s in model.sensors}
        self._sensors = {s.finger: s for s in model.sensors}

    # -- bus contract ------------------------------------------------------

    def motor_ids(self) -> list:
        return list(self._ids)

    def _motor_index(self, motor_id: int) -> int:
        try:
            return self._by_motor[motor_id]
        except KeyError:
            raise UnknownMotorError(motor_id) from None

    def write_goal_position(self, motor_id: int, position_rad: float) -> None:
        with self._lock:
            i = self._motor_index(motor_id)
            self._queues[i].append((self._elapsed + self._lag[i], float(position_rad)))
            if self.write_log is not None:
                self.write_log.append((self._elapsed, motor_id, float(position_rad)))

    def read_sample(self, motor_id: int) -> MotorSample:
        with self._lock:
            i = self._motor_index(motor_id)
            return MotorSample(
                motor_id,
                self._elapsed,
                float(self._m[i]),
                float(self._current[i]),
                float(self._temp[i]),
            )

    def set_current_limit(self, motor_id: int, limit_ma: float) -> None:
        """Lower (never raise) the per-motor current clamp."""
        if limit_ma <= 0:
            raise ValueError("current limit must be positive")
        with self._lock:
            i = self._motor_index(motor_id)
            self._limit[i] = min(limit_ma, self._params.current_limit_ma)

    def now(self) -> float:
        with self._lock:
            return self._elapsed

    def advance(self, dt: float) -> "SimState":
        return self.step(dt)

    # -- simulation --------------------------------------------------------

    def step(self, dt: float) -> SimState:
        """Advance the world by dt seconds and return the new state."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        with self._lock:
            t0 = self._elapsed
            for i, queue in enumerate(self._queues):
                while queue and queue[0][0] <= t0 + 1e-12:
                    self._goal[i] = queue.popleft()[1]

            self._drift += self._drift_per_s * dt
            alpha = 1.0 - np.exp(-dt / self._tau)
            self._m += (self._goal - self._m) * alpha

            lo_end = self._origin + self._drift
            hi_end = lo_end + self._ratio * (self._rom_hi - self._rom_lo)
            lo_m = np.minimum(lo_end, hi_end)
            hi_m = np.maximum(lo_end, hi_end)

            conn = self._connected
            # tendons go taut at the stops: shaft travel saturates there
            self._m[conn] = np.clip(
                self._m[conn], (lo_m - self._half_slack)[conn], (hi_m + self._half_slack)[conn]
            )
            p_new = np.clip(self._p, self._m - self._half_slack, self._m + self._half_slack)
            p_new = np.clip(p_new, lo_m, hi_m)
            self._p[conn] = p_new[conn]
            self._theta[conn] = (self._rom_lo + (self._p - lo_end) / self._ratio)[conn]

            err = np.abs(self._goal - self._m)
            cap = np.minimum(self._stall, self._limit)
            self._current = np.minimum(
                self._params.baseline_current_ma + self._params.current_gain_ma_per_rad * err,
                cap,
            )
            target_temp = self._params.ambient_c + self._params.thermal_gain_c_per_ma * self._current
            self._temp += (target_temp - self._temp) * (dt / self._params.thermal_time_constant_s)

            self._elapsed = t0 + dt
            return self._snapshot()

    def _snapshot(self) -> SimState:
        return SimState(
            t=self._elapsed,
            names=self._names,
            motor_ids=self._ids,
            joint_deg=self._theta.copy(),
            motor_pos=self._m.copy(),
            goal_pos=self._goal.copy(),
            current_ma=self._current.copy(),
            temperature_c=self._temp.copy(),
            drift=self._drift.copy(),
            pending_writes=sum(len(q) for q in self._queues),
        )

    def state(self) -> SimState:
        with self._lock:
            return self._snapshot()

    # -- ground-truth and fault channels (simulation only) ------------------

    def read_joint_deg(self, name: str) -> float:
        """Noisy ground-truth joint angle (the benchmark measurement channel)."""
        with self._lock:
            i = self._index[name]
            return float(self._theta[i] + self._rng.normal(0.0, self._params.measurement_noise_deg))

    def read_joint_truth(self, name: str) -> float:
        with self._lock:
            return float(self._theta[self._index[name]])

    def true_calibration(self, name: str) -> tuple:
        """Ground-truth (m_min, m_max, ratio) for recovery tests.

        Reflects the mapping as it stands right now, i.e. including any
        zero drift accumulated so far, so a calibration that just finished
        can be compared against the truth it actually measured.
        """
        with self._lock:
            i = self._index[name]
            lo = self._origin[i] + self._drift[i]
            span = self._ratio[i] * (self._rom_hi[i] - self._rom_lo[i])
            return (float(lo), float(lo + span), float(self._ratio[i]))

    def set_tendon_connected(self, name: str, connected: bool) -> None:
        """Fault hook: a disconnected tendon leaves the joint limp (no stalls)."""
        with self._lock:
            self._connected[self._index[name]] = bool(connected)

    def apply_fingertip_force(self, finger: str, force_n: float) -> None:
        if force_n < 0:
            raise ValueError("force must be non-negative")
        with self._lock:
            if finger not in self._force_n:
                raise KeyError(finger)
            self._force_n[finger] = float(force_n)

    def set_tactile_fault(self, finger: str, fault: ChannelFault) -> None:
        with self._lock:
            if finger not in self._faults:
                raise KeyError(finger)
            self._faults[finger] = fault

    def tactile_read(self, finger: str) -> tuple:
        """(voltage_v, counts, touch) for one fingertip channel."""
        with self._lock:
            channel = self._sensors[finger]
            v = divider_voltage(self._force_n[finger], self._params.fsr, channel, self._faults[finger])
            return v, adc_read(v, channel), classify_touch(v, channel)

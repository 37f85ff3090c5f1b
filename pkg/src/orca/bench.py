"""Benchmark harnesses: sine tracking accuracy, latency, reliability cycling.

Two experiment drivers run against any motor backend (normally the
simulator) plus CSV export/import for their results:

- ``run_sine_benchmark`` streams a sine through the controller on one
  joint, records commanded versus measured angle, estimates the command
  latency by cross-correlation, and reports the RMSE of the
  latency-aligned signals.
- ``run_reliability`` executes repeated grasp cycles and logs each
  motor's per-cycle maximum current and temperature, flushing to CSV on
  cycle boundaries so interrupted runs keep their completed cycles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .calibration import (
    CalibrationConfig,
    CalibrationProfile,
    calibrate_all,
    joint_to_motor,
)
from .control import (
    Controller,
    ControllerConfig,
    GraspCycleSpec,
    SineSpec,
    generate_trajectory,
)
from .hand_model import HandModel

REPORT_COLUMNS = (
    "joint",
    "frequency_hz",
    "amplitude_deg",
    "duration_s",
    "latency_s",
    "rmse_deg",
    "samples",
)
CYCLE_COLUMNS = (
    "cycle",
    "timestamp_s",
    "motor_id",
    "max_current_ma",
    "temperature_c",
)


class BenchError(RuntimeError):
    """A benchmark could not run or its inputs are unusable."""


@dataclass(frozen=True)
class BenchReport:
    """Result of one sine-tracking run."""

    joint: str
    frequency_hz: float
    amplitude_deg: float
    duration_s: float
    latency_s: float
    rmse_deg: float
    samples: int


@dataclass(frozen=True)
class CycleRow:
    """Per-cycle maximum-current record for one motor."""

    cycle: int
    timestamp_s: float
    motor_id: int
    max_current_ma: float
    temperature_c: float


@dataclass
class CycleLog:
    """Reliability-run log: one row per motor per completed motion cycle.

    Motors log on their own cadence: joints driven every finger period
    produce one row per finger cycle, the wrist produces one row per
    wrist period. ``clamp_ma`` records the current ceiling the run was
    expected to respect.
    """

    clamp_ma: float = 600.0
    rows: list[CycleRow] = field(default_factory=list)

    def motor_ids(self) -> list[int]:
        return sorted({row.motor_id for row in self.rows})

    def rows_for(self, motor_id: int) -> list[CycleRow]:
        return [row for row in self.rows if row.motor_id == motor_id]

    def flagged(self) -> list[CycleRow]:
        """Rows whose maximum current exceeded the clamp."""
        return [row for row in self.rows if row.max_current_ma > self.clamp_ma]


def estimate_latency(
    commanded: Sequence[float],
    measured: Sequence[float],
    rate_hz: float,
    max_lag_s: Optional[float] = None,
) -> float:
    """Delay of ``measured`` behind ``commanded`` in seconds.

    Finds the lag maximizing the normalized circular cross-correlation,
    then refines the integer peak with parabolic interpolation, giving
    sub-sample resolution. Integer-sample shifts of a periodic signal
    are recovered exactly.

    A periodic input correlates equally well one full period over, so
    the lag of a periodic signal is only identifiable within a window
    narrower than the period: pass ``max_lag_s`` to restrict the search
    to ``[-max_lag_s, max_lag_s]``.

    Raises:
        BenchError: signals too short, mismatched, or constant.
    """
    if rate_hz <= 0:
        raise ValueError("rate must be positive")
    x = np.asarray(commanded, dtype=float)
    y = np.asarray(measured, dtype=float)
    if x.shape != y.shape:
        raise BenchError("commanded and measured must have equal length")
    n = x.size
    if n < 8:
        raise BenchError(f"signals too short to correlate ({n} samples)")
    x = x - x.mean()
    y = y - y.mean()
    scale = math.sqrt(float(x @ x) * float(y @ y))
    if scale == 0.0:
        raise BenchError("cannot estimate latency of a zero-variance signal")
    corr = np.fft.irfft(np.fft.rfft(y) * np.conj(np.fft.rfft(x)), n) / scale
    if max_lag_s is None:
        peak = int(np.argmax(corr))
        if peak > n / 2:
            peak -= n
    else:
        if max_lag_s <= 0:
            raise ValueError("max_lag_s must be positive")
        reach = min(int(max_lag_s * rate_hz), (n - 1) // 2)
        lags = np.arange(-reach, reach + 1)
        peak = int(lags[np.argmax(corr[lags % n])])
    before = corr[(peak - 1) % n]
    at = corr[peak % n]
    after = corr[(peak + 1) % n]
    denom = before - 2.0 * at + after
    offset = 0.0 if denom == 0.0 else 0.5 * (before - after) / denom
    return (peak + offset) / rate_hz


def _aligned_rmse(
    commanded: np.ndarray, measured: np.ndarray, lag_samples: int
) -> float:
    n = commanded.size
    best = math.inf
    nearest = max(0, lag_samples)
    for k in {0, nearest - 1, nearest, nearest + 1}:
        if k < 0 or k >= n - 1:
            continue
        d = measured[k:] - commanded[: n - k]
        best = min(best, math.sqrt(float(np.mean(d * d))))
    return best


def _resolve_profile(
    model: HandModel,
    backend,
    profile: Optional[CalibrationProfile],
    auto_calibrate: bool,
    calibration_config: Optional[CalibrationConfig],
) -> CalibrationProfile:
    if profile is not None:
        return profile
    if not auto_calibrate:
        raise BenchError(
            "backend is not calibrated; pass a profile or enable "
            "auto_calibrate"
        )
    return calibrate_all(backend, model, calibration_config)


def run_sine_benchmark(
    model: HandModel,
    backend,
    joint: str,
    amplitude_deg: float,
    frequency_hz: float,
    duration_s: float = 30.0,
    rate_hz: float = 100.0,
    profile: Optional[CalibrationProfile] = None,
    auto_calibrate: bool = False,
    warmup_s: float = 2.0,
    calibration_config: Optional[CalibrationConfig] = None,
    progress: Optional[Callable[[float], None]] = None,
) -> BenchReport:
    """Tracks a sine on one joint and reports latency plus aligned RMSE.

    The commanded signal is the ideal sine; the measured signal is the
    backend's noisy joint angle. A ``warmup_s`` lead-in is played and
    discarded so the approach transient never pollutes the estimate.

    Raises:
        BenchError: no calibration available, too short a run, or a
            backend without a joint-angle measurement channel.
    """
    if duration_s * frequency_hz < 2.0:
        raise BenchError("duration must cover at least two periods")
    if not hasattr(backend, "read_joint_deg"):
        raise BenchError("backend has no joint angle measurement channel")
    resolved = _resolve_profile(
        model, backend, profile, auto_calibrate, calibration_config
    )
    controller = Controller(
        backend, model, ControllerConfig(loop_rate_hz=rate_hz)
    )
    controller.install_profile(resolved)

    spec = SineSpec(
        joint=joint,
        frequency_hz=frequency_hz,
        amplitude_deg=amplitude_deg,
        duration_s=warmup_s + duration_s,
    )
    _, series = generate_trajectory(model, spec, rate_hz)
    command = series[joint]
    total = command.size
    skip = int(round(warmup_s * rate_hz))
    measured = np.empty(total)
    report_every = max(1, total // 50)
    for k in range(total):
        controller.set_joint_targets({joint: float(command[k])})
        controller.tick()
        measured[k] = backend.read_joint_deg(joint)
        if progress and (k + 1) % report_every == 0:
            progress((k + 1) / total)
    commanded = command[skip:]
    observed = measured[skip:]

    latency = max(
        0.0,
        estimate_latency(
            commanded, observed, rate_hz, max_lag_s=0.5 / frequency_hz
        ),
    )
    rmse = _aligned_rmse(commanded, observed, int(round(latency * rate_hz)))
    if progress:
        progress(1.0)
    return BenchReport(
        joint=joint,
        frequency_hz=frequency_hz,
        amplitude_deg=amplitude_deg,
        duration_s=duration_s,
        latency_s=latency,
        rmse_deg=rmse,
        samples=int(commanded.size),
    )


def sine_presets(joint: str = "index_mcp") -> list[dict]:
    """The two stock accuracy/latency runs: 0.2 Hz and 0.5 Hz, 40 deg."""
    return [
        {
            "joint": joint,
            "amplitude_deg": 40.0,
            "frequency_hz": f,
            "duration_s": 30.0,
        }
        for f in (0.2, 0.5)
    ]


def run_reliability(
    model: HandModel,
    backend,
    n_cycles: int,
    profile: Optional[CalibrationProfile] = None,
    auto_calibrate: bool = False,
    rate_hz: float = 100.0,
    spec: Optional[GraspCycleSpec] = None,
    clamp_ma: float = 600.0,
    csv_path: Optional[str] = None,
    calibration_config: Optional[CalibrationConfig] = None,
    progress: Optional[Callable[[float], None]] = None,
) -> CycleLog:
    """Runs repeated grasp cycles, logging per-cycle current maxima.

    Each motor gets one row per completed cycle of its own motion: the
    fingers and abduction motors every finger period, the wrist every
    wrist period. When ``csv_path`` is given, rows are appended and
    flushed at finger-cycle boundaries so an interrupted run keeps every
    complete cycle on disk.

    Raises:
        BenchError: no calibration available.
    """
    if n_cycles < 0:
        raise ValueError("cycle count must be non-negative")
    log = CycleLog(clamp_ma=clamp_ma)
    writer = _CycleCsvWriter(csv_path) if csv_path else None
    if n_cycles == 0:
        if writer:
            writer.close()
        return log
    resolved = _resolve_profile(
        model, backend, profile, auto_calibrate, calibration_config
    )
    base = spec or GraspCycleSpec(duration_s=1.0)
    if base.wrist_period_s % base.finger_period_s != 0:
        raise BenchError("wrist period must be a multiple of the finger period")

    # The grasp pattern repeats: fingers every finger period, the wrist
    # every two wrist periods (one toggle each way). The first wrist ramp
    # starts from zero, so sample one lead-in superperiod plus one steady
    # superperiod and replay the steady block for the rest of the run.
    super_s = 2.0 * base.wrist_period_s
    block_ticks = int(round(super_s * rate_hz))
    sampled = generate_trajectory(
        model,
        GraspCycleSpec(
            duration_s=2.0 * super_s,
            finger_period_s=base.finger_period_s,
            wrist_period_s=base.wrist_period_s,
            wrist_amplitude_deg=base.wrist_amplitude_deg,
            grasp_fraction=base.grasp_fraction,
            slew_dps=base.slew_dps,
        ),
        rate_hz,
    )[1]

    names = list(model.joint_names())
    cals = [resolved.joint(name) for name in names]
    ids = [cal.motor_id for cal in cals]
    goals = np.empty((2 * block_ticks, len(names)))
    for j, (name, cal) in enumerate(zip(names, cals)):
        goals[:, j] = [joint_to_motor(cal, v) for v in sampled[name]]

    state = backend.state() if hasattr(backend, "state") else None
    id_order = list(state.motor_ids) if state else list(backend.motor_ids())
    col_of = {motor_id: id_order.index(motor_id) for motor_id in ids}
    current_cols = np.array([col_of[m] for m in ids])

    dt = 1.0 / rate_hz
    ticks_per_cycle = int(round(base.finger_period_s * rate_hz))
    cycles_per_wrist = int(round(base.wrist_period_s / base.finger_period_s))
    is_wrist = np.array(
        [model.joint(name).kind == "WRIST" for name in names]
    )
    last_written = np.full(len(names), np.nan)
    max_ma = np.full(len(names), -1.0)
    wrist_cycle = 0
    try:
        for cycle in range(1, n_cycles + 1):
            start_tick = (cycle - 1) * ticks_per_cycle
            for k in range(start_tick, start_tick + ticks_per_cycle):
                row = k if k < block_ticks else (
                    block_ticks + (k - block_ticks) % block_ticks
                )
                target = goals[row]
                for j in np.nonzero(target != last_written)[0]:
                    backend.write_goal_position(ids[j], float(target[j]))
                    last_written[j] = target[j]
                tick_state = backend.advance(dt)
                currents = np.asarray(tick_state.current_ma)[current_cols]
                np.maximum(max_ma, currents, out=max_ma)
            temps = np.asarray(tick_state.temperature_c)[current_cols]
            stamp = float(tick_state.t)
            wrist_done = cycle % cycles_per_wrist == 0
            if wrist_done:
                wrist_cycle += 1
            fresh = []
            for j, name in enumerate(names):
                if is_wrist[j] and not wrist_done:
                    continue
                index = wrist_cycle if is_wrist[j] else cycle
                fresh.append(
                    CycleRow(index, stamp, ids[j], float(max_ma[j]), float(temps[j]))
                )
                max_ma[j] = -1.0
            log.rows.extend(fresh)
            if writer:
                writer.write(fresh)
            if progress:
                progress(cycle / n_cycles)
    finally:
        if writer:
            writer.close()
    return log


class _CycleCsvWriter:
    """Appends cycle rows with a flush at every write."""

    def __init__(self, path: str):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CYCLE_COLUMNS)
        self._fh.flush()

    def write(self, rows: Sequence[CycleRow]) -> None:
        for row in rows:
            self._writer.writerow(
                (
                    row.cycle,
                    repr(row.timestamp_s),
                    row.motor_id,
                    repr(row.max_current_ma),
                    repr(row.temperature_c),
                )
            )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def export_csv(result, path: str) -> None:
    """Writes a BenchReport or CycleLog to CSV; re-parsing round-trips."""
    if isinstance(result, BenchReport):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            writer.writerow(
                (
                    result.joint,
                    repr(result.frequency_hz),
                    repr(result.amplitude_deg),
                    repr(result.duration_s),
                    repr(result.latency_s),
                    repr(result.rmse_deg),
                    result.samples,
                )
            )
    elif isinstance(result, CycleLog):
        writer = _CycleCsvWriter(path)
        try:
            writer.write(result.rows)
        finally:
            writer.close()
    else:
        raise TypeError(f"cannot export {type(result).__name__} to CSV")


def parse_report_csv(path: str) -> BenchReport:
    """Reads back a sine-benchmark report written by export_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != REPORT_COLUMNS:
            raise BenchError(f"not a benchmark report: header {header!r}")
        line = next(reader, None)
        if line is None or len(line) != len(REPORT_COLUMNS):
            raise BenchError("benchmark report has no data row")
    return BenchReport(
        joint=line[0],
        frequency_hz=float(line[1]),
        amplitude_deg=float(line[2]),
        duration_s=float(line[3]),
        latency_s=float(line[4]),
        rmse_deg=float(line[5]),
        samples=int(line[6]),
    )


def parse_cycle_csv(path: str, clamp_ma: float = 600.0) -> CycleLog:
    """Reads back a reliability log written by export_csv."""
    log = CycleLog(clamp_ma=clamp_ma)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CYCLE_COLUMNS:
            raise BenchError(f"not a cycle log: header {header!r}")
        for line in reader:
            if len(line) != len(CYCLE_COLUMNS):
                raise BenchError(f"malformed cycle row: {line!r}")
            log.rows.append(
                CycleRow(
                    cycle=int(line[0]),
                    timestamp_s=float(line[1]),
                    motor_id=int(line[2]),
                    max_current_ma=float(line[3]),
                    temperature_c=float(line[4]),
                )
            )
    return log

"""Fingertip force sensing: FSR element, voltage divider, ADC, touch logic.

The chain mirrors the physical wiring: the force-sensitive resistor sits on
the supply side of a divider, the divider tap feeds an ADC, and a contact is
declared when the tap voltage exceeds the channel threshold. All functions
are pure so the same code evaluates real sweeps and simulated stimuli.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

FAULT_MODES = ("healthy", "degraded", "open_circuit")


@dataclass(frozen=True)
class TactileChannelSpec:
    """Electronics of one fingertip channel.

    Args:
        finger: fingertip this channel is glued to.
        divider_resistor_ohm: fixed resistor on the ground side of the divider.
        supply_v: divider supply rail.
        adc_bits: converter resolution.
        adc_ref_v: converter full-scale reference.
        touch_threshold_v: tap voltage above which contact is declared.
    """

    finger: str
    divider_resistor_ohm: float = 10_000.0
    supply_v: float = 5.0
    adc_bits: int = 10
    adc_ref_v: float = 5.0
    touch_threshold_v: float = 0.01

    def __post_init__(self) -> None:
        if self.divider_resistor_ohm <= 0:
            raise ValueError("divider_resistor_ohm must be positive")
        if self.supply_v <= 0 or self.adc_ref_v <= 0:
            raise ValueError("supply_v and adc_ref_v must be positive")
        if not (1 <= int(self.adc_bits) <= 32):
            raise ValueError("adc_bits out of range")
        if self.touch_threshold_v < 0:
            raise ValueError("touch_threshold_v must be non-negative")


@dataclass(frozen=True)
class FsrModel:
    """Piecewise force-to-resistance model of the sensor element.

    Below trigger_force_n the element stays at its open resistance; above it
    the resistance follows k/F. Validity requires the resistance not to jump
    upward at the trigger point (k / trigger <= open resistance).
    """

    open_resistance_ohm: float = 1.0e7
    k_ohm_n: float = 3000.0
    trigger_force_n: float = 0.05

    def __post_init__(self) -> None:
        if self.open_resistance_ohm <= 0 or self.k_ohm_n <= 0:
            raise ValueError("resistances must be positive")
        if self.trigger_force_n <= 0:
            raise ValueError("trigger_force_n must be positive")
        if self.k_ohm_n / self.trigger_force_n > self.open_resistance_ohm:
            raise ValueError(
                "k/trigger exceeds open resistance; contact would raise resistance"
            )


@dataclass(frozen=True)
class ChannelFault:
    """Injected sensor fault.

    mode "healthy" is a no-op; "degraded" raises the effective contact
    threshold to threshold_n (forces below it read as no contact);
    "open_circuit" models a snapped wire (tap reads 0 V).
    """

    mode: str = "healthy"
    threshold_n: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in FAULT_MODES:
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if self.mode == "degraded" and self.threshold_n <= 0:
            raise ValueError("degraded fault needs a positive threshold_n")


def fsr_resistance(force_n: float, fsr: FsrModel) -> float:
    """Resistance of the sensor element under a normal force."""
    if force_n < 0:
        raise ValueError("force must be non-negative")
    if force_n < fsr.trigger_force_n:
        return fsr.open_resistance_ohm
    return fsr.k_ohm_n / force_n


def divider_voltage(
    force_n: float,
    fsr: FsrModel,
    channel: TactileChannelSpec,
    fault: ChannelFault | None = None,
) -> float:
    """Divider tap voltage for a force, including any injected fault."""
    if fault is not None:
        if fault.mode == "open_circuit":
            return 0.0
        if fault.mode == "degraded" and force_n < fault.threshold_n:
            force_n = 0.0
    r = fsr_resistance(force_n, fsr)
    return channel.supply_v * channel.divider_resistor_ohm / (r + channel.divider_resistor_ohm)


def adc_read(voltage_v: float, channel: TactileChannelSpec) -> int:
    """Converter counts for a tap voltage (clipped to the reference)."""
    if voltage_v < 0:
        raise ValueError("voltage must be non-negative")
    full_scale = (1 << int(channel.adc_bits)) - 1
    return math.floor(min(voltage_v, channel.adc_ref_v) * full_scale / channel.adc_ref_v)


def classify_touch(voltage_v: float, channel: TactileChannelSpec) -> bool:
    """True when the tap voltage is strictly above the channel threshold."""
    return voltage_v > channel.touch_threshold_v


@dataclass(frozen=True)
class SweepRow:
    force_n: float
    cycle: int
    voltage_v: float
    counts: int
    touch: bool


def sweep(
    forces_n: list[float],
    cycles: int,
    fsr: FsrModel,
    channel: TactileChannelSpec,
    fault: ChannelFault | None = None,
) -> list[SweepRow]:
    """Apply each force for the given number of cycles and record the chain."""
    if not forces_n:
        raise ValueError("force list is empty")
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    rows = []
    for force in sorted(forces_n):
        for cycle in range(1, cycles + 1):
            v = divider_voltage(force, fsr, channel, fault)
            rows.append(
                SweepRow(force, cycle, v, adc_read(v, channel), classify_touch(v, channel))
            )
    return rows


def absolute_threshold_sweep(
    forces_n: list[float],
    cycles: int,
    fsr: FsrModel,
    channel: TactileChannelSpec,
    fault: ChannelFault | None = None,
) -> float | None:
    """Smallest swept force that reads as touch in every cycle, or None."""
    rows = sweep(forces_n, cycles, fsr, channel, fault)
    by_force: dict[float, list[bool]] = {}
    for row in rows:
        by_force.setdefault(row.force_n, []).append(row.touch)
    for force in sorted(by_force):
        if all(by_force[force]):
            return force
    return None


def export_sweep_csv(rows: list[SweepRow], at_n: float | None, out) -> None:
    """Write sweep rows plus the AT_n summary line to a path or file object.

    The summary row is `AT_n=<value>`, with `none` when no force qualified.
    """
    own = isinstance(out, (str, bytes))
    fh = open(out, "w", newline="") if own else out
    try:
        writer = csv.writer(fh)
        writer.writerow(["force_n", "cycle", "voltage_v", "counts", "touch"])
        for row in rows:
            writer.writerow(
                [repr(row.force_n), row.cycle, repr(row.voltage_v), row.counts, int(row.touch)]
            )
        writer.writerow([f"AT_n={'none' if at_n is None else repr(at_n)}"])
    finally:
        if own:
            fh.close()


def sweep_csv_text(rows: list[SweepRow], at_n: float | None) -> str:
    buf = io.StringIO()
    export_sweep_csv(rows, at_n, buf)
    return buf.getvalue()

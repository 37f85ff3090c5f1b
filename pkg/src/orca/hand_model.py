"""Declarative description of the hand: joints, finger chains, sensor channels.

Conventions
-----------
Angles are degrees at the joint, signed so that flexion is positive and
extension negative; every joint's range of motion is [rom_min_deg,
rom_max_deg] with rom_min_deg < 0 < rom_max_deg for the standard hand.

The palm frame has +y pointing distally (along straight fingers), +z out of
the palm surface, +x completing the right-handed frame (thumb side on a
right hand). Flexion joints rotate about the local x axis, so positive
flexion curls a finger toward +z; abduction joints rotate about the local z
axis. A chain's base_orientation_deg is three rotations about the fixed
palm x, y, z axes applied in that order. Each flexion joint is followed by
a translation along the local y axis consuming the next link length; link
lengths left over after the last joint extend the chain rigidly (the distal
segment of a finger whose DIP is fixed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from math import cos, radians, sin

import numpy as np

from .tactile import TactileChannelSpec

FINGERS = ("thumb", "index", "middle", "ring", "pinky", "wrist")
JOINT_KINDS = ("IP", "PIP", "MCP", "ABD", "CMC", "WRIST")
TRANSMISSIONS = ("tendon_pair", "belt")
AXES = ("flexion", "abduction")

# JointVector: mapping joint name -> angle in degrees. Complete (one entry
# per model joint) whenever it is used as a command.
JointVector = dict


class ConfigError(ValueError):
    """Raised for unparseable, schema-violating, or inconsistent configs."""


class UnknownJointError(KeyError):
    """Raised when a joint name does not exist in the model or vector."""


@dataclass(frozen=True)
class JointSpec:
    name: str
    finger: str
    kind: str
    rom_min_deg: float
    rom_max_deg: float
    motor_id: int
    transmission: str = "tendon_pair"
    direction: int = 1
    axis: str = "flexion"


@dataclass(frozen=True)
class FingerChainSpec:
    finger: str
    base_position_mm: tuple
    base_orientation_deg: tuple
    link_lengths_mm: tuple
    joint_order: tuple


@dataclass(frozen=True)
class HandModel:
    version: int
    joints: tuple = ()
    chains: tuple = ()
    sensors: tuple = ()
    provenance: str = ""

    def joint(self, name: str) -> JointSpec:
        for j in self.joints:
            if j.name == name:
                return j
        raise UnknownJointError(name)

    def joint_names(self) -> list:
        return [j.name for j in self.joints]

    def rom(self, name: str) -> tuple:
        j = self.joint(name)
        return (j.rom_min_deg, j.rom_max_deg)

    @property
    def dof(self) -> int:
        return len(self.joints)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(model: HandModel) -> list:
    """Collect invariant violations; an empty list means the model is sound."""
    problems: list = []
    names = {}
    motors = {}
    for j in model.joints:
        if j.name in names:
            problems.append(f"duplicate joint name {j.name!r}")
        names[j.name] = j
        if j.motor_id in motors:
            problems.append(
                f"duplicate motor_id {j.motor_id} on {motors[j.motor_id]!r} and {j.name!r}"
            )
        motors[j.motor_id] = j.name
        if not j.rom_min_deg < j.rom_max_deg:
            problems.append(f"{j.name}: rom_min_deg must be below rom_max_deg")
        if j.finger not in FINGERS:
            problems.append(f"{j.name}: unknown finger {j.finger!r}")
        if j.kind not in JOINT_KINDS:
            problems.append(f"{j.name}: unknown kind {j.kind!r}")
        if j.transmission not in TRANSMISSIONS:
            problems.append(f"{j.name}: unknown transmission {j.transmission!r}")
        if j.axis not in AXES:
            problems.append(f"{j.name}: unknown axis {j.axis!r}")
        if j.direction not in (-1, 1):
            problems.append(f"{j.name}: direction must be +1 or -1")
        if j.transmission == "belt" and j.kind != "WRIST":
            problems.append(f"{j.name}: belt transmission is only valid on the wrist")
    for chain in model.chains:
        if chain.finger not in FINGERS or chain.finger == "wrist":
            problems.append(f"chain {chain.finger!r}: not a finger")
        expected = 4 if chain.finger == "thumb" else 3
        if len(chain.joint_order) != expected:
            problems.append(
                f"chain {chain.finger}: expected {expected} joints, got {len(chain.joint_order)}"
            )
        flexion_joints = 0
        for name in chain.joint_order:
            if name not in names:
                problems.append(f"chain {chain.finger}: references unknown joint {name!r}")
            else:
                if names[name].finger != chain.finger:
                    problems.append(
                        f"chain {chain.finger}: joint {name!r} belongs to {names[name].finger}"
                    )
                if names[name].axis == "flexion":
                    flexion_joints += 1
        if any(length <= 0 for length in chain.link_lengths_mm):
            problems.append(f"chain {chain.finger}: link lengths must be positive")
        if len(chain.link_lengths_mm) < flexion_joints:
            problems.append(
                f"chain {chain.finger}: {flexion_joints} flexion joints but only "
                f"{len(chain.link_lengths_mm)} links"
            )
    for sensor in model.sensors:
        if sensor.finger not in FINGERS or sensor.finger == "wrist":
            problems.append(f"sensor on {sensor.finger!r}: not a finger")
    return problems


# ---------------------------------------------------------------------------
# Loading / serialization
# ---------------------------------------------------------------------------

_JOINT_FIELDS = {
    "name": str,
    "finger": str,
    "kind": str,
    "rom_min_deg": (int, float),
    "rom_max_deg": (int, float),
    "motor_id": int,
    "transmission": str,
    "direction": int,
    "axis": str,
}
_CHAIN_FIELDS = {
    "finger": str,
    "base_position_mm": list,
    "base_orientation_deg": list,
    "link_lengths_mm": list,
    "joint_order": list,
}
_SENSOR_FIELDS = {
    "finger": str,
    "divider_resistor_ohm": (int, float),
    "supply_v": (int, float),
    "adc_bits": int,
    "adc_ref_v": (int, float),
    "touch_threshold_v": (int, float),
}


def _check_fields(entry, fields, where):
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected an object")
    for key, types in fields.items():
        if key not in entry:
            raise ConfigError(f"{where}: missing field {key!r}")
        if not isinstance(entry[key], types) or isinstance(entry[key], bool):
            raise ConfigError(f"{where}: field {key!r} has the wrong type")
    for key in entry:
        if key not in fields:
            raise ConfigError(f"{where}: unknown field {key!r}")


def load_hand_config(text: str) -> HandModel:
    """Parse and validate a hand config document.

    Raises ConfigError with a position annotation for malformed JSON, a field
    path for schema violations, and the collected list for invariant
    violations.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected an object")
    for key in ("version", "joints", "chains", "sensors"):
        if key not in doc:
            raise ConfigError(f"top level: missing field {key!r}")
    for key in doc:
        if key not in ("version", "joints", "chains", "sensors", "provenance"):
            raise ConfigError(f"top level: unknown field {key!r}")
    if not isinstance(doc["version"], int) or isinstance(doc["version"], bool):
        raise ConfigError("top level: field 'version' has the wrong type")
    for key in ("joints", "chains", "sensors"):
        if not isinstance(doc[key], list):
            raise ConfigError(f"top level: field {key!r} must be an array")

    joints = []
    for i, entry in enumerate(doc["joints"]):
        where = f"joints[{i}]"
        _check_fields(entry, _JOINT_FIELDS, where)
        if entry["kind"] not in JOINT_KINDS:
            raise ConfigError(f"{where}: unknown kind {entry['kind']!r}")
        if entry["finger"] not in FINGERS:
            raise ConfigError(f"{where}: unknown finger {entry['finger']!r}")
        joints.append(
            JointSpec(
                name=entry["name"],
                finger=entry["finger"],
                kind=entry["kind"],
                rom_min_deg=float(entry["rom_min_deg"]),
                rom_max_deg=float(entry["rom_max_deg"]),
                motor_id=entry["motor_id"],
                transmission=entry["transmission"],
                direction=entry["direction"],
                axis=entry["axis"],
            )
        )
    chains = []
    for i, entry in enumerate(doc["chains"]):
        where = f"chains[{i}]"
        _check_fields(entry, _CHAIN_FIELDS, where)
        if len(entry["base_position_mm"]) != 3 or len(entry["base_orientation_deg"]) != 3:
            raise ConfigError(f"{where}: base pose needs 3 positions and 3 rotations")
        chains.append(
            FingerChainSpec(
                finger=entry["finger"],
                base_position_mm=tuple(float(v) for v in entry["base_position_mm"]),
                base_orientation_deg=tuple(float(v) for v in entry["base_orientation_deg"]),
                link_lengths_mm=tuple(float(v) for v in entry["link_lengths_mm"]),
                joint_order=tuple(entry["joint_order"]),
            )
        )
    sensors = []
    for i, entry in enumerate(doc["sensors"]):
        where = f"sensors[{i}]"
        _check_fields(entry, _SENSOR_FIELDS, where)
        try:
            sensors.append(
                TactileChannelSpec(
                    finger=entry["finger"],
                    divider_resistor_ohm=float(entry["divider_resistor_ohm"]),
                    supply_v=float(entry["supply_v"]),
                    adc_bits=entry["adc_bits"],
                    adc_ref_v=float(entry["adc_ref_v"]),
                    touch_threshold_v=float(entry["touch_threshold_v"]),
                )
            )
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from e

    model = HandModel(
        version=doc["version"],
        joints=tuple(joints),
        chains=tuple(chains),
        sensors=tuple(sensors),
        provenance=doc.get("provenance", ""),
    )
    problems = validate(model)
    if problems:
        raise ConfigError("; ".join(problems))
    return model


def serialize_hand_config(model: HandModel) -> str:
    """Render a model back to config JSON (load of the result is identical)."""
    doc = {
        "version": model.version,
        "joints": [
            {
                "name": j.name,
                "finger": j.finger,
                "kind": j.kind,
                "rom_min_deg": j.rom_min_deg,
                "rom_max_deg": j.rom_max_deg,
                "motor_id": j.motor_id,
                "transmission": j.transmission,
                "direction": j.direction,
                "axis": j.axis,
            }
            for j in model.joints
        ],
        "chains": [
            {
                "finger": c.finger,
                "base_position_mm": list(c.base_position_mm),
                "base_orientation_deg": list(c.base_orientation_deg),
                "link_lengths_mm": list(c.link_lengths_mm),
                "joint_order": list(c.joint_order),
            }
            for c in model.chains
        ],
        "sensors": [
            {
                "finger": s.finger,
                "divider_resistor_ohm": s.divider_resistor_ohm,
                "supply_v": s.supply_v,
                "adc_bits": s.adc_bits,
                "adc_ref_v": s.adc_ref_v,
                "touch_threshold_v": s.touch_threshold_v,
            }
            for s in model.sensors
        ],
    }
    if model.provenance:
        doc["provenance"] = model.provenance
    return json.dumps(doc, indent=2)


def default_model() -> HandModel:
    """The stock 17-DoF hand shipped with the package."""
    from importlib.resources import files

    return load_hand_config(files("orca.data").joinpath("hand.orca.json").read_text())


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def clamp_to_rom(model: HandModel, q: JointVector) -> JointVector:
    """Clamp every entry of q to its joint's range of motion."""
    out = {}
    for name, value in q.items():
        lo, hi = model.rom(name)  # raises UnknownJointError
        out[name] = min(max(value, lo), hi)
    return out


def _rot_x_h(deg: float) -> np.ndarray:
    r = radians(deg)
    c, s = cos(r), sin(r)
    return np.array(
        [[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1]], dtype=float
    )


def _rot_y_h(deg: float) -> np.ndarray:
    r = radians(deg)
    c, s = cos(r), sin(r)
    return np.array(
        [[c, 0, s, 0], [0, 1, 0, 0], [-s, 0, c, 0], [0, 0, 0, 1]], dtype=float
    )


def _rot_z_h(deg: float) -> np.ndarray:
    r = radians(deg)
    c, s = cos(r), sin(r)
    return np.array(
        [[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float
    )


def _translate_h(x: float, y: float, z: float) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = (x, y, z)
    return m


def base_transform(chain: FingerChainSpec) -> np.ndarray:
    a, b, c = chain.base_orientation_deg
    return _translate_h(*chain.base_position_mm) @ _rot_z_h(c) @ _rot_y_h(b) @ _rot_x_h(a)


def chain_fingertip(model: HandModel, chain: FingerChainSpec, q: JointVector) -> np.ndarray:
    """Fingertip position (mm, palm frame) of one chain at pose q."""
    t = base_transform(chain)
    links = chain.link_lengths_mm
    li = 0
    for name in chain.joint_order:
        joint = model.joint(name)
        if name not in q:
            raise UnknownJointError(name)
        angle = q[name]
        if joint.axis == "flexion":
            t = t @ _rot_x_h(angle)
            if li >= len(links):
                raise ConfigError(f"chain {chain.finger}: ran out of links at {name}")
            t = t @ _translate_h(0.0, links[li], 0.0)
            li += 1
        else:
            t = t @ _rot_z_h(angle)
    for length in links[li:]:
        t = t @ _translate_h(0.0, length, 0.0)
    return t[:3, 3].copy()


def forward_kinematics(model: HandModel, q: JointVector) -> dict:
    """Fingertip positions for every chain.

    Args:
        q: complete JointVector (degrees, within ROM).

    Returns:
        Map finger name -> np.ndarray (x, y, z) in mm, palm frame.
    """
    return {chain.finger: chain_fingertip(model, chain, q) for chain in model.chains}

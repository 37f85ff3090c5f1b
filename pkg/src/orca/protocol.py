"""Wire protocol for the operator daemon.

One message schema carried over two transports (newline-delimited JSON
on TCP, the same JSON text per WebSocket message):

- requests:   ``{"id": u64, "type": "...", "payload": {...}}``
- responses:  ``{"id": u64, "ok": bool, "error": {"code","message"}?,
  "result": {...}?}``
- telemetry:  ``{"type": "telemetry", "frame": {...}}``
- events:     ``{"type": "event", "event": {...}}`` (asynchronous
  progress notifications, e.g. per-joint calibration phases)

Every codec function validates strictly and raises ProtocolError with a
machine-readable code on violation; encode/parse round-trips preserve
messages exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

ERR_SCHEMA = "schema"
ERR_UNKNOWN_TYPE = "unknown_type"
ERR_BUSY = "busy"
ERR_UNCALIBRATED = "uncalibrated"
ERR_UNAUTHORIZED = "unauthorized"
ERR_FAILED = "failed"

MAX_ID = 2**64 - 1

COMMAND_TYPES = (
    "auth",
    "ping",
    "get_model",
    "get_status",
    "set_targets",
    "jog",
    "calibrate",
    "run_trajectory",
    "run_bench",
    "subscribe",
    "tension_check",
    "set_fault",
)

FAULT_KINDS = ("tendon", "force", "tactile")
TACTILE_FAULT_MODES = ("healthy", "degraded", "open_circuit")
MODES = ("idle", "jog", "trajectory", "calibrating", "bench")


class ProtocolError(ValueError):
    """A message violated the wire schema.

    Attributes:
        code: Machine-readable error code for the response envelope.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Request:
    id: int
    type: str
    payload: dict


@dataclass(frozen=True)
class Response:
    id: int
    ok: bool
    result: Optional[dict] = None
    error: Optional[dict] = None


@dataclass(frozen=True)
class Telemetry:
    frame: dict


@dataclass(frozen=True)
class Event:
    event: dict


Message = Union[Request, Response, Telemetry, Event]


def error_response(request_id: int, code: str, message: str) -> Response:
    return Response(
        id=request_id, ok=False, error={"code": code, "message": message}
    )


def ok_response(request_id: int, result: Optional[dict] = None) -> Response:
    return Response(id=request_id, ok=True, result=result)


def _require_object(value, what: str) -> dict:
    if not isinstance(value, dict):
        raise ProtocolError(ERR_SCHEMA, f"{what} must be a JSON object")
    return value


def _require_keys(obj: Mapping, required: set, optional: set, what: str) -> None:
    keys = set(obj)
    missing = required - keys
    if missing:
        raise ProtocolError(
            ERR_SCHEMA, f"{what}: missing field(s) {', '.join(sorted(missing))}"
        )
    extra = keys - required - optional
    if extra:
        raise ProtocolError(
            ERR_SCHEMA, f"{what}: unknown field(s) {', '.join(sorted(extra))}"
        )


def _require_id(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProtocolError(ERR_SCHEMA, "id must be an integer")
    if not 0 <= value <= MAX_ID:
        raise ProtocolError(ERR_SCHEMA, "id must fit an unsigned 64-bit integer")
    return value


def _require_str(obj: Mapping, key: str, what: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise ProtocolError(ERR_SCHEMA, f"{what}: {key} must be a string")
    return value


def _require_number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(ERR_SCHEMA, f"{what} must be a number")
    number = float(value)
    if not math.isfinite(number):
        raise ProtocolError(ERR_SCHEMA, f"{what} must be finite")
    return number


def _require_bool(value, what: str) -> bool:
    if not isinstance(value, bool):
        raise ProtocolError(ERR_SCHEMA, f"{what} must be a boolean")
    return value


def parse_request(doc) -> Request:
    doc = _require_object(doc, "request")
    _require_keys(doc, {"id", "type", "payload"}, set(), "request")
    request_id = _require_id(doc["id"])
    kind = _require_str(doc, "type", "request")
    payload = _require_object(doc["payload"], "payload")
    return Request(id=request_id, type=kind, payload=payload)


def parse_response(doc) -> Response:
    doc = _require_object(doc, "response")
    _require_keys(doc, {"id", "ok"}, {"result", "error"}, "response")
    request_id = _require_id(doc["id"])
    ok = _require_bool(doc.get("ok"), "response: ok")
    result = doc.get("result")
    error = doc.get("error")
    if ok:
        if error is not None:
            raise ProtocolError(ERR_SCHEMA, "ok response must not carry an error")
        if result is not None:
            result = _require_object(result, "result")
    else:
        if result is not None:
            raise ProtocolError(
                ERR_SCHEMA, "error response must not carry a result"
            )
        error = _require_object(error, "error")
        _require_keys(error, {"code", "message"}, set(), "error")
        _require_str(error, "code", "error")
        _require_str(error, "message", "error")
    return Response(id=request_id, ok=ok, result=result, error=error)


def parse_message(text: Union[str, bytes]) -> Message:
    """Parses one wire line into its message type.

    Raises:
        ProtocolError: not JSON, not an object, or no recognizable shape.
    """
    try:
        doc = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(ERR_SCHEMA, f"invalid JSON: {exc}")
    doc = _require_object(doc, "message")
    if doc.get("type") == "telemetry":
        _require_keys(doc, {"type", "frame"}, set(), "telemetry")
        return Telemetry(frame=_require_object(doc["frame"], "frame"))
    if doc.get("type") == "event":
        _require_keys(doc, {"type", "event"}, set(), "event")
        return Event(event=_require_object(doc["event"], "event"))
    if "ok" in doc:
        return parse_response(doc)
    return parse_request(doc)


def encode(message: Message) -> str:
    """Renders a message to one line of compact JSON (no newline)."""
    if isinstance(message, Request):
        doc: dict = {
            "id": message.id,
            "type": message.type,
            "payload": message.payload,
        }
    elif isinstance(message, Response):
        doc = {"id": message.id, "ok": message.ok}
        if message.error is not None:
            doc["error"] = message.error
        if message.result is not None:
            doc["result"] = message.result
    elif isinstance(message, Telemetry):
        doc = {"type": "telemetry", "frame": message.frame}
    elif isinstance(message, Event):
        doc = {"type": "event", "event": message.event}
    else:
        raise TypeError(f"cannot encode {type(message).__name__}")
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# Per-command payload schemas
# ---------------------------------------------------------------------------


def _validate_auth(payload: dict) -> None:
    _require_keys(payload, {"token"}, set(), "auth")
    _require_str(payload, "token", "auth")


def _validate_empty(payload: dict) -> None:
    if payload:
        raise ProtocolError(
            ERR_SCHEMA, f"unexpected field(s) {', '.join(sorted(payload))}"
        )


def _validate_set_targets(payload: dict) -> None:
    _require_keys(payload, {"targets"}, set(), "set_targets")
    targets = _require_object(payload["targets"], "targets")
    if not targets:
        raise ProtocolError(ERR_SCHEMA, "targets must not be empty")
    for name, value in targets.items():
        _require_number(value, f"target for {name}")


def _validate_jog(payload: dict) -> None:
    _require_keys(payload, {"joint", "delta_deg"}, set(), "jog")
    _require_str(payload, "joint", "jog")
    _require_number(payload["delta_deg"], "delta_deg")


def _validate_run_trajectory(payload: dict) -> None:
    kind = _require_str(payload, "kind", "run_trajectory")
    if kind == "sine":
        _require_keys(
            payload,
            {"kind", "joint", "frequency_hz", "amplitude_deg", "duration_s"},
            {"offset_deg"},
            "sine trajectory",
        )
        _require_str(payload, "joint", "sine trajectory")
        for key in ("frequency_hz", "amplitude_deg", "duration_s"):
            _require_number(payload[key], key)
        if "offset_deg" in payload:
            _require_number(payload["offset_deg"], "offset_deg")
    elif kind == "grasp":
        _require_keys(payload, {"kind", "duration_s"}, set(), "grasp trajectory")
        _require_number(payload["duration_s"], "duration_s")
    else:
        raise ProtocolError(
            ERR_SCHEMA, f"trajectory kind must be sine or grasp, got {kind!r}"
        )


def _validate_run_bench(payload: dict) -> None:
    kind = _require_str(payload, "kind", "run_bench")
    if kind == "sine":
        _require_keys(
            payload,
            {"kind", "joint", "frequency_hz", "amplitude_deg"},
            {"duration_s", "auto_calibrate"},
            "sine bench",
        )
        _require_str(payload, "joint", "sine bench")
        for key in ("frequency_hz", "amplitude_deg"):
            _require_number(payload[key], key)
        if "duration_s" in payload:
            _require_number(payload["duration_s"], "duration_s")
    elif kind == "reliability":
        _require_keys(
            payload,
            {"kind", "n_cycles"},
            {"auto_calibrate", "csv_path"},
            "reliability bench",
        )
        n = payload["n_cycles"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 0:
            raise ProtocolError(
                ERR_SCHEMA, "n_cycles must be a non-negative integer"
            )
        if "csv_path" in payload:
            _require_str(payload, "csv_path", "reliability bench")
    else:
        raise ProtocolError(
            ERR_SCHEMA, f"bench kind must be sine or reliability, got {kind!r}"
        )
    if "auto_calibrate" in payload:
        _require_bool(payload["auto_calibrate"], "auto_calibrate")


def _validate_subscribe(payload: dict) -> None:
    _require_keys(payload, {"rate_hz"}, set(), "subscribe")
    rate = _require_number(payload["rate_hz"], "rate_hz")
    if rate < 0:
        raise ProtocolError(ERR_SCHEMA, "rate_hz must be non-negative")


def _validate_tension_check(payload: dict) -> None:
    _require_keys(payload, set(), {"joints"}, "tension_check")
    if "joints" in payload:
        joints = payload["joints"]
        if not isinstance(joints, list) or not all(
            isinstance(j, str) for j in joints
        ):
            raise ProtocolError(ERR_SCHEMA, "joints must be a list of names")
        if not joints:
            raise ProtocolError(ERR_SCHEMA, "joints must not be empty")


def _validate_set_fault(payload: dict) -> None:
    kind = _require_str(payload, "kind", "set_fault")
    if kind == "tendon":
        _require_keys(payload, {"kind", "joint", "connected"}, set(), "tendon fault")
        _require_str(payload, "joint", "tendon fault")
        _require_bool(payload["connected"], "connected")
    elif kind == "force":
        _require_keys(payload, {"kind", "finger", "newtons"}, set(), "force fault")
        _require_str(payload, "finger", "force fault")
        if _require_number(payload["newtons"], "newtons") < 0:
            raise ProtocolError(ERR_SCHEMA, "newtons must be non-negative")
    elif kind == "tactile":
        _require_keys(
            payload, {"kind", "finger", "mode"}, {"threshold_n"}, "tactile fault"
        )
        _require_str(payload, "finger", "tactile fault")
        mode = _require_str(payload, "mode", "tactile fault")
        if mode not in TACTILE_FAULT_MODES:
            raise ProtocolError(
                ERR_SCHEMA,
                f"mode must be one of {', '.join(TACTILE_FAULT_MODES)}",
            )
        if "threshold_n" in payload:
            _require_number(payload["threshold_n"], "threshold_n")
    else:
        raise ProtocolError(
            ERR_SCHEMA,
            f"fault kind must be one of {', '.join(FAULT_KINDS)}, got {kind!r}",
        )


_VALIDATORS = {
    "auth": _validate_auth,
    "ping": _validate_empty,
    "get_model": _validate_empty,
    "get_status": _validate_empty,
    "calibrate": _validate_empty,
    "set_targets": _validate_set_targets,
    "jog": _validate_jog,
    "run_trajectory": _validate_run_trajectory,
    "run_bench": _validate_run_bench,
    "subscribe": _validate_subscribe,
    "tension_check": _validate_tension_check,
    "set_fault": _validate_set_fault,
}


def validate_command(request: Request) -> None:
    """Checks a request's type and payload shape.

    Raises:
        ProtocolError: with code ``unknown_type`` for an unrecognized
            command, ``schema`` for a payload not matching its type.
    """
    validator = _VALIDATORS.get(request.type)
    if validator is None:
        raise ProtocolError(
            ERR_UNKNOWN_TYPE, f"unknown command type {request.type!r}"
        )
    try:
        validator(request.payload)
    except ProtocolError as exc:
        raise ProtocolError(exc.code, f"{request.type}: {exc}") from None

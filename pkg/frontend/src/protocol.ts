/**
 * Wire vocabulary spoken with the hand daemon.
 *
 * Every message is one compact JSON document. The console sends requests
 * and receives three message shapes back: responses (correlated by id),
 * telemetry frames, and progress events.
 */

export class ProtocolError extends Error {}

export interface ErrorInfo {
  code: string;
  message: string;
}

export interface ResponseMsg {
  kind: "response";
  id: number;
  ok: boolean;
  result: Record<string, unknown> | null;
  error: ErrorInfo | null;
}

export interface JointTelemetry {
  target_deg: number;
  estimated_deg: number;
}

export interface MotorTelemetry {
  position_rad: number;
  current_ma: number;
  temperature_c: number;
}

export interface TactileTelemetry {
  voltage_v: number;
  touch: boolean;
}

export interface TelemetryFrame {
  timestamp: number;
  calibrated: boolean;
  mode: string;
  joints: Record<string, JointTelemetry>;
  motors: Record<string, MotorTelemetry>;
  tactile: Record<string, TactileTelemetry>;
}

export interface TelemetryMsg {
  kind: "telemetry";
  frame: TelemetryFrame;
}

export interface EventMsg {
  kind: "event";
  event: Record<string, unknown>;
}

export type Incoming = ResponseMsg | TelemetryMsg | EventMsg;

function isObject(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function requireNumber(value: unknown, where: string): number {
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new ProtocolError(`${where} must be a finite number`);
  }
  return value;
}

function requireBoolean(value: unknown, where: string): boolean {
  if (typeof value !== "boolean") {
    throw new ProtocolError(`${where} must be a boolean`);
  }
  return value;
}

function requireObject(
  value: unknown,
  where: string,
): Record<string, unknown> {
  if (!isObject(value)) {
    throw new ProtocolError(`${where} must be an object`);
  }
  return value;
}

export function encodeRequest(
  id: number,
  type: string,
  payload: Record<string, unknown>,
): string {
  if (!Number.isInteger(id) || id < 0) {
    throw new ProtocolError("request id must be a non-negative integer");
  }
  return JSON.stringify({ id, type, payload });
}

function parseFrame(value: unknown): TelemetryFrame {
  const doc = requireObject(value, "telemetry frame");
  const frame: TelemetryFrame = {
    timestamp: requireNumber(doc.timestamp, "frame.timestamp"),
    calibrated: requireBoolean(doc.calibrated, "frame.calibrated"),
    mode: String(doc.mode ?? ""),
    joints: {},
    motors: {},
    tactile: {},
  };
  const joints = requireObject(doc.joints, "frame.joints");
  for (const [name, entry] of Object.entries(joints)) {
    const j = requireObject(entry, `frame.joints.${name}`);
    frame.joints[name] = {
      target_deg: requireNumber(j.target_deg, `joints.${name}.target_deg`),
      estimated_deg: requireNumber(
        j.estimated_deg,
        `joints.${name}.estimated_deg`,
      ),
    };
  }
  const motors = requireObject(doc.motors, "frame.motors");
  for (const [id, entry] of Object.entries(motors)) {
    const m = requireObject(entry, `frame.motors.${id}`);
    frame.motors[id] = {
      position_rad: requireNumber(m.position_rad, `motors.${id}.position_rad`),
      current_ma: requireNumber(m.current_ma, `motors.${id}.current_ma`),
      temperature_c: requireNumber(
        m.temperature_c,
        `motors.${id}.temperature_c`,
      ),
    };
  }
  const tactile = requireObject(doc.tactile, "frame.tactile");
  for (const [finger, entry] of Object.entries(tactile)) {
    const t = requireObject(entry, `frame.tactile.${finger}`);
    frame.tactile[finger] = {
      voltage_v: requireNumber(t.voltage_v, `tactile.${finger}.voltage_v`),
      touch: requireBoolean(t.touch, `tactile.${finger}.touch`),
    };
  }
  return frame;
}

/** Parses one incoming message, rejecting anything malformed. */
export function parseIncoming(raw: string): Incoming {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    throw new ProtocolError("message is not valid JSON");
  }
  const msg = requireObject(doc, "message");
  if (msg.type === "telemetry") {
    return { kind: "telemetry", frame: parseFrame(msg.frame) };
  }
  if (msg.type === "event") {
    return { kind: "event", event: requireObject(msg.event, "event body") };
  }
  if ("ok" in msg) {
    const id = requireNumber(msg.id, "response id");
    if (!Number.isInteger(id) || id < 0) {
      throw new ProtocolError("response id must be a non-negative integer");
    }
    const ok = requireBoolean(msg.ok, "response ok");
    let error: ErrorInfo | null = null;
    if (!ok) {
      const body = requireObject(msg.error, "response error");
      error = {
        code: String(body.code ?? ""),
        message: String(body.message ?? ""),
      };
      if (!error.code) {
        throw new ProtocolError("error responses need a code");
      }
    }
    const result =
      msg.result === undefined || msg.result === null
        ? null
        : requireObject(msg.result, "response result");
    return { kind: "response", id, ok, result, error };
  }
  throw new ProtocolError("unrecognized message shape");
}

/**
 * Panel state machines, kept free of DOM concerns so they can be driven
 * by tests and rendered by thin view code.
 */

import { CommandLimiter, type LimiterOptions } from "./limiter.js";
import type { TelemetryFrame } from "./protocol.js";
import type { SessionState } from "./session.js";

export interface Requester {
  request(
    type: string,
    payload?: Record<string, unknown>,
    timeoutMs?: number,
  ): Promise<Record<string, unknown>>;
}

/**
 * Jog sliders are live only when the session is connected, the hand is
 * calibrated, and nothing is sweeping end stops.
 */
export function jogEnabled(
  state: SessionState,
  frame: TelemetryFrame | null,
): boolean {
  return (
    state === "connected" &&
    frame !== null &&
    frame.calibrated &&
    frame.mode !== "calibrating"
  );
}

/** Streams absolute joint targets, coalesced to at most `maxHz` commands. */
export class JogPanel {
  readonly limiter: CommandLimiter<Record<string, number>>;
  lastError: { code: string; message: string } | null = null;

  constructor(
    session: Requester,
    maxHz: number = 20,
    limiterOptions: LimiterOptions = {},
  ) {
    this.limiter = new CommandLimiter(
      (targets) => {
        session.request("set_targets", { targets }).catch((error) => {
          this.lastError = {
            code: error.code ?? "failed",
            message: error.message ?? String(error),
          };
        });
      },
      maxHz,
      (prev, next) => ({ ...(prev ?? {}), ...next }),
      limiterOptions,
    );
  }

  /** Slider move: the latest value per joint wins within a send window. */
  slide(joint: string, valueDeg: number): void {
    this.limiter.push({ [joint]: valueDeg });
  }

  dispose(): void {
    this.limiter.dispose();
  }
}

export type CalJointState = "pending" | "sweeping" | "done" | "failed";

export interface CalRow {
  joint: string;
  state: CalJointState;
  ratio: number | null;
  message: string | null;
}

/**
 * Tracks per-joint calibration progress from daemon events. Rows update
 * for any calibration run on the daemon, whoever started it.
 */
export class CalibrationPanel {
  running = false;
  lastError: { code: string; message: string } | null = null;

  private order: string[] = [];
  private rows = new Map<string, CalRow>();

  begin(joints: string[]): void {
    this.order = [...joints];
    this.rows = new Map(
      joints.map((joint) => [
        joint,
        { joint, state: "pending" as CalJointState, ratio: null, message: null },
      ]),
    );
    this.running = true;
    this.lastError = null;
  }

  private row(joint: string): CalRow {
    let row = this.rows.get(joint);
    if (row === undefined) {
      row = { joint, state: "pending", ratio: null, message: null };
      this.rows.set(joint, row);
      this.order.push(joint);
    }
    return row;
  }

  /** Applies one daemon event; returns true when it was a calibration event. */
  applyEvent(event: Record<string, unknown>): boolean {
    if (event.kind !== "calibration" || typeof event.joint !== "string") {
      return false;
    }
    const row = this.row(event.joint);
    switch (event.phase) {
      case "start":
      case "flexion_sweep":
      case "extension_sweep":
        row.state = "sweeping";
        break;
      case "done":
        row.state = "done";
        row.ratio = typeof event.ratio === "number" ? event.ratio : null;
        break;
      case "failed":
        row.state = "failed";
        row.message =
          typeof event.message === "string" ? event.message : null;
        break;
      default:
        return false;
    }
    return true;
  }

  finish(): void {
    this.running = false;
  }

  fail(error: { code: string; message: string }): void {
    this.lastError = error;
    this.running = false;
  }

  allRows(): CalRow[] {
    return this.order.map((joint) => this.rows.get(joint)!);
  }

  summary(): { done: number; failed: number; total: number } {
    let done = 0;
    let failed = 0;
    for (const row of this.rows.values()) {
      if (row.state === "done") {
        done += 1;
      } else if (row.state === "failed") {
        failed += 1;
      }
    }
    return { done, failed, total: this.rows.size };
  }
}

/** Runs a calibration through a session and a panel together. */
export async function runCalibration(
  session: Requester,
  panel: CalibrationPanel,
  joints: string[],
  timeoutMs: number = 300_000,
): Promise<Record<string, unknown> | null> {
  panel.begin(joints);
  try {
    const result = await session.request("calibrate", {}, timeoutMs);
    panel.finish();
    return result;
  } catch (error) {
    const commandError = error as { code?: string; message?: string };
    panel.fail({
      code: commandError.code ?? "failed",
      message: commandError.message ?? String(error),
    });
    return null;
  }
}

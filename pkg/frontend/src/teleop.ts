/**
 * Teleoperation playback: load a retargeted joint trace and stream it to
 * the hand as absolute targets, capped at the panel command-rate budget.
 *
 * Two trace formats are accepted:
 *  - CSV with header `t,<joint...>` — what `orcactl retarget` writes.
 *  - NDJSON, one `{"t": seconds, "joints": {name: degrees}}` per line.
 * Retargeting itself happens offline (`orcactl retarget`); the console
 * only replays the resulting joint trajectories.
 */

import type { Requester } from "./panels.js";

export interface JointRow {
  t: number;
  joints: Record<string, number>;
}

export function parseJointCsv(text: string): JointRow[] {
  const lines = text.split(/\r?\n/).filter((line) => line.trim() !== "");
  if (lines.length < 2) {
    throw new Error("trace needs a header and at least one row");
  }
  const header = lines[0].split(",");
  if (header[0] !== "t" || header.length < 2) {
    throw new Error("trace header must be t,<joint names>");
  }
  const names = header.slice(1);
  return lines.slice(1).map((line, index) => {
    const cells = line.split(",");
    if (cells.length !== header.length) {
      throw new Error(`row ${index + 1} has ${cells.length} cells, expected ${header.length}`);
    }
    const values = cells.map((cell) => {
      const value = Number(cell);
      if (!Number.isFinite(value)) {
        throw new Error(`row ${index + 1} has a non-numeric cell: ${cell}`);
      }
      return value;
    });
    const joints: Record<string, number> = {};
    names.forEach((name, column) => {
      joints[name] = values[column + 1];
    });
    return { t: values[0], joints };
  });
}

export function parseJointNdjson(text: string): JointRow[] {
  const lines = text.split(/\r?\n/).filter((line) => line.trim() !== "");
  if (lines.length === 0) {
    throw new Error("trace is empty");
  }
  return lines.map((line, index) => {
    let record: unknown;
    try {
      record = JSON.parse(line);
    } catch {
      throw new Error(`line ${index + 1} is not valid JSON`);
    }
    if (typeof record !== "object" || record === null) {
      throw new Error(`line ${index + 1} is not an object`);
    }
    const { t, joints } = record as { t?: unknown; joints?: unknown };
    if (typeof t !== "number" || !Number.isFinite(t)) {
      throw new Error(`line ${index + 1} is missing a numeric "t"`);
    }
    if (typeof joints !== "object" || joints === null || Array.isArray(joints)) {
      throw new Error(`line ${index + 1} is missing a "joints" object`);
    }
    const out: Record<string, number> = {};
    for (const [name, value] of Object.entries(joints as Record<string, unknown>)) {
      if (typeof value !== "number" || !Number.isFinite(value)) {
        throw new Error(`line ${index + 1}: joint ${name} is not a finite number`);
      }
      out[name] = value;
    }
    return { t, joints: out };
  });
}

/** Sniffs CSV vs NDJSON from the first non-blank character. */
export function parseTrace(text: string): JointRow[] {
  const first = text.trimStart()[0];
  if (first === undefined) {
    throw new Error("trace is empty");
  }
  return first === "{" ? parseJointNdjson(text) : parseJointCsv(text);
}

/**
 * Thins a trace to at most `maxHz` rows per second of trace time. The
 * final row is always kept so the hand settles on the trace's last pose.
 */
export function playbackPlan(rows: JointRow[], maxHz: number = 20): JointRow[] {
  if (rows.length === 0) {
    return [];
  }
  const minDt = 1 / maxHz;
  const plan: JointRow[] = [rows[0]];
  for (let i = 1; i < rows.length - 1; i += 1) {
    if (rows[i].t - plan[plan.length - 1].t >= minDt - 1e-12) {
      plan.push(rows[i]);
    }
  }
  const last = rows[rows.length - 1];
  if (plan[plan.length - 1] !== last) {
    plan.push(last);
  }
  return plan;
}

export class TracePlayer {
  playing = false;
  sent = 0;
  lastError: string | null = null;

  private abort = false;

  constructor(private readonly session: Requester) {}

  /** Streams the plan in real time relative to each row's timestamp. */
  async play(
    rows: JointRow[],
    maxHz: number = 20,
    onProgress?: (sent: number, total: number) => void,
  ): Promise<boolean> {
    const plan = playbackPlan(rows, maxHz);
    if (plan.length === 0) {
      return true;
    }
    this.playing = true;
    this.abort = false;
    this.sent = 0;
    this.lastError = null;
    const startT = plan[0].t;
    const startedAt = Date.now();
    try {
      for (const row of plan) {
        if (this.abort) {
          return false;
        }
        const due = startedAt + (row.t - startT) * 1000;
        const wait = due - Date.now();
        if (wait > 0) {
          await new Promise((resolve) => setTimeout(resolve, wait));
        }
        await this.session.request("set_targets", { targets: row.joints });
        this.sent += 1;
        onProgress?.(this.sent, plan.length);
      }
      return true;
    } catch (error) {
      this.lastError = (error as Error).message ?? String(error);
      return false;
    } finally {
      this.playing = false;
    }
  }

  stop(): void {
    this.abort = true;
  }
}

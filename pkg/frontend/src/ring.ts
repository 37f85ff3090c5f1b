/**
 * Rolling time-series storage for the telemetry plots.
 *
 * Samples older than the window are evicted on push. A `null` value is a
 * deliberate break marker: the plot renderer lifts the pen there instead
 * of interpolating across a gap.
 */

import type { TelemetryFrame } from "./protocol.js";

export interface Sample {
  t: number;
  v: number | null;
}

export class SeriesRing {
  private samples: Sample[] = [];

  constructor(readonly windowS: number = 30) {
    if (windowS <= 0) {
      throw new Error("window must be positive");
    }
  }

  push(t: number, v: number | null): void {
    const last = this.samples[this.samples.length - 1];
    if (last !== undefined && last.v === null && v === null) {
      return; // collapse consecutive break markers
    }
    this.samples.push({ t, v });
    const cutoff = t - this.windowS;
    let drop = 0;
    while (drop < this.samples.length && this.samples[drop].t < cutoff) {
      drop += 1;
    }
    if (drop > 0) {
      this.samples.splice(0, drop);
    }
  }

  window(): readonly Sample[] {
    return this.samples;
  }

  latest(): Sample | null {
    return this.samples[this.samples.length - 1] ?? null;
  }

  /** Contiguous segments between break markers, for pen-up rendering. */
  segments(): Sample[][] {
    const out: Sample[][] = [];
    let current: Sample[] = [];
    for (const sample of this.samples) {
      if (sample.v === null) {
        if (current.length > 0) {
          out.push(current);
          current = [];
        }
      } else {
        current.push(sample);
      }
    }
    if (current.length > 0) {
      out.push(current);
    }
    return out;
  }
}

/**
 * Latest-frame snapshot plus per-signal rolling windows.
 *
 * Rendering reads from here on its own cadence; message arrival only
 * updates state. A gap longer than `gapFactor` expected frame intervals
 * inserts a break marker into every series.
 */
export class TelemetryStore {
  latest: TelemetryFrame | null = null;
  frameCount = 0;
  rateHz = 50;

  private lastT: number | null = null;
  private jointTargets = new Map<string, SeriesRing>();
  private jointEstimates = new Map<string, SeriesRing>();
  private motorCurrents = new Map<string, SeriesRing>();

  constructor(
    readonly windowS: number = 30,
    readonly gapFactor: number = 3,
  ) {}

  private ring(map: Map<string, SeriesRing>, key: string): SeriesRing {
    let ring = map.get(key);
    if (ring === undefined) {
      ring = new SeriesRing(this.windowS);
      map.set(key, ring);
    }
    return ring;
  }

  push(frame: TelemetryFrame): void {
    const t = frame.timestamp;
    if (
      this.lastT !== null &&
      t - this.lastT > this.gapFactor / Math.max(this.rateHz, 1e-9)
    ) {
      const mid = (this.lastT + t) / 2;
      for (const map of [
        this.jointTargets,
        this.jointEstimates,
        this.motorCurrents,
      ]) {
        for (const ring of map.values()) {
          ring.push(mid, null);
        }
      }
    }
    for (const [name, joint] of Object.entries(frame.joints)) {
      this.ring(this.jointTargets, name).push(t, joint.target_deg);
      this.ring(this.jointEstimates, name).push(t, joint.estimated_deg);
    }
    for (const [id, motor] of Object.entries(frame.motors)) {
      this.ring(this.motorCurrents, id).push(t, motor.current_ma);
    }
    this.lastT = t;
    this.latest = frame;
    this.frameCount += 1;
  }

  target(joint: string): readonly Sample[] {
    return this.jointTargets.get(joint)?.window() ?? [];
  }

  estimate(joint: string): readonly Sample[] {
    return this.jointEstimates.get(joint)?.window() ?? [];
  }

  current(motorId: string): readonly Sample[] {
    return this.motorCurrents.get(motorId)?.window() ?? [];
  }

  targetSegments(joint: string): Sample[][] {
    return this.jointTargets.get(joint)?.segments() ?? [];
  }

  estimateSegments(joint: string): Sample[][] {
    return this.jointEstimates.get(joint)?.segments() ?? [];
  }

  currentSegments(motorId: string): Sample[][] {
    return this.motorCurrents.get(motorId)?.segments() ?? [];
  }
}

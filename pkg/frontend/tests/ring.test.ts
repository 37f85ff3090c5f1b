import { describe, expect, it } from "vitest";
import { SeriesRing, TelemetryStore } from "../src/ring.js";
import type { TelemetryFrame } from "../src/protocol.js";

function frameAt(t: number, target = 10, estimate = 9.5): TelemetryFrame {
  return {
    timestamp: t,
    calibrated: true,
    mode: "jog",
    joints: { index_mcp: { target_deg: target, estimated_deg: estimate } },
    motors: { "6": { position_rad: 0.4, current_ma: 150 + t, temperature_c: 36 } },
    tactile: { index: { voltage_v: 0.0, touch: false } },
  };
}

describe("SeriesRing", () => {
  it("evicts samples older than the window", () => {
    const ring = new SeriesRing(30);
    for (let t = 0; t <= 40; t += 1) {
      ring.push(t, t);
    }
    const window = ring.window();
    expect(window[0].t).toBe(10);
    expect(window[window.length - 1].t).toBe(40);
    expect(window).toHaveLength(31);
  });

  it("splits segments at break markers and never bridges them", () => {
    const ring = new SeriesRing(30);
    ring.push(0, 1);
    ring.push(1, 2);
    ring.push(1.5, null);
    ring.push(2, 3);
    const segments = ring.segments();
    expect(segments).toHaveLength(2);
    expect(segments[0].map((s) => s.v)).toEqual([1, 2]);
    expect(segments[1].map((s) => s.v)).toEqual([3]);
  });

  it("collapses consecutive break markers", () => {
    const ring = new SeriesRing(30);
    ring.push(0, 1);
    ring.push(1, null);
    ring.push(2, null);
    expect(ring.window()).toHaveLength(2);
  });

  it("latest returns the newest sample", () => {
    const ring = new SeriesRing(30);
    expect(ring.latest()).toBeNull();
    ring.push(5, 42);
    expect(ring.latest()).toEqual({ t: 5, v: 42 });
  });
});

describe("TelemetryStore", () => {
  it("keeps the latest frame snapshot and a frame count", () => {
    const store = new TelemetryStore();
    expect(store.latest).toBeNull();
    store.push(frameAt(1));
    store.push(frameAt(2, 20));
    expect(store.frameCount).toBe(2);
    expect(store.latest?.joints.index_mcp.target_deg).toBe(20);
  });

  it("routes joint targets, estimates, and motor currents to their series", () => {
    const store = new TelemetryStore();
    store.push(frameAt(1, 30, 28));
    expect(store.target("index_mcp").at(-1)?.v).toBe(30);
    expect(store.estimate("index_mcp").at(-1)?.v).toBe(28);
    expect(store.current("6").at(-1)?.v).toBe(151);
    expect(store.target("missing")).toEqual([]);
  });

  it("renders telemetry gaps as breaks, not interpolation", () => {
    const store = new TelemetryStore(30, 3);
    store.rateHz = 50; // expected frame interval 20 ms
    store.push(frameAt(1.0));
    store.push(frameAt(1.02));
    store.push(frameAt(2.0)); // ~1 s dropout
    const segments = store.targetSegments("index_mcp");
    expect(segments).toHaveLength(2);
    expect(segments[0]).toHaveLength(2);
    expect(segments[1]).toHaveLength(1);
    // the estimate and current series break at the same spot
    expect(store.estimateSegments("index_mcp")).toHaveLength(2);
    expect(store.currentSegments("6")).toHaveLength(2);
  });

  it("does not insert breaks for on-schedule frames", () => {
    const store = new TelemetryStore(30, 3);
    store.rateHz = 50;
    for (let i = 0; i < 50; i += 1) {
      store.push(frameAt(1 + i * 0.02));
    }
    expect(store.targetSegments("index_mcp")).toHaveLength(1);
  });
});

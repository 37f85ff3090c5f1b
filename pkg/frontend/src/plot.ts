/**
 * Tiny canvas strip-chart renderer. Series are lists of contiguous
 * segments (gaps between segments are rendered as pen-up breaks, never
 * interpolated across).
 */

import type { Sample } from "./ring.js";

export interface SeriesStyle {
  color: string;
  width?: number;
  dash?: number[];
}

export interface PlotSeries {
  segments: Sample[][];
  style: SeriesStyle;
  label?: string;
}

export interface Viewport {
  width: number;
  height: number;
  tMin: number;
  tMax: number;
  vMin: number;
  vMax: number;
}

export interface Polyline {
  points: Array<[number, number]>;
  style: SeriesStyle;
}

/** Pure mapping from time/value space to pixel polylines. */
export function computePolylines(series: PlotSeries[], view: Viewport): Polyline[] {
  const tSpan = Math.max(view.tMax - view.tMin, 1e-9);
  const vSpan = Math.max(view.vMax - view.vMin, 1e-9);
  const toX = (t: number) => ((t - view.tMin) / tSpan) * view.width;
  const toY = (v: number) => view.height - ((v - view.vMin) / vSpan) * view.height;
  const out: Polyline[] = [];
  for (const s of series) {
    for (const segment of s.segments) {
      const points: Array<[number, number]> = [];
      for (const sample of segment) {
        if (sample.v === null) {
          continue;
        }
        points.push([toX(sample.t), toY(sample.v)]);
      }
      if (points.length > 0) {
        out.push({ points, style: s.style });
      }
    }
  }
  return out;
}

/** Picks a value range covering every sample, padded, with a sane fallback. */
export function autoRange(series: PlotSeries[], padFraction: number = 0.1): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const s of series) {
    for (const segment of s.segments) {
      for (const sample of segment) {
        if (sample.v === null) {
          continue;
        }
        lo = Math.min(lo, sample.v);
        hi = Math.max(hi, sample.v);
      }
    }
  }
  if (!Number.isFinite(lo) || !Number.isFinite(hi)) {
    return [0, 1];
  }
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  const pad = (hi - lo) * padFraction;
  return [lo - pad, hi + pad];
}

export function drawPlot(
  canvas: HTMLCanvasElement,
  series: PlotSeries[],
  tMin: number,
  tMax: number,
  vRange?: [number, number],
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    return;
  }
  const [vMin, vMax] = vRange ?? autoRange(series);
  const view: Viewport = {
    width: canvas.width,
    height: canvas.height,
    tMin,
    tMax,
    vMin,
    vMax,
  };
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#2a2f3a";
  ctx.lineWidth = 1;
  ctx.setLineDash([]);
  for (let i = 1; i < 4; i += 1) {
    const y = (canvas.height * i) / 4;
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(canvas.width, y);
    ctx.stroke();
  }
  for (const line of computePolylines(series, view)) {
    ctx.strokeStyle = line.style.color;
    ctx.lineWidth = line.style.width ?? 1.5;
    ctx.setLineDash(line.style.dash ?? []);
    ctx.beginPath();
    line.points.forEach(([x, y], index) => {
      if (index === 0) {
        ctx.moveTo(x, y);
      } else {
        ctx.lineTo(x, y);
      }
    });
    ctx.stroke();
  }
  ctx.setLineDash([]);
  ctx.fillStyle = "#8b93a7";
  ctx.font = "10px system-ui, sans-serif";
  ctx.fillText(vMax.toFixed(1), 4, 12);
  ctx.fillText(vMin.toFixed(1), 4, canvas.height - 4);
}

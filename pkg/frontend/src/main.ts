/**
 * Browser entry point: wires the session, panels, and plots to the DOM.
 *
 * Everything rendered here traces back to a daemon response or telemetry
 * frame — the UI holds no hand state of its own.
 */

import { ConsoleSession } from "./session.js";
import {
  CalibrationPanel,
  JogPanel,
  jogEnabled,
  runCalibration,
} from "./panels.js";
import { sliderSpecs, validateModelDoc, type ModelDoc } from "./model.js";
import { TelemetryStore } from "./ring.js";
import { drawPlot, type PlotSeries } from "./plot.js";
import { parseTrace, TracePlayer, type JointRow } from "./teleop.js";

const PLOT_WINDOW_S = 30;
const SUBSCRIBE_RATE_HZ = 50;
const PANEL_MAX_HZ = 20;
const FINGERS = ["thumb", "index", "middle", "ring", "pinky"];
const CURRENT_COLORS = [
  "#4cc9f0", "#f72585", "#b5e48c", "#ffd166", "#9d4edd",
  "#06d6a0", "#ef476f", "#118ab2", "#f4a261", "#e9c46a",
  "#80ed99", "#ff70a6", "#a0c4ff", "#fca311", "#caffbf",
  "#bdb2ff", "#ffadad",
];

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
}

function wsUrl(): string {
  const scheme = location.protocol === "https:" ? "wss" : "ws";
  return `${scheme}://${location.host}/`;
}

function authToken(): string {
  return new URLSearchParams(location.search).get("token") ?? "";
}

let toastTimer: ReturnType<typeof setTimeout> | null = null;

function toast(message: string): void {
  const el = byId<HTMLDivElement>("toast");
  el.textContent = message;
  el.classList.add("visible");
  if (toastTimer !== null) {
    clearTimeout(toastTimer);
  }
  toastTimer = setTimeout(() => el.classList.remove("visible"), 4000);
}

function main(): void {
  const session = new ConsoleSession({ url: wsUrl(), token: authToken() });
  const store = new TelemetryStore(PLOT_WINDOW_S);
  const jog = new JogPanel(session, PANEL_MAX_HZ);
  const cal = new CalibrationPanel();
  const player = new TracePlayer(session);

  let model: ModelDoc | null = null;
  let trace: JointRow[] = [];
  let lastFrameAtMs = 0;

  const stateBadge = byId<HTMLSpanElement>("status-state");
  const modeBadge = byId<HTMLSpanElement>("status-mode");
  const calBadge = byId<HTMLSpanElement>("status-calibrated");
  const banner = byId<HTMLDivElement>("banner");
  const jogGrid = byId<HTMLDivElement>("jog-grid");
  const calRunButton = byId<HTMLButtonElement>("cal-run");
  const calRowsBody = byId<HTMLTableSectionElement>("cal-rows");
  const calSummary = byId<HTMLSpanElement>("cal-summary");
  const jointSelect = byId<HTMLSelectElement>("plot-joint");
  const anglesCanvas = byId<HTMLCanvasElement>("plot-angles");
  const currentsCanvas = byId<HTMLCanvasElement>("plot-currents");
  const touchBadges = byId<HTMLDivElement>("touch-badges");
  const benchKind = byId<HTMLSelectElement>("bench-kind");
  const benchRun = byId<HTMLButtonElement>("bench-run");
  const benchResult = byId<HTMLSpanElement>("bench-result");
  const teleopFile = byId<HTMLInputElement>("teleop-file");
  const teleopPlay = byId<HTMLButtonElement>("teleop-play");
  const teleopStop = byId<HTMLButtonElement>("teleop-stop");
  const teleopStatus = byId<HTMLSpanElement>("teleop-status");

  const sliders = new Map<
    string,
    { input: HTMLInputElement; value: HTMLSpanElement }
  >();

  for (const finger of FINGERS) {
    const badge = document.createElement("span");
    badge.className = "touch-badge";
    badge.dataset.finger = finger;
    badge.textContent = finger;
    touchBadges.appendChild(badge);
  }

  function buildJogGrid(doc: ModelDoc): void {
    jogGrid.textContent = "";
    jointSelect.textContent = "";
    for (const spec of sliderSpecs(doc)) {
      const row = document.createElement("div");
      row.className = "jog-row";
      const label = document.createElement("label");
      label.textContent = spec.joint;
      const input = document.createElement("input");
      input.type = "range";
      // Bounds come straight from the daemon's model document.
      input.min = String(spec.min);
      input.max = String(spec.max);
      input.step = "0.5";
      input.value = "0";
      input.disabled = true;
      const value = document.createElement("span");
      value.className = "jog-value";
      value.textContent = "–";
      input.addEventListener("input", () => {
        const deg = Number(input.value);
        value.textContent = `${deg.toFixed(1)}°`;
        jog.slide(spec.joint, deg);
      });
      row.append(label, input, value);
      jogGrid.appendChild(row);
      sliders.set(spec.joint, { input, value });

      const option = document.createElement("option");
      option.value = spec.joint;
      option.textContent = spec.joint;
      jointSelect.appendChild(option);
    }
    jointSelect.value = "index_mcp";
  }

  function renderCalRows(): void {
    calRowsBody.textContent = "";
    for (const row of cal.allRows()) {
      const tr = document.createElement("tr");
      tr.className = `cal-${row.state}`;
      const ratio =
        row.ratio === null ? "" : `${row.ratio.toFixed(6)} rad/deg`;
      const detail = row.state === "failed" ? (row.message ?? "") : ratio;
      for (const text of [row.joint, row.state, detail]) {
        const td = document.createElement("td");
        td.textContent = text;
        tr.appendChild(td);
      }
      calRowsBody.appendChild(tr);
    }
    const { done, failed, total } = cal.summary();
    calSummary.textContent =
      total === 0 ? "" : `${done}/${total} done${failed ? `, ${failed} failed` : ""}`;
  }

  function render(): void {
    const frame = store.latest;
    const now = Date.now();
    // A dead socket or stalled telemetry greys the controls out fast.
    const stale =
      session.state !== "connected" ||
      (lastFrameAtMs > 0 && now - lastFrameAtMs > 1000);
    const live = !stale && jogEnabled(session.state, frame);

    stateBadge.textContent = session.state;
    stateBadge.className = `badge state-${session.state}`;
    modeBadge.textContent = frame?.mode ?? "–";
    calBadge.textContent = frame
      ? frame.calibrated
        ? "calibrated"
        : "uncalibrated"
      : "–";

    document.body.classList.toggle("stale", stale);
    banner.hidden = !(
      session.state === "connected" &&
      frame !== null &&
      !frame.calibrated
    );

    for (const { input } of sliders.values()) {
      input.disabled = !live;
    }
    calRunButton.disabled = session.state !== "connected" || cal.running;
    benchRun.disabled = !live;
    teleopPlay.disabled = !live || trace.length === 0 || player.playing;
    teleopStop.disabled = !player.playing;

    if (frame !== null) {
      for (const badge of touchBadges.children) {
        const finger = (badge as HTMLElement).dataset.finger ?? "";
        badge.classList.toggle("touch", frame.tactile[finger]?.touch === true);
      }
    }

    if (frame !== null) {
      const tMax = frame.timestamp;
      const tMin = tMax - PLOT_WINDOW_S;
      const joint = jointSelect.value;
      const angleSeries: PlotSeries[] = [
        {
          segments: store.targetSegments(joint),
          style: { color: "#8b93a7", dash: [4, 3] },
          label: "target",
        },
        {
          segments: store.estimateSegments(joint),
          style: { color: "#4cc9f0", width: 2 },
          label: "estimated",
        },
      ];
      drawPlot(anglesCanvas, angleSeries, tMin, tMax);
      const currentSeries: PlotSeries[] = Object.keys(frame.motors)
        .sort((a, b) => Number(a) - Number(b))
        .map((id, index) => ({
          segments: store.currentSegments(id),
          style: { color: CURRENT_COLORS[index % CURRENT_COLORS.length] },
          label: id,
        }));
      drawPlot(currentsCanvas, currentSeries, tMin, tMax);
    }

    requestAnimationFrame(render);
  }

  calRunButton.addEventListener("click", () => {
    if (model === null || cal.running) {
      return;
    }
    const joints = model.joints.map((j) => j.name);
    void runCalibration(session, cal, joints).then((result) => {
      renderCalRows();
      if (result === null && cal.lastError !== null) {
        toast(cal.lastError.message); // daemon wording, shown verbatim
      }
    });
    renderCalRows();
  });

  benchRun.addEventListener("click", () => {
    const frequency = Number(benchKind.value);
    benchResult.textContent = "running…";
    session
      .request(
        "run_bench",
        {
          kind: "sine",
          joint: "index_mcp",
          amplitude_deg: 40.0,
          frequency_hz: frequency,
          duration_s: 10.0,
        },
        120_000,
      )
      .then((result) => {
        const report = (result.report ?? {}) as {
          latency_s?: number;
          rmse_deg?: number;
        };
        benchResult.textContent =
          `latency ${((report.latency_s ?? NaN) * 1000).toFixed(0)} ms, ` +
          `RMSE ${(report.rmse_deg ?? NaN).toFixed(2)}°`;
      })
      .catch((error) => {
        benchResult.textContent = "";
        toast(error.message);
      });
  });

  teleopFile.addEventListener("change", () => {
    const file = teleopFile.files?.[0];
    if (file === undefined) {
      return;
    }
    file.text().then(
      (text) => {
        try {
          trace = parseTrace(text);
          teleopStatus.textContent = `${trace.length} frames loaded`;
        } catch (error) {
          trace = [];
          teleopStatus.textContent = "";
          toast((error as Error).message);
        }
      },
      () => toast("could not read file"),
    );
  });

  teleopPlay.addEventListener("click", () => {
    if (trace.length === 0 || player.playing) {
      return;
    }
    void player
      .play(trace, PANEL_MAX_HZ, (sent, total) => {
        teleopStatus.textContent = `playing ${sent}/${total}`;
      })
      .then((finished) => {
        teleopStatus.textContent = finished
          ? "trace complete"
          : (player.lastError ?? "stopped");
      });
  });

  teleopStop.addEventListener("click", () => player.stop());

  session.onTelemetry((frame) => {
    store.push(frame);
    lastFrameAtMs = Date.now();
  });
  session.onEvent((event) => {
    if (cal.applyEvent(event)) {
      renderCalRows();
    }
  });

  let retryTimer: ReturnType<typeof setTimeout> | null = null;

  function scheduleRetry(): void {
    if (retryTimer !== null) {
      return;
    }
    retryTimer = setTimeout(() => {
      retryTimer = null;
      void bringUp();
    }, 2000);
  }

  async function bringUp(): Promise<void> {
    if (session.state !== "disconnected") {
      return;
    }
    try {
      await session.connect();
      const modelResult = await session.request("get_model");
      model = validateModelDoc(modelResult.model);
      if (sliders.size === 0) {
        buildJogGrid(model);
      }
      await session.subscribe(SUBSCRIBE_RATE_HZ);
    } catch (error) {
      toast(`connection failed: ${(error as Error).message}`);
      scheduleRetry();
    }
  }

  session.onState((state) => {
    if (state === "disconnected") {
      scheduleRetry();
    }
  });

  void bringUp();
  requestAnimationFrame(render);
}

main();

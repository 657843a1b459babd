// DOM glue: wires the store, renderer, input scheduler, and controls panel.
// Logic lives in the imported modules; this file only touches the DOM.

import { ProtocolClient } from "./client";
import { initialInput, keyEvent, omegaFor, clampSlider, TickScheduler } from "./input";
import { renderScene, type Camera } from "./scene";
import { applyServerMsg, initialState, setConnected, setControls, type UiState } from "./state";

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const cam: Camera = { size: canvas.width };

let ui: UiState = initialState();
let input = initialInput();
let running = false;

const el = (id: string) => document.getElementById(id)!;

const client = new ProtocolClient(
  (msg) => { ui = applyServerMsg(ui, msg); refreshPanel(); },
  (connected) => {
    ui = setConnected(ui, connected);
    el("status").textContent = connected ? "connected" : "disconnected";
    if (connected) {
      client.send({ type: "reset", seed: Math.floor(Math.random() * 1e9) });
      requestHeatmap();
      running = true;
    } else {
      running = false;
    }
  });

function wsUrl(): string {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/ws`;
}

client.connect(wsUrl());

// --- action streaming at the fixed tick rate -----------------------------

const scheduler = new TickScheduler();
function loop(now: number) {
  if (running && scheduler.due(now)) {
    client.send({ type: "action", omega: omegaFor(input) });
  }
  renderScene(ctx, cam, ui);
  requestAnimationFrame(loop);
}
requestAnimationFrame(loop);

// --- keyboard and slider ---------------------------------------------------

window.addEventListener("keydown", (ev) => {
  if (ev.repeat) return; // key-repeat cannot change the send cadence
  input = keyEvent(input, ev.key, true);
});
window.addEventListener("keyup", (ev) => {
  input = keyEvent(input, ev.key, false);
});
el("slider").addEventListener("input", (ev) => {
  const v = clampSlider(parseFloat((ev.target as HTMLInputElement).value));
  input = { ...input, slider: v };
});

// --- constraint placement by click -----------------------------------------

canvas.addEventListener("click", (ev) => {
  const rect = canvas.getBoundingClientRect();
  const px = (ev.clientX - rect.left) * (canvas.width / rect.width);
  const py = (ev.clientY - rect.top) * (canvas.height / rect.height);
  const bound = 1.5;
  const x = (px / cam.size) * 2 * bound - bound;
  const y = bound - (py / cam.size) * 2 * bound;
  client.send({ type: "set_constraint", x, y });
  requestHeatmap();
});

// --- controls panel ----------------------------------------------------------

function requestHeatmap() {
  client.send({ type: "heatmap", theta: ui.thetaSlice, resolution: 61 });
}

el("alpha").addEventListener("change", (ev) => {
  const alpha = parseFloat((ev.target as HTMLInputElement).value);
  if (!(alpha > 0 && alpha < 1)) return;
  ui = setControls(ui, { alpha });
  client.send({ type: "set_alpha", alpha });
  requestHeatmap();
});

el("epsilon").addEventListener("change", (ev) => {
  const epsilon = parseFloat((ev.target as HTMLSelectElement).value);
  ui = setControls(ui, { epsilon });
  client.send({ type: "set_epsilon", epsilon });
  requestHeatmap();
});

el("theta-slice").addEventListener("change", (ev) => {
  const thetaSlice = parseFloat((ev.target as HTMLSelectElement).value);
  ui = setControls(ui, { thetaSlice });
  requestHeatmap();
});

el("refresh-heatmap").addEventListener("click", requestHeatmap);

el("reset").addEventListener("click", () => {
  client.send({ type: "reset", seed: Math.floor(Math.random() * 1e9) });
});

el("export").addEventListener("click", () => {
  const blob = new Blob([client.transcript.export()], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "teleop-transcript.json";
  a.click();
  URL.revokeObjectURL(a.href);
});

// --- panel refresh ---------------------------------------------------------

function refreshPanel() {
  const st = ui.lastState;
  el("banner").className = st?.intervened ? "banner active" : "banner";
  el("banner").textContent = st?.intervened ? "FILTER INTERVENED" : "task action passing";
  el("value").textContent = st ? st.value.toFixed(4) : "-";
  el("delta").textContent = ui.delta !== null ? ui.delta.toFixed(4) : "-";
  el("tick").textContent = st ? String(st.tick) : "-";
  el("error").textContent = ui.lastError ?? "";
  el("notice").textContent = ui.notice ?? "";
  const tl = ui.timeline.slice(-8).reverse()
    .map((e) => `tick ${e.tick}: value ${e.value.toFixed(3)} <= ${e.threshold.toFixed(3)}`)
    .join("\n");
  el("timeline").textContent = tl;
}

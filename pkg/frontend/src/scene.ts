// Canvas renderer. Pure draw function of UiState; all geometry comes from
// the newest server state message.

import { marchingSquares, valueColor } from "./heatmap";
import type { UiState } from "./state";

export const BOUND = 1.5;

export interface Camera {
  size: number; // square canvas pixels
}

export function toPixel(cam: Camera, x: number, y: number): [number, number] {
  const s = cam.size / (2 * BOUND);
  return [(x + BOUND) * s, (BOUND - y) * s]; // y up in world, down in canvas
}

export function renderScene(ctx: CanvasRenderingContext2D, cam: Camera,
                            state: UiState): void {
  const { size } = cam;
  ctx.clearRect(0, 0, size, size);
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, size, size);

  if (state.heatmap) {
    drawHeatmap(ctx, cam, state.heatmap.values, state.heatmap.resolution,
                state.heatmap.delta);
  }

  // arena bounds
  ctx.strokeStyle = "#8899aa";
  ctx.lineWidth = 2;
  ctx.strokeRect(0, 0, size, size);

  const st = state.lastState;
  if (st) {
    // constraint disc of radius epsilon
    const [cx, cy] = toPixel(cam, st.constraint.x, st.constraint.y);
    const rPix = (state.epsilon / (2 * BOUND)) * size;
    ctx.beginPath();
    ctx.arc(cx, cy, rPix, 0, 2 * Math.PI);
    ctx.fillStyle = "rgba(220, 60, 60, 0.25)";
    ctx.fill();
    ctx.strokeStyle = "#dc3c3c";
    ctx.lineWidth = 1.5;
    ctx.stroke();
    ctx.beginPath();
    ctx.arc(cx, cy, 3, 0, 2 * Math.PI);
    ctx.fillStyle = "#dc3c3c";
    ctx.fill();

    drawVehicle(ctx, cam, st.x, st.y, st.theta, st.intervened);
  }
}

function drawVehicle(ctx: CanvasRenderingContext2D, cam: Camera, x: number,
                     y: number, theta: number, intervened: boolean): void {
  const [px, py] = toPixel(cam, x, y);
  const len = 14;
  ctx.save();
  ctx.translate(px, py);
  ctx.rotate(-theta); // canvas y is flipped
  ctx.beginPath();
  ctx.moveTo(len, 0);
  ctx.lineTo(-0.5 * len, 0.45 * len);
  ctx.lineTo(-0.5 * len, -0.45 * len);
  ctx.closePath();
  ctx.fillStyle = intervened ? "#ff5050" : "#3ce6a0";
  ctx.fill();
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 1;
  ctx.stroke();
  ctx.restore();
}

function drawHeatmap(ctx: CanvasRenderingContext2D, cam: Camera,
                     values: number[], res: number, level: number): void {
  const cell = cam.size / res;
  for (let i = 0; i < res; i++) {
    for (let j = 0; j < res; j++) {
      const v = values[i * res + j];
      const [r, g, b] = valueColor(v, level);
      ctx.fillStyle = `rgba(${r},${g},${b},0.45)`;
      // value grid is x-major with y up; canvas y grows downward
      ctx.fillRect(i * cell, cam.size - (j + 1) * cell, cell + 0.5, cell + 0.5);
    }
  }
  // delta isoline
  const segs = marchingSquares(values, res, level);
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (const s of segs) {
    ctx.moveTo((s.x1 + 0.5) * cell, cam.size - (s.y1 + 0.5) * cell);
    ctx.lineTo((s.x2 + 0.5) * cell, cam.size - (s.y2 + 0.5) * cell);
  }
  ctx.stroke();
}

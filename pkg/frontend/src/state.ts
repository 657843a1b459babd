// UiState store: single reducer over server messages. The rendered pose is
// always the newest state message's pose; there is no client-side
// integration of the dynamics.

import type { HeatmapMsg, ServerMsg, StateMsg } from "./protocol";

export interface InterventionEvent {
  tick: number;
  value: number;
  threshold: number;
}

export interface UiState {
  connected: boolean;
  lastState: StateMsg | null;
  heatmap: HeatmapMsg | null;
  alpha: number;
  epsilon: number;
  thetaSlice: number;
  delta: number | null;
  timeline: InterventionEvent[];
  lastError: string | null;
  notice: string | null;
}

export const TIMELINE_CAPACITY = 200;

export function initialState(): UiState {
  return {
    connected: false,
    lastState: null,
    heatmap: null,
    alpha: 0.1,
    epsilon: 0.5,
    thetaSlice: 0,
    delta: null,
    timeline: [],
    lastError: null,
    notice: null,
  };
}

export function applyServerMsg(state: UiState, msg: ServerMsg): UiState {
  switch (msg.type) {
    case "state": {
      const timeline = msg.intervened
        ? [...state.timeline, { tick: msg.tick, value: msg.value,
                                threshold: msg.delta_effective }]
            .slice(-TIMELINE_CAPACITY)
        : state.timeline;
      return { ...state, lastState: msg, delta: msg.delta, timeline,
               notice: msg.notice ?? null, lastError: null };
    }
    case "heatmap":
      return { ...state, heatmap: msg };
    case "ack":
      return { ...state,
               delta: msg.delta !== undefined ? msg.delta : state.delta,
               lastError: null };
    case "error":
      return { ...state, lastError: msg.detail };
  }
}

export function setConnected(state: UiState, connected: boolean): UiState {
  return { ...state, connected };
}

export function setControls(state: UiState,
                            patch: Partial<Pick<UiState, "alpha" | "epsilon" | "thetaSlice">>): UiState {
  return { ...state, ...patch };
}

// Wire protocol: newline-delimited JSON over a websocket. Every displayed
// value and threshold originates from a server message; the client never
// computes safety values locally.

export interface ResetMsg {
  type: "reset";
  seed: number;
}

export interface SetConstraintMsg {
  type: "set_constraint";
  x: number;
  y: number;
}

export interface ActionMsg {
  type: "action";
  omega: number;
}

export interface SetAlphaMsg {
  type: "set_alpha";
  alpha: number;
}

export interface SetEpsilonMsg {
  type: "set_epsilon";
  epsilon: number;
}

export interface HeatmapRequestMsg {
  type: "heatmap";
  theta: number;
  resolution: number;
}

export type ClientMsg =
  | ResetMsg
  | SetConstraintMsg
  | ActionMsg
  | SetAlphaMsg
  | SetEpsilonMsg
  | HeatmapRequestMsg;

export interface StateMsg {
  type: "state";
  tick: number;
  x: number;
  y: number;
  theta: number;
  value: number;
  delta: number;
  delta_effective: number;
  intervened: boolean;
  omega: number;
  constraint: { x: number; y: number };
  notice?: string;
}

export interface HeatmapMsg {
  type: "heatmap";
  theta: number;
  resolution: number;
  values: number[];
  delta: number;
}

export interface AckMsg {
  type: "ack";
  detail: string;
  delta?: number;
}

export interface ErrorMsg {
  type: "error";
  detail: string;
}

export type ServerMsg = StateMsg | HeatmapMsg | AckMsg | ErrorMsg;

export function encodeLine(msg: ClientMsg): string {
  return JSON.stringify(msg) + "\n";
}

export function parseServerMsg(line: string): ServerMsg {
  const obj = JSON.parse(line);
  if (typeof obj !== "object" || obj === null || typeof obj.type !== "string") {
    throw new Error("malformed server message");
  }
  switch (obj.type) {
    case "state":
      for (const key of ["tick", "x", "y", "theta", "value", "delta",
                         "delta_effective", "omega"]) {
        if (typeof obj[key] !== "number") throw new Error(`state missing ${key}`);
      }
      if (typeof obj.intervened !== "boolean") throw new Error("state missing intervened");
      if (typeof obj.constraint?.x !== "number" || typeof obj.constraint?.y !== "number") {
        throw new Error("state missing constraint");
      }
      return obj as StateMsg;
    case "heatmap":
      if (!Array.isArray(obj.values) || typeof obj.resolution !== "number") {
        throw new Error("malformed heatmap");
      }
      if (obj.values.length !== obj.resolution * obj.resolution) {
        throw new Error("heatmap size mismatch");
      }
      return obj as HeatmapMsg;
    case "ack":
      return obj as AckMsg;
    case "error":
      return obj as ErrorMsg;
    default:
      throw new Error(`unknown server message type ${obj.type}`);
  }
}

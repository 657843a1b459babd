// Keyboard/slider to angular-velocity commands at a fixed tick rate.
//
// The plant moves every tick regardless of input, so the client streams one
// action message per tick (omega = 0 when idle) rather than sending on key
// events. Key-repeat cannot raise the send rate: keys only set the desired
// omega; the scheduler emits it once per tick.
//
// Sign convention (UX choice, shown in the help panel): left arrow steers
// counterclockwise (omega = +a_max), right arrow clockwise (omega = -a_max).

export const A_MAX = 1.25;
export const TICK_HZ = 20;

export interface InputState {
  left: boolean;
  right: boolean;
  slider: number; // fine control in [-1, 1], scaled by A_MAX
}

export function initialInput(): InputState {
  return { left: false, right: false, slider: 0 };
}

export function clampSlider(v: number): number {
  if (Number.isNaN(v)) return 0;
  return Math.max(-1, Math.min(1, v));
}

export function omegaFor(input: InputState, aMax = A_MAX): number {
  if (input.left && !input.right) return aMax;
  if (input.right && !input.left) return -aMax;
  return clampSlider(input.slider) * aMax;
}

export function keyEvent(input: InputState, key: string, down: boolean): InputState {
  if (key === "ArrowLeft" || key === "a") return { ...input, left: down };
  if (key === "ArrowRight" || key === "d") return { ...input, right: down };
  return input;
}

// Deterministic tick scheduler: emits at most one action per tick period,
// regardless of how often poke() is called.
export class TickScheduler {
  private lastTick = -Infinity;

  constructor(private periodMs: number = 1000 / TICK_HZ) {}

  due(nowMs: number): boolean {
    if (nowMs - this.lastTick >= this.periodMs) {
      this.lastTick = nowMs;
      return true;
    }
    return false;
  }
}

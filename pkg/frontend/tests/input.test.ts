import { describe, expect, it } from "vitest";
import { A_MAX, clampSlider, initialInput, keyEvent, omegaFor, TickScheduler } from "../src/input";

describe("omegaFor", () => {
  it("idle means omega zero (car keeps driving straight)", () => {
    expect(omegaFor(initialInput())).toBe(0);
  });

  it("left arrow commands +a_max, right arrow -a_max", () => {
    let input = keyEvent(initialInput(), "ArrowLeft", true);
    expect(omegaFor(input)).toBe(A_MAX);
    input = keyEvent(input, "ArrowLeft", false);
    input = keyEvent(input, "ArrowRight", true);
    expect(omegaFor(input)).toBe(-A_MAX);
  });

  it("both keys cancel to the slider value", () => {
    let input = keyEvent(initialInput(), "ArrowLeft", true);
    input = keyEvent(input, "ArrowRight", true);
    input = { ...input, slider: 0.4 };
    expect(omegaFor(input)).toBeCloseTo(0.4 * A_MAX, 12);
  });

  it("slider values are clamped client-side", () => {
    expect(clampSlider(7)).toBe(1);
    expect(clampSlider(-3)).toBe(-1);
    expect(clampSlider(NaN)).toBe(0);
    const input = { ...initialInput(), slider: 5 };
    expect(omegaFor(input)).toBe(A_MAX);
  });

  it("ignores unrelated keys", () => {
    const input = keyEvent(initialInput(), "x", true);
    expect(omegaFor(input)).toBe(0);
  });
});

describe("TickScheduler", () => {
  it("emits at most one action per period regardless of poll rate", () => {
    const sched = new TickScheduler(50);
    let sent = 0;
    for (let t = 0; t <= 1000; t += 5) {
      if (sched.due(t)) sent++;
    }
    expect(sent).toBe(21); // t = 0, 50, ..., 1000
  });

  it("does not burst after a stall", () => {
    const sched = new TickScheduler(50);
    expect(sched.due(0)).toBe(true);
    expect(sched.due(500)).toBe(true);
    expect(sched.due(501)).toBe(false); // no catch-up backlog
  });
});

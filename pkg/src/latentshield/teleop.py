"""Session-oriented teleoperation protocol: newline-delimited JSON messages.

One TeleopSession per connection. The transport (websocket or raw TCP) is
glue in server.py; everything here is pure, deterministic computation so a
recorded client transcript replays to byte-identical responses.

Client -> server: {"type":"reset","seed":u64}, {"type":"set_constraint","x","y"},
{"type":"action","omega"}, {"type":"set_alpha","alpha"},
{"type":"set_epsilon","epsilon"}, {"type":"heatmap","theta","resolution"}.
Server -> client: "state", "heatmap", "ack", "error" (see handlers).

Pose (x, y, theta) is transmitted for rendering only; the filtering path
consumes latents exclusively, which handle_action asserts via the session's
privileged-read counter.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import filtering, grid as grid_mod, safety_rl
from .conformal import ScoreCache, Threshold
from .dubins import DubinsParams, PrivilegedState
from .latent import Encoder, LatentSession

MAX_HEATMAP_RESOLUTION = 101
EVENT_LOG_CAPACITY = 10_000


@dataclass
class TeleopAssets:
    """Immutable checkpoint data shared by every session."""
    nets: safety_rl.FilterNets
    projector: object                      # MlpNet or None for raw-margin nets
    cache: ScoreCache
    encoder: Encoder
    params: DubinsParams
    oracle_grid: grid_mod.ValueGrid | None = None
    default_alpha: float = 0.005
    default_epsilon: float = 0.5


def dumps_line(obj: dict) -> str:
    """Canonical wire serialization: sorted keys, full float round-trip."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


class TeleopSession:
    """Protocol state machine for one connection."""

    def __init__(self, assets: TeleopAssets):
        self.assets = assets
        self.alpha = assets.default_alpha
        self.epsilon = assets.default_epsilon
        self.threshold: Threshold = assets.cache.threshold(self.epsilon, self.alpha)
        filtering.check_provenance(assets.nets, self.threshold)
        self.constraint_xy = (0.0, 0.0)
        self.z_c = assets.encoder.encode_pose(0.0, 0.0, 0.0)
        self.session: LatentSession | None = None
        self.tick = 0
        self.events: deque = deque(maxlen=EVENT_LOG_CAPACITY)
        self._oracle_value = None
        self._refresh_oracle()

    # -- helpers ------------------------------------------------------------

    def _refresh_oracle(self) -> None:
        g = self.assets.oracle_grid
        if g is None:
            self._oracle_value = None
            return
        disc = grid_mod.parse_disc_descriptor(g.margin_descriptor)
        shifted = grid_mod.oracle_for_constraint(
            g, type(disc)(self.constraint_xy[0], self.constraint_xy[1], disc.radius))
        self._oracle_value = shifted

    def _safe_start(self, seed: int) -> PrivilegedState:
        rng = np.random.default_rng(seed)
        b = self.assets.params.bound
        cx, cy = self.constraint_xy
        for _ in range(10_000):
            s = np.array([rng.uniform(-b, b), rng.uniform(-b, b),
                          rng.uniform(-math.pi, math.pi)])
            if self._oracle_value is not None:
                if float(self._oracle_value(s[None, :])[0]) > 0.0:
                    return PrivilegedState(*s)
            elif math.hypot(s[0] - cx, s[1] - cy) > 1.0:
                return PrivilegedState(*s)
        raise RuntimeError("could not sample a safe start")

    def _state_message(self, value: float, intervened: bool, omega: float) -> dict:
        ps = self.session.privileged_state()
        return {
            "type": "state",
            "tick": self.tick,
            "x": ps.x, "y": ps.y, "theta": ps.theta,
            "value": value,
            "delta": self.threshold.delta,
            "delta_effective": self.threshold.effective,
            "intervened": intervened,
            "omega": omega,
            "constraint": {"x": self.constraint_xy[0], "y": self.constraint_xy[1]},
        }

    # -- handlers -----------------------------------------------------------

    def handle_reset(self, seed: int, start=None) -> dict:
        if start is not None:
            s = PrivilegedState(float(start[0]), float(start[1]), float(start[2]))
        else:
            s = self._safe_start(int(seed))
        self.session = LatentSession(self.assets.encoder, self.assets.params, s)
        self.tick = 0
        self.events.clear()
        value = filtering.monitor(self.session, self.assets.nets, self.z_c,
                                  self.assets.projector)
        return self._state_message(value, value <= self.threshold.effective, 0.0)

    def handle_set_constraint(self, x: float, y: float) -> dict:
        b = self.assets.params.bound
        if abs(x) > b or abs(y) > b:
            return {"type": "error", "detail": f"constraint ({x}, {y}) out of bounds"}
        self.constraint_xy = (float(x), float(y))
        self.z_c = self.assets.encoder.encode_pose(float(x), float(y), 0.0)
        self._refresh_oracle()
        return {"type": "ack", "detail": "constraint set"}

    def handle_action(self, omega: float) -> dict:
        if self.session is None:
            return {"type": "error", "detail": "no session; send reset first"}
        a_max = self.assets.params.a_max
        clamped = abs(omega) > a_max
        omega_task = float(np.clip(omega, -a_max, a_max))

        reads_before = self.session.privileged_reads
        decision = filtering.filter_action(self.session, self.assets.nets, self.z_c,
                                           self.threshold, omega_task,
                                           self.assets.projector)
        if self.session.privileged_reads != reads_before:
            raise AssertionError("filter path touched privileged state")

        self.tick += 1
        self.events.append({"tick": self.tick, "intervened": decision.intervened,
                            "value": decision.value, "omega": decision.executed})
        msg = self._state_message(decision.value, decision.intervened, decision.executed)
        if clamped:
            msg["notice"] = f"omega clamped to [-{a_max}, {a_max}]"
        return msg

    def handle_set_alpha(self, alpha: float) -> dict:
        if not (0.0 < alpha < 1.0):
            return {"type": "error", "detail": f"alpha {alpha} outside (0, 1)"}
        try:
            t = self.assets.cache.threshold(self.epsilon, float(alpha))
        except KeyError as exc:
            return {"type": "error", "detail": str(exc)}
        self.alpha = float(alpha)
        self.threshold = t
        return {"type": "ack", "detail": "alpha set", "delta": t.delta}

    def handle_set_epsilon(self, epsilon: float) -> dict:
        try:
            t = self.assets.cache.threshold(float(epsilon), self.alpha)
        except KeyError as exc:
            return {"type": "error", "detail": str(exc)}
        self.epsilon = t.epsilon
        self.threshold = t
        if self.assets.oracle_grid is not None:
            disc = grid_mod.parse_disc_descriptor(self.assets.oracle_grid.margin_descriptor)
            if abs(disc.radius - self.epsilon) > 1e-9:
                self._oracle_value = None   # loaded grid no longer matches epsilon
        return {"type": "ack", "detail": "epsilon set", "delta": t.delta}

    def handle_heatmap(self, theta: float, resolution: int) -> dict:
        resolution = int(resolution)
        if resolution < 1 or resolution > MAX_HEATMAP_RESOLUTION:
            return {"type": "error",
                    "detail": f"resolution must be in [1, {MAX_HEATMAP_RESOLUTION}]"}
        b = self.assets.params.bound
        if resolution == 1:
            xs = np.array([0.0])
        else:
            xs = np.linspace(-b, b, resolution)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        states = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(theta))], axis=1)
        Z = self.assets.encoder.encode_batch(states)
        vals = safety_rl.value_batch(self.assets.nets, Z, self.z_c[None, :],
                                     self.assets.projector)
        return {"type": "heatmap", "theta": float(theta), "resolution": resolution,
                "values": [float(v) for v in vals],
                "delta": self.threshold.effective}

    # -- dispatch -----------------------------------------------------------

    def handle(self, msg: dict) -> dict:
        try:
            mtype = msg.get("type")
            if mtype == "reset":
                return self.handle_reset(msg.get("seed", 0), msg.get("start"))
            if mtype == "set_constraint":
                return self.handle_set_constraint(float(msg["x"]), float(msg["y"]))
            if mtype == "action":
                return self.handle_action(float(msg["omega"]))
            if mtype == "set_alpha":
                return self.handle_set_alpha(float(msg["alpha"]))
            if mtype == "set_epsilon":
                return self.handle_set_epsilon(float(msg["epsilon"]))
            if mtype == "heatmap":
                return self.handle_heatmap(float(msg["theta"]), msg["resolution"])
            return {"type": "error", "detail": f"unknown message type {mtype!r}"}
        except (KeyError, TypeError, ValueError) as exc:
            return {"type": "error", "detail": f"bad message: {exc}"}

    def handle_line(self, line: str) -> str:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return dumps_line({"type": "error", "detail": f"bad json: {exc.msg}"})
        return dumps_line(self.handle(msg))


def replay_transcript(assets: TeleopAssets, lines: list) -> list:
    """Feed a recorded client transcript through a fresh session."""
    session = TeleopSession(assets)
    return [session.handle_line(line) for line in lines]

"""Reproduction harness: classification vs the grid oracle, safe-rate
rollouts, filtered adversarial-driver rollouts, ablation sweeps, reports.

Positive class throughout is "unsafe" (oracle value < 0): missing an unsafe
state is the costly error, so recall is recall of unsafety.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import filtering, grid as grid_mod, safety_rl
from .conformal import Threshold
from .dubins import (DubinsParams, FailureDisc, PrivilegedState, dataset_states,
                     signed_distance_margin, step, wrap_angle)
from .latent import Encoder, LatentSession


@dataclass
class ClassificationReport:
    tp: int
    fp: int
    tn: int
    fn: int
    n_constraints: int
    grid_shape: tuple
    excluded: int = 0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if (self.fp + self.tn) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) > 0 else 0.0

    @property
    def balanced_accuracy(self) -> float:
        tnr = self.tn / (self.tn + self.fp) if (self.tn + self.fp) else 0.0
        return 0.5 * (self.recall + tnr)

    def metrics(self) -> dict:
        return {"fpr": self.fpr, "recall": self.recall, "precision": self.precision,
                "f1": self.f1, "balanced_accuracy": self.balanced_accuracy}


@dataclass
class RolloutReport:
    n_rollouts: int
    safe_count: int
    min_distances: np.ndarray    # per-trajectory min distance to constraint center

    @property
    def safe_rate(self) -> float:
        return self.safe_count / self.n_rollouts

    @property
    def mean_min_distance(self) -> float:
        return float(np.mean(self.min_distances))

    def metrics(self) -> dict:
        return {"safe_rate": self.safe_rate, "mean_min_distance": self.mean_min_distance,
                "n_rollouts": self.n_rollouts}


def sample_constraints(n: int, bound: float, epsilon: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Constraint centers uniform in the box shrunk by epsilon (disc in-bounds)."""
    lim = bound - epsilon
    return rng.uniform(-lim, lim, size=(n, 2))


def sample_safe_start(oracle_value, bound: float, rng: np.random.Generator,
                      max_tries: int = 10_000) -> PrivilegedState:
    """Rejection-sample a state with strictly positive oracle value."""
    for _ in range(max_tries):
        s = np.array([rng.uniform(-bound, bound), rng.uniform(-bound, bound),
                      rng.uniform(-math.pi, math.pi)])
        if float(oracle_value(s[None, :])[0]) > 0.0:
            return PrivilegedState(*s)
    raise RuntimeError("could not find an oracle-safe start state")


def eval_classification(fn: safety_rl.FilterNets, projector, t: Threshold,
                        base_grid: grid_mod.ValueGrid, encoder: Encoder,
                        n_constraints: int = 50, seed: int = 0,
                        dont_care_band: float = 0.0) -> ClassificationReport:
    """Unsafe-set classification against the shifted grid oracle.

    Oracle label: shifted oracle value < 0. Prediction: learned value < delta.
    Counts aggregate over all grid nodes and all sampled constraint centers;
    nodes with |oracle value| < dont_care_band are excluded.
    """
    disc = grid_mod.parse_disc_descriptor(base_grid.margin_descriptor)
    if disc is None:
        raise ValueError("oracle grid lacks a disc descriptor")
    if abs(t.epsilon - disc.radius) > 1e-9:
        raise ValueError(f"threshold epsilon {t.epsilon} != oracle disc radius {disc.radius}")
    rng = np.random.default_rng(seed)
    centers = sample_constraints(n_constraints, base_grid.spec.bound, disc.radius, rng)

    nodes = base_grid.spec.nodes()
    Z_nodes = encoder.encode_batch(nodes)
    tp = fp = tn = fnn = excluded = 0
    for cx, cy in centers:
        oracle = grid_mod.oracle_for_constraint(base_grid, FailureDisc(cx, cy, disc.radius))
        v_true = oracle(nodes)
        keep = np.abs(v_true) >= dont_care_band
        z_c = encoder.encode_pose(cx, cy, 0.0)
        v_pred = safety_rl.value_batch(fn, Z_nodes, z_c[None, :], projector)
        unsafe_true = v_true < 0.0
        unsafe_pred = v_pred < t.delta
        tp += int(np.sum(unsafe_pred & unsafe_true & keep))
        fp += int(np.sum(unsafe_pred & ~unsafe_true & keep))
        tn += int(np.sum(~unsafe_pred & ~unsafe_true & keep))
        fnn += int(np.sum(~unsafe_pred & unsafe_true & keep))
        excluded += int(np.sum(~keep))
    return ClassificationReport(tp=tp, fp=fp, tn=tn, fn=fnn,
                                n_constraints=n_constraints,
                                grid_shape=(base_grid.spec.nx, base_grid.spec.ny,
                                            base_grid.spec.ntheta),
                                excluded=excluded)


def eval_safe_rate(fn: safety_rl.FilterNets, projector, base_grid: grid_mod.ValueGrid,
                   encoder: Encoder, params: DubinsParams, n: int = 250,
                   seed: int = 0, horizon: int | None = None) -> RolloutReport:
    """Fallback-policy rollouts from oracle-safe starts; safe = never in disc."""
    disc = grid_mod.parse_disc_descriptor(base_grid.margin_descriptor)
    if disc is None:
        raise ValueError("oracle grid lacks a disc descriptor")
    rng = np.random.default_rng(seed)
    T = horizon if horizon is not None else params.horizon
    safe = 0
    min_d = np.zeros(n)
    for i in range(n):
        cx, cy = sample_constraints(1, base_grid.spec.bound, disc.radius, rng)[0]
        c = FailureDisc(cx, cy, disc.radius)
        oracle = grid_mod.oracle_for_constraint(base_grid, c)
        s = sample_safe_start(oracle, params.bound, rng)
        z_c = encoder.encode_pose(cx, cy, 0.0)
        sess = LatentSession(encoder, params, s)
        dmin = math.hypot(s.x - cx, s.y - cy)
        ever_failed = signed_distance_margin(s, c) < 0
        for _ in range(T):
            a = safety_rl.fallback_action(fn, sess.current_latent(), z_c, projector)
            sess.step(a * params.a_max)
            ps = sess.privileged_state()
            dmin = min(dmin, math.hypot(ps.x - cx, ps.y - cy))
            if signed_distance_margin(ps, c) < 0:
                ever_failed = True
        safe += 0 if ever_failed else 1
        min_d[i] = dmin
    return RolloutReport(n_rollouts=n, safe_count=safe, min_distances=min_d)


def drive_at_constraint(s: PrivilegedState, cx: float, cy: float,
                        a_max: float, k_p: float = 4.0) -> float:
    """Adversarial task driver: steer straight at the constraint center."""
    bearing = math.atan2(cy - s.y, cx - s.x)
    err = wrap_angle(bearing - s.theta)
    return float(np.clip(k_p * err, -a_max, a_max))


def eval_filtered_rollouts(fn: safety_rl.FilterNets, projector, t: Threshold,
                           base_grid: grid_mod.ValueGrid, encoder: Encoder,
                           params: DubinsParams, n: int = 250, seed: int = 0,
                           horizon: int | None = None) -> RolloutReport:
    """Adversarial driver filtered by the switching law; min-distance stats."""
    disc = grid_mod.parse_disc_descriptor(base_grid.margin_descriptor)
    if disc is None:
        raise ValueError("oracle grid lacks a disc descriptor")
    if abs(t.epsilon - disc.radius) > 1e-9:
        raise ValueError(f"threshold epsilon {t.epsilon} != oracle disc radius {disc.radius}")
    rng = np.random.default_rng(seed)
    T = horizon if horizon is not None else params.horizon
    safe = 0
    min_d = np.zeros(n)
    for i in range(n):
        cx, cy = sample_constraints(1, base_grid.spec.bound, disc.radius, rng)[0]
        c = FailureDisc(cx, cy, disc.radius)
        oracle = grid_mod.oracle_for_constraint(base_grid, c)
        s = sample_safe_start(oracle, params.bound, rng)
        z_c = encoder.encode_pose(cx, cy, 0.0)
        sess = LatentSession(encoder, params, s)
        dmin = math.hypot(s.x - cx, s.y - cy)
        ever_failed = False
        for _ in range(T):
            ps = sess.privileged_state()
            a_task = drive_at_constraint(ps, cx, cy, params.a_max)
            filtering.filter_action(sess, fn, z_c, t, a_task, projector)
            ps = sess.privileged_state()
            dmin = min(dmin, math.hypot(ps.x - cx, ps.y - cy))
            if signed_distance_margin(ps, c) < 0:
                ever_failed = True
        safe += 0 if ever_failed else 1
        min_d[i] = dmin
    return RolloutReport(n_rollouts=n, safe_count=safe, min_distances=min_d)


def eval_oracle_policy(base_grid: grid_mod.ValueGrid, params: DubinsParams,
                       n: int = 250, seed: int = 0,
                       horizon: int | None = None) -> RolloutReport:
    """Certificate run: grid-argmax fallback from in-grid safe starts."""
    disc = grid_mod.parse_disc_descriptor(base_grid.margin_descriptor)
    if disc is None:
        raise ValueError("oracle grid lacks a disc descriptor")
    rng = np.random.default_rng(seed)
    T = horizon if horizon is not None else params.horizon
    acts = grid_mod.action_set(params.a_max, base_grid.spec.n_actions)
    safe = 0
    min_d = np.zeros(n)
    for i in range(n):
        s = sample_safe_start(lambda st: grid_mod.value_at(base_grid, st),
                              params.bound, rng)
        dmin = math.hypot(s.x - disc.cx, s.y - disc.cy)
        ever_failed = False
        for _ in range(T):
            a = grid_mod.grid_policy_action(base_grid, s, params, acts)
            s = step(s, a, params)
            dmin = min(dmin, math.hypot(s.x - disc.cx, s.y - disc.cy))
            if signed_distance_margin(s, disc) < 0:
                ever_failed = True
        safe += 0 if ever_failed else 1
        min_d[i] = dmin
    return RolloutReport(n_rollouts=n, safe_count=safe, min_distances=min_d)


ABLATION_SUITES = ("table1", "table2", "table3")


def run_ablation(pipe, suite: str, n_constraints: int | None = None,
                 n_rollouts: int | None = None, seed: int | None = None) -> list:
    """Run one ablation sweep off the artifact pipeline; returns report rows.

    table1: projector vs raw-latent margins (both zz-conditioned).
    table2: conditioning strategies zz / zp / zzt / ztzt.
    table3: thresholds calibrated at epsilon 0.3 / 0.4 / 0.5, classification
            against the epsilon-matched oracle plus filtered-driver distances.
    """
    if suite not in ABLATION_SUITES:
        raise ValueError(f"suite must be one of {ABLATION_SUITES}")
    cfg = pipe.cfg
    n_c = n_constraints if n_constraints is not None else cfg.eval_constraints
    n_r = n_rollouts if n_rollouts is not None else cfg.eval_rollouts
    sd = seed if seed is not None else cfg.eval_seed
    enc = pipe.encoder()
    params = pipe.params
    rows = []

    if suite in ("table1", "table2"):
        base = pipe.oracle_grid(cfg.epsilon)
        variants = ([("zz", True), ("zz-raw", False)] if suite == "table1"
                    else [(s, True) for s in ("zz", "zp", "zzt", "ztzt")])
        for tag, use_proj in variants:
            strategy = tag.split("-")[0]
            fn = pipe.filter_nets(strategy, use_projector=use_proj)
            proj = pipe.projector()[0] if use_proj else None
            t = pipe.threshold(cfg.epsilon, use_projector=use_proj)
            cls = eval_classification(fn, proj, t, base, enc, n_constraints=n_c,
                                      seed=sd, dont_care_band=cfg.dont_care_band)
            roll = eval_safe_rate(fn, proj, base, enc, params, n=n_r, seed=sd)
            metrics = cls.metrics()
            metrics.update(roll.metrics())
            metrics["delta"] = t.delta
            rows.append((tag, metrics))
        return rows

    proj = pipe.projector()[0]
    fn = pipe.filter_nets("zz", use_projector=True)
    for eps in cfg.epsilons:
        base = pipe.oracle_grid(eps)
        t = pipe.threshold(eps)
        cls = eval_classification(fn, proj, t, base, enc, n_constraints=n_c,
                                  seed=sd, dont_care_band=cfg.dont_care_band)
        roll = eval_filtered_rollouts(fn, proj, t, base, enc, params, n=n_r, seed=sd)
        metrics = cls.metrics()
        metrics.update(roll.metrics())
        metrics["delta"] = t.delta
        rows.append((f"delta_{eps:g}", metrics))
    return rows


# ---------------------------------------------------------------------------
# Report emission: fixed-layout text table plus machine-readable JSON lines.
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["fpr", "recall", "precision", "f1", "balanced_accuracy",
                  "safe_rate", "mean_min_distance", "delta"]
COLUMN_HEADS = {"fpr": "FPR", "recall": "Rec.", "precision": "Pre.", "f1": "F1",
                "balanced_accuracy": "B.Acc.", "safe_rate": "Safe Rate",
                "mean_min_distance": "Min. Dist", "delta": "delta"}


def emit_report(rows: list, fmt: str = "text") -> str:
    """rows: list of (name, metrics-dict). Deterministic serialization."""
    if fmt == "json":
        out = io.StringIO()
        for name, metrics in rows:
            rec = {"name": name}
            rec.update({k: metrics[k] for k in sorted(metrics)})
            out.write(json.dumps(rec, sort_keys=True) + "\n")
        return out.getvalue()
    cols = [c for c in METRIC_COLUMNS if any(c in m for _, m in rows)]
    head = ["Method"] + [COLUMN_HEADS[c] for c in cols]
    table = [head]
    for name, metrics in rows:
        table.append([name] + [f"{metrics[c]:.3f}" if c in metrics else "-"
                               for c in cols])
    widths = [max(len(r[j]) for r in table) for j in range(len(head))]
    out = io.StringIO()
    for r_i, r in enumerate(table):
        out.write("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() + "\n")
        if r_i == 0:
            out.write("  ".join("-" * w for w in widths) + "\n")
    return out.getvalue()


def parse_report_json(text: str) -> list:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        name = rec.pop("name")
        rows.append((name, rec))
    return rows


def write_report(rows: list, path, fmt: str = "text") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_report(rows, fmt=fmt))

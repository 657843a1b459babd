"""Declarative run configuration: every pipeline default in one place,
overridable from a "key = value" text file and/or CLI assignments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .dubins import DubinsParams


@dataclass
class RunConfig:
    # simulator / data
    v: float = 1.0
    dt: float = 0.05
    a_max: float = 1.25
    bound: float = 1.5
    horizon: int = 100
    train_episodes: int = 4000
    calib_episodes: int = 1000
    train_seed: int = 100
    calib_seed: int = 9000

    # encoder / projector
    latent_dim: int = 48
    encoder_seed: int = 2024
    projector_pairs: int = 200_000
    projector_epochs: int = 200
    projector_lr: float = 2e-3
    projector_lr_final: float = 1e-4
    projector_weight_decay: float = 1e-5
    projector_seed: int = 0
    constraint_heading_average: bool = False

    # conformal calibration
    calib_pairs: int = 40_000
    alpha: float = 0.005
    epsilon: float = 0.5
    epsilons: tuple = (0.3, 0.4, 0.5)
    runtime_margin: float = 0.1

    # grid oracle
    grid_nx: int = 61
    grid_ny: int = 61
    grid_ntheta: int = 61
    grid_actions: int = 11
    grid_gamma: float = 0.9999
    grid_tol: float = 1e-6
    grid_max_iter: int = 5000

    # safety filter training
    filter_steps: int = 150_000
    filter_replay: int = 200_000
    filter_batch: int = 256
    filter_warmup: int = 5000
    filter_hidden: tuple = (256, 256, 256)
    filter_critic_lr: float = 1e-3
    filter_actor_lr: float = 1e-4
    filter_weight_decay: float = 1e-4
    filter_polyak: float = 0.005
    filter_explore_sigma: float = 0.2
    filter_max_rollout: int = 30
    filter_gamma_start: float = 0.85
    filter_gamma_end: float = 0.9999
    filter_gamma_anneal_frac: float = 0.8
    filter_seed: int = 0
    prototypes_k: int = 9

    # evaluation
    eval_constraints: int = 50
    eval_rollouts: int = 250
    eval_seed: int = 0
    dont_care_band: float = 0.0

    def dubins_params(self) -> DubinsParams:
        return DubinsParams(v=self.v, dt=self.dt, a_max=self.a_max,
                            bound=self.bound, horizon=self.horizon)


def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        elem = current[0] if current else 0
        return tuple(type(elem)(it) for it in items)
    return text


def apply_overrides(cfg: RunConfig, assignments: dict) -> RunConfig:
    known = {f.name for f in fields(cfg)}
    for key, text in assignments.items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(getattr(cfg, key), text))
    return cfg


def parse_config_text(text: str) -> dict:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg

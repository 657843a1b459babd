"""Artifact pipeline with on-disk caching.

Training runs and grid solves are minutes-scale, so every artifact is cached
under a content key derived from the config fields that influence it. Delete
the artifact directory (default .artifacts/, or $LATENTSHIELD_ARTIFACTS) to
force a rebuild.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

from . import conformal, dubins, grid as grid_mod, latent, nets, safety_rl
from .config import RunConfig

log = logging.getLogger(__name__)


def artifact_root(explicit=None) -> Path:
    if explicit is not None:
        root = Path(explicit)
    else:
        root = Path(os.environ.get("LATENTSHIELD_ARTIFACTS", ".artifacts"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _key(parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class Pipeline:
    def __init__(self, cfg: RunConfig | None = None, root=None):
        self.cfg = cfg or RunConfig()
        self.root = artifact_root(root)
        self.params = self.cfg.dubins_params()
        self._mem: dict = {}

    # -- datasets -------------------------------------------------------

    def _dataset(self, tag: str, episodes: int, seed: int) -> list:
        key = _key({"kind": "dataset", "episodes": episodes, "seed": seed,
                    "params": asdict(self.params)})
        mem_key = f"dataset/{key}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        path = self.root / f"{tag}-{key}.asd"
        if path.exists():
            data = dubins.load_dataset(path)
        else:
            log.info("generating %s dataset: %d episodes", tag, episodes)
            data = dubins.generate_dataset(episodes, self.params, seed)
            dubins.save_dataset(data, path)
        self._mem[mem_key] = data
        return data

    def dataset_train(self) -> list:
        return self._dataset("train", self.cfg.train_episodes, self.cfg.train_seed)

    def dataset_calib(self) -> list:
        return self._dataset("calib", self.cfg.calib_episodes, self.cfg.calib_seed)

    # -- encoder / projector ---------------------------------------------

    def encoder(self) -> latent.Encoder:
        if "encoder" not in self._mem:
            self._mem["encoder"] = latent.Encoder(d_z=self.cfg.latent_dim,
                                                  bound=self.cfg.bound,
                                                  seed=self.cfg.encoder_seed)
        return self._mem["encoder"]

    def _projector_key(self) -> str:
        c = self.cfg
        return _key({"kind": "projector", "pairs": c.projector_pairs,
                     "epochs": c.projector_epochs, "lr": c.projector_lr,
                     "lr_final": c.projector_lr_final, "wd": c.projector_weight_decay,
                     "seed": c.projector_seed, "d_z": c.latent_dim,
                     "enc_seed": c.encoder_seed, "train_episodes": c.train_episodes,
                     "train_seed": c.train_seed})

    def projector(self):
        """Returns (projector net, report dict)."""
        key = self._projector_key()
        if f"proj/{key}" in self._mem:
            return self._mem[f"proj/{key}"]
        path = self.root / f"projector-{key}.asnn"
        meta = self.root / f"projector-{key}.json"
        if path.exists() and meta.exists():
            proj = nets.load_net(path)
            report = json.loads(meta.read_text())
        else:
            c = self.cfg
            log.info("training projector: %d pairs, %d epochs", c.projector_pairs,
                     c.projector_epochs)
            proj, rep = latent.train_projector(
                self.dataset_train(), self.encoder(), pair_count=c.projector_pairs,
                epochs=c.projector_epochs, lr=c.projector_lr,
                lr_final=c.projector_lr_final,
                weight_decay=c.projector_weight_decay, seed=c.projector_seed)
            nets.save_net(proj, path)
            report = asdict(rep)
            meta.write_text(json.dumps(report, indent=1))
        self._mem[f"proj/{key}"] = (proj, report)
        return proj, report

    # -- grids ------------------------------------------------------------

    def grid_spec(self) -> grid_mod.GridSpec:
        c = self.cfg
        return grid_mod.GridSpec(nx=c.grid_nx, ny=c.grid_ny, ntheta=c.grid_ntheta,
                                 bound=c.bound, n_actions=c.grid_actions)

    def oracle_grid(self, epsilon: float | None = None) -> grid_mod.ValueGrid:
        c = self.cfg
        eps = c.epsilon if epsilon is None else epsilon
        key = _key({"kind": "grid", "eps": eps, "spec": asdict(self.grid_spec()),
                    "gamma": c.grid_gamma, "tol": c.grid_tol,
                    "max_iter": c.grid_max_iter, "params": asdict(self.params)})
        mem_key = f"grid/{key}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        path = self.root / f"oracle-eps{eps:g}-{key}.asvg"
        if path.exists():
            g = grid_mod.load_grid(path)
        else:
            log.info("solving oracle grid for eps=%g", eps)
            g = grid_mod.solve_disc_grid(dubins.FailureDisc(0.0, 0.0, eps),
                                         self.params, self.grid_spec(
                                         ), gamma=c.grid_gamma,
                                         tol=c.grid_tol, max_iter=c.grid_max_iter)
            grid_mod.save_grid(g, path)
        self._mem[mem_key] = g
        return g

    # -- calibration -------------------------------------------------------

    def calibration_set(self, epsilon: float, seed_offset: int = 0) -> conformal.CalibrationSet:
        c = self.cfg
        mem_key = f"calib/{epsilon}/{seed_offset}"
        if mem_key not in self._mem:
            self._mem[mem_key] = conformal.build_calibration_set(
                self.dataset_calib(), self.encoder(), c.calib_pairs, epsilon,
                seed=c.calib_seed + 17 + seed_offset)
        return self._mem[mem_key]

    def threshold(self, epsilon: float | None = None, alpha: float | None = None,
                  use_projector: bool = True) -> conformal.Threshold:
        c = self.cfg
        eps = c.epsilon if epsilon is None else epsilon
        a = c.alpha if alpha is None else alpha
        proj, _ = self.projector() if use_projector else (None, None)
        calib = self.calibration_set(eps)
        return conformal.calibrate(calib, proj, a, use_projector=use_projector,
                                   runtime_margin=c.runtime_margin)

    def score_cache(self, use_projector: bool = True) -> conformal.ScoreCache:
        proj, _ = self.projector() if use_projector else (None, None)
        sets = [self.calibration_set(eps) for eps in self.cfg.epsilons]
        return conformal.build_score_cache(sets, proj, runtime_margin=self.cfg.runtime_margin,
                                           use_projector=use_projector)

    # -- safety filter -----------------------------------------------------

    def train_config(self, strategy: str = "zz", use_projector: bool = True,
                     steps: int | None = None) -> safety_rl.TrainConfig:
        c = self.cfg
        return safety_rl.TrainConfig(
            strategy=strategy, use_projector=use_projector,
            total_steps=steps if steps is not None else c.filter_steps,
            replay_capacity=c.filter_replay, batch_size=c.filter_batch,
            warmup=c.filter_warmup, hidden=tuple(c.filter_hidden),
            critic_lr=c.filter_critic_lr, actor_lr=c.filter_actor_lr,
            weight_decay=c.filter_weight_decay, polyak=c.filter_polyak,
            explore_sigma=c.filter_explore_sigma, max_rollout_steps=c.filter_max_rollout,
            gamma=safety_rl.GammaSchedule(c.filter_gamma_start, c.filter_gamma_end,
                                          c.filter_gamma_anneal_frac),
            prototypes_k=c.prototypes_k, seed=c.filter_seed)

    def filter_nets(self, strategy: str = "zz", use_projector: bool = True,
                    steps: int | None = None) -> safety_rl.FilterNets:
        tc = self.train_config(strategy, use_projector, steps)
        key = _key({"kind": "filter", "cfg": asdict(tc),
                    "proj": self._projector_key() if use_projector else "raw",
                    "d_z": self.cfg.latent_dim, "enc_seed": self.cfg.encoder_seed,
                    "train_episodes": self.cfg.train_episodes,
                    "train_seed": self.cfg.train_seed})
        mem_key = f"filter/{key}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        tag = strategy if use_projector else f"{strategy}-raw"
        path = self.root / f"filter-{tag}-{key}.asfn"
        if path.exists():
            fn = safety_rl.load_filter_nets(path)
        else:
            proj = self.projector()[0] if use_projector else None
            log.info("training %s filter (%d steps)", tag, tc.total_steps)
            result = safety_rl.train_filter(tc, self.dataset_train(), self.encoder(),
                                            self.params, proj)
            fn = result.nets
            safety_rl.save_filter_nets(fn, path)
            (self.root / f"filter-{tag}-{key}.json").write_text(json.dumps({
                "steps": result.steps, "env_steps": result.env_steps,
                "wall_s": result.wall_s,
                "critic_losses": result.critic_losses.tolist()[-20:],
            }, indent=1))
        self._mem[mem_key] = fn
        return fn

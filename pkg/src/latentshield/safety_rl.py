"""Constraint-parameterized safety value function and fallback policy.

Solves the discounted safety fixed point in latent imagination with a
DDPG-style actor-critic: the critic regresses onto
y = (1 - gamma) * l + gamma * min(l, max_a' Q(z', a')), the actor ascends
Q(z, pi(z)), both conditioned on a constraint embedding sampled fresh per
imagination episode. gamma anneals from 0.85 to 0.9999 so early training
sees short effective horizons.

Conditioning strategies (who sees what):
  zz    critic/actor see raw z and raw constraint z_c
  zp    like zz, but the constraint is snapped to its nearest k-means
        prototype (both in training and at runtime)
  zzt   constraint enters as its projection proj(z_c)
  ztzt  state and constraint both enter projected
The failure margin l is always -cos(proj(z), proj(z_c)); the no-projector
ablation replaces it by raw-latent cosine and conditions like zz.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import latent as latent_mod
from . import nets
from .dubins import DubinsParams
from .latent import Encoder, LatentSession, PROJECTED_DIM

log = logging.getLogger(__name__)

STRATEGIES = ("zz", "zp", "zzt", "ztzt")

FILTER_MAGIC = b"ASFN"


def critic_target(l_margin, gamma: float, q_next):
    """Safety Bellman backup target; y <= l always (min structure)."""
    if not (0.0 <= gamma < 1.0):
        raise ValueError("gamma must be in [0, 1)")
    l_margin = np.asarray(l_margin, dtype=np.float64)
    q_next = np.asarray(q_next, dtype=np.float64)
    return (1.0 - gamma) * l_margin + gamma * np.minimum(l_margin, q_next)


@dataclass
class GammaSchedule:
    start: float = 0.85
    end: float = 0.9999
    anneal_frac: float = 0.8   # fraction of total steps spent annealing

    def at(self, step: int, total_steps: int) -> float:
        anneal_steps = max(1, int(total_steps * self.anneal_frac))
        frac = min(1.0, step / anneal_steps)
        return self.start + (self.end - self.start) * frac


@dataclass
class TrainConfig:
    strategy: str = "zz"
    use_projector: bool = True        # False = raw-latent margin ablation
    total_steps: int = 150_000
    replay_capacity: int = 200_000
    batch_size: int = 256
    warmup: int = 5_000
    hidden: tuple = (256, 256, 256)
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    weight_decay: float = 1e-4
    polyak: float = 0.005
    explore_sigma: float = 0.2
    max_rollout_steps: int = 30
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    prototypes_k: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not self.use_projector and self.strategy != "zz":
            raise ValueError("the raw-latent ablation only pairs with zz conditioning")


@dataclass
class PrototypeSet:
    centers: np.ndarray            # (K, d_z)
    assignments: np.ndarray        # training-point labels
    inertia: float
    inertia_history: list = field(default_factory=list)


def fit_prototypes(latents: np.ndarray, k: int, seed: int,
                   max_iter: int = 200) -> PrototypeSet:
    """Lloyd's algorithm with k-means++ seeding; empty clusters re-seed from
    the point farthest from its center."""
    X = np.asarray(latents, dtype=np.float64)
    if len(np.unique(X, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct points")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(len(X))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum()
        centers[j] = X[rng.choice(len(X), p=probs)]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(len(X), dtype=np.int64)
    inertia = np.inf
    history = []
    for _ in range(max_iter):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        new_inertia = float(dists[np.arange(len(X)), labels].sum())
        history.append(new_inertia)
        new_centers = centers.copy()
        point_d2 = dists[np.arange(len(X)), labels]
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centers[j] = X[mask].mean(axis=0)
            else:
                new_centers[j] = X[point_d2.argmax()]
        if np.array_equal(new_centers, centers) and new_inertia == inertia:
            break
        centers = new_centers
        inertia = new_inertia
    return PrototypeSet(centers=centers.astype(np.float32), assignments=labels,
                        inertia=inertia, inertia_history=history)


def nearest_prototype(ps: PrototypeSet, z_c: np.ndarray) -> np.ndarray:
    d2 = ((ps.centers.astype(np.float64) - np.asarray(z_c, dtype=np.float64)) ** 2).sum(axis=1)
    return ps.centers[int(d2.argmin())].copy()


@dataclass
class FilterNets:
    critic: nets.MlpNet            # Q(state_repr, a, cond) -> scalar
    actor: nets.MlpNet             # pi(state_repr, cond) -> tanh action in [-1, 1]
    critic_target_net: nets.MlpNet
    actor_target_net: nets.MlpNet
    strategy: str
    use_projector: bool
    d_z: int
    gamma: GammaSchedule
    projector_checksum: str = ""
    prototypes: PrototypeSet | None = None

    def state_repr(self, Z: np.ndarray, projector) -> np.ndarray:
        if self.strategy == "ztzt":
            return latent_mod.project(projector, Z)
        return Z

    def cond_repr(self, Zc: np.ndarray, projector) -> np.ndarray:
        """Conditioning vector per strategy, batched over rows."""
        Zc = np.atleast_2d(Zc)
        if self.strategy in ("zzt", "ztzt"):
            return latent_mod.project(projector, Zc)
        if self.strategy == "zp":
            if self.prototypes is None:
                raise ValueError("zp nets carry no prototype set")
            return np.stack([nearest_prototype(self.prototypes, z) for z in Zc])
        return Zc


def _cond_dim(strategy: str, d_z: int) -> int:
    return PROJECTED_DIM if strategy in ("zzt", "ztzt") else d_z


def _state_dim(strategy: str, d_z: int) -> int:
    return PROJECTED_DIM if strategy == "ztzt" else d_z


def build_filter_nets(cfg: TrainConfig, d_z: int, projector_checksum: str,
                      prototypes: PrototypeSet | None = None) -> FilterNets:
    ds = _state_dim(cfg.strategy, d_z)
    dc = _cond_dim(cfg.strategy, d_z)
    h = list(cfg.hidden)
    critic = nets.build_mlp([ds + 1 + dc] + h + [1],
                            ["relu"] * len(h) + ["identity"],
                            [True] * len(h) + [False], seed=cfg.seed + 11)
    actor = nets.build_mlp([ds + dc] + h + [1],
                           ["relu"] * len(h) + ["tanh"],
                           [True] * len(h) + [False], seed=cfg.seed + 12)
    return FilterNets(critic=critic, actor=actor,
                      critic_target_net=critic.copy(), actor_target_net=actor.copy(),
                      strategy=cfg.strategy, use_projector=cfg.use_projector,
                      d_z=d_z, gamma=cfg.gamma,
                      projector_checksum=projector_checksum, prototypes=prototypes)


def polyak_update(target: nets.MlpNet, online: nets.MlpNet, tau: float) -> None:
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po


def actor_forward(fn: FilterNets, S: np.ndarray, C: np.ndarray,
                  use_target: bool = False):
    net = fn.actor_target_net if use_target else fn.actor
    return nets.forward(net, np.concatenate([S, C], axis=1).astype(np.float32))


def critic_forward(fn: FilterNets, S: np.ndarray, A: np.ndarray, C: np.ndarray,
                   use_target: bool = False):
    net = fn.critic_target_net if use_target else fn.critic
    X = np.concatenate([S, A, C], axis=1).astype(np.float32)
    return nets.forward(net, X)


def value(fn: FilterNets, z: np.ndarray, z_c: np.ndarray, projector=None) -> float:
    """V(z; z_c) = Q(z, pi(z; z_c); z_c); pure function of nets and inputs."""
    return float(value_batch(fn, np.atleast_2d(z), np.atleast_2d(z_c), projector)[0])


def value_batch(fn: FilterNets, Z: np.ndarray, Zc: np.ndarray, projector=None,
                chunk: int = 16_384) -> np.ndarray:
    """Batched V(z; z_c); chunked so huge node batches stay cache-friendly."""
    S = fn.state_repr(np.atleast_2d(Z), projector)
    C = fn.cond_repr(np.atleast_2d(Zc), projector)
    if len(C) == 1 and len(S) > 1:
        C = np.repeat(C, len(S), axis=0)
    out = np.empty(len(S), dtype=np.float64)
    for lo in range(0, len(S), chunk):
        s = S[lo:lo + chunk]
        c = C[lo:lo + chunk]
        A, _ = actor_forward(fn, s, c)
        Q, _ = critic_forward(fn, s, A, c)
        out[lo:lo + chunk] = Q[:, 0]
    return out


def fallback_action(fn: FilterNets, z: np.ndarray, z_c: np.ndarray,
                    projector=None) -> float:
    """Normalized fallback action in [-1, 1]; scale by a_max at the boundary."""
    S = fn.state_repr(np.atleast_2d(z), projector)
    C = fn.cond_repr(np.atleast_2d(z_c), projector)
    A, _ = actor_forward(fn, S, C)
    return float(A[0, 0])


class ReplayBuffer:
    """Flat ring buffer for (state_repr, cond, a, l, next_state_repr)."""

    def __init__(self, capacity: int, d_state: int, d_cond: int):
        self.capacity = capacity
        self.S = np.zeros((capacity, d_state), dtype=np.float32)
        self.C = np.zeros((capacity, d_cond), dtype=np.float32)
        self.A = np.zeros((capacity, 1), dtype=np.float32)
        self.L = np.zeros((capacity, 1), dtype=np.float32)
        self.Sn = np.zeros((capacity, d_state), dtype=np.float32)
        self.size = 0
        self.pos = 0

    def push(self, s, c, a, l, sn) -> None:
        i = self.pos
        self.S[i] = s
        self.C[i] = c
        self.A[i, 0] = a
        self.L[i, 0] = l
        self.Sn[i] = sn
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, self.size, size=batch)
        return self.S[idx], self.C[idx], self.A[idx], self.L[idx], self.Sn[idx]


@dataclass
class ReplayTransition:
    z: np.ndarray
    z_c: np.ndarray
    a: float
    l: float
    z_next: np.ndarray

    def __post_init__(self):
        if not (-1.0 - 1e-6 <= self.a <= 1.0 + 1e-6):
            raise ValueError("normalized action out of [-1, 1]")
        if not (-1.0 - 1e-6 <= self.l <= 1.0 + 1e-6):
            raise ValueError("margin out of [-1, 1]")


@dataclass
class TrainResult:
    nets: FilterNets
    critic_losses: np.ndarray      # per logging interval
    actor_losses: np.ndarray
    steps: int
    env_steps: int
    wall_s: float


def train_filter(cfg: TrainConfig, dataset: list, encoder: Encoder,
                 params: DubinsParams, projector: nets.MlpNet | None,
                 log_every: int = 1000) -> TrainResult:
    """Actor-critic fixed-point iteration in branched imagination sessions."""
    if cfg.use_projector and projector is None:
        raise ValueError(f"strategy {cfg.strategy} needs a trained projector")
    from .dubins import PrivilegedState, dataset_states

    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    states = dataset_states(dataset)
    Z_all = encoder.encode_batch(states)

    prototypes = None
    if cfg.strategy == "zp":
        sub = rng.choice(len(Z_all), size=min(20_000, len(Z_all)), replace=False)
        prototypes = fit_prototypes(Z_all[sub], cfg.prototypes_k, seed=cfg.seed + 101)

    checksum = nets.net_checksum(projector) if cfg.use_projector else "raw"
    fn = build_filter_nets(cfg, encoder.d_z, checksum, prototypes)
    d_state = _state_dim(cfg.strategy, encoder.d_z)
    d_cond = _cond_dim(cfg.strategy, encoder.d_z)
    buf = ReplayBuffer(cfg.replay_capacity, d_state, d_cond)

    critic_opt = nets.OptimState.for_net(fn.critic, lr=cfg.critic_lr,
                                         weight_decay=cfg.weight_decay)
    actor_opt = nets.OptimState.for_net(fn.actor, lr=cfg.actor_lr,
                                        weight_decay=cfg.weight_decay)

    def margin_ref(zc_raw: np.ndarray) -> np.ndarray:
        """Projected constraint for margin evaluation, fixed per episode."""
        if cfg.use_projector:
            return latent_mod.project(projector, zc_raw)
        return zc_raw

    def margin_of(z: np.ndarray, ref: np.ndarray) -> float:
        a = latent_mod.project(projector, z) if cfg.use_projector else z
        return -nets.cosine_similarity(a, ref, eps=latent_mod.COS_EPS)

    def new_episode():
        start_idx = int(rng.integers(len(states)))
        c_idx = int(rng.integers(len(states)))
        s0 = PrivilegedState(*states[start_idx])
        zc_raw = Z_all[c_idx]
        sess = LatentSession(encoder, params, s0)
        cond = fn.cond_repr(zc_raw[None, :], projector)[0]
        return sess, margin_ref(zc_raw), cond

    sess, m_ref, cond = new_episode()
    steps_in_ep = 0
    z = sess.current_latent()
    s_repr = fn.state_repr(z[None, :], projector)[0]

    critic_log, actor_log = [], []
    c_accum, a_accum, n_accum = 0.0, 0.0, 0
    env_steps = 0

    for step_i in range(cfg.total_steps):
        # --- collect one imagination transition ---
        if buf.size < cfg.warmup:
            a = float(rng.uniform(-1.0, 1.0))
        else:
            A, _ = actor_forward(fn, s_repr[None, :], cond[None, :])
            a = float(np.clip(A[0, 0] + cfg.explore_sigma * rng.standard_normal(), -1.0, 1.0))
        l = margin_of(z, m_ref)
        z_next = sess.step(a * params.a_max)
        s_next = fn.state_repr(z_next[None, :], projector)[0]
        buf.push(s_repr, cond, a, l, s_next)
        env_steps += 1
        z, s_repr = z_next, s_next
        steps_in_ep += 1
        if steps_in_ep >= cfg.max_rollout_steps:
            sess, m_ref, cond = new_episode()
            z = sess.current_latent()
            s_repr = fn.state_repr(z[None, :], projector)[0]
            steps_in_ep = 0

        if buf.size < cfg.warmup:
            continue

        gamma = cfg.gamma.at(step_i, cfg.total_steps)

        # --- critic update ---
        S, C, A, L, Sn = buf.sample(rng, cfg.batch_size)
        An, _ = actor_forward(fn, Sn, C, use_target=True)
        Qn, _ = critic_forward(fn, Sn, An, C, use_target=True)
        y = critic_target(L[:, 0], gamma, Qn[:, 0]).astype(np.float32)
        Q, cache = critic_forward(fn, S, A, C)
        err = Q[:, 0] - y
        critic_loss = float(np.mean(err.astype(np.float64) ** 2))
        gQ = (2.0 / cfg.batch_size) * err[:, None]
        grads, _ = nets.backward(fn.critic, cache, gQ)
        nets.adamw_step(fn.critic, grads, critic_opt)

        # --- actor update: ascend Q(z, pi(z)) ---
        Api, acache = actor_forward(fn, S, C)
        Qpi, qcache = critic_forward(fn, S, Api, C)
        actor_loss = float(-np.mean(Qpi[:, 0], dtype=np.float64))
        gq = np.full((cfg.batch_size, 1), -1.0 / cfg.batch_size, dtype=np.float32)
        _, gin = nets.backward(fn.critic, qcache, gq, need_param_grads=False)
        dQ_da = gin[:, d_state:d_state + 1]
        agrads, _ = nets.backward(fn.actor, acache, dQ_da)
        nets.adamw_step(fn.actor, agrads, actor_opt)

        polyak_update(fn.critic_target_net, fn.critic, cfg.polyak)
        polyak_update(fn.actor_target_net, fn.actor, cfg.polyak)

        c_accum += critic_loss
        a_accum += actor_loss
        n_accum += 1
        if n_accum == log_every:
            critic_log.append(c_accum / n_accum)
            actor_log.append(a_accum / n_accum)
            if len(critic_log) % 10 == 0:
                log.info("step %d/%d gamma=%.4f critic=%.5f actor=%.4f",
                         step_i + 1, cfg.total_steps, gamma,
                         critic_log[-1], actor_log[-1])
            c_accum = a_accum = 0.0
            n_accum = 0

    return TrainResult(nets=fn, critic_losses=np.array(critic_log),
                       actor_losses=np.array(actor_log),
                       steps=cfg.total_steps, env_steps=env_steps,
                       wall_s=time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Checkpoint container ("ASFN"): strategy tag, projector flag/checksum,
# gamma-schedule metadata, optional prototype block, then the critic and
# actor as embedded "ASNN" blobs.
# ---------------------------------------------------------------------------

def save_filter_nets(fn: FilterNets, path) -> None:
    with open(path, "wb") as fh:
        fh.write(FILTER_MAGIC)
        tag = fn.strategy.encode("ascii")
        fh.write(struct.pack("<B", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<B", 1 if fn.use_projector else 0))
        fh.write(struct.pack("<I", fn.d_z))
        fh.write(struct.pack("<fff", fn.gamma.start, fn.gamma.end, fn.gamma.anneal_frac))
        chk = fn.projector_checksum.encode("ascii")
        fh.write(struct.pack("<H", len(chk)))
        fh.write(chk)
        if fn.prototypes is not None:
            k, d = fn.prototypes.centers.shape
            fh.write(struct.pack("<II", k, d))
            fh.write(fn.prototypes.centers.astype("<f4").tobytes())
        else:
            fh.write(struct.pack("<II", 0, 0))
        for net in (fn.critic, fn.actor):
            blob = nets.checkpoint_bytes(net)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_filter_nets(path) -> FilterNets:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FILTER_MAGIC:
        raise ValueError("not a filter checkpoint (bad magic)")
    pos = 4
    (tlen,) = struct.unpack_from("<B", buf, pos); pos += 1
    strategy = buf[pos:pos + tlen].decode("ascii"); pos += tlen
    (use_proj,) = struct.unpack_from("<B", buf, pos); pos += 1
    (d_z,) = struct.unpack_from("<I", buf, pos); pos += 4
    g0, g1, gf = struct.unpack_from("<fff", buf, pos); pos += 12
    (clen,) = struct.unpack_from("<H", buf, pos); pos += 2
    checksum = buf[pos:pos + clen].decode("ascii"); pos += clen
    k, d = struct.unpack_from("<II", buf, pos); pos += 8
    prototypes = None
    if k > 0:
        centers = np.frombuffer(buf, dtype="<f4", count=k * d, offset=pos).reshape(k, d).copy()
        pos += 4 * k * d
        prototypes = PrototypeSet(centers=centers, assignments=np.zeros(0, dtype=np.int64),
                                  inertia=0.0)
    loaded = []
    for _ in range(2):
        (blen,) = struct.unpack_from("<Q", buf, pos); pos += 8
        net, used = nets.net_from_bytes(buf, pos)
        if used != blen:
            raise ValueError("corrupt embedded network blob")
        pos += blen
        loaded.append(net)
    critic, actor = loaded
    return FilterNets(critic=critic, actor=actor,
                      critic_target_net=critic.copy(), actor_target_net=actor.copy(),
                      strategy=strategy, use_projector=bool(use_proj), d_z=int(d_z),
                      gamma=GammaSchedule(float(g0), float(g1), float(gf)),
                      projector_checksum=checksum, prototypes=prototypes)

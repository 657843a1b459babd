"""World-model surrogate: fixed injective encoder, oracle latent sessions,
and the trainable failure projector with its latent failure margin.

The encoder is a frozen random two-layer tanh network over the features
[x/bound, y/bound, cos(theta), sin(theta)]. It stands in for a learned
world-model encoder: downstream code only ever sees its outputs, while the
hidden simulator state stays inside LatentSession.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dubins, nets
from .dubins import DubinsParams, PrivilegedState

DEFAULT_LATENT_DIM = 16
DEFAULT_ENCODER_SEED = 2024
PROJECTED_DIM = 32
COS_EPS = 1e-8


class Encoder:
    """Deterministic injective map from privileged states to latent vectors.

    z = tanh(W2 @ tanh(W1 @ psi(s))), psi(s) = [x/bound, y/bound, cos th, sin th]
    with x/y features clamped to [-1, 1] so mildly out-of-bounds states still
    encode. W1 full column rank and W2 invertible make the map injective on
    the state box; outputs are strictly inside (-1, 1).
    """

    def __init__(self, d_z: int = DEFAULT_LATENT_DIM, bound: float = 1.5,
                 seed: int = DEFAULT_ENCODER_SEED):
        if d_z < 4:
            raise ValueError("latent dimension must be at least 4")
        self.d_z = d_z
        self.bound = bound
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, 0.8, size=(d_z, 4))
        self.w2 = rng.normal(0.0, 1.1 / math.sqrt(d_z), size=(d_z, d_z))
        if np.linalg.matrix_rank(self.w1) < 4:
            raise ValueError("encoder W1 not full column rank; pick another seed")
        if np.linalg.cond(self.w2) > 1e8:
            raise ValueError("encoder W2 numerically singular; pick another seed")

    def features(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.stack([
            np.clip(s[:, 0] / self.bound, -1.0, 1.0),
            np.clip(s[:, 1] / self.bound, -1.0, 1.0),
            np.cos(s[:, 2]),
            np.sin(s[:, 2]),
        ], axis=1)

    def encode_batch(self, states: np.ndarray) -> np.ndarray:
        psi = self.features(states)
        h = np.tanh(psi @ self.w1.T)
        return np.tanh(h @ self.w2.T).astype(np.float32)

    def encode(self, s: PrivilegedState) -> np.ndarray:
        return self.encode_batch(s.as_array()[None, :])[0]

    def encode_pose(self, x: float, y: float, theta: float = 0.0) -> np.ndarray:
        return self.encode_batch(np.array([[x, y, theta]]))[0]


class LatentSession:
    """Stateful oracle realization of the latent dynamics.

    Consumers get latent vectors only. privileged_state() exists for the
    evaluation harness and rendering; every call is counted so callers can
    audit that the filtering path never touched it.
    """

    def __init__(self, encoder: Encoder, params: DubinsParams, start: PrivilegedState):
        self._encoder = encoder
        self._params = params
        self._state = start
        self._latent = encoder.encode(start)
        self.privileged_reads = 0

    @property
    def params(self) -> DubinsParams:
        return self._params

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    def current_latent(self) -> np.ndarray:
        return self._latent.copy()

    def step(self, a: float) -> np.ndarray:
        if abs(a) > self._params.a_max + 1e-12:
            raise ValueError(f"action {a} outside [-{self._params.a_max}, {self._params.a_max}]")
        self._state = dubins.step(self._state, a, self._params)
        self._latent = self._encoder.encode(self._state)
        return self._latent.copy()

    def branch(self) -> "LatentSession":
        child = LatentSession(self._encoder, self._params, self._state)
        return child

    def privileged_state(self) -> PrivilegedState:
        """Evaluation/rendering hook only; never feed this into the filter."""
        self.privileged_reads += 1
        return self._state


def make_projector(d_z: int = DEFAULT_LATENT_DIM, seed: int = 0,
                   dtype=np.float32) -> nets.MlpNet:
    """2-layer projector: d_z -> d_z (LN, silu) -> 32 (LN, no activation)."""
    return nets.build_mlp([d_z, d_z, PROJECTED_DIM], ["silu", "identity"],
                          [True, True], seed=seed, dtype=dtype)


def project(proj: nets.MlpNet, z: np.ndarray) -> np.ndarray:
    out, _ = nets.forward(proj, z)
    return out


def latent_margin(proj, z: np.ndarray, z_c: np.ndarray,
                  use_projector: bool = True) -> float:
    """-cos(projected z, projected z_c); the raw-latent variant skips the projector."""
    if use_projector:
        if proj is None:
            raise ValueError("projector required for projected margins")
        a = project(proj, z)
        b = project(proj, z_c)
    else:
        a, b = z, z_c
    return -nets.cosine_similarity(a, b, eps=COS_EPS)


def margin_rows(proj, Z: np.ndarray, Zc: np.ndarray,
                use_projector: bool = True) -> np.ndarray:
    """Batched latent failure margins, one per row pair."""
    if use_projector:
        A, _ = nets.forward(proj, Z)
        B, _ = nets.forward(proj, Zc)
    else:
        A, B = Z, Zc
    c, _, _ = nets.cosine_rows(A, B, eps=COS_EPS)
    return -c


def constraint_latent(encoder: Encoder, x: float, y: float,
                      theta_c: float = 0.0) -> np.ndarray:
    """Constraint embedding for a clicked/queried position (theta_c = 0 default)."""
    return encoder.encode_pose(x, y, theta_c)


def constraint_projected(proj: nets.MlpNet, encoder: Encoder, x: float, y: float,
                         average_headings: bool = False) -> np.ndarray:
    """Projected constraint embedding; optionally averaged over 8 headings."""
    if not average_headings:
        return project(proj, encoder.encode_pose(x, y, 0.0))
    thetas = np.linspace(-math.pi, math.pi, 8, endpoint=False)
    states = np.stack([np.full(8, x), np.full(8, y), thetas], axis=1)
    zs = encoder.encode_batch(states)
    out, _ = nets.forward(proj, zs)
    return out.mean(axis=0)


# ---------------------------------------------------------------------------
# Projector training: regress cosine similarity of projected pairs onto the
# positional ground-truth score with squared error, mini-batch AdamW.
# ---------------------------------------------------------------------------

@dataclass
class ProjectorReport:
    train_mse: float
    holdout_mse: float
    pair_count: int
    epochs: int
    steps: int
    seed: int


def _pair_similarities(positions: np.ndarray, i1: np.ndarray, i2: np.ndarray) -> np.ndarray:
    d2 = ((positions[i1] - positions[i2]) ** 2).sum(axis=1)
    return dubins.similarity_from_sqdist(d2)


def sample_pairs(positions: np.ndarray, n: int, rng: np.random.Generator,
                 stratified_frac: float = 0.5, d_lo: float = 0.05,
                 d_hi: float = 1.2, d_tol: float = 0.08):
    """Pair indices for metric training: uniform pairs mixed with pairs whose
    distance is stratified over [d_lo, d_hi].

    Uniform pairs alone put ~40% of the mass beyond the similarity clamp,
    starving the decision-relevant band around the calibration boundary; the
    stratified share concentrates supervision there. Sampling uses a spatial
    hash over the dataset positions, so both pair endpoints remain real
    dataset states.
    """
    n_strat = int(n * stratified_frac)
    i1_u = rng.integers(0, len(positions), n - n_strat)
    i2_u = rng.integers(0, len(positions), n - n_strat)
    if n_strat == 0:
        return i1_u, i2_u

    cell = d_hi / 4.0
    keys = np.floor(positions / cell).astype(np.int64)
    buckets: dict = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    buckets = {k: np.asarray(v) for k, v in buckets.items()}

    out1 = np.empty(n_strat, dtype=np.int64)
    out2 = np.empty(n_strat, dtype=np.int64)
    got = 0
    while got < n_strat:
        want = n_strat - got
        a = rng.integers(0, len(positions), want * 2)
        r = rng.uniform(d_lo, d_hi, want * 2)
        phi = rng.uniform(-math.pi, math.pi, want * 2)
        tx = positions[a, 0] + r * np.cos(phi)
        ty = positions[a, 1] + r * np.sin(phi)
        kx = np.floor(tx / cell).astype(np.int64)
        ky = np.floor(ty / cell).astype(np.int64)
        for ai, kxi, kyi, ri in zip(a, kx, ky, r):
            cand = buckets.get((int(kxi), int(kyi)))
            if cand is None:
                continue
            j = int(cand[rng.integers(0, len(cand))])
            d = np.hypot(positions[j, 0] - positions[ai, 0],
                         positions[j, 1] - positions[ai, 1])
            if abs(d - ri) < d_tol:
                out1[got] = ai
                out2[got] = j
                got += 1
                if got == n_strat:
                    break
    i1 = np.concatenate([i1_u, out1])
    i2 = np.concatenate([i2_u, out2])
    perm = rng.permutation(n)
    return i1[perm], i2[perm]


def projector_pair_mse(proj: nets.MlpNet, Z1: np.ndarray, Z2: np.ndarray,
                       target: np.ndarray) -> float:
    c = -margin_rows(proj, Z1, Z2)
    return float(np.mean((c - target) ** 2))


def train_projector(dataset: list, encoder: Encoder, pair_count: int = 200_000,
                    epochs: int = 150, batch_size: int = 512, lr: float = 2e-3,
                    lr_final: float = 1e-4, weight_decay: float = 1e-5, seed: int = 0,
                    holdout_frac: float = 0.05, stratified_frac: float = 0.5):
    """Trains the failure projector; returns (projector, ProjectorReport).

    The learning rate decays linearly from lr to lr_final across epochs.
    stratified_frac controls the share of distance-stratified training pairs
    (see sample_pairs); the held-out MSE is always reported on uniform pairs.
    """
    if not dataset:
        raise ValueError("empty dataset")
    states = dubins.dataset_states(dataset)
    Z = encoder.encode_batch(states)
    positions = states[:, :2]

    rng = np.random.default_rng(seed)
    t1, t2 = sample_pairs(positions, pair_count, rng, stratified_frac=stratified_frac)
    tt = _pair_similarities(positions, t1, t2).astype(np.float64)

    # held-out pairs are always uniform, independent of the training mix
    n_hold = max(1, int(pair_count * holdout_frac))
    h1 = rng.integers(0, len(states), n_hold)
    h2 = rng.integers(0, len(states), n_hold)
    ht = _pair_similarities(positions, h1, h2).astype(np.float64)

    proj = make_projector(encoder.d_z, seed=seed + 1)
    opt = nets.OptimState.for_net(proj, lr=lr, weight_decay=weight_decay)

    n_train = len(t1)
    steps = 0
    last_train_mse = projector_pair_mse(proj, Z[t1], Z[t2], tt)
    for epoch in range(epochs):
        if epochs > 1:
            opt.lr = lr + (lr_final - lr) * epoch / (epochs - 1)
        order = rng.permutation(n_train)
        sq_sum = 0.0
        for lo in range(0, n_train, batch_size):
            sel = order[lo:lo + batch_size]
            b1, b2, bt = t1[sel], t2[sel], tt[sel]
            out1, cache1 = nets.forward(proj, Z[b1])
            out2, cache2 = nets.forward(proj, Z[b2])
            c, dU, dV = nets.cosine_rows(out1, out2, eps=COS_EPS)
            err = c - bt
            sq_sum += float((err**2).sum())
            dc = (2.0 / len(sel)) * err
            g1, _ = nets.backward(proj, cache1, (dc[:, None] * dU).astype(proj.dtype))
            g2, _ = nets.backward(proj, cache2, (dc[:, None] * dV).astype(proj.dtype))
            nets.accumulate(g1, g2)
            nets.adamw_step(proj, g1, opt)
            steps += 1
        last_train_mse = sq_sum / n_train

    holdout_mse = projector_pair_mse(proj, Z[h1], Z[h2], ht)
    report = ProjectorReport(train_mse=last_train_mse, holdout_mse=holdout_mse,
                             pair_count=pair_count, epochs=epochs, steps=steps,
                             seed=seed)
    return proj, report

"""Privileged Dubins-car dynamics, failure geometry, and rollout datasets.

This is the only module allowed to look at the privileged state (x, y, theta).
Everything downstream works on latent encodings of it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)

DATASET_MAGIC = b"ASD1"


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi). Single wrap convention for the whole package."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class PrivilegedState:
    x: float
    y: float
    theta: float  # always kept in [-pi, pi)

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class DubinsParams:
    v: float = 1.0          # m/s, fixed longitudinal speed
    dt: float = 0.05        # s
    a_max: float = 1.25     # rad/s turn-rate bound
    bound: float = 1.5      # half-width of the square arena
    horizon: int = 100      # steps per episode

    def __post_init__(self):
        if self.v <= 0 or self.dt <= 0 or self.a_max <= 0 or self.bound <= 0:
            raise ValueError("v, dt, a_max, bound must all be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class FailureDisc:
    cx: float
    cy: float
    radius: float  # epsilon, meters

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("disc radius must be positive")

    def contains(self, x: float, y: float) -> bool:
        return (x - self.cx) ** 2 + (y - self.cy) ** 2 < self.radius**2


@dataclass
class Trajectory:
    states: list  # list[PrivilegedState], length len(actions) + 1
    actions: list  # list[float], angular velocities
    terminated_out_of_bounds: bool = False

    def __post_init__(self):
        if len(self.actions) != len(self.states) - 1:
            raise ValueError("need exactly one more state than actions")

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states])


def step(s: PrivilegedState, a: float, p: DubinsParams) -> PrivilegedState:
    """One Euler step of the Dubins car; theta wrapped, bounds not enforced."""
    if abs(a) > p.a_max + 1e-12:
        raise ValueError(f"action {a} outside [-{p.a_max}, {p.a_max}]")
    return PrivilegedState(
        x=s.x + p.dt * p.v * math.cos(s.theta),
        y=s.y + p.dt * p.v * math.sin(s.theta),
        theta=wrap_angle(s.theta + p.dt * a),
    )


def in_bounds(s: PrivilegedState, p: DubinsParams) -> bool:
    return abs(s.x) <= p.bound and abs(s.y) <= p.bound


def ground_truth_similarity(p1, p2) -> float:
    """Positional similarity score: max(1 - d^2/sqrt(2), -1) for squared distance d^2."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    d2 = float(np.sum((p1 - p2) ** 2))
    return max(1.0 - d2 / SQRT2, -1.0)


def similarity_from_sqdist(d2) -> np.ndarray:
    """Vectorized form of ground_truth_similarity over squared distances."""
    return np.maximum(1.0 - np.asarray(d2, dtype=float) / SQRT2, -1.0)


def similarity_at_distance(dist: float) -> float:
    """Similarity score of a pair separated by exactly `dist` meters."""
    return similarity_from_sqdist(dist * dist).item()


def signed_distance_margin(s: PrivilegedState, f: FailureDisc) -> float:
    """Geometric failure margin: negative inside the disc, zero on its boundary."""
    return math.hypot(s.x - f.cx, s.y - f.cy) - f.radius


def sample_state(rng: np.random.Generator, p: DubinsParams) -> PrivilegedState:
    return PrivilegedState(
        x=rng.uniform(-p.bound, p.bound),
        y=rng.uniform(-p.bound, p.bound),
        theta=rng.uniform(-math.pi, math.pi),
    )


def rollout_random(rng: np.random.Generator, p: DubinsParams,
                   start: PrivilegedState | None = None) -> Trajectory:
    """One uniformly-random-action episode, truncated at the arena edge."""
    s = start if start is not None else sample_state(rng, p)
    states = [s]
    actions: list[float] = []
    oob = False
    for _ in range(p.horizon):
        a = float(rng.uniform(-p.a_max, p.a_max))
        s = step(s, a, p)
        states.append(s)
        actions.append(a)
        if not in_bounds(s, p):
            oob = True
            break
    return Trajectory(states=states, actions=actions, terminated_out_of_bounds=oob)


def generate_dataset(n_episodes: int, p: DubinsParams, seed: int) -> list:
    """Seeded offline dataset of random-action trajectories.

    Episode i uses its own substream seeded with seed + i, so the dataset is
    reproducible even if episodes are generated in parallel.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    out = []
    for i in range(n_episodes):
        rng = np.random.default_rng(seed + i)
        out.append(rollout_random(rng, p))
    return out


def dataset_states(dataset: list) -> np.ndarray:
    """All states of all trajectories as a flat (N, 3) array."""
    return np.concatenate([np.array([st.as_array() for st in t.states]) for t in dataset])


# ---------------------------------------------------------------------------
# Binary dataset file ("ASD1"): little-endian, header magic + u32 episode
# count; per episode u32 action count, (f32 x, f32 y, f32 theta) per state
# (action count + 1 states), f32 per action, u8 out-of-bounds flag.
# ---------------------------------------------------------------------------

def save_dataset(dataset: list, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(dataset)))
        for traj in dataset:
            n = len(traj.actions)
            fh.write(struct.pack("<I", n))
            flat = np.array([st.as_array() for st in traj.states], dtype="<f4")
            fh.write(flat.tobytes())
            fh.write(np.asarray(traj.actions, dtype="<f4").tobytes())
            fh.write(struct.pack("<B", 1 if traj.terminated_out_of_bounds else 0))


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a trajectory dataset file (magic {magic!r})")
        (n_eps,) = struct.unpack("<I", fh.read(4))
        out = []
        for _ in range(n_eps):
            (n,) = struct.unpack("<I", fh.read(4))
            states_raw = np.frombuffer(fh.read(12 * (n + 1)), dtype="<f4").reshape(n + 1, 3)
            actions = np.frombuffer(fh.read(4 * n), dtype="<f4")
            (oob,) = struct.unpack("<B", fh.read(1))
            states = [PrivilegedState(float(r[0]), float(r[1]), float(r[2])) for r in states_raw]
            out.append(Trajectory(states=states, actions=[float(a) for a in actions],
                                  terminated_out_of_bounds=bool(oob)))
    return out

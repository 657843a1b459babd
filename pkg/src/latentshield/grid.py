"""Ground-truth safety value function by semi-Lagrangian value iteration.

Iterates V <- (1-gamma) * l + gamma * min(l, max_a V(step(s, a))) on a regular
(x, y, theta) grid with multilinear interpolation for off-grid successors,
x/y clamped at the box edge and theta periodic. The dynamics are already
discrete-time, so one exact Euler step per node/action is the transition
model; no PDE discretization is involved.

Each sweep reads the old value array and writes a new one, never in place,
so results are deterministic regardless of how the node loop is scheduled.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .dubins import DubinsParams, FailureDisc, PrivilegedState, step

log = logging.getLogger(__name__)

GRID_MAGIC = b"ASVG"


@dataclass(frozen=True)
class GridSpec:
    nx: int = 61
    ny: int = 61
    ntheta: int = 61
    bound: float = 1.5
    n_actions: int = 11

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2 or self.ntheta < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if self.n_actions < 1:
            raise ValueError("need at least one action")

    def axes(self):
        xs = np.linspace(-self.bound, self.bound, self.nx)
        ys = np.linspace(-self.bound, self.bound, self.ny)
        ths = np.linspace(-math.pi, math.pi, self.ntheta, endpoint=False)
        return xs, ys, ths

    def nodes(self) -> np.ndarray:
        """All grid nodes as an (nx*ny*ntheta, 3) array, x-major order."""
        xs, ys, ths = self.axes()
        X, Y, T = np.meshgrid(xs, ys, ths, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), T.ravel()], axis=1)


def action_set(a_max: float, n_actions: int) -> np.ndarray:
    """Uniformly spaced actions including both endpoints (and 0 when odd)."""
    if n_actions == 1:
        return np.array([0.0])
    return np.linspace(-a_max, a_max, n_actions)


@dataclass
class ValueGrid:
    spec: GridSpec
    values: np.ndarray        # (nx, ny, ntheta), float64
    gamma: float
    margin_descriptor: str
    iterations: int
    residual: float
    converged: bool

    def cell_size(self):
        xs, ys, ths = self.spec.axes()
        return xs[1] - xs[0], ys[1] - ys[0], ths[1] - ths[0]


def disc_margin_fn(disc: FailureDisc):
    """Privileged failure margin ||p - c|| - eps, vectorized over (N, 3) states."""
    def margin(states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(states)
        return np.hypot(s[:, 0] - disc.cx, s[:, 1] - disc.cy) - disc.radius
    return margin


def disc_descriptor(disc: FailureDisc) -> str:
    return f"disc:eps={disc.radius:g},cx={disc.cx:g},cy={disc.cy:g}"


def parse_disc_descriptor(desc: str) -> FailureDisc | None:
    if not desc.startswith("disc:"):
        return None
    kv = dict(item.split("=") for item in desc[5:].split(","))
    return FailureDisc(cx=float(kv["cx"]), cy=float(kv["cy"]), radius=float(kv["eps"]))


class GridBackup:
    """One safety Bellman backup sweep with precomputed interpolation stencils.

    The x/y successor shift within a theta-slice is action independent (theta
    alone steers), so the stencil splits into per-slice xy corners plus
    per-(slice, action) theta plane pairs.
    """

    def __init__(self, margins: np.ndarray, params: DubinsParams, spec: GridSpec,
                 gamma: float):
        if not (0.0 <= gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        self.spec = spec
        self.gamma = gamma
        nx, ny, nth = spec.nx, spec.ny, spec.ntheta
        self.margins = margins.reshape(nx * ny, nth)

        xs, ys, ths = spec.axes()
        hx, hy = xs[1] - xs[0], ys[1] - ys[0]
        hth = ths[1] - ths[0]
        acts = action_set(params.a_max, spec.n_actions)

        # theta interpolation per (slice k, action a): periodic
        th_next = ths[:, None] + params.dt * acts[None, :]
        pos = (th_next - ths[0]) / hth
        k0 = np.floor(pos).astype(np.int64)
        wt = pos - k0
        self.th_i0 = np.mod(k0, nth)
        self.th_i1 = np.mod(k0 + 1, nth)
        self.th_w = wt

        # xy interpolation per slice k: uniform shift (dt*v*cos, dt*v*sin)
        self.xy_idx = np.empty((nth, nx * ny, 4), dtype=np.int64)
        self.xy_w = np.empty((nth, nx * ny, 4), dtype=np.float64)
        for k in range(nth):
            xp = np.clip(xs + params.dt * params.v * math.cos(ths[k]), xs[0], xs[-1])
            yp = np.clip(ys + params.dt * params.v * math.sin(ths[k]), ys[0], ys[-1])
            ix = np.clip(np.floor((xp - xs[0]) / hx).astype(np.int64), 0, nx - 2)
            iy = np.clip(np.floor((yp - ys[0]) / hy).astype(np.int64), 0, ny - 2)
            wx = (xp - xs[ix]) / hx
            wy = (yp - ys[iy]) / hy
            IX, IY = np.meshgrid(ix, iy, indexing="ij")
            WX, WY = np.meshgrid(wx, wy, indexing="ij")
            base = IX * ny + IY
            self.xy_idx[k, :, 0] = base.ravel()
            self.xy_idx[k, :, 1] = (base + 1).ravel()
            self.xy_idx[k, :, 2] = (base + ny).ravel()
            self.xy_idx[k, :, 3] = (base + ny + 1).ravel()
            self.xy_w[k, :, 0] = ((1 - WX) * (1 - WY)).ravel()
            self.xy_w[k, :, 1] = ((1 - WX) * WY).ravel()
            self.xy_w[k, :, 2] = (WX * (1 - WY)).ravel()
            self.xy_w[k, :, 3] = (WX * WY).ravel()

    def best_next_value(self, V: np.ndarray) -> np.ndarray:
        """max over actions of the interpolated successor value, (nx*ny, ntheta)."""
        nth = self.spec.ntheta
        # theta-interpolated planes: (nx*ny, ntheta, A)
        Vt = V[:, self.th_i0] * (1.0 - self.th_w) + V[:, self.th_i1] * self.th_w
        out = np.empty_like(V)
        for k in range(nth):
            g = Vt[:, k, :][self.xy_idx[k]]            # (nx*ny, 4, A)
            q = np.einsum("nca,nc->na", g, self.xy_w[k])
            out[:, k] = q.max(axis=1)
        return out

    def sweep(self, V: np.ndarray) -> np.ndarray:
        q = self.best_next_value(V)
        return (1.0 - self.gamma) * self.margins + self.gamma * np.minimum(self.margins, q)


def value_iteration(margin_fn, params: DubinsParams, spec: GridSpec,
                    gamma: float = 0.9999, tol: float = 1e-6,
                    max_iter: int = 5000, descriptor: str | None = None) -> ValueGrid:
    """Solve the discounted safety fixed point on the grid; V0 = margins."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    margins = np.asarray(margin_fn(spec.nodes()), dtype=np.float64)
    backup = GridBackup(margins, params, spec, gamma)
    V = backup.margins.copy()
    residual = math.inf
    it = 0
    t0 = time.perf_counter()
    for it in range(1, max_iter + 1):
        Vn = backup.sweep(V)
        residual = float(np.max(np.abs(Vn - V)))
        V = Vn
        if residual < tol:
            break
    converged = residual < tol
    if not converged:
        log.warning("value iteration stopped at max_iter=%d with residual %.3e >= tol %.3e",
                    max_iter, residual, tol)
    log.info("value iteration: %d sweeps, residual %.3e, %.1fs",
             it, residual, time.perf_counter() - t0)
    return ValueGrid(spec=spec,
                     values=V.reshape(spec.nx, spec.ny, spec.ntheta),
                     gamma=gamma,
                     margin_descriptor=descriptor if descriptor is not None else "custom",
                     iterations=it, residual=residual, converged=converged)


def solve_disc_grid(disc: FailureDisc, params: DubinsParams, spec: GridSpec,
                    gamma: float = 0.9999, tol: float = 1e-6,
                    max_iter: int = 5000) -> ValueGrid:
    return value_iteration(disc_margin_fn(disc), params, spec, gamma=gamma, tol=tol,
                           max_iter=max_iter, descriptor=disc_descriptor(disc))


def value_at(grid: ValueGrid, states) -> np.ndarray:
    """Trilinear interpolation; x/y clamped to the box, theta periodic."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    xs, ys, ths = grid.spec.axes()
    nx, ny, nth = grid.spec.nx, grid.spec.ny, grid.spec.ntheta
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    hth = ths[1] - ths[0]

    xq = np.clip(s[:, 0], xs[0], xs[-1])
    yq = np.clip(s[:, 1], ys[0], ys[-1])
    thq = s[:, 2]

    ix = np.clip(np.floor((xq - xs[0]) / hx).astype(np.int64), 0, nx - 2)
    iy = np.clip(np.floor((yq - ys[0]) / hy).astype(np.int64), 0, ny - 2)
    wx = (xq - xs[ix]) / hx
    wy = (yq - ys[iy]) / hy

    pos = (thq - ths[0]) / hth
    k0f = np.floor(pos).astype(np.int64)
    wt = pos - k0f
    k0 = np.mod(k0f, nth)
    k1 = np.mod(k0f + 1, nth)

    V = grid.values
    out = np.zeros(len(s))
    for dxi, wxi in ((0, 1.0 - wx), (1, wx)):
        for dyi, wyi in ((0, 1.0 - wy), (1, wy)):
            w_xy = wxi * wyi
            out += w_xy * ((1.0 - wt) * V[ix + dxi, iy + dyi, k0]
                           + wt * V[ix + dxi, iy + dyi, k1])
    return out


def value_at_state(grid: ValueGrid, s: PrivilegedState) -> float:
    return float(value_at(grid, s.as_array()[None, :])[0])


def oracle_for_constraint(base: ValueGrid, c: FailureDisc):
    """Shifted lookup into a grid solved for the origin-centered disc.

    Translation invariance of the dynamics means the value function for a disc
    at c equals the origin solution evaluated at s - (cx, cy, 0); one grid
    solve covers every constraint center.
    """
    base_disc = parse_disc_descriptor(base.margin_descriptor)
    if base_disc is None:
        raise ValueError("base grid was not solved for a disc margin")
    if abs(base_disc.radius - c.radius) > 1e-9:
        raise ValueError(f"disc radius mismatch: base eps={base_disc.radius}, "
                         f"requested eps={c.radius}")
    shift = np.array([c.cx - base_disc.cx, c.cy - base_disc.cy, 0.0])

    def value(states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return value_at(base, s - shift)

    return value


def classify_nodes(grid: ValueGrid, threshold: float) -> np.ndarray:
    """Boolean unsafe labels: value strictly below threshold."""
    return grid.values < threshold


@dataclass
class Theorem1Report:
    delta: float
    max_abs_diff: float
    sublevel_mismatch: int
    band_nodes: int
    iterations: tuple
    runtime_s: float


def verify_theorem1(margin_fn, delta: float, params: DubinsParams, spec: GridSpec,
                    gamma: float = 0.999, tol: float = 1e-6, max_iter: int = 5000,
                    band_eps: float = 1e-6) -> Theorem1Report:
    """Solve with margins l and l - delta; the fixed points must differ by delta.

    Reports the max node difference |V_delta - (V - delta)| and the symmetric
    difference between {V_delta < 0} and {V < delta}, counted away from a
    band_eps-wide band around the delta level set.
    """
    t0 = time.perf_counter()
    g1 = value_iteration(margin_fn, params, spec, gamma=gamma, tol=tol, max_iter=max_iter)

    def shifted(states):
        return np.asarray(margin_fn(states)) - delta

    g2 = value_iteration(shifted, params, spec, gamma=gamma, tol=tol, max_iter=max_iter)
    diff = g2.values - (g1.values - delta)
    max_abs = float(np.max(np.abs(diff)))
    off_band = np.abs(g1.values - delta) > band_eps
    mismatch = int(np.sum(((g2.values < 0) != (g1.values < delta)) & off_band))
    return Theorem1Report(delta=delta, max_abs_diff=max_abs,
                          sublevel_mismatch=mismatch,
                          band_nodes=int(np.sum(~off_band)),
                          iterations=(g1.iterations, g2.iterations),
                          runtime_s=time.perf_counter() - t0)


def value_iteration_table(margins: np.ndarray, successors: np.ndarray,
                          gamma: float, tol: float = 1e-13,
                          max_iter: int = 100_000) -> np.ndarray:
    """Exact backup on an explicit finite transition table (tests/hand oracles).

    successors[i, a] is the state index reached from i under action a.
    """
    margins = np.asarray(margins, dtype=np.float64)
    successors = np.asarray(successors, dtype=np.int64)
    V = margins.copy()
    for _ in range(max_iter):
        Vn = (1.0 - gamma) * margins + gamma * np.minimum(margins, V[successors].max(axis=1))
        if np.max(np.abs(Vn - V)) < tol:
            return Vn
        V = Vn
    return V


def grid_policy_action(grid: ValueGrid, s: PrivilegedState, params: DubinsParams,
                       actions: np.ndarray | None = None) -> float:
    """One-step-lookahead argmax policy read off the solved grid."""
    acts = actions if actions is not None else action_set(params.a_max, grid.spec.n_actions)
    succ = np.array([step(s, float(a), params).as_array() for a in acts])
    vals = value_at(grid, succ)
    return float(acts[int(np.argmax(vals))])


# ---------------------------------------------------------------------------
# Grid file ("ASVG"): little-endian; magic, u32 nx/ny/ntheta, f32 x/y extents
# (4 values), f32 gamma, u32 iterations, f32 residual, u16-length margin
# descriptor (utf-8), then nx*ny*ntheta f32 values in x-major order.
# ---------------------------------------------------------------------------

def save_grid(grid: ValueGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", grid.spec.nx, grid.spec.ny, grid.spec.ntheta))
        b = grid.spec.bound
        fh.write(struct.pack("<ffff", -b, b, -b, b))
        fh.write(struct.pack("<f", grid.gamma))
        fh.write(struct.pack("<I", grid.iterations))
        fh.write(struct.pack("<f", grid.residual))
        desc = grid.margin_descriptor.encode("utf-8")
        fh.write(struct.pack("<H", len(desc)))
        fh.write(desc)
        fh.write(grid.values.astype("<f4").tobytes())


def load_grid(path) -> ValueGrid:
    with open(path, "rb") as fh:
        if fh.read(4) != GRID_MAGIC:
            raise ValueError("not a value grid file (bad magic)")
        nx, ny, nth = struct.unpack("<III", fh.read(12))
        xmin, xmax, ymin, ymax = struct.unpack("<ffff", fh.read(16))
        (gamma,) = struct.unpack("<f", fh.read(4))
        (iterations,) = struct.unpack("<I", fh.read(4))
        (residual,) = struct.unpack("<f", fh.read(4))
        (dlen,) = struct.unpack("<H", fh.read(2))
        desc = fh.read(dlen).decode("utf-8")
        values = np.frombuffer(fh.read(4 * nx * ny * nth), dtype="<f4")
        values = values.astype(np.float64).reshape(nx, ny, nth)
    if abs(xmax + xmin) > 1e-6 or abs(ymax + ymin) > 1e-6 or abs(xmax - ymax) > 1e-6:
        raise ValueError("grid file extents are not a centered square box")
    spec = GridSpec(nx=nx, ny=ny, ntheta=nth, bound=float(xmax))
    return ValueGrid(spec=spec, values=values, gamma=float(gamma),
                     margin_descriptor=desc, iterations=int(iterations),
                     residual=float(residual), converged=True)

"""Minimal dense-network stack: forward, exact reverse-mode gradients, AdamW.

Shared by the failure projector, the safety critic, and the fallback actor.
Three fixed architectures make a general autodiff tape unnecessary; each layer
has a hand-written backward pass instead, which keeps the numeric core small
enough to audit. Layers are Linear -> optional LayerNorm -> activation.

Parameters default to float32; layer-norm statistics and loss reductions are
accumulated in float64. Tests that compare against finite differences build
float64 networks.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "silu", "tanh", "identity")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

LN_EPS = 1e-8
CHECKPOINT_MAGIC = b"ASNN"


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "silu":
        return x / (1.0 + np.exp(-x))
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d act / d x given pre-activation x and activation output y."""
    if name == "relu":
        # subgradient at 0 defined as 0
        return (x > 0.0).astype(x.dtype)
    if name == "silu":
        sig = 1.0 / (1.0 + np.exp(-x))
        return sig * (1.0 + x * (1.0 - sig))
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(x)


@dataclass
class Layer:
    w: np.ndarray                 # (out, in)
    b: np.ndarray                 # (out,)
    gain: np.ndarray | None       # (out,) if layer-normalized
    offset: np.ndarray | None
    activation: str

    @property
    def has_ln(self) -> bool:
        return self.gain is not None


@dataclass
class MlpNet:
    layers: list

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def dtype(self):
        return self.layers[0].w.dtype

    def parameters(self) -> list:
        """Flat parameter list; order is the update/serialization order."""
        out = []
        for lay in self.layers:
            out.append(lay.w)
            out.append(lay.b)
            if lay.has_ln:
                out.append(lay.gain)
                out.append(lay.offset)
        return out

    def copy(self) -> "MlpNet":
        return MlpNet(layers=[
            Layer(l.w.copy(), l.b.copy(),
                  None if l.gain is None else l.gain.copy(),
                  None if l.offset is None else l.offset.copy(),
                  l.activation)
            for l in self.layers
        ])


def build_mlp(dims, activations, layer_norm, seed: int, dtype=np.float32) -> MlpNet:
    """Seeded MLP with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    dims: [in, h1, ..., out]; activations and layer_norm have len(dims)-1 entries.
    """
    if len(activations) != len(dims) - 1 or len(layer_norm) != len(dims) - 1:
        raise ValueError("need one activation and layer-norm flag per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=(fan_out, fan_in)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        if activations[i] not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activations[i]!r}")
        if layer_norm[i]:
            gain = np.ones(fan_out, dtype=dtype)
            offset = np.zeros(fan_out, dtype=dtype)
        else:
            gain = offset = None
        layers.append(Layer(w, b, gain, offset, activations[i]))
    return MlpNet(layers=layers)


_ONES: dict = {}


def _row_mean(u: np.ndarray) -> np.ndarray:
    """Row means via BLAS matvec; far faster than ufunc reduction at width
    256 and numerically adequate for layer-norm statistics."""
    key = (u.shape[-1], u.dtype.char)
    ones = _ONES.get(key)
    if ones is None:
        ones = np.full(u.shape[-1], 1.0 / u.shape[-1], dtype=u.dtype)
        _ONES[key] = ones
    return (u @ ones)[..., None]


def layer_normalize(u: np.ndarray):
    """Normalize the last axis to mean 0 / variance 1."""
    mu = _row_mean(u)
    d = u - mu
    var = _row_mean(np.square(d))
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = d * inv
    return xhat, inv


def forward(net: MlpNet, x) -> tuple:
    """Forward pass. Accepts (d,) or (batch, d); returns (output, cache)."""
    x = np.asarray(x, dtype=net.dtype)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"input dim {h.shape[-1]} != network input {net.input_dim}")
    caches = []
    for lay in net.layers:
        u = h @ lay.w.T + lay.b
        if lay.has_ln:
            xhat, inv = layer_normalize(u)
            n = lay.gain * xhat + lay.offset
        else:
            xhat, inv = None, None
            n = u
        y = _act(lay.activation, n)
        caches.append((h, xhat, inv, n, y))
        h = y
    out = h[0] if single else h
    return out, (single, caches)


@dataclass
class GradientBundle:
    """Per-parameter gradients in the same order as MlpNet.parameters()."""
    grads: list = field(default_factory=list)

    def as_list(self) -> list:
        return self.grads


def backward(net: MlpNet, cache, output_grad, need_param_grads: bool = True) -> tuple:
    """Exact gradients given d(loss)/d(output). Returns (GradientBundle, input grad).

    need_param_grads=False skips the weight/bias/ln gradients and returns an
    empty bundle (cheap path for input gradients only).
    """
    single, caches = cache
    if len(caches) != len(net.layers):
        raise ValueError("cache does not match network")
    g = np.asarray(output_grad, dtype=net.dtype)
    if single:
        g = g[None, :]
    per_layer = []
    for lay, (h, xhat, inv, n, y) in zip(reversed(net.layers), reversed(caches)):
        if g.shape[-1] != lay.w.shape[0]:
            raise ValueError("stale or mismatched cache")
        dn = g * _act_grad(lay.activation, n, y)
        if lay.has_ln:
            dxhat = dn * lay.gain
            m1 = _row_mean(dxhat)
            m2 = _row_mean(dxhat * xhat)
            du = inv * (dxhat - m1 - xhat * m2)
        else:
            du = dn
        if need_param_grads:
            dw = du.T @ h
            db = du.sum(axis=0, dtype=np.float64).astype(net.dtype)
            entry = [dw, db]
            if lay.has_ln:
                dgain = (dn * xhat).sum(axis=0, dtype=np.float64).astype(net.dtype)
                doffset = dn.sum(axis=0, dtype=np.float64).astype(net.dtype)
                entry.extend([dgain, doffset])
            per_layer.append(entry)
        g = du @ lay.w
    grads = []
    for entry in reversed(per_layer):
        grads.extend(entry)
    gx = g[0] if single else g
    return GradientBundle(grads=grads), gx


def zero_grads_like(net: MlpNet) -> GradientBundle:
    return GradientBundle(grads=[np.zeros_like(p) for p in net.parameters()])


def accumulate(into: GradientBundle, other: GradientBundle, scale: float = 1.0) -> None:
    for a, b in zip(into.grads, other.grads):
        a += scale * b


@dataclass
class OptimState:
    """AdamW state: decoupled weight decay applied before the moment update."""
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: MlpNet, lr: float = 1e-3, weight_decay: float = 1e-4,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        params = net.parameters()
        return cls(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adamw_step(net: MlpNet, grads: GradientBundle, opt: OptimState) -> tuple:
    """In-place AdamW update; returns (net, opt) for convenience."""
    params = net.parameters()
    if len(params) != len(grads.grads) or len(params) != len(opt.m):
        raise ValueError("parameter/gradient/optimizer shape mismatch")
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    # lr*(m/bc1)/(sqrt(v/bc2)+eps) == alpha*m/(sqrt(v)+eps') with the scalars
    # folded out; fewer full-array passes.
    alpha = opt.lr * np.sqrt(bc2) / bc1
    eps_t = opt.eps * np.sqrt(bc2)
    for p, g, m, v in zip(params, grads.grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        if opt.weight_decay != 0.0:
            p *= 1.0 - opt.lr * opt.weight_decay
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom += eps_t
        m_hat = m / denom
        m_hat *= alpha
        p -= m_hat
    return net, opt


# ---------------------------------------------------------------------------
# Cosine-similarity head with gradients.
# ---------------------------------------------------------------------------

def cosine_similarity(u, v, eps: float = 1e-8) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= eps or nv <= eps:
        raise ValueError("cosine similarity of (near-)zero vector")
    return float(u @ v / (nu * nv))


def cosine_similarity_grad(u, v, eps: float = 1e-8):
    """Returns (cos, d cos/d u, d cos/d v)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= eps or nv <= eps:
        raise ValueError("cosine similarity of (near-)zero vector")
    c = float(u @ v / (nu * nv))
    gu = v / (nu * nv) - c * u / (nu * nu)
    gv = u / (nu * nv) - c * v / (nv * nv)
    return c, gu, gv


def cosine_rows(U: np.ndarray, V: np.ndarray, eps: float = 1e-8):
    """Row-wise cosine over batches, float64 accumulation. Returns (c, dU, dV)."""
    U64 = U.astype(np.float64)
    V64 = V.astype(np.float64)
    nu = np.linalg.norm(U64, axis=1, keepdims=True)
    nv = np.linalg.norm(V64, axis=1, keepdims=True)
    nu = np.maximum(nu, eps)
    nv = np.maximum(nv, eps)
    dot = (U64 * V64).sum(axis=1, keepdims=True)
    c = dot / (nu * nv)
    dU = V64 / (nu * nv) - c * U64 / (nu * nu)
    dV = U64 / (nu * nv) - c * V64 / (nv * nv)
    return c[:, 0], dU, dV


# ---------------------------------------------------------------------------
# Checkpoint file ("ASNN"): little-endian; magic, u32 layer count; per layer
# u32 rows, u32 cols, activation tag byte, layer-norm flag byte, then f32
# weight (row-major), bias, and gain/offset when layer-normalized.
# ---------------------------------------------------------------------------

def checkpoint_bytes(net: MlpNet) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.layers))]
    for lay in net.layers:
        rows, cols = lay.w.shape
        chunks.append(struct.pack("<IIBB", rows, cols, _ACT_TAG[lay.activation],
                                  1 if lay.has_ln else 0))
        chunks.append(lay.w.astype("<f4").tobytes())
        chunks.append(lay.b.astype("<f4").tobytes())
        if lay.has_ln:
            chunks.append(lay.gain.astype("<f4").tobytes())
            chunks.append(lay.offset.astype("<f4").tobytes())
    return b"".join(chunks)


def net_checksum(net: MlpNet) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()


def save_net(net: MlpNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def net_from_bytes(buf: bytes, offset: int = 0) -> tuple:
    """Parse one ASNN blob from buf at offset; returns (net, bytes consumed)."""
    if buf[offset:offset + 4] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    pos = offset + 4
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    layers = []
    for _ in range(n_layers):
        rows, cols, act_tag, ln_flag = struct.unpack_from("<IIBB", buf, pos)
        pos += 10
        w = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += 4 * rows * cols
        b = np.frombuffer(buf, dtype="<f4", count=rows, offset=pos).copy()
        pos += 4 * rows
        if ln_flag:
            gain = np.frombuffer(buf, dtype="<f4", count=rows, offset=pos).copy()
            pos += 4 * rows
            off = np.frombuffer(buf, dtype="<f4", count=rows, offset=pos).copy()
            pos += 4 * rows
        else:
            gain = off = None
        layers.append(Layer(w, b, gain, off, ACTIVATIONS[act_tag]))
    return MlpNet(layers=layers), pos - offset


def load_net(path) -> MlpNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    net, _ = net_from_bytes(buf)
    return net

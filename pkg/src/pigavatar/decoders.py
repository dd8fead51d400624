"""Conditioning vectors and the three MLP heads (colour, shape, body refinement)."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .latent_field import LatentGrid, query
from .rotations import matrix_to_quaternion, quat_multiply

SH_COEFFS = 48
SHAPE_OUT = 11  # dmu 3, dq 4, log-scale 3, opacity logit 1
LOG_SCALE_RANGE = (-10.0, 3.0)
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def num_bands(T: int) -> int:
    return max(1, math.ceil(math.log2(T))) if T > 1 else 1


def embed_time(t: int, T: int) -> np.ndarray:
    """Fourier features of a 1-based frame index: [sin(pi 2^f u) ..., cos(pi 2^f u) ...]."""
    if not 1 <= t <= T:
        raise ValueError(f"frame {t} outside 1..{T}")
    u = 0.0 if T == 1 else (t - 1) / (T - 1)
    freq = np.pi * 2.0 ** np.arange(num_bands(T)) * u
    return np.concatenate([np.sin(freq), np.cos(freq)])


def lod_fraction(l: int, L: int) -> float:
    if not 1 <= l <= L:
        raise ValueError(f"LOD {l} outside 1..{L}")
    return 0.0 if L == 1 else (l - 1) / (L - 1)


def build_conditioning(z, gamma, l: int, L: int) -> Tensor:
    """Rows [z_i, gamma, l~] for every anchor descriptor in ``z`` (n x d)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    n = z.shape[0]
    tail = np.concatenate([np.asarray(gamma, dtype=np.float64), [lod_fraction(l, L)]])
    return ad.concat([z, Tensor(np.broadcast_to(tail, (n, len(tail))).copy(), dtype=z.dtype)], axis=1)


@dataclass
class MLP:
    weights: list[Tensor]
    biases: list[Tensor]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            if i < last:
                h = ad.relu(h)
        return h


def make_mlp(in_dim: int, width: int, depth: int, out_dim: int, rng: np.random.Generator,
             zero_last: bool = False, name: str = "mlp", dtype=np.float64) -> MLP:
    """``depth`` hidden ReLU layers of ``width`` units; He-initialised."""
    dims = [in_dim] + [width] * depth + [out_dim]
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        w = np.zeros((a, b)) if (last and zero_last) else rng.normal(scale=math.sqrt(2.0 / a), size=(a, b))
        ws.append(Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w{i}"))
        bs.append(Tensor(np.zeros(b, dtype=dtype), requires_grad=True, name=f"{name}.b{i}"))
    return MLP(ws, bs)


@dataclass
class DecoderHeads:
    color: MLP
    shape: MLP
    model: MLP | None = None
    # single shared head variant: colour and shape come from one network
    shared: MLP | None = None

    def parameters(self) -> list[Tensor]:
        out = []
        for m in (self.color, self.shape, self.model, self.shared):
            if m is not None:
                out += m.parameters()
        return out

    def named(self) -> dict[str, MLP]:
        return {k: m for k, m in (("color", self.color), ("shape", self.shape), ("model", self.model),
                                  ("shared", self.shared)) if m is not None}


def make_heads(cond_dim: int, model_in_dim: int, model_out_dim: int, rng: np.random.Generator,
               width: int = 512, depth: int = 5, model_width: int = 32, model_depth: int = 3,
               zero_color: bool = False, shared: bool = False, dtype=np.float64) -> DecoderHeads:
    model = None
    if model_out_dim > 0:
        model = make_mlp(model_in_dim, model_width, model_depth, model_out_dim, rng, True, "model", dtype)
    if shared:
        net = make_mlp(cond_dim, width, depth, SH_COEFFS + SHAPE_OUT, rng, True, "shared", dtype)
        return DecoderHeads(None, None, model, net)
    color = make_mlp(cond_dim, width, depth, SH_COEFFS, rng, zero_color, "color", dtype)
    shape = make_mlp(cond_dim, width, depth, SHAPE_OUT, rng, True, "shape", dtype)
    return DecoderHeads(color, shape, model)


def _shape_outputs(raw: Tensor):
    dmu = raw[:, 0:3]
    dq = ad.normalize(raw[:, 3:7] + Tensor(IDENTITY_QUAT, dtype=raw.dtype))
    s = ad.exp(ad.clip(raw[:, 7:10], *LOG_SCALE_RANGE))
    # keeps the opacity strictly inside (0, 1) at this precision
    lim = 30.0 if raw.dtype == np.float64 else 15.0
    o = ad.sigmoid(ad.clip(raw[:, 10:11], -lim, lim))
    return dmu, dq, s, o


def decode_color(heads: DecoderHeads, y: Tensor) -> Tensor:
    """Raw SH coefficients (n x 48), coefficient k of channel ch at column 3k + ch."""
    if heads.shared is not None:
        return heads.shared(y)[:, :SH_COEFFS]
    return heads.color(y)


def decode_shape(heads: DecoderHeads, y: Tensor):
    """(dmu, unit dq, positive scale, opacity in (0, 1))."""
    if heads.shared is not None:
        return _shape_outputs(heads.shared(y)[:, SH_COEFFS:])
    return _shape_outputs(heads.shape(y))


def decode_all(heads: DecoderHeads, y: Tensor):
    """Colour and shape outputs, evaluating a shared network only once."""
    if heads.shared is not None:
        raw = heads.shared(y)
        return raw[:, :SH_COEFFS], _shape_outputs(raw[:, SH_COEFFS:])
    return heads.color(y), _shape_outputs(heads.shape(y))


@dataclass
class SplatFrame:
    mu: Tensor        # n x 3
    quat: Tensor      # n x 4, unit
    scale: Tensor     # n x 3
    opacity: Tensor   # n x 1
    sh: Tensor        # n x 48

    def __len__(self):
        return self.mu.shape[0]

    def detached(self) -> "SplatFrame":
        return SplatFrame(*(Tensor(x.data.copy()) for x in (self.mu, self.quat, self.scale, self.opacity, self.sh)))


def compose_splat(posed_anchor, rotation, dmu, dq, scale, opacity, sh) -> SplatFrame:
    """Centre = posed anchor + dmu; orientation = quat(rotation) * dq, renormalised."""
    q = quat_multiply(matrix_to_quaternion(rotation), dq)
    return SplatFrame(posed_anchor + dmu, ad.normalize(q), scale, opacity, sh)


def global_descriptor(grid: LatentGrid, positions) -> Tensor:
    """Mean latent feature over the given anchor positions (1 x d)."""
    return ad.mean(query(grid, positions), axis=0, keepdims=True)


def decode_model_refinement(heads: DecoderHeads, grid: LatentGrid, positions, gammas, num_betas: int):
    """Per-timestep (dbeta, dtheta) from [z_bar, gamma(t)] for each row of ``gammas``."""
    if heads.model is None:
        raise ValueError("no body refinement head configured")
    gammas = np.atleast_2d(np.asarray(gammas, dtype=np.float64))
    zbar = global_descriptor(grid, positions)
    Tn = gammas.shape[0]
    ones = Tensor(np.ones((Tn, 1)), dtype=zbar.dtype)
    y = ad.concat([ones @ zbar, Tensor(gammas, dtype=zbar.dtype)], axis=1)
    out = heads.model(y)
    dbeta = out[:, :num_betas]
    dtheta = ad.reshape(out[:, num_betas:], (Tn, -1, 3))
    return dbeta, dtheta


def aggregate_shape_residuals(per_step) -> np.ndarray:
    """Mean over the predicted per-timestep shape residuals."""
    return np.asarray(per_step, dtype=np.float64).mean(axis=0)


@dataclass
class RunningMean:
    """Exponential moving average (decay 0.99) used for the shared shape residual."""
    value: np.ndarray
    decay: float = 0.99
    count: int = 0

    def update(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.value = x.copy() if self.count == 0 else self.decay * self.value + (1.0 - self.decay) * x
        self.count += 1
        return self.value


# -- weight checkpoint --------------------------------------------------------

_W_MAGIC = b"PIGMLP01"


def weights_bytes(heads: DecoderHeads) -> bytes:
    """Layout: magic, head count, then per head: name length + name, layer count,
    (in, out) per layer, value size; then row-major float matrices and biases."""
    parts = [_W_MAGIC]
    named = heads.named()
    parts.append(struct.pack("<I", len(named)))
    for name, m in named.items():
        key = name.encode()
        dt = m.weights[0].data.dtype
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<IB", len(m.weights), dt.itemsize))
        for w in m.weights:
            parts.append(struct.pack("<II", *w.shape))
        for w, b in zip(m.weights, m.biases):
            parts.append(np.ascontiguousarray(w.data, dtype=dt.newbyteorder("<")).tobytes())
            parts.append(np.ascontiguousarray(b.data, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


def heads_from_bytes(blob: bytes) -> DecoderHeads:
    if blob[:8] != _W_MAGIC:
        raise ValueError("not a decoder weight block")
    off = 8

    def unpack(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    (count,) = unpack("<I")
    nets = {}
    for _ in range(count):
        (klen,) = unpack("<I")
        name = blob[off:off + klen].decode()
        off += klen
        nl, size = unpack("<IB")
        shapes = [unpack("<II") for _ in range(nl)]
        dt = np.dtype(f"<f{size}")
        ws, bs = [], []
        for i, (a, b) in enumerate(shapes):
            need = (a * b + b) * size
            if off + need > len(blob):
                raise ValueError("truncated decoder weight block")
            w = np.frombuffer(blob, dt, a * b, off).reshape(a, b).astype(dt.newbyteorder("="))
            off += a * b * size
            bias = np.frombuffer(blob, dt, b, off).astype(dt.newbyteorder("="))
            off += b * size
            ws.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            bs.append(Tensor(bias, requires_grad=True, name=f"{name}.b{i}"))
        nets[name] = MLP(ws, bs)
    return DecoderHeads(nets.get("color"), nets.get("shape"), nets.get("model"), nets.get("shared"))


def save_weights(heads: DecoderHeads, path) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_bytes(heads))


def load_weights(path) -> DecoderHeads:
    with open(path, "rb") as fh:
        return heads_from_bytes(fh.read())

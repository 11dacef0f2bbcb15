"""Trainable back-end: layer fusion -> two-layer FFN -> attentive stats pooling -> classifier.

All functions are batched over a leading axis.  Gradients are written out by
hand; see ``backward``.  Classifier column 0 is bona fide, column 1 spoof.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import LayerStack
from .errors import DimensionError, FormatError, ParameterError
from .numerics import (dropout, dropout_backward, matmul_backward, relu,
                       relu_backward, softmax, softmax_backward)

POOL_EPS = 1e-9
DEFAULT_LAYERS = (4, 5, 6, 7, 8, 9)
PARAM_NAMES = ("fusion", "W1", "b1", "W2", "b2", "Wa", "ba", "v", "k", "Wc", "bc")
GROUPS = {
    "fusion": ("fusion",),
    "proj1": ("W1", "b1"),
    "proj2": ("W2", "b2"),
    "pool": ("Wa", "ba", "v", "k"),
    "classifier": ("Wc", "bc"),
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    hidden: int = 256
    attn: int = 128
    layers: tuple[int, ...] = DEFAULT_LAYERS
    dropout: float = 0.1
    num_layers: int = 12

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if min(self.dim, self.hidden, self.attn) < 1:
            raise ParameterError("model widths must be positive")
        if not self.layers or len(set(self.layers)) != len(self.layers):
            raise ParameterError("fusion layer set must be non-empty and unique")
        if min(self.layers) < 1 or max(self.layers) > self.num_layers:
            raise ParameterError(f"fusion layers {self.layers} outside 1..{self.num_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["W1"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def fusion_weights(self) -> np.ndarray:
        return softmax(self.tensors["fusion"])


def _glorot(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, zero fusion logits."""
    d, h, a = config.dim, config.hidden, config.attn
    t = {
        "fusion": np.zeros(len(config.layers), dtype),
        "W1": _glorot(rng, d, h, dtype), "b1": np.zeros(h, dtype),
        "W2": _glorot(rng, h, h, dtype), "b2": np.zeros(h, dtype),
        "Wa": _glorot(rng, h, a, dtype), "ba": np.zeros(a, dtype),
        "v": _glorot(rng, a, 1, dtype)[:, 0], "k": np.zeros(1, dtype),
        "Wc": _glorot(rng, 2 * h, 2, dtype), "bc": np.zeros(2, dtype),
    }
    return ModelParams(config, t)


# single-stage ops -----------------------------------------------------------

def select_layers(stack, layers) -> np.ndarray:
    """(L, T, D) or (B, L, T, D) -> same with only the 1-based ``layers``."""
    arr = stack.layers if isinstance(stack, LayerStack) else np.asarray(stack)
    n = arr.shape[-3]
    if min(layers) < 1 or max(layers) > n:
        raise ParameterError(f"layers {tuple(layers)} outside 1..{n}")
    return arr[..., [l - 1 for l in layers], :, :]


def fuse(stack, logits, layers=DEFAULT_LAYERS) -> np.ndarray:
    """Softmax-weighted sum of the chosen layers: (.., T, D)."""
    x = select_layers(stack, layers)
    w = softmax(np.asarray(logits))
    if w.shape[0] != x.shape[-3]:
        raise DimensionError(f"{w.shape[0]} fusion logits for {x.shape[-3]} layers")
    return np.tensordot(w, np.moveaxis(x, -3, 0), axes=1)


def ffn_forward(x, params: ModelParams, rng=None, training=False):
    return _ffn(x, params, rng, training)[0]


def _ffn(x, params, rng, training):
    p = params.tensors
    if x.shape[-1] != p["W1"].shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != {p['W1'].shape[0]}")
    rate = params.config.dropout
    z1 = x @ p["W1"] + p["b1"]
    h1, m1 = dropout(relu(z1), rate, rng, training)
    z2 = h1 @ p["W2"] + p["b2"]
    h2, m2 = dropout(relu(z2), rate, rng, training)
    return h2, (x, z1, m1, h1, z2, m2)


def _pool(h, params):
    p = params.tensors
    if h.shape[-2] == 0:
        raise DimensionError("attentive pooling over zero frames")
    u = np.tanh(h @ p["Wa"] + p["ba"])
    e = u @ p["v"] + p["k"][0]
    alpha = softmax(e, axis=-1)
    mu = np.einsum("...t,...th->...h", alpha, h)
    second = np.einsum("...t,...th->...h", alpha, h * h)
    var_raw = second - mu * mu
    var = np.maximum(var_raw, POOL_EPS)
    sigma = np.sqrt(var)
    return np.concatenate([mu, sigma], axis=-1), (h, u, alpha, mu, var_raw, sigma)


def attentive_stats_pool(h, params: ModelParams) -> np.ndarray:
    """concat(weighted mean, weighted std) over frames: (.., T, H) -> (.., 2H)."""
    return _pool(h, params)[0]


def classify(pooled, params: ModelParams):
    """Return ``(bona_logit, spoof_logit, score)`` with score = bona - spoof."""
    logits = pooled @ params["Wc"] + params["bc"]
    return logits[..., 0], logits[..., 1], logits[..., 0] - logits[..., 1]


# full model -----------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray          # (B, 2)
    score: np.ndarray           # (B,)
    fusion_weights: np.ndarray  # (S,)
    cache: tuple


def forward(stacks, params: ModelParams, rng=None, training=False) -> ForwardResult:
    """Batched forward over ``stacks`` of shape (B, S, T, D).

    ``stacks`` must already hold only the fusion layers, in config order
    (see ``select_layers``).  A single (S, T, D) stack is promoted to B=1.
    """
    p = params.tensors
    x = np.asarray(stacks)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != p["fusion"].shape[0]:
        raise DimensionError(f"expected (B, {p['fusion'].shape[0]}, T, D), got {x.shape}")
    x = x.astype(params.dtype, copy=False)
    w = softmax(p["fusion"])
    fused = np.einsum("s,bstd->btd", w, x)
    h2, ffn_cache = _ffn(fused, params, rng, training)
    pooled, pool_cache = _pool(h2, params)
    logits = pooled @ p["Wc"] + p["bc"]
    score = logits[:, 0] - logits[:, 1]
    return ForwardResult(logits, score, w, (x, w, ffn_cache, pooled, pool_cache))


def backward(result: ForwardResult, dlogits: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
    p = params.tensors
    x, w, (fused, z1, m1, h1, z2, m2), pooled, (h, u, alpha, mu, var_raw, sigma) = result.cache
    g = {}

    g["Wc"] = pooled.T @ dlogits
    g["bc"] = dlogits.sum(axis=0)
    dpooled = dlogits @ p["Wc"].T
    hid = mu.shape[-1]
    dmu = dpooled[:, :hid].copy()
    dsigma = dpooled[:, hid:]

    # sigma = sqrt(max(E[h^2] - mu^2, eps))
    dvar = np.where(var_raw > POOL_EPS, dsigma / (2.0 * sigma), 0.0)
    dmu -= 2.0 * mu * dvar
    dalpha = np.einsum("bth,bh->bt", h, dmu) + np.einsum("bth,bh->bt", h * h, dvar)
    dh = alpha[..., None] * (dmu[:, None, :] + 2.0 * h * dvar[:, None, :])

    de = softmax_backward(dalpha, alpha, axis=-1)
    g["k"] = np.array([de.sum()], dtype=p["k"].dtype)
    g["v"] = np.einsum("bt,bta->a", de, u)
    dz = de[..., None] * p["v"] * (1.0 - u * u)
    g["Wa"] = np.einsum("bth,bta->ha", h, dz)
    g["ba"] = dz.sum(axis=(0, 1))
    dh += dz @ p["Wa"].T

    dz2 = relu_backward(dropout_backward(dh, m2), z2)
    dh1, g["W2"] = matmul_backward(dz2, h1, p["W2"])
    g["b2"] = dz2.sum(axis=(0, 1))
    dz1 = relu_backward(dropout_backward(dh1, m1), z1)
    dfused, g["W1"] = matmul_backward(dz1, fused, p["W1"])
    g["b1"] = dz1.sum(axis=(0, 1))

    dw = np.einsum("btd,bstd->s", dfused, x)
    g["fusion"] = softmax_backward(dw, w)
    return {k: g[k].astype(p[k].dtype, copy=False) for k in PARAM_NAMES}


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"EFFN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict[str, str] = field(default_factory=dict)
    trajectory: np.ndarray | None = None   # (steps, S) fusion weights after each step


def _config_meta(config: ModelConfig) -> dict[str, str]:
    return {
        "dim": str(config.dim), "hidden": str(config.hidden), "attn": str(config.attn),
        "layers": ",".join(map(str, config.layers)), "dropout": repr(config.dropout),
        "num_layers": str(config.num_layers),
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = dict(ckpt.meta)
    meta.update(_config_meta(ckpt.params.config))
    meta_bytes = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode()
    arrays = [(n, ckpt.params.tensors[n]) for n in PARAM_NAMES]
    if ckpt.trajectory is not None:
        arrays.append(("trajectory", ckpt.trajectory))
    table = bytearray(struct.pack("<I", len(arrays)))
    offset = 0
    payload = bytearray()
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<I", data.ndim)
        table += struct.pack(f"<{data.ndim}I", *data.shape) + struct.pack("<Q", offset)
        payload += data.tobytes()
        offset += data.nbytes
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(table)
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()

    def take(pos, n):
        if pos + n > len(buf):
            raise OSError(f"{path}: truncated checkpoint")
        return buf[pos:pos + n], pos + n

    head, pos = take(0, 12)
    if head[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {head[:4]!r}")
    version, meta_len = struct.unpack("<II", head[4:])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    raw, pos = take(pos, meta_len)
    try:
        meta = dict(line.split("=", 1) for line in raw.decode().splitlines() if line)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    raw, pos = take(pos, 4)
    (n_entries,) = struct.unpack("<I", raw)
    if n_entries > 64:
        raise FormatError(f"{path}: implausible entry count {n_entries}")
    entries = []
    for _ in range(n_entries):
        raw, pos = take(pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        name, pos = take(pos, nlen)
        raw, pos = take(pos, 4)
        (ndim,) = struct.unpack("<I", raw)
        if ndim > 8:
            raise FormatError(f"{path}: implausible rank {ndim}")
        raw, pos = take(pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, pos = take(pos, 8)
        (offset,) = struct.unpack("<Q", raw)
        entries.append((name.decode(), shape, offset))
    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        raw, _ = take(pos + offset, 4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    try:
        config = ModelConfig(
            dim=int(meta["dim"]), hidden=int(meta["hidden"]), attn=int(meta["attn"]),
            layers=tuple(int(s) for s in meta["layers"].split(",")),
            dropout=float(meta["dropout"]), num_layers=int(meta["num_layers"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete model header ({exc})") from exc
    trajectory = tensors.pop("trajectory", None)
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    params = ModelParams(config, tensors)
    check_shapes(params)
    for k in _config_meta(config):
        meta.pop(k, None)
    return Checkpoint(params, meta, trajectory)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, a = config.dim, config.hidden, config.attn
    return {
        "fusion": (len(config.layers),), "W1": (d, h), "b1": (h,), "W2": (h, h), "b2": (h,),
        "Wa": (h, a), "ba": (a,), "v": (a,), "k": (1,), "Wc": (2 * h, 2), "bc": (2,),
    }


def check_shapes(params: ModelParams) -> None:
    for name, shape in param_shapes(params.config).items():
        got = params.tensors[name].shape
        if got != shape:
            raise FormatError(f"parameter {name}: shape {got}, expected {shape}")


def write_trajectory(trajectory: np.ndarray, layers, path, start_step: int = 1) -> None:
    """CSV ``step,layer,weight``; one row per (step, layer)."""
    with open(path, "w", newline="\n") as f:
        f.write(format_trajectory(trajectory, layers, start_step))


def format_trajectory(trajectory: np.ndarray, layers, start_step: int = 1) -> str:
    lines = ["step,layer,weight"]
    for i, row in enumerate(np.asarray(trajectory)):
        for layer, weight in zip(layers, row):
            lines.append(f"{start_step + i},{layer},{float(weight):.9f}")
    return "\n".join(lines) + "\n"

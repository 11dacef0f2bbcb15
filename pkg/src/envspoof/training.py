"""Class-weighted objective, Adam, and the train / fine-tune loops."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ParameterError
from .evaluation import compute_eer, score_stacks
from .model import (DEFAULT_LAYERS, Checkpoint, ModelConfig, ModelParams, backward,
                    check_shapes, forward, init_params, save_checkpoint, select_layers,
                    write_trajectory)
from .numerics import make_rng, softmax

log = logging.getLogger(__name__)

BONA, SPOOF = 0, 1

# rng streams hanging off the run seed
_INIT, _SHUFFLE, _CLIP, _DROPOUT = range(4)


@dataclass(frozen=True)
class ClassWeights:
    w_bona: float = 1.0
    w_spoof: float = 1.0

    def __post_init__(self):
        if not (self.w_bona > 0 and self.w_spoof > 0):
            raise ParameterError("class weights must be positive")


def auto_class_weights(labels) -> ClassWeights:
    """Inverse class-frequency weights: w_spoof = 1, w_bona = N_spoof / N_bona."""
    labels = [getattr(l, "label", l) for l in labels]
    n_bona = sum(1 for l in labels if l in ("bona", BONA))
    n_spoof = len(labels) - n_bona
    if n_bona == 0 or n_spoof == 0:
        raise ParameterError(f"both classes needed (bona={n_bona}, spoof={n_spoof})")
    return ClassWeights(n_spoof / n_bona, 1.0)


def _label_index(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind in "US":
        return np.where(labels == "bona", BONA, SPOOF)
    return labels.astype(np.int64)


def weighted_loss(logits: np.ndarray, labels, weights: ClassWeights):
    """Weighted mean cross-entropy and its gradient w.r.t. ``logits``.

    loss = sum_i w_{y_i} CE_i / sum_i w_{y_i}.  Only the ratio
    w_bona / w_spoof enters the computation, so scaling both weights by the
    same factor leaves results unchanged.
    """
    logits = np.asarray(logits)
    y = _label_index(labels)
    if y.size == 0:
        raise ParameterError("empty batch")
    ratio = weights.w_bona / weights.w_spoof
    w = np.where(y == BONA, ratio, 1.0).astype(logits.dtype)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(y.size)
    total = w.sum()
    loss = float(-(w * logp[rows, y]).sum() / total)
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        theta = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(theta.dtype)
    return params, state


# configuration ---------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.1
    max_steps: int = 500
    epochs: int = 0            # 0: bounded by max_steps only
    eval_every: int = 50
    seed: int = 0
    class_weighting: str = "auto"
    w_bona: float = 1.0
    w_spoof: float = 1.0
    hidden: int = 256
    attn: int = 128
    layers: tuple = DEFAULT_LAYERS
    dtype: str = "float32"
    finetune_from: str = ""
    finetune_lr: float = 5e-5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ParameterError("lr must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ParameterError("eval_every must be >= 1")
        if self.class_weighting not in ("auto", "explicit"):
            raise ParameterError("class_weighting must be auto or explicit")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError("dtype must be float32 or float64")


def _coerce(value: str, kind):
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    if kind in (tuple, "tuple"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


def parse_overrides(pairs, cls=TrainConfig) -> dict:
    """``["key=value", ...]`` -> typed dict; unknown keys are rejected."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for n, raw in enumerate(pairs, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise FormatError(f"line {n}: expected key=value, got {raw!r}")
        if key not in types:
            raise FormatError(f"unknown config key {key!r}")
        try:
            out[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise FormatError(f"bad value for {key}: {value!r}") from exc
    return out


def load_config(path, cls=TrainConfig, overrides=()) -> object:
    values = parse_overrides(Path(path).read_text().splitlines(), cls) if path else {}
    values.update(parse_overrides(overrides, cls))
    return cls(**values)


def format_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    best_step: int
    best_eer: float
    final: ModelParams
    metrics: list            # (step, loss | None, dev_eer | None)
    trajectory: np.ndarray   # (steps, S)

    def metrics_text(self) -> str:
        lines = ["step,loss,dev_eer"]
        for step, loss, eer in self.metrics:
            lines.append(f"{step},{'' if loss is None else f'{loss:.9f}'},"
                         f"{'' if eer is None else f'{eer:.9f}'}")
        return "\n".join(lines) + "\n"


def _stack_batch(entries, source, layers, rngs=None):
    rngs = rngs or [None] * len(entries)
    return np.stack([select_layers(source(e.trial_id, r), layers) for e, r in zip(entries, rngs)])


def train(train_entries, dev_entries, source, config: TrainConfig, init: ModelParams | None = None,
          out_dir=None, lr: float | None = None) -> TrainResult:
    """Adam training with dev-EER checkpoint selection.

    ``source(trial_id, rng)`` yields a LayerStack; ``rng`` is None for dev
    trials and a per-(epoch, position) generator for training trials.  Dev
    EER is measured at step 0 and every ``eval_every`` steps (and after the
    last step); the lowest EER wins, ties going to the earlier step.
    """
    train_entries, dev_entries = list(train_entries), list(dev_entries)
    if not train_entries or not dev_entries:
        raise ParameterError("train and dev manifests must be non-empty")
    dtype = np.dtype(config.dtype)
    if config.class_weighting == "auto":
        weights = auto_class_weights(train_entries)
    else:
        weights = ClassWeights(config.w_bona, config.w_spoof)

    dev_stacks = _stack_batch(dev_entries, source, (init.config.layers if init else config.layers))
    dev_labels = [e.is_bona for e in dev_entries]
    if init is None:
        mcfg = ModelConfig(dim=dev_stacks.shape[-1], hidden=config.hidden, attn=config.attn,
                           layers=config.layers, dropout=config.dropout)
        params = init_params(mcfg, make_rng(config.seed, _INIT), dtype)
    else:
        mcfg = dataclasses.replace(init.config, dropout=config.dropout)
        params = ModelParams(mcfg, {k: v.astype(dtype) for k, v in init.tensors.items()})
        if params.config.dim != dev_stacks.shape[-1]:
            raise FormatError(f"checkpoint expects D={params.config.dim}, data has {dev_stacks.shape[-1]}")
        check_shapes(params)
    layers = mcfg.layers
    state = AdamState(lr=config.lr if lr is None else lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics, trajectory = [], []
    best = None

    def evaluate(step, loss):
        nonlocal best
        eer = compute_eer(score_stacks(dev_stacks, params, config.batch_size), dev_labels).eer
        metrics.append((step, loss, eer))
        log.info("step %d loss %s dev_eer %.4f", step, loss, eer)
        if best is None or eer < best[1]:
            best = (step, eer, params.copy())
            if out_dir is not None:
                _save(out_dir / "best.ckpt", best, trajectory)

    evaluate(0, None)
    n = len(train_entries)
    step, epoch = 0, 0
    while step < config.max_steps and (config.epochs == 0 or epoch < config.epochs):
        order = make_rng(config.seed, _SHUFFLE, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            if step >= config.max_steps:
                break
            idx = order[start:start + config.batch_size]
            batch = [train_entries[i] for i in idx]
            rngs = [make_rng(config.seed, _CLIP, epoch, int(i)) for i in idx]
            x = _stack_batch(batch, source, layers, rngs)
            result = forward(x, params, make_rng(config.seed, _DROPOUT, step), training=True)
            loss, dlogits = weighted_loss(result.logits, [e.label for e in batch], weights)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step + 1}")
            grads = backward(result, dlogits, params)
            adam_step(params.tensors, grads, state)
            step += 1
            trajectory.append(softmax(params.tensors["fusion"].astype(np.float64)))
            if step % config.eval_every == 0 or step == config.max_steps:
                evaluate(step, loss)
            else:
                metrics.append((step, loss, None))
        epoch += 1
    if metrics[-1][2] is None:
        step_, loss_, _ = metrics.pop()
        evaluate(step_, loss_)

    traj = np.array(trajectory, dtype=np.float64).reshape(len(trajectory), len(layers))
    best_step, best_eer, best_params = best
    ckpt = Checkpoint(best_params, {"step": str(best_step), "dev_eer": f"{best_eer:.9f}"}, traj)
    result = TrainResult(ckpt, best_step, best_eer, params, metrics, traj)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "best.ckpt")
        (out_dir / "metrics.csv").write_text(result.metrics_text())
        write_trajectory(traj, layers, out_dir / "fusion.csv")
    return result


def _save(path, best, trajectory):
    step, eer, params = best
    traj = np.array(trajectory, dtype=np.float64).reshape(len(trajectory), len(params.config.layers))
    save_checkpoint(Checkpoint(params, {"step": str(step), "dev_eer": f"{eer:.9f}"}, traj), path)


def finetune(base: ModelParams, train_entries, dev_entries, source, config: TrainConfig,
             out_dir=None) -> TrainResult:
    """Continue training every back-end parameter from ``base`` at ``finetune_lr``.

    Fresh Adam state; class weights re-derived from ``train_entries`` in auto
    mode.  With ``max_steps=0`` the selected checkpoint is ``base`` itself.
    """
    return train(train_entries, dev_entries, source, config, init=base, out_dir=out_dir,
                 lr=config.finetune_lr)

"""MLP classifier, loss functions, and the shared mini-batch training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset
from .optim import make_optimizer

# loss value at the probability floor 1e-12; caps -log p
P_FLOOR = 1e-12
XENT_MAX = -math.log(P_FLOOR)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GceConfig:
    """Generalized cross-entropy (1 - p^tau) / tau; tau in (0, 1]."""

    tau: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    shuffle: bool = True
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden = tuple(self.hidden)


@dataclass
class MlpParams:
    """Alternating weight matrices and bias vectors for a ReLU MLP."""

    layer_sizes: list[int]
    arrays: list[np.ndarray] = field(repr=False)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [a.copy() for a in self.arrays])


def init_mlp(layer_sizes: list[int], seed: int) -> MlpParams:
    """He-initialized weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = math.sqrt(2.0 / fan_in)
        arrays.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), arrays)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Logits for a row or batch, plain numpy (no gradient tracking)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input dim {h.shape[1]} != {params.layer_sizes[0]}")
    n_layers = len(params.arrays) // 2
    for i in range(n_layers):
        h = h @ params.arrays[2 * i] + params.arrays[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def mlp_final_hidden(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Activation feeding the final linear layer (input x for 0 hidden layers)."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_layers = len(params.arrays) // 2
    for i in range(n_layers - 1):
        h = np.maximum(h @ params.arrays[2 * i] + params.arrays[2 * i + 1], 0.0)
    return h


def _forward_graph(tape: ad.Tape, leaves: list[ad.Node], x) -> ad.Node:
    """Differentiable forward pass; ``leaves`` alternate W, b.

    ``x`` may be a constant batch or an upstream tape node.
    """
    h = x if isinstance(x, ad.Node) else tape.const(
        np.atleast_2d(np.asarray(x, dtype=np.float64)))
    n_layers = len(leaves) // 2
    for i in range(n_layers):
        h = h @ leaves[2 * i] + leaves[2 * i + 1]
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def log_softmax_numpy(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    m = logits.max(axis=-1, keepdims=True)
    return logits - (np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m)


def softmax_numpy(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_numpy(logits))


def softmax_xent(logits, y):
    """Per-sample -log softmax(logits)[y], capped at -log(1e-12).

    Accepts a tape node (differentiable) or a numpy array.
    """
    y = np.asarray(y, dtype=np.int64)
    if isinstance(logits, ad.Node):
        if np.any(y < 0) or np.any(y >= logits.value.shape[-1]):
            raise ValueError("label out of range")
        losses = -ad.take_per_row(ad.log_softmax(logits), y)
        return ad.clamp_max(losses, XENT_MAX)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if np.any(y < 0) or np.any(y >= logits.shape[-1]):
        raise ValueError("label out of range")
    lp = log_softmax_numpy(logits)
    raw = -lp[np.arange(lp.shape[0]), np.atleast_1d(y)]
    out = np.minimum(raw, XENT_MAX)
    return out[0] if np.ndim(y) == 0 else out


def gce_loss(p_y, tau: float):
    """(1 - p^tau) / tau on the true-class probability; p floored at 1e-12."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0,1], got {tau}")
    if isinstance(p_y, ad.Node):
        p = ad.clamp_min(p_y, P_FLOOR)
    else:
        p = np.maximum(np.asarray(p_y, dtype=np.float64), P_FLOOR)
        if np.any(p > 1.0):
            raise ValueError("probability above 1")
    return (1.0 - p ** tau) / tau


def weighted_mean_loss(per_sample_losses, weights):
    """(1/B) * sum(w_n * loss_n). Divides by batch size, not by the weight sum."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("negative weight")
    if isinstance(per_sample_losses, ad.Node):
        n = per_sample_losses.value.shape[0]
        if w.shape != (n,):
            raise ValueError("weights/losses length mismatch")
        return (per_sample_losses * w).sum() * (1.0 / n)
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if w.shape != losses.shape:
        raise ValueError("weights/losses length mismatch")
    return float((losses * w).sum() / losses.shape[0])


def shuffle_batches(n: int, batch_size: int, seed: int,
                    shuffle: bool = True) -> Iterator[np.ndarray]:
    """Epoch-permutation batch stream (infinite)."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _gce_graph_loss(tape, logits, y, tau, weights):
    p = ad.exp(ad.take_per_row(ad.log_softmax(logits), np.asarray(y, dtype=np.int64)))
    return weighted_mean_loss(gce_loss(p, tau), weights)


def train(ds: LabeledDataset, cfg: TrainConfig, *,
          loss: str = "xent",
          tau: float = 0.7,
          weight_fn: Callable[[np.ndarray, int], np.ndarray] | None = None,
          sampler: Iterator[np.ndarray] | None = None,
          logit_offset: np.ndarray | None = None,
          eval_fn: Callable[[int, MlpParams, dict], object] | None = None,
          params: MlpParams | None = None,
          abort_xent_above: float | None = None):
    """Generic mini-batch loop shared by every weighting strategy.

    ``weight_fn(indices, step)`` returns per-sample loss weights (default 1).
    ``sampler`` yields batch index arrays per step (default: seeded epoch
    shuffle). ``logit_offset`` is an (N, C) constant added to the logits of
    the drawn samples before the loss (used for target adjustment).
    ``eval_fn(epoch, params, stats)`` builds the per-epoch history record.
    Deterministic given cfg.seed and inputs.
    """
    n = len(ds)
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    if params is None:
        params = init_mlp([ds.dim, *cfg.hidden, ds.num_classes], int(init_seed))
    else:
        params = params.copy()
    if sampler is None:
        sampler = shuffle_batches(n, cfg.batch_size, int(shuffle_seed), cfg.shuffle)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    n_steps = steps_per_epoch(n, cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_total = 0.0
        xent_total = 0.0
        seen = 0
        for _ in range(n_steps):
            idx = next(sampler)
            xb, yb = ds.features[idx], ds.labels[idx]
            w = np.ones(len(idx)) if weight_fn is None else np.asarray(weight_fn(idx, step), dtype=np.float64)
            tape = ad.Tape()
            leaves = [tape.leaf(a) for a in params.arrays]
            logits = _forward_graph(tape, leaves, xb)
            if logit_offset is not None:
                logits = logits + tape.const(logit_offset[idx])
            if loss == "xent":
                batch_loss = weighted_mean_loss(softmax_xent(logits, yb), w)
            elif loss == "gce":
                batch_loss = _gce_graph_loss(tape, logits, yb, tau, w)
            else:
                raise ValueError(f"unknown loss {loss!r}")
            lval = batch_loss.item()
            if not math.isfinite(lval):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {lval}")
            grads = tape.backward(batch_loss, wrt=leaves)
            opt.step(params.arrays, grads)
            loss_total += lval * len(idx)
            # uncapped cross-entropy of the raw logits, for divergence tracking
            lp = logits.value - _lse(logits.value)
            xent_total += float(-lp[np.arange(len(idx)), yb].sum())
            seen += len(idx)
            step += 1
        stats = {
            "epoch": epoch,
            "train_loss": loss_total / seen,
            "train_xent": xent_total / seen,
            "seconds": time.perf_counter() - t0,
            "step": step,
        }
        if abort_xent_above is not None and stats["train_xent"] > abort_xent_above:
            raise TrainingDiverged(
                f"mean train cross-entropy {stats['train_xent']:.1f} exceeded "
                f"{abort_xent_above}: amplification training collapsed "
                f"(loss spiking on rare conflicting samples); lower t_bias or tau")
        history.append(stats if eval_fn is None else eval_fn(epoch, params, stats))
    return params, history


def _lse(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m


# --- checkpoints: model.json + params.f64le ---------------------------------

def save_model(params: MlpParams, out_dir: str | Path,
               extra: dict | None = None) -> None:
    """Flat little-endian doubles in array order: W0 (row-major), b0, W1, b1, ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"schema_version": 1, "layer_sizes": params.layer_sizes}
    if extra:
        meta.update(extra)
    (out / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
    flat = np.concatenate([a.ravel() for a in params.arrays]).astype("<f8")
    (out / "params.f64le").write_bytes(flat.tobytes())


def load_model(in_dir: str | Path) -> tuple[MlpParams, dict]:
    src = Path(in_dir)
    meta = json.loads((src / "model.json").read_text())
    sizes = meta["layer_sizes"]
    raw = np.frombuffer((src / "params.f64le").read_bytes(), dtype="<f8").astype(np.float64)
    arrays = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        arrays.append(raw[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        arrays.append(raw[pos:pos + fan_out].copy())
        pos += fan_out
    return MlpParams(list(sizes), arrays), meta

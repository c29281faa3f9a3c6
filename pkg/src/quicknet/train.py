"""Reverse-mode gradients, SGD with momentum, augmentation and the training loop.

Random streams are derived from ``TrainConfig.seed`` by spawning four child
seeds in a fixed order: validation split, epoch shuffling, augmentation,
dropout. Two runs with the same seed on the same machine produce identical
histories.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import layers as L
from .arch import (BN, DENSE, DEPTHWISE, DROPOUT, GAP, LEAKY, MAXPOOL, POINTWISE, PRELU, SOFTMAX,
                   ModelGraph, forward)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 30
    patience: Optional[int] = 20
    fixed_epoch: Optional[int] = None
    dropout_rate: float = 0.5
    hflip: bool = True
    shift_px: int = 4
    seed: int = 0
    val_fraction: float = 0.10
    lr_schedule: str = "step"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr_schedule not in ("step", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: 10x decay at 50% and 75% of the run."""
        if self.lr_schedule == "constant":
            return self.lr
        lr = self.lr
        if epoch >= 0.5 * self.max_epochs:
            lr *= 0.1
        if epoch >= 0.75 * self.max_epochs:
            lr *= 0.1
        return lr


@dataclass
class GradTape:
    """Gradient slots keyed by ``(layer_index, parameter_name)`` plus the
    activations cached by the last forward pass."""

    grads: dict
    cache: list = field(default_factory=list)
    bn_updates: dict = field(default_factory=dict)

    @classmethod
    def for_graph(cls, g: ModelGraph) -> "GradTape":
        return cls({(i, name): np.zeros_like(a) for i, name, a in _trainable(g)})

    def check(self, g: ModelGraph) -> None:
        keys = {(i, name): a.shape for i, name, a in _trainable(g)}
        if set(keys) != set(self.grads):
            raise ValueError("gradient tape does not match the graph's parameters")
        for key, shape in keys.items():
            if self.grads[key].shape != shape:
                raise ValueError(f"gradient slot {key} has shape {self.grads[key].shape}, expected {shape}")


def _trainable(g: ModelGraph):
    for i, name, arr in g.parameters():
        if name != "alphas":
            yield i, name, arr


# --- forward/backward per layer -------------------------------------------


def _conv_forward(layer, x):
    return L.conv2d_fast(x, layer.params, layer.mode)


def _conv_backward(layer, x, dout):
    p = layer.params
    kernel = p.kernel.astype(dout.dtype, copy=False)
    n, c_in, h, w = x.shape
    grads = {}
    if p.bias is not None:
        grads["bias"] = dout.sum(axis=(0, 2, 3))
    k, s, pad = p.k, p.stride, p.pad
    ho, wo = dout.shape[2:]
    if layer.mode == "depthwise":
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernel)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                dk[:, 0, i, j] = (dout * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += dout * kernel[None, :, 0, i, j, None, None]
        grads["kernel"] = dk
        dx = dxp[:, :, pad: pad + h, pad: pad + w] if pad else dxp
        return dx, grads

    c_out = p.out_channels
    if k == 1 and pad == 0:
        xs = x[:, :, ::s, ::s].reshape(n, c_in, -1)
        d2 = dout.reshape(n, c_out, -1)
        grads["kernel"] = np.matmul(d2, xs.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dxs = np.matmul(kernel[:, :, 0, 0].T, d2).reshape(n, c_in, ho, wo)
        if s == 1:
            return dxs, grads
        dx = np.zeros_like(x)
        dx[:, :, ::s, ::s] = dxs
        return dx, grads

    cols, _, _ = L.im2col(x, k, s, pad)                      # (n, ho*wo, c_in*k*k)
    d2 = dout.reshape(n, c_out, ho * wo)                      # (n, c_out, ho*wo)
    grads["kernel"] = np.matmul(d2, cols).sum(axis=0).reshape(kernel.shape)
    dcols = np.matmul(d2.transpose(0, 2, 1), kernel.reshape(c_out, -1))
    dcols = dcols.reshape(n, ho, wo, c_in, k, k)
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad: pad + h, pad: pad + w] if pad else dxp
    return dx, grads


def _bn_forward_train(layer, x):
    p = layer.params
    dt = x.dtype
    mean, var = L.batch_stats(x)
    inv = 1.0 / np.sqrt(var + dt.type(p.eps))
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = p.gamma.astype(dt)[None, :, None, None] * xhat + p.beta.astype(dt)[None, :, None, None]
    return y, (xhat, inv), (mean, var)


def _bn_backward(layer, cache, dout):
    xhat, inv = cache
    gamma = layer.params.gamma.astype(dout.dtype)
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dx = (gamma * inv / m)[None, :, None, None] * (
        m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx, {"gamma": dgamma, "beta": dbeta}


def _prelu_backward(slopes, x, dout, want_slopes=True):
    a = slopes.astype(dout.dtype)[None, :, None, None]
    neg = x < 0
    dx = np.where(neg, a * dout, dout)
    if not want_slopes:
        return dx, {}
    da = np.where(neg, x * dout, 0).sum(axis=(0, 2, 3))
    return dx, {"slopes": da}


def _maxpool_backward(x, dout):
    out = L.maxpool2d(x)
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            hit = (x[:, :, i::2, j::2] == out) & ~taken
            dx[:, :, i::2, j::2] = np.where(hit, dout, 0)
            taken |= hit
    return dx


def forward_train(g: ModelGraph, x: np.ndarray, rng: np.random.Generator | None = None,
                  masks: dict | None = None):
    """Train-semantics forward pass (batch statistics, live dropout).

    Returns ``(logits, cache, bn_stats)`` where ``bn_stats`` maps each batch-norm
    layer index to the ``(mean, var)`` of its input batch. ``masks`` maps a dropout layer's
    index to a fixed multiplier and overrides ``rng`` for that layer.
    """
    cache = []
    bn_updates = {}
    for i, layer in enumerate(g.layers):
        kind = layer.kind
        if kind in (DENSE, DEPTHWISE, POINTWISE):
            cache.append(x)
            x = _conv_forward(layer, x)
        elif kind == BN:
            x, c, upd = _bn_forward_train(layer, x)
            cache.append(c)
            bn_updates[i] = upd
        elif kind == PRELU:
            cache.append(x)
            x = L.prelu(x, layer.params)
        elif kind == LEAKY:
            cache.append(x)
            x = L.leaky_relu(x, layer.alphas)
        elif kind == MAXPOOL:
            cache.append(x)
            x = L.maxpool2d(x)
        elif kind == GAP:
            cache.append(x.shape)
            x = L.global_avg_pool(x)
        elif kind == DROPOUT:
            if masks is not None and i in masks:
                mask = masks[i].astype(x.dtype)
            elif layer.rate > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs a random generator")
                mask = L.dropout_mask(x.shape, layer.rate, rng, x.dtype)
            else:
                mask = None
            cache.append(mask)
            if mask is not None:
                x = x * mask
        elif kind == SOFTMAX:
            cache.append(None)
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {kind}")
    return x.reshape(x.shape[0], -1), cache, bn_updates


def backward_from(g: ModelGraph, cache: list, dlogits: np.ndarray) -> tuple[np.ndarray, dict]:
    """Back-propagate ``dlogits`` through the cached forward pass.

    Returns the input gradient and ``{(layer_index, name): grad}``.
    """
    grads = {}
    d = dlogits
    for i in range(len(g.layers) - 1, -1, -1):
        layer = g.layers[i]
        kind = layer.kind
        c = cache[i]
        if kind == SOFTMAX:
            continue
        if d.ndim == 2:
            d = d.reshape(d.shape[0], d.shape[1], 1, 1)
        if kind in (DENSE, DEPTHWISE, POINTWISE):
            d, gr = _conv_backward(layer, c, d)
        elif kind == BN:
            d, gr = _bn_backward(layer, c, d)
        elif kind == PRELU:
            d, gr = _prelu_backward(layer.params.slopes, c, d)
        elif kind == LEAKY:
            d, gr = _prelu_backward(layer.alphas, c, d, want_slopes=False)
        elif kind == MAXPOOL:
            d, gr = _maxpool_backward(c, d), {}
        elif kind == GAP:
            n, ch, h, w = c
            d, gr = np.broadcast_to(d / d.dtype.type(h * w), c).copy(), {}
        elif kind == DROPOUT:
            gr = {}
            if c is not None:
                d = d * c
        else:
            raise ValueError(f"unknown layer kind {kind}")
        for name, val in gr.items():
            grads[(i, name)] = val
    return d, grads


def backward(g: ModelGraph, batch: np.ndarray, labels, tape: GradTape,
             rng: np.random.Generator | None = None, masks: dict | None = None) -> tuple[float, GradTape]:
    """Cross-entropy loss of ``batch`` and its gradient for every trainable parameter.

    The tape's slots are overwritten in place; the batch statistics seen by each
    batch norm are left in ``tape.bn_updates`` for the caller to commit.
    """
    if g.mode != "train":
        raise ValueError("backward needs a train-mode graph")
    tape.check(g)
    logits, cache, bn_updates = forward_train(g, batch, rng, masks)
    probs, loss = L.softmax_xent(logits, labels)
    labels = np.asarray(labels)
    dlogits = probs.copy()
    dlogits[np.arange(labels.size), labels] -= 1
    dlogits /= labels.size
    _, grads = backward_from(g, cache, dlogits.astype(logits.dtype))
    for key, slot in tape.grads.items():
        slot[...] = grads.get(key, 0)
    tape.cache = cache
    tape.bn_updates = bn_updates
    tape.logits = logits
    return loss, tape


def loss_at(g: ModelGraph, batch: np.ndarray, labels, masks: dict | None = None) -> float:
    """Train-semantics loss with fixed dropout masks; used by finite-difference checks."""
    logits, _, _ = forward_train(g, batch, None, masks)
    return L.softmax_xent(logits, labels)[1]


def sgd_step(g: ModelGraph, tape: GradTape, velocity: dict, cfg: TrainConfig, lr: float | None = None) -> tuple[ModelGraph, dict]:
    """Momentum update ``v <- m*v - lr*grad``, ``theta <- theta + v``, in place."""
    lr = cfg.lr if lr is None else lr
    params = {(i, name): a for i, name, a in _trainable(g)}
    for key, grad in tape.grads.items():
        theta = params[key]
        if cfg.weight_decay and key[1] == "kernel":
            grad = grad + cfg.weight_decay * theta
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(theta)
        v *= cfg.momentum
        v -= lr * grad
        theta += v
    return g, velocity


def _commit_bn(g: ModelGraph, batch_stats: dict) -> None:
    """Blend batch statistics into the running statistics with each layer's momentum."""
    for i, (mean, var) in batch_stats.items():
        layer = g.layers[i]
        p = layer.params
        m = p.momentum
        layer.params = replace(p, running_mean=(m * p.running_mean + (1 - m) * mean).astype(np.float32),
                               running_var=(m * p.running_var + (1 - m) * var).astype(np.float32))


def calibrate_bn(g: ModelGraph, x: np.ndarray) -> ModelGraph:
    """Copy of ``g`` whose running statistics equal the batch statistics of ``x``."""
    out = g.copy()
    no_drop = {i: np.ones(1) for i, layer in enumerate(out.layers) if layer.kind == DROPOUT}
    _, _, stats = forward_train(out, x, masks=no_drop)
    for i, (mean, var) in stats.items():
        layer = out.layers[i]
        layer.params = replace(layer.params, running_mean=mean.astype(np.float32), running_var=var.astype(np.float32))
    return out


# --- augmentation ---------------------------------------------------------


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a ``(C, H, W)`` image right by ``dx`` and down by ``dy`` with zero fill."""
    c, h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def augment(imgs: np.ndarray, hflip: bool, shift_px: int, rng: np.random.Generator) -> np.ndarray:
    """Independent random horizontal flip (p=0.5) and translation per sample."""
    if imgs.ndim != 4:
        raise ValueError("augment expects an NCHW batch")
    n, _, h, w = imgs.shape
    if shift_px >= min(h, w):
        raise ValueError(f"shift_px={shift_px} must be smaller than the image ({h}x{w})")
    if not hflip and shift_px == 0:
        return imgs
    flips = rng.random(n) < 0.5 if hflip else np.zeros(n, bool)
    shifts = rng.integers(-shift_px, shift_px + 1, size=(n, 2)) if shift_px else np.zeros((n, 2), int)
    out = np.empty_like(imgs)
    for s in range(n):
        img = imgs[s, :, :, ::-1] if flips[s] else imgs[s]
        out[s] = shift_image(img, int(shifts[s, 0]), int(shifts[s, 1]))
    return out


# --- training loop --------------------------------------------------------


def _xy(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.images, data.labels
    return np.asarray(x), np.asarray(y, dtype=np.int64)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint ``(train_idx, val_idx)`` with ``round(val_fraction * n)`` validation samples."""
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(g: ModelGraph, data, batch_size: int = 250) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval semantics."""
    x, y = _xy(data)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start: start + batch_size], y[start: start + batch_size]
        logits = forward(g, xb)
        _, loss = L.softmax_xent(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(y), loss_sum / len(y)


HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def history_csv(history: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def train(g: ModelGraph, data, cfg: TrainConfig, val_data=None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[ModelGraph, list]:
    """Train a copy of ``g`` and return the best-validation snapshot and history.

    Without ``val_data`` a ``cfg.val_fraction`` share of ``data`` is held out
    with a seeded shuffle and never trained on.
    """
    if g.mode != "train":
        raise ValueError("train needs a train-mode graph")
    x, y = _xy(data)
    split_ss, shuffle_ss, aug_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    if val_data is None:
        tr, va = split_indices(len(y), cfg.val_fraction, np.random.default_rng(split_ss))
        x_tr, y_tr, val = x[tr], y[tr], (x[va], y[va])
    else:
        x_tr, y_tr, val = x, y, _xy(val_data)
    if len(y_tr) < cfg.batch_size:
        raise ValueError(f"training set of {len(y_tr)} samples is smaller than one batch ({cfg.batch_size})")

    g = g.copy()
    for layer in g.layers:
        if layer.kind == DROPOUT:
            layer.rate = float(np.float32(cfg.dropout_rate))
    history: list = []
    if cfg.max_epochs <= 0:
        return g, history

    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)
    tape = GradTape.for_graph(g)
    velocity: dict = {}
    best, best_acc, since_best = g.copy(), -1.0, 0
    last_epoch = cfg.max_epochs if cfg.fixed_epoch is None else min(cfg.max_epochs, cfg.fixed_epoch)

    for epoch in range(last_epoch):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(y_tr))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            xb = augment(x_tr[idx], cfg.hflip, cfg.shift_px, aug_rng)
            loss, tape = backward(g, xb, y_tr[idx], tape, drop_rng)
            sgd_step(g, tape, velocity, cfg, lr)
            _commit_bn(g, tape.bn_updates)
            loss_sum += loss * len(idx)
            correct += int((tape.logits.argmax(axis=1) == y_tr[idx]).sum())
        val_acc, val_loss = evaluate(g, val)
        row = dict(epoch=epoch + 1, train_loss=loss_sum / len(y_tr), train_acc=correct / len(y_tr),
                   val_loss=val_loss, val_acc=val_acc)
        history.append(row)
        log.info("epoch %d lr %.4g train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                 epoch + 1, lr, row["train_loss"], row["train_acc"], val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(row)
        if val_acc > best_acc:
            best, best_acc, since_best = g.copy(), val_acc, 0
        else:
            since_best += 1
            if cfg.fixed_epoch is None and cfg.patience is not None and since_best >= cfg.patience:
                break
    return best, history

"""Forward kernels for every layer kind QuickNet uses.

Convolutions follow the cross-correlation convention (no kernel flip).
Reference kernels accumulate each output element serially: input channel in
the outer loop, kernel row and column inside it, bias added last. Float32
inputs accumulate in a float64 register that is rounded once at the end. The
kernels are vectorized only across independent output elements, so results
are bit-reproducible. ``conv2d_fast`` lowers convolutions onto matrix multiplies
and is only guaranteed to agree with the reference to about 1e-5.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import DTYPE, OpCounter, reduce_mean

CONV_MODES = ("dense", "depthwise", "pointwise")


@dataclass(frozen=True)
class ConvParams:
    """Kernel and bias of one convolution.

    Kernel layouts: dense ``(C_out, C_in, k, k)``, depthwise ``(C, 1, k, k)``,
    pointwise ``(C_out, C_in, 1, 1)``.
    """

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValueError(f"kernel must be (C_out, C_in, k, k), got {self.kernel.shape}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.padding == "same" and self.k % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel, got k={self.k}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2 if self.padding == "same" else 0

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass(frozen=True)
class PReLUParams:
    slopes: np.ndarray

    @classmethod
    def init(cls, channels: int, value: float = 0.25) -> "PReLUParams":
        return cls(np.full(channels, value, dtype=DTYPE))


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        # stored as f32 in model files; keep the in-memory value representable
        object.__setattr__(self, "eps", float(np.float32(self.eps)))
        object.__setattr__(self, "momentum", float(np.float32(self.momentum)))
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def init(cls, channels: int, eps: float = 1e-3, momentum: float = 0.99) -> "BNParams":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _check_conv(x: np.ndarray, p: ConvParams, mode: str) -> tuple[int, int]:
    if mode not in CONV_MODES:
        raise ValueError(f"unknown conv mode {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got rank {x.ndim}")
    c_in = x.shape[1]
    kc = p.kernel.shape
    if mode == "depthwise":
        if kc[1] != 1 or kc[0] != c_in:
            raise ValueError(f"depthwise kernel {kc} does not match {c_in} input channels")
    else:
        if kc[1] != c_in:
            raise ValueError(f"kernel expects {kc[1]} input channels, input has {c_in}")
        if mode == "pointwise" and p.k != 1:
            raise ValueError("pointwise kernels must be 1x1")
    h, w = x.shape[2:]
    if h + 2 * p.pad < p.k or w + 2 * p.pad < p.k:
        raise ValueError(f"spatial size {h}x{w} too small for a {p.k}x{p.k} kernel")
    return conv_output_hw(h, w, p.k, p.stride, p.pad)


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Slice of the padded input read by kernel tap (i, j): ``(N, C, ho, wo)``."""
    return xp[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride]


def _acc_dtype(dtype) -> np.dtype:
    return np.promote_types(dtype, np.float64)


def _add_bias(acc: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    if bias is not None:
        acc += bias.astype(acc.dtype, copy=False)[None, :, None, None]
    return acc


def conv2d(x: np.ndarray, p: ConvParams, mode: str = "dense", counter: OpCounter | None = None) -> np.ndarray:
    """Reference convolution with a fixed per-element accumulation order."""
    ho, wo = _check_conv(x, p, mode)
    n, c_in = x.shape[:2]
    acc_t = _acc_dtype(x.dtype)
    kernel = p.kernel.astype(acc_t)
    xp = _padded(x.astype(acc_t), p.pad)
    k, s = p.k, p.stride

    if mode == "depthwise":
        acc = np.zeros((n, c_in, ho, wo), dtype=acc_t)
        for i in range(k):
            for j in range(k):
                prod = _window(xp, i, j, ho, wo, s) * kernel[None, :, 0, i, j, None, None]
                acc += prod
                if counter is not None:
                    counter.add_macs(prod.size)
        return _add_bias(acc, p.bias).astype(x.dtype)

    c_out = p.out_channels
    acc = np.zeros((n, c_out, ho, wo), dtype=acc_t)
    for ci in range(c_in):
        plane = xp[:, ci: ci + 1]
        for i in range(k):
            for j in range(k):
                prod = _window(plane, i, j, ho, wo, s) * kernel[None, :, ci, i, j, None, None]
                acc += prod
                if counter is not None:
                    counter.add_macs(prod.size)
    return _add_bias(acc, p.bias).astype(x.dtype)


def separable_conv2d(x: np.ndarray, dw: ConvParams, pw: ConvParams, counter: OpCounter | None = None) -> np.ndarray:
    """Depthwise then pointwise convolution, fused per input channel.

    Each depthwise channel is consumed by the pointwise accumulator as soon as
    it is produced, so the full intermediate map is never materialized. The
    arithmetic is the same sequence of float operations as running the two
    reference kernels back to back, including rounding the depthwise result
    to the input dtype.
    """
    ho, wo = _check_conv(x, dw, "depthwise")
    if pw.kernel.shape[1] != x.shape[1]:
        raise ValueError(f"pointwise kernel expects {pw.kernel.shape[1]} channels, input has {x.shape[1]}")
    if pw.k != 1:
        raise ValueError("pointwise kernels must be 1x1")
    n, c_in = x.shape[:2]
    acc_t = _acc_dtype(x.dtype)
    dk = dw.kernel.astype(acc_t)
    pk = pw.kernel.astype(acc_t)
    xp = _padded(x.astype(acc_t), dw.pad)
    k, s = dw.k, dw.stride
    ps = pw.stride
    po, qo = conv_output_hw(ho, wo, 1, ps, 0)
    acc = np.zeros((n, pw.out_channels, po, qo), dtype=acc_t)
    for ci in range(c_in):
        plane = xp[:, ci: ci + 1]
        d = np.zeros((n, 1, ho, wo), dtype=acc_t)
        for i in range(k):
            for j in range(k):
                d += _window(plane, i, j, ho, wo, s) * dk[ci, 0, i, j]
        if dw.bias is not None:
            d += dw.bias.astype(acc_t)[ci]
        d = d.astype(x.dtype).astype(acc_t)
        prod = d[:, :, ::ps, ::ps] * pk[None, :, ci, 0, 0, None, None]
        acc += prod
        if counter is not None:
            counter.add_macs(d.size * k * k + prod.size)
    return _add_bias(acc, pw.bias).astype(x.dtype)


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of shape ``(N, ho*wo, C*k*k)`` plus the output extent."""
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, stride, pad)
    xp = _padded(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_fast(x: np.ndarray, p: ConvParams, mode: str = "dense") -> np.ndarray:
    """im2col + matrix multiply path; agrees with ``conv2d`` to ~1e-5."""
    ho, wo = _check_conv(x, p, mode)
    n = x.shape[0]
    kernel = p.kernel.astype(x.dtype, copy=False)
    if mode == "depthwise":
        # k*k vectorized multiply-adds in the input dtype
        xp = _padded(x, p.pad)
        out = np.zeros((n, x.shape[1], ho, wo), dtype=x.dtype)
        for i in range(p.k):
            for j in range(p.k):
                out += _window(xp, i, j, ho, wo, p.stride) * kernel[None, :, 0, i, j, None, None]
        return _add_bias(out, p.bias)
    if p.k == 1 and p.pad == 0:
        xs = x[:, :, :: p.stride, :: p.stride]
        out = np.matmul(kernel[:, :, 0, 0], xs.reshape(n, x.shape[1], -1))
        out = out.reshape(n, p.out_channels, ho, wo)
    else:
        cols, ho, wo = im2col(x, p.k, p.stride, p.pad)
        out = np.matmul(cols, kernel.reshape(p.out_channels, -1).T)
        out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, p.out_channels, ho, wo)
    return _add_bias(out, p.bias)


def _channel_leak(x: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or x.shape[1] != slopes.shape[0]:
        raise ValueError(f"{slopes.shape[0]} slopes for input with shape {x.shape}")
    a = slopes.astype(x.dtype, copy=False).reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x >= 0, x, a * x)


def prelu(x: np.ndarray, p: PReLUParams) -> np.ndarray:
    """``x`` where non-negative, otherwise the channel's trainable slope times ``x``."""
    return _channel_leak(x, p.slopes)


def leaky_relu(x: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Inference-time twin of :func:`prelu` with frozen per-channel slopes."""
    return _channel_leak(x, np.asarray(alphas))


def fold_prelu(p: PReLUParams) -> np.ndarray:
    """Freeze learned PReLU slopes into LeakyReLU constants (a verbatim copy)."""
    alphas = np.array(p.slopes, dtype=DTYPE, copy=True)
    alphas.setflags(write=False)
    return alphas


def batchnorm(x: np.ndarray, p: BNParams, mode: str = "infer") -> tuple[np.ndarray, BNParams]:
    """Batch normalization over the N, H, W axes of an NCHW tensor.

    Returns the output and the parameters after this call: unchanged in
    ``infer`` mode, with momentum-updated running statistics in ``train`` mode.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ValueError(f"batchnorm over {p.channels} channels got input {x.shape}")
    dt = x.dtype
    shape = (1, -1, 1, 1)
    gamma = p.gamma.astype(dt).reshape(shape)
    beta = p.beta.astype(dt).reshape(shape)
    if mode == "infer":
        mean = p.running_mean.astype(dt).reshape(shape)
        scale = gamma / np.sqrt(p.running_var.astype(dt).reshape(shape) + dt.type(p.eps))
        return (x - mean) * scale + beta, p
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError("train-mode batchnorm needs at least 2 values per channel")
    mean, var = batch_stats(x)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + dt.type(p.eps))
    y = gamma * xhat + beta
    mom = p.momentum
    updated = replace(
        p,
        running_mean=(mom * p.running_mean + (1 - mom) * mean).astype(DTYPE),
        running_var=(mom * p.running_var + (1 - mom) * var).astype(DTYPE),
    )
    return y, updated


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over N, H, W."""
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def fold_bn_into_conv(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb an inference-mode batch norm into the convolution that feeds it.

    The per-channel scale is applied in float64 and rounded once to float32.
    """
    c_out = conv.out_channels
    if bn.channels != c_out:
        raise ValueError(f"batchnorm has {bn.channels} channels, conv produces {c_out}")
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    kernel = conv.kernel.astype(np.float64) * scale[:, None, None, None]
    bias = np.zeros(c_out) if conv.bias is None else conv.bias.astype(np.float64)
    bias = (bias - bn.running_mean) * scale + bn.beta
    return replace(conv, kernel=kernel.astype(DTYPE), bias=bias.astype(DTYPE))


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2, counter: OpCounter | None = None) -> np.ndarray:
    """Non-overlapping 2x2 max pool; odd spatial sizes are rejected."""
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is supported")
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got rank {x.ndim}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    out = np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2])
    out = np.maximum(out, x[:, :, 1::2, 0::2])
    out = np.maximum(out, x[:, :, 1::2, 1::2])
    if counter is not None:
        counter.add_ops(3 * out.size)
    return out


def global_avg_pool(x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    return reduce_mean(x, counter)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[np.ndarray, float]:
    """Softmax probabilities and mean cross-entropy of a ``(batch, K)`` logit matrix."""
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(labels.size)
    logp = z[rows, labels].astype(np.float64) - np.log(s[:, 0].astype(np.float64))
    return probs, float(-logp.mean())


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None = None, mode: str = "infer") -> np.ndarray:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    return x * dropout_mask(x.shape, rate, rng, x.dtype)

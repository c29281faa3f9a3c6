"""QuickNet macroarchitecture: layer specs, the sequential model graph,
parameter/MAC accounting and inference-time folding.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from . import layers as L
from .tensor import DTYPE, OpCounter

# layer-kind codes shared with the model file format
DENSE, DEPTHWISE, POINTWISE, PRELU, LEAKY, BN, MAXPOOL, GAP, DROPOUT, SOFTMAX = range(1, 11)

KIND_NAMES = {
    DENSE: "conv",
    DEPTHWISE: "dwconv",
    POINTWISE: "pwconv",
    PRELU: "prelu",
    LEAKY: "leaky",
    BN: "batchnorm",
    MAXPOOL: "maxpool",
    GAP: "gap",
    DROPOUT: "dropout",
    SOFTMAX: "softmax",
}

_CONV_MODE = {DENSE: "dense", DEPTHWISE: "depthwise", POINTWISE: "pointwise"}


@dataclass
class ConvLayer:
    params: L.ConvParams
    mode: str = "dense"

    @property
    def kind(self) -> int:
        return {v: k for k, v in _CONV_MODE.items()}[self.mode]

    def arrays(self) -> dict:
        out = {"kernel": self.params.kernel}
        if self.params.bias is not None:
            out["bias"] = self.params.bias
        return out

    def output_shape(self, shape):
        c, h, w = shape
        p = self.params
        if self.mode == "depthwise":
            if p.kernel.shape[0] != c:
                raise ValueError(f"depthwise kernel for {p.kernel.shape[0]} channels, input has {c}")
        elif p.kernel.shape[1] != c:
            raise ValueError(f"conv expects {p.kernel.shape[1]} input channels, input has {c}")
        if h + 2 * p.pad < p.k or w + 2 * p.pad < p.k:
            raise ValueError(f"spatial collapse: {h}x{w} input to a {p.k}x{p.k} kernel")
        ho, wo = L.conv_output_hw(h, w, p.k, p.stride, p.pad)
        return (c if self.mode == "depthwise" else p.out_channels, ho, wo)

    def macs(self, shape) -> int:
        c, _, _ = shape
        co, ho, wo = self.output_shape(shape)
        k = self.params.k
        if self.mode == "depthwise":
            return k * k * c * ho * wo
        return k * k * c * co * ho * wo


@dataclass
class PReLULayer:
    params: L.PReLUParams
    kind = PRELU

    def arrays(self):
        return {"slopes": self.params.slopes}

    def output_shape(self, shape):
        if shape[0] != self.params.slopes.shape[0]:
            raise ValueError(f"prelu has {self.params.slopes.shape[0]} slopes, input has {shape[0]} channels")
        return shape


@dataclass
class LeakyLayer:
    alphas: np.ndarray
    kind = LEAKY

    def arrays(self):
        return {"alphas": self.alphas}

    def output_shape(self, shape):
        if shape[0] != self.alphas.shape[0]:
            raise ValueError(f"leaky has {self.alphas.shape[0]} alphas, input has {shape[0]} channels")
        return shape


@dataclass
class BNLayer:
    params: L.BNParams
    kind = BN

    def arrays(self):
        return {"gamma": self.params.gamma, "beta": self.params.beta}

    def buffers(self):
        return {"running_mean": self.params.running_mean, "running_var": self.params.running_var}

    def output_shape(self, shape):
        if shape[0] != self.params.channels:
            raise ValueError(f"batchnorm over {self.params.channels} channels, input has {shape[0]}")
        return shape


@dataclass
class MaxPoolLayer:
    window: int = 2
    stride: int = 2
    kind = MAXPOOL

    def arrays(self):
        return {}

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)


@dataclass
class GAPLayer:
    kind = GAP

    def arrays(self):
        return {}

    def output_shape(self, shape):
        return (shape[0], 1, 1)


@dataclass
class DropoutLayer:
    rate: float = 0.5
    kind = DROPOUT

    def __post_init__(self):
        self.rate = float(np.float32(self.rate))
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def arrays(self):
        return {}

    def output_shape(self, shape):
        return shape


@dataclass
class SoftmaxLayer:
    kind = SOFTMAX

    def arrays(self):
        return {}

    def output_shape(self, shape):
        return shape


Layer = Union[ConvLayer, PReLULayer, LeakyLayer, BNLayer, MaxPoolLayer, GAPLayer, DropoutLayer, SoftmaxLayer]


@dataclass
class ModelGraph:
    """Strictly sequential stack of layers.

    ``norm`` holds the per-channel input standardization constants
    ``(mean, std)`` when the model was trained on standardized images.
    """

    layers: list
    input_shape: tuple = (3, 32, 32)
    mode: str = "train"
    norm: Optional[tuple] = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.mode not in ("train", "infer-folded"):
            raise ValueError(f"unknown graph mode {self.mode!r}")
        self.shapes()

    def __len__(self):
        return len(self.layers)

    def shapes(self) -> list:
        """Per-sample output shape ``(C, H, W)`` of each layer; validates composition."""
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({KIND_NAMES[layer.kind]}): {exc}") from None
            out.append(shape)
        return out

    def output_shape(self):
        shapes = self.shapes()
        return shapes[-1] if shapes else self.input_shape

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every stored parameter."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.arrays().items():
                yield i, name, arr

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with every float array cast to ``dtype`` (used for gradient checks)."""
        g = self.copy()
        for layer in g.layers:
            for attr in ("params",):
                p = getattr(layer, attr, None)
                if p is None:
                    continue
                updates = {}
                for fname in p.__dataclass_fields__:
                    val = getattr(p, fname)
                    if isinstance(val, np.ndarray):
                        updates[fname] = val.astype(dtype)
                object.__setattr__(layer, attr, _replace_unchecked(p, updates))
            if isinstance(layer, LeakyLayer):
                layer.alphas = layer.alphas.astype(dtype)
        return g


def _replace_unchecked(p, updates):
    q = copy.copy(p)
    for k, v in updates.items():
        object.__setattr__(q, k, v)
    return q


@dataclass
class ArchConfig:
    """Knobs of the QuickNet macroarchitecture.

    Block ``i`` has ``base_filters * 2**(i // doubling_period)`` filters.
    ``downsample`` is either one policy for every doubling boundary or a
    sequence with one entry per boundary.
    """

    stem_filters: int = 64
    base_filters: int = 64
    doubling_period: int = 3
    num_blocks: int = 9
    stem_kernel: int = 5
    block_kernel: int = 3
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    downsample: Union[str, Sequence[str]] = "maxpool"
    dropout_rate: float = 0.5
    stem_bias: bool = True
    separable: bool = True

    def __post_init__(self):
        for name in ("stem_filters", "base_filters", "doubling_period", "num_blocks", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.stem_kernel < 1 or self.block_kernel < 1 or self.block_kernel % 2 == 0:
            raise ValueError("block_kernel must be odd and kernels positive")
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def block_filters(self) -> list[int]:
        return [self.base_filters * 2 ** (i // self.doubling_period) for i in range(self.num_blocks)]

    def boundary_policies(self) -> list[str]:
        n_boundaries = (self.num_blocks - 1) // self.doubling_period
        if isinstance(self.downsample, str):
            pol = [self.downsample] * n_boundaries
        else:
            pol = list(self.downsample)
            if len(pol) != n_boundaries:
                raise ValueError(f"downsample schedule has {len(pol)} entries, need {n_boundaries}")
        for p in pol:
            if p not in ("maxpool", "none"):
                raise ValueError(f"unknown downsample policy {p!r}")
        return pol


def reference_config() -> ArchConfig:
    """Nine separable blocks: 64 x3 @28, pool, 128 x3 @14, pool, 256 x3 @7."""
    return ArchConfig()


def desk_config(**overrides) -> ArchConfig:
    """Two-block model small enough to train on a laptop CPU."""
    base = dict(stem_filters=32, base_filters=32, doubling_period=1, num_blocks=2, downsample="maxpool")
    base.update(overrides)
    return ArchConfig(**base)


def dense_equivalent(cfg: ArchConfig) -> ArchConfig:
    """Same shapes with each separable block replaced by one dense convolution."""
    return replace(cfg, separable=False)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def build_quicknet(cfg: ArchConfig, rng: np.random.Generator | int = 0) -> ModelGraph:
    """Instantiate the stack: stem conv, repeated separable blocks with filter
    doubling and downsampling at each doubling boundary, dropout,
    global-average-pool head with a pointwise classifier and softmax.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c_in = cfg.input_shape[0]
    layers: list = []
    k = cfg.stem_kernel
    stem = L.ConvParams(
        kernel=_he_normal(rng, (cfg.stem_filters, c_in, k, k), c_in * k * k),
        bias=np.zeros(cfg.stem_filters, DTYPE) if cfg.stem_bias else None,
        padding="valid",
    )
    layers += [ConvLayer(stem, "dense"), BNLayer(L.BNParams.init(cfg.stem_filters)),
               PReLULayer(L.PReLUParams.init(cfg.stem_filters))]

    c = cfg.stem_filters
    filters = cfg.block_filters()
    policies = iter(cfg.boundary_policies())
    bk = cfg.block_kernel
    for i, f in enumerate(filters):
        if i > 0 and i % cfg.doubling_period == 0 and next(policies) == "maxpool":
            layers.append(MaxPoolLayer())
        if cfg.separable:
            dw = L.ConvParams(_he_normal(rng, (c, 1, bk, bk), c * bk * bk), padding="same")
            pw = L.ConvParams(_he_normal(rng, (f, c, 1, 1), c))
            layers += [ConvLayer(dw, "depthwise"), ConvLayer(pw, "pointwise")]
        else:
            dense = L.ConvParams(_he_normal(rng, (f, c, bk, bk), c * bk * bk), padding="same")
            layers.append(ConvLayer(dense, "dense"))
        layers += [BNLayer(L.BNParams.init(f)), PReLULayer(L.PReLUParams.init(f))]
        c = f

    head = L.ConvParams(_he_normal(rng, (cfg.num_classes, c, 1, 1), c), bias=np.zeros(cfg.num_classes, DTYPE))
    layers += [GAPLayer(), DropoutLayer(cfg.dropout_rate), ConvLayer(head, "pointwise"), SoftmaxLayer()]
    return ModelGraph(layers, cfg.input_shape, "train")


def forward(g: ModelGraph, x: np.ndarray, fast: bool = True, counter: OpCounter | None = None,
            probs: bool = False) -> np.ndarray:
    """Eval-semantics forward pass returning ``(batch, K)`` logits.

    Batch norm uses running statistics and dropout is the identity. Set
    ``probs`` to apply the trailing softmax layer as well. ``fast=False``
    runs the bit-reproducible reference kernels (and is required for op
    counting).
    """
    if counter is not None and fast:
        raise ValueError("op counting requires the reference kernels (fast=False)")
    if tuple(x.shape[1:]) != g.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {g.input_shape}")
    for layer in g.layers:
        kind = layer.kind
        if kind == SOFTMAX:
            x = x.reshape(x.shape[0], -1)
            if probs:
                x = L.softmax(x)
                if counter is not None:
                    counter.add_ops(x.size)
            continue
        x = apply_layer(layer, x, fast, counter)
    return x.reshape(x.shape[0], -1)


def apply_layer(layer, x: np.ndarray, fast: bool = True, counter: OpCounter | None = None) -> np.ndarray:
    kind = layer.kind
    if kind in _CONV_MODE:
        if fast:
            return L.conv2d_fast(x, layer.params, layer.mode)
        return L.conv2d(x, layer.params, layer.mode, counter)
    if kind == PRELU:
        y = L.prelu(x, layer.params)
    elif kind == LEAKY:
        y = L.leaky_relu(x, layer.alphas)
    elif kind == BN:
        y, _ = L.batchnorm(x, layer.params, "infer")
    elif kind == MAXPOOL:
        return L.maxpool2d(x, layer.window, layer.stride, counter)
    elif kind == GAP:
        return L.global_avg_pool(x, counter)
    elif kind == DROPOUT:
        return x
    elif kind == SOFTMAX:
        y = L.softmax(x.reshape(x.shape[0], -1))
    else:
        raise ValueError(f"unknown layer kind {kind}")
    if counter is not None:
        counter.add_ops(y.size)
    return y


@dataclass
class LayerStats:
    kind: str
    out_shape: tuple
    params: int
    buffers: int
    macs: int
    ops: int


@dataclass
class GraphStats:
    layers: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.layers)

    @property
    def buffers(self) -> int:
        return sum(r.buffers for r in self.layers)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.layers)

    @property
    def ops(self) -> int:
        return sum(r.ops for r in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.ops

    @property
    def fp32_bytes(self) -> int:
        return 4 * self.params


def _layer_stats(g: ModelGraph, batch: int) -> GraphStats:
    stats = GraphStats()
    shape = g.input_shape
    for layer in g.layers:
        out = layer.output_shape(shape)
        n_out = batch * int(np.prod(out))
        params = sum(a.size for a in layer.arrays().values())
        buffers = sum(a.size for a in layer.buffers().values()) if hasattr(layer, "buffers") else 0
        macs = ops = 0
        kind = layer.kind
        if kind in _CONV_MODE:
            macs = batch * layer.macs(shape)
        elif kind in (PRELU, LEAKY, BN, SOFTMAX):
            ops = n_out
        elif kind == MAXPOOL:
            ops = 3 * n_out
        elif kind == GAP:
            ops = batch * int(np.prod(shape))
        stats.layers.append(LayerStats(KIND_NAMES[kind], out, int(params), int(buffers), int(macs), int(ops)))
        shape = out
    return stats


def param_count(g: ModelGraph) -> GraphStats:
    """Per-layer and total parameter counts (``.params``; running stats in ``.buffers``)."""
    return _layer_stats(g, 1)


def flop_count(g: ModelGraph, batch: int = 1) -> GraphStats:
    """Per-layer and total operation counts for one eval forward of ``batch`` images.

    Convolutions contribute multiply-accumulates (``.macs``); batch norm,
    activations and softmax one op per output element; 2x2 max pool three
    comparisons per output; GAP one add per input element; dropout none.
    """
    return _layer_stats(g, batch)


def separable_ratio(c_out: int, k: int = 3) -> Fraction:
    return Fraction(1, c_out) + Fraction(1, k * k)


def format_megabytes(params: int) -> str:
    b = 4 * params
    return f"{b / 2**20:.2f} MB (2^20 B) / {b / 1e6:.2f} MB (10^6 B)"


def summarize(g: ModelGraph) -> str:
    """Tab-separated architecture table: kind, output shape, params, MACs."""
    stats = flop_count(g, 1)
    lines = ["kind\tout_shape\tparams\tmacs"]
    for r in stats.layers:
        shape = "x".join(str(d) for d in r.out_shape)
        lines.append(f"{r.kind}\t{shape}\t{r.params}\t{r.macs}")
    lines.append(f"total\t-\t{stats.params}\t{stats.macs}")
    lines.append(f"fp32 size\t{format_megabytes(stats.params)}")
    return "\n".join(lines) + "\n"


def fold_for_inference(g: ModelGraph) -> ModelGraph:
    """Fold every batch norm into its preceding conv, freeze PReLUs into
    LeakyReLUs and drop dropout layers. Returns a new ``infer-folded`` graph.
    """
    if g.mode != "train":
        raise ValueError("graph is already folded")
    out: list = []
    for i, layer in enumerate(g.layers):
        kind = layer.kind
        if kind == BN:
            prev = out[-1] if out else None
            if not isinstance(prev, ConvLayer):
                raise ValueError(f"cannot fold batchnorm at layer {i}: no preceding convolution")
            out[-1] = ConvLayer(L.fold_bn_into_conv(prev.params, layer.params), prev.mode)
        elif kind == PRELU:
            out.append(LeakyLayer(L.fold_prelu(layer.params)))
        elif kind == DROPOUT:
            continue
        else:
            out.append(copy.deepcopy(layer))
    return ModelGraph(out, g.input_shape, "infer-folded", copy.deepcopy(g.norm))


def fold_prelu_only(g: ModelGraph) -> ModelGraph:
    """Replace PReLUs with LeakyReLUs and leave everything else untouched."""
    out = [LeakyLayer(L.fold_prelu(l.params)) if l.kind == PRELU else copy.deepcopy(l) for l in g.layers]
    return ModelGraph(out, g.input_shape, g.mode, copy.deepcopy(g.norm))

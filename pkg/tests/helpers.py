import dataclasses

import numpy as np

from quicknet import arch as A
from quicknet import layers as L


def random_config(r: np.random.Generator, separable=True) -> A.ArchConfig:
    """Small ArchConfig that always builds (even spatial sizes at every pool)."""
    n_blocks = int(r.integers(1, 5))
    period = int(r.integers(1, 4))
    boundaries = (n_blocks - 1) // period
    stem_k = int(r.choice([1, 3, 5]))
    side = stem_k - 1 + 2 ** boundaries * int(r.integers(1, 4))
    return A.ArchConfig(
        stem_filters=int(r.integers(1, 6)),
        base_filters=int(r.integers(1, 5)),
        doubling_period=period,
        num_blocks=n_blocks,
        stem_kernel=stem_k,
        block_kernel=int(r.choice([1, 3])),
        num_classes=int(r.integers(2, 6)),
        input_shape=(int(r.integers(1, 4)), side, side),
        downsample=[str(r.choice(["maxpool", "none"])) for _ in range(boundaries)],
        stem_bias=bool(r.integers(0, 2)),
        separable=separable,
    )


def enumerate_params(g: A.ModelGraph) -> tuple[int, int]:
    """Count trainable and buffer scalars by walking every array field of every layer."""
    trainable = buffers = 0
    for layer in g.layers:
        holders = [layer]
        if hasattr(layer, "params"):
            holders.append(layer.params)
        for h in holders:
            if not dataclasses.is_dataclass(h):
                continue
            for f in dataclasses.fields(h):
                v = getattr(h, f.name)
                if isinstance(v, np.ndarray):
                    if f.name.startswith("running_"):
                        buffers += v.size
                    else:
                        trainable += v.size
    return trainable, buffers


GRAD_KINDS = ("conv", "conv_same_s2", "dwconv", "pwconv", "batchnorm", "prelu", "leaky",
              "maxpool", "gap", "dropout", "softmax")


def _probe_layer(kind, c, r):
    def w(*shape):
        return (r.standard_normal(shape) * 0.5).astype(np.float32)

    if kind == "conv":
        return A.ConvLayer(L.ConvParams(w(c, c, 3, 3), w(c)))
    if kind == "conv_same_s2":
        return A.ConvLayer(L.ConvParams(w(c, c, 3, 3), None, 2, "same"))
    if kind == "dwconv":
        return A.ConvLayer(L.ConvParams(w(c, 1, 3, 3), None, 1, "same"), "depthwise")
    if kind == "pwconv":
        return A.ConvLayer(L.ConvParams(w(c, c, 1, 1), w(c)), "pointwise")
    if kind == "batchnorm":
        p = L.BNParams.init(c)
        return A.BNLayer(L.BNParams(1 + w(c), w(c), p.running_mean, p.running_var))
    if kind == "prelu":
        return A.PReLULayer(L.PReLUParams(r.uniform(0.05, 0.5, c).astype(np.float32)))
    if kind == "leaky":
        return A.LeakyLayer(r.uniform(0.05, 0.5, c).astype(np.float32))
    if kind == "maxpool":
        return A.MaxPoolLayer()
    if kind == "dropout":
        return A.DropoutLayer(0.5)
    if kind in ("gap", "softmax"):
        return None
    raise ValueError(kind)


def gradient_check(kind: str, r: np.random.Generator, h=1e-3) -> float:
    """Worst norm-wise relative error between backprop and central differences.

    The probe is ``layer -> GAP -> pointwise classifier -> softmax`` in float64,
    checked for every parameter of the graph and for the input. Inputs to
    piecewise-linear layers are kept at least 10h away from their kinks so the
    central difference never straddles one.
    """
    from oracles import central_difference, rel_error
    import importlib
    T = importlib.import_module("quicknet.train")

    c, side, n, classes = 3, 6, 4, 5
    body = _probe_layer(kind, c, r)
    head = [A.GAPLayer(),
            A.ConvLayer(L.ConvParams((r.standard_normal((classes, c, 1, 1))).astype(np.float32),
                                     r.standard_normal(classes).astype(np.float32)), "pointwise"),
            A.SoftmaxLayer()]
    g = A.ModelGraph(([body] if body is not None else []) + head, (c, side, side)).astype(np.float64)
    x = r.standard_normal((n, c, side, side))
    if kind in ("prelu", "leaky"):
        x = np.sign(x) * (np.abs(x) + 10 * h)
    elif kind == "maxpool":
        # distinct values on a 10h grid, shuffled, so every window has a clear winner
        x = (r.permutation(x.size) * 10 * h - x.size * 5 * h).reshape(x.shape)
    y = r.integers(0, classes, n)
    masks = None
    if kind == "dropout":
        masks = {0: L.dropout_mask((n, c, side, side), 0.5, r, np.float64)}

    def loss():
        return T.loss_at(g, x, y, masks)

    tape = T.GradTape.for_graph(g)
    T.backward(g, x, y, tape, masks=masks)
    logits, cache, _ = T.forward_train(g, x, None, masks)
    probs, _ = L.softmax_xent(logits, y)
    d = probs.copy()
    d[np.arange(n), y] -= 1
    dx, _ = T.backward_from(g, cache, d / n)

    errs = [rel_error(dx, central_difference(loss, x, h))]
    params = {(i, name): a for i, name, a in g.parameters()}
    for key, grad in tape.grads.items():
        errs.append(rel_error(grad, central_difference(loss, params[key], h)))
    return max(errs)

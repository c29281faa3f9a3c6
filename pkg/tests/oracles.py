"""Independent reference computations used as test oracles.

Nothing here imports the kernels under test.
"""
import numpy as np


def direct_conv(x, kernel, bias=None, stride=1, pad=0, depthwise=False):
    """Direct-sum convolution in float64, looping over every output element."""
    x = np.asarray(x, np.float64)
    kernel = np.asarray(kernel, np.float64)
    n, c, h, w = x.shape
    k = kernel.shape[2]
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad: pad + h, pad: pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    c_out = c if depthwise else kernel.shape[0]
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0
                    if depthwise:
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, o, r * stride + i, q * stride + j] * kernel[o, 0, i, j]
                    else:
                        patch = xp[b, :, r * stride: r * stride + k, q * stride: q * stride + k]
                        acc = float(np.sum(patch * kernel[o]))
                    out[b, o, r, q] = acc + (0.0 if bias is None else bias[o])
    return out


def count_conv_multiplies(n, c_in, h, w, c_out, k, stride, pad, depthwise=False):
    """Count the multiplications a naive nested-loop convolution executes."""
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    count = 0
    for _b in range(n):
        for _o in range(c_in if depthwise else c_out):
            for _r in range(ho):
                for _q in range(wo):
                    for _ci in range(1 if depthwise else c_in):
                        for _i in range(k):
                            for _j in range(k):
                                count += 1
    return count


def window_max(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), x.dtype)
    for b in range(n):
        for ch in range(c):
            for r in range(h // 2):
                for q in range(w // 2):
                    out[b, ch, r, q] = max(x[b, ch, 2 * r + a, 2 * q + d] for a in (0, 1) for d in (0, 1))
    return out


def optimal_code_lengths(freqs):
    """Huffman lengths by repeatedly merging the two lightest groups (list-based, no heap)."""
    groups = [[c, [s]] for s, c in freqs.items()]
    depth = {s: 0 for s in freqs}
    if len(groups) == 1:
        return {groups[0][1][0]: 1}
    while len(groups) > 1:
        groups.sort(key=lambda g: g[0])
        a, b = groups.pop(0), groups.pop(0)
        for s in a[1] + b[1]:
            depth[s] += 1
        groups.append([a[0] + b[0], a[1] + b[1]])
    return depth


def entropy_bits(symbols):
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def central_difference(f, arr, h=1e-3):
    """Numerical gradient of scalar ``f()`` with respect to ``arr``, perturbed in place."""
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    """Norm-wise relative error; the floor keeps gradients that are exactly zero
    (a bias feeding batch norm) from comparing rounding noise."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)

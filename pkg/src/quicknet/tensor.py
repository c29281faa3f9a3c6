"""Dense float32 tensors.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 with rank 1-4
(rank 4 is NCHW). The helpers here validate shapes, build read-only arrays and
provide the few primitives whose accumulation order must be pinned down.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

DTYPE = np.float32

Number = Union[int, float]


class OpCounter:
    """Tally of arithmetic operations executed by the reference kernels."""

    def __init__(self):
        self.macs = 0
        self.ops = 0

    def add_macs(self, n: int) -> None:
        self.macs += int(n)

    def add_ops(self, n: int) -> None:
        self.ops += int(n)

    @property
    def total(self) -> int:
        return self.macs + self.ops

    def __repr__(self):
        return f"OpCounter(macs={self.macs}, ops={self.ops})"


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= 4:
        raise ValueError(f"rank must be 1..4, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"every extent must be >= 1, got {dims}")
    return dims


def tensor_new(shape: Sequence[int], fill: Union[Number, Sequence[Number], np.ndarray] = 0.0) -> np.ndarray:
    """Build a read-only float32 tensor of ``shape``.

    ``fill`` is either a scalar broadcast to every element or a flat,
    row-major sequence whose length equals the element count.
    """
    dims = check_shape(shape)
    if np.isscalar(fill):
        out = np.full(dims, fill, dtype=DTYPE)
    else:
        flat = np.asarray(fill, dtype=DTYPE).ravel()
        count = int(np.prod(dims))
        if flat.size != count:
            raise ValueError(f"{flat.size} values given for shape {dims} ({count} elements)")
        out = flat.reshape(dims).copy()
    out.setflags(write=False)
    return out


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Pointwise ``add``, ``mul`` or ``scale`` (tensor times a constant)."""
    if op == "scale":
        if not np.isscalar(b):
            raise ValueError("scale expects a scalar operand")
        out = a * a.dtype.type(b)
    elif op in ("add", "mul"):
        b = np.asarray(b)
        if np.ndim(b) == 0:
            out = a + b if op == "add" else a * b
            out = out.astype(a.dtype, copy=False)
        elif a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        else:
            out = np.add(a, b) if op == "add" else np.multiply(a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return out


def reduce_mean(t: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Mean over the spatial dims of an NCHW tensor, shape ``(N, C, 1, 1)``.

    Values are summed one pixel at a time, left to right and top to bottom,
    so the result does not depend on numpy's pairwise summation.
    """
    if t.ndim != 4:
        raise ValueError(f"reduce_mean expects rank 4, got rank {t.ndim}")
    n, c, h, w = t.shape
    acc = np.zeros((n, c), dtype=t.dtype)
    for i in range(h):
        row = t[:, :, i, :]
        for j in range(w):
            acc += row[:, :, j]
    if counter is not None:
        counter.add_ops(t.size)
    out = acc / t.dtype.type(h * w)
    return out.reshape(n, c, 1, 1)

"""QNET model files.

Little-endian layout::

    b"QNET"  u32 version=1  u8 mode (0 train, 1 infer-folded)  u32 layer_count
    per layer: u8 kind  u8 flags  u32 hyperparams...  f32 payloads...
        conv (1, 2, 3)   flags bit0 bias, bit1 'same' padding
                         u32 c_out, u32 c_in, u32 k, u32 stride
                         f32 kernel[c_out*c_in*k*k], f32 bias[c_out] if bit0
        prelu, leaky     u32 channels, f32 slopes[channels]
        batchnorm        u32 channels, f32 eps, f32 momentum,
                         f32 gamma, beta, running_mean, running_var [channels each]
        maxpool          u32 window, u32 stride
        dropout          f32 rate
        gap, softmax     nothing
    u32 C, H, W (input shape)
    u8 has_norm; if 1: u32 channels, f32 mean[channels], f32 std[channels]
    u32 CRC-32 of every preceding byte

Conv flag bit2 (``external``) is only used inside compressed
archives: the kernel is replaced by a u32 index into the archive's tensor list.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import arch as A
from . import layers as L
from .errors import (BadMagicError, ChecksumError, FormatError, TruncatedError,
                     UnknownLayerKindError, VersionError)

MAGIC = b"QNET"
VERSION = 1
_MODES = {"train": 0, "infer-folded": 1}

FLAG_BIAS, FLAG_SAME, FLAG_EXTERNAL = 1, 2, 4


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack("<" + fmt, *vals))

    def f32(self, arr) -> None:
        self.parts.append(np.asarray(arr, dtype="<f4").tobytes())

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0, end: int | None = None):
        self.data = data
        self.pos = offset
        self.end = len(data) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedError(f"unexpected end of data at byte {self.pos} (need {n} more)")
        b = self.data[self.pos: self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def f32(self, count: int) -> np.ndarray:
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite value in payload ending at byte {self.pos}")
        return arr


def encode_layers(g: A.ModelGraph, external: dict | None = None) -> bytes:
    """Header-less body: mode, layers, input shape and normalization.

    ``external`` maps a layer index to an archive tensor index; that conv's
    kernel is then written as a reference instead of inline floats.
    """
    w = Writer()
    w.pack("BI", _MODES[g.mode], len(g.layers))
    for i, layer in enumerate(g.layers):
        kind = layer.kind
        if kind in (A.DENSE, A.DEPTHWISE, A.POINTWISE):
            p = layer.params
            flags = (FLAG_BIAS if p.bias is not None else 0) | (FLAG_SAME if p.padding == "same" else 0)
            ext = external is not None and i in external
            if ext:
                flags |= FLAG_EXTERNAL
            co, ci, k, _ = p.kernel.shape
            w.pack("BBIIII", kind, flags, co, ci, k, p.stride)
            if ext:
                w.pack("I", external[i])
            else:
                w.f32(p.kernel.ravel())
            if p.bias is not None:
                w.f32(p.bias)
        elif kind == A.PRELU:
            w.pack("BBI", kind, 0, layer.params.slopes.size)
            w.f32(layer.params.slopes)
        elif kind == A.LEAKY:
            w.pack("BBI", kind, 0, layer.alphas.size)
            w.f32(layer.alphas)
        elif kind == A.BN:
            p = layer.params
            w.pack("BBI", kind, 0, p.channels)
            w.f32([p.eps, p.momentum])
            for arr in (p.gamma, p.beta, p.running_mean, p.running_var):
                w.f32(arr)
        elif kind == A.MAXPOOL:
            w.pack("BBII", kind, 0, layer.window, layer.stride)
        elif kind == A.DROPOUT:
            w.pack("BB", kind, 0)
            w.f32([layer.rate])
        elif kind in (A.GAP, A.SOFTMAX):
            w.pack("BB", kind, 0)
        else:
            raise ValueError(f"cannot serialize layer kind {kind}")
    w.pack("III", *g.input_shape)
    if g.norm is None:
        w.pack("B", 0)
    else:
        mean, std = (np.asarray(a, np.float32) for a in g.norm)
        w.pack("BI", 1, mean.size)
        w.f32(mean)
        w.f32(std)
    return w.getvalue()


def decode_layers(r: Reader, external: list | None = None) -> A.ModelGraph:
    mode_byte, count = r.unpack("BI")
    modes = {v: k for k, v in _MODES.items()}
    if mode_byte not in modes:
        raise FormatError(f"unknown graph mode byte {mode_byte}")
    layers = []
    for i in range(count):
        kind, flags = r.unpack("BB")
        try:
            layers.append(_decode_layer(r, i, kind, flags, external))
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(f"shape inconsistency at layer {i}: {exc}") from None
    input_shape = r.unpack("III")
    has_norm = r.unpack("B")
    norm = None
    if has_norm == 1:
        c = r.unpack("I")
        if 8 * c > r.remaining():
            raise TruncatedError("normalization block runs past the end of data")
        norm = (r.f32(c), r.f32(c))
    elif has_norm != 0:
        raise FormatError(f"bad normalization flag {has_norm}")
    try:
        return A.ModelGraph(layers, input_shape, modes[mode_byte], norm)
    except ValueError as exc:
        raise FormatError(f"shape inconsistency: {exc}") from None


def _need(r: Reader, n_floats: int) -> None:
    if 4 * n_floats > r.remaining():
        raise TruncatedError(f"payload of {n_floats} floats runs past the end of data")


def _decode_layer(r: Reader, i: int, kind: int, flags: int, external):
    if kind not in A.KIND_NAMES:
        raise UnknownLayerKindError(f"unknown layer kind {kind} at layer {i}")
    if kind in (A.DENSE, A.DEPTHWISE, A.POINTWISE):
        if flags & ~(FLAG_BIAS | FLAG_SAME | FLAG_EXTERNAL):
            raise FormatError(f"bad flag byte {flags:#x} at layer {i}")
        co, ci, k, stride = r.unpack("IIII")
        if min(co, ci, k, stride) < 1:
            raise FormatError(f"zero-sized convolution at layer {i}")
        n = co * ci * k * k
        if flags & FLAG_EXTERNAL:
            if external is None:
                raise FormatError(f"external kernel reference at layer {i} outside an archive")
            idx = r.unpack("I")
            if idx >= len(external):
                raise FormatError(f"layer {i} references missing tensor {idx}")
            kernel = external[idx]
            if kernel.shape != (co, ci, k, k):
                raise FormatError(f"layer {i} kernel shape {kernel.shape} != {(co, ci, k, k)}")
        else:
            _need(r, n)
            kernel = r.f32(n).reshape(co, ci, k, k)
        bias = None
        if flags & FLAG_BIAS:
            _need(r, co)
            bias = r.f32(co)
        params = L.ConvParams(kernel, bias, stride, "same" if flags & FLAG_SAME else "valid")
        mode = {A.DENSE: "dense", A.DEPTHWISE: "depthwise", A.POINTWISE: "pointwise"}[kind]
        if mode == "depthwise" and ci != 1:
            raise FormatError(f"depthwise kernel at layer {i} has {ci} input channels")
        if mode == "pointwise" and k != 1:
            raise FormatError(f"pointwise kernel at layer {i} is {k}x{k}")
        return A.ConvLayer(params, mode)
    if flags != 0:
        raise FormatError(f"bad flag byte {flags:#x} at layer {i}")
    if kind in (A.PRELU, A.LEAKY):
        c = r.unpack("I")
        _need(r, c)
        vals = r.f32(c)
        return A.PReLULayer(L.PReLUParams(vals)) if kind == A.PRELU else A.LeakyLayer(vals)
    if kind == A.BN:
        c = r.unpack("I")
        _need(r, 2 + 4 * c)
        eps, momentum = r.f32(2)
        gamma, beta, mean, var = (r.f32(c) for _ in range(4))
        return A.BNLayer(L.BNParams(gamma, beta, mean, var, float(eps), float(momentum)))
    if kind == A.MAXPOOL:
        window, stride = r.unpack("II")
        return A.MaxPoolLayer(window, stride)
    if kind == A.DROPOUT:
        (rate,) = r.f32(1)
        return A.DropoutLayer(float(rate))
    if kind == A.GAP:
        return A.GAPLayer()
    return A.SoftmaxLayer()


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def check_crc(data: bytes, end: int) -> None:
    """Verify the CRC-32 stored at ``data[end:end+4]`` over ``data[:end]``."""
    if len(data) < end + 4:
        raise TruncatedError("missing checksum")
    if len(data) > end + 4:
        raise FormatError(f"{len(data) - end - 4} trailing bytes after checksum")
    (stored,) = struct.unpack("<I", data[end: end + 4])
    if stored != zlib.crc32(data[:end]):
        raise ChecksumError("checksum mismatch: file is corrupted")


def check_header(r: Reader, magic: bytes, version: int) -> None:
    head = r.data[r.pos: r.pos + 4]
    if len(head) < 4 and magic.startswith(head):
        raise TruncatedError("file too short")
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    v = r.unpack("I")
    if v != version:
        raise VersionError(f"unsupported version {v} (expected {version})")


def dumps_model(g: A.ModelGraph) -> bytes:
    return with_crc(MAGIC + struct.pack("<I", VERSION) + encode_layers(g))


def loads_model(data: bytes) -> A.ModelGraph:
    r = Reader(data)
    check_header(r, MAGIC, VERSION)
    g = decode_layers(r)
    check_crc(data, r.pos)
    return g


def save_model(g: A.ModelGraph, path) -> None:
    Path(path).write_bytes(dumps_model(g))


def load_model(path) -> A.ModelGraph:
    return loads_model(Path(path).read_bytes())

"""Deep-Compression-style codec: magnitude pruning, 8-bit or k-means
quantization, and canonical Huffman coding of sparse index/value streams.

QNTC archive layout (little-endian)::

    b"QNTC"  u32 version=1  u32 tensor_count
    per tensor:
        u8 scheme (0 linear8, 1 codebook)  u8 rank  u32 dims[rank]  u32 nz_count
        linear8: f32 min, f32 max    codebook: u16 k, f32 centroids[k]
        u32 n_entries, (u16 symbol, u8 length) * n_entries     index-gap table
        u32 n_entries, (u16 symbol, u8 length) * n_entries     value-code table
        u64 bit_length, ceil(bit_length / 8) bytes              index-gap stream
        u64 bit_length, ceil(bit_length / 8) bytes              value-code stream
    u32 graph_length, graph_length bytes    QNET body with external kernels
    u32 CRC-32 of every preceding byte

Index gaps are distances between consecutive nonzero flat indices (the
first is measured from -1). Gaps above 255 are split with escape symbol 0,
which advances 255 positions without emitting a value.
"""
from __future__ import annotations

import heapq
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import arch as A
from . import serialize as S
from .errors import CorruptStreamError, FormatError, TruncatedError
from .tensor import DTYPE

MAGIC = b"QNTC"
VERSION = 1
GAP_CAP = 255
MAX_ELEMENTS = 1 << 28      # sanity bound on a decoded tensor (1 GiB of float32)
SCHEMES = {"linear8": 0, "codebook": 1}

# table-driven decoding up to this code length, bit-serial beyond it
_LOOKUP_BITS = 20


# --- pruning and quantization ---------------------------------------------


def prune(t: np.ndarray, target_sparsity: float) -> np.ndarray:
    """Zero the ``ceil(sparsity * n)`` smallest-magnitude elements.

    Among equal magnitudes the lower flat index is pruned first.
    """
    if not 0 <= target_sparsity < 1:
        raise ValueError(f"sparsity must lie in [0, 1), got {target_sparsity}")
    flat = np.asarray(t, dtype=DTYPE).ravel()
    m = math.ceil(round(target_sparsity * flat.size, 9))
    out = flat.copy()
    if m:
        order = np.argsort(np.abs(flat), kind="stable")
        out[order[:m]] = 0
    return out.reshape(np.shape(t))


def quantize_linear8(t: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Uniform 8-bit codes over ``[min, max]`` of ``t``.

    A constant tensor maps to code 0 and dequantizes exactly.
    """
    v = np.asarray(t, dtype=DTYPE).ravel()
    if v.size == 0:
        return np.zeros(0, np.uint8), 0.0, 0.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.size, np.uint8), lo, hi
    codes = np.rint(255.0 * (v.astype(np.float64) - lo) / (hi - lo))
    return np.clip(codes, 0, 255).astype(np.uint8), lo, hi


def dequantize_linear8(codes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    lo, hi = float(lo), float(hi)
    return (lo + codes * ((hi - lo) / 255.0)).astype(DTYPE)


def _assign(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid index per value (centroids sorted ascending; ties go low)."""
    mids = (centroids[1:] + centroids[:-1]) / 2
    return np.searchsorted(mids, values, side="left")


def quantize_codebook(t: np.ndarray, k: int = 256, rng: np.random.Generator | None = None,
                      max_iter: int = 50, tol: float = 1e-6, history: list | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """k-means codebook over the nonzero values of ``t``.

    Centroids start evenly spaced over ``[min, max]`` and are refined by
    Lloyd iterations. Returns ``(codes, codebook)`` where ``codes`` lists one
    codebook index per nonzero element in flat order. If ``history`` is given,
    the squared error after each assignment step is appended to it.
    """
    if not 1 <= k <= 256:
        raise ValueError(f"codebook size must lie in [1, 256], got {k}")
    flat = np.asarray(t, dtype=DTYPE).ravel()
    vals = flat[flat != 0].astype(np.float64)
    if vals.size == 0:
        return np.zeros(0, np.uint8), np.zeros(0, DTYPE)
    distinct = np.unique(vals)
    if distinct.size <= k:
        if distinct.size < k:
            warnings.warn(f"only {distinct.size} distinct nonzero values; codebook shrunk from {k}")
        book = distinct.astype(DTYPE)
        return _assign(vals, book.astype(np.float64)).astype(np.uint8), book
    if rng is None:
        rng = np.random.default_rng(0)
    cent = np.linspace(vals.min(), vals.max(), k)
    for _ in range(max_iter):
        idx = _assign(vals, cent)
        if history is not None:
            history.append(float(((vals - cent[idx]) ** 2).sum()))
        sums = np.bincount(idx, weights=vals, minlength=k)
        counts = np.bincount(idx, minlength=k)
        new = cent.copy()
        hit = counts > 0
        new[hit] = sums[hit] / counts[hit]
        empty = np.flatnonzero(~hit)
        if empty.size:
            # reseed on data points; never raises the objective at the next assignment
            new[empty] = rng.choice(vals, size=empty.size, replace=False)
        new.sort()
        moved = np.abs(new - cent).max()
        cent = new
        if moved < tol and not empty.size:
            break
    book = cent.astype(DTYPE)
    codes = _assign(vals, book.astype(np.float64))
    if history is not None:
        history.append(float(((vals - book.astype(np.float64)[codes]) ** 2).sum()))
    return codes.astype(np.uint8), book


# --- canonical Huffman ----------------------------------------------------


def huffman_code_lengths(freqs: dict) -> dict:
    """Optimal code length per symbol; ties merge the subtree with the smaller symbol first."""
    if not freqs:
        return {}
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    heap = [(int(c), int(s), [int(s)]) for s, c in freqs.items()]
    heapq.heapify(heap)
    depth = {int(s): 0 for s in freqs}
    while len(heap) > 1:
        c1, s1, m1 = heapq.heappop(heap)
        c2, s2, m2 = heapq.heappop(heap)
        for s in m1 + m2:
            depth[s] += 1
        heapq.heappush(heap, (c1 + c2, min(s1, s2), m1 + m2))
    return depth


def canonical_codes(table) -> dict:
    """``{symbol: (code, length)}`` from ``(symbol, length)`` pairs."""
    code = 0
    prev_len = 0
    out = {}
    for sym, length in sorted(table, key=lambda e: (e[1], e[0])):
        code <<= length - prev_len
        out[sym] = (code, length)
        code += 1
        prev_len = length
    return out


def _validate_table(table) -> None:
    seen = set()
    kraft = 0
    for sym, length in table:
        if sym in seen:
            raise CorruptStreamError(f"symbol {sym} appears twice in a Huffman table")
        if length < 1:
            raise CorruptStreamError(f"symbol {sym} has code length {length}")
        seen.add(sym)
        kraft += 2.0 ** -length
    if kraft > 1 + 1e-12:
        raise CorruptStreamError("Huffman table is over-subscribed")


@dataclass
class HuffmanStream:
    table: list           # (symbol, length) pairs, canonical order
    bit_length: int
    payload: bytes

    @property
    def payload_bits(self) -> int:
        return self.bit_length


def huffman_encode(symbols) -> HuffmanStream:
    """Canonical Huffman code of an integer stream (symbols in ``[0, 65535]``)."""
    sym = np.asarray(symbols, dtype=np.int64).ravel()
    if sym.size == 0:
        return HuffmanStream([], 0, b"")
    if sym.min() < 0 or sym.max() > 0xFFFF:
        raise ValueError("symbols must fit in 16 bits")
    uniq, counts = np.unique(sym, return_counts=True)
    lengths = huffman_code_lengths(dict(zip(uniq.tolist(), counts.tolist())))
    table = sorted(lengths.items(), key=lambda e: (e[1], e[0]))
    codes = canonical_codes(table)
    max_len = max(lengths.values())
    if max_len > 62:
        raise ValueError("code length exceeds 62 bits")
    code_of = np.zeros(int(uniq.max()) + 1, np.int64)
    len_of = np.zeros(int(uniq.max()) + 1, np.int64)
    for s, (c, l) in codes.items():
        code_of[s], len_of[s] = c, l
    c, l = code_of[sym], len_of[sym]
    total = int(l.sum())
    starts = np.cumsum(l) - l
    bits = np.zeros(total, np.uint8)
    for j in range(max_len):
        m = l > j
        bits[starts[m] + j] = (c[m] >> (l[m] - 1 - j)) & 1
    return HuffmanStream(table, total, np.packbits(bits).tobytes())


def huffman_decode(stream: HuffmanStream) -> np.ndarray:
    """Inverse of :func:`huffman_encode`; malformed input raises ``CorruptStreamError``."""
    table, nbits, payload = stream.table, stream.bit_length, stream.payload
    if nbits == 0:
        if table and payload:
            raise CorruptStreamError("empty stream with a nonempty payload")
        return np.zeros(0, np.int64)
    if not table:
        raise CorruptStreamError("nonempty stream without a code table")
    if len(payload) != (nbits + 7) // 8:
        raise CorruptStreamError(f"{len(payload)} payload bytes for {nbits} bits")
    _validate_table(table)
    bits = np.unpackbits(np.frombuffer(payload, np.uint8))
    if bits[nbits:].any():
        raise CorruptStreamError("nonzero padding bits")
    bits = bits[:nbits]
    codes = canonical_codes(table)
    max_len = max(l for _, l in table)
    if max_len > _LOOKUP_BITS:
        return _decode_serial(bits, codes)
    size = 1 << max_len
    sym_tab = np.zeros(size, np.int64)
    len_tab = np.zeros(size, np.int64)
    for s, (c, l) in codes.items():
        lo = c << (max_len - l)
        sym_tab[lo: lo + (1 << (max_len - l))] = s
        len_tab[lo: lo + (1 << (max_len - l))] = l
    padded = np.concatenate([bits, np.zeros(max_len, np.uint8)]).astype(np.int64)
    win = np.zeros(nbits, np.int64)
    for j in range(max_len):
        win = (win << 1) | padded[j: j + nbits]
    win = win.tolist()
    sym_l, len_l = sym_tab.tolist(), len_tab.tolist()
    out = []
    pos = 0
    while pos < nbits:
        v = win[pos]
        l = len_l[v]
        if l == 0 or pos + l > nbits:
            raise CorruptStreamError(f"undecodable bits at stream offset {pos}")
        out.append(sym_l[v])
        pos += l
    return np.asarray(out, dtype=np.int64)


def _decode_serial(bits: np.ndarray, codes: dict) -> np.ndarray:
    lookup = {(l, c): s for s, (c, l) in codes.items()}
    max_len = max(l for l, _ in lookup)
    out = []
    code = length = 0
    for b in bits.tolist():
        code = (code << 1) | b
        length += 1
        s = lookup.get((length, code))
        if s is not None:
            out.append(s)
            code = length = 0
        elif length >= max_len:
            raise CorruptStreamError("undecodable bit sequence")
    if length:
        raise CorruptStreamError("stream ends inside a code word")
    return np.asarray(out, dtype=np.int64)


# --- sparse index streams -------------------------------------------------


def encode_gaps(indices: np.ndarray) -> np.ndarray:
    """Relative-index symbols for strictly increasing flat ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(0, np.int64)
    gaps = np.diff(np.concatenate([[-1], idx]))
    if gaps.min() < 1:
        raise ValueError("indices must be strictly increasing")
    esc = (gaps - 1) // GAP_CAP
    out = np.zeros(int(gaps.size + esc.sum()), np.int64)
    out[np.cumsum(esc + 1) - 1] = gaps - GAP_CAP * esc
    return out


def decode_gaps(symbols: np.ndarray, size: int) -> np.ndarray:
    sym = np.asarray(symbols, dtype=np.int64)
    if sym.size == 0:
        return sym
    if sym.min() < 0 or sym.max() > GAP_CAP:
        raise CorruptStreamError("index gap out of range")
    if sym[-1] == 0:
        raise CorruptStreamError("index stream ends with an escape")
    pos = np.cumsum(np.where(sym == 0, GAP_CAP, sym)) - 1
    idx = pos[sym != 0]
    if idx[-1] >= size:
        raise CorruptStreamError(f"index {idx[-1]} overflows a tensor of {size} elements")
    return idx


# --- per-tensor codec -----------------------------------------------------


@dataclass
class CompressedTensor:
    shape: tuple
    scheme: str
    nz_count: int
    index_stream: HuffmanStream
    value_stream: HuffmanStream
    codebook: Optional[np.ndarray] = None
    lo: float = 0.0
    hi: float = 0.0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def compress_tensor(t: np.ndarray, sparsity: float = 0.0, scheme: str = "linear8", k: int = 256,
                    rng: np.random.Generator | None = None) -> CompressedTensor:
    """Prune, quantize and Huffman-pack one weight tensor."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    pruned = prune(t, sparsity).ravel()
    support = np.flatnonzero(pruned)
    vals = pruned[support]
    book, lo, hi = None, 0.0, 0.0
    if scheme == "linear8":
        codes, lo, hi = quantize_linear8(vals)
    else:
        codes, book = quantize_codebook(vals, min(k, 256), rng)
    return CompressedTensor(
        shape=tuple(np.shape(t)),
        scheme=scheme,
        nz_count=int(support.size),
        index_stream=huffman_encode(encode_gaps(support)),
        value_stream=huffman_encode(codes),
        codebook=book,
        lo=float(np.float32(lo)),
        hi=float(np.float32(hi)),
    )


def decompress_tensor(ct: CompressedTensor) -> np.ndarray:
    """Dense float32 tensor; pruned positions are exactly 0.0."""
    idx = decode_gaps(huffman_decode(ct.index_stream), ct.size)
    codes = huffman_decode(ct.value_stream)
    if idx.size != ct.nz_count or codes.size != ct.nz_count:
        raise CorruptStreamError(
            f"stream lengths ({idx.size} indices, {codes.size} values) disagree with nz_count={ct.nz_count}")
    if ct.scheme == "linear8":
        if codes.size and codes.max() > 255:
            raise CorruptStreamError("linear8 code above 255")
        vals = dequantize_linear8(codes, ct.lo, ct.hi)
    else:
        if codes.size and codes.max() >= len(ct.codebook):
            raise CorruptStreamError("code outside the codebook")
        vals = ct.codebook[codes]
    out = np.zeros(ct.size, DTYPE)
    out[idx] = vals
    return out.reshape(ct.shape)


def _write_table(w: S.Writer, table) -> None:
    w.pack("I", len(table))
    for sym, length in table:
        w.pack("HB", sym, length)


def _write_bits(w: S.Writer, s: HuffmanStream) -> None:
    w.pack("Q", s.bit_length)
    w.raw(s.payload)


def encode_tensor(ct: CompressedTensor) -> bytes:
    w = S.Writer()
    w.pack("BB", SCHEMES[ct.scheme], len(ct.shape))
    w.pack(f"{len(ct.shape)}I", *ct.shape)
    w.pack("I", ct.nz_count)
    if ct.scheme == "linear8":
        w.f32([ct.lo, ct.hi])
    else:
        w.pack("H", len(ct.codebook))
        w.f32(ct.codebook)
    _write_table(w, ct.index_stream.table)
    _write_table(w, ct.value_stream.table)
    _write_bits(w, ct.index_stream)
    _write_bits(w, ct.value_stream)
    return w.getvalue()


def _read_table(r: S.Reader) -> list:
    n = r.unpack("I")
    if 3 * n > r.remaining():
        raise TruncatedError("Huffman table runs past the end of data")
    return [r.unpack("HB") for _ in range(n)]


def _read_bits(r: S.Reader, table) -> HuffmanStream:
    nbits = r.unpack("Q")
    nbytes = (nbits + 7) // 8
    if nbytes > r.remaining():
        raise TruncatedError("bitstream runs past the end of data")
    return HuffmanStream(table, nbits, r.take(nbytes))


def decode_tensor(r: S.Reader) -> CompressedTensor:
    scheme_byte, rank = r.unpack("BB")
    schemes = {v: k for k, v in SCHEMES.items()}
    if scheme_byte not in schemes:
        raise FormatError(f"unknown compression scheme {scheme_byte}")
    if not 1 <= rank <= 4:
        raise FormatError(f"bad tensor rank {rank}")
    shape = r.unpack(f"{rank}I")
    shape = (shape,) if rank == 1 else tuple(shape)
    if min(shape) < 1:
        raise FormatError(f"zero extent in tensor shape {shape}")
    size = int(np.prod(shape, dtype=np.int64))
    if size > MAX_ELEMENTS:
        raise FormatError(f"tensor shape {shape} exceeds {MAX_ELEMENTS} elements")
    nz = r.unpack("I")
    if nz > size:
        raise FormatError(f"nz_count {nz} exceeds tensor size")
    scheme = schemes[scheme_byte]
    book, lo, hi = None, 0.0, 0.0
    if scheme == "linear8":
        lo, hi = (float(v) for v in r.f32(2))
        if hi < lo:
            raise FormatError("linear8 range has max < min")
    else:
        k = r.unpack("H")
        if k > 256 or (nz and k == 0):
            raise FormatError(f"codebook size {k} out of range")
        book = r.f32(k)
    ti, tv = _read_table(r), _read_table(r)
    si, sv = _read_bits(r, ti), _read_bits(r, tv)
    return CompressedTensor(shape, scheme, nz, si, sv, book, lo, hi)


# --- whole-model archives -------------------------------------------------


@dataclass
class TensorReport:
    name: str
    elements: int
    original_bytes: int
    compressed_bytes: int
    sparsity: float

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes


@dataclass
class CompressionReport:
    tensors: list = field(default_factory=list)
    original_bytes: int = 0
    compressed_bytes: int = 0
    accuracy_before: Optional[float] = None
    accuracy_after: Optional[float] = None

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes

    @property
    def sparsity(self) -> float:
        n = sum(t.elements for t in self.tensors)
        return sum(t.sparsity * t.elements for t in self.tensors) / n if n else 0.0

    def format(self) -> str:
        lines = ["tensor\telements\tsparsity\tfp32_bytes\tbytes\tratio"]
        for t in self.tensors:
            lines.append(f"{t.name}\t{t.elements}\t{t.sparsity:.4f}\t{t.original_bytes}\t"
                         f"{t.compressed_bytes}\t{t.ratio:.2f}")
        lines.append(f"total\t-\t{self.sparsity:.4f}\t{self.original_bytes}\t{self.compressed_bytes}\t{self.ratio:.2f}")
        if self.accuracy_before is not None:
            lines.append(f"accuracy\tbefore {self.accuracy_before:.4f}\tafter {self.accuracy_after:.4f}")
        return "\n".join(lines) + "\n"


def compress_model(g: A.ModelGraph, sparsity: float = 0.5, scheme: str = "linear8", eval_set=None,
                   k: int = 256, seed: int = 0) -> tuple[bytes, CompressionReport]:
    """Compress every convolution kernel of a folded graph into a QNTC archive.

    Biases, activation slopes and other small tensors stay fp32 inside the
    embedded graph description.
    """
    if g.mode != "infer-folded":
        raise ValueError("compress_model expects a graph folded for inference")
    rng = np.random.default_rng(seed)
    report = CompressionReport()
    external = {}
    records = []
    for i, layer in enumerate(g.layers):
        if layer.kind not in (A.DENSE, A.DEPTHWISE, A.POINTWISE):
            continue
        kernel = layer.params.kernel
        ct = compress_tensor(kernel, sparsity, scheme, k, rng)
        rec = encode_tensor(ct)
        external[i] = len(records)
        records.append(rec)
        report.tensors.append(TensorReport(f"{i}:{A.KIND_NAMES[layer.kind]}.kernel", kernel.size,
                                           4 * kernel.size, len(rec), 1 - ct.nz_count / kernel.size))
    body = S.encode_layers(g, external)
    data = S.with_crc(b"".join([MAGIC, struct.pack("<II", VERSION, len(records))] + records
                               + [struct.pack("<I", len(body)), body]))
    report.original_bytes = 4 * A.param_count(g).params
    report.compressed_bytes = len(data)
    if eval_set is not None:
        from .train import evaluate
        report.accuracy_before = evaluate(g, eval_set)[0]
        report.accuracy_after = evaluate(decompress_model(data), eval_set)[0]
    return data, report


def read_archive(data: bytes) -> tuple[list, A.ModelGraph]:
    r = S.Reader(data)
    S.check_header(r, MAGIC, VERSION)
    count = r.unpack("I")
    tensors = [decode_tensor(r) for _ in range(count)]
    dense = [decompress_tensor(ct) for ct in tensors]
    length = r.unpack("I")
    if length > r.remaining():
        raise TruncatedError("graph section runs past the end of data")
    end = r.pos + length
    sub = S.Reader(data, r.pos, end)
    g = S.decode_layers(sub, dense)
    if sub.pos != end:
        raise FormatError(f"{end - sub.pos} unread bytes in the graph section")
    r.pos = end
    S.check_crc(data, r.pos)
    return tensors, g


def decompress_model(archive: bytes) -> A.ModelGraph:
    """Rebuild a dense fp32 inference graph from a QNTC archive."""
    return read_archive(archive)[1]

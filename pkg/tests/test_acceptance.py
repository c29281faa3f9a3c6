"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary (see ``conftest.py``).

The CIFAR-10 criteria read the binary batches from ``$QNET_DATA`` (or
``./data``) and fail with an explanatory message when they are absent.
"""
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import OVERFIT_SEED, RUN_SECONDS
from helpers import GRAD_KINDS, enumerate_params, gradient_check, random_config
from oracles import count_conv_multiplies, direct_conv
from quicknet import arch as A
from quicknet import compression as C
from quicknet import data as D
from quicknet import layers as L
from quicknet.bench import bench
from quicknet.errors import FormatError
from quicknet.serialize import dumps_model, loads_model
from quicknet.tensor import OpCounter
from quicknet.train import TrainConfig, evaluate, train

criterion = pytest.mark.criterion
CIFAR_SEED = 2024


def _cifar_dir():
    for cand in (os.environ.get("QNET_DATA"), Path(__file__).parents[1] / "data"):
        if cand:
            try:
                D.data_files(cand, "train")
                return cand
            except FileNotFoundError:
                pass
    return None


# --- 1 --------------------------------------------------------------------


def _random_conv_case(r):
    mode = str(r.choice(["dense", "depthwise", "pointwise", "separable"]))
    n = int(r.integers(1, 3))
    c_in = int(r.integers(1, 9))
    h, w = (int(v) for v in r.integers(1, 9, 2))
    k = 1 if mode == "pointwise" else int(r.choice([1, 3, 5, 7]))
    padding = "same" if r.random() < 0.5 else "valid"
    if padding == "valid" and k > min(h, w):
        padding = "same"
    stride = int(r.integers(1, 3))
    c_out = c_in if mode == "depthwise" else int(r.integers(1, 9))
    x = r.standard_normal((n, c_in, h, w)).astype(np.float32)
    return mode, x, k, c_in, c_out, stride, padding


@criterion("1", "convolution oracle equivalence")
def test_criterion_1_conv_oracle(record_property):
    r = np.random.default_rng(101)
    worst, counts = 0.0, {}
    t0 = time.perf_counter()
    for _ in range(600):
        mode, x, k, c_in, c_out, stride, padding = _random_conv_case(r)
        counts[mode] = counts.get(mode, 0) + 1
        bias = r.standard_normal(c_out).astype(np.float32) if r.random() < 0.5 else None
        if mode == "separable":
            dw = L.ConvParams(r.standard_normal((c_in, 1, k, k)).astype(np.float32), None, stride, padding)
            pw = L.ConvParams(r.standard_normal((c_out, c_in, 1, 1)).astype(np.float32), bias)
            want = direct_conv(direct_conv(x, dw.kernel, None, stride, dw.pad, depthwise=True), pw.kernel, bias)
            got = [L.separable_conv2d(x, dw, pw),
                   L.conv2d_fast(L.conv2d_fast(x, dw, "depthwise"), pw, "pointwise")]
        else:
            shape = (c_out, 1, k, k) if mode == "depthwise" else (c_out, c_in, k, k)
            p = L.ConvParams(r.standard_normal(shape).astype(np.float32), bias, stride, padding)
            want = direct_conv(x, p.kernel, bias, stride, p.pad, depthwise=mode == "depthwise")
            got = [L.conv2d(x, p, mode), L.conv2d_fast(x, p, mode)]
        for out in got:
            assert out.shape == want.shape
            worst = max(worst, float(np.abs(out - want).max()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"600 configs {counts}, max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-5
    assert elapsed < 60


# --- 2 --------------------------------------------------------------------


@criterion("2", "PReLU/BN folding soundness")
def test_criterion_2_folding(overfit_run, record_property):
    trained, _, _ = overfit_run
    t0 = time.perf_counter()
    x = np.random.default_rng(202).standard_normal((100, 3, 32, 32)).astype(np.float32)
    base = A.forward(trained, x)
    prelu_only = A.forward(A.fold_prelu_only(trained), x)
    folded_graph = A.fold_for_inference(trained)
    folded = A.forward(folded_graph, x)
    slopes = np.concatenate([l.params.slopes for l in trained.layers if l.kind == A.PRELU])
    bn_diff = float(np.abs(folded - base).max())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"PReLU fold bitwise={base.tobytes() == prelu_only.tobytes()}, "
                              f"BN fold max |diff| {bn_diff:.2e} (logit scale {np.abs(base).max():.1f}), "
                              f"slopes span [{slopes.min():.3f}, {slopes.max():.3f}], {elapsed:.1f}s")
    assert not np.allclose(slopes, 0.25)
    assert base.tobytes() == prelu_only.tobytes()
    assert bn_diff <= 1e-5
    assert not any(l.kind in (A.BN, A.PRELU) for l in folded_graph.layers)
    assert elapsed < 60


# --- 3 --------------------------------------------------------------------


@criterion("3", "gradient correctness")
def test_criterion_3_gradients(record_property):
    r = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = {kind: max(gradient_check(kind, r) for _ in range(10)) for kind in GRAD_KINDS}
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record_property("detail", f"{len(GRAD_KINDS)} layer types x 10 draws, worst rel err {worst[top]:.2e} ({top}), "
                              f"{elapsed:.1f}s")
    assert all(v <= 1e-4 for v in worst.values()), worst
    assert elapsed < 300


# --- 4 --------------------------------------------------------------------


def _block_ratios(cfg):
    sep = A.flop_count(A.build_quicknet(cfg, 0)).layers
    dense = A.flop_count(A.build_quicknet(A.dense_equivalent(cfg), 0)).layers
    sep_blocks = [(sep[i].macs + sep[i + 1].macs, sep[i + 1].out_shape[0])
                  for i, row in enumerate(sep) if row.kind == "dwconv"]
    dense_blocks = [row.macs for row in dense[1:-1] if row.kind == "conv"]
    assert len(sep_blocks) == len(dense_blocks) == cfg.num_blocks
    return [(Fraction(s, d), c_out) for (s, c_out), d in zip(sep_blocks, dense_blocks)]


@criterion("4", "counting exactness")
def test_criterion_4_counting(record_property):
    r = np.random.default_rng(404)
    ratio_checks = 0
    for _ in range(100):
        cfg = random_config(r)
        g = A.build_quicknet(cfg, int(r.integers(1 << 31)))
        stats = A.param_count(g)
        assert (stats.params, stats.buffers) == enumerate_params(g)
        cnt = OpCounter()
        A.forward(g, np.zeros((1,) + cfg.input_shape, np.float32), fast=False, counter=cnt, probs=True)
        flops = A.flop_count(g)
        assert (flops.macs, flops.ops) == (cnt.macs, cnt.ops)
        shape = cfg.input_shape
        loop_macs = 0
        for layer in g.layers:
            if layer.kind in (A.DENSE, A.DEPTHWISE, A.POINTWISE):
                p = layer.params
                loop_macs += count_conv_multiplies(1, shape[0], shape[1], shape[2], p.out_channels, p.k, p.stride,
                                                   p.pad, depthwise=layer.kind == A.DEPTHWISE)
            shape = layer.output_shape(shape)
        assert loop_macs == flops.macs
        if cfg.block_kernel == 3:
            for ratio, c_out in _block_ratios(cfg):
                assert ratio == Fraction(1, c_out) + Fraction(1, 9)
                ratio_checks += 1
    for ratio, c_out in _block_ratios(A.reference_config()):
        assert ratio == Fraction(1, c_out) + Fraction(1, 9)
        ratio_checks += 1
    record_property("detail", f"100 configs exact on params/buffers/MACs/ops, {ratio_checks} k=3 block ratios exact")


# --- 5 --------------------------------------------------------------------


@criterion("5a", "100-sample overfit")
def test_criterion_5a_overfit(overfit_run, record_property):
    best, hist, (x, y) = overfit_run
    acc = max(h["train_acc"] for h in hist)
    eval_acc = evaluate(best, (x, y))[0]
    first = next((h["epoch"] for h in hist if h["val_acc"] >= 0.99), None)
    record_property("detail", f"seed {OVERFIT_SEED}, train acc {acc:.3f} (minibatch) / {eval_acc:.3f} (eval mode), "
                              f"eval >=99% first at epoch {first}, {len(hist)} epochs run in {RUN_SECONDS['overfit']:.0f} s")
    assert len(hist) <= 300
    assert acc >= 0.99
    assert eval_acc >= 0.99


def _cifar_split(path):
    full = D.load_cifar10(path, "train")
    perm = np.random.default_rng(CIFAR_SEED).permutation(len(full))
    tr, va = perm[:5000], perm[5000:6000]
    return full.subset(tr), full.subset(va), full


@pytest.fixture(scope="session")
def cifar_run():
    path = _cifar_dir()
    if path is None:
        return None
    t0 = time.perf_counter()
    tr, va, full = _cifar_split(path)
    cfg = A.desk_config()
    g = A.build_quicknet(cfg, CIFAR_SEED)
    g.norm = (full.mean, full.std)
    tcfg = TrainConfig(lr=0.05, momentum=0.9, batch_size=64, max_epochs=15, fixed_epoch=15, seed=CIFAR_SEED)
    best, hist = train(g, tr, tcfg, val_data=va)
    return best, hist, va, path, time.perf_counter() - t0


@criterion("5b", "desk-scale CIFAR-10 training")
def test_criterion_5b_cifar(cifar_run, record_property):
    if cifar_run is None:
        record_property("detail", "CIFAR-10 batches not found (set QNET_DATA)")
        pytest.fail("CIFAR-10 binary batches are required; none found under $QNET_DATA or ./data")
    best, hist, va, _, seconds = cifar_run
    acc = max(h["val_acc"] for h in hist)
    total = seconds + RUN_SECONDS.get("overfit", 0.0)
    record_property("detail", f"seed {CIFAR_SEED}, val acc {acc:.3f} after {len(hist)} epochs, "
                              f"{seconds / 60:.1f} min")
    assert len(hist) == 15
    assert acc >= 0.45
    assert total <= 30 * 60


# --- 6 --------------------------------------------------------------------


def _fuzz_tensor(r):
    kind = r.integers(0, 5)
    rank = int(r.integers(1, 5))
    shape = tuple(int(v) for v in r.integers(1, 7, rank))
    if kind == 0:                                   # wide gaps: force the escape path
        t = np.zeros(int(r.integers(600, 3000)), np.float32)
        k = int(r.integers(1, 6))
        t[r.choice(t.size, k, replace=False)] = r.standard_normal(k)
        return t, 0.0
    if kind == 1:                                   # one repeated value
        return np.full(shape, np.float32(r.standard_normal()), np.float32), 0.0
    if kind == 2:                                   # few distinct values
        return r.choice(r.standard_normal(3).astype(np.float32), shape), float(r.uniform(0, 0.9))
    return (r.standard_normal(shape) * r.uniform(0.01, 10)).astype(np.float32), float(r.uniform(0, 0.95))


@criterion("6a", "compression roundtrip invariants")
def test_criterion_6a_fuzz(record_property):
    import warnings
    from quicknet.serialize import Reader
    r = np.random.default_rng(606)
    escapes = singles = 0
    t0 = time.perf_counter()
    for case in range(1000):
        t, s = _fuzz_tensor(r)
        scheme = "linear8" if r.random() < 0.5 else "codebook"
        k = int(r.integers(1, 257))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ct = C.compress_tensor(t, s, scheme, k, np.random.default_rng(case))
            ref = C.quantize_codebook(C.prune(t, s).ravel(), min(k, 256), np.random.default_rng(case))
        rec = C.encode_tensor(ct)
        ct2 = C.decode_tensor(Reader(rec))
        out = C.decompress_tensor(ct2)
        pruned = C.prune(t, s)
        support = pruned != 0
        assert np.array_equal(out != 0, support) or (scheme == "linear8" and np.any(out[support] == 0))
        vals = pruned[support]
        if scheme == "linear8":
            codes, lo, hi = C.quantize_linear8(vals)
            want = C.dequantize_linear8(codes, np.float32(lo), np.float32(hi))
        else:
            codes, book = ref
            want = book[codes]
        assert out[support].tobytes() == want.tobytes()
        for stream, symbols in ((ct.index_stream, C.encode_gaps(np.flatnonzero(pruned))), (ct.value_stream, codes)):
            assert C.huffman_decode(stream).tolist() == np.asarray(symbols).tolist()
            singles += len(stream.table) == 1
        escapes += int((C.encode_gaps(np.flatnonzero(pruned)) == 0).any())
    record_property("detail", f"1000 tensors, {escapes} with >255 gaps, {singles} single-symbol streams, "
                              f"{time.perf_counter() - t0:.1f}s")
    assert escapes > 50 and singles > 50


@criterion("6b", "compression ratio and accuracy on the CIFAR checkpoint")
def test_criterion_6b_ratio(cifar_run, record_property):
    if cifar_run is None:
        record_property("detail", "needs the criterion 5b checkpoint; CIFAR-10 batches not found")
        pytest.fail("CIFAR-10 binary batches are required; none found under $QNET_DATA or ./data")
    best, _, _, path, _ = cifar_run
    folded = A.fold_for_inference(best)
    test = D.load_cifar10(path, "test", norm=folded.norm)
    archive, rep = C.compress_model(folded, 0.5, "linear8", eval_set=test)
    drop = rep.accuracy_before - rep.accuracy_after
    record_property("detail", f"ratio {rep.ratio:.2f}x, top-1 {rep.accuracy_before:.4f} -> {rep.accuracy_after:.4f}")
    assert rep.ratio >= 3
    assert drop <= 0.05


def test_compression_on_overfit_checkpoint(overfit_run):
    """Same pipeline on the memorization checkpoint; not a criterion, a stand-in when CIFAR is absent."""
    best, _, (x, y) = overfit_run
    _, rep = C.compress_model(A.fold_for_inference(best), 0.5, "linear8", eval_set=(x, y))
    print(f"overfit checkpoint: ratio {rep.ratio:.2f}x, acc {rep.accuracy_before:.3f} -> {rep.accuracy_after:.3f}")
    assert rep.ratio >= 3


# --- 7 --------------------------------------------------------------------


@criterion("7", "throughput reporting")
def test_criterion_7_bench(record_property):
    cfg = A.reference_config()
    g = A.fold_for_inference(A.build_quicknet(cfg, 0))
    dense = A.fold_for_inference(A.build_quicknet(A.dense_equivalent(cfg), 0))
    runs = [bench(g, threads=1, duration_s=5.0, warmup_s=2.0) for _ in range(2)]
    a, b = (run.frames_per_second for run in runs)
    spread = abs(a - b) / max(a, b)
    sep_macs, dense_macs = runs[0].macs_per_image, A.flop_count(dense).macs
    record_property("detail", f"fps {a:.1f} / {b:.1f} (spread {spread:.1%}), p50 {runs[0].latency_p50_ms:.1f} ms, "
                              f"p95 {runs[0].latency_p95_ms:.1f} ms, MACs/image {sep_macs:,} vs dense {dense_macs:,}")
    for run in runs:
        assert run.frames > 0 and run.latency_p50_ms <= run.latency_p95_ms
        assert run.macs_per_image == A.flop_count(g).macs
    assert sep_macs < dense_macs
    assert all(ratio == Fraction(1, c) + Fraction(1, 9) for ratio, c in _block_ratios(cfg))
    assert spread < 0.20


# --- 8 --------------------------------------------------------------------


def _random_graph(r):
    cfg = random_config(r)
    g = A.build_quicknet(cfg, int(r.integers(1 << 31)))
    if r.random() < 0.5:
        g = A.fold_for_inference(g)
    if r.random() < 0.5:
        c = cfg.input_shape[0]
        g.norm = (r.standard_normal(c).astype(np.float32), r.uniform(0.1, 2, c).astype(np.float32))
    return g


def _corrupt(data, r):
    if r.random() < 0.5:
        return data[: int(r.integers(0, len(data)))], False
    out = bytearray(data)
    for _ in range(int(r.integers(1, 4))):
        pos = int(r.integers(0, len(out) - 4))
        out[pos] ^= 1 << int(r.integers(0, 8))
    return bytes(out), True


def _reseal(data):
    import struct
    import zlib
    return data[:-4] + struct.pack("<I", zlib.crc32(data[:-4]))


@criterion("8", "format fidelity fuzz")
@pytest.mark.filterwarnings("ignore:only .* distinct nonzero values")
def test_criterion_8_format_fuzz(record_property):
    r = np.random.default_rng(808)
    typed = identical = resealed_typed = resealed_ok = 0
    for case in range(1000):
        g = _random_graph(r)
        if case % 2 == 0:
            data = dumps_model(g)
            assert dumps_model(loads_model(data)) == data
            decode, ref = loads_model, data
        else:
            if g.mode != "infer-folded":
                g = A.fold_for_inference(g)
            data = C.compress_model(g, float(r.uniform(0, 0.9)), str(r.choice(["linear8", "codebook"])),
                                    k=int(r.integers(2, 257)), seed=case)[0]
            decode, ref = C.decompress_model, dumps_model(C.decompress_model(data))
        bad, flipped = _corrupt(data, r)
        try:
            h = decode(bad)
        except FormatError:
            typed += 1
        else:
            assert dumps_model(h) == ref, f"case {case}: corrupted input decoded to a different graph"
            identical += 1
        if flipped:
            # a forged checksum exposes the structural decoder; it may decode or raise, but only typed errors
            try:
                decode(_reseal(bad))
                resealed_ok += 1
            except FormatError:
                resealed_typed += 1
    record_property("detail", f"1000 cases: {typed} typed errors, {identical} decoded identically, 0 crashes; "
                              f"checksum-resealed flips: {resealed_typed} typed errors, {resealed_ok} decoded")

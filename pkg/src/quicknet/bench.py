"""Single-image CPU throughput benchmark."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from .arch import ModelGraph, flop_count, forward


@dataclass
class BenchResult:
    frames_per_second: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    threads: int
    batch_size: int
    macs_per_image: int
    frames: int
    seconds: float

    def format(self) -> str:
        rows = [
            ("fps", f"{self.frames_per_second:.2f}"),
            ("latency mean", f"{self.latency_mean_ms:.3f} ms"),
            ("latency p50", f"{self.latency_p50_ms:.3f} ms"),
            ("latency p95", f"{self.latency_p95_ms:.3f} ms"),
            ("threads", str(self.threads)),
            ("batch", str(self.batch_size)),
            ("MACs/image", f"{self.macs_per_image:,}"),
            ("frames", str(self.frames)),
            ("timed seconds", f"{self.seconds:.3f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def fps(frames: int, seconds: float) -> float:
    return frames / seconds


def bench(g: ModelGraph, threads: int = 1, duration_s: float = 5.0, warmup_s: float = 2.0,
          seed: int = 0) -> BenchResult:
    """Time batch-1 inference on random input.

    Each thread runs its own loop over a shared read-only graph; warmup is
    excluded from the timed window and aggregate fps is total frames over
    the window's wall time.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    x = np.random.default_rng(seed).standard_normal((1,) + g.input_shape).astype(np.float32)
    warm_end = time.perf_counter() + warmup_s
    while True:
        forward(g, x)
        if time.perf_counter() >= warm_end:
            break

    latencies: list[list[float]] = [[] for _ in range(threads)]
    barrier = threading.Barrier(threads + 1)
    window = {}

    def worker(slot: int):
        xi = x.copy()
        lat = latencies[slot]
        barrier.wait()
        stop = window["stop"]
        while True:
            t0 = time.perf_counter()
            forward(g, xi)
            t1 = time.perf_counter()
            if t1 > stop:
                break
            lat.append(t1 - t0)

    pool = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    for t in pool:
        t.start()
    start = time.perf_counter()
    window["stop"] = start + duration_s
    barrier.wait()
    for t in pool:
        t.join()
    all_lat = np.array([v for lat in latencies for v in lat]) * 1e3
    frames = int(all_lat.size)
    elapsed = duration_s
    return BenchResult(
        frames_per_second=fps(frames, elapsed),
        latency_mean_ms=float(all_lat.mean()) if frames else float("nan"),
        latency_p50_ms=float(np.percentile(all_lat, 50)) if frames else float("nan"),
        latency_p95_ms=float(np.percentile(all_lat, 95)) if frames else float("nan"),
        threads=threads,
        batch_size=1,
        macs_per_image=flop_count(g, 1).macs,
        frames=frames,
        seconds=elapsed,
    )

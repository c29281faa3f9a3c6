"""Batch-1 throughput of the folded desk model against its dense twin."""
from quicknet import arch as A
from quicknet.bench import bench


def main(seconds=3.0):
    cfg = A.desk_config()
    for name, c in (("separable", cfg), ("dense", A.dense_equivalent(cfg))):
        g = A.fold_for_inference(A.build_quicknet(c, 0))
        r = bench(g, threads=1, duration_s=seconds, warmup_s=1.0)
        print(f"{name:<10} {r.frames_per_second:8.1f} fps  {r.latency_p50_ms:7.2f} ms p50  "
              f"{r.macs_per_image:>12,} MACs")


if __name__ == "__main__":
    main()

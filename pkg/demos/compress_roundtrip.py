"""Compress a folded model at several sparsities with both quantizers and
report size ratio and logit drift after decompression."""
import numpy as np

from quicknet import arch as A
from quicknet.compression import compress_model, decompress_model
from quicknet.train import calibrate_bn


def main():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3, 32, 32)).astype(np.float32)
    g = calibrate_bn(A.build_quicknet(A.desk_config(), 0), x)
    folded = A.fold_for_inference(g)
    ref = A.forward(folded, x)
    print("scheme    sparsity  bytes     ratio  max|dlogit|")
    for scheme in ("linear8", "codebook"):
        for sparsity in (0.0, 0.5, 0.8):
            data, rep = compress_model(folded, sparsity, scheme, k=64)
            drift = np.abs(A.forward(decompress_model(data), x) - ref).max()
            print(f"{scheme:<9} {sparsity:<9} {len(data):<9} {rep.ratio:5.2f}  {drift:.3e}")
    print()
    print(rep.format())


if __name__ == "__main__":
    main()

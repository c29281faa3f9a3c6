"""Memorize 100 random-label images with the desk model, then fold
BN+PReLU away and check the folded graph gives the same logits."""
import time

import numpy as np

from quicknet import arch as A
from quicknet.train import TrainConfig, evaluate, train


def main(n=100, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3, 32, 32)).astype(np.float32)
    y = rng.permutation(np.arange(n) % 10)

    g = A.build_quicknet(A.desk_config(dropout_rate=0.0), seed)
    cfg = TrainConfig(lr=0.05, momentum=0.9, batch_size=20, max_epochs=300, patience=50, dropout_rate=0.0,
                      hflip=False, shift_px=0, seed=seed, lr_schedule="constant")
    t0 = time.perf_counter()

    def report(row):
        if row["epoch"] % 10 == 0:
            print(f"epoch {row['epoch']:3d}  train acc {row['train_acc']:.3f}  eval acc {row['val_acc']:.3f}")

    best, hist = train(g, (x, y), cfg, val_data=(x, y), on_epoch=report)
    print(f"{len(hist)} epochs in {time.perf_counter() - t0:.0f} s; eval accuracy {evaluate(best, (x, y))[0]:.3f}")

    folded = A.fold_for_inference(best)
    diff = np.abs(A.forward(best, x) - A.forward(folded, x)).max()
    print(f"folded: {len(best.layers)} -> {len(folded.layers)} layers, "
          f"{A.param_count(best).params:,} -> {A.param_count(folded).params:,} params, max |dlogit| {diff:.2e}")


if __name__ == "__main__":
    main()

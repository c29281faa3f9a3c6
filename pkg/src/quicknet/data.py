"""CIFAR-10 binary-format ingestion.

Each record is 3073 bytes: one label byte followed by the red, green and blue
planes, each 32x32 row-major.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

RECORD = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


@dataclass
class Cifar10Set:
    images: np.ndarray      # (n, 3, 32, 32) float32, standardized
    labels: np.ndarray      # (n,) int64
    mean: np.ndarray        # per-channel constants applied to the [0, 1] pixels
    std: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Cifar10Set":
        return Cifar10Set(self.images[idx], self.labels[idx], self.mean, self.std)


def decode_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 pixels ``(n, 3, 32, 32)`` and labels from concatenated records."""
    if len(raw) == 0 or len(raw) % RECORD:
        raise ValueError(f"CIFAR-10 data of {len(raw)} bytes is not a whole number of {RECORD}-byte records")
    rec = np.frombuffer(raw, np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``[0, 1]``-scaled pixels; a zero std is replaced by 1."""
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(np.float32) / np.float32(255.0)
    return (x - np.asarray(mean, np.float32)[None, :, None, None]) / np.asarray(std, np.float32)[None, :, None, None]


def data_files(path, split: str = "train") -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if (p / "cifar-10-batches-bin").is_dir():
        p = p / "cifar-10-batches-bin"
    names = TRAIN_FILES if split == "train" else [TEST_FILE]
    files = [p / n for n in names if (p / n).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches found under {path}")
    return files


def default_data_dir() -> Optional[str]:
    return os.environ.get("QNET_DATA")


def load_cifar10(path, split: str = "train", norm: tuple | None = None, limit: int | None = None) -> Cifar10Set:
    """Load CIFAR-10 from a batch file or a directory of batch files.

    ``norm`` supplies ``(mean, std)``; without it the constants are computed
    from the loaded images, which should then be the training split.
    """
    raw = b"".join(f.read_bytes() for f in data_files(path, split))
    pixels, labels = decode_records(raw)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    mean, std = channel_stats(pixels) if norm is None else (np.asarray(a, np.float32) for a in norm)
    return Cifar10Set(standardize(pixels, mean, std), labels, mean, std)


def encode_records(pixels: np.ndarray, labels) -> bytes:
    """Inverse of :func:`decode_records`, for building fixtures."""
    pixels = np.asarray(pixels, np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, np.uint8).reshape(-1, 1)
    return np.concatenate([labels, pixels], axis=1).tobytes()

"""QuickNet: separable-convolution CNN engine with PReLU folding, a numpy
trainer, a prune/quantize/Huffman model codec and exact op accounting."""

from .arch import (ArchConfig, ModelGraph, build_quicknet, dense_equivalent, desk_config, flop_count,
                   fold_for_inference, forward, param_count, reference_config, summarize)
from .compression import compress_model, decompress_model
from .serialize import load_model, save_model
from .train import TrainConfig, evaluate, train

__all__ = [
    "ArchConfig", "ModelGraph", "TrainConfig", "build_quicknet", "compress_model", "decompress_model",
    "dense_equivalent", "desk_config", "evaluate", "flop_count", "fold_for_inference", "forward",
    "load_model", "param_count", "reference_config", "save_model", "summarize", "train",
]

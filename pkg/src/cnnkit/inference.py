"""Batched eval-mode inference shared by training, robustness and the CLI."""

from __future__ import annotations

import numpy as np

from .regularization.preprocess import PreprocessConfig, preprocess_batch
from .tensor import Tensor, no_grad


def predict_logits(model, images, preprocess: str = "none", batch_size: int = 128,
                   cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = preprocess_batch(images[i:i + batch_size], preprocess, False, cfg=cfg)
                outs.append(model(Tensor(x)).data)
    finally:
        model.train(was_training)
    k = model.spec.num_classes if hasattr(model, "spec") else 0
    return np.concatenate(outs) if outs else np.zeros((0, k), np.float32)


def predict(model, images, preprocess: str = "none", batch_size: int = 128,
            cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    return predict_logits(model, images, preprocess, batch_size, cfg).argmax(axis=1)

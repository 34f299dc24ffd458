"""Train and eval image pipelines.

Images enter as ``H x W x 3`` uint8 arrays and leave as normalized
``3 x S x S`` float32 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = 224
    resize: int = 256
    scale: tuple[float, float] = (0.05, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    max_attempts: int = 10

    @classmethod
    def for_size(cls, size: int, **kw) -> "PreprocessConfig":
        """Same proportions as 224/256 at another resolution."""
        return cls(size=size, resize=int(round(size * 256 / 224)), **kw)


def normalize(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    x = img.astype(np.float32) / 255.0
    x = (x - np.asarray(cfg.mean, np.float32)) / np.asarray(cfg.std, np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape[:2] == (h, w):
        return img
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


def sample_crop(h: int, w: int, rng: np.random.Generator, cfg: PreprocessConfig) -> tuple[int, int, int, int]:
    """Random area/aspect crop ``(top, left, height, width)``; center crop after ``max_attempts`` misses."""
    area = h * w
    log_lo, log_hi = math.log(cfg.ratio[0]), math.log(cfg.ratio[1])
    for _ in range(cfg.max_attempts):
        target = area * rng.uniform(*cfg.scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def train_preprocess(img: np.ndarray, rng: np.random.Generator,
                     cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    img = _check(img)
    top, left, ch, cw = sample_crop(img.shape[0], img.shape[1], rng, cfg)
    out = resize(np.ascontiguousarray(img[top:top + ch, left:left + cw]), cfg.size, cfg.size)
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1]
    return normalize(out, cfg)


def eval_crop_box(h: int, w: int, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[int, int, int, int]:
    """Return ``(resized_h, resized_w, top, left)`` for the shorter-side resize and center crop."""
    if h <= w:
        rh, rw = cfg.resize, int(w * cfg.resize / h)
    else:
        rh, rw = int(h * cfg.resize / w), cfg.resize
    return rh, rw, (rh - cfg.size) // 2, (rw - cfg.size) // 2


def eval_preprocess(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    img = _check(img)
    rh, rw, top, left = eval_crop_box(img.shape[0], img.shape[1], cfg)
    out = resize(img, rh, rw)[top:top + cfg.size, left:left + cfg.size]
    return normalize(out, cfg)


def _check(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def pad_crop_flip(img: np.ndarray, rng: np.random.Generator, cfg: PreprocessConfig, pad: int = 4) -> np.ndarray:
    """Zero-pad, take a random crop of the original size, flip with ``cfg.flip_prob``."""
    img = _check(img)
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    top, left = int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1))
    out = padded[top:top + h, left:left + w]
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1]
    return normalize(out, cfg)


def preprocess_batch(images, mode: str, train: bool, rngs=None,
                     cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Stack per-sample outputs; ``rngs`` supplies one generator per image in train mode."""
    out = []
    for i, img in enumerate(images):
        if mode == "imagenet":
            out.append(train_preprocess(img, rngs[i], cfg) if train else eval_preprocess(img, cfg))
        elif mode == "pad_crop_flip" and train:
            out.append(pad_crop_flip(img, rngs[i], cfg))
        else:
            out.append(normalize(_check(img), cfg))
    return np.stack(out)

"""Desk-scale image corpora: the tiny-image binary format, image directories, and a synthetic generator.

Tiny-image file layout (little-endian)::

    magic b"CNKTINY1" | u32 count | count x (u32 label | u32 H | u32 W | H*W*3 RGB bytes)

Sample ids are the record indices as decimal strings.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CNKTINY1"
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}
DATA_ENV = "CNNKIT_DATA"


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    ids: list[str]
    num_classes: int
    class_names: list[str] | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx],
                       self.num_classes, self.class_names)


def resolve_path(path) -> Path:
    """Relative paths are looked up under ``$CNNKIT_DATA`` when it is set and the path does not exist."""
    p = Path(path)
    root = os.environ.get(DATA_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def save_tiny_images(path, images: np.ndarray, labels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(labels)))
        for img, lab in zip(images, labels):
            img = np.ascontiguousarray(img, dtype=np.uint8)
            f.write(struct.pack("<III", int(lab), img.shape[0], img.shape[1]))
            f.write(img.tobytes())
    return path


def load_tiny_images(path, num_classes: int | None = None) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a tiny-image file")
    (count,) = struct.unpack_from("<I", buf, 8)
    off, imgs, labels = 12, [], []
    for _ in range(count):
        lab, h, w = struct.unpack_from("<III", buf, off)
        off += 12
        n = h * w * 3
        imgs.append(np.frombuffer(buf, np.uint8, n, off).reshape(h, w, 3))
        off += n
        labels.append(lab)
    shapes = {im.shape for im in imgs}
    images = np.stack(imgs) if len(shapes) == 1 else np.array(imgs, dtype=object)
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes or (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images, labels, [str(i) for i in range(count)], k)


def load_image_dir(root, size: int | None = None) -> Dataset:
    """Class-per-subdirectory layout; subdirectory names sorted give the class ids."""
    from PIL import Image

    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subdirectories")
    imgs, labels, ids = [], [], []
    for ci, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            im = Image.open(f).convert("RGB")
            if size:
                im = im.resize((size, size), Image.BILINEAR)
            imgs.append(np.asarray(im))
            labels.append(ci)
            ids.append(f"{name}/{f.name}")
    shapes = {im.shape for im in imgs}
    images = np.stack(imgs) if len(shapes) == 1 else np.array(imgs, dtype=object)
    return Dataset(images, np.asarray(labels, np.int64), ids, len(classes), classes)


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    p = resolve_path(path)
    if p.is_dir():
        return load_image_dir(p)
    return load_tiny_images(p, num_classes)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

def synthetic_corpus(n: int, num_classes: int = 10, size: int = 32, seed: int = 0,
                     noise: float = 0.35, angle_jitter: float = 0.0, freq_jitter: float = 0.0) -> Dataset:
    """Textured-shape classification corpus.

    Each class is a fixed pair of oriented sinusoidal gratings (one inside a
    random disc, one outside) with a class-specific colour tint.  Per-sample
    nuisances: disc position and radius, phase, a random global brightness
    and contrast, and additive Gaussian pixel noise.  ``angle_jitter``
    (radians) and ``freq_jitter`` (relative) are uniform half-widths that
    perturb each sample's gratings so that neighbouring classes overlap.
    """
    rng = np.random.default_rng([seed, 7919])
    proto = np.random.default_rng([1234, num_classes])
    freq_in = proto.uniform(0.15, 0.45, num_classes)
    freq_out = proto.uniform(0.15, 0.45, num_classes)
    ang_in = proto.uniform(0, np.pi, num_classes)
    ang_out = proto.uniform(0, np.pi, num_classes)
    tint = proto.uniform(0.6, 1.0, (num_classes, 3))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = rng.integers(0, num_classes, n)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, c in enumerate(labels):
        cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
        r = rng.uniform(size * 0.2, size * 0.35)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
        da = rng.uniform(-angle_jitter, angle_jitter)
        fs = 1.0 + rng.uniform(-freq_jitter, freq_jitter)
        a1, a2 = ang_in[c] + da, ang_out[c] + da
        g_in = np.sin(freq_in[c] * fs * (np.cos(a1) * xx + np.sin(a1) * yy) * 2 + ph1)
        g_out = np.sin(freq_out[c] * fs * (np.cos(a2) * xx + np.sin(a2) * yy) * 2 + ph2)
        pattern = np.where(inside, g_in, 0.6 * g_out)
        contrast = rng.uniform(0.5, 1.0)
        bright = rng.uniform(0.35, 0.65)
        img = bright + 0.5 * contrast * pattern[..., None] * tint[c]
        img = img + rng.normal(0, noise, (size, size, 3)) * 0.5
        images[i] = np.clip(img * 255, 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), [str(i) for i in range(n)], num_classes)

"""Corruption generators and perturbation sequences for robustness suites.

Every generator is a pure function of ``(image, severity, seed)``.  Severity
parameters are the constants in ``SEVERITY``; each row is strictly monotone.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

SEVERITY: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # std on the [0, 1] scale
    "shot_noise": (500.0, 250.0, 100.0, 75.0, 50.0),  # photons per unit intensity (lower is worse)
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),  # salt-and-pepper fraction
    "gaussian_blur": (0.4, 0.6, 0.7, 0.8, 1.0),  # kernel std in pixels
    "defocus_blur": (0.75, 1.0, 1.25, 1.5, 2.0),  # disc radius in pixels
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),  # additive shift on [0, 1]
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast factor about the mean (lower is worse)
    "pixelate": (0.95, 0.9, 0.85, 0.75, 0.65),  # down-sampling ratio (lower is worse)
    "jpeg_artifact": (80.0, 65.0, 58.0, 50.0, 40.0),  # JPEG quality (lower is worse)
}
IDENTITY = {"gaussian_noise": 0.0, "impulse_noise": 0.0, "gaussian_blur": 0.0, "defocus_blur": 0.0,
            "brightness": 0.0, "contrast": 1.0, "pixelate": 1.0}
KINDS = tuple(SEVERITY)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise ValueError(f"unknown corruption kind {self.kind!r}; known: {KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in 1..5, got {self.severity}")


def _to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def _filter(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-d correlation with reflect padding."""
    k = kernel.shape[0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    return np.einsum("hwcij,ij->hwc", win, kernel)


def _gauss_kernel(sigma: float) -> np.ndarray:
    r = max(1, int(np.ceil(3 * sigma)))
    a = np.arange(-r, r + 1)
    g = np.exp(-(a ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _disc_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    r = int(np.ceil(radius))
    n = (2 * r + 1) * supersample
    c = (np.arange(n) + 0.5) / supersample - (r + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    inside = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    k = inside.reshape(2 * r + 1, supersample, 2 * r + 1, supersample).mean(axis=(1, 3))
    return k / k.sum()


def apply_param(kind: str, img: np.ndarray, v: float, rng: np.random.Generator) -> np.ndarray:
    """Apply ``kind`` with an explicit parameter value instead of a severity level."""
    x = _to_float(img)
    if kind in IDENTITY and v == IDENTITY[kind]:
        return np.array(img, dtype=np.uint8, copy=True)
    if kind == "gaussian_noise":
        x = x + rng.normal(0.0, v, x.shape)
    elif kind == "shot_noise":
        x = rng.poisson(x * v) / v
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        x = np.where(u < v / 2, 0.0, np.where(u < v, 1.0, x))
    elif kind == "gaussian_blur":
        x = _filter(x, _gauss_kernel(v))
    elif kind == "defocus_blur":
        x = _filter(x, _disc_kernel(v))
    elif kind == "brightness":
        x = x + v
    elif kind == "contrast":
        m = x.mean(axis=(0, 1), keepdims=True)
        x = (x - m) * v + m
    elif kind == "pixelate":
        h, w = img.shape[:2]
        small = Image.fromarray(np.asarray(img, np.uint8)).resize(
            (max(1, int(w * v)), max(1, int(h * v))), Image.BOX)
        return np.asarray(small.resize((w, h), Image.BOX))
    elif kind == "jpeg_artifact":
        buf = io.BytesIO()
        Image.fromarray(np.asarray(img, np.uint8)).save(buf, "JPEG", quality=int(v))
        return np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"))
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return _to_uint8(x)


def corrupt(img: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 uint8 image, got {img.shape} {img.dtype}")
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind), spec.severity])
    return apply_param(spec.kind, img, SEVERITY[spec.kind][spec.severity - 1], rng)


# --------------------------------------------------------------------------
# perturbation sequences
# --------------------------------------------------------------------------

PERTURBATIONS = ("translate", "gaussian_noise")


def perturbation_sequence(img: np.ndarray, kind: str, frames: int = 31, seed: int = 0,
                          max_shift: int = 4, noise_step: float = 0.01) -> np.ndarray:
    """Frames derived from one image under a small incremental perturbation.

    ``translate`` moves a reflect-padded crop window by a random +-1 pixel step
    per frame (clamped to ``max_shift``); ``gaussian_noise`` adds a noise field
    that random-walks with per-frame std ``noise_step``.
    """
    if frames < 2:
        raise ValueError("a perturbation sequence needs at least 2 frames")
    rng = np.random.default_rng([seed, PERTURBATIONS.index(kind) if kind in PERTURBATIONS else 99])
    h, w = img.shape[:2]
    out = np.empty((frames, h, w, 3), dtype=np.uint8)
    if kind == "translate":
        padded = np.pad(img, ((max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="reflect")
        dy = dx = 0
        for t in range(frames):
            if t:
                dy = int(np.clip(dy + rng.integers(-1, 2), -max_shift, max_shift))
                dx = int(np.clip(dx + rng.integers(-1, 2), -max_shift, max_shift))
            out[t] = padded[max_shift + dy:max_shift + dy + h, max_shift + dx:max_shift + dx + w]
    elif kind == "gaussian_noise":
        x = _to_float(img)
        field = np.zeros_like(x)
        for t in range(frames):
            if t:
                field = field + rng.normal(0.0, noise_step, x.shape)
            out[t] = _to_uint8(x + field)
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}; known: {PERTURBATIONS}")
    return out

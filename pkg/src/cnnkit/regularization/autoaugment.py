"""AutoAugment policy execution (no search).

Magnitude buckets 0..9 map to op parameters through the ``MAGNITUDES``
tables below.  Geometric ops and enhancement deltas take a random sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

N_BUCKETS = 10
FILL = (128, 128, 128)

MAGNITUDES: dict[str, np.ndarray] = {
    "shear_x": np.linspace(0.0, 0.3, N_BUCKETS),
    "shear_y": np.linspace(0.0, 0.3, N_BUCKETS),
    "translate_x": np.linspace(0.0, 150 / 331, N_BUCKETS),  # fraction of width
    "translate_y": np.linspace(0.0, 150 / 331, N_BUCKETS),
    "rotate": np.linspace(0.0, 30.0, N_BUCKETS),  # degrees
    "color": np.linspace(0.0, 0.9, N_BUCKETS),  # enhancement factor is 1 +/- m
    "contrast": np.linspace(0.0, 0.9, N_BUCKETS),
    "brightness": np.linspace(0.0, 0.9, N_BUCKETS),
    "sharpness": np.linspace(0.0, 0.9, N_BUCKETS),
    "posterize": 8 - np.round(np.arange(N_BUCKETS) / ((N_BUCKETS - 1) / 4)).astype(int),  # bits kept
    "solarize": np.linspace(256.0, 0.0, N_BUCKETS),  # threshold
    "cutout": np.linspace(0.0, 0.2, N_BUCKETS),  # side as a fraction of the short edge
}
SIGNED = {"shear_x", "shear_y", "translate_x", "translate_y", "rotate",
          "color", "contrast", "brightness", "sharpness"}


# -- ops on PIL images ---------------------------------------------------------

def shear_x(img, v):
    return img.transform(img.size, Image.AFFINE, (1, v, 0, 0, 1, 0), Image.NEAREST, fillcolor=FILL)


def shear_y(img, v):
    return img.transform(img.size, Image.AFFINE, (1, 0, 0, v, 1, 0), Image.NEAREST, fillcolor=FILL)


def translate_x(img, v):
    return img.transform(img.size, Image.AFFINE, (1, 0, v * img.size[0], 0, 1, 0), Image.NEAREST, fillcolor=FILL)


def translate_y(img, v):
    return img.transform(img.size, Image.AFFINE, (1, 0, 0, 0, 1, v * img.size[1]), Image.NEAREST, fillcolor=FILL)


def rotate(img, v):
    return img.rotate(v, resample=Image.NEAREST, fillcolor=FILL)


def auto_contrast(img, _v=None):
    return ImageOps.autocontrast(img)


def invert(img, _v=None):
    return ImageOps.invert(img)


def equalize(img, _v=None):
    return ImageOps.equalize(img)


def solarize(img, v):
    return ImageOps.solarize(img, int(v))


def posterize(img, bits):
    return ImageOps.posterize(img, int(bits))


def color(img, v):
    return ImageEnhance.Color(img).enhance(1.0 + v)


def contrast(img, v):
    return ImageEnhance.Contrast(img).enhance(1.0 + v)


def brightness(img, v):
    return ImageEnhance.Brightness(img).enhance(1.0 + v)


def sharpness(img, v):
    return ImageEnhance.Sharpness(img).enhance(1.0 + v)


def cutout(img, v, rng: np.random.Generator | None = None):
    rng = rng or np.random.default_rng(0)
    w, h = img.size
    side = int(round(v * min(w, h)))
    if side <= 0:
        return img
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    arr = np.array(img)
    arr[max(0, cy - side // 2):min(h, cy + side - side // 2), max(0, cx - side // 2):min(w, cx + side - side // 2)] = FILL
    return Image.fromarray(arr)


OPS: dict[str, Callable] = {
    "shear_x": shear_x, "shear_y": shear_y, "translate_x": translate_x, "translate_y": translate_y,
    "rotate": rotate, "auto_contrast": auto_contrast, "invert": invert, "equalize": equalize,
    "solarize": solarize, "posterize": posterize, "contrast": contrast, "color": color,
    "brightness": brightness, "sharpness": sharpness, "cutout": cutout,
}


def op_value(name: str, bucket: int, rng: np.random.Generator) -> float | None:
    if name not in MAGNITUDES:
        return None
    v = float(MAGNITUDES[name][bucket])
    if name in SIGNED and rng.random() < 0.5:
        v = -v
    return v


# -- policies ------------------------------------------------------------------

@dataclass(frozen=True)
class SubPolicyOp:
    name: str
    prob: float
    magnitude: int


@dataclass(frozen=True)
class AugPolicy:
    sub_policies: tuple[tuple[SubPolicyOp, ...], ...]

    def __post_init__(self):
        if not self.sub_policies:
            raise ValueError("a policy needs at least one sub-policy")
        for sp in self.sub_policies:
            for op in sp:
                if op.name not in OPS:
                    raise ValueError(f"unknown augmentation op {op.name!r}")
                if not 0.0 <= op.prob <= 1.0:
                    raise ValueError(f"probability of {op.name!r} must lie in [0, 1], got {op.prob}")
                if not 0 <= op.magnitude < N_BUCKETS:
                    raise ValueError(f"magnitude of {op.name!r} must be a bucket in 0..9, got {op.magnitude}")

    @classmethod
    def from_list(cls, data) -> "AugPolicy":
        return cls(tuple(tuple(SubPolicyOp(str(n), float(p), int(m)) for n, p, m in sp) for sp in data))

    @classmethod
    def from_json(cls, text: str) -> "AugPolicy":
        return cls.from_list(json.loads(text))

    def to_json(self) -> str:
        return json.dumps([[[o.name, o.prob, o.magnitude] for o in sp] for sp in self.sub_policies])


def apply_policy(img: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Pick one sub-policy uniformly and apply each of its ops with its probability."""
    sp = policy.sub_policies[int(rng.integers(len(policy.sub_policies)))]
    pil = Image.fromarray(np.asarray(img, dtype=np.uint8))
    for op in sp:
        if rng.random() >= op.prob:
            continue
        v = op_value(op.name, op.magnitude, rng)
        if op.name == "cutout":
            pil = cutout(pil, v, rng)
        else:
            pil = OPS[op.name](pil, v)
    return np.asarray(pil.convert("RGB"))


IMAGENET_POLICY = AugPolicy.from_list([
    [["posterize", 0.4, 8], ["rotate", 0.6, 9]],
    [["solarize", 0.6, 5], ["auto_contrast", 0.6, 0]],
    [["equalize", 0.8, 0], ["equalize", 0.6, 0]],
    [["posterize", 0.6, 7], ["posterize", 0.6, 6]],
    [["equalize", 0.4, 0], ["solarize", 0.2, 4]],
    [["equalize", 0.4, 0], ["rotate", 0.8, 8]],
    [["solarize", 0.6, 3], ["equalize", 0.6, 0]],
    [["posterize", 0.8, 5], ["equalize", 1.0, 0]],
    [["rotate", 0.2, 3], ["solarize", 0.6, 8]],
    [["equalize", 0.6, 0], ["posterize", 0.4, 6]],
    [["rotate", 0.8, 8], ["color", 0.4, 0]],
    [["rotate", 0.4, 9], ["equalize", 0.6, 0]],
    [["equalize", 0.0, 0], ["equalize", 0.8, 0]],
    [["invert", 0.6, 0], ["equalize", 1.0, 0]],
    [["color", 0.6, 4], ["contrast", 1.0, 8]],
    [["rotate", 0.8, 8], ["color", 1.0, 2]],
    [["color", 0.8, 8], ["solarize", 0.8, 7]],
    [["sharpness", 0.4, 7], ["invert", 0.6, 0]],
    [["shear_x", 0.6, 5], ["equalize", 1.0, 0]],
    [["color", 0.4, 0], ["equalize", 0.6, 0]],
    [["equalize", 0.4, 0], ["solarize", 0.2, 4]],
    [["solarize", 0.6, 5], ["auto_contrast", 0.6, 0]],
    [["invert", 0.6, 0], ["equalize", 1.0, 0]],
    [["color", 0.6, 4], ["contrast", 1.0, 8]],
    [["equalize", 0.8, 0], ["equalize", 0.6, 0]],
])

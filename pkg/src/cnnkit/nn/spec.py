"""Declarative network description and its JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Union

DEPTHS = {18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
AA_SITES = ("maxpool", "projection", "strided_conv")
STEMS = ("vanilla7x7", "resnet_d_3x3x3")
SKIPS = ("strided1x1", "avgpool_then_1x1")
SK_MODES = ("doubled_3x3", "3x3_5x5")


class SpecError(ValueError):
    """Raised for an internally inconsistent model description."""


@dataclass(frozen=True)
class SEConfig:
    ratio: int = 16
    kind: str = field(default="se", init=False)

    def __post_init__(self):
        if self.ratio < 1:
            raise SpecError(f"SE reduction ratio must be >= 1, got {self.ratio}")


@dataclass(frozen=True)
class SKConfig:
    ratio: int = 2
    kernel_mode: str = "doubled_3x3"
    kind: str = field(default="sk", init=False)

    def __post_init__(self):
        if self.ratio < 1:
            raise SpecError(f"SK reduction ratio must be >= 1, got {self.ratio}")
        if self.kernel_mode not in SK_MODES:
            raise SpecError(f"SK kernel_mode must be one of {SK_MODES}, got {self.kernel_mode!r}")


@dataclass(frozen=True)
class AAConfig:
    filter_size: int = 3
    sites: tuple[str, ...] = ("strided_conv",)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(sorted(set(self.sites))))
        if self.filter_size not in (3, 5):
            raise SpecError(f"anti-alias filter size must be 3 or 5, got {self.filter_size}")
        bad = set(self.sites) - set(AA_SITES)
        if bad or not self.sites:
            raise SpecError(f"anti-alias sites must be a non-empty subset of {AA_SITES}, got {self.sites}")


@dataclass(frozen=True)
class BigLittleConfig:
    alpha: int = 2
    beta: int = 4

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1:
            raise SpecError(f"BigLittle alpha/beta must be >= 1, got {self.alpha}/{self.beta}")


@dataclass(frozen=True)
class DropBlockConfig:
    stages: tuple[int, ...] = (3, 4)
    block_size: int = 7
    keep_prob_start: float = 1.0
    keep_prob_end: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(sorted(set(self.stages))))
        if self.block_size < 1:
            raise SpecError(f"DropBlock block_size must be >= 1, got {self.block_size}")
        for kp in (self.keep_prob_start, self.keep_prob_end):
            if not 0 < kp <= 1:
                raise SpecError(f"keep_prob must lie in (0, 1], got {kp}")


Attention = Union[SEConfig, SKConfig, None]


@dataclass(frozen=True)
class ModelSpec:
    """Bottleneck ResNet plus per-tweak toggles.

    ``blocks`` overrides ``depth`` with custom per-stage block counts.  ``widths``
    are bottleneck widths; stage outputs are ``width * expansion``.
    """

    depth: int | None = 50
    blocks: tuple[int, ...] | None = None
    widths: tuple[int, ...] = (64, 128, 256, 512)
    expansion: int = 4
    stem: str = "vanilla7x7"
    stem_width: int = 64
    stem_stride: int = 2
    stem_pool: bool = True
    stride_on: str = "conv3x3"
    skip_downsample: str = "strided1x1"
    attention: Attention = None
    aa: AAConfig | None = None
    biglittle: BigLittleConfig | None = None
    dropblock: DropBlockConfig | None = None
    num_classes: int = 1000
    train_resolution: int = 224
    eval_resolution: int = 224
    in_channels: int = 3
    last_stage_stride: int = 2
    zero_gamma: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        blocks = self.stage_blocks
        if len(blocks) != len(self.widths):
            raise SpecError(f"{len(blocks)} stage block counts but {len(self.widths)} widths")
        if any(b < 1 for b in blocks):
            raise SpecError(f"every stage needs at least one block, got {blocks}")
        if self.stem not in STEMS:
            raise SpecError(f"stem must be one of {STEMS}, got {self.stem!r}")
        if self.skip_downsample not in SKIPS:
            raise SpecError(f"skip_downsample must be one of {SKIPS}, got {self.skip_downsample!r}")
        if self.stride_on not in ("conv1x1", "conv3x3"):
            raise SpecError(f"stride_on must be conv1x1 or conv3x3, got {self.stride_on!r}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        if self.last_stage_stride not in (1, 2):
            raise SpecError("last_stage_stride must be 1 or 2")
        if self.dropblock is not None:
            bad = [s for s in self.dropblock.stages if not 1 <= s <= len(blocks)]
            if bad:
                raise SpecError(f"DropBlock stages {bad} outside 1..{len(blocks)}")
        if self.biglittle is not None:
            bl = self.biglittle
            bl_stages = blocks[:-1]
            if len(blocks) < 2:
                raise SpecError("BigLittle needs at least two stages")
            if any(b < 2 for b in bl_stages):
                raise SpecError(f"BigLittle stages need >= 2 blocks each, got {bl_stages}")
            if bl.beta > max(bl_stages):
                raise SpecError(f"BigLittle beta={bl.beta} exceeds the deepest BigLittle stage "
                                f"({max(bl_stages)} blocks)")
            for w in self.widths[:-1]:
                if (w * self.expansion) % bl.alpha or w % bl.alpha:
                    raise SpecError(f"BigLittle alpha={bl.alpha} does not divide stage width {w}")
            if not self.stem_pool:
                raise SpecError("BigLittle replaces the stem pooling stage; stem_pool must be true")

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        if self.blocks is not None:
            return self.blocks
        if self.depth not in DEPTHS:
            raise SpecError(f"depth {self.depth} is not one of {sorted(DEPTHS)}; give explicit blocks")
        return DEPTHS[self.depth]

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key in ("attention", "aa", "biglittle", "dropblock"):
            val = getattr(self, key)
            if val is not None:
                d[key] = dataclasses.asdict(val)
                if key in ("aa", "dropblock"):
                    d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        d["blocks"] = list(self.blocks) if self.blocks is not None else None
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec fields: {sorted(unknown)}")
        att = d.get("attention")
        if att is not None:
            att = dict(att)
            kind = att.pop("kind", None)
            if kind == "se":
                d["attention"] = SEConfig(**att)
            elif kind == "sk":
                d["attention"] = SKConfig(**att)
            else:
                raise SpecError(f"attention.kind must be 'se' or 'sk', got {kind!r}")
        if d.get("aa") is not None:
            d["aa"] = AAConfig(filter_size=d["aa"].get("filter_size", 3),
                               sites=tuple(d["aa"].get("sites", ("strided_conv",))))
        if d.get("biglittle") is not None:
            d["biglittle"] = BigLittleConfig(**d["biglittle"])
        if d.get("dropblock") is not None:
            db = dict(d["dropblock"])
            if "stages" in db:
                db["stages"] = tuple(db["stages"])
            d["dropblock"] = DropBlockConfig(**db)
        for key in ("blocks", "widths"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise SpecError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


_PRESET = re.compile(r"^R(\d+)(D?)((?:\+[A-Za-z]+)*)$")


def preset(name: str, **overrides) -> ModelSpec:
    """Build a spec from a short name such as ``R50D+SK+BL+AA`` or ``R152D+SK+BL+AA``.

    Tweak tokens: ``SE``, ``SK``, ``BL``, ``AA``, ``DropBlock``.  BigLittle
    uses alpha=2, beta=4 for depth 50 and alpha=1, beta=2 otherwise; BL
    variants evaluate at 256 pixels.
    """
    m = _PRESET.match(name.replace(" ", ""))
    if not m:
        raise SpecError(f"unrecognised preset {name!r}")
    depth = int(m.group(1))
    fields_: dict[str, Any] = {"depth": depth}
    if m.group(2):
        fields_.update(stem="resnet_d_3x3x3", stem_width=64, skip_downsample="avgpool_then_1x1")
    for tok in filter(None, m.group(3).split("+")):
        t = tok.upper()
        if t == "SE":
            fields_["attention"] = SEConfig()
        elif t == "SK":
            fields_["attention"] = SKConfig()
        elif t == "BL":
            fields_["biglittle"] = BigLittleConfig(2, 4) if depth == 50 else BigLittleConfig(1, 2)
            fields_["eval_resolution"] = 256
        elif t == "AA":
            fields_["aa"] = AAConfig()
        elif t == "DROPBLOCK":
            fields_["dropblock"] = DropBlockConfig()
        else:
            raise SpecError(f"unknown tweak {tok!r} in preset {name!r}")
    fields_.update(overrides)
    return ModelSpec(**fields_)

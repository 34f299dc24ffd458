"""Residual building blocks and the individual architecture tweaks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import functional as F
from ..tensor import Tensor, concat, split
from .module import (AvgPool2d, BatchNorm2d, Conv2d, CostTrace, Identity, Linear, MaxPool2d, Module,
                     ReLU, Sequential)

_BINOMIAL = {3: np.array([1.0, 2.0, 1.0]), 5: np.array([1.0, 4.0, 6.0, 4.0, 1.0])}


# --------------------------------------------------------------------------
# anti-aliased downsampling
# --------------------------------------------------------------------------

def binomial_kernel(filter_size: int) -> np.ndarray:
    """Normalized 2-d binomial kernel; entries are dyadic so the sum is exactly 1."""
    if filter_size not in _BINOMIAL:
        raise ValueError(f"blur filter size must be 3 or 5, got {filter_size}")
    a = _BINOMIAL[filter_size]
    k = np.outer(a, a)
    return k / k.sum()


def blur_pool(x: Tensor, filter_size: int = 3, stride: int = 2) -> Tensor:
    """Reflection-pad, low-pass with a binomial kernel per channel, then subsample."""
    c = x.shape[1]
    p = (filter_size - 1) // 2
    k = binomial_kernel(filter_size).astype(x.dtype)
    w = Tensor(np.ascontiguousarray(np.broadcast_to(k, (c, 1, filter_size, filter_size))))
    xp = F.pad2d(x, (p, p, p, p), mode="reflect")
    return F.conv2d(xp, w, stride=stride, padding="valid", groups=c)


def strided_conv_with_aa(x: Tensor, weight: Tensor, filter_size: int = 3, stride: int = 2) -> Tensor:
    """Run ``weight`` at stride 1 and move the downsampling into :func:`blur_pool`."""
    return blur_pool(F.conv2d(x, weight, stride=1), filter_size, stride)


class BlurPool(Module):
    def __init__(self, channels: int, filter_size: int = 3, stride: int = 2):
        super().__init__()
        self.channels, self.filter_size, self.stride = channels, filter_size, stride

    def forward(self, x):
        return blur_pool(x, self.filter_size, self.stride)

    def trace(self, shape, acc):
        n, c, h, w = shape
        k, s = self.filter_size, self.stride
        ho, wo = (h - 1) // s + 1, (w - 1) // s + 1
        acc.add(ho * wo * c * k * k)
        return n, c, ho, wo


# --------------------------------------------------------------------------
# channel attention
# --------------------------------------------------------------------------

def reduced_width(channels: int, ratio: int) -> int:
    return max(1, math.ceil(channels / ratio))


class SEModule(Module):
    """Squeeze-and-excitation: per-channel sigmoid gates from pooled statistics."""

    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        d = reduced_width(channels, ratio)
        self.fc1 = Linear(channels, d)
        self.fc2 = Linear(d, channels)

    def gates(self, x):
        s = F.global_avg_pool(x).reshape(x.shape[0], x.shape[1])
        return F.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        g = self.gates(x)
        return x * g.reshape(x.shape[0], x.shape[1], 1, 1)

    def trace(self, shape, acc):
        n, c = shape[:2]
        self.fc1.trace((n, c), acc)
        self.fc2.trace((n, self.fc1.dout), acc)
        return shape


class SKUnit(Module):
    """Selective-kernel convolution.

    ``doubled_3x3`` runs one 3x3 conv with ``2 * cout`` outputs and splits it
    into the two branch descriptors; ``3x3_5x5`` uses separate kernels.  The
    fused descriptor passes through ``fc1 -> BN -> ReLU -> fc2`` and a softmax
    across the two branches picks a per-channel mixture.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, ratio: int = 2,
                 kernel_mode: str = "doubled_3x3", aa_filter: int | None = None):
        super().__init__()
        self.cout, self.kernel_mode = cout, kernel_mode
        conv_stride = 1 if aa_filter else stride
        if kernel_mode == "doubled_3x3":
            self.conv = Conv2d(cin, 2 * cout, 3, conv_stride)
            self.bn = BatchNorm2d(2 * cout)
        elif kernel_mode == "3x3_5x5":
            self.conv3 = Conv2d(cin, cout, 3, conv_stride)
            self.bn3 = BatchNorm2d(cout)
            self.conv5 = Conv2d(cin, cout, 5, conv_stride)
            self.bn5 = BatchNorm2d(cout)
        else:
            raise ValueError(f"unknown SK kernel mode {kernel_mode!r}")
        self.blur = BlurPool(2 * cout, aa_filter, stride) if aa_filter and stride > 1 else None
        d = reduced_width(cout, ratio)
        self.fc1 = Linear(cout, d, bias=False)
        self.fc_bn = BatchNorm2d(d)
        self.fc2 = Linear(d, 2 * cout)

    def branches(self, x):
        if self.kernel_mode == "doubled_3x3":
            u = F.relu(self.bn(self.conv(x)))
        else:
            u = concat([F.relu(self.bn3(self.conv3(x))), F.relu(self.bn5(self.conv5(x)))], axis=1)
        if self.blur is not None:
            u = self.blur(u)
        return split(u, 2, axis=1)

    def attention(self, u1, u2):
        n, c = u1.shape[0], u1.shape[1]
        s = F.global_avg_pool(u1 + u2).reshape(n, c)
        z = F.relu(self.fc_bn(self.fc1(s)))
        return F.softmax(self.fc2(z).reshape(n, 2, c), axis=1)

    def forward(self, x):
        u1, u2 = self.branches(x)
        n, c = u1.shape[0], u1.shape[1]
        a = self.attention(u1, u2)
        a1 = a[:, 0, :].reshape(n, c, 1, 1)
        a2 = a[:, 1, :].reshape(n, c, 1, 1)
        return u1 * a1 + u2 * a2

    def trace(self, shape, acc):
        if self.kernel_mode == "doubled_3x3":
            out = self.conv.trace(shape, acc)
        else:
            out = self.conv3.trace(shape, acc)
            self.conv5.trace(shape, acc)
            out = (out[0], 2 * self.cout, out[2], out[3])
        if self.blur is not None:
            out = self.blur.trace(out, acc)
        n = out[0]
        self.fc1.trace((n, self.cout), acc)
        self.fc2.trace((n, self.fc1.dout), acc)
        return n, self.cout, out[2], out[3]


# --------------------------------------------------------------------------
# DropBlock
# --------------------------------------------------------------------------

def dropblock_gamma(keep_prob: float, block_size: int, h: int, w: int) -> float:
    return (1.0 - keep_prob) / block_size ** 2 * (h * w) / ((h - block_size + 1) * (w - block_size + 1))


def dropblock_mask(shape, keep_prob: float, block_size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask: seeds are top-left corners of ``block_size`` squares in the valid region."""
    n, c, h, w = shape
    if block_size > min(h, w):
        raise ValueError(f"DropBlock block_size {block_size} exceeds feature size {h}x{w}")
    gamma = dropblock_gamma(keep_prob, block_size, h, w)
    vh, vw = h - block_size + 1, w - block_size + 1
    seeds = np.zeros((n, c, h + block_size - 1, w + block_size - 1), dtype=np.uint8)
    seeds[:, :, block_size - 1:block_size - 1 + vh, block_size - 1:block_size - 1 + vw] = \
        rng.random((n, c, vh, vw)) < gamma
    dropped = sliding_window_view(seeds, (block_size, block_size), axis=(2, 3)).max(axis=(-1, -2))
    return 1 - dropped


def dropblock(x: Tensor, keep_prob: float, block_size: int, training: bool,
              rng: np.random.Generator) -> Tensor:
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if block_size > min(x.shape[2], x.shape[3]):
        raise ValueError(f"DropBlock block_size {block_size} exceeds feature size {x.shape[2]}x{x.shape[3]}")
    if not training or keep_prob == 1.0:
        return x
    mask = dropblock_mask(x.shape, keep_prob, block_size, rng)
    kept = int(mask.sum())
    scale = mask.size / kept if kept else 0.0
    return x * Tensor((mask * scale).astype(x.dtype))


class DropBlock(Module):
    """Structured dropout; ``keep_prob`` is set externally by the training schedule."""

    def __init__(self, block_size: int = 7, keep_prob: float = 1.0, seed: int = 0):
        super().__init__()
        self.block_size, self.keep_prob = block_size, keep_prob
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return dropblock(x, self.keep_prob, self.block_size, self.training, self.rng)

    def trace(self, shape, acc):
        if self.block_size > min(shape[2], shape[3]):
            raise ValueError(f"DropBlock block_size {self.block_size} exceeds feature size "
                             f"{shape[2]}x{shape[3]}")
        return shape


# --------------------------------------------------------------------------
# residual blocks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockOptions:
    """Per-block tweak switches resolved from a model description."""

    attention: object = None
    aa_filter: int | None = None
    aa_sites: tuple[str, ...] = ()
    stride_on: str = "conv3x3"
    skip_downsample: str = "strided1x1"
    dropblock_size: int | None = None
    zero_gamma: bool = True


class Bottleneck(Module):
    """1x1 -> 3x3 (or SK) -> 1x1 residual block with optional SE, AA and DropBlock."""

    def __init__(self, cin: int, width: int, cout: int, stride: int = 1,
                 opts: BlockOptions = BlockOptions(), last_relu: bool = True):
        super().__init__()
        self.cin, self.width, self.cout, self.stride = cin, width, cout, stride
        self.last_relu = last_relu
        att = opts.attention
        aa_conv = opts.aa_filter if (stride > 1 and "strided_conv" in opts.aa_sites) else None
        s1 = stride if opts.stride_on == "conv1x1" else 1
        s3 = stride if opts.stride_on == "conv3x3" else 1
        self.anti_aliased = aa_conv is not None
        # with AA the stride moves from the conv into a trailing blur
        self.conv1 = Conv2d(cin, width, 1, 1 if aa_conv else s1)
        self.blur1 = BlurPool(width, aa_conv, s1) if aa_conv and s1 > 1 else None
        self.bn1 = BatchNorm2d(width)
        if att is not None and att.kind == "sk":
            self.sk = SKUnit(width, width, s3, att.ratio, att.kernel_mode, aa_conv if s3 > 1 else None)
        else:
            self.sk = None
            self.conv2 = Conv2d(width, width, 3, 1 if aa_conv and s3 > 1 else s3)
            self.bn2 = BatchNorm2d(width)
            self.blur2 = BlurPool(width, aa_conv, s3) if aa_conv and s3 > 1 else None
        self.conv3 = Conv2d(width, cout, 1)
        self.bn3 = BatchNorm2d(cout, zero_init=opts.zero_gamma)
        self.se = SEModule(cout, att.ratio) if att is not None and att.kind == "se" else None
        self.drop = DropBlock(opts.dropblock_size) if opts.dropblock_size else None
        self.shortcut = make_shortcut(cin, cout, stride, opts)

    def residual(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        if self.blur1 is not None:
            out = self.blur1(out)
        if self.sk is not None:
            out = self.sk(out)
        else:
            out = F.relu(self.bn2(self.conv2(out)))
            if self.blur2 is not None:
                out = self.blur2(out)
        out = self.bn3(self.conv3(out))
        if self.se is not None:
            out = self.se(out)
        if self.drop is not None:
            out = self.drop(out)
        return out

    def pre_activation(self, x):
        return self.residual(x) + self.shortcut(x)

    def forward(self, x):
        out = self.pre_activation(x)
        return F.relu(out) if self.last_relu else out

    def trace(self, shape, acc):
        out = self.conv1.trace(shape, acc)
        if self.blur1 is not None:
            out = self.blur1.trace(out, acc)
        if self.sk is not None:
            out = self.sk.trace(out, acc)
        else:
            out = self.conv2.trace(out, acc)
            if self.blur2 is not None:
                out = self.blur2.trace(out, acc)
        out = self.conv3.trace(out, acc)
        if self.se is not None:
            self.se.trace(out, acc)
        if self.drop is not None:
            self.drop.trace(out, acc)
        skip = self.shortcut.trace(shape, acc)
        if skip != out:
            raise ValueError(f"residual branch {out} and shortcut {skip} disagree")
        return out


def make_shortcut(cin: int, cout: int, stride: int, opts: BlockOptions) -> Module:
    if stride == 1 and cin == cout:
        return Identity()
    layers, names = [], []
    aa_proj = opts.aa_filter if "projection" in opts.aa_sites else None
    if stride > 1 and opts.skip_downsample == "avgpool_then_1x1":
        layers.append(BlurPool(cin, aa_proj, stride) if aa_proj else AvgPool2d(stride, stride))
        names.append("pool")
        stride = 1
    elif stride > 1 and aa_proj:
        layers.append(BlurPool(cin, aa_proj, stride))
        names.append("pool")
        stride = 1
    layers += [Conv2d(cin, cout, 1, stride), BatchNorm2d(cout)]
    names += ["conv", "bn"]
    return Sequential(*layers, names=names)


# --------------------------------------------------------------------------
# stems
# --------------------------------------------------------------------------

class ConvBNReLU(Sequential):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, relu: bool = True):
        layers = [Conv2d(cin, cout, k, stride), BatchNorm2d(cout)]
        names = ["conv", "bn"]
        if relu:
            layers.append(ReLU())
            names.append("relu")
        super().__init__(*layers, names=names)


def make_stem(kind: str, cin: int, width: int, stride: int) -> Sequential:
    if kind == "vanilla7x7":
        return ConvBNReLU(cin, width, 7, stride)
    if kind == "resnet_d_3x3x3":
        half = width // 2
        return Sequential(ConvBNReLU(cin, half, 3, stride), ConvBNReLU(half, half, 3),
                          ConvBNReLU(half, width, 3), names=["conv1", "conv2", "conv3"])
    raise ValueError(f"unknown stem {kind!r}")


def make_stem_pool(channels: int, aa_filter: int | None) -> Module:
    if aa_filter:
        return Sequential(MaxPool2d(3, 1, 1), BlurPool(channels, aa_filter, 2), names=["max", "blur"])
    return MaxPool2d(3, 2, 1)


# --------------------------------------------------------------------------
# BigLittle
# --------------------------------------------------------------------------

def biglittle_merge(big: Tensor, little: Tensor, project=None) -> Tensor:
    """Upsample the half-resolution ``big`` to ``little``'s grid and add.

    ``project`` (a callable) maps ``little`` to ``big``'s width when they differ.
    """
    hb, wb = big.shape[2], big.shape[3]
    hl, wl = little.shape[2], little.shape[3]
    if (-(-hl // 2), -(-wl // 2)) != (hb, wb):
        raise ValueError(f"BigLittle merge needs little at twice big's resolution, got big {big.shape} "
                         f"and little {little.shape}")
    if project is not None:
        little = project(little)
    if little.shape[1] != big.shape[1]:
        raise ValueError(f"BigLittle merge width mismatch: big {big.shape} vs little {little.shape}")
    return F.resize_bilinear(big, hl, wl) + little


class BigLittleStem(Module):
    """Replaces the stem max-pool: a strided big conv and a thin little path, merged at half resolution."""

    def __init__(self, width: int, alpha: int):
        super().__init__()
        lw = width // alpha
        self.big = ConvBNReLU(width, width, 3, 2, relu=False)
        self.little = Sequential(ConvBNReLU(width, lw, 3), ConvBNReLU(lw, lw, 3, 2),
                                 ConvBNReLU(lw, width, 1, relu=False), names=["conv1", "conv2", "conv3"])
        self.fuse = ConvBNReLU(width, width, 1)

    def forward(self, x):
        return self.fuse(F.relu(self.big(x) + self.little(x)))

    def trace(self, shape, acc):
        b = self.big.trace(shape, acc)
        lt = self.little.trace(shape, acc)
        if b != lt:
            raise ValueError(f"BigLittle stem branches disagree: {b} vs {lt}")
        return self.fuse.trace(b, acc)


class BigLittleStage(Module):
    """Big branch at half resolution, little branch at full resolution, then a fusion block.

    The big branch holds ``n - 1`` blocks (the first strided); the little
    branch holds ``max(1, n // beta - 1)`` blocks at ``1 / alpha`` the width.
    """

    def __init__(self, cin: int, width: int, cout: int, blocks: int, alpha: int, beta: int,
                 fusion_stride: int, opts_for):
        super().__init__()
        self.cout = cout
        nb = blocks - 1
        nl = max(1, blocks // beta - 1)
        self.n_big, self.n_little = nb, nl
        big = [Bottleneck(cin if i == 0 else cout, width, cout, 2 if i == 0 else 1, opts_for("big", i, 2 if i == 0 else 1),
                          last_relu=i < nb - 1) for i in range(nb)]
        self.big = Sequential(*big)
        lw, lc = width // alpha, cout // alpha
        little = [Bottleneck(cin if i == 0 else lc, lw, lc, 1, opts_for("little", i, 1)) for i in range(nl)]
        self.little = Sequential(*little)
        self.little_proj = ConvBNReLU(lc, cout, 1, relu=False)
        self.fusion = Bottleneck(cout, width, cout, fusion_stride, opts_for("fusion", 0, fusion_stride))

    def forward(self, x):
        big = self.big(x)
        little = self.little(x)
        return self.fusion(F.relu(biglittle_merge(big, little, self.little_proj)))

    def trace(self, shape, acc):
        b = self.big.trace(shape, acc)
        lt = self.little.trace(shape, acc)
        lt = self.little_proj.trace(lt, acc)
        if (-(-lt[2] // 2), -(-lt[3] // 2)) != b[2:]:
            raise ValueError(f"BigLittle branches at incompatible resolutions: big {b}, little {lt}")
        return self.fusion.trace(lt, acc)


def count_macs(module: Module, shape) -> tuple[tuple[int, ...], int]:
    acc = CostTrace()
    out = module.trace(tuple(shape), acc)
    return out, sum(acc.flops.values())

"""Assemble a runnable network from a :class:`ModelSpec`."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .blocks import (BigLittleStage, BigLittleStem, BlockOptions, Bottleneck, DropBlock, make_stem,
                     make_stem_pool)
from .module import CostTrace, GlobalAvgPool, Linear, Module, Sequential
from .spec import ModelSpec


@dataclass(frozen=True)
class BlockInstance:
    stage: int
    index: int
    branch: str
    name: str
    stride: int
    downsampling: bool
    anti_aliased: bool
    dropblock: bool
    layers: tuple[str, ...]


class ModelGraph(Module):
    def __init__(self, spec: ModelSpec, initialize: bool = True):
        super().__init__()
        self.spec = spec
        self.stem = make_stem(spec.stem, spec.in_channels, spec.stem_width, spec.stem_stride)
        aa_filter = spec.aa.filter_size if spec.aa else None
        aa_sites = spec.aa.sites if spec.aa else ()
        blocks = spec.stage_blocks
        nstages = len(blocks)
        couts = [w * spec.expansion for w in spec.widths]
        strides = [1] + [2] * (nstages - 1)
        strides[-1] = spec.last_stage_stride if nstages > 1 else 1

        def opts_for(stage: int):
            def build(branch: str, index: int, stride: int) -> BlockOptions:
                aa = stage >= 2 and stride > 1
                db = spec.dropblock is not None and stage in spec.dropblock.stages
                return BlockOptions(
                    attention=spec.attention,
                    aa_filter=aa_filter if aa else None,
                    aa_sites=aa_sites if aa else (),
                    stride_on=spec.stride_on,
                    skip_downsample=spec.skip_downsample,
                    dropblock_size=spec.dropblock.block_size if db else None,
                    zero_gamma=spec.zero_gamma,
                )
            return build

        if spec.biglittle is not None:
            self.stem_pool = BigLittleStem(spec.stem_width, spec.biglittle.alpha)
        elif spec.stem_pool:
            self.stem_pool = make_stem_pool(spec.stem_width, aa_filter if "maxpool" in aa_sites else None)
        else:
            self.stem_pool = Sequential()

        stages, cin = [], spec.stem_width
        for si, (n, w, cout) in enumerate(zip(blocks, spec.widths, couts), start=1):
            if spec.biglittle is not None and si < nstages:
                fusion_stride = strides[si] if si + 1 < nstages else 1
                stage = BigLittleStage(cin, w, cout, n, spec.biglittle.alpha, spec.biglittle.beta,
                                       fusion_stride, opts_for(si))
            else:
                stride = strides[si - 1]
                build = opts_for(si)
                stage = Sequential(*[
                    Bottleneck(cin if i == 0 else cout, w, cout, stride if i == 0 else 1,
                               build("main", i, stride if i == 0 else 1))
                    for i in range(n)])
            stages.append(stage)
            cin = cout
        self.stages = Sequential(*stages, names=[f"stage{i}" for i in range(1, nstages + 1)])
        self.pool = GlobalAvgPool()
        self.fc = Linear(cin, spec.num_classes, init_std=0.01)
        if initialize:
            self.initialize(spec.seed)

    # -- structure -----------------------------------------------------------
    def block_instances(self) -> list[BlockInstance]:
        out = []
        for name, m in self.named_modules():
            if not isinstance(m, Bottleneck):
                continue
            parts = name.split(".")
            stage = int(parts[1][len("stage"):])
            branch = parts[2] if parts[2] in ("big", "little", "fusion") else "main"
            index = int(parts[-1]) if parts[-1].isdigit() else 0
            layers = tuple(n for n, _ in m.named_modules() if n and "." not in n)
            out.append(BlockInstance(stage, index, branch, name, m.stride, m.stride > 1,
                                     m.anti_aliased, m.drop is not None, layers))
        return out

    def dropblocks(self) -> list[DropBlock]:
        return [m for _, m in self.named_modules() if isinstance(m, DropBlock)]

    def set_keep_prob(self, keep_prob: float) -> None:
        for d in self.dropblocks():
            d.keep_prob = keep_prob

    def reseed(self, seed: int, step: int) -> None:
        """Give every stochastic layer a stream derived from ``(seed, step, layer name)``."""
        for name, m in self.named_modules():
            if isinstance(m, DropBlock):
                m.reseed([seed, step, zlib.crc32(name.encode())])

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(p.shape), "kind": p.kind, "init": p.init,
                 "init_seed": [self.spec.seed, zlib.crc32(n.encode())]}
                for n, p in self.named_parameters()]

    # -- execution -----------------------------------------------------------
    def features(self, x):
        return self.stages(self.stem_pool(self.stem(x)))

    def forward(self, x):
        return self.fc(self.pool(self.features(x)))

    def trace(self, shape, acc: CostTrace):
        acc.section = "stem"
        shape = self.stem.trace(shape, acc)
        shape = self.stem_pool.trace(shape, acc)
        for i, stage in enumerate(self.stages, start=1):
            acc.section = f"stage{i}"
            shape = stage.trace(shape, acc)
        acc.section = "head"
        shape = self.pool.trace(shape, acc)
        return self.fc.trace(shape, acc)


def build_model(spec: ModelSpec, check_resolution: bool = True) -> ModelGraph:
    """Build and initialize the network.

    With ``check_resolution`` the graph is shape-traced at the training
    resolution so a DropBlock larger than its feature map is rejected here.
    """
    model = ModelGraph(spec)
    if check_resolution:
        model.trace((1, spec.in_channels, spec.train_resolution, spec.train_resolution), CostTrace())
    return model


def zero_gamma_init(model: Module) -> Module:
    """Zero the closing BN scale of every residual branch."""
    for _, m in model.named_modules():
        if isinstance(m, Bottleneck):
            m.bn3.gamma.assign(np.zeros(m.bn3.gamma.shape))
            m.bn3.zero_init = True
            m.bn3.gamma.init = "zeros"
    return model


def ablate_residuals(model: ModelGraph, x):
    """Forward pass where every residual branch is replaced by zero."""
    saved = {}
    for name, m in model.named_modules():
        if isinstance(m, Bottleneck):
            saved[name] = m.residual
            object.__setattr__(m, "residual", lambda inp, _m=m: 0.0 * _m.shortcut(inp))
    try:
        return model(x)
    finally:
        for name, m in model.named_modules():
            if name in saved:
                object.__delattr__(m, "residual")


__all__ = ["BlockInstance", "ModelGraph", "build_model", "zero_gamma_init", "ablate_residuals"]

"""Analytic parameter and FLOP accounting.

One multiply-accumulate counts as one FLOP.  Convolutions, fully connected
layers and the depthwise blur filters are counted; normalization,
activations, pooling, resampling and elementwise products are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelGraph
from .module import CostTrace


@dataclass
class CostReport:
    params: int
    flops: int
    resolution: int
    breakdown: dict[str, int] = field(default_factory=dict)
    param_breakdown: dict[str, int] = field(default_factory=dict)
    spec_hash: str = ""

    def to_dict(self) -> dict:
        return {"params": self.params, "flops": self.flops, "resolution": self.resolution,
                "params_M": round(self.params / 1e6, 2), "flops_G": round(self.flops / 1e9, 2),
                "flops_breakdown": self.breakdown, "params_breakdown": self.param_breakdown,
                "spec_hash": self.spec_hash, "flop_convention": "1 multiply-accumulate = 1 FLOP"}


def _section(name: str) -> str:
    head = name.split(".")[0]
    if head == "stages":
        return name.split(".")[1]
    if head in ("stem", "stem_pool"):
        return "stem"
    return "head"


def _model(spec_or_model) -> ModelGraph:
    if isinstance(spec_or_model, ModelGraph):
        return spec_or_model
    return ModelGraph(spec_or_model, initialize=False)


def count_params(spec_or_model) -> CostReport:
    model = _model(spec_or_model)
    per: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = _section(name)
        per[key] = per.get(key, 0) + p.size
    return CostReport(sum(per.values()), 0, 0, {}, per, model.spec.hash())


def count_flops(spec_or_model, resolution: int | None = None) -> CostReport:
    model = _model(spec_or_model)
    res = resolution or model.spec.eval_resolution
    acc = CostTrace()
    model.trace((1, model.spec.in_channels, res, res), acc)
    params = count_params(model)
    return CostReport(params.params, sum(acc.flops.values()), res, dict(acc.flops),
                      params.param_breakdown, model.spec.hash())

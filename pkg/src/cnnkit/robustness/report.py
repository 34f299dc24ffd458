"""Model-level robustness suites, their JSON report, and the throughput bench."""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..inference import predict
from ..regularization.preprocess import PreprocessConfig
from ..tensor import Tensor, no_grad
from .corruptions import KINDS, PERTURBATIONS, CorruptionSpec, corrupt, perturbation_sequence
from .metrics import flip_rate_exact, mean_corruption_error, mean_flip_rate, top1

REPORT_VERSION = 1


@dataclass
class RobustnessReport:
    """Per-(kind, severity) errors, per-kind flip rates, and their reductions (percent).

    ``subset`` marks that the kind lists are the desk-scale subsets, so the
    numbers are labelled subset-mCE / subset-mFR.
    """

    errors: dict[str, dict[int, float]] = field(default_factory=dict)
    flip_rates: dict[str, float] = field(default_factory=dict)
    baseline_errors: dict[str, dict[int, float]] | None = None
    baseline_flip_rates: dict[str, float] | None = None
    clean_top1: float | None = None
    mce: float | None = None
    mfr: float | None = None
    subset: bool = True

    def reduce(self) -> "RobustnessReport":
        if self.errors:
            self.mce = mean_corruption_error(self.errors, self.baseline_errors)
        if self.flip_rates:
            self.mfr = mean_flip_rate(self.flip_rates, self.baseline_flip_rates)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        d["corruption_kinds"] = sorted(self.errors)
        d["perturbation_kinds"] = sorted(self.flip_rates)
        d["errors"] = {k: {str(s): e for s, e in v.items()} for k, v in self.errors.items()}
        if self.baseline_errors is not None:
            d["baseline_errors"] = {k: {str(s): e for s, e in v.items()} for k, v in self.baseline_errors.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        def sev(t):
            return None if t is None else {k: {int(s): float(e) for s, e in v.items()} for k, v in t.items()}

        return cls(sev(d.get("errors")) or {}, dict(d.get("flip_rates") or {}), sev(d.get("baseline_errors")),
                   d.get("baseline_flip_rates"), d.get("clean_top1"), d.get("mce"), d.get("mfr"),
                   d.get("subset", True))


def load_baseline(path) -> tuple[dict[str, dict[int, float]] | None, dict[str, float] | None]:
    """Baseline table JSON: ``{"errors": {kind: {severity: err}}, "flip_rates": {kind: fr}}``."""
    d = json.loads(Path(path).read_text())
    errs = d.get("errors")
    errs = {k: {int(s): float(e) for s, e in v.items()} for k, v in errs.items()} if errs else None
    return errs, d.get("flip_rates")


def evaluate_corruptions(model, images, labels, kinds=KINDS, severities=(1, 2, 3, 4, 5), seed: int = 0,
                         preprocess: str = "none", cfg: PreprocessConfig = PreprocessConfig(),
                         batch_size: int = 128) -> dict[str, dict[int, float]]:
    if not kinds:
        raise ValueError("no corruption kinds given")
    labels = np.asarray(labels)
    out: dict[str, dict[int, float]] = {}
    for kind in kinds:
        out[kind] = {}
        for s in severities:
            bad = np.stack([corrupt(im, CorruptionSpec(kind, s, seed * 1_000_003 + i)) for i, im in enumerate(images)])
            pred = predict(model, bad, preprocess, batch_size, cfg)
            out[kind][s] = 1.0 - top1(pred, labels)
    return out


def evaluate_perturbations(model, images, kinds=PERTURBATIONS, frames: int = 31, seed: int = 0,
                           preprocess: str = "none", cfg: PreprocessConfig = PreprocessConfig(),
                           batch_size: int = 128) -> dict[str, float]:
    if not kinds:
        raise ValueError("no perturbation kinds given")
    out = {}
    for kind in kinds:
        seqs = []
        for i, im in enumerate(images):
            frames_i = perturbation_sequence(im, kind, frames, seed * 1_000_003 + i)
            seqs.append(predict(model, frames_i, preprocess, batch_size, cfg).tolist())
        out[kind] = float(flip_rate_exact(seqs))
    return out


def robustness_report(model, images, labels, corruption_kinds=KINDS, perturbation_kinds=PERTURBATIONS,
                      baseline_errors=None, baseline_flip_rates=None, severities=(1, 2, 3, 4, 5),
                      frames: int = 31, seed: int = 0, preprocess: str = "none",
                      cfg: PreprocessConfig = PreprocessConfig()) -> RobustnessReport:
    if baseline_errors is not None:
        missing = set(corruption_kinds) - set(baseline_errors)
        if missing:
            raise KeyError(f"baseline table has no entry for corruption kinds {sorted(missing)}")
    rep = RobustnessReport(baseline_errors=baseline_errors, baseline_flip_rates=baseline_flip_rates)
    rep.clean_top1 = top1(predict(model, images, preprocess, cfg=cfg), labels)
    if corruption_kinds:
        rep.errors = evaluate_corruptions(model, images, labels, corruption_kinds, severities, seed, preprocess, cfg)
    if perturbation_kinds:
        rep.flip_rates = evaluate_perturbations(model, images, perturbation_kinds, frames, seed, preprocess, cfg)
    return rep.reduce()


# --------------------------------------------------------------------------
# throughput
# --------------------------------------------------------------------------

def hardware_descriptor() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or platform.machine(),
            "cpus": os.cpu_count(), "python": platform.python_version(), "numpy": np.__version__,
            "system": platform.system()}


@dataclass
class ThroughputReport:
    images_per_sec: float
    batch: int
    timed_iters: int
    warmup_iters: int
    resolution: int
    dtype: str
    seconds: float
    hardware: dict

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, **asdict(self)}


def images_per_sec(batch: int, timed_iters: int, seconds: float) -> float:
    if timed_iters < 1:
        raise ValueError("timed_iters must be >= 1")
    return batch * timed_iters / seconds


def throughput_bench(model, batch: int = 64, warmup_iters: int = 1, timed_iters: int = 3,
                     resolution: int | None = None, seed: int = 0, clock=time.perf_counter) -> ThroughputReport:
    """Forward-only images/sec in eval mode on one stream, after ``warmup_iters`` untimed passes."""
    if timed_iters < 1:
        raise ValueError("timed_iters must be >= 1")
    res = resolution or model.spec.eval_resolution
    dtype = next(iter(model.parameters())).data.dtype
    x = Tensor(np.random.default_rng(seed).standard_normal((batch, model.spec.in_channels, res, res)).astype(dtype))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for _ in range(warmup_iters):
                model(x)
            t0 = clock()
            for _ in range(timed_iters):
                model(x)
            dt = clock() - t0
    finally:
        model.train(was_training)
    return ThroughputReport(images_per_sec(batch, timed_iters, dt), batch, timed_iters, warmup_iters, res,
                            str(np.dtype(dtype)), dt, hardware_descriptor())


__all__ = ["RobustnessReport", "ThroughputReport", "evaluate_corruptions", "evaluate_perturbations",
           "robustness_report", "throughput_bench", "images_per_sec", "hardware_descriptor", "load_baseline"]

"""Desk-scale ablation on a synthetic 10-class 32x32 corpus.

Three arms share the corpus, the step budget and the seeds:

* ``baseline``: vanilla stem, strided 1x1 skip, no attention, no label smoothing or Mixup
* ``dsk``: the ResNet-D stem and skip plus SK attention, still unregularized
* ``ls_mixup``: the baseline network with label smoothing 0.1 and Mixup alpha 0.2

Each run reports clean top-1 and the unnormalized subset-mCE on held-out data.
Results go to ``results/desk_ablation.json``.

    python3 scripts/desk_ablation.py --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from cnnkit.data import synthetic_corpus

from cnnkit.inference import predict
from cnnkit.nn import ModelSpec, SKConfig
from cnnkit.nn.model import ModelGraph
from cnnkit.regularization.preprocess import PreprocessConfig
from cnnkit.robustness import KINDS, evaluate_corruptions, mean_corruption_error, top1
from cnnkit.train import TrainSpec, train

ROOT = Path(__file__).resolve().parent.parent
# nuisance levels fixed from a 2-epoch baseline-only calibration (top-1 ~0.82)
CORPUS = dict(noise=0.35, angle_jitter=0.3, freq_jitter=0.2)
DESK_BASE = dict(blocks=(1, 1, 1), widths=(16, 32, 64), stem_width=16, stem_stride=2, stem_pool=False,
                 num_classes=10, train_resolution=32, eval_resolution=32)
ARMS = {
    "baseline": ({}, {}),
    "dsk": (dict(stem="resnet_d_3x3x3", skip_downsample="avgpool_then_1x1", attention=SKConfig()), {}),
    "ls_mixup": ({}, dict(label_smoothing=0.1, mixup_alpha=0.2)),
}


def desk_spec(arm: str, seed: int) -> ModelSpec:
    return ModelSpec(**DESK_BASE, **ARMS[arm][0], seed=seed)


def desk_train_spec(arm: str, seed: int, epochs: int, batch: int) -> TrainSpec:
    return TrainSpec(base_lr=0.1, warmup_epochs=1, epochs=epochs, batch_size=batch, weight_decay=5e-4,
                     preprocess="pad_crop_flip", seed=seed, checkpoint_every=epochs, eval_every=epochs,
                     **ARMS[arm][1])


def run_arm(arm, seed, train_set, test_set, mce_set, epochs, batch, out_root) -> dict:
    model = ModelGraph(desk_spec(arm, seed))
    cfg = PreprocessConfig(size=32, resize=32)
    spec = desk_train_spec(arm, seed, epochs, batch)
    t0 = time.time()
    res = train(model, train_set, spec, out_root / f"{arm}_s{seed}", preprocess_cfg=cfg)
    secs = time.time() - t0
    acc = top1(predict(model, test_set.images, "none", cfg=cfg), test_set.labels)
    errors = evaluate_corruptions(model, mce_set.images, mce_set.labels, KINDS, seed=seed, cfg=cfg)
    return {"arm": arm, "seed": seed, "top1": acc, "subset_mce": mean_corruption_error(errors),
            "errors": {k: {str(s): e for s, e in v.items()} for k, v in errors.items()},
            "train_loss": res.final.get("train_loss"), "train_seconds": secs,
            "steps": model_steps(len(train_set), spec)}


def model_steps(n, spec) -> int:
    return max(1, n // spec.effective_batch) * spec.epochs


def summarize(runs: list[dict]) -> dict:
    def mean(arm, key):
        vals = [r[key] for r in runs if r["arm"] == arm]
        return float(np.mean(vals)) if vals else None

    s = {arm: {"top1": mean(arm, "top1"), "subset_mce": mean(arm, "subset_mce")} for arm in ARMS}
    if s["baseline"]["top1"] is not None and s["dsk"]["top1"] is not None:
        s["dsk_top1_gain_points"] = 100 * (s["dsk"]["top1"] - s["baseline"]["top1"])
    if s["baseline"]["subset_mce"] is not None and s["ls_mixup"]["subset_mce"] is not None:
        s["ls_mixup_mce_drop_points"] = s["baseline"]["subset_mce"] - s["ls_mixup"]["subset_mce"]
    return s


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=list(ARMS), choices=list(ARMS))
    ap.add_argument("--train-size", type=int, default=10000)
    ap.add_argument("--test-size", type=int, default=2000)
    ap.add_argument("--mce-size", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "desk_ablation.json")
    ap.add_argument("--work", type=Path, default=ROOT / "results" / "desk_runs")
    args = ap.parse_args(argv)

    train_set = synthetic_corpus(args.train_size, seed=100, **CORPUS)
    test_set = synthetic_corpus(args.test_size, seed=200, **CORPUS)
    mce_set = test_set.subset(np.arange(min(args.mce_size, len(test_set))))
    runs = []
    t0 = time.time()
    for seed in args.seeds:
        for arm in args.arms:
            r = run_arm(arm, seed, train_set, test_set, mce_set, args.epochs, args.batch, args.work)
            runs.append(r)
            print(f"{arm:9s} seed={seed} top1={r['top1']:.4f} subset-mCE={r['subset_mce']:.2f} "
                  f"({r['train_seconds']:.0f}s)", flush=True)
    out = {"config": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}, "corpus": CORPUS,
           "corruption_kinds": list(KINDS), "runs": runs, "summary": summarize(runs),
           "total_seconds": time.time() - t0}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2))
    print(json.dumps(out["summary"], indent=2))


if __name__ == "__main__":
    main()

"""Command line entry points: ``count``, ``train``, ``eval`` and ``bench``.

Config files are JSON.  A model spec file holds either a full ModelSpec
object or ``{"preset": "R50D+SK", ...field overrides}``.  Flags override
config-file values.  Exit codes: 0 success, 1 run failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .data import load_dataset, resolve_path
from .inference import predict_logits
from .nn.cost import count_flops
from .nn.model import ModelGraph
from .nn.spec import ModelSpec, SpecError, preset
from .regularization.preprocess import PreprocessConfig, preprocess_batch
from .regularization.teacher import TeacherStoreError
from .retrieval import EmbeddingHead, recall_report
from .robustness import KINDS, PERTURBATIONS, load_baseline, robustness_report, throughput_bench, top1
from .tensor import Tensor, no_grad
from .train import TrainError, TrainSpec, Trainer

MANIFEST_VERSION = 1


class UsageError(Exception):
    """Bad input; reported on stderr with exit code 2."""


# --------------------------------------------------------------------------
# config loading
# --------------------------------------------------------------------------

def read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}") from None


def model_spec_from_obj(obj) -> ModelSpec:
    if isinstance(obj, str):
        return preset(obj)
    if not isinstance(obj, dict):
        raise SpecError("a model spec must be a JSON object or a preset name")
    obj = dict(obj)
    name = obj.pop("preset", None)
    if name is None:
        return ModelSpec.from_dict(obj)
    base = preset(name).to_dict()
    base.update(obj)
    return ModelSpec.from_dict(base)


def load_model_spec(path=None, preset_name=None, overrides: dict | None = None) -> ModelSpec:
    if path is None and preset_name is None:
        raise UsageError("give a model spec file or --preset")
    try:
        spec = model_spec_from_obj(read_json(path)) if path else preset(preset_name)
        if overrides:
            spec = ModelSpec.from_dict({**spec.to_dict(), **overrides})
    except SpecError as e:
        raise UsageError(f"invalid model spec: {e}") from None
    return spec


TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainSpec)}


def _flag_type(f: dataclasses.Field):
    default = f.default
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def add_train_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("train spec fields (override the --train-spec file)")
    for name, f in TRAIN_FIELDS.items():
        g.add_argument("--" + name.replace("_", "-"), dest="ts_" + name, type=_flag_type(f), default=None)


def load_train_spec(args) -> TrainSpec:
    d = {}
    if args.train_spec:
        obj = read_json(args.train_spec)
        if not isinstance(obj, dict):
            raise UsageError(f"{args.train_spec}: a train spec must be a JSON object")
        d.update(obj)
    for name in TRAIN_FIELDS:
        v = getattr(args, "ts_" + name, None)
        if v is not None:
            d[name] = v
    try:
        return TrainSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid train spec: {e}") from None


# --------------------------------------------------------------------------
# run manifests
# --------------------------------------------------------------------------

def run_hash(model_spec: ModelSpec, train_spec: TrainSpec, data: str) -> str:
    canon = json.dumps({"model": model_spec.hash(), "train": train_spec.hash(), "data": data}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_manifest(run_dir: Path, model_spec: ModelSpec, train_spec: TrainSpec, data: str, extra=None) -> dict:
    m = {"version": MANIFEST_VERSION, "code_version": __version__, "model_spec_hash": model_spec.hash(),
         "train_spec_hash": train_spec.hash(), "seed": train_spec.seed, "data": data,
         "model_spec": model_spec.to_dict(), "train_spec": train_spec.to_dict(),
         "outputs": {"log": "log.jsonl", "checkpoints": "epoch*.ckpt"}, **(extra or {})}
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True))
    return m


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_count(args) -> int:
    spec = load_model_spec(args.model_spec, args.preset)
    rep = count_flops(spec, args.resolution)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def _train_one(model_spec: ModelSpec, train_spec: TrainSpec, data_arg: str, out_root: Path, eval_arg=None,
               resume=None) -> Path:
    if train_spec.kd_logits and not resolve_path(train_spec.kd_logits).exists():
        raise UsageError(f"KD is enabled but the teacher logit store {train_spec.kd_logits!r} does not exist")
    try:
        data = load_dataset(data_arg, model_spec.num_classes)
        eval_data = load_dataset(eval_arg, model_spec.num_classes) if eval_arg else None
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot load dataset: {e}") from None
    run_dir = out_root / run_hash(model_spec, train_spec, str(data_arg))
    write_manifest(run_dir, model_spec, train_spec, str(data_arg))
    cfg = PreprocessConfig.for_size(model_spec.train_resolution)
    try:
        trainer = Trainer(ModelGraph(model_spec), data, train_spec, run_dir, eval_data, preprocess_cfg=cfg)
    except (TrainError, TeacherStoreError, KeyError) as e:
        raise UsageError(str(e)) from None
    try:
        res = trainer.run(resume)
    except (TrainError, OSError) as e:
        (run_dir / "FAILED").write_text(f"{e}\npartial artifacts in this directory are incomplete\n")
        raise
    print(json.dumps({"run_dir": str(run_dir), "final": res.final,
                      "checkpoints": [str(p) for p in res.checkpoints]}))
    return run_dir


def cmd_train(args) -> int:
    out_root = Path(args.out)
    if args.grid:
        grid = read_json(args.grid)
        if not isinstance(grid, list) or not grid:
            raise UsageError(f"{args.grid}: an ablation grid must be a non-empty JSON list")
        base_ts = load_train_spec(args)
        jobs = []
        for i, entry in enumerate(grid):
            if not isinstance(entry, dict) or "model" not in entry:
                raise UsageError(f"{args.grid}: entry {i} needs a 'model' key")
            try:
                ms = model_spec_from_obj(entry["model"])
                ts = TrainSpec.from_dict({**base_ts.to_dict(), **entry.get("train", {})})
            except (SpecError, TypeError, ValueError) as e:
                raise UsageError(f"{args.grid}: entry {i}: {e}") from None
            jobs.append((ms, ts))
        for ms, ts in jobs:
            _train_one(ms, ts, args.data, out_root, args.eval_data)
        return 0
    ms = load_model_spec(args.model_spec, args.preset, _model_overrides(args))
    _train_one(ms, load_train_spec(args), args.data, out_root, args.eval_data, args.resume)
    return 0


def _model_overrides(args) -> dict:
    d = {}
    if getattr(args, "num_classes", None):
        d["num_classes"] = args.num_classes
    if getattr(args, "resolution", None):
        d["train_resolution"] = d["eval_resolution"] = args.resolution
    return d


def load_model_from_checkpoint(path, model_spec_path=None):
    try:
        tensors, manifest = load_checkpoint(path)
    except (OSError, CheckpointError, KeyError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None
    stored = manifest.get("meta", {}).get("model_spec")
    if model_spec_path:
        spec = load_model_spec(model_spec_path)
    elif stored:
        spec = ModelSpec.from_dict(stored)
    else:
        raise UsageError(f"{path}: checkpoint carries no model spec; pass --model-spec")
    if spec.hash() != manifest.get("model_spec_hash"):
        raise UsageError(f"{path}: checkpoint model spec hash {manifest.get('model_spec_hash')} does not match "
                         f"the given model spec ({spec.hash()})")
    model = ModelGraph(spec, initialize=False)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("velocity:")})
    return model


def cmd_eval(args) -> int:
    model = load_model_from_checkpoint(args.checkpoint, args.model_spec)
    try:
        data = load_dataset(args.data, model.spec.num_classes)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot load dataset: {e}") from None
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    cfg = PreprocessConfig.for_size(model.spec.eval_resolution)
    report: dict = {"version": 1, "suite": args.suite, "checkpoint": str(args.checkpoint),
                    "model_spec_hash": model.spec.hash(), "samples": len(data)}
    if args.suite == "top1":
        logits = predict_logits(model, data.images, args.preprocess, cfg=cfg)
        report["top1"] = top1(logits.argmax(1), data.labels)
    elif args.suite == "robustness":
        kinds = tuple(args.kinds or KINDS)
        bad = [k for k in kinds if k not in KINDS]
        if bad:
            raise UsageError(f"unknown corruption kinds {bad}; known: {list(KINDS)}")
        base_err = base_fr = None
        if args.baseline:
            base_err, base_fr = load_baseline(resolve_path(args.baseline))
        try:
            rep = robustness_report(model, data.images, data.labels, kinds, tuple(args.perturbations or PERTURBATIONS),
                                    base_err, base_fr, frames=args.frames, seed=args.seed,
                                    preprocess=args.preprocess, cfg=cfg)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        report.update(rep.to_dict())
    else:
        head = EmbeddingHead(_feature_channels(model), dim=args.dim, p=args.gem_p)
        head.initialize(args.seed)
        emb = []
        model.eval()
        with no_grad():
            for i in range(0, len(data), 128):
                x = preprocess_batch(data.images[i:i + 128], args.preprocess, False, cfg=cfg)
                emb.append(head(model.features(Tensor(x))).data)
        report.update(recall_report(np.concatenate(emb), data.labels))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def _feature_channels(model) -> int:
    probe = np.zeros((1, model.spec.in_channels, model.spec.eval_resolution, model.spec.eval_resolution),
                     np.float32)
    model.eval()
    with no_grad():
        return model.features(Tensor(probe)).shape[1]


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = load_model_from_checkpoint(args.checkpoint, args.model_spec)
    else:
        model = ModelGraph(load_model_spec(args.model_spec, args.preset))
    if args.dtype == "float64":
        model.to(np.float64)
    rep = throughput_bench(model, args.batch, args.warmup, args.iters, args.resolution)
    out = rep.to_dict()
    out["model_spec_hash"] = model.spec.hash()
    print(json.dumps(out, indent=2))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnnkit", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="parameter and FLOP counts for a model spec")
    p.add_argument("model_spec", nargs="?", help="model spec JSON file")
    p.add_argument("--preset", help="preset name such as R50D+SK+BL+AA")
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="train a model, or every entry of an ablation grid")
    p.add_argument("--model-spec")
    p.add_argument("--preset")
    p.add_argument("--train-spec", help="train spec JSON file; flags override its fields")
    p.add_argument("--data", required=True, help="tiny-image file or class-per-subdirectory image folder")
    p.add_argument("--eval-data")
    p.add_argument("--out", default="runs", help="root under which run directories are created")
    p.add_argument("--grid", help="JSON list of {model, train} entries; one run directory each")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--resolution", type=int, help="train and eval resolution override")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1, robustness or retrieval report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--suite", choices=("top1", "robustness", "retrieval"), default="top1")
    p.add_argument("--data", required=True)
    p.add_argument("--model-spec", help="check the checkpoint against this spec")
    p.add_argument("--preprocess", choices=("imagenet", "none"), default="none")
    p.add_argument("--limit", type=int, help="evaluate the first N samples only")
    p.add_argument("--kinds", nargs="+", help="corruption kinds (default: all registered)")
    p.add_argument("--perturbations", nargs="+", choices=PERTURBATIONS)
    p.add_argument("--frames", type=int, default=31)
    p.add_argument("--baseline", help="baseline error table JSON for normalization")
    p.add_argument("--dim", type=int, default=1536, help="retrieval embedding size")
    p.add_argument("--gem-p", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="forward throughput in images/sec")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--model-spec")
    p.add_argument("--preset")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--resolution", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cnnkit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (TrainError, OSError) as e:
        print(f"cnnkit {args.command}: run failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""The training loop: regularizer stack, JSON-lines log, checkpoints, resume."""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import functional as F
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import Dataset
from ..inference import predict
from ..regularization.autoaugment import IMAGENET_POLICY, apply_policy
from ..regularization.preprocess import PreprocessConfig, preprocess_batch
from ..regularization.targets import kd_loss, label_smooth, mixup_type1, mixup_type2
from ..regularization.teacher import TeacherLogitStore
from ..robustness.metrics import top1
from ..tensor import Tensor, backward, recording
from .schedule import SGD, lr_at
from .spec import TrainSpec


class TrainError(RuntimeError):
    pass


@dataclass
class RunResult:
    out_dir: Path
    log_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    aborted_steps: int = 0

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def keep_prob_at(step: int, total_steps: int, start: float, end: float) -> float:
    """Linear decay across optimizer steps, reaching ``end`` at the last step."""
    if total_steps <= 1:
        return end
    return start + (end - start) * step / (total_steps - 1)


def steps_per_epoch(n: int, spec: TrainSpec) -> int:
    return max(1, n // spec.effective_batch)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _sample_rngs(ids, seed: int, epoch: int, tag: int = 0):
    return [np.random.default_rng([seed, epoch, tag, zlib.crc32(str(i).encode())]) for i in ids]


class Trainer:
    def __init__(self, model, data: Dataset, spec: TrainSpec, out_dir, eval_data: Dataset | None = None,
                 teacher: TeacherLogitStore | None = None, preprocess_cfg: PreprocessConfig | None = None):
        self.model, self.data, self.spec = model, data, spec
        self.eval_data = eval_data
        self.out_dir = Path(out_dir)
        self.cfg = preprocess_cfg or PreprocessConfig()
        k = model.spec.num_classes
        if data.num_classes != k:
            raise TrainError(f"dataset has {data.num_classes} classes but the model has {k}")
        if spec.kd_logits and teacher is None:
            teacher = TeacherLogitStore.load(spec.kd_logits)
        if teacher is not None and not spec.kd_logits:
            raise TrainError("a teacher store was supplied but KD is disabled in the TrainSpec")
        if teacher is not None:
            teacher.validate(data.ids, k)
        self.teacher = teacher
        for _, m in model.named_modules():
            if hasattr(m, "momentum") and hasattr(m, "running_mean"):
                m.momentum = spec.bn_momentum
        self.model.name_parameters()
        self.opt = SGD(model.parameters(), spec.momentum, spec.weight_decay)
        self.spe = steps_per_epoch(len(data), spec)
        self.schedule = spec.schedule(self.spe)
        db = model.spec.dropblock
        self.kp = (db.keep_prob_start, db.keep_prob_end) if (db and spec.dropblock) else (1.0, 1.0)
        self.step = 0

    # -- batches --------------------------------------------------------------
    def _inputs(self, idx: np.ndarray, epoch: int, tag: int) -> np.ndarray:
        ids = [self.data.ids[i] for i in idx]
        images = [self.data.images[i] for i in idx]
        rngs = _sample_rngs(ids, self.spec.seed, epoch, tag)
        if self.spec.autoaugment:
            images = [apply_policy(im, IMAGENET_POLICY, r) for im, r in zip(images, rngs)]
        return preprocess_batch(images, self.spec.preprocess, True, rngs, self.cfg)

    def _targets(self, idx: np.ndarray) -> np.ndarray:
        return label_smooth(self.data.labels[idx], self.model.spec.num_classes, self.spec.label_smoothing)

    def micro_batch_loss(self, idx: np.ndarray, epoch: int, micro: int):
        """Build one regularized micro-batch and return its loss."""
        spec = self.spec
        x = self._inputs(idx, epoch, 0)
        t = self._targets(idx)
        teacher = self.teacher.lookup([self.data.ids[i] for i in idx]) if self.teacher else None
        hard = t
        if spec.mixup_alpha > 0:
            rng = np.random.default_rng([spec.seed, self.step, micro, 0x313])
            if spec.mixup_type == 1:
                idx_b = rng.choice(len(self.data), size=len(idx), replace=False) \
                    if len(self.data) >= len(idx) else rng.integers(0, len(self.data), len(idx))
                xb = self._inputs(idx_b, epoch, 1)
                mb = mixup_type1(x, t, xb, self._targets(idx_b), spec.mixup_alpha, rng,
                                 per_sample=spec.mixup_per_sample)
                tb = self.teacher.lookup([self.data.ids[i] for i in idx_b]) if self.teacher else None
            else:
                mb = mixup_type2(x, t, spec.mixup_alpha, rng, per_sample=spec.mixup_per_sample)
                tb = teacher[mb.perm] if teacher is not None else None
            x, t = mb.x, mb.targets()
            if teacher is not None:
                teacher = mb.mix_rows(teacher, tb)
            hard = t if spec.kd_hard_targets == "mixed" else mb.targets_a
        logits = self.model(Tensor(x.astype(np.float32)))
        loss = F.softmax_cross_entropy(logits, hard if teacher is not None else t)
        if teacher is not None:
            loss = loss + kd_loss(logits, teacher, spec.kd_temperature) * spec.kd_weight
        return loss

    # -- loop -----------------------------------------------------------------
    def run(self, resume: str | Path | None = None) -> RunResult:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / "log.jsonl"
        result = RunResult(self.out_dir, log_path)
        start_epoch = 0
        if resume is not None:
            start_epoch = self.load(resume)
        else:
            log_path.write_text("")
            result.checkpoints.append(self.save(0))
        spec, n = self.spec, len(self.data)
        with open(log_path, "a") as log:
            for epoch in range(start_epoch, spec.epochs):
                order = _epoch_order(n, spec.seed, epoch)
                losses = []
                t0 = time.time()
                for s in range(self.spe):
                    lr = lr_at(self.step, self.schedule)
                    kp = keep_prob_at(self.step, self.schedule.total_steps, *self.kp)
                    self.model.set_keep_prob(kp)
                    self.model.reseed(spec.seed, self.step)
                    self.model.train()
                    self.opt.zero_grad()
                    total = 0.0
                    for micro in range(spec.accumulation):
                        lo = (s * spec.accumulation + micro) * spec.batch_size
                        idx = order[lo:lo + spec.batch_size]
                        with recording() as tape:
                            loss = self.micro_batch_loss(idx, epoch, micro) * (1.0 / spec.accumulation)
                            backward(loss, tape)
                        total += float(loss.data)
                    ok = self.opt.step(lr)
                    if not ok:
                        result.aborted_steps += 1
                    losses.append(total)
                    log.write(json.dumps({"event": "step", "step": self.step, "epoch": epoch, "lr": lr,
                                          "loss": total, "keep_prob": kp, "applied": ok}) + "\n")
                    self.step += 1
                rec = {"event": "epoch", "epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                       "seconds": time.time() - t0}
                if self.eval_data is not None and ((epoch + 1) % spec.eval_every == 0 or epoch + 1 == spec.epochs):
                    rec["eval_top1"] = self.evaluate(self.eval_data)
                log.write(json.dumps(rec) + "\n")
                log.flush()
                result.epochs.append(rec)
                if (epoch + 1) % spec.checkpoint_every == 0 or epoch + 1 == spec.epochs:
                    result.checkpoints.append(self.save(epoch + 1))
        return result

    def evaluate(self, data: Dataset) -> float:
        pred = predict(self.model, data.images, self.spec.preprocess, cfg=self.cfg)
        return top1(pred, data.labels)

    # -- persistence ---------------------------------------------------------
    def save(self, epoch: int) -> Path:
        tensors = {k: v for k, v in self.model.state_dict().items()}
        tensors.update(self.opt.state_dict())
        meta = {"epoch": epoch, "step": self.step, "train_spec": self.spec.to_dict(),
                "model_spec": self.model.spec.to_dict()}
        path = self.out_dir / f"epoch{epoch:04d}.ckpt"
        try:
            save_checkpoint(path, tensors, self.model.spec.hash(), meta)
        except OSError as e:
            raise TrainError(f"checkpoint write failed at {path}: {e}") from e
        return path

    def load(self, path) -> int:
        tensors, manifest = load_checkpoint(path)
        if manifest["model_spec_hash"] != self.model.spec.hash():
            raise TrainError(f"{path}: checkpoint was written for a different model spec")
        self.model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("velocity:")})
        self.opt.load_state_dict(tensors)
        self.step = int(manifest["meta"]["step"])
        return int(manifest["meta"]["epoch"])


def train(model, data: Dataset, spec: TrainSpec, out_dir, eval_data: Dataset | None = None,
          teacher: TeacherLogitStore | None = None, resume=None,
          preprocess_cfg: PreprocessConfig | None = None) -> RunResult:
    return Trainer(model, data, spec, out_dir, eval_data, teacher, preprocess_cfg).run(resume)

import json

import numpy as np
import pytest

from cnnkit.data import Dataset
from cnnkit.nn.model import ModelGraph
from cnnkit.regularization.teacher import TeacherLogitStore, TeacherStoreError
from cnnkit.tensor import Parameter
from cnnkit.train import (SGD, Schedule, TrainError, TrainSpec, Trainer, bn_transfer_momentum, decays,
                          keep_prob_at, lr_at, steps_per_epoch, train)


# -- schedule -----------------------------------------------------------------

def test_lr_warmup_and_cosine_values():
    s = Schedule(0.4, 5, 120, 100)
    assert lr_at(0, s) == 0.0
    assert np.isclose(lr_at(250, s), 0.2)
    span = s.total_steps - 1 - s.warmup_steps
    assert np.isclose(lr_at(s.warmup_steps + span // 2, s), 0.2, atol=1e-3)
    assert lr_at(s.total_steps - 1, s) < 1e-4 * 0.4
    with pytest.raises(ValueError):
        lr_at(s.total_steps, s)
    with pytest.raises(ValueError):
        Schedule(0.4, 5, 5, 1)


def test_lr_is_monotone_after_warmup():
    s = Schedule(0.1, 2, 10, 7)
    lrs = [lr_at(i, s) for i in range(s.warmup_steps, s.total_steps)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_bn_transfer_momentum():
    assert bn_transfer_momentum(1000) == 0.99
    assert bn_transfer_momentum(20) == 0.9


def test_keep_prob_decays_linearly():
    assert keep_prob_at(0, 11, 1.0, 0.9) == 1.0
    assert np.isclose(keep_prob_at(10, 11, 1.0, 0.9), 0.9)
    assert np.isclose(keep_prob_at(5, 11, 1.0, 0.9), 0.95)


# -- SGD ----------------------------------------------------------------------

def param(value, kind="conv_weight"):
    return Parameter(np.array(value, dtype=np.float64), kind=kind)


def test_sgd_hand_updates():
    p = param([0.0])
    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    p.grad = np.zeros(1)
    opt.step(0.1)
    assert p.data[0] == 0.0

    w = param([1.0])
    opt = SGD([w], momentum=0.0, weight_decay=0.0)
    w.grad = w.data.copy()  # gradient of w^2 / 2
    opt.step(0.1)
    assert np.isclose(w.data[0], 0.9)

    q = param([0.0])
    opt = SGD([q], momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        q.grad = np.array([2.0])
        opt.step(0.1)
    assert np.isclose(-q.data[0], 0.1 * 2.0 * (1 + 1.9))


def test_no_weight_decay_on_bn_and_bias():
    a, b, c = param([1.0]), param([1.0], "bn_gamma"), param([1.0], "bias")
    assert decays(a) and not decays(b) and not decays(c)
    opt = SGD([a, b, c], momentum=0.0, weight_decay=0.5)
    for p in (a, b, c):
        p.grad = np.zeros(1)
    opt.step(1.0)
    assert a.data[0] == 0.5 and b.data[0] == 1.0 and c.data[0] == 1.0


def test_non_finite_gradient_aborts_the_whole_step():
    a, b = param([1.0]), param([1.0])
    opt = SGD([a, b], momentum=0.9, weight_decay=0.0)
    a.grad, b.grad = np.array([1.0]), np.array([np.nan])
    assert opt.step(0.1) is False
    assert a.data[0] == 1.0 and b.data[0] == 1.0 and opt.velocity[0][0] == 0.0


def test_frozen_parameters_are_skipped():
    p = Parameter(np.ones(2), trainable=False)
    assert SGD([p]).params == []


# -- trainer -------------------------------------------------------------------

def toy_data(n=32, seed=0):
    """Two linearly separable classes: dark and bright images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels[:, None, None, None] == 1, 190, 60)
    images = np.clip(base + rng.integers(-20, 21, (n, 8, 8, 3)), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), [f"s{i}" for i in range(n)], 2)


def toy_spec(tiny_spec):
    return tiny_spec.replace(num_classes=2)


def toy_train(**kw):
    base = dict(base_lr=0.1, warmup_epochs=1, epochs=2, batch_size=16, weight_decay=1e-4, preprocess="none")
    base.update(kw)
    return TrainSpec(**base)


def test_zero_epochs_writes_only_the_initial_checkpoint(tmp_path, tiny_spec):
    res = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), toy_train(epochs=0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["epoch0000.ckpt"]
    assert res.log_path.read_text() == ""


def test_separable_toy_set_is_learned(tmp_path, tiny_spec):
    res = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), toy_train(epochs=100), tmp_path)
    steps = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    steps = [r for r in steps if r["event"] == "step"]
    assert len(steps) == 200
    assert min(r["loss"] for r in steps[-10:]) < 0.1


def test_log_lines_and_determinism(tmp_path, tiny_spec):
    spec = toy_train(label_smoothing=0.1, mixup_alpha=0.2)
    a = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), spec, tmp_path / "a")
    b = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), spec, tmp_path / "b")
    la = [r["loss"] for r in map(json.loads, a.log_path.read_text().splitlines()) if r["event"] == "step"]
    lb = [r["loss"] for r in map(json.loads, b.log_path.read_text().splitlines()) if r["event"] == "step"]
    assert len(la) == 2 * steps_per_epoch(32, spec) and la == lb


def test_resume_reproduces_the_next_step_exactly(tmp_path, tiny_spec):
    spec = toy_train(epochs=2, mixup_alpha=0.2, mixup_type=2)
    full = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), spec, tmp_path / "full")
    assert full.checkpoints[1].name == "epoch0001.ckpt"
    resumed = Trainer(ModelGraph(toy_spec(tiny_spec)), toy_data(), spec, tmp_path / "again").run(
        resume=full.checkpoints[1])
    assert resumed.epochs[0]["train_loss"] == full.epochs[1]["train_loss"]


def test_resume_rejects_a_different_model(tmp_path, tiny_spec):
    res = train(ModelGraph(toy_spec(tiny_spec)), toy_data(), toy_train(epochs=0), tmp_path)
    other = ModelGraph(toy_spec(tiny_spec).replace(seed=3))
    with pytest.raises(TrainError, match="different model"):
        Trainer(other, toy_data(), toy_train(), tmp_path / "o").run(resume=res.checkpoints[0])


def test_class_count_mismatch(tmp_path, tiny_spec):
    with pytest.raises(TrainError):
        Trainer(ModelGraph(tiny_spec), toy_data(), toy_train(), tmp_path)


def test_kd_requires_complete_teacher(tmp_path, tiny_spec):
    data = toy_data()
    rng = np.random.default_rng(0)
    store = TeacherLogitStore({sid: rng.standard_normal(2) for sid in data.ids[:-1]}, 2)
    path = store.save(tmp_path / "teacher.bin")
    with pytest.raises(TeacherStoreError, match="s31"):
        Trainer(ModelGraph(toy_spec(tiny_spec)), data, toy_train(kd_logits=str(path)), tmp_path / "r")
    with pytest.raises(TrainError):
        Trainer(ModelGraph(toy_spec(tiny_spec)), data, toy_train(), tmp_path / "r", teacher=store)


def test_kd_with_mixup_trains(tmp_path, tiny_spec):
    data = toy_data()
    rng = np.random.default_rng(0)
    path = TeacherLogitStore({sid: rng.standard_normal(2) for sid in data.ids}, 2).save(tmp_path / "t.bin")
    spec = toy_train(kd_logits=str(path), kd_temperature=2.0, mixup_alpha=0.2, kd_hard_targets="hard")
    res = train(ModelGraph(toy_spec(tiny_spec)), data, spec, tmp_path / "r")
    assert np.isfinite(res.final["train_loss"])


def test_checkpoint_write_failure_is_reported(tmp_path, tiny_spec):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises((TrainError, OSError)):
        train(ModelGraph(toy_spec(tiny_spec)), toy_data(), toy_train(epochs=0), blocker / "run")


def test_train_spec_json_roundtrip():
    s = toy_train(mixup_alpha=0.2)
    assert TrainSpec.from_json(s.to_json()) == s and TrainSpec.from_json(s.to_json()).hash() == s.hash()
    with pytest.raises(ValueError):
        TrainSpec.from_dict({"colour": 1})
    with pytest.raises(ValueError):
        TrainSpec(mixup_type=3)
    with pytest.raises(ValueError, match="warmup"):
        TrainSpec(epochs=3, warmup_epochs=3)


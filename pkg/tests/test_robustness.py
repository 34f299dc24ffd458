import json
from fractions import Fraction
from itertools import count

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnnkit.nn.model import ModelGraph
from cnnkit.robustness import (IDENTITY, KINDS, PERTURBATIONS, SEVERITY, CorruptionSpec, RobustnessReport,
                               apply_param, corrupt, flip_rate, images_per_sec, load_baseline,
                               mean_corruption_error, mean_flip_rate, perturbation_sequence, robustness_report,
                               throughput_bench, top1)
from cnnkit.robustness.metrics import flip_rate_exact, mce_exact

fracs = st.fractions(0, 1, max_denominator=1000)
severities = st.dictionaries(st.integers(1, 5), fracs, min_size=1)


def image(h=16, w=16, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


# -- top-1 ----------------------------------------------------------------------

def test_top1_values_and_errors():
    assert top1([1, 2, 3], [1, 2, 3]) == 1.0
    assert top1([1, 0, 3, 0], [1, 2, 3, 4]) == 0.5
    with pytest.raises(ValueError):
        top1([], [])
    with pytest.raises(ValueError):
        top1([1], [1, 2])


# -- corruption error -----------------------------------------------------------

def test_mce_equals_100_when_model_matches_baseline():
    errs = {k: {s: 0.1 * s for s in range(1, 6)} for k in ("a", "b")}
    assert mean_corruption_error(errs, errs) == 100.0


def test_ce_ratio_arithmetic():
    errs = {"a": {s: Fraction(38, 100) for s in range(1, 6)}}
    base = {"a": {s: Fraction(1, 2) for s in range(1, 6)}}
    assert mce_exact(errs, base) == Fraction(76, 100)
    floats = {"a": {s: 0.38 for s in range(1, 6)}}
    assert mean_corruption_error(floats, {"a": {s: 0.5 for s in range(1, 6)}}) == pytest.approx(76.0, abs=1e-12)


def test_unnormalized_mce_is_a_plain_mean():
    assert mean_corruption_error({"a": {1: 0.2}, "b": {1: 0.4}}) == pytest.approx(30.0, abs=1e-12)


def test_baseline_missing_a_kind_is_rejected():
    with pytest.raises(KeyError, match="'b'"):
        mean_corruption_error({"a": {1: 0.2}, "b": {1: 0.4}}, {"a": {1: 0.5}})
    with pytest.raises(ValueError):
        mean_corruption_error({})


def brute_mce(errors, baseline):
    total = Fraction(0)
    for kind in errors:
        num = sum(Fraction(errors[kind][s]) for s in errors[kind])
        den = sum(Fraction(baseline[kind][s]) for s in errors[kind])
        total += num / den
    return total / len(errors)


@given(st.dictionaries(st.sampled_from(KINDS), severities, min_size=1), st.data())
def test_mce_matches_brute_force_and_ignores_kind_order(errors, data):
    baseline = {k: {s: data.draw(st.fractions(Fraction(1, 100), 1, max_denominator=1000)) for s in v}
                for k, v in errors.items()}
    assert mce_exact(errors, baseline) == brute_mce(errors, baseline)
    shuffled = dict(reversed(list(errors.items())))
    assert mce_exact(shuffled, baseline) == mce_exact(errors, baseline)


# -- flip rate ----------------------------------------------------------------

def test_flip_rate_examples():
    assert flip_rate([3, 3, 3, 3]) == 0.0
    assert flip_rate([0, 1, 0, 1, 0]) == 1.0
    assert flip_rate(["a", "a", "b", "b", "b"]) == 0.25
    with pytest.raises(ValueError):
        flip_rate([1])


@given(st.lists(st.lists(st.integers(0, 3), min_size=2, max_size=12), min_size=1, max_size=6))
def test_flip_rate_matches_brute_force(seqs):
    expect = sum(Fraction(sum(a != b for a, b in zip(s, s[1:])), len(s) - 1) for s in seqs) / len(seqs)
    assert flip_rate_exact(seqs) == expect


def test_mfr_normalization():
    assert mean_flip_rate({"t": 0.1, "n": 0.3}) == pytest.approx(20.0)
    assert mean_flip_rate({"t": 0.1}, {"t": 0.2}) == pytest.approx(50.0)
    with pytest.raises(KeyError):
        mean_flip_rate({"t": 0.1}, {"n": 0.2})


# -- corruptions ----------------------------------------------------------------

def test_severity_tables_are_strictly_monotone():
    # each parameter moves away from its identity value as severity grows
    for kind, row in SEVERITY.items():
        d = np.diff(row)
        assert len(row) == 5 and ((d > 0).all() or (d < 0).all()), kind


@pytest.mark.parametrize("kind", KINDS)
def test_corruption_is_deterministic_and_shape_preserving(kind):
    img = image()
    a = corrupt(img, CorruptionSpec(kind, 3, seed=4))
    b = corrupt(img, CorruptionSpec(kind, 3, seed=4))
    assert a.shape == img.shape and a.dtype == np.uint8 and np.array_equal(a, b)
    assert not np.array_equal(a, img)


def test_corruption_input_errors():
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("brightness", 6)
    with pytest.raises(ValueError):
        corrupt(np.zeros((4, 4, 3), np.float32), CorruptionSpec("brightness", 1))


@pytest.mark.parametrize("severity", range(1, 6))
def test_gaussian_noise_variance(severity):
    img = np.full((100, 100, 3), 128, np.uint8)
    out = corrupt(img, CorruptionSpec("gaussian_noise", severity, seed=0))
    sigma = SEVERITY["gaussian_noise"][severity - 1]
    var = ((out.astype(np.float64) - 128) / 255).var()
    assert abs(var / sigma ** 2 - 1) < 0.05


def test_identity_parameters_return_the_input():
    img = image()
    for kind, v in IDENTITY.items():
        assert np.array_equal(apply_param(kind, img, v, np.random.default_rng(0)), img), kind


def test_perturbation_sequences():
    img = image(12, 12)
    for kind in PERTURBATIONS:
        seq = perturbation_sequence(img, kind, frames=5, seed=1)
        assert seq.shape == (5, 12, 12, 3) and np.array_equal(seq[0], img)
        assert np.array_equal(seq, perturbation_sequence(img, kind, frames=5, seed=1))
    with pytest.raises(ValueError):
        perturbation_sequence(img, "translate", frames=1)
    with pytest.raises(ValueError):
        perturbation_sequence(img, "zoom")


# -- reports ------------------------------------------------------------------

def test_report_on_tiny_model(tmp_path, tiny_spec):
    model = ModelGraph(tiny_spec)
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (6, 8, 8, 3), dtype=np.uint8)
    labels = rng.integers(0, 3, 6)
    kinds = ("gaussian_noise", "brightness")
    rep = robustness_report(model, images, labels, kinds, frames=4, severities=(1, 2))
    assert set(rep.errors) == set(kinds) and set(rep.flip_rates) == set(PERTURBATIONS)
    assert rep.mce is not None and 0 <= rep.mce <= 100 and rep.subset
    again = RobustnessReport.from_dict(json.loads(rep.to_json()))
    assert again.errors == rep.errors and again.mce == rep.mce

    path = tmp_path / "base.json"
    path.write_text(rep.to_json())
    base_e, base_f = load_baseline(path)
    normed = robustness_report(model, images, labels, kinds, frames=4, severities=(1, 2),
                               baseline_errors=base_e, baseline_flip_rates=base_f)
    assert normed.errors == rep.errors
    if all(sum(v.values()) > 0 for v in base_e.values()):
        assert normed.mce == pytest.approx(100.0)
    with pytest.raises(KeyError):
        robustness_report(model, images, labels, ("gaussian_noise", "contrast"), frames=4, severities=(1, 2),
                          baseline_errors=base_e)


# -- throughput ---------------------------------------------------------------

def test_images_per_sec_arithmetic():
    assert images_per_sec(64, 1, 0.2) == pytest.approx(320.0)
    assert images_per_sec(64, 5, 1.0) == pytest.approx(320.0)
    with pytest.raises(ValueError):
        images_per_sec(64, 0, 1.0)


def test_throughput_bench_with_fake_clock(tiny_spec):
    ticks = count()
    model = ModelGraph(tiny_spec)
    model.train()
    rep = throughput_bench(model, batch=4, warmup_iters=1, timed_iters=2, clock=lambda: 0.5 * next(ticks))
    assert rep.images_per_sec == pytest.approx(4 * 2 / 0.5)
    assert rep.resolution == tiny_spec.eval_resolution and rep.dtype == "float32"
    assert model.training
    assert {"version", "hardware", "images_per_sec"} <= set(rep.to_dict())

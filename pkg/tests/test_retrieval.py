import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnnkit import functional as F
from cnnkit.gradcheck import finite_diff_check
from cnnkit.nn import ModelSpec, count_flops, count_params
from cnnkit.nn.model import ModelGraph
from cnnkit.retrieval import (ArcFaceParams, EmbeddingHead, RetrievalNet, arcface_logits, cosine_logits, embed,
                              fit_embedding, gem_pool, recall_at_k, recall_report, stage4_stride_off,
                              synthetic_embedding_task)
from cnnkit.tensor import Tensor, no_grad, tsum


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


# -- GeM ----------------------------------------------------------------------

def test_gem_closed_form_and_limits():
    x = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    assert np.isclose(gem_pool(x, 3.0).data[0, 0], 4.5 ** (1 / 3))
    assert np.isclose(gem_pool(x, 3.0).data[0, 0], 1.6510, atol=1e-4)
    assert np.isclose(gem_pool(x, 1.0).data[0, 0], 1.5)
    vals = [gem_pool(x, p).data[0, 0] for p in (1, 2, 3, 8, 32, 128)]
    assert all(a < b for a, b in zip(vals, vals[1:])) and vals[-1] < 2.0
    assert np.isclose(vals[-1], 2.0 * 0.5 ** (1 / 128))  # tends to the max, 2


def test_gem_p1_equals_average_pooling():
    x = Tensor(np.random.default_rng(0).random((2, 3, 4, 5)))
    assert np.allclose(gem_pool(x, 1.0).data, x.data.mean(axis=(2, 3)))


def test_gem_rejects_negative_inputs_for_fractional_p():
    x = Tensor(-np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        gem_pool(x, 2.5)
    with pytest.raises(ValueError):
        gem_pool(Tensor(np.ones((1, 1, 2, 2))), 0.5)


def test_gem_gradient():
    rng = np.random.default_rng(1)
    probe = Tensor(rng.standard_normal((2, 3)))
    f = lambda t: tsum(gem_pool(t, 3.0) * probe)
    assert finite_diff_check(f, rng.random((2, 3, 3, 3)) + 0.1).max_rel_error < 1e-5


# -- margin logits ---------------------------------------------------------------

def test_zero_margin_is_plain_cosine_softmax():
    rng = np.random.default_rng(0)
    f = Tensor(unit_rows(rng.standard_normal((4, 6))))
    w = Tensor(unit_rows(rng.standard_normal((5, 6))).T.copy())
    a = arcface_logits(f, w, [0, 1, 2, 3], margin=0.0, scale=30.0).data
    assert np.array_equal(a, cosine_logits(f, w, 30.0).data)


def test_margin_on_aligned_feature():
    f = Tensor(np.array([[1.0, 0.0]]))
    w = Tensor(np.eye(2))
    out = arcface_logits(f, w, [0], margin=0.3, scale=1.0).data
    assert np.isclose(out[0, 0], math.cos(0.3), atol=1e-6) and np.isclose(out[0, 0], 0.95534, atol=1e-5)
    assert out[0, 1] == 0.0


@given(st.floats(0.01, math.pi - 0.31))
def test_margin_lowers_the_true_class_logit(theta):
    f = Tensor(np.array([[math.cos(theta), math.sin(theta)]]))
    w = Tensor(np.eye(2))
    with_m = arcface_logits(f, w, [0], margin=0.3, scale=1.0).data[0, 0]
    without = arcface_logits(f, w, [0], margin=0.0, scale=1.0).data[0, 0]
    assert with_m < without


def test_non_normalized_inputs_are_rejected():
    w = Tensor(np.eye(2))
    with pytest.raises(ValueError, match="normalized"):
        arcface_logits(Tensor(np.array([[1.001, 0.0]])), w, [0])
    arcface_logits(Tensor(np.array([[1.00005, 0.0]])), w, [0])  # inside the 1e-4 tolerance
    with pytest.raises(ValueError):
        cosine_logits(Tensor(np.array([[1.0, 0.0]])), Tensor(np.eye(2) * 2))
    with pytest.raises(ValueError):
        arcface_logits(Tensor(np.array([[1.0, 0.0]])), w, [2])


def test_arcface_params_validation():
    p = ArcFaceParams.create(4, 3)
    assert np.allclose(np.linalg.norm(p.normalized_weight().data, axis=0), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        ArcFaceParams.create(4, 3, margin=2.0)
    with pytest.raises(ValueError):
        ArcFaceParams.create(4, 3, scale=0.0)


def test_arcface_gradient():
    rng = np.random.default_rng(2)
    w = Tensor(unit_rows(rng.standard_normal((4, 5))).T.copy())
    target = np.eye(4)[[0, 3, 1]]

    def f(t):
        return F.softmax_cross_entropy(arcface_logits(F.l2_normalize(t, axis=1), w, [0, 3, 1], 0.3, 4.0), target)

    assert finite_diff_check(f, rng.standard_normal((3, 5))).max_rel_error < 1e-5


# -- head and stride -----------------------------------------------------------

def small_spec(**kw):
    base = dict(blocks=(1, 1, 1, 1), widths=(2, 2, 2, 4), stem_width=4, num_classes=3,
                train_resolution=224, eval_resolution=224)
    base.update(kw)
    return ModelSpec(**base)


def test_stage4_stride_off_doubles_the_final_map():
    spec = small_spec()
    off = stage4_stride_off(spec)
    x = Tensor(np.zeros((1, 3, 224, 224), np.float32))
    with no_grad():
        assert ModelGraph(spec).features(x).shape[2:] == (7, 7)
        assert ModelGraph(off).features(x).shape[2:] == (14, 14)
    assert count_params(off).params == count_params(spec).params
    assert count_flops(off).flops > count_flops(spec).flops


def test_retrieval_net_outputs_unit_embeddings(tiny_spec):
    backbone = ModelGraph(tiny_spec)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 8, 8)).astype(np.float32))
    with no_grad():
        channels = backbone.features(x).shape[1]
    head = EmbeddingHead(channels, dim=6)
    head.initialize(0)
    net = RetrievalNet(backbone, head)
    with no_grad():
        e = net(x).data
    assert e.shape == (3, 6) and np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)


def test_trainable_gem_exponent_is_a_parameter():
    head = EmbeddingHead(4, dim=2, p=3.0, trainable_p=True)
    assert any(p.kind == "gem_p" for p in head.parameters())
    with pytest.raises(ValueError):
        EmbeddingHead(4, dim=2, p=0.5)


# -- recall@k --------------------------------------------------------------------

def test_recall_examples():
    q = np.array([[1.0, 0.0], [-1.0, 0.0]])
    g = np.array([[2.0, 0.0], [-3.0, 0.0]])
    assert recall_at_k(q, [0, 1], g, [0, 1], 1) == 1.0
    pts = np.array([[1.0, 0.1], [1.0, -0.1], [-1.0, 0.1], [-1.0, -0.1]])
    assert recall_at_k(pts, [0, 0, 1, 1], k=1) == 1.0
    with pytest.raises(ValueError):
        recall_at_k(pts, [0, 0, 1, 1], k=4)
    assert set(recall_report(pts, [0, 0, 1, 1])) == {"recall@1", "recall@2"}


def test_recall_is_rotation_invariant():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((40, 5)), rng.integers(0, 4, 40)
    rot, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    for k in (1, 2, 4):
        assert recall_at_k(x, y, k=k) == recall_at_k(x @ rot, y, k=k)


def test_random_embeddings_score_at_chance():
    rng = np.random.default_rng(0)
    c, n = 10, 4000
    x, y = rng.standard_normal((n, 16)), np.repeat(np.arange(c), n // c)
    p = (n // c - 1) / (n - 1)
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(recall_at_k(x, y, k=1) - p) < 3 * sigma


def test_arcface_embedding_generalizes():
    x, y = synthetic_embedding_task(n_per_class=96, seed=0)
    emb, _ = fit_embedding(x[:512], y[:512], epochs=30, seed=0)
    assert recall_at_k(embed(emb, x[512:]), y[512:], k=1) > 0.9

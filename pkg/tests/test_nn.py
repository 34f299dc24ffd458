import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnnkit import functional as F
from cnnkit.gradcheck import check_module, finite_diff_check
from cnnkit.nn import (AAConfig, BigLittleConfig, DropBlockConfig, ModelGraph, ModelSpec, SEConfig, SKConfig,
                       SpecError, ablate_residuals, build_model, count_flops, count_params, preset)
from cnnkit.nn.blocks import (BlockOptions, Bottleneck, SEModule, SKUnit, binomial_kernel, biglittle_merge,
                              blur_pool, count_macs, dropblock_gamma, dropblock_mask, reduced_width)
from cnnkit.tensor import Tensor, no_grad, tsum


# -- spec ---------------------------------------------------------------------

def test_preset_parsing():
    s = preset("R50D+SK+BL+AA")
    assert s.stem == "resnet_d_3x3x3" and s.skip_downsample == "avgpool_then_1x1"
    assert s.attention.kind == "sk" and s.aa is not None and s.biglittle == BigLittleConfig(2, 4)
    assert s.eval_resolution == 256
    with pytest.raises(SpecError):
        preset("R50+XYZ")
    with pytest.raises(SpecError):
        preset("VGG16")


def test_spec_json_roundtrip_and_hash():
    s = preset("R50D+SE+AA", dropblock=DropBlockConfig())
    t = ModelSpec.from_json(s.to_json())
    assert t == s and t.hash() == s.hash()
    assert s.replace(seed=1).hash() != s.hash()


def test_spec_rejects_unknown_fields_and_bad_values():
    with pytest.raises(SpecError, match="unknown"):
        ModelSpec.from_dict({"depth": 50, "colour": "red"})
    with pytest.raises(SpecError):
        ModelSpec(stem="nine_by_nine")
    with pytest.raises(SpecError):
        ModelSpec(depth=34)
    with pytest.raises(SpecError):
        ModelSpec(blocks=(1, 1), widths=(8, 16, 32))


def test_biglittle_needs_enough_blocks():
    with pytest.raises(SpecError):
        ModelSpec(blocks=(1, 1, 1, 1), biglittle=BigLittleConfig(2, 4))


def test_dropblock_larger_than_feature_map_rejected_at_build():
    spec = ModelSpec(blocks=(1, 1, 1, 1), widths=(4, 4, 4, 4), stem_width=8, num_classes=2,
                     train_resolution=32, dropblock=DropBlockConfig(block_size=7))
    with pytest.raises(ValueError, match="block_size"):
        build_model(spec)


# -- counts -------------------------------------------------------------------

def test_param_count_matches_closed_form_for_a_custom_net():
    spec = ModelSpec(blocks=(1,), widths=(2,), expansion=2, stem_width=4, num_classes=3, stem_pool=False,
                     zero_gamma=False)
    stem = 3 * 4 * 49 + 2 * 4
    block = 4 * 2 + 2 * 2 + 2 * 2 * 9 + 2 * 2 + 2 * 4 + 2 * 4  # identity shortcut: 4 -> 4 at stride 1
    fc = 4 * 3 + 3
    assert count_params(spec).params == stem + block + fc == 679


def test_stride_does_not_change_params_but_changes_flops():
    a, b = preset("R50"), preset("R50", last_stage_stride=1)
    assert count_params(a).params == count_params(b).params
    assert count_flops(b).flops > count_flops(a).flops


def test_flops_breakdown_sums_to_total():
    rep = count_flops(preset("R50D+SK"))
    assert sum(rep.breakdown.values()) == rep.flops
    assert set(rep.breakdown) == {"stem", "stage1", "stage2", "stage3", "stage4", "head"}


def test_conv_mac_count():
    from cnnkit.nn.module import Conv2d
    out, macs = count_macs(Conv2d(3, 8, 3, 2), (1, 3, 16, 16))
    assert out == (1, 8, 8, 8) and macs == 8 * 8 * 8 * 3 * 9


# -- blur pool ----------------------------------------------------------------

def test_binomial_kernels_sum_to_one():
    for fs in (3, 5):
        k = binomial_kernel(fs)
        assert k.sum() == 1.0 and np.allclose(k, k.T)
    with pytest.raises(ValueError):
        binomial_kernel(4)


def test_blur_pool_keeps_constants():
    x = Tensor(np.full((1, 2, 8, 8), 3.0))
    assert np.array_equal(blur_pool(x).data, np.full((1, 2, 4, 4), 3.0))


# -- attention ----------------------------------------------------------------

@given(st.integers(1, 300), st.integers(1, 32))
def test_reduced_width_is_ceiling(c, r):
    assert reduced_width(c, r) == max(1, math.ceil(c / r))


def test_se_gates_lie_in_unit_interval(tiny_spec):
    se = SEModule(8, 4)
    se.initialize(0)
    g = se.gates(Tensor(np.random.default_rng(0).standard_normal((2, 8, 3, 3)))).data
    assert g.shape == (2, 8) and (g > 0).all() and (g < 1).all()


def test_sk_attention_sums_to_one():
    sk = SKUnit(4, 6, stride=2)
    sk.initialize(0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 8, 8)))
    u1, u2 = sk.branches(x)
    a = sk.attention(u1, u2).data
    assert np.allclose(a.sum(axis=1), 1.0)
    assert sk(x).shape == (2, 6, 4, 4)


# -- dropblock ----------------------------------------------------------------

def test_dropblock_gamma_formula():
    assert math.isclose(dropblock_gamma(0.9, 7, 14, 14), 0.1 / 49 * 196 / 64)


def test_dropblock_mask_drops_square_blocks():
    rng = np.random.default_rng(0)
    m = dropblock_mask((2, 3, 20, 20), 0.9, 3, rng)
    assert set(np.unique(m)) <= {0, 1} and (m == 0).any()
    for n, c, i, j in np.argwhere(m == 0):
        # every dropped pixel lies in some fully dropped 3x3 square
        assert any((m[n, c, a:a + 3, b:b + 3] == 0).all()
                   for a in range(max(0, i - 2), min(i, 17) + 1) for b in range(max(0, j - 2), min(j, 17) + 1))


def test_dropblock_is_identity_in_eval_and_at_keep_one():
    from cnnkit.nn.blocks import dropblock
    x = Tensor(np.ones((1, 2, 8, 8)))
    rng = np.random.default_rng(0)
    assert dropblock(x, 0.5, 3, False, rng) is x
    assert dropblock(x, 1.0, 3, True, rng) is x


# -- residual blocks and models ------------------------------------------------

def test_bottleneck_variants_have_expected_shapes():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 8, 8)))
    for opts in [BlockOptions(), BlockOptions(stride_on="conv1x1"),
                 BlockOptions(attention=SEConfig(4)), BlockOptions(attention=SKConfig()),
                 BlockOptions(aa_filter=3, aa_sites=("strided_conv",)),
                 BlockOptions(skip_downsample="avgpool_then_1x1", aa_filter=3, aa_sites=("projection",))]:
        b = Bottleneck(8, 4, 16, 2, opts)
        b.initialize(0)
        assert b(x).shape == (2, 16, 4, 4)


def test_zero_gamma_blocks_start_as_shortcut(tiny_spec):
    m = ModelGraph(tiny_spec)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)))
    with no_grad():
        assert np.array_equal(m(x).data, ablate_residuals(m, x).data)


def test_initialization_is_deterministic(tiny_spec):
    a, b = ModelGraph(tiny_spec), ModelGraph(tiny_spec)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    c = ModelGraph(tiny_spec.replace(seed=1))
    assert not np.array_equal(a.stem.conv.weight.data, c.stem.conv.weight.data)


def test_state_dict_roundtrip(tiny_spec):
    a = ModelGraph(tiny_spec)
    b = ModelGraph(tiny_spec.replace(seed=5))
    b.load_state_dict(a.state_dict())
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 8, 8)))
    a.eval(), b.eval()
    with no_grad():
        assert np.array_equal(a(x).data, b(x).data)


def test_biglittle_model_forward_and_manifest():
    spec = ModelSpec(blocks=(2, 2, 2, 1), widths=(4, 4, 8, 8), stem_width=8, num_classes=3,
                     attention=SKConfig(), aa=AAConfig(), biglittle=BigLittleConfig(2, 2),
                     train_resolution=32, eval_resolution=32)
    m = ModelGraph(spec)
    with no_grad():
        assert m(Tensor(np.zeros((1, 3, 32, 32)))).shape == (1, 3)
    blocks = m.block_instances()
    assert {b.branch for b in blocks} >= {"big", "little", "fusion"}
    assert any(b.anti_aliased for b in blocks)
    names = [r["name"] for r in m.manifest()]
    assert len(names) == len(set(names))


def test_biglittle_merge_checks_shapes():
    big = Tensor(np.ones((1, 4, 3, 3)))
    with pytest.raises(ValueError):
        biglittle_merge(big, Tensor(np.ones((1, 4, 8, 8))))
    assert biglittle_merge(big, Tensor(np.ones((1, 4, 6, 6)))).shape == (1, 4, 6, 6)


def test_model_gradients_on_tiny_spec(tiny_spec):
    m = ModelGraph(tiny_spec.replace(zero_gamma=False))
    m.to(np.float64)
    m.name_parameters()
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 8, 8)))
    t = np.eye(3)[[0, 1, 2]]
    params = [p for n, p in m.named_parameters() if n.endswith("weight")][:4]
    res = check_module(lambda: F.softmax_cross_entropy(m(x), t), params, max_coords=6)
    assert all(r.max_rel_error < 1e-3 for r in res.values())


def test_input_gradient_through_se_block():
    b = Bottleneck(4, 2, 4, 1, BlockOptions(attention=SEConfig(2), zero_gamma=False))
    b.initialize(0)
    b.to(np.float64)
    probe = Tensor(np.random.default_rng(1).standard_normal((2, 4, 5, 5)))
    f = lambda x: tsum(b.pre_activation(x) * probe)
    assert finite_diff_check(f, np.random.default_rng(2).standard_normal((2, 4, 5, 5))).max_rel_error < 1e-3

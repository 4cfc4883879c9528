import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from streamvos import fusion, ops
from streamvos.fusion import FusionWeights, TokenMap
from streamvos.gradcheck import check
from streamvos.layers import DepthwiseKernel, LinearProjection, flatten_parameters
from streamvos.serialize import FormatError
from streamvos.tensor import DimensionError, Tensor


def arrays(w):
    return {k: v.data for k, v in flatten_parameters(w).items()}


def token_map(rng, h, w, d, slots=1, scale=1.0):
    return TokenMap(Tensor(rng.standard_normal((slots * h * w, d)) * scale), (h, w))


def zero_biases(w):
    for k, v in flatten_parameters(w).items():
        if k.endswith("bias"):
            v.data[...] = 0.0


# ---------------------------------------------------------------- weights

def test_weights_invariants():
    rng = np.random.default_rng(0)
    w = FusionWeights.init(rng, 8, 3)
    assert w.focal_levels == 3 and w.f_g.d_out == 4 and w.d_k == 8
    with pytest.raises(DimensionError):
        FusionWeights(w.f_q, w.f_k, w.f_v, w.f_z, w.f_fm, w.f_g, w.dwconv_kernels[:2])
    with pytest.raises(ValueError):
        FusionWeights(w.f_q, w.f_k, w.f_v, w.f_z, w.f_fm, LinearProjection.init(rng, 8, 1), [])


def test_weights_roundtrip_bit_exact():
    w = FusionWeights.init(np.random.default_rng(1), 6, 2)
    blob = fusion.dumps_weights(w)
    back = fusion.loads_weights(blob)
    assert fusion.dumps_weights(back) == blob
    for k, v in arrays(w).items():
        assert np.array_equal(v, arrays(back)[k])


def test_weights_reject_precision_mismatch():
    blob = fusion.dumps_weights(FusionWeights.init(np.random.default_rng(1), 4, 1))
    with pytest.raises(FormatError):
        fusion.loads_weights(blob, precision="float32")


# ---------------------------------------------------------------- cross attention

def test_ca_single_key_returns_projected_value():
    rng = np.random.default_rng(2)
    w = FusionWeights.init(rng, 8, 2)
    t = token_map(rng, 2, 2, 8)
    c = TokenMap(Tensor(rng.standard_normal((1, 8))), None)
    out = fusion.cross_attention(t, c, w).tokens.data
    v = w.f_v(c.tokens).data
    assert np.abs(out - v).max() < 1e-14


def test_ca_identical_context_tokens():
    rng = np.random.default_rng(3)
    w = FusionWeights.init(rng, 8, 2)
    t = token_map(rng, 2, 2, 8)
    c = TokenMap(Tensor(np.tile(rng.standard_normal(8), (6, 1))), None)
    out = fusion.cross_attention(t, c, w).tokens.data
    assert np.abs(out - w.f_v(c.tokens).data[0]).max() < 1e-14


@pytest.mark.parametrize("seed", range(3))
def test_ca_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    w = FusionWeights.init(rng, 8, 2)
    t = TokenMap(Tensor(rng.standard_normal((4, 8))), None)
    c = TokenMap(Tensor(rng.standard_normal((6, 8))), None)
    got = fusion.cross_attention(t, c, w).tokens.data
    ref = oracles.cross_attention(t.tokens.data, c.tokens.data, arrays(w))
    assert np.abs(got - ref).max() < 1e-10


def test_ca_channel_mismatch():
    rng = np.random.default_rng(4)
    w = FusionWeights.init(rng, 8, 2)
    with pytest.raises(DimensionError):
        fusion.cross_attention(token_map(rng, 2, 2, 8), token_map(rng, 2, 2, 4), w)


def test_ca_context_permutation_invariance():
    rng = np.random.default_rng(5)
    w = FusionWeights.init(rng, 6, 2)
    t = TokenMap(Tensor(rng.standard_normal((5, 6))), None)
    c = rng.standard_normal((7, 6))
    perm = rng.permutation(7)
    a = fusion.cross_attention(t, TokenMap(Tensor(c), None), w).tokens.data
    b = fusion.cross_attention(t, TokenMap(Tensor(c[perm]), None), w).tokens.data
    assert np.abs(a - b).max() < 1e-13


# ---------------------------------------------------------------- hierarchical contextualization

def test_hc_zero_context_all_levels_zero():
    rng = np.random.default_rng(6)
    w = FusionWeights.init(rng, 4, 2)
    zero_biases(w)
    levels = fusion.hierarchical_contextualization(TokenMap(Tensor(np.zeros((9, 4))), (3, 3)), w)
    assert len(levels) == 4
    assert all(not z.data.any() for z in levels)
    assert levels[-1].shape == (1, 1, 4)


def test_hc_needs_grid():
    w = FusionWeights.init(np.random.default_rng(7), 4, 1)
    with pytest.raises(ValueError):
        fusion.hierarchical_contextualization(TokenMap(Tensor(np.ones((4, 4))), None), w)


def test_hc_delta_kernel_level_is_gelu_of_projection():
    rng = np.random.default_rng(8)
    w = FusionWeights.init(rng, 4, 1)
    w.dwconv_kernels[0] = DepthwiseKernel.delta(4)
    c = token_map(rng, 3, 2, 4, scale=0.1)
    z0, z1, _ = fusion.hierarchical_contextualization(c, w)
    ref = np.vectorize(oracles.gelu)(z0.data)
    assert np.abs(z1.data - ref).max() < 1e-15


def test_hc_matches_composed_ops():
    rng = np.random.default_rng(9)
    w = FusionWeights.init(rng, 5, 2)
    c = token_map(rng, 4, 3, 5)
    levels = fusion.hierarchical_contextualization(c, w)
    z = ops.reshape(w.f_z(c.tokens), (4, 3, 5))
    assert np.array_equal(levels[0].data, z.data)
    for lvl, kernel in enumerate(w.dwconv_kernels, start=1):
        z = ops.gelu(ops.depthwise_conv(z, kernel.weights))
        assert np.array_equal(levels[lvl].data, z.data)
    assert np.array_equal(levels[-1].data, ops.global_avg_pool(z).data)


def test_hc_matches_loop_oracle_stacked_slots():
    rng = np.random.default_rng(10)
    w = FusionWeights.init(rng, 3, 2)
    c = token_map(rng, 3, 4, 3, slots=2)
    got = fusion.hierarchical_contextualization(c, w)
    ref = oracles.focal_levels(c.tokens.data, (3, 4), arrays(w))
    for g, r in zip(got, ref):
        assert np.abs(g.data - r).max() < 1e-12


# ---------------------------------------------------------------- gated aggregation

def selector_gates(w, level):
    w.f_g.weight.data[...] = 0.0
    w.f_g.bias.data[...] = 0.0
    if level is not None:
        w.f_g.bias.data[level - 1] = 1.0


@pytest.mark.parametrize("level", [1, 2, 3])
def test_ga_one_hot_gate_selects_level(level):
    rng = np.random.default_rng(11)
    w = FusionWeights.init(rng, 4, 2)
    c = token_map(rng, 3, 3, 4)
    selector_gates(w, level)
    levels = fusion.hierarchical_contextualization(c, w)
    out = fusion.gated_aggregation(levels, c, w).data
    assert np.array_equal(out, np.broadcast_to(levels[level].data, out.shape))


def test_ga_zero_gates():
    rng = np.random.default_rng(12)
    w = FusionWeights.init(rng, 4, 2)
    c = token_map(rng, 3, 3, 4)
    selector_gates(w, None)
    assert not fusion.gated_aggregation(fusion.hierarchical_contextualization(c, w), c, w).data.any()


def test_ga_level_count_mismatch():
    rng = np.random.default_rng(13)
    w = FusionWeights.init(rng, 4, 2)
    c = token_map(rng, 3, 3, 4)
    levels = fusion.hierarchical_contextualization(c, w)
    with pytest.raises(DimensionError):
        fusion.gated_aggregation(levels[:-1], c, w)


def test_ga_matches_loop_oracle():
    rng = np.random.default_rng(14)
    w = FusionWeights.init(rng, 4, 3)
    c = token_map(rng, 4, 4, 4)
    levels = fusion.hierarchical_contextualization(c, w)
    got = fusion.gated_aggregation(levels, c, w).data
    g = oracles.linear(c.tokens.data, w.f_g.weight.data, w.f_g.bias.data).reshape(1, 4, 4, -1)
    ref = oracles.aggregate([z.data[None] for z in levels], g)[0]
    assert np.abs(got - ref).max() < 1e-12


# ---------------------------------------------------------------- focal modulation

def test_fm_zero_target_gives_zero():
    rng = np.random.default_rng(15)
    w = FusionWeights.init(rng, 4, 2)
    zero_biases(w)
    out = fusion.focal_modulation(TokenMap(Tensor(np.zeros((9, 4))), (3, 3)), token_map(rng, 3, 3, 4), w)
    assert not out.tokens.data.any()


def test_fm_zero_context_gives_zero():
    rng = np.random.default_rng(16)
    w = FusionWeights.init(rng, 4, 2)
    zero_biases(w)
    out = fusion.focal_modulation(token_map(rng, 3, 3, 4), TokenMap(Tensor(np.zeros((9, 4))), (3, 3)), w)
    assert not out.tokens.data.any()


def test_fm_matches_loop_oracle():
    rng = np.random.default_rng(17)
    w = FusionWeights.init(rng, 6, 2)
    t, c = token_map(rng, 3, 3, 6), token_map(rng, 3, 3, 6)
    got = fusion.focal_modulation(t, c, w).tokens.data
    ref = oracles.focal_modulation(t.tokens.data, c.tokens.data, (3, 3), arrays(w))
    assert np.abs(got - ref).max() < 1e-10


def test_fm_requires_aligned_tokens():
    rng = np.random.default_rng(18)
    w = FusionWeights.init(rng, 4, 2)
    with pytest.raises(DimensionError):
        fusion.focal_modulation(token_map(rng, 2, 2, 4), token_map(rng, 3, 3, 4), w)


# ---------------------------------------------------------------- modulated cross attention

def reduction_weights(rng, d):
    w = FusionWeights.init(rng, d, 1)
    w.dwconv_kernels[0] = DepthwiseKernel.delta(d)
    selector_gates(w, 1)
    return w


def test_mca_reduces_to_ca():
    rng = np.random.default_rng(19)
    w = reduction_weights(rng, 8)
    t, c = token_map(rng, 4, 4, 8), token_map(rng, 3, 5, 8, slots=2)
    mca = fusion.modulated_cross_attention(t, c, w).tokens.data
    values = w.f_fm(ops.gelu(w.f_z(c.tokens)))
    ca = ops.matmul(fusion.attention_map(t, c, w), values).data
    assert np.abs(mca - ca).max() < 1e-12


def test_mca_single_token_context():
    rng = np.random.default_rng(20)
    w = FusionWeights.init(rng, 4, 2)
    c = token_map(rng, 1, 1, 4)
    out = fusion.modulated_cross_attention(token_map(rng, 2, 3, 4), c, w).tokens.data
    m = fusion.modulator(c, w).data
    assert np.abs(out - m[0]).max() < 1e-14


@pytest.mark.parametrize("slots", [1, 2])
def test_mca_matches_loop_oracle(slots):
    rng = np.random.default_rng(21 + slots)
    w = FusionWeights.init(rng, 8, 2)
    t, c = token_map(rng, 4, 4, 8), token_map(rng, 4, 4, 8, slots=slots)
    got, attn = fusion.modulated_cross_attention(t, c, w, return_attention=True)
    assert attn.shape == (16, 16 * slots)
    ref = oracles.modulated_cross_attention(t.tokens.data, c.tokens.data, (4, 4), arrays(w))
    assert np.abs(got.tokens.data - ref).max() < 1e-10


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_output_shape_independent_of_levels(levels, h, w_, seed):
    rng = np.random.default_rng(seed)
    w = FusionWeights.init(rng, 4, levels)
    t, c = token_map(rng, h, w_, 4), token_map(rng, h, w_, 4, slots=2)
    assert fusion.modulated_cross_attention(t, c, w).tokens.shape == t.tokens.shape
    assert fusion.cross_attention(t, c, w).tokens.shape == t.tokens.shape
    _, attn = fusion.cross_attention(t, c, w, return_attention=True)
    assert np.abs(attn.data.sum(axis=1) - 1).max() < 1e-9


# ---------------------------------------------------------------- gradients

OPERATORS = {
    "cross_attention": lambda t, c, w: fusion.cross_attention(t, c, w).tokens,
    "focal_modulation": lambda t, c, w: fusion.focal_modulation(t, c, w).tokens,
    "modulated_cross_attention": lambda t, c, w: fusion.modulated_cross_attention(t, c, w).tokens,
    "hierarchical_contextualization": lambda t, c, w: ops.concat(
        [ops.reshape(z, (-1, w.D)) for z in fusion.hierarchical_contextualization(c, w)], axis=0),
    "gated_aggregation": lambda t, c, w: fusion.gated_aggregation(fusion.hierarchical_contextualization(c, w), c, w),
}


@pytest.mark.parametrize("name", sorted(OPERATORS))
def test_operator_gradients(name):
    rng = np.random.default_rng(len(name))
    w = FusionWeights.init(rng, 4, 2)
    t, c = token_map(rng, 3, 3, 4), token_map(rng, 3, 3, 4)
    op = OPERATORS[name]
    r = Tensor(rng.standard_normal(op(t, c, w).shape))
    f = lambda: ops.sum(ops.mul(op(t, c, w), r))
    params = flatten_parameters(w)
    params["context"] = c.tokens
    if name in ("cross_attention", "focal_modulation", "modulated_cross_attention"):
        params["target"] = t.tokens
    report = check(f, params)
    assert max(report.values()) < 1e-4, report

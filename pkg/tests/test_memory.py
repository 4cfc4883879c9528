import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvos import memory, ops
from streamvos.fusion import FusionWeights, TokenMap
from streamvos.layers import DepthwiseKernel
from streamvos.memory import EVAL_DELTA, TRAIN_DELTA, MemoryUsageError, Policy
from streamvos.serialize import FormatError
from streamvos.tensor import Tensor

H, W, D = 2, 3, 4


def feats(rng, h=H, w=W, d=D, dtype=np.float64):
    return TokenMap(Tensor(rng.standard_normal((h * w, d)).astype(dtype)), (h, w))


def bank_for(policy, delta=EVAL_DELTA, seed=0, h=H, w=W):
    rng = np.random.default_rng(seed)
    weights = FusionWeights.init(rng, D, 2)
    return memory.init(feats(rng, h, w), policy, delta, weights=weights), rng


def stream(bank, rng, last, start=1, h=H, w=W):
    for t in range(start, last + 1):
        memory.observe(bank, t, feats(rng, h, w))
    return bank


def test_delta_defaults():
    assert (TRAIN_DELTA, EVAL_DELTA) == (2, 10)


def test_init_holds_only_reference():
    bank, _ = bank_for("mca")
    s = memory.stats(bank)
    assert s.slot_count == 1 and s.token_count == H * W
    assert s.logical_bytes == H * W * D * 8
    assert bank.delta == 10
    assert bank.slots[0].kind == memory.REFERENCE and bank.slots[0].frame_index == 0


def test_logical_bytes_follow_precision():
    rng = np.random.default_rng(1)
    bank = memory.init(feats(rng, dtype=np.float32), "full", 10)
    assert memory.stats(bank).logical_bytes == H * W * D * 4


def test_init_validation():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        memory.init(feats(rng), "full", 0)
    with pytest.raises(ValueError):
        memory.init(feats(rng), "mca", 10)
    with pytest.raises(ValueError):
        memory.init(TokenMap(Tensor(np.ones((4, D))), None), "full", 10)


@pytest.mark.parametrize("spec,kind,n", [("full", "full", 0), ("MCA", "mca", 0), ("window:4", "window", 4), ("refprev", "refprev", 0)])
def test_policy_parse(spec, kind, n):
    p = Policy.parse(spec)
    assert (p.kind, p.window) == (kind, n)
    assert Policy.parse(str(p)) == p


@pytest.mark.parametrize("spec", ["window", "window:0", "fifo", "full:3"])
def test_policy_parse_rejects(spec):
    with pytest.raises(ValueError):
        Policy.parse(spec)


def test_mca_two_slots_after_100_frames():
    bank, rng = bank_for("mca")
    stream(bank, rng, 100)
    s = memory.stats(bank)
    assert s.slot_count == 2 and s.update_count == 10
    assert [x.kind for x in bank.slots] == [memory.REFERENCE, memory.DYNAMIC]
    assert bank.slots[1].frame_index == 100


def test_full_bank_grows():
    bank, rng = bank_for("full")
    stream(bank, rng, 100)
    assert memory.stats(bank).slot_count == 11
    assert memory.context_tokens(bank).T == 11 * H * W
    assert [x.frame_index for x in bank.slots] == list(range(0, 101, 10))


def test_window_evicts_oldest_non_reference():
    bank, rng = bank_for("window:3")
    stream(bank, rng, 100)
    assert [x.frame_index for x in bank.slots] == [0, 80, 90, 100]


def test_refprev_keeps_latest_raw_frame():
    bank, rng = bank_for("refprev", delta=1)
    stream(bank, rng, 4)
    last = feats(rng)
    memory.observe(bank, 5, last)
    assert memory.stats(bank).slot_count == 2
    assert np.array_equal(bank.slots[1].tokens.tokens.data, last.tokens.data)


def test_observe_off_period_is_noop():
    bank, rng = bank_for("full")
    stream(bank, rng, 10)
    before = [id(s) for s in bank.slots], memory.stats(bank)
    stream(bank, rng, 19, start=11)
    assert ([id(s) for s in bank.slots], memory.stats(bank)) == before


@pytest.mark.parametrize("bad", [5, 4])
def test_observe_requires_increasing_index(bad):
    bank, rng = bank_for("mca")
    stream(bank, rng, 5)
    with pytest.raises(MemoryUsageError):
        memory.observe(bank, bad, feats(rng))


def test_observe_rejects_wrong_grid():
    bank, rng = bank_for("mca")
    with pytest.raises(ValueError):
        memory.observe(bank, 1, feats(rng, 3, 3))


def test_first_dynamic_slot_stored_raw_then_fused():
    bank, rng = bank_for("mca", delta=2)
    f2 = feats(rng)
    memory.observe(bank, 2, f2)
    assert np.array_equal(bank.slots[1].tokens.tokens.data, f2.tokens.data)
    f4 = feats(rng)
    memory.observe(bank, 4, f4)
    from streamvos.fusion import modulated_cross_attention
    expected = modulated_cross_attention(f4, TokenMap(Tensor(f2.tokens.data), f2.grid), bank.weights)
    assert np.array_equal(bank.slots[1].tokens.tokens.data, expected.tokens.data)


def test_single_token_update_closed_form():
    rng = np.random.default_rng(3)
    w = FusionWeights.init(rng, D, 1)
    w.dwconv_kernels[0] = DepthwiseKernel.delta(D)
    w.f_g.weight.data[...] = 0
    w.f_g.bias.data[...] = [1.0, 0.0]
    bank = memory.init(feats(rng, 1, 1), "mca", 1, weights=w)
    old = feats(rng, 1, 1)
    memory.observe(bank, 1, old)
    memory.observe(bank, 2, feats(rng, 1, 1))
    expected = w.f_fm(ops.gelu(w.f_z(old.tokens))).data
    assert np.abs(bank.slots[1].tokens.tokens.data - expected).max() < 1e-14


def test_mca_update_deterministic():
    outs = []
    for _ in range(2):
        bank, rng = bank_for("mca", delta=3, seed=7)
        stream(bank, rng, 40)
        outs.append(bank.slots[1].tokens.tokens.data.tobytes())
    assert outs[0] == outs[1]


def test_stored_tokens_detached():
    bank, rng = bank_for("mca", delta=1)
    x = TokenMap(Tensor(rng.standard_normal((H * W, D)), requires_grad=True), (H, W))
    memory.observe(bank, 1, x)
    memory.observe(bank, 2, x)
    assert not any(s.tokens.tokens.requires_grad for s in bank.slots)


def test_context_ids_follow_slots():
    rng = np.random.default_rng(4)
    w = FusionWeights.init(rng, D, 2)
    bank = memory.init(feats(rng), "mca", 1, reference_ids=feats(rng), weights=w)
    ids = feats(rng)
    memory.observe(bank, 1, feats(rng), ids)
    ctx = memory.context_ids(bank)
    assert ctx.T == 2 * H * W
    assert np.array_equal(ctx.tokens.data[H * W:], ids.tokens.data)
    plain = memory.init(feats(rng), "full", 1)
    assert memory.context_ids(plain) is None


@given(st.integers(1, 10_000), st.integers(1, 12))
@settings(max_examples=25, deadline=None)
def test_token_count_law(length, delta):
    rng = np.random.default_rng(length)
    w = FusionWeights.init(rng, 2, 1)
    ref = TokenMap(Tensor(np.zeros((1, 2))), (1, 1))
    frame = TokenMap(Tensor(rng.standard_normal((1, 2))), (1, 1))
    mca = memory.init(ref, "mca", delta, weights=w)
    full = memory.init(ref, "full", delta)
    for t in range(1, length + 1):
        memory.observe(mca, t, frame)
        memory.observe(full, t, frame)
        if t % 997 == 0 or t == length:
            if t >= delta:
                assert memory.stats(mca).token_count == 2
            assert memory.stats(full).token_count == 1 + t // delta


def test_snapshot_roundtrip(tmp_path):
    bank, rng = bank_for("mca", delta=2)
    stream(bank, rng, 9)
    path = tmp_path / "bank.svss"
    memory.save_snapshot(bank, path)
    back = memory.load_snapshot(path, bank.weights)
    assert memory.stats(back) == memory.stats(bank)
    assert memory.snapshot_bytes(back) == path.read_bytes()
    # resuming continues identically
    f = feats(rng)
    memory.observe(bank, 10, f)
    memory.observe(back, 10, f)
    assert np.array_equal(bank.slots[1].tokens.tokens.data, back.slots[1].tokens.tokens.data)


def test_snapshot_rejects_garbage():
    with pytest.raises(FormatError):
        memory.restore_bytes(b"XXXX" + bytes(20))


def test_normalized_updates_stay_bounded():
    rng = np.random.default_rng(9)
    w = FusionWeights.init(rng, D, 2)
    w.f_fm.weight.data *= 4
    normed = memory.init(feats(rng), "mca", 1, weights=w, normalize_updates=True)
    for t in range(1, 40):
        f = feats(rng)
        memory.observe(normed, t, f)
    tok = normed.slots[1].tokens.tokens.data
    assert np.abs(tok.mean(axis=1)).max() < 1e-12
    assert np.abs(tok.var(axis=1) - 1).max() < 1e-3


def test_normalize_flag_survives_snapshot():
    rng = np.random.default_rng(10)
    bank = memory.init(feats(rng), "mca", 1, weights=FusionWeights.init(rng, D, 2), normalize_updates=True)
    back = memory.restore_bytes(memory.snapshot_bytes(bank), bank.weights)
    assert back.normalize_updates

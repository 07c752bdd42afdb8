import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hintstream import boost
from hintstream.boost import (
    BoostedSmallModel,
    BoostedStream,
    CompressionModule,
    ContextCache,
    JointModel,
    MergeConfig,
    MergeModule,
    embedding_channels,
    extract_embedding,
    shift_embeddings,
)
from hintstream.errors import ConfigError, ProtocolFault
from hintstream.gridnet import GridConfig

SMALL = GridConfig(d=8, b=3, h=4, l=2, attention=False, k=2)
LARGE = GridConfig(d=8, b=2, h=4, l=2, attention=True, attention_window=6, k=2)


def _spec(rng, f=9, t=16, ch=2):
    return torch.from_numpy(
        rng.standard_normal((1, ch, f, t)) + 1j * rng.standard_normal((1, ch, f, t))
    ).to(torch.complex64)


def test_extract_embedding_layout(rng):
    spec = _spec(rng)
    e = extract_embedding(spec)
    assert e.shape == (1, 4, 9, 16)
    assert torch.equal(e[:, :2], spec.real)
    assert torch.equal(e[:, 2:], spec.imag)


def test_embedding_channels():
    assert embedding_channels(2, 1) == 4
    assert embedding_channels(2, 2) == 2
    assert embedding_channels(4, 4) == 2
    with pytest.raises(ConfigError):
        embedding_channels(2, 3)


@settings(deadline=None, max_examples=30)
@given(c=st.integers(min_value=0, max_value=12), t=st.integers(min_value=1, max_value=10))
def test_shift_embeddings_semantics(c, t):
    e = torch.arange(1.0, t + 1.0).reshape(1, 1, 1, t)
    out = shift_embeddings(e, c)
    assert out.shape == e.shape
    for i in range(t):
        expected = e[..., i - c].item() if i - c >= 0 else 0.0
        assert out[..., i].item() == expected


def test_shift_embeddings_rejects_negative():
    with pytest.raises(ConfigError):
        shift_embeddings(torch.zeros(1, 1, 1, 4), -1)


class TestContextCache:
    def test_window_is_delay_shifted(self):
        cache = ContextCache(delay_chunks=2, context_len=3)
        for m in range(8):
            cache.append(m, torch.full((1,), float(m)))
        # at chunk 7 the readable window is [7-2-3, 7-2] = [2, 5]
        vals = [v.item() for v in cache.window(7)]
        assert vals == [2.0, 3.0, 4.0, 5.0]

    def test_eviction_drops_stale_entries(self):
        cache = ContextCache(delay_chunks=2, context_len=3)
        for m in range(6):
            cache.append(m, torch.tensor([float(m)]))
        i = 8
        cache.evict_before(i - 2 - 3)
        # entry i-C-V-1 = 2 must never be readable after chunk i
        assert not cache.has(2)
        assert cache.has(3)
        assert [v.item() for v in cache.window(i)] == [3.0, 4.0, 5.0]

    def test_out_of_order_append_is_a_fault(self):
        cache = ContextCache(1, 1)
        cache.append(4, torch.zeros(1))
        with pytest.raises(ProtocolFault):
            cache.append(3, torch.zeros(1))

    def test_empty_window_before_first_hint(self):
        cache = ContextCache(delay_chunks=3, context_len=2)
        cache.append(0, torch.zeros(1))
        assert cache.window(2) == []
        assert len(cache.window(3)) == 1


class TestCompression:
    def test_causal(self, rng):
        comp = CompressionModule(2, 2).double()
        e = torch.from_numpy(rng.standard_normal((1, 4, 9, 12)))
        with torch.no_grad():
            base = comp(e)
            e2 = e.clone()
            e2[..., 7:] += 1.0
            out2 = comp(e2)
        assert torch.equal(base[..., :7], out2[..., :7])
        assert not torch.equal(base[..., 7:], out2[..., 7:])

    def test_step_matches_forward(self, rng):
        comp = CompressionModule(2, 2).double()
        e = torch.from_numpy(rng.standard_normal((1, 4, 9, 10)))
        with torch.no_grad():
            full = comp(e)
            state = comp.init_state(1, 9, e.dtype, e.device)
            outs = []
            for i in range(10):
                y, state = comp.step(e[..., i : i + 1], state)
                outs.append(y)
            streamed = torch.cat(outs, dim=-1)
        assert torch.allclose(full, streamed, atol=1e-12)

    def test_identity_kernel(self, rng):
        comp = CompressionModule(2, 1).double()
        comp.set_identity()
        e = torch.from_numpy(rng.standard_normal((1, 4, 9, 5)))
        with torch.no_grad():
            assert torch.allclose(comp(e), e, atol=1e-12)

    def test_identity_requires_p1(self):
        with pytest.raises(ConfigError):
            CompressionModule(2, 2).set_identity()


class TestMerge:
    def test_empty_window_passes_through_bit_exact(self, rng):
        merge = MergeModule(8, 4, 2)
        token = torch.from_numpy(rng.standard_normal((1, 9, 8))).float()
        assert merge.merge_step(token, []) is token

    def test_offline_pass_through_before_first_hint(self, rng):
        # with delay >= T no hint is ever usable: output must equal input
        merge = MergeModule(8, 4, 2).double()
        z = torch.from_numpy(rng.standard_normal((1, 6, 9, 8)))
        hints = torch.from_numpy(rng.standard_normal((1, 4, 9, 6)))
        with torch.no_grad():
            out = merge.forward_offline(z, shift_embeddings(hints, 10), 10, 3)
        assert torch.equal(out, z)

    def test_offline_respects_window(self, rng):
        # perturbing hint m changes outputs only for chunks in [m+C, m+C+V]
        merge = MergeModule(8, 4, 2).double()
        t, c, v, m = 16, 2, 3, 5
        z = torch.from_numpy(rng.standard_normal((1, t, 9, 8)))
        hints = torch.from_numpy(rng.standard_normal((1, 4, 9, t)))
        with torch.no_grad():
            base = merge.forward_offline(z, shift_embeddings(hints, c), c, v)
            hints2 = hints.clone()
            hints2[..., m] += 1.0
            out2 = merge.forward_offline(z, shift_embeddings(hints2, c), c, v)
        diff = (base - out2).abs().amax(dim=(0, 2, 3))
        changed = torch.nonzero(diff > 0).flatten().tolist()
        assert changed
        assert min(changed) >= m + c
        assert max(changed) <= m + c + v


def test_boosted_offline_matches_stream(rng):
    torch.manual_seed(3)
    c = 2
    joint = JointModel(SMALL, LARGE, ratio=2, task="se",
                       merge=MergeConfig(context_len=3, heads=2)).eval()
    spec = _spec(rng, t=14)
    with torch.no_grad():
        offline = joint(spec, c)
        hints = joint.hints_offline(spec)
        stream = BoostedStream(joint.small, c)
        comp_outs = [hints[..., i] for i in range(14)]
        frames = []
        for i in range(14):
            delivered = [(i - c, comp_outs[i - c])] if i - c >= 0 else []
            frames.append(stream.step(i, spec[..., i : i + 1], delivered))
        streamed = torch.cat(frames, dim=-1)
    rel = (offline - streamed).abs().max() / offline.abs().max()
    assert rel < 1e-5


def test_stream_underrun_is_a_fault(rng):
    joint = JointModel(SMALL, LARGE, ratio=2, task="se",
                       merge=MergeConfig(context_len=3, heads=2)).eval()
    stream = BoostedStream(joint.small, 2)
    spec = _spec(rng, t=1)
    hint = torch.zeros(1, 2, 9)
    with torch.no_grad():
        with pytest.raises(ProtocolFault):
            stream.step(0, spec, [(5, hint)])


def test_joint_model_k_mismatch():
    with pytest.raises(ConfigError):
        JointModel(SMALL, GridConfig(d=8, b=2, h=4, l=2, attention=False, k=4), 1)


def test_fault_injection_hints_differ(rng):
    joint = JointModel(SMALL, LARGE, ratio=1, task="se",
                       merge=MergeConfig(context_len=3, heads=2)).eval()
    spec = _spec(rng, t=14)
    with torch.no_grad():
        causal = joint.hints_offline(spec, causal_attention=True)
        unmasked = joint.hints_offline(spec, causal_attention=False)
    assert not torch.allclose(causal, unmasked)


def test_hint_wire_format_round_trip(rng):
    values = rng.standard_normal((4, 97)).astype(np.float32)
    blob = boost.pack_hint(17, 2, values)
    chunk, ratio, back = boost.unpack_hint(blob)
    assert (chunk, ratio) == (17, 2)
    assert np.array_equal(back, values)
    assert len(blob) * 8 == boost.hint_wire_overhead_bits() + values.size * 32


def test_hint_wire_overhead_is_nine_bytes():
    assert boost.hint_wire_overhead_bits() == 72

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdkv.errors import FormatError, ShapeError, TruncationError
from rdkv.quantizer import dequantize_unit, quantize_unit
from rdkv.trizone import (
    PACKED_MAGIC,
    KZone,
    PackedSegment,
    append_new_token,
    build_trizone,
    dense_decode,
    dense_reconstruction,
    fused_k_logits,
    pack_bits,
    packed_decode_step,
    packed_from_bytes,
    packed_to_bytes,
    storage_report,
    unpack_bits,
    unpack_cache,
)

WIDTHS = np.array([0, 2, 4, 8, 16])


def mixed_head(seed, T=40, d=16, v_choices=WIDTHS, k_choices=WIDTHS):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((T, d)).astype(np.float32)
    v = rng.standard_normal((T, d)).astype(np.float32)
    alloc = SimpleNamespace(v_bits=rng.choice(v_choices, T), k_bits=rng.choice(k_choices, d))
    return k, v, alloc


def rel_err(got, ref):
    return np.abs(got - ref).max() / np.abs(ref).max()


class TestPacking:
    def test_quarter_split_byte(self):
        assert pack_bits([1, 2, 3, 0], 2).tolist() == [0x39]

    def test_half_split_byte(self):
        assert pack_bits([0xA, 0x3], 4).tolist() == [0x3A]

    def test_bytes_are_direct(self):
        assert pack_bits([7, 255], 8).tolist() == [7, 255]

    def test_padding_to_byte(self):
        packed = pack_bits([3, 3, 3, 3, 1], 2)
        assert packed.tolist() == [0xFF, 0x01]
        assert unpack_bits(packed, 2, 5).tolist() == [3, 3, 3, 3, 1]

    def test_overflow(self):
        with pytest.raises(OverflowError):
            pack_bits([4], 2)
        with pytest.raises(OverflowError):
            pack_bits([-1], 8)

    def test_unsupported_width(self):
        with pytest.raises(ValueError):
            pack_bits([1], 3)

    def test_logical_length_too_long(self):
        with pytest.raises(ShapeError):
            unpack_bits(np.zeros(2, np.uint8), 4, 5)

    @settings(max_examples=100, deadline=None)
    @given(bits=st.sampled_from([2, 4, 8]), n=st.integers(0, 70), rows=st.integers(1, 4),
           seed=st.integers(0, 2**32 - 1))
    def test_roundtrip(self, bits, n, rows, seed):
        codes = np.random.default_rng(seed).integers(0, 2 ** bits, (rows, n))
        packed = pack_bits(codes, bits)
        assert packed.shape == (rows, -(-n * bits // 8))
        np.testing.assert_array_equal(unpack_bits(packed, bits, n), codes)


class TestBuild:
    def test_all_full_precision(self):
        k, v, _ = mixed_head(0, T=12, d=8)
        alloc = SimpleNamespace(v_bits=np.full(12, 16), k_bits=np.full(8, 16))
        tz = build_trizone(k, v, alloc)
        assert tz.v_segments == () and tz.k_zone.segments == ()
        np.testing.assert_array_equal(tz.zone_b, v)
        np.testing.assert_array_equal(tz.zone_b_index, np.arange(12))

    def test_odd_channel_count_is_padded(self):
        k, v, _ = mixed_head(1, T=9, d=7)
        alloc = SimpleNamespace(v_bits=np.full(9, 4), k_bits=np.full(7, 4))
        tz = build_trizone(k, v, alloc)
        (kseg,) = tz.k_zone.segments
        assert kseg.pad_count == 1 and kseg.padded_len == 8
        assert kseg.payload.shape == (9, 4)
        assert kseg.scale[-1] == 0.0 and kseg.zero[-1] == 0
        (vseg,) = tz.v_segments
        assert vseg.rows == 9          # token axis is never padded

    @pytest.mark.parametrize("bits,per_byte", [(2, 4), (4, 2), (8, 1)])
    def test_payload_sizes(self, bits, per_byte):
        k, v, _ = mixed_head(2, T=5, d=10)
        tz = build_trizone(k, v, SimpleNamespace(v_bits=np.full(5, bits), k_bits=np.full(10, bits)))
        (seg,) = tz.k_zone.segments
        assert seg.padded_len % per_byte == 0
        assert seg.payload.shape[1] == -(-seg.padded_len // per_byte)
        if bits == 8:
            assert seg.pad_count == 0

    def test_segment_order_and_permutation(self):
        k, v, alloc = mixed_head(3, T=30, d=16)
        tz = build_trizone(k, v, alloc)
        widths = [s.bits for s in tz.k_zone.segments]
        assert widths == sorted(widths)
        kept_ch = np.flatnonzero(alloc.k_bits > 0)
        assert sorted(tz.permutation.tolist()) == kept_ch.tolist()
        for seg in tz.k_zone.segments:
            assert seg.index.tolist() == sorted(seg.index.tolist())

    def test_every_kept_v_in_one_zone(self):
        k, v, alloc = mixed_head(4)
        tz = build_trizone(k, v, alloc)
        in_a = np.concatenate([s.index for s in tz.v_segments] or [np.zeros(0, int)])
        in_b = tz.zone_b_index
        assert not set(in_a) & set(in_b)
        assert sorted(np.concatenate([in_a, in_b]).tolist()) == tz.kept.tolist()

    def test_matches_direct_unit_quantization(self):
        k, v, alloc = mixed_head(5, T=48, d=16)
        kept, k_ref, v_ref = dense_reconstruction(k, v, alloc)
        k_hat, v_hat = unpack_cache(build_trizone(k, v, alloc))
        np.testing.assert_array_equal(k_hat, k_ref)
        np.testing.assert_array_equal(v_hat, v_ref)
        # and spot-check one unit against the scalar quantizer
        t = kept[np.flatnonzero(alloc.v_bits[kept] == 4)[0]] if (alloc.v_bits[kept] == 4).any() else None
        if t is not None:
            codes, p = quantize_unit(v[t], 4)
            np.testing.assert_array_equal(v_hat[np.searchsorted(kept, t)], dequantize_unit(codes, p))

    def test_token_k_and_v_in_different_zones(self):
        k, v, _ = mixed_head(6, T=6, d=8)
        alloc = SimpleNamespace(v_bits=np.array([16, 16, 2, 2, 8, 0]), k_bits=np.array([2, 2, 4, 4, 8, 8, 16, 0]))
        tz = build_trizone(k, v, alloc)
        assert 0 in tz.zone_b_index.tolist()
        assert tz.kept.tolist() == [0, 1, 2, 3, 4]
        assert tz.k_zone.full.shape == (5, 1)

    def test_inconsistent_allocation(self):
        k, v, _ = mixed_head(7, T=4, d=4)
        with pytest.raises(ShapeError):
            build_trizone(k, v, SimpleNamespace(v_bits=np.full(5, 16), k_bits=np.full(4, 16)))
        with pytest.raises(ValueError):
            build_trizone(k, v, SimpleNamespace(v_bits=np.full(4, 6), k_bits=np.full(4, 16)))


class TestFusedLogits:
    def test_one_channel_identity(self):
        seg = PackedSegment(bits=4, payload=pack_bits([[3]], 4), logical_len=1,
                            scale=np.array([2.0, 0.0]), zero=np.array([1, 0]), pad_count=1,
                            index=np.array([0]))
        zone = KZone((seg,), np.zeros((1, 0)), np.zeros(0, int), np.array([0]))
        assert fused_k_logits([0.5], zone)[0] == pytest.approx(2.0)

    def test_padded_channel_contributes_nothing(self):
        k, v, _ = mixed_head(8, T=10, d=3)
        tz = build_trizone(k, v, SimpleNamespace(v_bits=np.full(10, 8), k_bits=np.full(3, 2)))
        (seg,) = tz.k_zone.segments
        assert seg.pad_count == 1
        # corrupt the padded code slot; the result must not change
        payload = seg.payload.copy()
        payload[:, 0] |= np.uint8(0b11 << 6)
        tampered = PackedSegment(seg.bits, payload, seg.logical_len, seg.scale, seg.zero,
                                 seg.pad_count, seg.index)
        q = np.random.default_rng(0).standard_normal(3)
        zone2 = KZone((tampered,), tz.k_zone.full, tz.k_zone.full_index, tz.k_zone.permutation)
        np.testing.assert_array_equal(fused_k_logits(q, tz.k_zone), fused_k_logits(q, zone2))

    def test_random_head_matches_naive(self):
        rng = np.random.default_rng(9)
        k, v, alloc = mixed_head(9, T=64, d=64, k_choices=np.array([2, 4, 8, 16, 0]))
        alloc.v_bits[:] = 8
        alloc.v_bits[rng.choice(64, 24, replace=False)] = 0
        tz = build_trizone(k, v, alloc)
        assert tz.kept.size == 40
        k_hat, _ = unpack_cache(tz)
        q = rng.standard_normal(64)
        naive = k_hat @ q
        assert rel_err(fused_k_logits(q, tz.k_zone), naive) < 1e-5


class TestDecode:
    def test_identity_allocation(self):
        k, v, _ = mixed_head(10, T=32, d=16)
        tz = build_trizone(k, v, SimpleNamespace(v_bits=np.full(32, 16), k_bits=np.full(16, 16)))
        q = np.random.default_rng(0).standard_normal(16)
        np.testing.assert_allclose(packed_decode_step(q, tz), dense_decode(q, k, v), rtol=1e-6, atol=1e-12)

    def test_only_zone_c(self):
        k, v, _ = mixed_head(11, T=8, d=4)
        tz = build_trizone(k, v, SimpleNamespace(v_bits=np.zeros(8, int), k_bits=np.full(4, 8)))
        rng = np.random.default_rng(1)
        nk, nv = rng.standard_normal((2, 3, 4)).astype(np.float32)
        for i in range(3):
            tz = append_new_token(tz, nk[i], nv[i])
        q = rng.standard_normal(4)
        a = np.exp(nk @ q / 2.0)
        np.testing.assert_allclose(packed_decode_step(q, tz), (a / a.sum()) @ nv, rtol=1e-10)

    def test_mixed_with_appended_tokens(self):
        k, v, alloc = mixed_head(12, T=64, d=32)
        tz = build_trizone(k, v, alloc)
        _, k_hat, v_hat = dense_reconstruction(k, v, alloc)
        rng = np.random.default_rng(2)
        nk, nv = rng.standard_normal((2, 5, 32)).astype(np.float32)
        for i in range(5):
            tz = append_new_token(tz, nk[i], nv[i])
        q = rng.standard_normal(32)
        assert rel_err(packed_decode_step(q, tz), dense_decode(q, k_hat, v_hat, nk, nv)) < 1e-5

    def test_empty_cache(self):
        k, v, _ = mixed_head(13, T=4, d=4)
        tz = build_trizone(k, v, SimpleNamespace(v_bits=np.zeros(4, int), k_bits=np.zeros(4, int)))
        with pytest.raises(ValueError):
            packed_decode_step(np.ones(4), tz)

    def test_query_dimension(self):
        k, v, alloc = mixed_head(14, T=8, d=4)
        with pytest.raises(ShapeError):
            packed_decode_step(np.ones(5), build_trizone(k, v, alloc))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 50), d=st.integers(1, 20), n_new=st.integers(0, 4))
    def test_matches_dense_oracle(self, seed, T, d, n_new):
        k, v, alloc = mixed_head(seed, T=T, d=d)
        tz = build_trizone(k, v, alloc)
        _, k_hat, v_hat = dense_reconstruction(k, v, alloc)
        rng = np.random.default_rng(seed + 1)
        nk, nv = rng.standard_normal((2, n_new, d)).astype(np.float32)
        for i in range(n_new):
            tz = append_new_token(tz, nk[i], nv[i])
        if tz.kept.size + n_new == 0:
            return
        q = rng.standard_normal(d)
        ref = dense_decode(q, k_hat, v_hat, nk, nv)
        np.testing.assert_allclose(packed_decode_step(q, tz), ref, rtol=1e-5, atol=1e-6 * np.abs(ref).max())


class TestAppend:
    def test_three_appends(self):
        k, v, alloc = mixed_head(15, T=20, d=8)
        base = build_trizone(k, v, alloc)
        q = np.random.default_rng(3).standard_normal(8)
        before = packed_decode_step(q, base)
        tz = base
        for i in range(3):
            tz = append_new_token(tz, np.full(8, i, np.float32), np.full(8, -i, np.float32))
        assert tz.n_new == 3 and base.n_new == 0
        np.testing.assert_array_equal(packed_decode_step(q, base), before)
        assert tz.v_segments is base.v_segments and tz.zone_b is base.zone_b

    def test_new_token_enters_softmax(self):
        k, v, alloc = mixed_head(16, T=20, d=8)
        tz = build_trizone(k, v, alloc)
        q = np.ones(8)
        grown = append_new_token(tz, 100 * np.ones(8), 7 * np.ones(8))
        np.testing.assert_allclose(packed_decode_step(q, grown), 7.0, rtol=1e-6)

    def test_interleaved_matches_growing_reference(self):
        k, v, alloc = mixed_head(17, T=30, d=8)
        tz = build_trizone(k, v, alloc)
        _, k_hat, v_hat = dense_reconstruction(k, v, alloc)
        rng = np.random.default_rng(4)
        nk, nv = [], []
        for _ in range(4):
            q = rng.standard_normal(8)
            ref = dense_decode(q, k_hat, v_hat, np.array(nk).reshape(-1, 8), np.array(nv).reshape(-1, 8))
            assert rel_err(packed_decode_step(q, tz), ref) < 1e-5
            new_k, new_v = rng.standard_normal((2, 8)).astype(np.float32)
            nk.append(new_k)
            nv.append(new_v)
            tz = append_new_token(tz, new_k, new_v)

    def test_dimension_mismatch(self):
        k, v, alloc = mixed_head(18, T=4, d=4)
        with pytest.raises(ShapeError):
            append_new_token(build_trizone(k, v, alloc), np.ones(3), np.ones(4))


class TestStorage:
    def test_report(self):
        k, v, _ = mixed_head(19, T=10, d=6)
        alloc = SimpleNamespace(v_bits=np.array([2] * 5 + [16] * 5), k_bits=np.array([4, 4, 4, 16, 0, 0]))
        rep = storage_report(build_trizone(k, v, alloc))
        # V: 5 rows x ceil(6/4)=2 bytes; K: 10 rows x ceil(3/2)=2 bytes
        assert rep.packed_bytes == 5 * 2 + 10 * 2
        # 16-bit K channel (10 values) + Zone B (5 x 6), two bytes each
        assert rep.full_precision_bytes == 2 * (10 + 30)
        assert rep.padding_bytes == 5 * 2 * 2 / 8 + 10 * 1 * 4 / 8
        assert rep.cache_bytes == 30 + 80
        assert rep.zone_c_bytes == 0

    def test_never_exceeds_budget_plus_padding(self):
        k, v, alloc = mixed_head(20, T=64, d=16)
        rep = storage_report(build_trizone(k, v, alloc))
        kept = (alloc.v_bits > 0).sum()
        budget_bytes = (16 * alloc.v_bits.sum() + kept * alloc.k_bits.sum()) / 8
        assert rep.cache_bytes <= budget_bytes + rep.padding_bytes + 1e-9


class TestContainer:
    def test_roundtrip(self, tmp_path):
        caches = {}
        for i, key in enumerate([(0, 0), (0, 1), (1, 0)]):
            k, v, alloc = mixed_head(21 + i, T=20, d=8)
            caches[key] = append_new_token(build_trizone(k, v, alloc), np.ones(8), np.ones(8))
        blob = packed_to_bytes(caches)
        assert blob[:8] == PACKED_MAGIC
        back = packed_from_bytes(blob)
        assert sorted(back) == sorted(caches)
        q = np.random.default_rng(5).standard_normal(8)
        for key in caches:
            np.testing.assert_array_equal(packed_decode_step(q, back[key]), packed_decode_step(q, caches[key]))
        assert packed_to_bytes(back) == blob

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            packed_from_bytes(b"NOTMAGIC" + b"\0" * 8)

    def test_truncated_blob(self):
        k, v, alloc = mixed_head(25, T=8, d=4)
        blob = packed_to_bytes({(0, 0): build_trizone(k, v, alloc)})
        with pytest.raises(TruncationError):
            packed_from_bytes(blob[:-3])

"""Packed storage round trips and integer GEMM exactness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hbl import kernels, quant, tensor
from hbl.errors import (
    AccumulatorOverflowError,
    BadMagicError,
    CodeOutOfRangeError,
    NonTernaryValueError,
    ShapeMismatchError,
)


class TestTritPacking:
    def test_hand_packed_byte(self):
        p = kernels.pack_trits(tensor.from_values([1, 4], [1, -1, 0, 1]))
        assert list(p.data) == [146]  # 2 | 0<<2 | 1<<4 | 2<<6

    def test_zeros_pack_to_0x55(self):
        p = kernels.pack_trits(tensor.from_values([1, 8], [0] * 8))
        assert list(p.data) == [0x55, 0x55]

    def test_density(self):
        p = kernels.pack_trit_array(np.zeros((13, 7), dtype=np.int8))
        assert len(p.data) == (13 * 7 + 3) // 4

    def test_rejects_non_ternary(self):
        with pytest.raises(NonTernaryValueError):
            kernels.pack_trits(tensor.from_values([1, 2], [2, 0]))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(
            np.int8,
            st.tuples(st.integers(1, 9), st.integers(1, 17)),
            elements=st.integers(-1, 1),
        )
    )
    def test_round_trip(self, m):
        assert np.array_equal(kernels.pack_trit_array(m).unpack(), m)

    def test_round_trip_64x64(self):
        rng = np.random.default_rng(0)
        m = rng.integers(-1, 2, size=(64, 64)).astype(np.int8)
        assert np.array_equal(kernels.pack_trit_array(m).unpack(), m)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        m = rng.integers(-1, 2, size=(5, 11)).astype(np.int8)
        p = kernels.pack_trit_array(m)
        p.save(tmp_path / "w.bnt")
        loaded = kernels.PackedTritMatrix.load(tmp_path / "w.bnt")
        assert loaded == p
        with pytest.raises(BadMagicError):
            kernels.PackedInt4Matrix.load(tmp_path / "w.bnt")


class TestInt4Packing:
    def test_hand_packed_byte(self):
        p = kernels.pack_int4(tensor.from_values([1, 2], [-4, 7]))
        assert list(p.data) == [124]  # 0xC | 7<<4

    def test_zero_byte(self):
        p = kernels.pack_int4(tensor.from_values([1, 2], [0, 0]))
        assert list(p.data) == [0]

    def test_density(self):
        p = kernels.pack_int4_array(np.zeros((9, 5), dtype=np.int8))
        assert len(p.data) == (9 * 5 + 1) // 2

    def test_rejects_out_of_range(self):
        with pytest.raises(CodeOutOfRangeError):
            kernels.pack_int4(tensor.from_values([1, 2], [8, 0]))
        with pytest.raises(CodeOutOfRangeError):
            kernels.pack_int4(tensor.from_values([1, 2], [1.5, 0]))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(
            np.int8,
            st.tuples(st.integers(1, 9), st.integers(1, 17)),
            elements=st.integers(-8, 7),
        )
    )
    def test_round_trip(self, m):
        assert np.array_equal(kernels.pack_int4_array(m).unpack(), m)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        m = rng.integers(-8, 8, size=(6, 7)).astype(np.int8)
        p = kernels.pack_int4_array(m)
        p.save(tmp_path / "x.bnt")
        assert kernels.PackedInt4Matrix.load(tmp_path / "x.bnt") == p


def _quantize(x: np.ndarray, act_bits: int) -> quant.QuantizedActivation:
    t = tensor.Tensor.from_array(x)
    return quant.quantize_act_int8(t) if act_bits == 8 else quant.quantize_act_int4(t)


class TestGemm:
    def test_hand_dot_product(self):
        w = kernels.pack_trit_array(np.array([[1, -1, 0]], dtype=np.int8))
        xq = quant.QuantizedActivation(
            n_tokens=1,
            width=3,
            mode=quant.ActMode.INT8,
            codes=np.array([[3, -2, 5]], dtype=np.int8),
            scale_per_token=np.array([127.0], dtype=np.float32),  # step = 1
        )
        y = kernels.gemm_ternary_int(w, xq, alpha=1.0)
        assert y.data.tolist() == [[5.0]]

    def test_zero_weights_annihilate(self):
        rng = np.random.default_rng(3)
        w = kernels.pack_trit_array(np.zeros((4, 8), dtype=np.int8))
        xq = _quantize(rng.standard_normal((5, 8)).astype(np.float32), 8)
        y = kernels.gemm_ternary_int(w, xq, alpha=2.5)
        assert not y.data.any()

    @pytest.mark.parametrize("act_bits", [4, 8])
    def test_matches_reference_on_dequantized_operands(self, act_bits):
        rng = np.random.default_rng(act_bits)
        trits = rng.integers(-1, 2, size=(16, 32)).astype(np.int8)
        alpha = 0.37
        x = rng.standard_normal((9, 32)).astype(np.float32)
        xq = _quantize(x, act_bits)
        y = kernels.gemm_ternary_int(kernels.pack_trit_array(trits), xq, alpha)
        wd = tensor.Tensor.from_array(np.float32(alpha) * trits.astype(np.float32))
        ref = kernels.gemm_reference(wd, quant.dequantize(xq))
        scale = max(np.max(np.abs(ref.data)), 1e-6)
        assert np.max(np.abs(y.data - ref.data)) / scale < 1e-5

    def test_inner_dim_mismatch(self):
        w = kernels.pack_trit_array(np.zeros((2, 4), dtype=np.int8))
        xq = _quantize(np.zeros((1, 8), dtype=np.float32), 8)
        with pytest.raises(ShapeMismatchError):
            kernels.gemm_ternary_int(w, xq, 1.0)

    def test_kv_mode_rejected(self):
        w = kernels.pack_trit_array(np.zeros((2, 4), dtype=np.int8))
        qa = quant.quantize_kv_unsigned(
            tensor.from_values([1, 4], [1, -1, 0.5, 0.25]), 4
        )
        with pytest.raises(ShapeMismatchError):
            kernels.gemm_ternary_int(w, qa, 1.0)

    def test_accumulator_overflow_guard(self):
        k = kernels.MAX_GEMM_K + 4
        w = kernels.pack_trit_array(np.zeros((1, k), dtype=np.int8))
        xq = quant.QuantizedActivation(
            n_tokens=1,
            width=k,
            mode=quant.ActMode.INT8,
            codes=np.zeros((1, k), dtype=np.int8),
            scale_per_token=np.ones(1, dtype=np.float32),
        )
        with pytest.raises(AccumulatorOverflowError):
            kernels.gemm_ternary_int(w, xq, 1.0)


class TestGemmReference:
    def test_identity(self):
        x = tensor.from_values([2, 3], [1, 2, 3, 4, 5, 6])
        eye = tensor.Tensor.from_array(np.eye(3, dtype=np.float32))
        y = kernels.gemm_reference(eye, x)
        assert np.array_equal(y.data, x.data)

    def test_1x1(self):
        y = kernels.gemm_reference(
            tensor.from_values([1, 1], [2.0]), tensor.from_values([1, 1], [3.0])
        )
        assert y.data.tolist() == [[6.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            kernels.gemm_reference(
                tensor.from_values([1, 2], [1, 2]), tensor.from_values([1, 3], [1, 2, 3])
            )


class TestBench:
    def test_bytes_accounting(self):
        r8 = kernels.bench_gemm(8, 16, 32, act_bits=8, iters=2, seed=0)
        r4 = kernels.bench_gemm(8, 16, 32, act_bits=4, iters=2, seed=0)
        assert r8.activation_bytes == 8 * 32
        assert r4.activation_bytes == r8.activation_bytes // 2
        assert r8.weight_bytes == (16 * 32 + 3) // 4
        assert len(r8.seconds_per_iter) == 2
        assert np.isfinite(r8.checksum)

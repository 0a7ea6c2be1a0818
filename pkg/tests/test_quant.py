"""Quantizer contracts: worked examples bit-exact, bounds, and properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbl import hadamard, quant, tensor
from hbl.errors import BadBitWidthError, ShapeMismatchError

F32 = np.float32


class TestRoundClip:
    def test_basic(self):
        out = quant.round_clip(tensor.from_values([2], [1.4, -1.6]), -1, 1)
        assert out.data.tolist() == [1.0, -1.0]

    def test_clamp(self):
        out = quant.round_clip(tensor.from_values([1], [2.7]), -1, 1)
        assert out.data.tolist() == [1.0]

    def test_ties_half_to_even(self):
        out = quant.round_clip(tensor.from_values([3], [0.5, 1.5, -0.5]), -8, 7)
        assert out.data.tolist() == [0.0, 2.0, -0.0]

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            quant.round_clip(tensor.from_values([1], [0.0]), 1, 1)


class TestWeightQuant:
    def test_worked_example(self):
        w = tensor.from_values([2, 2], [0.4, -1.2, 0.8, 0.0])
        tw = quant.quantize_weight(w)
        assert F32(tw.alpha) == F32(np.mean(np.abs(w.data)))
        assert F32(tw.alpha) == F32(0.6)
        assert tw.trit_matrix().tolist() == [[1, -1], [1, 0]]
        deq = quant.dequantize_weight(tw)
        expect = F32(0.6) * np.array([[1, -1], [1, 0]], dtype=np.float32)
        assert np.array_equal(deq.data, expect)

    def test_all_zero(self):
        tw = quant.quantize_weight(tensor.from_values([2, 2], [0, 0, 0, 0]))
        assert tw.alpha == 0.0
        assert not tw.trit_matrix().any()

    @pytest.mark.parametrize("c", [0.37, 1.0, 5.0])
    def test_single_entry(self, c):
        tw = quant.quantize_weight(tensor.from_values([1, 1], [c]))
        assert tw.alpha == pytest.approx(c, rel=1e-6)
        assert tw.trit_matrix().tolist() == [[1]]
        assert quant.dequantize_weight(tw).data[0, 0] == F32(c)

    def test_requires_2d(self):
        with pytest.raises(ShapeMismatchError):
            quant.quantize_weight(tensor.from_values([4], [1, 2, 3, 4]))

    def test_idempotence(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = rng.standard_normal((4, 8)).astype(np.float32) * rng.uniform(0.01, 10)
            tw = quant.quantize_weight(tensor.Tensor.from_array(w))
            deq = quant.dequantize_weight(tw)
            tw2 = quant.quantize_weight(deq)
            assert np.array_equal(tw.trit_matrix(), tw2.trit_matrix())
            assert F32(tw2.alpha) == F32(np.mean(np.abs(deq.data)))

    def test_scale_equivariance_of_trits(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.standard_normal((3, 5)).astype(np.float32)
            c = float(rng.uniform(0.05, 20.0))
            t1 = quant.quantize_weight(tensor.Tensor.from_array(w))
            t2 = quant.quantize_weight(tensor.Tensor.from_array(w * F32(c)))
            assert np.array_equal(t1.trit_matrix(), t2.trit_matrix())
            assert t2.alpha == pytest.approx(c * t1.alpha, rel=1e-5)


class TestInt8Quant:
    def test_worked_example(self):
        x = tensor.from_values([1, 4], [2.0, -1.0, 0.5, -4.0])
        qa = quant.quantize_act_int8(x)
        assert qa.scale_per_token.tolist() == [4.0]
        # 127/4 * 2 = 63.5 rounds to 64 under half-to-even
        assert qa.code_matrix().tolist() == [[64, -32, 16, -127]]
        deq = quant.dequantize(qa).data[0]
        assert np.allclose(deq, [2.0157, -1.0079, 0.5039, -4.0], atol=1e-4)
        assert deq[3] == F32(-4.0)

    def test_all_zero_row(self):
        qa = quant.quantize_act_int8(tensor.from_values([1, 3], [0, 0, 0]))
        assert qa.scale_per_token.tolist() == [0.0]
        assert not qa.code_matrix().any()
        assert not quant.dequantize(qa).data.any()

    @pytest.mark.parametrize("g", [0.001, 1.0, 117.0])
    def test_absmax_maps_to_full_scale(self, g):
        qa = quant.quantize_act_int8(tensor.from_values([1, 1], [g]))
        assert qa.code_matrix().tolist() == [[127]]
        assert quant.dequantize(qa).data[0, 0] == pytest.approx(g, rel=1e-6)

    def test_range_and_error_bound_randomized(self):
        rng = np.random.default_rng(2)
        x = (rng.standard_normal((10_000, 16)) * rng.uniform(0.01, 10, (10_000, 1))).astype(
            np.float32
        )
        qa = quant.quantize_act_int8(tensor.Tensor.from_array(x))
        codes = qa.code_matrix()
        assert codes.min() >= -128 and codes.max() <= 127
        err = np.abs(quant.dequantize(qa).data - x)
        bound = qa.scale_per_token[:, None] / 254.0 + 1e-5
        assert np.all(err <= bound)


class TestInt4Quant:
    def test_worked_example(self):
        x = tensor.from_values([1, 4], [1, -2, 3, -4])
        qa = quant.quantize_act_int4(x)
        assert qa.scale_per_token.tolist() == [2.5]
        assert qa.code_matrix().tolist() == [[1, -2, 3, -4]]
        deq = quant.dequantize(qa).data[0]
        assert np.allclose(deq, [0.9449, -1.8898, 2.8347, -3.7796], atol=1e-4)

    def test_outlier_saturates(self):
        x = tensor.from_values([1, 4], [10.0, 0.1, 0.1, 0.1])
        qa = quant.quantize_act_int4(x)
        assert qa.scale_per_token.tolist() == [pytest.approx(2.575)]
        assert qa.code_matrix()[0, 0] == 7  # 10.27 clamps to the top code

    def test_all_zero_row(self):
        qa = quant.quantize_act_int4(tensor.from_values([1, 3], [0, 0, 0]))
        assert not qa.code_matrix().any()

    def test_range_and_unclamped_error_randomized(self):
        rng = np.random.default_rng(3)
        x = (rng.standard_normal((10_000, 16)) * rng.uniform(0.01, 10, (10_000, 1))).astype(
            np.float32
        )
        qa = quant.quantize_act_int4(tensor.Tensor.from_array(x))
        codes = qa.code_matrix()
        assert codes.min() >= -8 and codes.max() <= 7
        err = np.abs(quant.dequantize(qa).data - x)
        step = qa.scale_per_token[:, None] / np.float32(math.sqrt(7.0))
        unclamped = (codes > -8) & (codes < 7)
        assert np.all(err[unclamped] <= (0.5 * step + 1e-4 * np.abs(x))[unclamped] + 1e-6)

    def test_nibble_packing_round_trip(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((37, 9)).astype(np.float32)
        qa = quant.quantize_act_int4(tensor.Tensor.from_array(x))
        codes = qa.code_matrix()
        assert codes.shape == (37, 9)
        # packed bytes decode back to the identical codes by construction
        assert np.array_equal(qa.codes.unpack(), codes)

    def test_outlier_saturation_beats_rotation(self):
        # one channel 10x the unit scale of the rest: rotated rows quantize
        # with lower MSE
        width, trials = 64, 200
        wins = 0
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            row = rng.standard_normal(width).astype(np.float32)
            row[int(rng.integers(width))] = 10.0 * (1 if rng.random() < 0.5 else -1)
            rot = hadamard.fwht(row[None, :])
            direct = quant.dequantize(
                quant.quantize_act_int4(tensor.Tensor.from_array(row[None, :]))
            ).data
            rotated = quant.dequantize(
                quant.quantize_act_int4(tensor.Tensor.from_array(rot))
            ).data
            mse_direct = float(np.mean((direct - row) ** 2))
            mse_rot = float(np.mean((rotated - rot) ** 2))
            wins += mse_direct > mse_rot
        assert wins >= 0.95 * trials


class TestKvUnsigned:
    def test_worked_example(self):
        x = tensor.from_values([1, 3], [2.0, -2.0, 1.0])
        qa = quant.quantize_kv_unsigned(x, 4)
        assert qa.code_matrix().tolist() == [[15, 0, 12]]  # 16 clamps to 15
        assert np.allclose(quant.dequantize(qa).data[0], [1.75, -2.0, 1.0], atol=1e-6)

    def test_zero_row_maps_to_midpoint(self):
        qa = quant.quantize_kv_unsigned(tensor.from_values([1, 4], [0, 0, 0, 0]), 4)
        assert qa.code_matrix().tolist() == [[8, 8, 8, 8]]
        assert not quant.dequantize(qa).data.any()

    def test_bos_rows_use_8_bits(self):
        rng = np.random.default_rng(5)
        x = tensor.Tensor.from_array(rng.standard_normal((4, 8)).astype(np.float32))
        qa = quant.quantize_kv_unsigned(x, 3, bos_mask=[True, False, False, True])
        assert qa.bits_per_token.tolist() == [8, 3, 3, 8]
        codes = qa.code_matrix()
        assert codes[1].max() <= 7 and codes[2].max() <= 7
        assert codes[0].max() > 7 or codes[3].max() > 7  # 8-bit rows use finer codes

    def test_bad_bit_width(self):
        with pytest.raises(BadBitWidthError):
            quant.quantize_kv_unsigned(tensor.from_values([1, 2], [1, 2]), 5)

    @pytest.mark.parametrize("bits", [3, 4, 8])
    def test_range_and_error_bounds_randomized(self, bits):
        rng = np.random.default_rng(bits)
        x = (rng.standard_normal((10_000, 8)) * rng.uniform(0.01, 5, (10_000, 1))).astype(
            np.float32
        )
        qa = quant.quantize_kv_unsigned(tensor.Tensor.from_array(x), bits)
        codes = qa.code_matrix()
        assert codes.min() >= 0 and codes.max() <= 2**bits - 1
        half = 2.0 ** (bits - 1)
        step = qa.scale_per_token[:, None] / half
        err = np.abs(quant.dequantize(qa).data - x)
        # top-of-range values clamp from 2^b to 2^b - 1: a full step there,
        # half a step everywhere else
        top = codes == 2**bits - 1
        ok = np.where(top, err <= step + 1e-5, err <= 0.5 * step + 1e-5)
        assert ok.all()


class TestSte:
    def test_identity(self):
        up = tensor.from_values([3], [1, 2, 3])
        assert quant.ste_backward(up) is up

    def test_zero(self):
        up = tensor.from_values([1], [0.0])
        assert quant.ste_backward(up).data.tolist() == [0.0]


class TestConfig:
    def test_epsilon_positive(self):
        with pytest.raises(ValueError):
            quant.QuantConfig(epsilon=0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=1e-8, max_value=1e-3))
    def test_custom_epsilon_accepted(self, eps):
        cfg = quant.QuantConfig(epsilon=eps)
        qa = quant.quantize_act_int8(tensor.from_values([1, 2], [1.0, -0.5]), cfg)
        assert qa.code_matrix().tolist() == [[127, -64]]

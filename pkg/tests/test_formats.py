import math

import numpy as np
import pytest

import sparse24 as s
from conftest import random_dense


def bf16_oracle(x: float) -> float:
    """Round-to-nearest-even to an 8-bit mantissa, built from frexp/round
    rather than bit twiddling."""
    if x == 0 or not math.isfinite(x):
        return x
    mant, exp = math.frexp(x)  # mant in [0.5, 1)
    scaled = mant * 256.0  # 8 mantissa bits total (1 implicit + 7 explicit)
    rounded = float(round(scaled))  # Python round = half-to-even
    return math.ldexp(rounded / 256.0, exp)


class TestRounding:
    def test_fp16_exact_value(self):
        assert s.round_to_format(1.0, s.FP16) == 1.0

    def test_int8_saturation(self):
        assert s.round_to_format(130.0, s.INT8) == 127
        assert s.round_to_format(-200.0, s.INT8) == -128

    def test_int8_round_half_even(self):
        assert s.round_to_format(2.5, s.INT8) == 2
        assert s.round_to_format(3.5, s.INT8) == 4

    def test_bf16_against_frexp_oracle(self, rng):
        for x in rng.standard_normal(500) * 10.0 ** rng.integers(-3, 4, 500):
            x = float(np.float32(x))  # rule out double-rounding asymmetry
            got = s.round_to_format(x, s.BF16)
            assert got == bf16_oracle(x), x

    def test_bf16_specific(self):
        got = s.round_to_format(0.1, s.BF16)
        assert got == bf16_oracle(0.1)
        assert got != 0.1  # 0.1 is not representable

    def test_tf32_truncates_low_mantissa_bits(self):
        x = np.float32(1.0) + np.float32(2.0**-20)
        got = np.float32(s.round_to_format(float(x), s.TF32))
        assert got == np.float32(1.0)
        assert int(got.view(np.uint32)) & 0x1FFF == 0

    def test_tf32_keeps_10_bit_mantissa(self):
        x = 1.0 + 2.0**-10
        assert s.round_to_format(x, s.TF32) == x


class TestFormatPairs:
    def test_table_pairs_construct(self):
        assert len(s.ALL_FORMATS) == 6

    def test_disallowed_pair_rejected(self):
        with pytest.raises(s.FormatError):
            s.NumericFormat(s.ElemType.BF16, s.AccType.FP16)
        with pytest.raises(s.FormatError):
            s.NumericFormat(s.ElemType.INT8, s.AccType.FP32)

    def test_sparse_capability(self):
        assert not s.FP32.sparse_capable
        assert all(f.sparse_capable for f in s.ALL_FORMATS if f is not s.FP32)


class TestGemmDense:
    def test_identity_left(self, rng):
        for fmt in s.ALL_FORMATS:
            eye = s.DenseMatrix.from_values(np.eye(4), fmt)
            b = random_dense(rng, 4, 3, fmt)
            out = s.gemm_dense(eye, b, fmt)
            assert np.array_equal(out.data, b.data), fmt

    def test_identity_right(self, rng):
        for fmt in s.ALL_FORMATS:
            a = random_dense(rng, 3, 4, fmt)
            eye = s.DenseMatrix.from_values(np.eye(4), fmt)
            out = s.gemm_dense(a, eye, fmt)
            assert np.array_equal(out.data, a.data), fmt

    def test_zeros_times_ones(self):
        a = s.DenseMatrix.from_values(np.zeros((2, 4)), s.FP32)
        b = s.DenseMatrix.from_values(np.ones((4, 2)), s.FP32)
        assert np.array_equal(s.gemm_dense(a, b).data, np.zeros((2, 2)))

    def test_int8_matches_scalar_triple_loop(self, rng):
        a = random_dense(rng, 3, 4, s.INT8)
        b = random_dense(rng, 4, 2, s.INT8)
        expected = np.zeros((3, 2), dtype=np.int64)
        for i in range(3):
            for j in range(2):
                acc = 0
                for k in range(4):
                    acc += int(a.data[i, k]) * int(b.data[k, j])
                expected[i, j] = acc
        assert np.array_equal(s.gemm_dense(a, b).data, expected)

    def test_int8_linearity(self, rng):
        a = random_dense(rng, 4, 8, s.INT8)
        b1 = s.DenseMatrix.from_values(rng.integers(-60, 60, (8, 4)).astype(float), s.INT8)
        b2 = s.DenseMatrix.from_values(rng.integers(-60, 60, (8, 4)).astype(float), s.INT8)
        bsum = s.DenseMatrix(b1.data + b2.data, s.INT8)
        lhs = s.gemm_dense(a, bsum).data
        rhs = s.gemm_dense(a, b1).data.astype(np.int64) + s.gemm_dense(a, b2).data
        assert np.array_equal(lhs, rhs)

    def test_deterministic(self, rng):
        a = random_dense(rng, 8, 16, s.FP16)
        b = random_dense(rng, 16, 8, s.FP16)
        r1 = s.gemm_dense(a, b)
        r2 = s.gemm_dense(a, b)
        assert np.array_equal(r1.data, r2.data)

    def test_shape_mismatch(self, rng):
        a = random_dense(rng, 2, 3, s.FP32)
        b = random_dense(rng, 4, 2, s.FP32)
        with pytest.raises(s.ShapeError):
            s.gemm_dense(a, b)

    def test_mode_mismatch(self, rng):
        a = random_dense(rng, 2, 4, s.FP16)
        b = random_dense(rng, 4, 2, s.FP16)
        with pytest.raises(s.FormatError):
            s.gemm_dense(a, b, s.BF16)

    def test_fp16_accumulate_rounds_each_step(self):
        # 1 + 2^-13 rounds away in a float16 accumulator but not in float32
        a = s.DenseMatrix.from_values([[1.0, 1.0]], s.FP16)
        b = s.DenseMatrix.from_values([[1.0], [2.0**-13]], s.FP16)
        wide = s.gemm_dense(a, b, s.FP16)
        narrow = s.gemm_dense(
            s.DenseMatrix(a.data, s.FP16_FP16), s.DenseMatrix(b.data, s.FP16_FP16), s.FP16_FP16
        )
        assert wide.data[0, 0] == 1.0 + 2.0**-13
        assert narrow.data[0, 0] == 1.0

import numpy as np
import pytest

import sparse24 as s
from conftest import random_conforming, random_dense


def make_case(rng, m, n, k, fmt, pattern=s.PATTERN_24):
    a = random_conforming(rng, m, k, fmt, pattern)
    sp = s.compress(a, pattern)
    b = random_dense(rng, k, n, fmt)
    return a, sp, b


class TestSpmm:
    def test_selector_rows_pick_rows_of_b(self, rng):
        # each group keeps two 1.0 selectors; output = sum of the selected B rows
        values = np.ones((2, 8), dtype=np.float32)
        meta = np.array(
            [[0, 3, 1, 2, 0, 1, 2, 3], [1, 2, 0, 3, 1, 3, 0, 2]], dtype=np.uint8
        )
        sp = s.SparseNM(16, s.PATTERN_24, values, meta, s.FP16)
        b = random_dense(rng, 16, 8, s.FP16)
        out = s.spmm(sp, b)
        base = np.repeat(np.arange(4) * 4, 2)
        for i in range(2):
            picked = base + meta[i]
            assert np.allclose(out.data[i], b.data[picked].sum(axis=0), atol=1e-3)

    def test_int8_bit_equal_to_dense_oracle(self, rng):
        a, sp, b = make_case(rng, 32, 16, 64, s.INT8)
        assert np.array_equal(s.spmm(sp, b).data, s.gemm_dense(a, b).data)

    def test_float_modes_within_ulp_bound(self, rng):
        for fmt in (s.FP16, s.BF16, s.TF32, s.FP16_FP16):
            a, sp, b = make_case(rng, 16, 8, 32, fmt)
            oracle = s.gemm_dense(a, b, fmt)
            got = s.spmm(sp, b, fmt)
            tol = s.float_tolerance(oracle, 32)
            assert np.max(np.abs(got.data - oracle.data)) <= tol, fmt

    def test_counter_equals_closed_form(self, rng):
        a, sp, b = make_case(rng, 8, 16, 32, s.INT8)
        ctr = s.MultiplyAddCounter()
        s.spmm(sp, b, counter=ctr)
        assert ctr.count == s.spmm_flops(s.GemmShape(8, 16, 32), s.PATTERN_24)
        assert ctr.count == 8 * 16 * 32 // 2

    def test_counter_1_2_pattern(self, rng):
        a, sp, b = make_case(rng, 8, 8, 32, s.TF32, s.PATTERN_12)
        ctr = s.MultiplyAddCounter()
        s.spmm(sp, b, counter=ctr)
        assert ctr.count == 8 * 8 * 32 // 2

    def test_output_independent_of_plan(self, rng):
        a, sp, b = make_case(rng, 32, 24, 64, s.INT8)
        shape = s.GemmShape(32, 24, 64)
        ref = s.spmm(sp, b)
        for tile in [(8, 8, 4), (32, 24, 64), (5, 7, 8)]:
            for threads in (1, 4):
                plan = s.SpmmPlan(shape, tile=tile, threads=threads)
                assert np.array_equal(s.spmm(sp, b, plan=plan).data, ref.data), (tile, threads)

    def test_float_plan_independence(self, rng):
        a, sp, b = make_case(rng, 16, 16, 32, s.FP16)
        shape = s.GemmShape(16, 16, 32)
        ref = s.spmm(sp, b)
        plan = s.SpmmPlan(shape, tile=(4, 4, 8), threads=2)
        oracle = s.gemm_dense(a, b)
        assert np.max(np.abs(s.spmm(sp, b, plan=plan).data - ref.data)) <= s.float_tolerance(
            oracle, 32
        )

    def test_k_multiple_rule(self, rng):
        a, sp, b = make_case(rng, 4, 4, 8, s.FP16)
        with pytest.raises(s.ShapeError):
            s.spmm(sp, b)  # K=8 not a multiple of 16
        a, sp, b = make_case(rng, 4, 4, 16, s.INT8)
        with pytest.raises(s.ShapeError):
            s.spmm(sp, b)  # K=16 not a multiple of 32 for int8

    def test_fp32_has_no_sparse_mode(self, rng):
        a, sp, b = make_case(rng, 4, 4, 16, s.FP32)
        with pytest.raises(s.FormatError):
            s.spmm(sp, b)

    def test_shape_mismatch(self, rng):
        a, sp, _ = make_case(rng, 4, 4, 16, s.FP16)
        b = random_dense(rng, 32, 4, s.FP16)
        with pytest.raises(s.ShapeError):
            s.spmm(sp, b)

    def test_tile_depth_must_align_to_group(self, rng):
        a, sp, b = make_case(rng, 4, 4, 16, s.FP16)
        plan = s.SpmmPlan(s.GemmShape(4, 4, 16), tile=(4, 4, 6))
        with pytest.raises(s.ShapeError):
            s.spmm(sp, b, plan=plan)


class TestFlops:
    def test_closed_form_64(self):
        shape = s.GemmShape(64, 64, 64)
        assert s.spmm_flops(shape, s.PATTERN_24) == 131072
        assert shape.m * shape.n * shape.k == 262144

    def test_1_2_halves_too(self):
        assert s.spmm_flops(s.GemmShape(8, 8, 8), s.PATTERN_12) == 8 * 8 * 8 // 2


class TestBench:
    def test_report_format(self):
        report = s.bench([s.GemmShape(16, 16, 32), s.GemmShape(16, 16, 64)], s.INT8, repeats=2)
        csv_text = report.to_csv()
        lines = csv_text.strip().split("\n")
        assert lines[0] == "M,N,K,dense_ns,sparse_ns,speedup,flops_ratio"
        assert len(lines) == 3
        for row in report.rows:
            assert row.flops_ratio == 2.0
            assert row.dense_ns > 0 and row.sparse_ns > 0

    def test_rejects_bad_k(self):
        with pytest.raises(s.ShapeError):
            s.bench([s.GemmShape(16, 16, 48)], s.INT8, repeats=1)

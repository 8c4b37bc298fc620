import itertools
import math

import numpy as np
import pytest

import sparse24 as s
from conftest import random_dense


def best_group_retained(group, n):
    """Brute-force optimum over all C(m, n) per-group keep choices."""
    return max(sum(abs(group[i]) for i in combo) for combo in itertools.combinations(range(len(group)), n))


class TestPruneMagnitude:
    def test_clear_ordering(self):
        w = s.DenseMatrix.from_values([[5, -1, 0.5, -6]], s.FP32)
        res = s.prune_magnitude(w, s.PATTERN_24)
        assert res.mask.bits.tolist() == [[True, False, False, True]]
        assert res.retained_magnitude == pytest.approx(11.0)
        assert res.lost_magnitude == pytest.approx(1.5)

    def test_tie_keeps_lower_index(self):
        w = s.DenseMatrix.from_values([[1, 1, 1, 1]], s.FP32)
        res = s.prune_magnitude(w, s.PATTERN_24)
        assert res.mask.bits.tolist() == [[True, True, False, False]]

    def test_matches_per_group_enumeration(self, rng):
        w = random_dense(rng, 8, 16, s.FP32)
        res = s.prune_magnitude(w, s.PATTERN_24)
        expected = sum(
            best_group_retained(w.data[r, g : g + 4].tolist(), 2)
            for r in range(8)
            for g in range(0, 16, 4)
        )
        assert res.retained_magnitude == pytest.approx(expected, rel=1e-6)

    def test_retained_plus_lost_is_total(self, rng):
        w = random_dense(rng, 8, 16, s.FP32)
        res = s.prune_magnitude(w, s.PATTERN_24)
        assert res.retained_magnitude + res.lost_magnitude == pytest.approx(
            float(np.abs(w.data).sum()), rel=1e-6
        )

    def test_mask_conforms(self, rng):
        w = random_dense(rng, 8, 16, s.FP32)
        res = s.prune_magnitude(w, s.PATTERN_24)
        res.mask.check(s.PATTERN_24)
        assert s.check_conformance(s.apply_mask(w, res.mask), s.PATTERN_24)


class TestPermutationSearch:
    def test_partition_count_formula(self):
        count = len(list(s.enumerate_group_partitions(8, 4)))
        assert count == math.factorial(8) // (math.factorial(4) ** 2 * math.factorial(2))
        assert count == 35

    def test_exhaustive_visits_all_and_matches_enumeration(self, rng):
        w = random_dense(rng, 8, 8, s.FP32)
        budget = s.SearchBudget(mode="exhaustive")
        perm, res = s.find_permutation(w, s.PATTERN_24, budget)
        assert budget.stats["partitions_visited"] == 35
        best = max(
            s.prune_magnitude(
                s.permute_columns(w, s.Permutation(np.array(order))), s.PATTERN_24
            ).retained_magnitude
            for order in s.enumerate_group_partitions(8, 4)
        )
        assert res.retained_magnitude == pytest.approx(best, rel=1e-9)

    def test_identity_returned_when_already_optimal(self):
        # large values already spread across groups; identity is optimal
        w = s.DenseMatrix.from_values([[9, 8, 0, 0, 7, 6, 0, 0]], s.FP32)
        perm, res = s.find_permutation(w, s.PATTERN_24, s.SearchBudget(mode="exhaustive"))
        baseline = s.prune_magnitude(w, s.PATTERN_24).retained_magnitude
        assert res.retained_magnitude == pytest.approx(baseline)

    def test_greedy_never_worse_than_identity(self, rng):
        for _ in range(50):
            w = random_dense(rng, 8, 8, s.FP32)
            baseline = s.prune_magnitude(w, s.PATTERN_24).retained_magnitude
            _, res = s.find_permutation(w, s.PATTERN_24, s.SearchBudget(mode="greedy", seed=0))
            assert res.retained_magnitude >= baseline - 1e-9

    def test_heavy_tailed_improvement_frequency(self, rng):
        # column permutation usually recovers magnitude lost to the group
        # constraint when values are heavy-tailed
        improved = 0
        trials = 300
        for _ in range(trials):
            vals = rng.standard_t(df=2, size=(8, 8)).astype(np.float32)
            w = s.DenseMatrix.from_values(vals, s.FP32)
            baseline = s.prune_magnitude(w, s.PATTERN_24).retained_magnitude
            _, res = s.find_permutation(w, s.PATTERN_24, s.SearchBudget(mode="exhaustive"))
            if res.retained_magnitude > baseline + 1e-9:
                improved += 1
        assert improved / trials > 0.5


class TestPropagatePermutation:
    def test_identity_perm(self, rng):
        w = random_dense(rng, 8, 4, s.FP32)
        out = s.propagate_permutation(w, s.Permutation.identity(8))
        assert np.array_equal(out.data, w.data)

    def test_inverse_composition(self, rng):
        w = random_dense(rng, 8, 4, s.FP32)
        perm = s.Permutation(rng.permutation(8))
        back = s.propagate_permutation(s.propagate_permutation(w, perm), perm.inverse())
        assert np.array_equal(back.data, w.data)

    def test_two_layer_function_unchanged_float(self, rng):
        w1 = random_dense(rng, 8, 8, s.FP32)
        w2 = random_dense(rng, 4, 8, s.FP32)
        x = random_dense(rng, 8, 5, s.FP32)
        perm = s.Permutation(rng.permutation(8))
        ref = s.gemm_dense(w2, s.gemm_dense(w1, x))
        w2p = s.permute_columns(w2, perm)
        w1p = s.propagate_permutation(w1, perm)
        got = s.gemm_dense(w2p, s.gemm_dense(w1p, x))
        tol = s.float_tolerance(ref, 8)
        assert np.max(np.abs(got.data - ref.data)) <= tol

    def test_two_layer_function_unchanged_int(self, rng):
        w1 = random_dense(rng, 8, 8, s.INT8)
        w2 = random_dense(rng, 4, 8, s.INT8)
        x = random_dense(rng, 8, 5, s.INT8)
        perm = s.Permutation(rng.permutation(8))
        h = s.gemm_dense(w1, x)
        h8 = s.DenseMatrix(np.clip(h.data, -128, 127).astype(np.int32), s.INT8)
        ref = s.gemm_dense(w2, h8)
        w2p = s.permute_columns(w2, perm)
        w1p = s.propagate_permutation(w1, perm)
        hp = s.gemm_dense(w1p, x)
        hp8 = s.DenseMatrix(np.clip(hp.data, -128, 127).astype(np.int32)[:, :], s.INT8)
        got = s.gemm_dense(w2p, hp8)
        assert np.array_equal(got.data, ref.data)

    def test_not_a_bijection_rejected(self):
        with pytest.raises(ValueError):
            s.Permutation(np.array([0, 0, 1]))


def tile_enumeration_oracle():
    """All 4x4 binary matrices with row and column sums 2, by filtering the
    full 2^16 space (independent of the library's candidate table)."""
    masks = []
    for bits in range(1 << 16):
        m = np.array([(bits >> i) & 1 for i in range(16)]).reshape(4, 4)
        if np.all(m.sum(axis=0) == 2) and np.all(m.sum(axis=1) == 2):
            masks.append(m.astype(bool))
    return masks


ORACLE_TILE_MASKS = tile_enumeration_oracle()


class TestTransposableMask:
    def test_90_candidates(self):
        assert len(ORACLE_TILE_MASKS) == 90
        from sparse24.pruning import TILE_MASKS_2OF4

        assert len(TILE_MASKS_2OF4) == 90
        lib = {m.tobytes() for m in TILE_MASKS_2OF4}
        oracle = {m.tobytes() for m in ORACLE_TILE_MASKS}
        assert lib == oracle

    def test_exhaustive_matches_oracle(self, rng):
        for _ in range(25):
            w = random_dense(rng, 4, 4, s.FP32)
            res = s.find_transposable_mask(w, "exhaustive")
            best = max(float(np.abs(w.data)[m].sum()) for m in ORACLE_TILE_MASKS)
            assert res.retained_magnitude == pytest.approx(best, rel=1e-6)

    def test_exhaustive_keeps_dominant_blocks(self):
        w = np.zeros((4, 4), dtype=np.float32)
        w[0, 0] = w[0, 1] = w[1, 0] = w[1, 1] = 10.0
        w[2, 2] = w[2, 3] = w[3, 2] = w[3, 3] = 9.0
        res = s.find_transposable_mask(s.DenseMatrix(w, s.FP32), "exhaustive")
        assert res.retained_magnitude == pytest.approx(76.0)
        assert np.all(res.mask.bits[:2, :2]) and np.all(res.mask.bits[2:, 2:])

    def test_both_axes_valid(self, rng):
        for mode in ("exhaustive", "greedy"):
            w = random_dense(rng, 8, 12, s.FP32)
            res = s.find_transposable_mask(w, mode)
            res.mask.check(s.PATTERN_24)
            s.Mask(np.ascontiguousarray(res.mask.bits.T)).check(s.PATTERN_24)

    def test_greedy_valid_and_reasonable(self, rng):
        for _ in range(25):
            w = random_dense(rng, 4, 4, s.FP32)
            res = s.find_transposable_mask(w, "greedy")
            assert res.mask.bits.sum() == 8
            assert any(np.array_equal(res.mask.bits, m) for m in ORACLE_TILE_MASKS)

    def test_transpose_symmetry(self, rng):
        w = random_dense(rng, 4, 4, s.FP32)
        res = s.find_transposable_mask(w, "exhaustive")
        wt = s.DenseMatrix(np.ascontiguousarray(w.data.T), s.FP32)
        res_t = s.find_transposable_mask(wt, "exhaustive")
        assert res_t.retained_magnitude == pytest.approx(res.retained_magnitude, rel=1e-6)

    def test_dims_must_be_multiples_of_4(self, rng):
        with pytest.raises(s.ShapeError):
            s.find_transposable_mask(random_dense(rng, 4, 6, s.FP32))

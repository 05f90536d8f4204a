import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmae import autograd as ag
from attnmae import masker
from attnmae.autograd import Tensor
from attnmae.masker import (MaskSpec, aggregate_heads, apply_mask,
                            attention_mask_scores, iterative_oracle_mask,
                            keep_top_k, random_mask, round_half_up,
                            sample_mask)
from attnmae.rng import Rng


def softmax_row_oracle(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


class TestRoundHalfUp:
    def test_spec_cases(self):
        assert round_half_up(5.6) == 6
        assert round_half_up(5.5) == 6
        assert round_half_up(5.4) == 5
        assert round_half_up(28 * 0.2) == 6

    @given(st.integers(1, 512), st.sampled_from([0.1, 0.15, 0.2, 0.5, 0.75, 0.85]))
    @settings(max_examples=200, deadline=None)
    def test_matches_decimal_halfup(self, n, r):
        from decimal import ROUND_HALF_UP, Decimal
        got = round_half_up(n * r)
        # oracle: decimal arithmetic on the exact float product
        expect = int(Decimal(n * r).quantize(0, rounding=ROUND_HALF_UP))
        assert got == expect


class TestAggregateHeads:
    def test_single_head_is_row_softmax(self):
        a = Rng(1).normals((1, 4, 7))
        got = aggregate_heads(a)
        assert np.array_equal(got, ag.softmax_rows_data(a[0]))

    def test_uniform_two_heads(self):
        got = aggregate_heads(np.zeros((2, 3, 4)))
        assert np.allclose(got, 0.5)
        assert np.allclose(got.sum(axis=-1), 2.0)

    def test_matches_per_head_oracle(self):
        a = Rng(2).normals((2, 3, 5)) * 2
        got = aggregate_heads(a)
        for q in range(3):
            expect = np.array(softmax_row_oracle(a[0, q])) + \
                np.array(softmax_row_oracle(a[1, q]))
            assert np.allclose(got[q], expect, atol=1e-12)

    def test_rows_sum_to_head_count(self):
        a = Rng(3).normals((4, 6, 9))
        got = aggregate_heads(a)
        assert np.allclose(got.sum(axis=-1), 4.0, atol=1e-11)


class TestKeepTopK:
    def test_keep_all(self):
        assert np.array_equal(keep_top_k(np.array([3.0, 1.0, 2.0]), 3), np.zeros(3))

    def test_keep_none(self):
        out = keep_top_k(np.array([3.0, 1.0, 2.0]), 0)
        assert np.all(np.isneginf(out))

    def test_simple_case(self):
        out = keep_top_k(np.array([3.0, 1.0, 2.0]), 2)
        assert out[0] == 0.0 and np.isneginf(out[1]) and out[2] == 0.0

    def test_tie_break_lowest_index(self):
        out = keep_top_k(np.array([1.0, 1.0, 1.0, 1.0]), 2)
        assert out[0] == 0.0 and out[1] == 0.0
        assert np.isneginf(out[2]) and np.isneginf(out[3])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            keep_top_k(np.zeros(3), 4)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30),
           st.data())
    @settings(max_examples=150, deadline=None)
    def test_property_keeps_exactly_k_largest(self, values, data):
        v = np.array(values)
        k = data.draw(st.integers(0, len(values)))
        out = keep_top_k(v, k)
        kept = np.flatnonzero(out == 0.0)
        assert len(kept) == k
        if 0 < k < len(values):
            dropped = np.flatnonzero(np.isneginf(out))
            assert v[kept].min() >= v[dropped].max() - 1e-12


class TestAttentionMaskScores:
    def test_full_subset_is_column_sums(self):
        s = Rng(4).normals((5, 8))
        got = attention_mask_scores(s, np.arange(5))
        assert np.allclose(got, s.sum(axis=0), atol=1e-12)

    def test_single_query_one_hot(self):
        s = np.eye(3, 4)
        got = attention_mask_scores(s, np.array([1]))
        assert np.array_equal(got, s[1])

    def test_matches_explicit_summation(self):
        s = Rng(5).normals((3, 4))
        got = attention_mask_scores(s, np.array([0, 2]))
        expect = np.array([s[0, j] + s[2, j] for j in range(4)])
        assert np.array_equal(got, expect)

    def test_empty_subset_raises(self):
        with pytest.raises(ValueError):
            attention_mask_scores(np.zeros((3, 4)), np.array([], dtype=int))

    def test_pads_forced_to_neg_inf(self):
        s = np.ones((2, 5))
        pad = np.array([False, False, True, False, True])
        got = attention_mask_scores(s, np.array([0]), pad)
        assert np.isneginf(got[[2, 4]]).all()
        assert np.all(got[[0, 1, 3]] == 1.0)


def spec_invariants_hold(spec: MaskSpec, n: int, pad=None):
    non_pad = np.arange(n) if pad is None else np.flatnonzero(~pad)
    assert np.array_equal(np.union1d(spec.masked, spec.unmasked), non_pad)
    assert len(np.intersect1d(spec.masked, spec.unmasked)) == 0
    assert np.all(np.isneginf(spec.additive[spec.masked]))
    assert np.all(spec.additive[spec.unmasked] == 0.0)


class TestSampleMask:
    def test_mask_count_n28_r02(self):
        scores = Rng(6).normals((2, 4, 28))
        spec = sample_mask(scores, 0.2, Rng(7))
        assert len(spec.masked) == 6
        spec_invariants_hold(spec, 28)

    def test_uniform_attention_masks_lowest_indices(self):
        # all-equal scores: every token ties, so the k lowest indices win
        scores = np.zeros((2, 4, 10))
        spec = sample_mask(scores, 0.3, Rng(8))
        assert np.array_equal(spec.masked, np.arange(3))

    def test_grouped_one_hot_queries_mask_their_group(self):
        # query q attends to its own block of 4 tokens; picking one query
        # must mask exactly that block
        n, l, group = 16, 4, 4
        scores = np.full((1, l, n), -40.0)
        for q in range(l):
            scores[0, q, q * group:(q + 1) * group] = 40.0
        for q in range(l):
            spec = sample_mask(scores, group / n, None, subset=np.array([q]))
            assert np.array_equal(spec.masked, np.arange(q * group, (q + 1) * group))

    def test_depends_only_on_scores_ratio_rng(self):
        scores = Rng(9).normals((2, 6, 20))
        a = sample_mask(scores, 0.25, Rng(10))
        b = sample_mask(scores, 0.25, Rng(10))
        assert np.array_equal(a.masked, b.masked)

    def test_degenerate_ratios_raise(self):
        scores = Rng(11).normals((1, 4, 8))
        with pytest.raises(ValueError):
            sample_mask(scores, 0.01, Rng(12))   # k = 0
        with pytest.raises(ValueError):
            sample_mask(scores, 0.99, Rng(12))   # k = n_eff
        with pytest.raises(ValueError):
            sample_mask(scores, 1.5, Rng(12))

    def test_pads_never_masked(self):
        scores = Rng(13).normals((2, 4, 12))
        pad = np.zeros(12, dtype=bool)
        pad[9:] = True
        scores[:, :, 9:] = 100.0  # pads look maximally attractive
        spec = sample_mask(scores, 0.5, Rng(14), pad=pad)
        assert len(spec.masked) == round_half_up(9 * 0.5)
        assert not np.intersect1d(spec.masked, [9, 10, 11]).size
        spec_invariants_hold(spec, 12, pad)

    def test_column_permutation_equivariance(self):
        scores = Rng(15).normals((2, 5, 14))
        p = Rng(16).permutation(14)
        base = sample_mask(scores, 0.3, Rng(17))
        permuted = sample_mask(scores[:, :, p], 0.3, Rng(17))
        # position j of the permuted input is old position p[j]
        expect = np.sort([int(np.flatnonzero(p == m)[0]) for m in base.masked])
        assert np.array_equal(permuted.masked, np.array(expect))

    def test_subset_size_default_is_round_l_times_r(self):
        # l=10, r=0.3 -> 3 queries; verify by reproducing the stream
        l, n = 10, 40
        scores = Rng(18).normals((1, l, n))
        rng = Rng(19)
        spec = sample_mask(scores, 0.3, rng)
        replay = Rng(19)
        subset = replay.sample_without_replacement(l, 3)
        again = sample_mask(scores, 0.3, None, subset=subset)
        assert np.array_equal(spec.masked, again.masked)


class TestIterativeOracle:
    def test_single_query_equals_keep_top_k(self):
        s = Rng(20).normals((4, 12))
        got = iterative_oracle_mask(s, np.array([2]), 5)
        keep = keep_top_k(s[2], 5)
        assert np.array_equal(got, np.flatnonzero(keep == 0.0))

    def test_disjoint_top_sets_match_sample_mask(self):
        # two queries with disjoint peaks; budgets arranged to match
        n, l, kq = 12, 2, 3
        s = np.full((1, l, n), -30.0)
        s[0, 0, [0, 5, 7]] = 30.0
        s[0, 1, [2, 3, 9]] = 30.0
        subset = np.array([0, 1])
        aggregated = aggregate_heads(s)
        oracle = iterative_oracle_mask(aggregated, subset, kq)
        approx = sample_mask(s, (l * kq) / n, None, subset=subset)
        assert np.array_equal(oracle, approx.masked)
        assert np.array_equal(np.sort(oracle), np.sort([0, 2, 3, 5, 7, 9]))

    def test_duplicate_rows_take_next_ranks(self):
        row = np.array([9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0])
        s = np.stack([row, row])
        got = iterative_oracle_mask(s, np.array([0, 1]), 2)
        # first query takes ranks 1-2, the identical second takes ranks 3-4
        assert np.array_equal(got, np.array([0, 1, 2, 3]))

    def test_budget_overflow_raises(self):
        with pytest.raises(ValueError):
            iterative_oracle_mask(np.zeros((3, 6)), np.arange(3), 3)


class TestRandomMask:
    def test_almost_full_leaves_one(self):
        # 7 of 8 masked: exactly one unmasked index
        spec = random_mask(8, 7 / 8, Rng(21))
        assert len(spec.unmasked) == 1
        spec_invariants_hold(spec, 8)

    def test_reproducible(self):
        a = random_mask(20, 0.4, Rng(22))
        b = random_mask(20, 0.4, Rng(22))
        assert np.array_equal(a.masked, b.masked)

    def test_inclusion_frequency_binomial(self):
        # DERIVED oracle: each index is masked with probability k/n = r;
        # over T draws the frequency is within 3 sigma of r
        n, r, trials = 10, 0.3, 100_000
        rng = Rng(23)
        counts = np.zeros(n)
        for _ in range(trials):
            counts[random_mask(n, r, rng).masked] += 1
        freq = counts / trials
        sigma = math.sqrt(r * (1 - r) / trials)
        assert np.all(np.abs(freq - r) <= 3 * sigma + 1e-12), freq


class TestApplyMask:
    def test_empty_mask_is_plain_softmax(self):
        scores = Tensor(Rng(24).normals((2, 3, 6)))
        empty = MaskSpec(additive=np.zeros(6), masked=np.array([], dtype=np.int64),
                         unmasked=np.arange(6), ratio=0.0)
        got = apply_mask(scores, empty)
        assert np.array_equal(got.data, ag.row_softmax(scores).data)

    def test_masked_columns_exactly_zero(self):
        scores = Tensor(Rng(25).normals((3, 4, 9)))
        spec = sample_mask(scores.data, 0.33, Rng(26))
        got = apply_mask(scores, spec).data
        assert np.all(got[:, :, spec.masked] == 0.0)
        assert np.all(np.abs(got.sum(axis=-1) - 1.0) <= 1e-12)

    def test_two_column_renormalization_oracle(self):
        scores = Tensor(np.array([[[0.3, -1.2, 2.0]]]))
        spec = MaskSpec(additive=np.array([0.0, 0.0, -np.inf]),
                        masked=np.array([2]), unmasked=np.array([0, 1]), ratio=1 / 3)
        got = apply_mask(scores, spec).data[0, 0]
        expect = softmax_row_oracle([0.3, -1.2])
        assert got[2] == 0.0
        assert np.allclose(got[:2], expect, atol=1e-15)

    def test_length_mismatch(self):
        scores = Tensor(np.zeros((1, 2, 5)))
        spec = MaskSpec(additive=np.zeros(4), masked=np.array([0]),
                        unmasked=np.arange(1, 4), ratio=0.25)
        with pytest.raises(ag.ShapeError):
            apply_mask(scores, spec)


class TestMaskCountExactness:
    def test_small_sweep(self):
        # exhaustive count law on a reduced grid (the acceptance suite
        # runs the full one)
        rng = Rng(27)
        for n in (8, 16, 64):
            for r in (0.1, 0.5, 0.85):
                for seed in range(10):
                    scores = rng.normals((2, 4, n))
                    spec = sample_mask(scores, r, Rng(seed))
                    assert len(spec.masked) == round_half_up(n * r)


@pytest.mark.benchmark
def test_sampling_overhead_under_ten_percent_at_4096():
    """Guided sampling adds a head-sum, a top-k, and a softmax on top of
    the first-layer attention; at n=4096 that is under 10% wall time."""
    import time

    from conftest import warm_allocator

    from attnmae import attention as attn

    n, l, d_embed, d_k, d_v, heads = 4096, 64, 64, 512, 512, 8
    params = attn.init_attention("cross", d_embed, d_k, d_v, heads, l, Rng(28))
    xhat = Tensor(Rng(29).normals((n, d_embed)))
    warm_allocator()

    def first_layer(spec):
        scores = attn.attention_map(xhat, params)
        weights = apply_mask(scores, spec)
        attn.attend(weights, attn.value_heads(xhat, params), params.w_o)
        return scores

    with ag.no_grad():
        score_values = first_layer(_empty_spec(n)).data
        fixed = sample_mask(score_values, 0.25, Rng(30))

    def apply_only():
        with ag.no_grad():
            first_layer(fixed)

    def sampling_extra():
        # exactly the work the guided path adds on top of apply-only:
        # head aggregation, score summation, one top-k
        sample_mask(score_values, 0.25, Rng(30))

    def best(fn, reps=7):
        out = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            out = min(out, time.perf_counter() - t0)
        return out

    best(apply_only, 2)
    best(sampling_extra, 2)
    overhead = best(sampling_extra) / best(apply_only)
    assert overhead < 0.10, f"sampling overhead {overhead:.1%}"


def _empty_spec(n):
    return MaskSpec(additive=np.zeros(n), masked=np.array([], dtype=np.int64),
                    unmasked=np.arange(n), ratio=0.0)

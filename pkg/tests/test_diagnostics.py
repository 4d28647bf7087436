import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from carmm.diagnostics import (
    SbcRank,
    coverage_interval_check,
    effective_sample_size,
    rank_statistic,
    read_ranks_csv,
    split_rhat,
    uniform_rank_band,
    write_ranks_csv,
)


class TestRankStatistic:
    def test_counts_strictly_below(self):
        assert rank_statistic([1.0, 2.0, 3.0], 2.5) == 2
        assert rank_statistic([1.0, 2.0, 3.0], 0.0) == 0
        assert rank_statistic([1.0, 2.0, 3.0], 9.0) == 3

    def test_ties_do_not_count(self):
        assert rank_statistic([1.0, 2.0, 2.0, 3.0], 2.0) == 1

    def test_monotone_transform_invariance(self):
        draws = np.array([0.3, -1.2, 2.0, 0.9])
        truth = 0.5
        assert rank_statistic(np.exp(draws), np.exp(truth)) == rank_statistic(draws, truth)

    def test_empty_draws_rejected(self):
        with pytest.raises(ValueError):
            rank_statistic([], 0.0)

    def test_self_consistency_theorem(self):
        # truth and draws from the same distribution: ranks uniform on
        # {0..B}; chi-square over 10^4 replicates
        rng = np.random.default_rng(99)
        B, n_rep = 19, 10_000
        truth = rng.normal(size=(n_rep, 1))
        draws = rng.normal(size=(n_rep, B))
        ranks = (draws < truth).sum(axis=1)
        observed = np.bincount(ranks, minlength=B + 1)
        p = stats.chisquare(observed).pvalue
        assert p > 0.001


class TestSbcRank:
    def test_normalisation(self):
        assert SbcRank("tau", 100, 200).normalized == pytest.approx(100 / 201)

    @pytest.mark.parametrize("rank", [-1, 201])
    def test_out_of_range_rank_rejected(self, rank):
        with pytest.raises(ValueError):
            SbcRank("tau", rank, 200)

    def test_boundary_ranks_allowed(self):
        SbcRank("tau", 0, 200)
        SbcRank("tau", 200, 200)


class TestSplitRhat:
    def test_mixed_chains_near_one(self):
        rng = np.random.default_rng(1)
        chains = rng.normal(size=(4, 1000))
        assert split_rhat(chains) < 1.01

    def test_separated_chains_flagged(self):
        rng = np.random.default_rng(2)
        chains = rng.normal(size=(2, 500))
        chains[1] += 10.0
        assert split_rhat(chains) > 1.5

    def test_within_chain_trend_flagged(self):
        # stationary mean across chains but drifting within: the split
        # construction must catch it
        rng = np.random.default_rng(3)
        trend = np.linspace(-3, 3, 800)
        chains = trend + 0.1 * rng.normal(size=(2, 800))
        assert split_rhat(chains) > 1.2

    def test_constant_chains_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            split_rhat(np.ones((2, 100)))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            split_rhat(np.zeros(100))
        with pytest.raises(ValueError):
            split_rhat(np.random.default_rng(0).normal(size=(1, 100)))

    @given(st.floats(0.1, 50.0), st.floats(-20.0, 20.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance(self, a, b, seed):
        # rank-based, so invariant up to fold-point rounding near the median
        chains = np.random.default_rng(seed).normal(size=(2, 120))
        assert split_rhat(a * chains + b) == pytest.approx(split_rhat(chains), rel=5e-3)


class TestEffectiveSampleSize:
    def test_iid_draws_near_total(self):
        rng = np.random.default_rng(7)
        chains = rng.normal(size=(4, 2500))
        ess = effective_sample_size(chains)
        assert abs(ess - 10_000) < 2000

    def test_ar1_matches_analytic_rate(self):
        rho = 0.9
        rng = np.random.default_rng(11)
        n, m = 20_000, 2
        chains = np.empty((m, n))
        for k in range(m):
            e = rng.normal(size=n)
            x = np.empty(n)
            x[0] = e[0] / np.sqrt(1 - rho**2)
            for t in range(1, n):
                x[t] = rho * x[t - 1] + e[t]
            chains[k] = x
        expected = m * n * (1 - rho) / (1 + rho)
        assert abs(effective_sample_size(chains) - expected) < 0.3 * expected

    def test_never_wildly_exceeds_total(self):
        rng = np.random.default_rng(13)
        # antithetic noise can push ESS above the draw count, but not by
        # orders of magnitude
        chains = rng.normal(size=(2, 400))
        chains[:, 1::2] = -chains[:, ::2]
        assert effective_sample_size(chains) < 2 * 800 / 1e-3

    def test_constant_chains_rejected(self):
        with pytest.raises(ValueError):
            effective_sample_size(np.full((2, 50), 3.3))

    @given(st.floats(0.1, 50.0), st.floats(-20.0, 20.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance(self, a, b, seed):
        chains = np.random.default_rng(seed).normal(size=(2, 150))
        assert effective_sample_size(a * chains + b) == pytest.approx(
            effective_sample_size(chains), rel=1e-6)


class TestUniformRankBand:
    def test_b200_band(self):
        assert uniform_rank_band(200) == (5, 195)

    def test_band_probability_is_near_095(self):
        lo, hi = uniform_rank_band(200)
        assert (hi - lo + 1) / 201 == pytest.approx(0.95, abs=0.003)

    def test_tiny_b_band_spans_everything(self):
        lo, hi = uniform_rank_band(19)
        assert (lo, hi) == (0, 19)

    def test_invalid_quantiles_rejected(self):
        with pytest.raises(ValueError):
            uniform_rank_band(100, 0.9, 0.1)


class TestCoverageIntervalCheck:
    def test_uniform_ranks_cover_at_band_rate(self):
        rng = np.random.default_rng(5)
        ranks = rng.integers(0, 201, size=40_000)
        lo, hi = uniform_rank_band(200)
        expected = (hi - lo + 1) / 201
        assert coverage_interval_check(ranks, n_draws=200) == pytest.approx(
            expected, abs=0.01)

    def test_all_zero_ranks_have_no_coverage(self):
        ranks = [SbcRank("phi", 0, 200) for _ in range(50)]
        assert coverage_interval_check(ranks) == 0.0

    def test_single_median_rank_covered(self):
        assert coverage_interval_check([SbcRank("gamma", 100, 200)]) == 1.0

    def test_mixed_n_draws_rejected(self):
        ranks = [SbcRank("a", 1, 10), SbcRank("b", 1, 20)]
        with pytest.raises(ValueError, match="mixed"):
            coverage_interval_check(ranks)

    def test_plain_array_needs_n_draws(self):
        with pytest.raises(ValueError, match="n_draws"):
            coverage_interval_check(np.array([1, 2, 3]))

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            coverage_interval_check([])


class TestRanksCsv:
    def test_round_trip(self, tmp_path):
        ranks = [SbcRank("gamma", 3, 10), SbcRank("phi[2]", 10, 10), SbcRank("tau", 0, 10)]
        path = tmp_path / "ranks.csv"
        write_ranks_csv(ranks, path)
        assert path.read_text().splitlines()[0] == "parameter,rank,B"
        assert read_ranks_csv(path) == ranks

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "ranks.csv"
        path.write_text("a,b,c\nx,1,2\n")
        with pytest.raises(ValueError, match="header"):
            read_ranks_csv(path)

    def test_empty_body_rejected(self, tmp_path):
        path = tmp_path / "ranks.csv"
        path.write_text("parameter,rank,B\n")
        with pytest.raises(ValueError, match="no ranks"):
            read_ranks_csv(path)

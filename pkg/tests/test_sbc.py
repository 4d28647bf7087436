import dataclasses

import numpy as np
import pytest

from carmm.diagnostics import read_ranks_csv
from carmm.sampler import SamplerConfig
from carmm.sbc import (
    SbcReplicateResult,
    SbcStudyConfig,
    StudyAborted,
    bias_metrics,
    rhat_filter,
    run_study,
    sbc_replicate,
    write_study_outputs,
)
from carmm.sbc import _scenario_templates
from tests.conftest import make_spec

TINY_SAMPLER = SamplerConfig(
    chains=2, iterations=60, warmup_fraction=0.5, thin=1, leapfrog_steps=8
)

TINY_STUDY = SbcStudyConfig(
    rows=3,
    cols=4,
    membership_sizes=(10,),
    replicates=4,
    rank_thin=10,
    rhat_threshold=5.0,
    seed=7,
    sampler=TINY_SAMPLER,
)


@pytest.fixture(scope="module")
def tiny_study_result():
    return run_study(TINY_STUDY)


class TestBiasMetrics:
    def test_hand_case(self):
        bias, abs_bias, rmse = bias_metrics([1.0, 2.0, 3.0], 2.0)
        assert bias == pytest.approx(0.0)
        assert abs_bias == pytest.approx(2.0 / 3.0)
        assert rmse == pytest.approx(np.sqrt(2.0 / 3.0))

    def test_constant_offset(self):
        bias, abs_bias, rmse = bias_metrics(np.full(10, 5.0), 3.0)
        assert (bias, abs_bias, rmse) == (2.0, 2.0, 2.0)

    def test_validation(self):
        with pytest.raises(ValueError, match="non-empty"):
            bias_metrics([], 0.0)
        with pytest.raises(ValueError, match="non-empty"):
            bias_metrics(np.zeros((2, 2)), 0.0)


class TestStudyConfig:
    def test_defaults_are_consistent(self):
        cfg = SbcStudyConfig()
        assert cfg.membership_sizes == (14, 20, 26)
        assert cfg.sampler.n_kept >= cfg.rank_thin

    def test_membership_sizes_coerced_to_ints(self):
        cfg = dataclasses.replace(TINY_STUDY, membership_sizes=(np.int64(10),))
        assert cfg.membership_sizes == (10,)
        assert type(cfg.membership_sizes[0]) is int

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"replicates": 0}, "replicates"),
            ({"rank_thin": 0}, "rank_thin"),
            ({"rank_thin": 5000}, "kept draws"),
            ({"membership_sizes": ()}, "membership_sizes"),
            ({"rhat_threshold": 1.0}, "rhat_threshold"),
            ({"fit_parameterisation": "inverse", "membership_sizes": (26,)}, "m <= n"),
            ({"data_parameterisation": "inverse", "membership_sizes": (26,)}, "m <= n"),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            SbcStudyConfig(**kwargs)


class TestScenarioTemplates:
    def test_fixture_shapes_and_ranges(self):
        cfg = SbcStudyConfig(rows=3, cols=4, membership_sizes=(10, 12), seed=3)
        graph, H, X, offsets = _scenario_templates(cfg)
        assert graph.n == 12
        assert H.m == 12
        H.truncated(10)  # must stay valid at the smaller size
        assert X.shape == (12, 2)
        assert X.min() == pytest.approx(0.0) and X.max() == pytest.approx(1.0)
        assert offsets.shape == (12,)
        assert np.all(offsets >= 1.0)

    def test_deterministic_in_seed(self):
        cfg = SbcStudyConfig(rows=3, cols=4, membership_sizes=(10,), seed=5)
        _, H1, X1, o1 = _scenario_templates(cfg)
        _, H2, X2, o2 = _scenario_templates(cfg)
        np.testing.assert_array_equal(H1.weights, H2.weights)
        np.testing.assert_array_equal(X1, X2)
        np.testing.assert_array_equal(o1, o2)


class TestReplicate:
    def test_rank_accounting_and_determinism(self, grid_3x4, membership_3x4):
        spec, _ = make_spec(grid_3x4, membership_3x4, with_data=False)
        res = sbc_replicate(spec, TINY_SAMPLER, (0, 10, 3), rank_thin=10)
        again = sbc_replicate(spec, TINY_SAMPLER, (0, 10, 3), rank_thin=10)
        B = TINY_SAMPLER.chains * (TINY_SAMPLER.n_kept // 10)
        names = [r.parameter for r in res.ranks]
        n, m = spec.n, spec.m
        assert len(names) == 1 + spec.p + 2 + n + n + m
        assert names[: 1 + spec.p] == ["gamma", "beta[1]", "beta[2]"]
        assert {"alpha", "tau", "phi[1]", f"rho[{n}]", f"rho_tilde[{m}]"} <= set(names)
        for r in res.ranks:
            assert r.n_draws == B
            assert 0 <= r.rank <= B
        assert [(r.parameter, r.rank) for r in res.ranks] == [
            (r.parameter, r.rank) for r in again.ranks
        ]
        assert res.max_rhat == again.max_rhat

    def test_seed_changes_output(self, grid_3x4, membership_3x4):
        spec, _ = make_spec(grid_3x4, membership_3x4, with_data=False)
        a = sbc_replicate(spec, TINY_SAMPLER, (0, 10, 1), rank_thin=10)
        b = sbc_replicate(spec, TINY_SAMPLER, (0, 10, 2), rank_thin=10)
        assert [r.rank for r in a.ranks] != [r.rank for r in b.ranks]

    def test_crossed_data_parameterisation(self, grid_3x4, membership_3x4):
        # data generated at membership level, fit with areal effects
        spec, _ = make_spec(grid_3x4, membership_3x4, with_data=False)
        res = sbc_replicate(
            spec, TINY_SAMPLER, 0, data_parameterisation="inverse", rank_thin=10
        )
        assert any(r.parameter == "rho[1]" for r in res.ranks)
        assert np.isfinite(res.accept_rate)

    def test_bias_groups_cover_all_blocks(self, grid_3x4, membership_3x4):
        spec, _ = make_spec(grid_3x4, membership_3x4, with_data=False)
        res = sbc_replicate(spec, TINY_SAMPLER, 4, rank_thin=10)
        assert set(res.bias) == {
            "gamma", "beta[1]", "beta[2]", "alpha", "tau", "phi", "rho", "rho_tilde"
        }
        for metrics in res.bias.values():
            assert len(metrics) == 3
        assert res.bias["phi"][0].shape == (spec.n,)
        assert np.all(res.bias["rho"][2] >= 0)  # rmse


class TestRhatFilter:
    @staticmethod
    def fake(max_rhat):
        return SbcReplicateResult(
            ranks=[], bias={}, max_rhat=max_rhat, divergences=0, accept_rate=0.9
        )

    def test_splits_on_threshold(self):
        results = [self.fake(1.005), self.fake(1.02), self.fake(np.inf)]
        kept, excluded = rhat_filter(results, 1.01)
        assert len(kept) == 1 and kept[0].max_rhat == 1.005
        assert [e["replicate"] for e in excluded] == [1, 2]
        assert all(e["reason"] == "rhat" for e in excluded)

    def test_boundary_is_kept(self):
        kept, excluded = rhat_filter([self.fake(1.01)], 1.01)
        assert len(kept) == 1 and not excluded


class TestRunStudy:
    def test_structure(self, tiny_study_result):
        res = tiny_study_result
        assert res.kept == {10: 4}
        assert set(res.ranks) == {10}
        groups = {row["parameter"] for row in res.coverage}
        assert groups == {
            "gamma", "beta[1]", "beta[2]", "alpha", "tau", "phi", "rho", "rho_tilde"
        }
        for row in res.coverage:
            assert 0.0 <= row["coverage"] <= 1.0
            assert row["B"] == 6  # 2 chains x (30 kept // 10)
        pooled = {row["parameter"]: row["n"] for row in res.coverage}
        assert pooled["phi"] == 4 * 12
        assert pooled["rho_tilde"] == 4 * 10
        assert pooled["gamma"] == 4

    def test_coverage_accessor(self, tiny_study_result):
        val = tiny_study_result.coverage_for(10, "phi")
        assert 0.0 <= val <= 1.0
        with pytest.raises(KeyError, match="no coverage row"):
            tiny_study_result.coverage_for(99, "phi")

    def test_bias_rows_complete(self, tiny_study_result):
        rows = tiny_study_result.bias
        metrics = {(r["parameter"], r["metric"]) for r in rows}
        assert ("phi", "rmse") in metrics and ("gamma", "bias") in metrics
        phi_bias = next(
            r for r in rows if r["parameter"] == "phi" and r["metric"] == "bias"
        )
        assert phi_bias["n"] == 4 * 12
        assert phi_bias["q025"] <= phi_bias["median"] <= phi_bias["q975"]

    def test_replay_is_exact(self, tiny_study_result):
        again = run_study(TINY_STUDY)
        a = [(r.parameter, r.rank) for r in tiny_study_result.ranks[10]]
        b = [(r.parameter, r.rank) for r in again.ranks[10]]
        assert a == b

    def test_all_excluded_aborts_with_partial(self):
        strict = dataclasses.replace(TINY_STUDY, rhat_threshold=1.0 + 1e-12)
        with pytest.raises(StudyAborted, match="excluded") as exc_info:
            run_study(strict)
        partial = exc_info.value.partial
        assert partial.kept == {}
        assert all(row["reason"] == "rhat" for row in partial.exclusions)
        assert len(partial.exclusions) == TINY_STUDY.replicates


class TestWriteOutputs:
    def test_files_and_round_trip(self, tiny_study_result, tmp_path):
        written = write_study_outputs(tiny_study_result, tmp_path)
        names = {p.name for p in map(__import__("pathlib").Path, written)}
        assert names == {"ranks_m10.csv", "coverage.csv", "bias.csv", "exclusions.csv"}
        ranks = read_ranks_csv(tmp_path / "ranks_m10.csv")
        assert [(r.parameter, r.rank) for r in ranks] == [
            (r.parameter, r.rank) for r in tiny_study_result.ranks[10]
        ]
        header = (tmp_path / "coverage.csv").read_text().splitlines()[0]
        assert header == "membership_size,parameter,n,coverage,band_lo,band_hi,B"
        # floats are written with full precision
        body = (tmp_path / "bias.csv").read_text()
        assert "e-" in body or "." in body

import numpy as np
import pytest

from carmm.diagnostics import effective_sample_size
from carmm.graph import make_grid
from carmm.membership import simulate_membership_matrix
from carmm.model import param_names
from carmm.sampler import PosteriorSamples, SamplerConfig, SamplerStall, run_chains, run_hmc
from tests.conftest import make_spec


def gaussian_target(mean, cov):
    prec = np.linalg.inv(cov)

    def logp_grad(z):
        d = z - mean
        return -0.5 * float(d @ prec @ d), -prec @ d

    return logp_grad


class TestSamplerConfig:
    def test_warmup_and_kept_accounting(self):
        cfg = SamplerConfig(iterations=1000, warmup_fraction=0.5, thin=4)
        assert cfg.warmup == 500
        assert cfg.n_kept == 125

    @pytest.mark.parametrize("kwargs", [
        dict(chains=0),
        dict(iterations=3),
        dict(warmup_fraction=0.0),
        dict(warmup_fraction=1.0),
        dict(thin=0),
        dict(leapfrog_steps=0),
        dict(target_accept=1.0),
        dict(iterations=10, thin=8),  # keeps < 2 draws
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs)


class TestRunHmcOnGaussian:
    MEAN = np.array([1.0, -2.0, 0.5])
    COV = np.array([[2.0, 0.6, 0.0],
                    [0.6, 1.0, -0.3],
                    [0.0, -0.3, 0.7]])

    def _run(self, seed=0, iterations=3000):
        cfg = SamplerConfig(chains=2, iterations=iterations, warmup_fraction=0.5,
                            leapfrog_steps=8, seed=seed)
        return run_hmc(gaussian_target(self.MEAN, self.COV), 3, cfg)

    def test_moments_recovered(self):
        samples = self._run()
        draws = samples.stacked()
        for j in range(3):
            ess = effective_sample_size(samples.chains[:, :, j])
            mcse = np.sqrt(self.COV[j, j] / ess)
            assert abs(draws[:, j].mean() - self.MEAN[j]) < 3 * mcse
        cov = np.cov(draws.T)
        assert np.abs(cov - self.COV).max() < 0.1 * np.abs(self.COV).max() + 0.05

    def test_bit_for_bit_replay(self):
        a = self._run(seed=42, iterations=400)
        b = self._run(seed=42, iterations=400)
        np.testing.assert_array_equal(a.chains, b.chains)
        np.testing.assert_array_equal(a.step_size, b.step_size)

    def test_different_seeds_differ(self):
        a = self._run(seed=1, iterations=400)
        b = self._run(seed=2, iterations=400)
        assert not np.array_equal(a.chains, b.chains)

    def test_no_divergences_on_smooth_target(self):
        samples = self._run(iterations=600)
        assert samples.divergences.sum() == 0

    def test_acceptance_near_target(self):
        samples = self._run(iterations=2000)
        assert np.all(samples.mean_accept > 0.6)
        assert np.all(samples.mean_accept < 0.99)


class TestRunHmcPlumbing:
    def test_default_names_and_column_lookup(self):
        cfg = SamplerConfig(chains=1, iterations=50, seed=3)
        samples = run_hmc(gaussian_target(np.zeros(2), np.eye(2)), 2, cfg)
        assert samples.names == ["z[1]", "z[2]"]
        col = samples.column("z[2]")
        assert col.shape == (1, cfg.n_kept)
        with pytest.raises(KeyError, match="z\\[9\\]"):
            samples.column("z[9]")

    def test_transform_applied_to_stored_draws(self):
        cfg = SamplerConfig(chains=1, iterations=200, seed=5)
        raw = run_hmc(gaussian_target(np.zeros(1), np.eye(1)), 1, cfg)
        warped = run_hmc(gaussian_target(np.zeros(1), np.eye(1)), 1, cfg,
                         transform=lambda block: np.exp(block))
        np.testing.assert_allclose(warped.chains, np.exp(raw.chains), rtol=1e-12)

    def test_explicit_init_is_used(self):
        # a target that is finite only in a tiny ball around 50; random
        # inits (uniform on [-1,1]) can never find it
        centre = np.full(2, 50.0)

        def spiky(z):
            d = z - centre
            r2 = float(d @ d)
            if r2 > 4.0:
                return -np.inf, None
            return -0.5 * r2, -d

        cfg = SamplerConfig(chains=1, iterations=100, seed=0)
        with pytest.raises(SamplerStall, match="starting point"):
            run_hmc(spiky, 2, cfg)
        samples = run_hmc(spiky, 2, cfg, init=centre)
        assert np.all(np.isfinite(samples.chains))
        assert np.abs(samples.stacked().mean(axis=0) - 50.0).max() < 2.0


class TestRunChains:
    def test_columns_follow_param_names(self, poisson_post_spec):
        spec, _ = poisson_post_spec
        cfg = SamplerConfig(chains=2, iterations=80, seed=11)
        samples = run_chains(spec, cfg)
        assert samples.names == param_names(spec)
        assert samples.chains.shape == (2, cfg.n_kept, len(samples.names))
        alpha = samples.column("alpha")
        tau = samples.column("tau")
        assert np.all((alpha > 0) & (alpha < 1))
        assert np.all(tau > 0)

    def test_replay_through_model_path(self, poisson_post_spec):
        spec, _ = poisson_post_spec
        cfg = SamplerConfig(chains=2, iterations=60, seed=13)
        a = run_chains(spec, cfg)
        b = run_chains(spec, cfg)
        np.testing.assert_array_equal(a.chains, b.chains)

    def test_icar_draws_respect_constraint(self):
        grid = make_grid(3, 4)
        H = simulate_membership_matrix(grid, 10, np.random.default_rng(42))
        spec, _ = make_spec(grid, H, spatial="icar", seed=31)
        cfg = SamplerConfig(chains=1, iterations=80, seed=17)
        samples = run_chains(spec, cfg)
        phi_cols = [i for i, name in enumerate(samples.names) if name.startswith("phi")]
        sums = samples.stacked()[:, phi_cols].sum(axis=1)
        np.testing.assert_allclose(sums, 0.0, atol=1e-8)

    def test_y_override_matches_attached_data(self, poisson_post_spec):
        import dataclasses

        spec, _ = poisson_post_spec
        cfg = SamplerConfig(chains=1, iterations=60, seed=19)
        attached = run_chains(spec, cfg)
        bare = dataclasses.replace(spec, y=None)
        detached = run_chains(bare, cfg, y=spec.y)
        np.testing.assert_array_equal(attached.chains, detached.chains)

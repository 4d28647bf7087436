"""Simulation-based calibration for the disease-mapping models.

Each replicate draws a truth from the prior, simulates counts, refits
with MCMC, and ranks the truth among the posterior draws.  On a
calibrated pipeline the ranks are uniform; coverage of central
credible intervals and bias summaries come along for free.  The study
fixes one graph, membership matrix, covariate matrix and offset vector
(so replicates differ only through parameter/data randomness), loops
over membership sizes by truncating rows of the largest simulated
matrix, and filters out replicates whose chains disagree (split R-hat
above a threshold).

Replicates are deterministic functions of (study seed, membership
size, replicate index), so studies replay exactly and can be sharded.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .diagnostics import SbcRank, coverage_interval_check, rank_statistic, split_rhat, uniform_rank_band, write_ranks_csv
from .graph import make_grid
from .membership import simulate_membership_matrix
from .model import ModelSpec, ParamVector
from .sampler import SamplerConfig, SamplerStall, run_chains

__all__ = [
    "SbcStudyConfig",
    "SbcReplicateResult",
    "SbcStudyResult",
    "StudyAborted",
    "bias_metrics",
    "sbc_replicate",
    "rhat_filter",
    "run_study",
    "write_study_outputs",
]

_POOLED_GROUPS = {"phi", "rho", "rho_tilde"}


class StudyAborted(RuntimeError):
    """Raised when too many replicates fail; carries partial results."""

    def __init__(self, message: str, partial: "SbcStudyResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class SbcStudyConfig:
    """Desk-scale calibration study layout.

    ``data_parameterisation`` controls how truths/data are generated
    (areal effects, or membership-level effects pushed back through a
    generalized inverse); ``fit_parameterisation`` controls the free
    block of the fitted model.  Matching them tests the sampler;
    crossing them exposes identifiability loss.
    """

    rows: int = 4
    cols: int = 5
    membership_sizes: tuple[int, ...] = (14, 20, 26)
    data_parameterisation: str = "post"
    fit_parameterisation: str = "post"
    replicates: int = 200
    likelihood: str = "poisson"
    n_covariates: int = 2
    offsets_mean: float = 20.0
    rhat_threshold: float = 1.01
    # Convergence is judged on every stored draw, but ranks use each
    # rank_thin-th draw only: the rank statistic needs roughly
    # independent draws, while R-hat gets *less* noisy with more.
    rank_thin: int = 10
    seed: int = 0
    sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(
            chains=2, iterations=2000, warmup_fraction=0.5, thin=1, leapfrog_steps=16
        )
    )
    max_failure_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.rank_thin < 1:
            raise ValueError(f"rank_thin must be >= 1, got {self.rank_thin}")
        if self.sampler.n_kept < self.rank_thin:
            raise ValueError(
                f"rank_thin={self.rank_thin} exceeds the {self.sampler.n_kept} "
                "kept draws per chain"
            )
        if not self.membership_sizes:
            raise ValueError("membership_sizes must not be empty")
        n = self.rows * self.cols
        for role, param in (
            ("fits", self.fit_parameterisation),
            ("data generation", self.data_parameterisation),
        ):
            if param == "inverse":
                bad = [m for m in self.membership_sizes if m > n]
                if bad:
                    raise ValueError(
                        f"inverse {role} need m <= n = {n}; offending sizes: {bad}"
                    )
        if self.rhat_threshold <= 1.0:
            raise ValueError(f"rhat_threshold must exceed 1, got {self.rhat_threshold}")
        object.__setattr__(
            self, "membership_sizes", tuple(int(m) for m in self.membership_sizes)
        )


def bias_metrics(draws, truth: float) -> tuple[float, float, float]:
    """(bias, absolute bias, rmse) of posterior draws around the truth.

    ``bias = mean(draws - truth)``, ``abs_bias = mean(|draws - truth|)``,
    ``rmse = sqrt(mean((draws - truth)^2))``.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 1 or draws.size == 0:
        raise ValueError(f"draws must be a non-empty vector, got shape {draws.shape}")
    delta = draws - truth
    return (
        float(delta.mean()),
        float(np.abs(delta).mean()),
        float(np.sqrt(np.mean(delta * delta))),
    )


@dataclass
class SbcReplicateResult:
    """Ranks, bias metrics and MCMC health for one replicate."""

    ranks: list
    bias: dict  # group name -> (bias, abs_bias, rmse) arrays over components
    max_rhat: float
    divergences: int
    accept_rate: float


def _scenario_templates(cfg: SbcStudyConfig):
    """Graph, membership matrix (largest size), covariates, offsets.

    Fixed for the whole study: covariates are two (or ``n_covariates``)
    standard-normal columns rescaled to [0, 1] (min-max), offsets are
    Poisson(``offsets_mean``) counts floored at 1.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 101)))
    graph = make_grid(cfg.rows, cfg.cols)
    m_max = max(cfg.membership_sizes)
    H_full = None
    for _ in range(200):
        cand = simulate_membership_matrix(graph, m_max, rng)
        try:
            for size in cfg.membership_sizes:
                cand.truncated(size)
        except ValueError:
            continue
        H_full = cand
        break
    if H_full is None:
        raise RuntimeError(
            "could not simulate a membership matrix valid at every size"
        )
    X = rng.standard_normal((graph.n, cfg.n_covariates))
    X = (X - X.min(axis=0)) / (X.max(axis=0) - X.min(axis=0))
    offsets = rng.poisson(cfg.offsets_mean, size=m_max).astype(float)
    offsets = np.maximum(offsets, 1.0)
    return graph, H_full, X, offsets


def _derived_truth(spec: ModelSpec, theta: ParamVector):
    phi_areal = mdl.areal_random_effects(spec, theta)
    rho = np.exp(mdl.areal_log_risk(spec, theta))
    rho_t = np.exp(mdl.membership_log_risk(spec, theta))
    return phi_areal, rho, rho_t


def sbc_replicate(
    spec_template: ModelSpec,
    sampler_cfg: SamplerConfig,
    seed,
    data_parameterisation: str | None = None,
    rank_thin: int = 1,
) -> SbcReplicateResult:
    """Run one draw-simulate-refit-rank replicate.

    ``spec_template`` describes the fitted model (its ``y`` is ignored);
    ``data_parameterisation`` optionally generates truth/data under the
    other parameterisation.  ``seed`` is any RNG entropy (int or tuple);
    data generation and the sampler derive independent streams from it,
    so the replicate is a pure function of its arguments.  R-hat uses
    every stored draw; rank statistics keep one draw in ``rank_thin``.
    """
    ss = np.random.SeedSequence(seed)
    data_child, fit_child = ss.spawn(2)
    data_rng = np.random.default_rng(data_child)
    sampler_seed = int(fit_child.generate_state(1)[0])

    data_param = data_parameterisation or spec_template.parameterisation
    data_spec = dataclasses.replace(
        spec_template, parameterisation=data_param, y=None
    )
    truth = mdl.draw_prior_params(data_spec, data_rng)
    y = mdl.simulate_counts(data_spec, truth, data_rng)

    fit_spec = spec_template.with_y(y)
    cfg = dataclasses.replace(sampler_cfg, seed=sampler_seed)
    samples = run_chains(fit_spec, cfg)

    max_rhat = 0.0
    for j in range(len(samples.names)):
        col = samples.chains[:, :, j]
        if np.ptp(col) == 0.0:
            max_rhat = np.inf
            break
        max_rhat = max(max_rhat, split_rhat(col))

    thinned = samples.chains[:, rank_thin - 1 :: rank_thin, :]
    draws = thinned.reshape(-1, thinned.shape[2])
    B = draws.shape[0]
    phi_d, rho_d, rho_t_d = mdl.risk_draws(fit_spec, draws)
    phi_t, rho_t_true, rho_tt = _derived_truth(data_spec, truth)

    scalar_truth = {"gamma": truth.gamma}
    scalar_draws = {"gamma": draws[:, 0]}
    for k in range(fit_spec.p):
        scalar_truth[f"beta[{k + 1}]"] = float(truth.beta[k])
        scalar_draws[f"beta[{k + 1}]"] = draws[:, 1 + k]
    idx = {nm: j for j, nm in enumerate(samples.names)}
    for nm, val in (("alpha", truth.alpha), ("tau", truth.tau), ("psi", truth.psi)):
        if nm in idx and val is not None:
            scalar_truth[nm] = float(val)
            scalar_draws[nm] = draws[:, idx[nm]]

    ranks: list[SbcRank] = []
    bias: dict[str, tuple] = {}
    for nm, tval in scalar_truth.items():
        ranks.append(SbcRank(nm, rank_statistic(scalar_draws[nm], tval), B))
        bias[nm] = tuple(np.array([v]) for v in bias_metrics(scalar_draws[nm], tval))
    for group, mat, tvec in (
        ("phi", phi_d, phi_t),
        ("rho", rho_d, rho_t_true),
        ("rho_tilde", rho_t_d, rho_tt),
    ):
        for i in range(tvec.size):
            ranks.append(
                SbcRank(f"{group}[{i + 1}]", rank_statistic(mat[:, i], tvec[i]), B)
            )
        delta = mat - tvec
        bias[group] = (
            delta.mean(axis=0),
            np.abs(delta).mean(axis=0),
            np.sqrt(np.mean(delta * delta, axis=0)),
        )

    return SbcReplicateResult(
        ranks=ranks,
        bias=bias,
        max_rhat=float(max_rhat),
        divergences=int(samples.divergences.sum()),
        accept_rate=float(samples.accept_rate.mean()),
    )


def rhat_filter(
    results: list[SbcReplicateResult], threshold: float = 1.01
) -> tuple[list[SbcReplicateResult], list[dict]]:
    """Split replicates into (kept, excluded) by worst-parameter R-hat.

    The exclusion report lists the replicate index and its ``max_rhat``
    so studies can show how many fits were dropped and why.
    """
    kept, excluded = [], []
    for i, res in enumerate(results):
        if res.max_rhat > threshold:
            excluded.append(
                {"replicate": i, "reason": "rhat", "max_rhat": res.max_rhat}
            )
        else:
            kept.append(res)
    return kept, excluded


def _group_of(name: str) -> str:
    base = name.split("[")[0]
    return base if base in _POOLED_GROUPS else name


@dataclass
class SbcStudyResult:
    """Ranks, coverage, bias and exclusions for every membership size."""

    config: SbcStudyConfig
    ranks: dict  # size -> list[SbcRank], kept replicates only
    coverage: list  # rows: size, parameter, n, coverage, band, B
    bias: list  # rows: size, parameter, metric, summary stats
    exclusions: list  # rows: size, replicate, reason, max_rhat
    kept: dict  # size -> number of kept replicates

    def coverage_for(self, size: int, parameter: str) -> float:
        for row in self.coverage:
            if row["membership_size"] == size and row["parameter"] == parameter:
                return row["coverage"]
        raise KeyError(f"no coverage row for size={size}, parameter={parameter!r}")


def _summarise_scenario(size: int, kept: list[SbcReplicateResult]):
    ranks = [r for res in kept for r in res.ranks]
    groups: dict[str, list[SbcRank]] = {}
    for r in ranks:
        groups.setdefault(_group_of(r.parameter), []).append(r)
    coverage_rows = []
    for group in sorted(groups):
        rs = groups[group]
        B = rs[0].n_draws
        lo, hi = uniform_rank_band(B)
        coverage_rows.append(
            {
                "membership_size": size,
                "parameter": group,
                "n": len(rs),
                "coverage": coverage_interval_check(rs),
                "band_lo": lo,
                "band_hi": hi,
                "B": B,
            }
        )
    bias_rows = []
    metric_names = ("bias", "abs_bias", "rmse")
    pooled: dict[str, list] = {}
    for res in kept:
        for group, metrics in res.bias.items():
            store = pooled.setdefault(group, [[], [], []])
            for k in range(3):
                store[k].append(metrics[k])
    for group in sorted(pooled):
        for k, metric in enumerate(metric_names):
            vals = np.concatenate(pooled[group][k])
            bias_rows.append(
                {
                    "membership_size": size,
                    "parameter": group,
                    "metric": metric,
                    "mean": float(vals.mean()),
                    "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                    "median": float(np.median(vals)),
                    "q025": float(np.quantile(vals, 0.025)),
                    "q975": float(np.quantile(vals, 0.975)),
                    "n": int(vals.size),
                }
            )
    return ranks, coverage_rows, bias_rows


def run_study(cfg: SbcStudyConfig) -> SbcStudyResult:
    """Run the full calibration study described by ``cfg``.

    Loops membership sizes over the shared fixtures, runs the
    replicates, applies the R-hat filter, and aggregates.  Replicates
    whose sampler stalls are recorded as exclusions; if more than
    ``cfg.max_failure_fraction`` of a scenario's replicates fail, the
    study aborts with partial results attached to the exception.
    """
    graph, H_full, X, offsets = _scenario_templates(cfg)
    ranks: dict[int, list[SbcRank]] = {}
    coverage_rows: list[dict] = []
    bias_rows: list[dict] = []
    exclusion_rows: list[dict] = []
    kept_counts: dict[int, int] = {}

    def partial() -> SbcStudyResult:
        return SbcStudyResult(
            config=cfg,
            ranks=ranks,
            coverage=coverage_rows,
            bias=bias_rows,
            exclusions=exclusion_rows,
            kept=kept_counts,
        )

    max_failures = max(3, int(cfg.max_failure_fraction * cfg.replicates))
    for size in cfg.membership_sizes:
        H = H_full.truncated(size)
        template = ModelSpec(
            likelihood=cfg.likelihood,
            parameterisation=cfg.fit_parameterisation,
            spatial="car",
            graph=graph,
            membership=H,
            covariates=X,
            offsets=offsets[:size],
        )
        results: list[SbcReplicateResult] = []
        failures = 0
        for rep in range(cfg.replicates):
            try:
                results.append(
                    sbc_replicate(
                        template,
                        cfg.sampler,
                        (cfg.seed, size, rep),
                        data_parameterisation=cfg.data_parameterisation,
                        rank_thin=cfg.rank_thin,
                    )
                )
            except SamplerStall as exc:
                failures += 1
                exclusion_rows.append(
                    {
                        "membership_size": size,
                        "replicate": rep,
                        "reason": f"sampler-stall: {exc}",
                        "max_rhat": float("nan"),
                    }
                )
                if failures > max_failures:
                    raise StudyAborted(
                        f"{failures} sampler failures at size {size}; "
                        "aborting with partial results",
                        partial(),
                    ) from exc
        kept, excluded = rhat_filter(results, cfg.rhat_threshold)
        for row in excluded:
            exclusion_rows.append(
                {
                    "membership_size": size,
                    "replicate": row["replicate"],
                    "reason": row["reason"],
                    "max_rhat": row["max_rhat"],
                }
            )
        if not kept:
            raise StudyAborted(
                f"every replicate at size {size} was excluded", partial()
            )
        kept_counts[size] = len(kept)
        scenario_ranks, cov_rows, b_rows = _summarise_scenario(size, kept)
        ranks[size] = scenario_ranks
        coverage_rows.extend(cov_rows)
        bias_rows.extend(b_rows)
    return partial()


def write_study_outputs(result: SbcStudyResult, outdir) -> list[str]:
    """Write ranks/coverage/bias/exclusions CSVs; returns file names.

    Rank files follow the ``parameter,rank,B`` contract, one file per
    membership size (``ranks_m{size}.csv``).
    """
    import os

    written = []
    for size, ranks in sorted(result.ranks.items()):
        path = os.path.join(outdir, f"ranks_m{size}.csv")
        write_ranks_csv(ranks, path)
        written.append(path)

    def dump(path, rows, fields):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row[k]) for k in fields})
        written.append(path)

    dump(
        os.path.join(outdir, "coverage.csv"),
        result.coverage,
        ["membership_size", "parameter", "n", "coverage", "band_lo", "band_hi", "B"],
    )
    dump(
        os.path.join(outdir, "bias.csv"),
        result.bias,
        ["membership_size", "parameter", "metric", "mean", "sd", "median", "q025", "q975", "n"],
    )
    dump(
        os.path.join(outdir, "exclusions.csv"),
        result.exclusions,
        ["membership_size", "replicate", "reason", "max_rhat"],
    )
    return written


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v

"""Predictive scoring and posterior checks for fitted models.

Covers posterior predictive p-values (marginal, and the mixed variant
that redraws spatial effects from their prior full conditionals before
simulating), PSIS-smoothed leave-one-out expected log predictive
density, the rank and Dawid-Sebastiani scores, exceedance
probabilities, and covariate-quintile risk summaries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ModelSpec
from .sampler import PosteriorSamples

__all__ = [
    "LooResult",
    "ScoreReport",
    "marginal_ppp",
    "mixed_ppp",
    "generalized_pareto_fit",
    "psis_smooth",
    "psis_loo_elpd",
    "elpd_diff",
    "rps_mean",
    "dss_mean",
    "exceedance_prob",
    "quintile_risk_profile",
]

PARETO_K_WARN = 0.7


def _check_replicates(y, replicates):
    y = np.asarray(y)
    reps = np.asarray(replicates)
    if reps.ndim != 2:
        raise ValueError(f"replicates must be (draws, m), got shape {reps.shape}")
    if y.shape != (reps.shape[1],):
        raise ValueError(
            f"y has shape {y.shape}, expected ({reps.shape[1]},) to match replicates"
        )
    if reps.shape[0] < 2:
        raise ValueError("need at least 2 replicate draws")
    return y, reps


def marginal_ppp(y, replicates) -> np.ndarray:
    """Mid-p posterior predictive p-values, one per membership.

    ``p_j = P(y_rep < y_j) + 0.5 P(y_rep = y_j)`` over the replicate
    draws.  The mid-p correction keeps values off the lattice boundary
    for discrete counts; results are always in (0, 1) exclusive of
    exact 0/1 unless every replicate sits strictly on one side.
    """
    y, reps = _check_replicates(y, replicates)
    return np.mean(reps < y, axis=0) + 0.5 * np.mean(reps == y, axis=0)


def mixed_ppp(spec: ModelSpec, samples: PosteriorSamples, rng) -> np.ndarray:
    """Mixed posterior predictive p-values (spatial effects redrawn).

    For each posterior draw, every areal effect is replaced by one draw
    from its CAR full conditional ``N(alpha * sum_neighbours / d_i,
    1 / (tau * d_i))`` given the other areas (one sweep, not iterated),
    the membership risk is rebuilt through the membership matrix, new
    counts are simulated, and mid-p values are computed.  This breaks
    the double use of data that makes marginal checks conservative.
    Requires a spatial model; the intrinsic variant uses the same
    conditionals with ``alpha = 1``.
    """
    if spec.spatial == "none":
        raise ValueError("mixed PPP needs a spatial model (CAR or intrinsic)")
    y = spec.require_y()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    draws = samples.stacked()
    names = samples.names
    idx = {name: j for j, name in enumerate(names)}
    S = draws.shape[0]
    gamma = draws[:, idx["gamma"]]
    beta = draws[:, [idx[f"beta[{k + 1}]"] for k in range(spec.p)]]
    tau = draws[:, idx["tau"]]
    alpha = draws[:, idx["alpha"]] if spec.spatial == "car" else np.ones(S)
    if spec.parameterisation == "inverse":
        block = np.stack(
            [draws[:, idx[f"phi_tilde[{j + 1}]"]] for j in range(spec.m)], axis=1
        )
        phi = block @ np.linalg.pinv(spec.membership.weights).T
    else:
        phi = np.stack(
            [draws[:, idx[f"phi[{i + 1}]"]] for i in range(spec.n)], axis=1
        )
    W = spec.graph.adjacency_matrix()
    d = spec.graph.degrees.astype(float)
    cond_mean = alpha[:, None] * (phi @ W) / d
    cond_sd = 1.0 / np.sqrt(tau[:, None] * d)
    phi_rep = cond_mean + cond_sd * rng.standard_normal((S, spec.n))
    eta = (
        gamma[:, None]
        + beta @ spec._HX.T
        + phi_rep @ spec.membership.weights.T
    )
    mu = spec.offsets * np.exp(eta)
    if spec.likelihood == "poisson":
        y_rep = rng.poisson(mu)
    else:
        psi = draws[:, idx["psi"]][:, None]
        y_rep = rng.negative_binomial(psi, psi / (psi + mu))
    return np.mean(y_rep < y, axis=0) + 0.5 * np.mean(y_rep == y, axis=0)


def generalized_pareto_fit(x: np.ndarray) -> tuple[float, float]:
    """Fit a generalized Pareto (shape, scale) to positive exceedances.

    Profile posterior-mean estimator with a weak prior on the shape
    (the standard choice for weight smoothing).  ``x`` must be sorted
    ascending and strictly positive.  Returns ``(shape, scale)``;
    non-finite results signal an unusable fit.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 5:
        return np.nan, np.nan
    prior_bs, prior_k = 3.0, 10.0
    m = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1.0, m + 1.0) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        k = np.mean(np.log1p(-b[:, None] * x), axis=1)
        loglik = n * (np.log(-b / k) - k - 1.0)
        loglik[~np.isfinite(loglik)] = -np.inf
        w = 1.0 / np.exp(loglik - loglik[:, None]).sum(axis=1)
    w[~np.isfinite(w)] = 0.0
    if w.sum() <= 0:
        return np.nan, np.nan
    w /= w.sum()
    b_post = float(np.sum(b * w))
    if b_post == 0.0 or not np.isfinite(b_post):
        return np.nan, np.nan
    k_post = float(np.mean(np.log1p(-b_post * x)))
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    sigma = -k_post / b_post
    return k_post, sigma


def _gpd_quantile(p: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_weights: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Pareto-smooth one vector of log importance weights.

    The largest 20% of weights are replaced by generalized-Pareto
    quantiles fitted to their exceedances over the tail cutoff, then
    truncated at the raw maximum.  Returns ``(smoothed_log_weights,
    k_hat, smoothed)``; ``smoothed=False`` (with ``k_hat = 0``) means
    the tail was degenerate - too short or constant - and the raw
    weights were kept.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.ndim != 1:
        raise ValueError(f"log weights must be a vector, got shape {lw.shape}")
    S = lw.size
    M = int(np.ceil(0.2 * S))
    if M < 5 or S - M < 1:
        return lw.copy(), 0.0, False
    shifted = lw - lw.max()
    order = np.argsort(shifted, kind="stable")
    tail_idx = order[S - M :]
    cutoff = shifted[order[S - M - 1]]
    exceedances = np.exp(shifted[tail_idx]) - np.exp(cutoff)
    if not np.all(exceedances > 0.0):
        return lw.copy(), 0.0, False
    k_hat, sigma = generalized_pareto_fit(np.sort(exceedances))
    if not (np.isfinite(k_hat) and np.isfinite(sigma) and sigma > 0):
        return lw.copy(), 0.0, False
    probs = (np.arange(1.0, M + 1.0) - 0.5) / M
    quantiles = np.exp(cutoff) + _gpd_quantile(probs, k_hat, sigma)
    smoothed = shifted.copy()
    # assign fitted quantiles in the tail's own rank order
    smoothed[tail_idx] = np.log(quantiles)
    smoothed = np.minimum(smoothed, 0.0)  # never exceed the raw maximum
    return smoothed + lw.max(), float(k_hat), True


@dataclass(frozen=True)
class LooResult:
    """Leave-one-out expected log predictive density and its pieces."""

    elpd: float
    se: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    smoothed: np.ndarray  # bool per observation; False = raw-weight fallback

    @property
    def n_flagged(self) -> int:
        """Observations whose tail shape exceeds the reliability cutoff."""
        return int(np.sum(self.pareto_k > PARETO_K_WARN))


def psis_loo_elpd(loglik: np.ndarray) -> LooResult:
    """PSIS leave-one-out elpd from an ``(S, m)`` pointwise log-lik matrix.

    Importance ratios for observation ``j`` are ``1 / p(y_j | theta)``;
    their log weights are Pareto-smoothed before the weighted average.
    ``se`` is ``sqrt(m * var(pointwise))``.  Columns whose weights are
    degenerate (e.g. constant) fall back to unsmoothed ratios and are
    reported with ``smoothed=False``.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError(f"loglik must be (draws, m), got shape {ll.shape}")
    S, m = ll.shape
    if S < 2:
        raise ValueError("need at least 2 posterior draws")
    if not np.all(np.isfinite(ll)):
        raise ValueError("loglik contains non-finite entries")
    pointwise = np.empty(m)
    k_hat = np.empty(m)
    smoothed_flags = np.empty(m, dtype=bool)
    for j in range(m):
        lw, k, ok = psis_smooth(-ll[:, j])
        pointwise[j] = logsumexp(lw + ll[:, j]) - logsumexp(lw)
        k_hat[j] = k
        smoothed_flags[j] = ok
    elpd = float(np.sum(pointwise))
    se = float(np.sqrt(m * np.var(pointwise, ddof=1))) if m > 1 else 0.0
    return LooResult(
        elpd=elpd, se=se, pointwise=pointwise, pareto_k=k_hat, smoothed=smoothed_flags
    )


def elpd_diff(a: LooResult, b: LooResult) -> tuple[float, float]:
    """Paired difference ``elpd_a - elpd_b`` with its standard error.

    The SE uses the pointwise differences (paired across observations),
    ``sqrt(m * var(pointwise_a - pointwise_b))``.  Comparing a result
    with itself gives exactly ``(0.0, 0.0)``.
    """
    if a.pointwise.shape != b.pointwise.shape:
        raise ValueError(
            f"pointwise shapes differ: {a.pointwise.shape} vs {b.pointwise.shape} "
            "(were the models fit to the same data?)"
        )
    diff = a.pointwise - b.pointwise
    m = diff.size
    se = float(np.sqrt(m * np.var(diff, ddof=1))) if m > 1 else 0.0
    return float(np.sum(diff)), se


def rps_mean(y, replicates, pair_scale: str = "full") -> float:
    """Mean rank probability score over memberships.

    Sample form ``mean_j [ mean_i |y_rep_i - y_j|
    - (1/B) sum_{i <= B/2} |y_rep_i - y_rep_{i + B/2}| ]`` with the pair
    term literally divided by the replicate count ``B`` (so it is half
    the mean over the ``B/2`` distinct pairs).  ``pair_scale="half"``
    switches to dividing by ``B/2``.  ``B`` must be even so replicates
    pair up.
    """
    y, reps = _check_replicates(y, replicates)
    B = reps.shape[0]
    if B % 2 != 0:
        raise ValueError(f"replicate count must be even to form pairs, got {B}")
    if pair_scale not in ("full", "half"):
        raise ValueError(f"pair_scale must be 'full' or 'half', got {pair_scale!r}")
    half = B // 2
    term1 = np.mean(np.abs(reps - y), axis=0)
    pair_sum = np.sum(np.abs(reps[:half] - reps[half:]), axis=0)
    term2 = pair_sum / (B if pair_scale == "full" else half)
    return float(np.mean(term1 - term2))


def dss_mean(y, replicates) -> float:
    """Mean Dawid-Sebastiani score ``((y - mean)/sd)^2 + 2 log sd``.

    Means and standard deviations are taken over replicate draws per
    membership.  Zero replicate variance makes the score undefined and
    raises.
    """
    y, reps = _check_replicates(y, replicates)
    mean = reps.mean(axis=0)
    sd = reps.std(axis=0, ddof=1)
    if np.any(sd == 0.0):
        j = int(np.argmin(sd))
        raise ValueError(
            f"replicates for membership {j} have zero variance; the score "
            "is undefined"
        )
    return float(np.mean(((y - mean) / sd) ** 2 + 2.0 * np.log(sd)))


def exceedance_prob(rho_draws, threshold: float = 1.0) -> np.ndarray:
    """Posterior probability that each relative risk exceeds ``threshold``."""
    rho = np.asarray(rho_draws, dtype=float)
    if rho.ndim != 2:
        raise ValueError(f"rho draws must be (draws, areas), got shape {rho.shape}")
    return np.mean(rho > threshold, axis=0)


def quintile_risk_profile(rho_means, covariate) -> np.ndarray:
    """Risk summaries of areas binned by covariate quintile.

    Areas are sorted by the covariate (ties broken by area index) and
    split into five nearly equal groups, lowest first.  Returns a
    ``(5, 3)`` array of (mean, 2.5%, 97.5%) of the posterior-mean
    relative risks within each group.
    """
    rho = np.asarray(rho_means, dtype=float)
    cov = np.asarray(covariate, dtype=float)
    if rho.ndim != 1 or rho.shape != cov.shape:
        raise ValueError(
            f"rho_means and covariate must be equal-length vectors, got "
            f"{rho.shape} and {cov.shape}"
        )
    if rho.size < 5:
        raise ValueError(f"need at least 5 areas to form quintiles, got {rho.size}")
    order = np.argsort(cov, kind="stable")
    out = np.empty((5, 3))
    for g, members in enumerate(np.array_split(order, 5)):
        vals = rho[members]
        out[g] = [vals.mean(), np.quantile(vals, 0.025), np.quantile(vals, 0.975)]
    return out


@dataclass
class ScoreReport:
    """Bundle of predictive scores for one fitted model."""

    model: str
    elpd: float
    elpd_se: float
    pointwise_elpd: np.ndarray
    pareto_k: np.ndarray
    loo_smoothed: np.ndarray
    rps: float
    dss: float
    marginal_p: np.ndarray
    mixed_p: np.ndarray | None = None
    exceedance: np.ndarray | None = None
    quintiles: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("pointwise_elpd", "pareto_k", "marginal_p"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "loo_smoothed", np.asarray(self.loo_smoothed, dtype=bool))
        m = self.pointwise_elpd.size
        for name in ("pareto_k", "loo_smoothed", "marginal_p"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have length {m}")
        if not np.all(np.isfinite(self.pareto_k)):
            raise ValueError("pareto_k must be finite (fallback columns use 0)")
        for name in ("marginal_p", "mixed_p"):
            v = getattr(self, name)
            if v is not None and (np.any(np.asarray(v) < 0) or np.any(np.asarray(v) > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_json(self) -> str:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            return v

        payload = {k: conv(v) for k, v in asdict(self).items()}
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        raw = json.loads(text)
        arrays = {
            "pointwise_elpd",
            "pareto_k",
            "loo_smoothed",
            "marginal_p",
            "mixed_p",
            "exceedance",
            "quintiles",
        }
        kwargs = {}
        for k, v in raw.items():
            if k in arrays and v is not None:
                kwargs[k] = np.asarray(v)
            else:
                kwargs[k] = v
        return cls(**kwargs)

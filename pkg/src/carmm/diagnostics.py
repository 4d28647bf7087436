"""Convergence diagnostics and simulation-based calibration summaries.

``split_rhat`` is the rank-normalised split potential-scale-reduction
statistic (each chain halved, pooled ranks mapped through the normal
quantile function, and the larger of the bulk and folded variants
reported).  ``effective_sample_size`` combines chains with the usual
autocorrelation-sum estimator truncated by Geyer's initial monotone
sequence.  Rank statistics for calibration studies count posterior
draws below the generating truth; under a well-calibrated sampler they
are uniform on ``{0, ..., B}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

__all__ = [
    "SbcRank",
    "rank_statistic",
    "split_rhat",
    "effective_sample_size",
    "coverage_interval_check",
    "uniform_rank_band",
    "write_ranks_csv",
    "read_ranks_csv",
]


@dataclass(frozen=True)
class SbcRank:
    """Rank of a true parameter value among ``B`` posterior draws."""

    parameter: str
    rank: int
    n_draws: int

    def __post_init__(self) -> None:
        if self.n_draws < 1:
            raise ValueError(f"n_draws must be >= 1, got {self.n_draws}")
        if not (0 <= self.rank <= self.n_draws):
            raise ValueError(
                f"rank {self.rank} outside [0, {self.n_draws}] for "
                f"{self.parameter!r}"
            )

    @property
    def normalized(self) -> float:
        """Rank mapped to [0, 1] as ``rank / (B + 1)``."""
        return self.rank / (self.n_draws + 1)


def rank_statistic(draws, truth: float) -> int:
    """Number of posterior draws strictly below the true value.

    With ``B`` draws the result lies in ``{0, ..., B}``; it is invariant
    under any strictly monotone transform applied to draws and truth
    alike.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 1 or draws.size == 0:
        raise ValueError(f"draws must be a non-empty vector, got shape {draws.shape}")
    return int(np.sum(draws < truth))


def _as_chain_matrix(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"expected (n_chains, n_draws) array, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 chains, got {arr.shape[0]}")
    if arr.shape[1] < 4:
        raise ValueError(f"need at least 4 draws per chain, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("chains contain non-finite values")
    return arr


def _split_halves(arr: np.ndarray) -> np.ndarray:
    half = arr.shape[1] // 2
    return np.vstack([arr[:, :half], arr[:, arr.shape[1] - half :]])


def _rank_normalize(arr: np.ndarray) -> np.ndarray:
    # fractional ranks over the pooled sample -> normal scores
    r = rankdata(arr, method="average").reshape(arr.shape)
    return ndtri((r - 3.0 / 8.0) / (arr.size + 1.0 / 4.0))


def _basic_rhat(arr: np.ndarray) -> float:
    n = arr.shape[1]
    means = arr.mean(axis=1)
    variances = arr.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1)
    if w <= 0.0:
        return np.inf
    var_hat = (n - 1.0) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def split_rhat(chains) -> float:
    """Rank-normalised split R-hat across chains.

    Takes an ``(n_chains, n_draws)`` array, splits each chain into
    halves, and returns the max of the bulk statistic and the one on
    absolute deviations from the median (tail behaviour).  Values are
    floored at 1: anything meaningfully above 1 signals disagreement
    between chain halves.  Constant input raises, since the statistic
    is undefined without within-chain variance.
    """
    arr = _as_chain_matrix(chains)
    if np.ptp(arr) == 0.0:
        raise ValueError("R-hat is undefined for constant chains")
    split = _split_halves(arr)
    bulk = _basic_rhat(_rank_normalize(split))
    folded = _basic_rhat(_rank_normalize(np.abs(split - np.median(split))))
    return max(1.0, bulk, folded)


def effective_sample_size(chains) -> float:
    """Multi-chain effective sample size of the mean.

    Autocovariances are computed per chain by FFT, combined with the
    between-chain variance, and the autocorrelation sum is truncated by
    Geyer's initial positive monotone sequence.  Independent draws give
    ESS close to the total draw count; an AR(1) chain with coefficient
    ``r`` gives roughly ``total * (1 - r) / (1 + r)``.
    """
    arr = _as_chain_matrix(chains)
    if np.ptp(arr) == 0.0:
        raise ValueError("ESS is undefined for constant chains")
    m, n = arr.shape
    acov = np.empty((m, n))
    for k in range(m):
        acov[k] = _autocov(arr[k])
    chain_var = acov[:, 0] * n / (n - 1.0)  # ddof-adjusted
    w = chain_var.mean()
    mean_acov = acov.mean(axis=0)
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += arr.mean(axis=1).var(ddof=1)
    if var_plus <= 0.0:
        raise ValueError("ESS is undefined: zero pooled variance")

    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0
    # Geyer pairs: sum consecutive pairs, keep while positive, enforce
    # monotone decrease
    max_pairs = (n - 1) // 2
    prev = np.inf
    total = 0.0
    for k in range(max_pairs + 1):
        if 2 * k + 1 >= n:
            break
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev)
        prev = pair
        total += pair
    tau = max(2.0 * total - 1.0, 1e-3)
    return float(m * n / tau)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f))[:n].real
    return acov / n


def uniform_rank_band(n_draws: int, lower: float = 0.025, upper: float = 0.975):
    """Central band of the discrete uniform on ``{0, ..., B}``.

    Returns ``(lo, hi)``: the ``lower`` and ``upper`` quantiles, i.e.
    the smallest integers whose CDF reaches those levels.  A calibrated
    rank falls inside with probability ``(hi - lo + 1) / (B + 1)``.
    """
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    if not (0.0 < lower < upper < 1.0):
        raise ValueError(f"need 0 < lower < upper < 1, got {lower}, {upper}")
    lo = int(np.ceil(lower * (n_draws + 1))) - 1
    hi = int(np.ceil(upper * (n_draws + 1))) - 1
    return lo, hi


def coverage_interval_check(
    ranks, n_draws: int | None = None, lower: float = 0.025, upper: float = 0.975
) -> float:
    """Fraction of ranks inside the central uniform band.

    ``ranks`` is either a list of :class:`SbcRank` (all sharing one
    ``n_draws``) or an integer array with ``n_draws`` given explicitly.
    The band is the central ~95% region of the discrete uniform, so a
    calibrated study should land near 0.95.
    """
    if len(ranks) == 0:
        raise ValueError("no ranks given")
    if isinstance(ranks[0], SbcRank):
        counts = {r.n_draws for r in ranks}
        if n_draws is None:
            if len(counts) != 1:
                raise ValueError(f"mixed n_draws in ranks: {sorted(counts)}")
            n_draws = counts.pop()
        values = np.array([r.rank for r in ranks])
    else:
        if n_draws is None:
            raise ValueError("n_draws is required for plain rank arrays")
        values = np.asarray(ranks, dtype=int)
    if np.any(values < 0) or np.any(values > n_draws):
        raise ValueError(f"ranks outside [0, {n_draws}]")
    lo, hi = uniform_rank_band(n_draws, lower, upper)
    return float(np.mean((values >= lo) & (values <= hi)))


def write_ranks_csv(ranks, path) -> None:
    """Write rank statistics as CSV with header ``parameter,rank,B``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "rank", "B"])
        for r in ranks:
            writer.writerow([r.parameter, r.rank, r.n_draws])


def read_ranks_csv(path) -> list[SbcRank]:
    """Read a ``parameter,rank,B`` CSV back into :class:`SbcRank` rows."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["parameter", "rank", "B"]:
            raise ValueError(f"{path}: expected header 'parameter,rank,B'")
        for row in reader:
            if not row:
                continue
            out.append(SbcRank(row[0], int(row[1]), int(row[2])))
    if not out:
        raise ValueError(f"{path}: no ranks")
    return out

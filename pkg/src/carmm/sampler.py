"""Gradient-based MCMC for the model posteriors.

Hamiltonian Monte Carlo with a fixed leapfrog trajectory length,
dual-averaging step-size adaptation toward a target acceptance rate,
and a diagonal mass matrix estimated from warmup draws.  Chains are
independent and each is seeded deterministically from the config seed
plus the chain index, so runs replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .model import ModelSpec

__all__ = [
    "SamplerConfig",
    "PosteriorSamples",
    "SamplerStall",
    "run_hmc",
    "run_chains",
]


class SamplerStall(RuntimeError):
    """A chain stopped accepting proposals for an extended stretch."""


@dataclass(frozen=True)
class SamplerConfig:
    """Tuning knobs for the HMC run.

    ``iterations`` counts all transitions per chain; the first
    ``warmup_fraction`` of them adapt step size / mass matrix and are
    discarded.  Post-warmup draws are kept every ``thin`` iterations.
    """

    chains: int = 2
    iterations: int = 1000
    warmup_fraction: float = 0.5
    thin: int = 1
    leapfrog_steps: int = 16
    target_accept: float = 0.8
    seed: int = 0
    max_stall: int = 500

    def __post_init__(self) -> None:
        if self.chains < 1:
            raise ValueError(f"chains must be >= 1, got {self.chains}")
        if self.iterations < 4:
            raise ValueError(f"iterations must be >= 4, got {self.iterations}")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError(
                f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}"
            )
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.leapfrog_steps < 1:
            raise ValueError(f"leapfrog_steps must be >= 1, got {self.leapfrog_steps}")
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError(
                f"target_accept must be in (0, 1), got {self.target_accept}"
            )
        if self.n_kept < 2:
            raise ValueError(
                "config keeps fewer than 2 draws per chain; increase iterations "
                "or decrease warmup_fraction/thin"
            )

    @property
    def warmup(self) -> int:
        return int(self.iterations * self.warmup_fraction)

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.warmup) // self.thin


@dataclass
class PosteriorSamples:
    """Draws plus per-chain sampler statistics.

    ``chains`` has shape ``(n_chains, n_kept, k)`` and holds draws on
    the reporting (constrained) scale, columns named by ``names``.
    """

    names: list[str]
    chains: np.ndarray
    accept_rate: np.ndarray
    mean_accept: np.ndarray
    divergences: np.ndarray
    step_size: np.ndarray
    seed: int
    warmup: int
    thin: int

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_kept(self) -> int:
        return self.chains.shape[1]

    def stacked(self) -> np.ndarray:
        """All chains pooled, shape ``(n_chains * n_kept, k)``."""
        return self.chains.reshape(-1, self.chains.shape[2])

    def column(self, name: str) -> np.ndarray:
        """Per-chain draws of one parameter, shape ``(n_chains, n_kept)``."""
        try:
            j = self.names.index(name)
        except ValueError as exc:
            raise KeyError(f"no parameter named {name!r}") from exc
        return self.chains[:, :, j]


class _DualAveraging:
    # Nesterov-style averaging of log step size (the usual HMC recipe:
    # mu anchored at log(10 * eps0), gamma=0.05, t0=10, kappa=0.75)
    def __init__(self, eps0: float, target: float):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 1

    def update(self, accept_prob: float) -> float:
        w = 1.0 / (self.count + 10.0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(self.count) / 0.05 * self.h_bar
        eta = self.count ** -0.75
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        self.count += 1
        return float(np.exp(self.log_eps))

    @property
    def eps_bar(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _leapfrog(logp_grad, z, p, eps, inv_mass, n_steps):
    """Fixed-length leapfrog; returns (z, p, lp, grad) or None on blow-up."""
    lp, grad = logp_grad(z)
    if grad is None or not np.isfinite(lp):
        return None
    with np.errstate(over="ignore"):  # exploding trajectories abort below
        p = p + 0.5 * eps * grad
        for step in range(n_steps):
            z = z + eps * inv_mass * p
            lp, grad = logp_grad(z)
            if grad is None or not np.isfinite(lp):
                return None
            if step < n_steps - 1:
                p = p + eps * grad
        p = p + 0.5 * eps * grad
    return z, p, lp, grad


def _find_initial_step(logp_grad, z, inv_mass, rng):
    # double/halve a trial step until one leapfrog step crosses 0.5
    # acceptance, the usual starting-point heuristic
    eps = 1.0
    p = rng.standard_normal(z.shape) / np.sqrt(inv_mass)
    lp0, _ = logp_grad(z)
    h0 = -lp0 + 0.5 * float(np.sum(inv_mass * p * p))

    def ratio(e):
        out = _leapfrog(logp_grad, z, p, e, inv_mass, 1)
        if out is None:
            return 0.0
        _, p1, lp1, _ = out
        with np.errstate(over="ignore"):  # huge kinetic energy = reject
            h1 = -lp1 + 0.5 * float(np.sum(inv_mass * p1 * p1))
        if not np.isfinite(h1):
            return 0.0
        return float(np.exp(min(0.0, h0 - h1)))

    grow = ratio(eps) > 0.5
    for _ in range(60):
        eps = eps * 2.0 if grow else eps * 0.5
        r = ratio(eps)
        if grow and r <= 0.5:
            eps *= 0.5  # step back to the last size that still accepted
            break
        if not grow and r >= 0.5:
            break
        if not (1e-12 < eps < 1e6):
            break
    return float(min(max(eps, 1e-12), 1e3))


_DIVERGENCE_THRESHOLD = 1000.0


def _run_chain(logp_grad, z0, cfg: SamplerConfig, rng: np.random.Generator):
    dim = z0.shape[0]
    warmup = cfg.warmup
    kept = np.empty((cfg.n_kept, dim))
    inv_mass = np.ones(dim)

    eps = _find_initial_step(logp_grad, z0, inv_mass, rng)
    da = _DualAveraging(eps, cfg.target_accept)

    # warmup windows: [0, w1) step size only, [w1, w2) also collects
    # draws for the variance estimate, [w2, warmup) re-adapts the step
    # under the new mass matrix
    if warmup >= 40:
        w1 = max(1, int(0.15 * warmup))
        w2 = max(w1 + 2, int(0.75 * warmup))
    else:
        w1 = w2 = warmup  # too short to estimate a mass matrix
    window: list[np.ndarray] = []

    z = z0.copy()
    lp, _ = logp_grad(z)
    n_accept = 0
    n_divergent = 0
    accept_stat_sum = 0.0
    stall = 0
    kept_idx = 0

    for it in range(cfg.iterations):
        in_warmup = it < warmup
        if in_warmup:
            step = eps
        else:
            # with a fixed step count, a fixed step size can resonate with
            # the target's periods (near-periodic orbits anticorrelate or
            # freeze the chain); smearing the trajectory length over a
            # 2:1 range breaks that for every mode at once
            step = eps * rng.uniform(0.6, 1.2)
        p = rng.standard_normal(dim) / np.sqrt(inv_mass)
        h0 = -lp + 0.5 * float(np.sum(inv_mass * p * p))
        out = _leapfrog(logp_grad, z, p, step, inv_mass, cfg.leapfrog_steps)
        accepted = False
        if out is None:
            accept_prob = 0.0
            if not in_warmup:
                n_divergent += 1
        else:
            z1, p1, lp1, _ = out
            with np.errstate(over="ignore"):  # inf Hamiltonian = divergence
                h1 = -lp1 + 0.5 * float(np.sum(inv_mass * p1 * p1))
            delta = h0 - h1
            if not np.isfinite(delta) or abs(delta) > _DIVERGENCE_THRESHOLD:
                accept_prob = 0.0
                if not in_warmup:
                    n_divergent += 1
            else:
                accept_prob = float(np.exp(min(0.0, delta)))
                if rng.uniform() < accept_prob:
                    z, lp = z1, lp1
                    accepted = True

        if accepted:
            stall = 0
        else:
            stall += 1
            if stall >= cfg.max_stall:
                raise SamplerStall(
                    f"no accepted proposal in {cfg.max_stall} consecutive "
                    f"iterations (iteration {it}, step size {step:.3e}, "
                    f"log posterior {lp:.6g})"
                )

        if in_warmup:
            eps = da.update(accept_prob)
            if w1 <= it < w2:
                window.append(z.copy())
            if it == w2 - 1 and window:
                draws = np.asarray(window)
                nw = draws.shape[0]
                var = draws.var(axis=0, ddof=1) if nw > 1 else np.ones(dim)
                # shrink toward unit scale, as adaptive HMC usually does
                inv_mass = (nw / (nw + 5.0)) * var + 1e-3 * (5.0 / (nw + 5.0))
                inv_mass = np.maximum(inv_mass, 1e-10)
                eps = _find_initial_step(logp_grad, z, inv_mass, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if it == warmup - 1:
                eps = da.eps_bar
        else:
            accept_stat_sum += accept_prob
            if accepted:
                n_accept += 1
            if (it - warmup) % cfg.thin == cfg.thin - 1 and kept_idx < kept.shape[0]:
                kept[kept_idx] = z
                kept_idx += 1

    post = cfg.iterations - warmup
    return {
        "draws": kept[:kept_idx],
        "accept_rate": n_accept / post,
        "mean_accept_prob": accept_stat_sum / post,
        "divergences": n_divergent,
        "step_size": eps,
    }


def run_hmc(
    logp_grad,
    dim: int,
    cfg: SamplerConfig,
    *,
    names: list[str] | None = None,
    transform=None,
    init=None,
) -> PosteriorSamples:
    """Run ``cfg.chains`` independent HMC chains on an arbitrary target.

    ``logp_grad(z) -> (lp, grad)`` defines the (unnormalised) target on
    R^dim; ``transform`` optionally maps an ``(S, dim)`` block of draws
    to the reporting scale.  Chain ``k`` uses the RNG seeded with
    ``cfg.seed + k``; given identical inputs the draws are bit-for-bit
    reproducible.
    """
    names = names or [f"z[{i + 1}]" for i in range(dim)]
    all_chains = []
    accept = np.zeros(cfg.chains)
    mean_acc = np.zeros(cfg.chains)
    diverg = np.zeros(cfg.chains, dtype=np.int64)
    steps = np.zeros(cfg.chains)
    for k in range(cfg.chains):
        rng = np.random.default_rng(cfg.seed + k)
        if init is not None:
            z0 = np.asarray(init, dtype=float).copy()
        else:
            z0 = None
            for _ in range(100):
                cand = rng.uniform(-1.0, 1.0, size=dim)
                lp, grad = logp_grad(cand)
                if np.isfinite(lp) and grad is not None:
                    z0 = cand
                    break
            if z0 is None:
                raise SamplerStall(
                    "could not find a finite starting point in 100 tries"
                )
        res = _run_chain(logp_grad, z0, cfg, rng)
        draws = res["draws"]
        if transform is not None:
            draws = transform(draws)
        all_chains.append(draws)
        accept[k] = res["accept_rate"]
        mean_acc[k] = res["mean_accept_prob"]
        diverg[k] = res["divergences"]
        steps[k] = res["step_size"]
    return PosteriorSamples(
        names=names,
        chains=np.asarray(all_chains),
        accept_rate=accept,
        mean_accept=mean_acc,
        divergences=diverg,
        step_size=steps,
        seed=cfg.seed,
        warmup=cfg.warmup,
        thin=cfg.thin,
    )


def _constrain_block(spec: ModelSpec, draws: np.ndarray) -> np.ndarray:
    """Unconstrained -> constrained map for a block of accepted draws.

    Row-by-row because the proper-CAR spatial block is unwhitened
    through a Cholesky factor that depends on that row's (alpha, tau).
    """
    out = np.empty_like(draws)
    for i, row in enumerate(draws):
        theta = mdl.from_unconstrained(spec, row)
        out[i] = mdl.params_to_array(spec, theta)
    return out


def run_chains(spec: ModelSpec, cfg: SamplerConfig, y=None) -> PosteriorSamples:
    """Sample the posterior of ``spec`` (optionally overriding counts).

    Returns constrained-scale draws named by :func:`model.param_names`.
    """
    if y is not None:
        spec = spec.with_y(y)
    spec.require_y()

    def logp_grad(z):
        return mdl.log_posterior_and_gradient(spec, z)

    return run_hmc(
        logp_grad,
        mdl.dim(spec),
        cfg,
        names=mdl.param_names(spec),
        transform=lambda draws: _constrain_block(spec, draws),
    )

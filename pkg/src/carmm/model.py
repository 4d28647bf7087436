"""Model assembly: likelihoods, priors, parameterisations, gradients.

A :class:`ModelSpec` fixes one Bayesian disease-mapping model: count
likelihood (Poisson or negative binomial), spatial prior (proper CAR,
intrinsic CAR, or none), and the parameterisation of the free spatial
block.  Two parameterisations are supported:

* ``"post"`` - the free block is the areal vector ``phi`` (length n)
  with its CAR prior; membership-level risk is obtained by multiplying
  with the membership matrix afterwards.
* ``"inverse"`` - the free block is the membership-level vector
  ``phi_tilde`` (length m) with the pushforward prior
  ``N(0, H Sigma H')``; this requires ``m <= n`` for the pushforward to
  stay positive definite.

``log_posterior_and_gradient`` works on an unconstrained vector (logit
alpha, log tau, log psi; raw coefficients and spatial block) and returns
the log posterior including transform Jacobians together with its exact
gradient, which is what the HMC sampler consumes.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import digamma, expit, gammaln

from .car import CarParams, CarPrior, car_log_density, sample_prior
from .graph import AdjacencyGraph
from .membership import MembershipMatrix

__all__ = [
    "PriorConfig",
    "ModelSpec",
    "ParamVector",
    "validate_params",
    "param_names",
    "dim",
    "params_to_array",
    "to_unconstrained",
    "from_unconstrained",
    "poisson_log_likelihood",
    "negbin_log_likelihood",
    "log_likelihood",
    "pointwise_log_likelihood",
    "log_prior",
    "log_posterior",
    "log_posterior_and_gradient",
    "membership_log_risk",
    "areal_random_effects",
    "areal_log_risk",
    "risk_draws",
    "pointwise_loglik_draws",
    "replicate_counts_draws",
    "draw_prior_params",
    "simulate_counts",
]

LOG_2PI = float(np.log(2.0 * np.pi))

LIKELIHOODS = ("poisson", "negbin")
PARAMETERISATIONS = ("post", "inverse")
SPATIAL = ("car", "icar", "none")

# linear predictors beyond this are treated as numerically out of range
_ETA_MAX = 500.0


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the fixed priors.

    Intercept and covariate effects get independent ``N(0, coef_sd^2)``
    priors; ``tau`` (spatial precision) and ``psi`` (negative-binomial
    dispersion) get Gamma(shape, rate) priors; ``alpha`` is uniform on
    ``[0, 1)``.
    """

    coef_sd: float = 0.7
    tau_shape: float = 2.0
    tau_rate: float = 0.2
    psi_shape: float = 2.0
    psi_rate: float = 0.2

    def __post_init__(self) -> None:
        for name in ("coef_sd", "tau_shape", "tau_rate", "psi_shape", "psi_rate"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class ModelSpec:
    """One fully specified model, with derived matrices cached.

    Parameters
    ----------
    likelihood : {"poisson", "negbin"}
    parameterisation : {"post", "inverse"}
    spatial : {"car", "icar", "none"}
    graph : AdjacencyGraph or None
        Required for spatial priors; may be None for ``spatial="none"``.
    membership : MembershipMatrix
        The (m, n) matrix linking areas to observed memberships.
    covariates : (n, p) array
        Areal covariate matrix (no intercept column; the intercept is a
        separate parameter).
    offsets : (m,) array
        Expected counts per membership, strictly positive.
    y : (m,) int array or None
        Observed counts; None for a data-free template.
    priors : PriorConfig
    """

    likelihood: str
    parameterisation: str
    spatial: str
    graph: AdjacencyGraph | None
    membership: MembershipMatrix
    covariates: np.ndarray
    offsets: np.ndarray
    y: np.ndarray | None = None
    priors: PriorConfig = PriorConfig()

    # derived caches (built once in __post_init__)
    car: CarPrior | None = field(init=False, repr=False, compare=False)
    _W: np.ndarray | None = field(init=False, repr=False, compare=False)
    _HX: np.ndarray = field(init=False, repr=False, compare=False)
    _log_offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.parameterisation not in PARAMETERISATIONS:
            raise ValueError(f"unknown parameterisation {self.parameterisation!r}")
        if self.spatial not in SPATIAL:
            raise ValueError(f"unknown spatial prior {self.spatial!r}")
        if self.spatial in ("car", "icar"):
            if self.graph is None:
                raise ValueError(f"spatial={self.spatial!r} requires a graph")
            if self.graph.n != self.membership.n:
                raise ValueError(
                    f"graph has {self.graph.n} areas but membership matrix "
                    f"has {self.membership.n} columns"
                )
        if self.parameterisation == "inverse":
            if self.spatial == "icar":
                raise ValueError(
                    "the intrinsic prior is improper, so its membership-level "
                    "pushforward does not exist: use parameterisation='post' "
                    "with spatial='icar'"
                )
            if self.spatial == "car" and self.membership.m > self.membership.n:
                raise ValueError(
                    f"inverse parameterisation needs m <= n for a positive "
                    f"definite pushforward prior (got m={self.membership.m}, "
                    f"n={self.membership.n})"
                )
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim != 2 or X.shape[0] != self.membership.n:
            raise ValueError(
                f"covariates have shape {X.shape}, expected ({self.membership.n}, p)"
            )
        E = np.asarray(self.offsets, dtype=float)
        if E.shape != (self.membership.m,):
            raise ValueError(
                f"offsets have shape {E.shape}, expected ({self.membership.m},)"
            )
        if np.any(E <= 0) or not np.all(np.isfinite(E)):
            raise ValueError("offsets must be finite and strictly positive")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "offsets", E)
        if self.y is not None:
            y = np.asarray(self.y)
            if y.shape != (self.membership.m,):
                raise ValueError(
                    f"y has shape {y.shape}, expected ({self.membership.m},)"
                )
            if np.any(y < 0) or not np.allclose(y, np.round(y)):
                raise ValueError("y must contain non-negative integer counts")
            object.__setattr__(self, "y", y.astype(np.int64))
        prior = CarPrior(self.graph) if self.spatial in ("car", "icar") else None
        object.__setattr__(self, "car", prior)
        object.__setattr__(
            self, "_W", self.graph.adjacency_matrix() if prior is not None else None
        )
        object.__setattr__(self, "_HX", self.membership.weights @ X)
        object.__setattr__(self, "_log_offsets", np.log(E))

    @property
    def n(self) -> int:
        return self.membership.n

    @property
    def m(self) -> int:
        return self.membership.m

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def with_y(self, y) -> "ModelSpec":
        """Same model, new observed counts."""
        return dataclasses.replace(self, y=np.asarray(y))

    def require_y(self) -> np.ndarray:
        if self.y is None:
            raise ValueError("this operation needs observed counts (spec.y is None)")
        return self.y


@dataclass(frozen=True)
class ParamVector:
    """One point in parameter space, in constrained coordinates.

    ``phi`` is the free spatial block: areal (length n) under the post
    parameterisation, membership level (length m) under the inverse
    one, None when the model has no spatial term.  ``alpha``/``tau``
    exist only for spatial priors (``alpha`` only for the proper CAR)
    and ``psi`` only for the negative binomial likelihood.
    """

    gamma: float
    beta: np.ndarray
    phi: np.ndarray | None = None
    alpha: float | None = None
    tau: float | None = None
    psi: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if self.phi is not None:
            object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))


def validate_params(spec: ModelSpec, theta: ParamVector) -> None:
    """Raise ValueError when ``theta`` does not fit ``spec``'s shape/domain."""
    if not np.isfinite(theta.gamma):
        raise ValueError("gamma must be finite")
    if theta.beta.shape != (spec.p,):
        raise ValueError(f"beta has shape {theta.beta.shape}, expected ({spec.p},)")
    block = _phi_length(spec)
    if block == 0:
        if theta.phi is not None:
            raise ValueError("model has no spatial term, but phi was given")
    else:
        if theta.phi is None or theta.phi.shape != (block,):
            got = None if theta.phi is None else theta.phi.shape
            raise ValueError(f"phi has shape {got}, expected ({block},)")
    if spec.spatial == "car":
        if theta.alpha is None or theta.tau is None:
            raise ValueError("CAR models need alpha and tau")
        CarParams(theta.alpha, theta.tau)  # range checks
    elif spec.spatial == "icar":
        if theta.alpha is not None:
            raise ValueError("intrinsic CAR has no alpha parameter")
        if theta.tau is None or theta.tau <= 0 or not np.isfinite(theta.tau):
            raise ValueError(f"tau must be positive, got {theta.tau}")
    else:
        if theta.alpha is not None or theta.tau is not None:
            raise ValueError("non-spatial model has no alpha/tau")
    if spec.likelihood == "negbin":
        if theta.psi is None or theta.psi <= 0 or not np.isfinite(theta.psi):
            raise ValueError(f"psi must be positive, got {theta.psi}")
    elif theta.psi is not None:
        raise ValueError("poisson likelihood has no psi parameter")


def _phi_length(spec: ModelSpec) -> int:
    if spec.spatial == "none":
        return 0
    return spec.m if spec.parameterisation == "inverse" else spec.n


def param_names(spec: ModelSpec) -> list[str]:
    """Flattened constrained-parameter names, in packing order."""
    names = ["gamma"] + [f"beta[{k + 1}]" for k in range(spec.p)]
    block = _phi_length(spec)
    label = "phi_tilde" if spec.parameterisation == "inverse" else "phi"
    names += [f"{label}[{i + 1}]" for i in range(block)]
    if spec.spatial == "car":
        names.append("alpha")
    if spec.spatial in ("car", "icar"):
        names.append("tau")
    if spec.likelihood == "negbin":
        names.append("psi")
    return names


def dim(spec: ModelSpec) -> int:
    """Dimension of the unconstrained parameter vector."""
    d = 1 + spec.p + _phi_length(spec)
    if spec.spatial == "car":
        d += 2
    elif spec.spatial == "icar":
        d += 1
    if spec.likelihood == "negbin":
        d += 1
    return d


def params_to_array(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Pack constrained parameters into :func:`param_names` order."""
    parts = [np.array([theta.gamma]), theta.beta]
    if _phi_length(spec):
        parts.append(theta.phi)
    if spec.spatial == "car":
        parts.append(np.array([theta.alpha]))
    if spec.spatial in ("car", "icar"):
        parts.append(np.array([theta.tau]))
    if spec.likelihood == "negbin":
        parts.append(np.array([theta.psi]))
    return np.concatenate(parts)


@functools.lru_cache(maxsize=8)
def _half_lower_mask(n: int) -> np.ndarray:
    mask = np.tril(np.ones((n, n)))
    np.fill_diagonal(mask, 0.5)
    mask.setflags(write=False)
    return mask


def _chol_half(M: np.ndarray) -> np.ndarray:
    """Lower triangle of ``M`` with the diagonal halved.

    If ``B = L L'`` then ``dL = L * _chol_half(L^{-1} dB L^{-T})``: the
    off-diagonal of ``L^{-1} dL`` comes from the lower triangle and the
    diagonal is shared equally between the two factors.
    """
    return M * _half_lower_mask(M.shape[0])


def _car_cholesky(spec: ModelSpec, alpha: float) -> np.ndarray:
    """Lower Cholesky factor of ``A = D - alpha W`` (LinAlgError if not PD)."""
    A = -alpha * spec._W
    np.fill_diagonal(A, spec.car.degrees)
    return scipy.linalg.cholesky(A, lower=True, check_finite=False)


def _mm_prior_cholesky(spec: ModelSpec, alpha: float):
    """``(L_B, Ainv)`` with ``B = H (D - alpha W)^{-1} H' = L_B L_B'``."""
    A = -alpha * spec._W
    np.fill_diagonal(A, spec.car.degrees)
    Ainv = np.linalg.inv(A)
    Hw = spec.membership.weights
    B = Hw @ Ainv @ Hw.T
    B = 0.5 * (B + B.T)
    return scipy.linalg.cholesky(B, lower=True, check_finite=False), Ainv


def to_unconstrained(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Map constrained parameters to the sampler's unconstrained space.

    Uses logit(alpha), log(tau), log(psi).  The proper-CAR spatial block
    is whitened against its own prior -- ``z = sqrt(tau) L' phi`` (post)
    or ``z = sqrt(tau) L_B^{-1} phi_tilde`` (inverse) -- so the sampler
    sees a standard-normal block whatever (alpha, tau) are; this keeps
    the step size useful across the whole hyperparameter range.  The
    intrinsic block passes through (it is centred on the way back).
    """
    validate_params(spec, theta)
    parts = [np.array([theta.gamma]), theta.beta]
    if spec.spatial == "icar":
        parts.append(theta.phi)
    elif spec.spatial == "car":
        if not (0.0 < theta.alpha < 1.0):
            raise ValueError(f"alpha={theta.alpha} not strictly inside (0, 1)")
        root_tau = np.sqrt(theta.tau)
        if spec.parameterisation == "post":
            L = _car_cholesky(spec, theta.alpha)
            parts.append(root_tau * (L.T @ theta.phi))
        else:
            L_B, _ = _mm_prior_cholesky(spec, theta.alpha)
            parts.append(
                root_tau
                * scipy.linalg.solve_triangular(L_B, theta.phi, lower=True)
            )
        parts.append(np.array([np.log(theta.alpha) - np.log1p(-theta.alpha)]))
    if spec.spatial in ("car", "icar"):
        parts.append(np.array([np.log(theta.tau)]))
    if spec.likelihood == "negbin":
        parts.append(np.array([np.log(theta.psi)]))
    return np.concatenate(parts)


def from_unconstrained(spec: ModelSpec, z: np.ndarray) -> ParamVector:
    """Inverse of :func:`to_unconstrained`.

    The intrinsic block is centred here, so every returned ``phi``
    satisfies the sum-to-zero constraint; the proper-CAR block is
    un-whitened through the prior Cholesky factor at this draw's
    ``(alpha, tau)``.  Raises ``LinAlgError`` where that factor does not
    exist (``alpha`` rounded onto 1); callers treat it as a rejection.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (dim(spec),):
        raise ValueError(f"z has shape {z.shape}, expected ({dim(spec)},)")
    pos = 0
    gamma = float(z[pos])
    pos += 1
    beta = z[pos : pos + spec.p].copy()
    pos += spec.p
    block = _phi_length(spec)
    raw = z[pos : pos + block]
    pos += block
    alpha = tau = psi = None
    phi = None
    with np.errstate(over="ignore", invalid="ignore"):  # rejected upstream
        if spec.spatial == "car":
            alpha = float(expit(z[pos]))
            pos += 1
        if spec.spatial in ("car", "icar"):
            tau = float(np.exp(z[pos]))
            pos += 1
        if spec.likelihood == "negbin":
            psi = float(np.exp(z[pos]))
            pos += 1
        if spec.spatial == "icar":
            phi = raw - raw.mean()
        elif spec.spatial == "car":
            scale = 1.0 / np.sqrt(tau) if 0.0 < tau < np.inf else np.nan
            if spec.parameterisation == "post":
                L = _car_cholesky(spec, alpha)
                phi = scale * scipy.linalg.solve_triangular(
                    L, raw, trans="T", lower=True
                )
            else:
                L_B, _ = _mm_prior_cholesky(spec, alpha)
                phi = scale * (L_B @ raw)
    return ParamVector(gamma=gamma, beta=beta, phi=phi, alpha=alpha, tau=tau, psi=psi)


def membership_log_risk(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Membership-level log relative risk, shape (m,).

    Post parameterisation: ``H (gamma + X beta + phi)``; because ``H``
    is row stochastic this equals ``gamma + (H X) beta + H phi``, which
    is the form used.  Inverse parameterisation replaces ``H phi`` with
    the free membership-level block itself.
    """
    eta = theta.gamma + spec._HX @ theta.beta
    if theta.phi is not None:
        if spec.parameterisation == "inverse":
            eta = eta + theta.phi
        else:
            eta = eta + spec.membership.weights @ theta.phi
    return eta


def areal_random_effects(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Areal spatial effects, shape (n).

    Under the inverse parameterisation the areal vector is recovered
    from the membership-level block with the Moore-Penrose pseudoinverse
    of ``H`` (exact when ``m >= n``; the minimum-norm representative
    otherwise).
    """
    if theta.phi is None:
        return np.zeros(spec.n)
    if spec.parameterisation == "inverse":
        return np.linalg.pinv(spec.membership.weights) @ theta.phi
    return theta.phi


def areal_log_risk(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Areal log relative risk ``gamma + X beta + phi``, shape (n,).

    For inverse-parameterised specs the random-effect term is the
    Moore-Penrose recovery of the membership-level block; the intercept
    and covariate contributions enter at areal level exactly.  (This is
    the generative assembly -- posterior *draws* of areal risks from an
    inverse fit instead go through :func:`risk_draws`, which applies the
    generalized inverse to the whole membership log risk.)
    """
    return theta.gamma + spec.covariates @ theta.beta + areal_random_effects(spec, theta)


def _poisson_terms(y, log_mu, mu):
    return y * log_mu - mu - gammaln(y + 1.0)

def _negbin_terms(y, log_mu, mu, psi):
    log_mu_psi = np.logaddexp(log_mu, np.log(psi))
    return (
        gammaln(y + psi)
        - gammaln(psi)
        - gammaln(y + 1.0)
        + y * (log_mu - log_mu_psi)
        + psi * (np.log(psi) - log_mu_psi)
    )


def pointwise_log_likelihood(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Per-membership log likelihood contributions, shape (m,)."""
    y = spec.require_y()
    log_mu = spec._log_offsets + membership_log_risk(spec, theta)
    mu = np.exp(log_mu)
    if spec.likelihood == "poisson":
        return _poisson_terms(y, log_mu, mu)
    return _negbin_terms(y, log_mu, mu, theta.psi)


def poisson_log_likelihood(spec: ModelSpec, theta: ParamVector) -> float:
    """Total Poisson log likelihood ``sum_j log Pois(y_j; E_j rho_j)``."""
    if spec.likelihood != "poisson":
        raise ValueError(f"spec has likelihood {spec.likelihood!r}")
    validate_params(spec, theta)
    return float(np.sum(pointwise_log_likelihood(spec, theta)))


def negbin_log_likelihood(spec: ModelSpec, theta: ParamVector) -> float:
    """Total negative-binomial log likelihood with dispersion ``psi``.

    Mean ``mu = E rho``, variance ``mu + mu^2 / psi``.
    """
    if spec.likelihood != "negbin":
        raise ValueError(f"spec has likelihood {spec.likelihood!r}")
    validate_params(spec, theta)
    return float(np.sum(pointwise_log_likelihood(spec, theta)))


def log_likelihood(spec: ModelSpec, theta: ParamVector) -> float:
    """Dispatch to the spec's likelihood family."""
    validate_params(spec, theta)
    return float(np.sum(pointwise_log_likelihood(spec, theta)))


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    return float(
        shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    )


def _inverse_prior_pieces(spec: ModelSpec, alpha: float, tau: float):
    """Cholesky machinery for the pushforward prior ``N(0, H Sigma H')``.

    Returns ``(cho, logdet_B)`` where ``B = H (D - alpha W)^{-1} H'`` so
    that ``Sigma_tilde = B / tau``.
    """
    prior = spec.car
    A = -alpha * spec._W
    np.fill_diagonal(A, prior.degrees)
    Ainv = np.linalg.inv(A)
    Hw = spec.membership.weights
    B = Hw @ Ainv @ Hw.T
    B = 0.5 * (B + B.T)
    cho = scipy.linalg.cho_factor(B)
    logdet_B = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    return cho, logdet_B, Ainv


def log_prior(spec: ModelSpec, theta: ParamVector) -> float:
    """Joint log prior density at ``theta`` (constrained coordinates).

    Proper terms carry their normalising constants; the intrinsic CAR
    contributes its rank-aware ``(n - 1)/2 log tau`` plus the pairwise
    difference kernel, which is the standard constrained-subspace form.
    """
    validate_params(spec, theta)
    pc = spec.priors
    sd = pc.coef_sd
    g = theta.gamma / sd
    b = theta.beta / sd
    lp = -0.5 * LOG_2PI - np.log(sd) - 0.5 * g * g
    lp += spec.p * (-0.5 * LOG_2PI - np.log(sd)) - 0.5 * float(b @ b)
    if spec.spatial == "car":
        # alpha ~ Uniform(0, 1) contributes 0 inside the support
        lp += _gamma_logpdf(theta.tau, pc.tau_shape, pc.tau_rate)
        if spec.parameterisation == "post":
            lp += car_log_density(spec.car, CarParams(theta.alpha, theta.tau), theta.phi)
        else:
            cho, logdet_B, _ = _inverse_prior_pieces(spec, theta.alpha, theta.tau)
            quad = theta.tau * float(theta.phi @ scipy.linalg.cho_solve(cho, theta.phi))
            logdet_Q = spec.m * np.log(theta.tau) - logdet_B
            lp += -0.5 * spec.m * LOG_2PI + 0.5 * logdet_Q - 0.5 * quad
    elif spec.spatial == "icar":
        lp += _gamma_logpdf(theta.tau, pc.tau_shape, pc.tau_rate)
        ei, ej = spec.graph.edge_arrays()
        diff = theta.phi[ei] - theta.phi[ej]
        lp += 0.5 * (spec.n - 1) * np.log(theta.tau) - 0.5 * theta.tau * float(diff @ diff)
    if spec.likelihood == "negbin":
        lp += _gamma_logpdf(theta.psi, pc.psi_shape, pc.psi_rate)
    return float(lp)


def log_posterior(spec: ModelSpec, theta: ParamVector) -> float:
    """``log_likelihood + log_prior`` in constrained coordinates."""
    return log_likelihood(spec, theta) + log_prior(spec, theta)


def log_posterior_and_gradient(
    spec: ModelSpec, z: np.ndarray
) -> tuple[float, np.ndarray | None]:
    """Log posterior and exact gradient on the unconstrained scale.

    The returned value includes the log Jacobians of the logit/log
    transforms, so the sampler targets the correct distribution.  Points
    where the density is numerically out of range return
    ``(-inf, None)`` and are rejected by the sampler without a gradient.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        return -np.inf, None
    pc = spec.priors
    y = spec.require_y()
    grad = np.zeros_like(z)
    pos_gamma = 0
    pos_beta = slice(1, 1 + spec.p)
    block = _phi_length(spec)
    pos_phi = slice(1 + spec.p, 1 + spec.p + block)
    pos = 1 + spec.p + block
    pos_a = pos_t = pos_s = None
    if spec.spatial == "car":
        pos_a, pos_t, pos = pos, pos + 1, pos + 2
    elif spec.spatial == "icar":
        pos_t, pos = pos, pos + 1
    if spec.likelihood == "negbin":
        pos_s = pos

    # Parse z in place (same map as from_unconstrained) so the prior
    # Cholesky factor is computed once and shared with the gradient.
    # Extreme unconstrained values can push the positive parameters to
    # the closed boundary in floating point; those points have zero
    # posterior mass and are rejected outright.
    alpha = tau = psi = phi = None
    L = L_B = Ainv = None
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.spatial == "car":
            alpha = float(expit(z[pos_a]))
            if not 0.0 < alpha < 1.0:
                return -np.inf, None
        if spec.spatial in ("car", "icar"):
            tau = float(np.exp(z[pos_t]))
            if not 0.0 < tau < np.inf:
                return -np.inf, None
        if spec.likelihood == "negbin":
            psi = float(np.exp(z[pos_s]))
            if not 0.0 < psi < np.inf:
                return -np.inf, None
        if spec.spatial == "icar":
            phi = z[pos_phi] - z[pos_phi].mean()
        elif spec.spatial == "car":
            try:
                if spec.parameterisation == "post":
                    L = _car_cholesky(spec, alpha)
                    phi = scipy.linalg.solve_triangular(
                        L, z[pos_phi], trans="T", lower=True, check_finite=False
                    ) / np.sqrt(tau)
                else:
                    L_B, Ainv = _mm_prior_cholesky(spec, alpha)
                    phi = (L_B @ z[pos_phi]) / np.sqrt(tau)
            except np.linalg.LinAlgError:
                # alpha rounded onto 1: the prior factor does not exist
                return -np.inf, None
            if not np.all(np.isfinite(phi)):
                return -np.inf, None
    theta = ParamVector(
        gamma=float(z[0]), beta=z[pos_beta], phi=phi, alpha=alpha, tau=tau, psi=psi
    )

    # --- likelihood and d loglik / d eta ---
    eta = membership_log_risk(spec, theta)
    log_mu = spec._log_offsets + eta
    if np.any(log_mu > _ETA_MAX):
        return -np.inf, None
    with np.errstate(over="ignore"):  # inf sums become plain rejections
        mu = np.exp(log_mu)
        if spec.likelihood == "poisson":
            lp = float(np.sum(_poisson_terms(y, log_mu, mu)))
            u = y - mu
        else:
            psi = theta.psi
            lp = float(np.sum(_negbin_terms(y, log_mu, mu, psi)))
            u = y - mu * (y + psi) / (mu + psi)
            dl_dpsi = float(
                np.sum(
                    digamma(y + psi)
                    - digamma(psi)
                    + np.log(psi)
                    - np.logaddexp(log_mu, np.log(psi))
                    + (mu - y) / (mu + psi)
                )
            )
    if not np.isfinite(lp):
        return -np.inf, None

    # --- chain rule through the linear predictor ---
    grad[pos_gamma] = float(np.sum(u))
    grad[pos_beta] = spec._HX.T @ u
    if block:
        if spec.parameterisation == "inverse":
            grad_phi = u.copy()
        else:
            grad_phi = spec.membership.weights.T @ u

    # --- coefficient priors ---
    # squares via products: Python's float ** raises OverflowError where
    # plain multiplication yields inf, and inf is just a rejection here
    sd = pc.coef_sd
    g = theta.gamma / sd
    b = theta.beta / sd
    with np.errstate(over="ignore"):
        lp += -0.5 * LOG_2PI - np.log(sd) - 0.5 * g * g
        lp += spec.p * (-0.5 * LOG_2PI - np.log(sd)) - 0.5 * float(b @ b)
    grad[pos_gamma] -= theta.gamma / sd**2
    grad[pos_beta] -= theta.beta / sd**2

    # --- spatial block prior, alpha, tau ---
    # The sampling-space block is whitened (z_phi standard normal a
    # priori; from_unconstrained rescales through the prior Cholesky
    # factor), so the block prior is free of (alpha, tau) and all the
    # hyperparameter sensitivity enters through the likelihood term.
    if spec.spatial == "car":
        z_phi = z[pos_phi]
        root_tau = np.sqrt(tau)
        dl_dtau = _dgamma_dx(tau, pc.tau_shape, pc.tau_rate)
        lp += _gamma_logpdf(tau, pc.tau_shape, pc.tau_rate)
        with np.errstate(over="ignore"):
            lp += -0.5 * block * LOG_2PI - 0.5 * float(z_phi @ z_phi)
            if spec.parameterisation == "post":
                # phi = L^{-T} z / sqrt(tau):
                #   d loglik/d z     = L^{-1} (H' u) / sqrt(tau)
                #   d loglik/d alpha via dL = L Phi(L^{-1} dA L^{-T}), dA = -W
                g_lik = scipy.linalg.solve_triangular(
                    L, grad_phi, lower=True, check_finite=False
                ) / root_tau
                T1 = scipy.linalg.solve_triangular(
                    L, spec._W, lower=True, check_finite=False
                )
                G = scipy.linalg.solve_triangular(
                    L, T1.T, lower=True, check_finite=False
                )
                dl_dalpha = float(g_lik @ (_chol_half(G).T @ z_phi))
            else:
                # phi_tilde = L_B z / sqrt(tau), B = H A^{-1} H':
                #   dB/dalpha = H A^{-1} W A^{-1} H'
                g_lik = (L_B.T @ grad_phi) / root_tau
                Hw = spec.membership.weights
                AH = Ainv @ Hw.T
                dB = AH.T @ spec._W @ AH
                T1 = scipy.linalg.solve_triangular(
                    L_B, dB, lower=True, check_finite=False
                )
                G = scipy.linalg.solve_triangular(
                    L_B, T1.T, lower=True, check_finite=False
                )
                dl_dalpha = float(g_lik @ (_chol_half(G) @ z_phi))
            # phi scales as 1/sqrt(tau): d phi/d tau = -phi / (2 tau)
            dl_dtau += -0.5 * float(grad_phi @ phi) / tau
            grad_phi = g_lik - z_phi
        # transform chain rule + Jacobian terms
        lp += np.log(alpha) + np.log1p(-alpha)  # d alpha / d logit
        grad[pos_a] = dl_dalpha * alpha * (1.0 - alpha) + (1.0 - 2.0 * alpha)
        lp += np.log(tau)
        grad[pos_t] = dl_dtau * tau + 1.0
    elif spec.spatial == "icar":
        tau, phi = theta.tau, theta.phi  # phi already centred
        ei, ej = spec.graph.edge_arrays()
        diff = phi[ei] - phi[ej]
        quad = float(diff @ diff)
        lp += _gamma_logpdf(tau, pc.tau_shape, pc.tau_rate)
        lp += 0.5 * (spec.n - 1) * np.log(tau) - 0.5 * tau * quad
        d = spec.car.degrees
        grad_phi = grad_phi - grad_phi.mean()  # project through the centring map
        with np.errstate(over="ignore"):
            grad_phi += -tau * (d * phi - spec._W @ phi)
        # The centred density is flat along the constant direction of the
        # raw block; give that direction a standard-normal factor so the
        # sampling-space target stays proper.  The centred phi marginal
        # is unchanged because the factor involves only the block mean.
        s = float(np.sum(z[pos_phi]))
        lp += -0.5 * s * s / spec.n
        grad_phi += -s / spec.n
        dl_dtau = _dgamma_dx(tau, pc.tau_shape, pc.tau_rate)
        dl_dtau += 0.5 * (spec.n - 1) / tau - 0.5 * quad
        lp += np.log(tau)
        grad[pos_t] = dl_dtau * tau + 1.0

    if block:
        grad[pos_phi] = grad_phi

    # --- dispersion prior ---
    if spec.likelihood == "negbin":
        psi = theta.psi
        lp += _gamma_logpdf(psi, pc.psi_shape, pc.psi_rate)
        dl_dpsi += _dgamma_dx(psi, pc.psi_shape, pc.psi_rate)
        lp += np.log(psi)
        grad[pos_s] = dl_dpsi * psi + 1.0

    if not np.isfinite(lp):
        return -np.inf, None
    return float(lp), grad


def _dgamma_dx(x: float, shape: float, rate: float) -> float:
    return (shape - 1.0) / x - rate


def risk_draws(spec: ModelSpec, draws: np.ndarray):
    """Areal effects, areal risks, membership risks for a draw matrix.

    ``draws`` is a stacked ``(S, k)`` matrix of constrained draws in
    :func:`param_names` order.  Returns ``(phi_areal, rho, rho_tilde)``
    with shapes ``(S, n)``, ``(S, n)``, ``(S, m)``.  For inverse fits
    the areal effects are the Moore-Penrose recovery from the
    membership-level block, and the areal risks are the generalized
    inverse applied to the membership log risks (see
    :func:`areal_log_risk`); for ``m < n`` that map is not a left
    inverse, so the recovered risks carry a reconstruction error.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != dim(spec):
        raise ValueError(f"draws have shape {draws.shape}, expected (S, {dim(spec)})")
    gamma = draws[:, 0]
    beta = draws[:, 1 : 1 + spec.p]
    block = draws[:, 1 + spec.p : 1 + spec.p + _phi_length(spec)]
    Hw = spec.membership.weights
    fixed_t = gamma[:, None] + beta @ spec._HX.T
    if spec.spatial == "none":
        phi_areal = np.zeros((draws.shape[0], spec.n))
        log_rho_t = fixed_t
        log_rho = gamma[:, None] + beta @ spec.covariates.T
    elif spec.parameterisation == "inverse":
        pinv_t = np.linalg.pinv(Hw).T
        phi_areal = block @ pinv_t
        log_rho_t = fixed_t + block
        log_rho = log_rho_t @ pinv_t
    else:
        phi_areal = block
        log_rho_t = fixed_t + block @ Hw.T
        log_rho = gamma[:, None] + beta @ spec.covariates.T + phi_areal
    return phi_areal, np.exp(log_rho), np.exp(log_rho_t)


def pointwise_loglik_draws(spec: ModelSpec, draws: np.ndarray) -> np.ndarray:
    """Pointwise log likelihood for every draw, shape ``(S, m)``.

    Vectorised version of :func:`pointwise_log_likelihood` used for
    importance-sampling cross-validation.
    """
    y = spec.require_y()
    _, _, rho_t = risk_draws(spec, draws)
    log_mu = spec._log_offsets + np.log(rho_t)
    mu = spec.offsets * rho_t
    if spec.likelihood == "poisson":
        return _poisson_terms(y, log_mu, mu)
    psi = draws[:, param_names(spec).index("psi")][:, None]
    return _negbin_terms(y, log_mu, mu, psi)


def replicate_counts_draws(spec: ModelSpec, draws: np.ndarray, rng) -> np.ndarray:
    """One simulated dataset per posterior draw, shape ``(S, m)``."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    _, _, rho_t = risk_draws(spec, draws)
    mu = spec.offsets * rho_t
    if spec.likelihood == "poisson":
        return rng.poisson(mu)
    psi = draws[:, param_names(spec).index("psi")][:, None]
    return rng.negative_binomial(psi, psi / (psi + mu))


def draw_prior_params(spec: ModelSpec, rng) -> ParamVector:
    """Sample one parameter vector from the joint prior.

    Usable for data simulation and calibration studies.  The intrinsic
    prior is improper and cannot be sampled, so ``spatial="icar"``
    raises.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    pc = spec.priors
    gamma = float(rng.normal(0.0, pc.coef_sd))
    beta = rng.normal(0.0, pc.coef_sd, size=spec.p)
    phi = alpha = tau = psi = None
    if spec.spatial == "icar":
        raise ValueError("cannot sample from the improper intrinsic prior")
    if spec.spatial == "car":
        alpha = float(rng.uniform(0.0, 1.0))
        tau = float(rng.gamma(spec.priors.tau_shape, 1.0 / spec.priors.tau_rate))
        params = CarParams(alpha, tau)
        if spec.parameterisation == "post":
            phi = sample_prior(spec.car, params, rng)[0]
        else:
            # Sigma_tilde = H (tau (D - alpha W))^{-1} H'; draw via Cholesky
            Hw = spec.membership.weights
            A = -alpha * spec._W
            np.fill_diagonal(A, spec.car.degrees)
            B = Hw @ np.linalg.inv(A) @ Hw.T
            B = 0.5 * (B + B.T)
            Lb = np.linalg.cholesky(B / tau)
            phi = Lb @ rng.standard_normal(spec.m)
    if spec.likelihood == "negbin":
        psi = float(rng.gamma(pc.psi_shape, 1.0 / pc.psi_rate))
    return ParamVector(gamma=gamma, beta=beta, phi=phi, alpha=alpha, tau=tau, psi=psi)


def simulate_counts(spec: ModelSpec, theta: ParamVector, rng) -> np.ndarray:
    """Draw membership-level counts given parameters, shape (m,).

    Poisson: ``y_j ~ Pois(E_j rho_j)``.  Negative binomial uses the
    (psi, psi / (psi + mu)) parameterisation, matching the likelihood's
    mean/variance relation.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mu = spec.offsets * np.exp(membership_log_risk(spec, theta))
    if spec.likelihood == "poisson":
        return rng.poisson(mu)
    p = theta.psi / (theta.psi + mu)
    return rng.negative_binomial(theta.psi, p)

"""Proper and intrinsic conditional autoregressive (CAR) priors.

A proper CAR prior over areal effects ``phi`` is the zero-mean Gaussian
with precision ``Q = tau * (D - alpha * W)``, where ``W`` is the binary
adjacency matrix, ``D = diag(W 1)`` holds neighbour counts, ``alpha`` in
``[0, 1)`` controls spatial dependence and ``tau > 0`` is the precision
scale.  The intrinsic (ICAR) variant is the improper ``alpha -> 1``
limit, used with a sum-to-zero constraint.

The module also provides the classical conditional specification of a
multivariate Gaussian through a ``(C, M)`` pair, together with the four
conditions under which such a pair yields a valid joint covariance
``(I - C)^{-1} M``, and the reverse extraction of ``(C, M)`` from a
covariance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .graph import AdjacencyGraph

__all__ = [
    "CarParams",
    "CarPrior",
    "CarPair",
    "build_precision",
    "log_det_precision",
    "car_log_density",
    "icar_log_density_unnormalized",
    "sample_prior",
    "validate_car_pair",
    "extract_car_pair",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CarParams:
    """Dependence and precision parameters of a proper CAR prior.

    ``alpha`` must lie in ``[0, 1)`` (the proper range; the eigenvalue
    bound then keeps ``D - alpha W`` positive definite) and ``tau`` must
    be strictly positive.
    """

    alpha: float
    tau: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or not (0.0 <= self.alpha < 1.0):
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if not np.isfinite(self.tau) or self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class CarPrior:
    """CAR prior attached to a graph, with cached spectral quantities.

    At construction the eigenvalues of ``D^{-1/2} W D^{-1/2}`` are
    computed once; log-determinants for any ``(alpha, tau)`` are then
    O(n) via ``log det Q = n log tau + sum_i log d_i + sum_i log(1 - alpha lam_i)``.
    """

    graph: AdjacencyGraph
    degrees: np.ndarray = field(init=False, repr=False, compare=False)
    eigenvalues: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        d = self.graph.degrees.astype(float)
        W = self.graph.adjacency_matrix()
        scale = 1.0 / np.sqrt(d)
        lam = np.linalg.eigvalsh(scale[:, None] * W * scale[None, :])
        object.__setattr__(self, "degrees", d)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def n(self) -> int:
        return self.graph.n


def build_precision(prior: CarPrior, params: CarParams) -> np.ndarray:
    """Dense precision matrix ``tau * (D - alpha * W)``, shape ``(n, n)``."""
    Q = -params.alpha * prior.graph.adjacency_matrix()
    np.fill_diagonal(Q, prior.degrees)
    return params.tau * Q


def log_det_precision(prior: CarPrior, params: CarParams) -> float:
    """Log-determinant of the CAR precision via the cached eigenvalues."""
    one_minus = 1.0 - params.alpha * prior.eigenvalues
    if np.any(one_minus <= 0.0):
        raise ValueError(
            f"precision not positive definite: alpha={params.alpha} reaches "
            f"an eigenvalue bound of {1.0 / prior.eigenvalues.max():.6f}"
        )
    return float(
        prior.n * np.log(params.tau)
        + np.sum(np.log(prior.degrees))
        + np.sum(np.log(one_minus))
    )


def _car_quadratic(prior: CarPrior, params: CarParams, phi: np.ndarray) -> float:
    """``phi' Q phi`` assembled from the edge list (no dense matmul)."""
    ei, ej = prior.graph.edge_arrays()
    diag_part = float(np.sum(prior.degrees * phi * phi))
    cross_part = float(phi[ei] @ phi[ej])
    return params.tau * (diag_part - 2.0 * params.alpha * cross_part)


def car_log_density(prior: CarPrior, params: CarParams, phi) -> float:
    """Exact log density of ``phi`` under the proper CAR prior.

    ``log p(phi) = -n/2 log(2 pi) + 1/2 log det Q - 1/2 phi' Q phi``.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (prior.n,):
        raise ValueError(f"phi has shape {phi.shape}, expected ({prior.n},)")
    return (
        -0.5 * prior.n * LOG_2PI
        + 0.5 * log_det_precision(prior, params)
        - 0.5 * _car_quadratic(prior, params, phi)
    )


def icar_log_density_unnormalized(
    graph: AdjacencyGraph, tau: float, phi, sum_tol: float = 1e-8
) -> float:
    """Unnormalised intrinsic CAR log density on the sum-to-zero subspace.

    Returns ``-(tau / 2) * sum_{(i,j) in edges} (phi_i - phi_j)^2``.  The
    intrinsic prior is improper on R^n, so ``phi`` must satisfy the
    identifying constraint ``sum_i phi_i = 0`` (within ``sum_tol``);
    violating inputs raise rather than silently evaluating the kernel.
    """
    if tau <= 0.0 or not np.isfinite(tau):
        raise ValueError(f"tau must be positive, got {tau}")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (graph.n,):
        raise ValueError(f"phi has shape {phi.shape}, expected ({graph.n},)")
    total = float(phi.sum())
    if abs(total) > sum_tol:
        raise ValueError(
            f"sum-to-zero constraint violated: sum(phi) = {total:.3e} "
            f"exceeds tolerance {sum_tol:.1e}"
        )
    ei, ej = graph.edge_arrays()
    diff = phi[ei] - phi[ej]
    return -0.5 * tau * float(diff @ diff)


def sample_prior(
    prior: CarPrior, params: CarParams, rng, size: int = 1
) -> np.ndarray:
    """Draw exact samples from the CAR prior, shape ``(size, n)``.

    ``rng`` is a :class:`numpy.random.Generator` or a seed for one.  The
    draw solves ``L' phi = z`` with ``Q = L L'`` the Cholesky factor of
    the precision, so each sample costs one triangular solve.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    Q = build_precision(prior, params)
    L = np.linalg.cholesky(Q)
    z = rng.standard_normal((prior.n, size))
    phi = scipy.linalg.solve_triangular(L, z, trans="T", lower=True)
    return phi.T


@dataclass(frozen=True)
class CarPair:
    """Conditional specification ``(C, M)`` of a joint Gaussian.

    ``C`` holds the conditional-mean weights and ``M`` the diagonal
    conditional variances: ``phi_i | phi_{-i} ~ N(sum_j C_ij phi_j, M_ii)``.
    The implied joint covariance is ``(I - C)^{-1} M`` when the validity
    conditions checked by :func:`validate_car_pair` hold.
    """

    C: np.ndarray
    M: np.ndarray

    def __post_init__(self) -> None:
        C = np.asarray(self.C, dtype=float)
        M = np.asarray(self.M, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"C must be square, got shape {C.shape}")
        if M.shape != C.shape:
            raise ValueError(f"M shape {M.shape} does not match C shape {C.shape}")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "M", M)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def joint_covariance(self) -> np.ndarray:
        """``(I - C)^{-1} M``, the covariance the pair induces."""
        ok, why = validate_car_pair(self)
        if not ok:
            raise ValueError(f"invalid conditional pair: {why}")
        return np.linalg.solve(np.eye(self.n) - self.C, self.M)


def validate_car_pair(pair: CarPair, tol: float = 1e-10) -> tuple[bool, str | None]:
    """Check the four validity conditions of a conditional ``(C, M)`` pair.

    Returns ``(True, None)`` if all hold within ``tol``, else ``(False,
    reason)`` naming the first violated condition:

    1. ``I - C`` has (strictly) positive eigenvalues;
    2. ``M`` is diagonal with positive entries;
    3. ``C`` has a zero diagonal;
    4. ``C_ij / M_ii == C_ji / M_jj`` (symmetry of ``M^{-1} C``).
    """
    C, M, n = pair.C, pair.M, pair.n
    eig = np.linalg.eigvals(np.eye(n) - C)
    if np.any(eig.real <= tol) or np.any(np.abs(eig.imag) > tol * max(1.0, np.abs(eig.real).max())):
        return False, "condition 1: I - C must have positive eigenvalues"
    m_diag = np.diag(M)
    if np.any(np.abs(M - np.diag(m_diag)) > tol):
        return False, "condition 2: M must be diagonal"
    if np.any(m_diag <= tol):
        return False, "condition 2: M must have positive diagonal entries"
    if np.any(np.abs(np.diag(C)) > tol):
        return False, "condition 3: C must have a zero diagonal"
    ratio = C / m_diag[:, None]  # row i divided by M_ii
    if np.any(np.abs(ratio - ratio.T) > tol * max(1.0, np.abs(ratio).max())):
        return False, "condition 4: C_ij / M_ii must equal C_ji / M_jj"
    return True, None


def extract_car_pair(sigma) -> CarPair:
    """Recover the conditional ``(C, M)`` pair of a covariance matrix.

    For positive-definite ``sigma`` with precision ``Q = sigma^{-1}``,
    the conditional variances are ``M_ii = 1 / Q_ii`` and the weights
    ``C = I - M Q`` (zero diagonal by construction).  Round-trips with
    ``CarPair.joint_covariance``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    if np.any(np.abs(sigma - sigma.T) > 1e-10 * max(1.0, np.abs(sigma).max())):
        raise ValueError("sigma must be symmetric")
    try:
        cho = scipy.linalg.cho_factor(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"sigma is not positive definite: {exc}") from exc
    Q = scipy.linalg.cho_solve(cho, np.eye(sigma.shape[0]))
    m_diag = 1.0 / np.diag(Q)
    C = np.eye(sigma.shape[0]) - m_diag[:, None] * Q
    np.fill_diagonal(C, 0.0)  # exact zeros rather than rounding residue
    return CarPair(C=C, M=np.diag(m_diag))

"""Multiple-membership structures linking areal effects to observed units.

Outcomes are recorded for *memberships* (e.g. practice populations or
overlapping catchments), each of which spreads over several areas.  A
row-stochastic matrix ``H`` of shape ``(m, n)`` carries areal quantities
onto membership level: the membership log relative risk is
``H (gamma + X beta + phi)`` and an areal covariance ``Sigma`` pushes
forward to ``H Sigma H'``.

The linear-algebra facts that matter for identifiability live here too:
a left inverse of ``H`` exists iff ``m >= n`` (then areal structure is
recoverable from membership level), while for ``m < n`` infinitely many
areal covariances are compatible with the same pushforward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import AdjacencyGraph, second_order_neighbours

__all__ = [
    "MembershipMatrix",
    "SimulationFailure",
    "simulate_membership_matrix",
    "left_inverse",
    "generalized_inverse_family",
    "pushforward_covariance",
    "recover_areal_covariance",
    "mm_log_relative_risk",
    "read_membership_csv",
    "write_membership_csv",
]

_RANK_TOL = 1e-10
_ROW_SUM_TOL = 1e-12

# Weight split used when simulating membership rows: half the mass on the
# anchor area, the rest shared between its first- and second-order
# neighbourhoods.
ANCHOR_WEIGHT = 0.5
FIRST_ORDER_WEIGHT = 0.35
SECOND_ORDER_WEIGHT = 0.15


class SimulationFailure(RuntimeError):
    """Raised when membership simulation cannot satisfy its constraints."""


def _validate_weights(weights: np.ndarray) -> None:
    m, n = weights.shape
    if m < 1 or n < 2:
        raise ValueError(f"membership matrix shape {weights.shape} is degenerate")
    if not np.all(np.isfinite(weights)):
        raise ValueError("membership weights must be finite")
    if np.any(weights < -_ROW_SUM_TOL) or np.any(weights > 1.0 + _ROW_SUM_TOL):
        bad = np.argwhere((weights < -_ROW_SUM_TOL) | (weights > 1.0 + _ROW_SUM_TOL))[0]
        raise ValueError(
            f"weight at row {bad[0]}, column {bad[1]} outside [0, 1]: "
            f"{weights[bad[0], bad[1]]!r}"
        )
    row_sums = weights.sum(axis=1)
    off = np.abs(row_sums - 1.0)
    if np.any(off > 1e-8):
        worst = int(np.argmax(off))
        raise ValueError(
            f"row {worst} sums to {row_sums[worst]!r}, expected 1 "
            "(membership rows must be convex combinations of areas)"
        )
    col_mass = weights.max(axis=0)
    if np.any(col_mass <= 0.0):
        empty = int(np.argmin(col_mass))
        raise ValueError(
            f"column {empty} has no positive weight: area {empty} belongs "
            "to no membership"
        )
    sv = np.linalg.svd(weights, compute_uv=False)
    rank = int(np.sum(sv > _RANK_TOL * sv[0]))
    if rank < min(m, n):
        raise ValueError(
            f"membership matrix is rank deficient: rank {rank} < min(m, n) = "
            f"{min(m, n)}"
        )


@dataclass(frozen=True)
class MembershipMatrix:
    """Validated multiple-membership weight matrix.

    Rows are memberships, columns are areas.  Constructing one checks
    the structural conditions: entries in ``[0, 1]``, each row summing
    to one, full rank ``min(m, n)``, and every area receiving positive
    weight from at least one membership.
    """

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError(f"weights must be 2-d, got ndim={w.ndim}")
        _validate_weights(w)
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        """Number of memberships (rows)."""
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        """Number of areas (columns)."""
        return self.weights.shape[1]

    def truncated(self, m: int) -> "MembershipMatrix":
        """First ``m`` rows as a new (re-validated) matrix."""
        if not (1 <= m <= self.m):
            raise ValueError(f"cannot truncate {self.m} rows to {m}")
        return MembershipMatrix(self.weights[:m])


def _simulate_row(graph: AdjacencyGraph, anchor: int, rng: np.random.Generator) -> np.ndarray:
    """One membership row: 0.5 on the anchor, 0.35 spread over its
    first-order neighbours, 0.15 over second-order ones.

    Shares within each neighbourhood are uniform draws renormalised to
    the neighbourhood total.  Anchors with no second-order neighbours
    fold that share into the first-order pool.
    """
    row = np.zeros(graph.n)
    row[anchor] = ANCHOR_WEIGHT
    first = graph.neighbours(anchor)
    second = second_order_neighbours(graph, anchor)
    first_share = FIRST_ORDER_WEIGHT + (0.0 if second else SECOND_ORDER_WEIGHT)
    u = rng.uniform(size=len(first))
    row[list(first)] = first_share * u / u.sum()
    if second:
        v = rng.uniform(size=len(second))
        row[list(second)] = SECOND_ORDER_WEIGHT * v / v.sum()
    return row


def simulate_membership_matrix(
    graph: AdjacencyGraph,
    m: int,
    rng,
    max_retries: int = 100,
) -> MembershipMatrix:
    """Simulate an ``(m, n)`` membership matrix anchored on the graph.

    One candidate row is generated per area (anchors cycle over areas
    again when ``m > n``), the rows are shuffled, and the first ``m``
    kept.  When ``m < n`` a shuffle can leave some area with no weight;
    such draws are rejected and reshuffled, up to ``max_retries`` times
    before :class:`SimulationFailure` is raised.
    """
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_rows = max(m, graph.n)
    for _ in range(max_retries):
        rows = np.stack(
            [_simulate_row(graph, k % graph.n, rng) for k in range(n_rows)]
        )
        kept = rows[rng.permutation(n_rows)][:m]
        try:
            return MembershipMatrix(kept)
        except ValueError:
            continue  # an area lost all weight, or rank dropped: redraw
    raise SimulationFailure(
        f"no valid membership matrix after {max_retries} attempts "
        f"(m={m}, n={graph.n}); the truncation keeps losing areas"
    )


def left_inverse(H: MembershipMatrix) -> np.ndarray:
    """Moore-Penrose left inverse ``(H'H)^{-1} H'``, shape ``(n, m)``.

    Exists only for ``m >= n`` (full column rank); each of its rows sums
    to one because ``H`` is row-stochastic.  Raises for ``m < n``.
    """
    if H.m < H.n:
        raise ValueError(
            f"no left inverse exists for m={H.m} < n={H.n}: H'H is singular"
        )
    W = H.weights
    return np.linalg.solve(W.T @ W, W.T)


def generalized_inverse_family(
    H: MembershipMatrix, G: np.ndarray, Z: np.ndarray
) -> np.ndarray:
    """A new generalized inverse ``G + Z - G H Z H G`` of ``H``.

    For ``m > n`` the left inverse is not unique: any ``(n, m)`` matrix
    ``Z`` generates another member of the family.  The construction is
    only meaningful in that overdetermined case, so ``m <= n`` raises.
    """
    if H.m <= H.n:
        raise ValueError(
            f"the generalized-inverse family is trivial unless m > n "
            f"(got m={H.m}, n={H.n})"
        )
    G = np.asarray(G, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if G.shape != (H.n, H.m) or Z.shape != (H.n, H.m):
        raise ValueError(
            f"G and Z must have shape ({H.n}, {H.m}), got {G.shape} and {Z.shape}"
        )
    W = H.weights
    return G + Z - G @ W @ Z @ W @ G


def pushforward_covariance(H: MembershipMatrix, sigma) -> tuple[np.ndarray, int]:
    """Membership-level covariance ``H Sigma H'`` and its rank.

    The result is positive definite iff ``m <= n`` (with ``Sigma``
    positive definite and ``H`` full rank); for ``m > n`` it is singular
    with rank ``n``, which the returned rank makes explicit.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (H.n, H.n):
        raise ValueError(f"sigma has shape {sigma.shape}, expected ({H.n}, {H.n})")
    out = H.weights @ sigma @ H.weights.T
    out = 0.5 * (out + out.T)
    sv = np.linalg.svd(out, compute_uv=False)
    rank = int(np.sum(sv > _RANK_TOL * max(sv[0], 1.0)))
    return out, rank


def recover_areal_covariance(H: MembershipMatrix, sigma_tilde) -> np.ndarray:
    """Invert the pushforward: areal ``Sigma`` from ``H Sigma H'``.

    Uses the left inverse, so it requires ``m >= n``; below that the
    areal covariance is not identified (distinct ``Sigma`` yield the
    same pushforward) and a ``ValueError`` explains why.
    """
    if H.m < H.n:
        raise ValueError(
            f"areal covariance is not identifiable from membership level "
            f"when m={H.m} < n={H.n}: the pushforward loses rank"
        )
    sigma_tilde = np.asarray(sigma_tilde, dtype=float)
    if sigma_tilde.shape != (H.m, H.m):
        raise ValueError(
            f"sigma_tilde has shape {sigma_tilde.shape}, expected ({H.m}, {H.m})"
        )
    L = left_inverse(H)
    out = L @ sigma_tilde @ L.T
    return 0.5 * (out + out.T)


def mm_log_relative_risk(
    H: MembershipMatrix,
    gamma: float,
    beta,
    X,
    phi,
) -> np.ndarray:
    """Membership-level log relative risk ``H (gamma + X beta + phi)``.

    ``X`` is the ``(n, p)`` areal covariate matrix.  Because rows of
    ``H`` sum to one, the intercept passes through unchanged.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(X, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if X.ndim != 2 or X.shape[0] != H.n:
        raise ValueError(f"X has shape {X.shape}, expected ({H.n}, p)")
    if beta.shape != (X.shape[1],):
        raise ValueError(f"beta has shape {beta.shape}, expected ({X.shape[1]},)")
    if phi.shape != (H.n,):
        raise ValueError(f"phi has shape {phi.shape}, expected ({H.n},)")
    return H.weights @ (gamma + X @ beta + phi)


def write_membership_csv(H: MembershipMatrix, path) -> None:
    """Write the raw weights as headerless CSV, one membership per row."""
    np.savetxt(path, H.weights, delimiter=",", fmt="%.17g")


def read_membership_csv(path) -> MembershipMatrix:
    """Load a headerless weight CSV, re-running full validation.

    Malformed files fail with the row/column of the offending entry
    (non-stochastic row, empty column, rank deficiency, ...).
    """
    try:
        weights = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: could not parse membership CSV: {exc}") from exc
    return MembershipMatrix(weights)

"""Areal adjacency graphs for lattice and irregular study regions.

The spatial units of a disease-mapping study are represented as an
undirected graph: nodes are areas, edges join areas that share a border.
Everything downstream (CAR precision matrices, membership simulation,
spatial autocorrelation summaries) consumes :class:`AdjacencyGraph`.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdjacencyGraph",
    "make_grid",
    "second_order_neighbours",
    "morans_i",
    "read_adjacency_csv",
    "write_adjacency_csv",
]


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected, connected adjacency structure over ``n`` areas.

    Parameters
    ----------
    n : int
        Number of areas, labelled ``0 .. n-1``.
    edges : tuple of (int, int)
        Unique undirected edges stored as ``(i, j)`` with ``i < j``.

    Notes
    -----
    Construction validates that indices are in range, there are no
    self-loops or duplicate edges, every area has at least one
    neighbour, and the graph is connected.  Use :meth:`from_edges` to
    build from an unnormalised edge list.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"need at least 2 areas, got n={self.n}")
        seen = set()
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for e in self.edges:
            i, j = e
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {e} out of range for n={self.n}")
            if i == j:
                raise ValueError(f"self-loop at area {i}")
            if i > j:
                raise ValueError(f"edge {e} not normalised (want i < j)")
            if e in seen:
                raise ValueError(f"duplicate edge {e}")
            seen.add(e)
            adj[i].append(j)
            adj[j].append(i)
        for i, nbrs in enumerate(adj):
            if not nbrs:
                raise ValueError(f"area {i} has no neighbours")
        # connectivity check (BFS from node 0)
        visited = [False] * self.n
        visited[0] = True
        queue = deque([0])
        count = 1
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not visited[v]:
                    visited[v] = True
                    count += 1
                    queue.append(v)
        if count != self.n:
            raise ValueError("graph is not connected")
        object.__setattr__(
            self, "_adj", tuple(tuple(sorted(nbrs)) for nbrs in adj)
        )

    @classmethod
    def from_edges(cls, n: int, edges) -> "AdjacencyGraph":
        """Build a graph from an arbitrary iterable of (i, j) pairs.

        Pairs are normalised to ``i < j`` and de-duplicated; symmetric
        duplicates ``(i, j)``/``(j, i)`` collapse to a single edge.
        """
        normalised = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at area {i}")
            normalised.add((min(i, j), max(i, j)))
        return cls(n=n, edges=tuple(sorted(normalised)))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        """Vector of neighbour counts, shape ``(n,)``."""
        d = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            d[i] += 1
            d[j] += 1
        return d

    def neighbours(self, i: int) -> tuple[int, ...]:
        """First-order neighbours of area ``i`` (sorted)."""
        if not (0 <= i < self.n):
            raise ValueError(f"area {i} out of range for n={self.n}")
        return self._adj[i]

    def adjacency_matrix(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix ``W``, shape ``(n, n)``."""
        W = np.zeros((self.n, self.n))
        for i, j in self.edges:
            W[i, j] = 1.0
            W[j, i] = 1.0
        return W

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge endpoints as two aligned index arrays (for vectorised sums)."""
        if not self.edges:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        arr = np.asarray(self.edges, dtype=np.int64)
        return arr[:, 0], arr[:, 1]


def make_grid(rows: int, cols: int, adjacency: str = "rook") -> AdjacencyGraph:
    """Regular ``rows x cols`` lattice with rook or queen contiguity.

    Areas are numbered row-major: area ``r * cols + c`` sits at row ``r``,
    column ``c``.  Rook contiguity joins horizontal/vertical neighbours;
    queen adds the diagonals.

    >>> make_grid(1, 2).degrees
    array([1, 1])
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    if rows * cols < 2:
        raise ValueError("grid must contain at least 2 areas")
    if adjacency not in ("rook", "queen"):
        raise ValueError(f"adjacency must be 'rook' or 'queen', got {adjacency!r}")
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
            if adjacency == "queen" and r + 1 < rows:
                if c + 1 < cols:
                    edges.append((i, i + cols + 1))
                if c - 1 >= 0:
                    edges.append((i, i + cols - 1))
    return AdjacencyGraph(n=rows * cols, edges=tuple(sorted(edges)))


def second_order_neighbours(graph: AdjacencyGraph, i: int) -> tuple[int, ...]:
    """Areas at graph distance exactly two from area ``i`` (sorted).

    First-order neighbours and ``i`` itself are excluded, so the result
    is disjoint from ``graph.neighbours(i)``.
    """
    first = set(graph.neighbours(i))
    second = set()
    for j in first:
        second.update(graph.neighbours(j))
    second -= first
    second.discard(i)
    return tuple(sorted(second))


def morans_i(graph: AdjacencyGraph, x) -> float:
    """Moran's I spatial autocorrelation of ``x`` over the graph.

    ``I = (n / S0) * sum_ij w_ij (x_i - xbar)(x_j - xbar) / sum_i (x_i - xbar)^2``
    with binary weights ``w_ij`` and ``S0 = sum_ij w_ij`` (each undirected
    edge counted twice).  Raises for constant ``x``, where the statistic
    is undefined.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (graph.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({graph.n},)")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise ValueError("Moran's I is undefined for a constant vector")
    ei, ej = graph.edge_arrays()
    cross = 2.0 * float(z[ei] @ z[ej])  # both orientations of each edge
    s0 = 2.0 * graph.n_edges
    return graph.n / s0 * cross / denom


def write_adjacency_csv(graph: AdjacencyGraph, path) -> None:
    """Write the edge list as CSV with header ``i,j`` (0-based, i < j)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j"])
        for i, j in graph.edges:
            writer.writerow([i, j])


def read_adjacency_csv(path, n: int | None = None) -> AdjacencyGraph:
    """Read an edge-list CSV (header ``i,j``) back into a graph.

    ``n`` defaults to ``max(index) + 1``; pass it explicitly when the
    file might omit the highest-numbered area.
    """
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["i", "j"]:
            raise ValueError(f"{path}: expected header 'i,j'")
        for row in reader:
            if not row:
                continue
            pairs.append((int(row[0]), int(row[1])))
    if not pairs:
        raise ValueError(f"{path}: no edges")
    if n is None:
        n = max(max(i, j) for i, j in pairs) + 1
    return AdjacencyGraph.from_edges(n, pairs)

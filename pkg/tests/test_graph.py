import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carmm.graph import (
    AdjacencyGraph,
    make_grid,
    morans_i,
    read_adjacency_csv,
    second_order_neighbours,
    write_adjacency_csv,
)


def bfs_reachable(n, edges, start=0):
    """Independent connectivity check used as an oracle."""
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen


class TestMakeGrid:
    def test_rook_edge_count(self):
        # rows*(cols-1) horizontal + (rows-1)*cols vertical
        g = make_grid(3, 4)
        assert g.n == 12
        assert g.n_edges == 3 * 3 + 2 * 4

    def test_queen_adds_diagonals(self):
        rook = make_grid(3, 3, adjacency="rook")
        queen = make_grid(3, 3, adjacency="queen")
        extra = set(queen.edges) - set(rook.edges)
        assert len(extra) == 2 * 2 * 2  # two diagonals per interior cell block
        assert (0, 4) in extra and (1, 3) in extra

    def test_corner_and_interior_degrees(self):
        g = make_grid(3, 3)
        assert g.degrees[0] == 2  # corner
        assert g.degrees[4] == 4  # centre

    @pytest.mark.parametrize("rows,cols", [(2, 2), (1, 5), (4, 7)])
    def test_always_connected(self, rows, cols):
        g = make_grid(rows, cols)
        assert bfs_reachable(g.n, g.edges) == set(range(g.n))

    def test_rejects_single_area(self):
        with pytest.raises(ValueError):
            make_grid(1, 1)

    def test_rejects_unknown_adjacency(self):
        with pytest.raises(ValueError):
            make_grid(2, 2, adjacency="bishop")


class TestAdjacencyGraphValidation:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            AdjacencyGraph(3, ((0, 0), (0, 1), (1, 2)))

    def test_rejects_unsorted_pair(self):
        with pytest.raises(ValueError):
            AdjacencyGraph(3, ((1, 0), (1, 2)))

    def test_rejects_duplicate_edge(self):
        with pytest.raises(ValueError):
            AdjacencyGraph(3, ((0, 1), (0, 1), (1, 2)))

    def test_rejects_isolated_vertex(self):
        with pytest.raises(ValueError):
            AdjacencyGraph(3, ((0, 1),))

    def test_rejects_disconnected_components(self):
        with pytest.raises(ValueError):
            AdjacencyGraph(4, ((0, 1), (2, 3)))

    def test_adjacency_matrix_symmetric_binary(self):
        g = make_grid(2, 3)
        W = g.adjacency_matrix()
        assert np.array_equal(W, W.T)
        assert set(np.unique(W)) <= {0.0, 1.0}
        assert np.trace(W) == 0.0
        assert W.sum() == 2 * g.n_edges

    def test_neighbours_matches_matrix(self):
        g = make_grid(3, 4)
        W = g.adjacency_matrix()
        for i in range(g.n):
            assert list(g.neighbours(i)) == list(np.flatnonzero(W[i]))


def test_second_order_neighbours_hand_case():
    # 2x3 grid: 0-1-2 / 3-4-5.  From corner 0: first order {1, 3},
    # their neighbours {0,2,4}\{0} minus first order -> {2, 4}.
    g = make_grid(2, 3)
    assert second_order_neighbours(g, 0) == (2, 4)


def test_second_order_neighbours_disjoint_from_first():
    g = make_grid(4, 5)
    for i in range(g.n):
        second = set(second_order_neighbours(g, i))
        first = set(g.neighbours(i))
        assert i not in second
        assert not (second & first)


class TestMoransI:
    def test_checkerboard_is_minus_one(self):
        # Perfect alternation on a rook grid: every edge joins opposite
        # values, the most negative autocorrelation the statistic allows.
        g = make_grid(4, 4)
        x = np.array([(r + c) % 2 for r in range(4) for c in range(4)], dtype=float)
        assert morans_i(g, 2 * x - 1) == pytest.approx(-1.0)

    def test_smooth_gradient_is_positive(self):
        g = make_grid(5, 5)
        x = np.array([r + c for r in range(5) for c in range(5)], dtype=float)
        assert morans_i(g, x) > 0.5

    def test_permutation_null_mean(self, rng):
        # Under exchangeability E[I] = -1/(n-1); check by Monte Carlo.
        g = make_grid(4, 5)
        x = rng.normal(size=g.n)
        sims = [morans_i(g, rng.permutation(x)) for _ in range(4000)]
        assert np.mean(sims) == pytest.approx(-1.0 / (g.n - 1), abs=0.02)

    def test_constant_input_rejected(self):
        g = make_grid(2, 2)
        with pytest.raises(ValueError):
            morans_i(g, np.ones(4))

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0), st.floats(-10.0, 10.0))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance(self, seed, scale, shift):
        g = make_grid(3, 3)
        x = np.random.default_rng(seed).normal(size=g.n)
        assert morans_i(g, scale * x + shift) == pytest.approx(morans_i(g, x), rel=1e-9)


def test_adjacency_csv_round_trip(tmp_path):
    g = make_grid(3, 5)
    path = tmp_path / "adjacency.csv"
    write_adjacency_csv(g, path)
    assert path.read_text().splitlines()[0] == "i,j"
    back = read_adjacency_csv(path)
    assert back.n == g.n
    assert back.edges == g.edges

from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from services.errors import ConfigError, ContractError
from services.gltg import (
    GltgParams, build_graph, build_semantic_adjacency, cached_dtw_matrix, dataset_hash,
    dtw_distance, dynamic_graph, fuse_mask, global_trend_field, graph_at, load_dtw_cache,
    normalized_adjacency, residual_gnn, sparsity_penalty, top_k_neighbours,
)
from services.tensor_core import Tensor


def brute_force_dtw(x, y) -> float:
    """Minimum path cost over every monotone alignment, by exhaustive recursion."""

    @lru_cache(maxsize=None)
    def best(i, j):
        cost = abs(x[i] - y[j])
        if i == 0 and j == 0:
            return cost
        options = []
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        return cost + min(options)

    return best(len(x) - 1, len(y) - 1)


def gltg_params(d: int, seed: int = 0, **overrides) -> GltgParams:
    rng = np.random.default_rng(seed)
    shapes = {
        "enc_H_W": (2, d), "enc_H_b": (1, d), "W_g": (d, d),
        "W_1": (d, d), "b_1": (1, d), "W_2": (d, d), "b_2": (1, d), "w_3": (1, 1), "b_3": (1, 1),
    }
    values = {k: Tensor(rng.normal(size=s)) for k, s in shapes.items()}
    values.update({k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in overrides.items()})
    return GltgParams(**values)


series = st.lists(st.integers(-20, 20), min_size=1, max_size=6)


class TestDtw:

    @settings(max_examples=50, deadline=None)
    @given(series, series)
    def test_matches_exhaustive_alignment(self, a, b):
        x, y = tuple(float(v) for v in a), tuple(float(v) for v in b)
        assert dtw_distance(x, y) == brute_force_dtw(x, y)

    @pytest.mark.parametrize("a, b, expected", [
        ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0),
        ([0.0], [1.0, 2.0], 3.0),
        ([0.0, 1.0, 1.0, 2.0], [0.0, 1.0, 2.0], 0.0),
    ])
    def test_examples(self, a, b, expected):
        assert dtw_distance(a, b) == expected

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=7), rng.normal(size=5)
        assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a))

    def test_empty(self):
        with pytest.raises(ContractError):
            dtw_distance([], [1.0])

    def test_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(4, 12))
        first = cached_dtw_matrix(data, True, str(tmp_path))
        assert len(list(tmp_path.iterdir())) == 1
        second = cached_dtw_matrix(data, True, str(tmp_path))
        assert np.array_equal(first, second)
        path = next(tmp_path.iterdir())
        assert load_dtw_cache(path, dataset_hash(data, False)) is None


class TestStaticGraph:

    def test_each_row_gains_one_edge(self):
        rng = np.random.default_rng(2)
        A_tilde = build_semantic_adjacency(np.zeros((5, 5)), rng.normal(size=(5, 10)), k=1)
        assert np.array_equal(A_tilde.sum(axis=1), np.ones(5))
        assert not np.any(np.diag(A_tilde))

    def test_ties_go_to_lowest_index(self):
        distances = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
        assert top_k_neighbours(distances, 1).ravel().tolist() == [1, 0, 0]

    def test_identical_series_link_to_lowest_index(self):
        row = np.array([0.0, 1.0, 3.0, 2.0, 5.0])
        A_tilde = build_semantic_adjacency(np.zeros((3, 3)), np.tile(row, (3, 1)), k=1)
        assert A_tilde.tolist() == [[0, 1, 0], [1, 0, 0], [1, 0, 0]]

    def test_neighbours_ignore_series_scale(self):
        data = np.random.default_rng(5).normal(size=(5, 9))
        base = build_semantic_adjacency(np.zeros((5, 5)), data, k=2, znormalize=False)
        doubled = build_semantic_adjacency(np.zeros((5, 5)), 2.0 * data, k=2, znormalize=False)
        assert np.array_equal(base, doubled)

    def test_keeps_geographic_edges(self):
        A = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
        A_tilde = build_semantic_adjacency(A, np.arange(9.0).reshape(3, 3), k=0)
        assert np.array_equal(A_tilde, A)

    @pytest.mark.parametrize("k", [-1, 3, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            build_semantic_adjacency(np.zeros((3, 3)), np.ones((3, 4)), k=k)

    def test_normalized_adjacency(self):
        assert np.allclose(normalized_adjacency(np.zeros((3, 3))), np.eye(3))
        A = np.array([[0, 1], [1, 0]], dtype=float)
        assert np.allclose(normalized_adjacency(A), np.full((2, 2), 0.5))

    def test_build_graph(self):
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        graph = build_graph(A, np.random.default_rng(3).normal(size=(3, 8)), k=1)
        assert graph.n_regions == 3
        assert np.all(graph.A_tilde_static >= A)
        assert graph.E is None


class TestDynamicGraph:

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_antisymmetry_law(self, seed, n):
        rng = np.random.default_rng(seed)
        d = 3
        A_dyn = dynamic_graph(Tensor(rng.normal(size=(n, d)) * 3), gltg_params(d, seed)).data
        assert np.allclose(A_dyn + A_dyn.T, np.ones((n, n)), atol=1e-10)
        assert np.allclose(np.diag(A_dyn), 0.5, atol=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mask_convexity(self, seed):
        rng = np.random.default_rng(seed)
        n, d = 5, 3
        params = gltg_params(d, seed)
        A = (rng.uniform(size=(n, n)) > 0.5).astype(float)
        A_dyn = dynamic_graph(Tensor(rng.normal(size=(n, d))), params)
        mask, E = fuse_mask(A, A_dyn, params)
        lo, hi = np.minimum(A, A_dyn.data), np.maximum(A, A_dyn.data)
        assert np.all(E.data >= lo - 1e-12) and np.all(E.data <= hi + 1e-12)
        assert np.all((mask.data > 0) & (mask.data < 1))

    def test_graph_at_fills_dynamic_fields(self):
        A = np.array([[0, 1], [1, 0]], dtype=float)
        graph = build_graph(A, np.ones((2, 4)), k=0)
        out = graph_at(graph, Tensor(np.ones((2, 3))), gltg_params(3))
        assert out.E.shape == (2, 2) and out.mask.shape == (2, 2)
        assert graph.E is None

    def test_residual_gnn_with_zero_weights_is_identity(self):
        H = Tensor(np.random.default_rng(4).normal(size=(3, 2)))
        out = residual_gnn(H, np.eye(3), gltg_params(2, W_g=np.zeros((2, 2))))
        assert np.array_equal(out.data, H.data)

    def test_sparsity_penalty(self):
        assert sparsity_penalty(Tensor(-np.ones((3, 3)))).item() == pytest.approx(1.0)

    def test_residual_gnn_is_permutation_equivariant(self):
        rng = np.random.default_rng(6)
        n, d = 5, 3
        A = np.triu((rng.uniform(size=(n, n)) > 0.5).astype(float), 1)
        deg_norm = normalized_adjacency(A + A.T)
        H = rng.normal(size=(n, d))
        params = gltg_params(d, 6)
        P = np.eye(n)[rng.permutation(n)]
        out = residual_gnn(Tensor(H), deg_norm, params).data
        permuted = residual_gnn(Tensor(P @ H), P @ deg_norm @ P.T, params).data
        assert np.allclose(permuted, P @ out, rtol=0.0, atol=1e-12)

    @pytest.mark.parametrize("b_3, expected", [(40.0, "A"), (-40.0, "A_dyn")])
    def test_mask_saturation(self, b_3, expected):
        rng = np.random.default_rng(7)
        A = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        params = gltg_params(3, 7, w_3=[[0.0]], b_3=[[b_3]])
        A_dyn = dynamic_graph(Tensor(rng.normal(size=(4, 3))), params)
        _, E = fuse_mask(A, A_dyn, params)
        target = A if expected == "A" else A_dyn.data
        assert np.allclose(E.data, target, rtol=0.0, atol=1e-12)

    def test_raising_the_mask_bias_pulls_toward_geography(self):
        rng = np.random.default_rng(8)
        A = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        H = Tensor(rng.normal(size=(4, 3)))
        gaps = []
        for b_3 in (-2.0, 0.0, 2.0):
            params = gltg_params(3, 8, w_3=[[0.0]], b_3=[[b_3]])
            _, E = fuse_mask(A, dynamic_graph(H, params), params)
            gaps.append(np.abs(E.data - A))
        assert np.all(gaps[1] <= gaps[0] + 1e-15)
        assert np.all(gaps[2] <= gaps[1] + 1e-15)


class TestGlobalTrendField:

    def setup_method(self):
        rng = np.random.default_rng(9)
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        self.graph = build_graph(A, rng.normal(size=(3, 6)), k=0)
        self.H = Tensor(rng.normal(size=(3, 2)))
        self.drive = rng.normal(size=(3, 2))

    def test_matches_residual_gnn_times_drive(self):
        params = gltg_params(2, 9)
        M, H, W = self.graph.deg_norm, self.H.data, params.W_g.data
        expected = (np.maximum(M @ H @ W, 0.0) + H) * self.drive
        out = global_trend_field(0.0, self.H, Tensor(self.drive), self.graph, params)
        assert out.shape == (3, 2)
        assert np.allclose(out.data, expected, rtol=1e-12, atol=1e-14)

    def test_zero_drive_freezes_trend(self):
        out = global_trend_field(0.0, self.H, Tensor(np.zeros((3, 2))), self.graph, gltg_params(2))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_unit_drive_with_zero_weights_returns_trend(self):
        params = gltg_params(2, W_g=np.zeros((2, 2)))
        out = global_trend_field(0.0, self.H, Tensor(np.ones((3, 2))), self.graph, params)
        assert np.array_equal(out.data, self.H.data)

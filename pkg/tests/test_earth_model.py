import numpy as np
import pytest

from config import VARIANTS
from models.schemas import TrainConfig
from services.data_pipeline import make_windows
from services.earth_model import ModelParams, forward, initial_state, model_graph, param_shapes, window_paths
from services.errors import ConfigError, ContractError, DimensionError
from services.gltg import build_graph

SIR_VARIANTS = sorted(name for name, flags in VARIANTS.items() if flags["sir_drift"])


def variant_cfg(tiny_cfg: TrainConfig, variant: str) -> TrainConfig:
    return tiny_cfg.model_copy(update={"variant": variant})


@pytest.fixture
def sample(small_ds, tiny_cfg):
    return make_windows(small_ds, tiny_cfg.window, tiny_cfg.horizon)[4]


class TestModelParams:

    def test_canonical_order(self):
        names = list(param_shapes(4, 3))
        assert len(names) == 31
        assert names[0] == "eano.W_trans" and names[-1] == "head.b_2"
        assert param_shapes(4, 3)["eano.psi_W2"] == (3, 8)

    def test_init_is_seeded(self, tiny_cfg):
        a, b = ModelParams.init(tiny_cfg), ModelParams.init(tiny_cfg)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = ModelParams.init(tiny_cfg, seed=1)
        assert not np.array_equal(a["attn.W_Q"], c["attn.W_Q"])

    def test_init_values(self, tiny_cfg):
        params = ModelParams.init(tiny_cfg)
        assert params["gltg.w_3"].item() == 1.0
        assert params["gltg.b_3"].item() == 0.0
        for name in ("eano.psi_b1", "eano.enc_Z_b", "head.b_1"):
            assert not np.any(params[name])
        limit = np.sqrt(6.0 / 8.0)
        assert np.all(np.abs(params["attn.W_K"]) <= limit)

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            ModelParams.init(TrainConfig(hidden=6, n_heads=4))

    def test_replace_keeps_order(self, tiny_cfg):
        params = ModelParams.init(tiny_cfg)
        reordered = dict(reversed(list(params.items())))
        with pytest.raises(ContractError):
            params.replace_arrays(reordered)

    def test_bind_groups_modules(self, tiny_cfg):
        bound = ModelParams.init(tiny_cfg).bind()
        assert bound.eano.W_trans.shape == (8, 4)
        assert bound.attn.n_heads == 2
        assert len(bound.leaves) == 31


class TestForward:

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_every_variant_runs(self, small_ds, tiny_cfg, sample, variant):
        cfg = variant_cfg(tiny_cfg, variant)
        graph = model_graph(small_ds, cfg)
        result = forward(ModelParams.init(cfg).bind(), sample, graph, cfg)
        assert result.y.shape == (3, 1)
        assert np.isfinite(result.y.data).all()
        assert result.attention.shape == (3, 2, 3)
        assert (result.penalty is not None) == (variant == "sparse_penalty")

    @pytest.mark.parametrize("variant", SIR_VARIANTS)
    def test_population_is_conserved(self, small_ds, tiny_cfg, sample, variant):
        cfg = variant_cfg(tiny_cfg, variant)
        bound = ModelParams.init(cfg).bind()
        start = initial_state(window_paths(sample), bound)
        final = forward(bound, sample, model_graph(small_ds, cfg), cfg).final
        total_start = start.S.data + start.I.data + start.R.data
        total_final = final.S.data + final.I.data + final.R.data
        assert np.max(np.abs(total_final - total_start)) < 1e-9

    def test_zero_drive_freezes_state(self, small_ds, tiny_cfg, sample):
        params = ModelParams.init(tiny_cfg)
        params = params.replace_arrays({
            k: (np.zeros_like(v) if k.startswith("eano.psi_") else v) for k, v in params.items()
        })
        bound = params.bind()
        start = initial_state(window_paths(sample), bound)
        final = forward(bound, sample, model_graph(small_ds, tiny_cfg), tiny_cfg).final
        for a, b in zip(start.blocks(), final.blocks()):
            assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("variant", ["static_graph", "without_both"])
    def test_transmission_for_fixed_graphs(self, small_ds, tiny_cfg, sample, variant):
        cfg = variant_cfg(tiny_cfg, variant)
        graph = model_graph(small_ds, cfg)
        result = forward(ModelParams.init(cfg).bind(), sample, graph, cfg)
        expected = graph.A if variant == "static_graph" else np.eye(3)
        assert np.array_equal(result.transmission, expected)

    def test_dynamic_transmission_is_a_weighted_graph(self, small_ds, tiny_cfg, sample):
        result = forward(ModelParams.init(tiny_cfg).bind(), sample, model_graph(small_ds, tiny_cfg), tiny_cfg)
        assert result.transmission.shape == (3, 3)
        assert np.all((result.transmission >= 0.0) & (result.transmission <= 1.0))

    def test_fully_connected_graph(self, small_ds, tiny_cfg):
        graph = model_graph(small_ds, variant_cfg(tiny_cfg, "fully_connected"))
        assert np.array_equal(graph.A, np.ones((3, 3)) - np.eye(3))

    def test_query_h(self, small_ds, tiny_cfg, sample):
        cfg = tiny_cfg.model_copy(update={"query": "h"})
        result = forward(ModelParams.init(cfg).bind(), sample, model_graph(small_ds, cfg), cfg)
        assert np.isfinite(result.y.data).all()

    def test_region_mismatch(self, tiny_cfg, sample):
        graph = build_graph(np.zeros((2, 2)), np.random.default_rng(0).normal(size=(2, 10)), k=0)
        with pytest.raises(DimensionError):
            forward(ModelParams.init(tiny_cfg).bind(), sample, graph, tiny_cfg)

import numpy as np
import pytest

from models.schemas import SynthConfig, TrainConfig
from services.data_pipeline import generate_synthetic
from services.eano import EanoParams
from services.tensor_core import Tensor


@pytest.fixture
def small_synth():
    """Three regions on a path, short enough for fast training tests."""
    return SynthConfig(
        name="small-3",
        n_regions=3,
        length=60,
        coupling=[[0.0, 0.05, 0.0], [0.05, 0.0, 0.05], [0.0, 0.05, 0.0]],
        beta_schedule=[{"start": 0.0, "beta": 0.35}],
        gamma=0.1,
        population=[1e4, 1e4, 1e4],
        initial_infected=[10.0, 0.0, 2.0],
        noise_peak_fraction=0.02,
        seed=1,
        region_names=["north", "centre", "south"],
    )


@pytest.fixture
def small_ds(small_synth):
    return generate_synthetic(small_synth)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        hidden=4, mlp_hidden=4, n_heads=2, window=6, horizon=2,
        epochs=2, batch_size=8, top_k=1, substeps=1, seed=0,
    )


def make_eano_params(d: int, c: int = 2, m: int = 3, seed: int = 0, **overrides) -> EanoParams:
    rng = np.random.default_rng(seed)
    shapes = {
        "W_trans": (2 * d, d), "W_recov": (d, d),
        "psi_W1": (d, m), "psi_b1": (1, m), "psi_W2": (m, d * c), "psi_b2": (1, d * c),
        "enc_Z_W": (c, d), "enc_Z_b": (1, d), "enc_S_W": (c, d), "enc_S_b": (1, d),
        "enc_I_W": (c, d), "enc_I_b": (1, d), "enc_R_W": (c, d), "enc_R_b": (1, d),
    }
    values = {k: Tensor(rng.normal(size=s)) for k, s in shapes.items()}
    values.update({k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in overrides.items()})
    return EanoParams(**values)


@pytest.fixture
def eano_params_factory():
    return make_eano_params

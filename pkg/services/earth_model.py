# EARTH model — parameter set, joint vector field and forward pass
#
#   control paths Q(t) → encoders → integrate [Z, S, I, R, H] over the window
#   → cross-attention (query Z(T) or H(T), tokens S/I/R) → readout
#
# Parameters are stored as named float64 arrays in a fixed order; the order
# fixes both the checkpoint layout and the gradient-summation order.

import logging
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from config import VARIANTS
from models.schemas import OdeConfig, TrainConfig
from services.control_path import PathSet
from services.data_pipeline import EpidemicDataset, WindowSample
from services.eano import EanoParams, LatentState, eano_field, temporal_drive
from services.errors import ConfigError, ContractError, DimensionError
from services.fusion_head import AttentionParams, HeadParams, cross_attention, predict
from services.gltg import (
    GltgParams, TransmissionGraph, build_graph, global_trend_field, graph_at, sparsity_penalty,
)
from services.ode_engine import integrate
from services.tensor_core import GradientTape, Tensor, affine, zeros

logger = logging.getLogger(__name__)

# time + one observed channel per region
CHANNELS = 2


def param_shapes(d: int, m: int, c: int = CHANNELS) -> "OrderedDict[str, Tuple[int, int]]":
    """Every learnable tensor, in canonical order."""
    shapes = OrderedDict()
    shapes["eano.W_trans"] = (2 * d, d)
    shapes["eano.W_recov"] = (d, d)
    shapes["eano.psi_W1"]  = (d, m)
    shapes["eano.psi_b1"]  = (1, m)
    shapes["eano.psi_W2"]  = (m, d * c)
    shapes["eano.psi_b2"]  = (1, d * c)
    for block in ("Z", "S", "I", "R"):
        shapes[f"eano.enc_{block}_W"] = (c, d)
        shapes[f"eano.enc_{block}_b"] = (1, d)
    shapes["gltg.enc_H_W"] = (c, d)
    shapes["gltg.enc_H_b"] = (1, d)
    shapes["gltg.W_g"]     = (d, d)
    shapes["gltg.W_1"]     = (d, d)
    shapes["gltg.b_1"]     = (1, d)
    shapes["gltg.W_2"]     = (d, d)
    shapes["gltg.b_2"]     = (1, d)
    shapes["gltg.w_3"]     = (1, 1)
    shapes["gltg.b_3"]     = (1, 1)
    for proj in ("W_Q", "W_K", "W_V", "W_O"):
        shapes[f"attn.{proj}"] = (d, d)
    shapes["head.W_1"] = (2 * d, m)
    shapes["head.b_1"] = (1, m)
    shapes["head.W_2"] = (m, 1)
    shapes["head.b_2"] = (1, 1)
    return shapes


# drift weights start small so the untrained system stays near its initial state
_SMALL_INIT = {"eano.W_trans": 0.1, "eano.W_recov": 0.1, "gltg.W_g": 0.1}


@dataclass(frozen=True)
class BoundParams:
    """Parameters as Tensors, grouped per module; `leaves` maps names to tape leaves."""

    eano:   EanoParams
    gltg:   GltgParams
    attn:   AttentionParams
    head:   HeadParams
    leaves: Dict[str, Tensor]


class ModelParams:
    """Ordered name → array mapping; the optimizer's target."""

    def __init__(self, arrays: Mapping[str, np.ndarray], n_heads: int):
        self.arrays  = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in arrays.items())
        self.n_heads = n_heads

    @classmethod
    def init(cls, cfg: TrainConfig, seed: Optional[int] = None) -> "ModelParams":
        """Glorot-uniform weights, zero biases, identity-like mask gate (w₃ = 1, b₃ = 0)."""
        if cfg.hidden % cfg.n_heads != 0:
            raise ConfigError(f"hidden size {cfg.hidden} is not divisible by {cfg.n_heads} heads")
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        arrays = OrderedDict()
        for name, (rows, cols) in param_shapes(cfg.hidden, cfg.head_hidden).items():
            leaf = name.split(".", 1)[1]
            if leaf == "w_3":
                arrays[name] = np.ones((rows, cols))
            elif leaf.startswith("b") or "_b" in leaf:
                arrays[name] = np.zeros((rows, cols))
            else:
                limit = np.sqrt(6.0 / (rows + cols))
                arrays[name] = rng.uniform(-limit, limit, size=(rows, cols)) * _SMALL_INIT.get(name, 1.0)
        return cls(arrays, cfg.n_heads)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> List[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.n_heads)

    def replace_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        if list(arrays) != self.names():
            raise ContractError("replacement must keep every parameter in order")
        return ModelParams(arrays, self.n_heads)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def bind(self, tape: Optional[GradientTape] = None) -> BoundParams:
        """Wrap arrays as Tensors, watched on `tape` when one is given."""
        leaves = {
            name: (tape.watch(arr) if tape is not None else Tensor(arr))
            for name, arr in self.arrays.items()
        }

        def group(prefix: str) -> Dict[str, Tensor]:
            return {k.split(".", 1)[1]: v for k, v in leaves.items() if k.startswith(prefix + ".")}

        return BoundParams(
            eano=EanoParams(**group("eano")),
            gltg=GltgParams(**group("gltg")),
            attn=AttentionParams(**group("attn"), n_heads=self.n_heads),
            head=HeadParams(**group("head")),
            leaves=leaves,
        )


# ── Graph ────────────────────────────────────────────────────────────────────

def model_graph(ds: EpidemicDataset, cfg: TrainConfig, cache_dir: Optional[str] = None) -> TransmissionGraph:
    """Static graph for a dataset; the fully connected variant swaps A for J − I."""
    flags = VARIANTS[cfg.variant]
    A = ds.adjacency
    if flags["fully_connected"]:
        A = np.ones_like(A) - np.eye(ds.n_regions)
    return build_graph(A, ds.split_series("train"), cfg.top_k, cfg.dtw_znormalize, cache_dir)


# ── Joint field ──────────────────────────────────────────────────────────────

class EarthField:
    """d/dt of the joint state [Z, S, I, R, H] for one window."""

    def __init__(self, paths: PathSet, graph: TransmissionGraph, params: BoundParams, cfg: TrainConfig):
        self.paths  = paths
        self.graph  = graph
        self.params = params
        self.cfg    = cfg
        self.flags  = VARIANTS[cfg.variant]
        self._static_E = Tensor(graph.A)
        self._no_graph = Tensor(np.eye(graph.n_regions))

    def transmission(self, H: Tensor) -> Tensor:
        mode = self.flags["graph"]
        if mode == "dynamic":
            return graph_at(self.graph, H, self.params.gltg).E
        if mode == "static":
            return self._static_E
        return self._no_graph

    def __call__(self, t: float, state: LatentState) -> LatentState:
        g = temporal_drive(state.Z, Tensor(self.paths.derivatives(t)), self.params.eano)
        deriv = eano_field(
            t, state, self.paths, self.transmission(state.H), self.params.eano,
            drift=self.cfg.drift,
            edge_weights=self.cfg.edge_weights,
            edge_threshold=self.cfg.edge_threshold,
            sir=self.flags["sir_drift"],
            drive=g,
        )
        if self.flags["global_trend"]:
            dH = global_trend_field(t, state.H, g, self.graph, self.params.gltg)
        else:
            dH = zeros(state.shape)
        return replace(deriv, H=dH)


# ── Forward pass ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ForwardResult:
    y:            Tensor               # N×1, normalized units
    penalty:      Optional[Tensor]     # scaled L1 on E(T), sparse_penalty variant only
    attention:    np.ndarray           # N×heads×3
    final:        LatentState
    transmission: np.ndarray           # N×N coupling E(T) at the window end


def initial_state(paths: PathSet, params: BoundParams) -> LatentState:
    """Affine encodings of the first path value Q(t₀)."""
    Q0 = Tensor(paths.initial())
    e  = params.eano
    return LatentState(
        Z=affine(Q0, e.enc_Z_W, e.enc_Z_b),
        S=affine(Q0, e.enc_S_W, e.enc_S_b),
        I=affine(Q0, e.enc_I_W, e.enc_I_b),
        R=affine(Q0, e.enc_R_W, e.enc_R_b),
        H=affine(Q0, params.gltg.enc_H_W, params.gltg.enc_H_b),
    )


def window_paths(sample: WindowSample) -> PathSet:
    n = sample.X.shape[0]
    return PathSet.fit_regions(sample.knot_times, [sample.observations(v) for v in range(n)])


def forward(params: BoundParams, sample: WindowSample, graph: TransmissionGraph, cfg: TrainConfig) -> ForwardResult:
    if sample.X.shape[0] != graph.n_regions:
        raise DimensionError(f"window has {sample.X.shape[0]} regions, graph has {graph.n_regions}")
    paths = window_paths(sample)
    field = EarthField(paths, graph, params, cfg)
    ode   = OdeConfig(
        method=cfg.solver,
        substeps_per_interval=cfg.substeps,
        t_start=paths.t_start,
        t_end=paths.t_end,
    )
    final = integrate(field, initial_state(paths, params), ode)[-1][1]

    query = final.Z if cfg.query == "z" else final.H
    F, weights = cross_attention(query, (final.S, final.I, final.R), params.attn)
    y = predict(F, final.Z, params.head)

    E_T = field.transmission(final.H)
    penalty = None
    if VARIANTS[cfg.variant]["sparse_penalty"]:
        penalty = sparsity_penalty(E_T) * cfg.sparse_penalty
    return ForwardResult(y=y, penalty=penalty, attention=weights, final=final, transmission=E_T.data.copy())

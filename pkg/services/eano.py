# EANO — epidemic-aware neural ODE over latent disease states
#
# Latent S, I, R (N×d each) evolve under network-SIR drifts
#   infection_v = W_transᵀ [S_v ‖ Σ_u e_vu I_u]     recovery_v = W_recovᵀ I_v
#   dS = −infection     dI = infection − recovery     dR = recovery
# optionally modulated elementwise by the temporal drive g(t) = ψ_t(Z)·dQ/dt.
# The three derivatives share the infection/recovery subexpressions, so
# (dS + dR) + dI is exactly zero in floating point. Summed in the order
# dS + dI + dR the result is only zero up to rounding.

from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from services.control_path import PathSet
from services.errors import ContractError, DimensionError, NumericError
from services.tensor_core import (
    Tensor, affine, broadcast_columns, concat_last_axis, contract_last,
    matmul, reshape, row_sums, tanh, zeros,
)


@dataclass(frozen=True)
class LatentState:
    """Bundle of integrated quantities; every block is N×d."""

    Z: Tensor
    S: Tensor
    I: Tensor
    R: Tensor
    H: Tensor

    def __post_init__(self):
        shapes = {b.shape for b in self.blocks()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DimensionError(f"latent blocks must share one N×d shape, got {sorted(shapes)}")

    def blocks(self) -> Tuple[Tensor, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.Z.shape

    def __add__(self, other: "LatentState") -> "LatentState":
        return LatentState(*(a + b for a, b in zip(self.blocks(), other.blocks())))

    def __mul__(self, k: float) -> "LatentState":
        return LatentState(*(b * k for b in self.blocks()))

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return all(b.is_finite() for b in self.blocks())


@dataclass(frozen=True)
class EanoParams:
    W_trans: Tensor     # 2d×d
    W_recov: Tensor     # d×d
    psi_W1:  Tensor     # d×m
    psi_b1:  Tensor     # 1×m
    psi_W2:  Tensor     # m×(d·c)
    psi_b2:  Tensor     # 1×(d·c)
    enc_Z_W: Tensor     # c×d
    enc_Z_b: Tensor
    enc_S_W: Tensor
    enc_S_b: Tensor
    enc_I_W: Tensor
    enc_I_b: Tensor
    enc_R_W: Tensor
    enc_R_b: Tensor


@dataclass(frozen=True)
class ClassicalSir:
    beta:       float           # transmission rate, 1/step
    gamma:      float           # recovery rate, 1/step
    population: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ContractError("beta and gamma must be nonnegative")
        if self.population <= 0:
            raise ContractError("population must be positive")


# ── Temporal drive ───────────────────────────────────────────────────────────

def temporal_drive(Z: Tensor, dQdt: Tensor, params: EanoParams) -> Tensor:
    """g_v = reshape(ψ_t(Z_v), d×c) · dQ_v/dt, i.e. dZ/dt."""
    n, d = Z.shape
    if dQdt.shape[0] != n:
        raise DimensionError(f"drive path has {dQdt.shape[0]} regions, state has {n}")
    c = dQdt.shape[1]
    if params.psi_W2.shape[1] != d * c:
        raise DimensionError(f"ψ_t emits {params.psi_W2.shape[1]} values, expected d·c = {d * c}")
    hidden = tanh(affine(Z, params.psi_W1, params.psi_b1))
    field  = tanh(affine(hidden, params.psi_W2, params.psi_b2))
    return contract_last(reshape(field, (n, d, c)), dQdt)


# ── Network SIR drift ────────────────────────────────────────────────────────

def transmission_weights(E: Tensor, mode: str = "normalized", threshold: Optional[float] = None) -> Tensor:
    """e_vu used for aggregation: optionally thresholded, then row-normalized."""
    if threshold is not None:
        E = E * Tensor((E.data > threshold).astype(np.float64))
    if mode == "raw":
        return E
    sums = row_sums(E)
    # empty rows aggregate to zero instead of dividing by zero
    safe = sums + Tensor((sums.data == 0.0).astype(np.float64))
    return E / broadcast_columns(safe, E.shape[1])


def sir_flows(S: Tensor, I: Tensor, weights: Tensor, params: EanoParams) -> Tuple[Tensor, Tensor]:
    """(infection, recovery) flows, each N×d."""
    pressure  = matmul(weights, I)
    infection = matmul(concat_last_axis(S, pressure), params.W_trans)
    recovery  = matmul(I, params.W_recov)
    if not (infection.is_finite() and recovery.is_finite()):
        raise NumericError("non-finite SIR flow")
    return infection, recovery


def compose_flows(infection: Tensor, recovery: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    return -infection, infection - recovery, recovery


def conservation_residual(dS: Tensor, dI: Tensor, dR: Tensor) -> np.ndarray:
    """
    (dS + dR) + dI, which cancels bitwise: dS + dR = −infection + recovery
    is the exact negation of dI. The order matters; (dS + dI) + dR rounds
    the intermediate infection − recovery twice and is generally nonzero.
    """
    return (dS.data + dR.data) + dI.data


def sir_drift(
    state:          LatentState,
    E_t:            Tensor,
    params:         EanoParams,
    edge_weights:   str = "normalized",
    edge_threshold: Optional[float] = None
) -> Tuple[Tensor, Tensor, Tensor]:
    """(dS, dI, dR) of the network-SIR system for transmission matrix E_t."""
    weights = transmission_weights(E_t, edge_weights, edge_threshold)
    return compose_flows(*sir_flows(state.S, state.I, weights, params))


def generic_drift(state: LatentState, weights: Tensor, params: EanoParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Unstructured per-state field used by the ablation variants without SIR coupling."""
    return tuple(
        tanh(matmul(matmul(weights, C), params.W_recov))
        for C in (state.S, state.I, state.R)
    )


def eano_field(
    t:              float,
    state:          LatentState,
    paths:          PathSet,
    E_t:            Tensor,
    params:         EanoParams,
    drift:          str = "modulation",
    edge_weights:   str = "normalized",
    edge_threshold: Optional[float] = None,
    sir:            bool = True,
    drive:          Optional[Tensor] = None
) -> LatentState:
    """
    d(state)/dt for the EANO blocks. H is left stationary here; the joint
    model supplies dH/dt from the global trend field.
    """
    g = drive if drive is not None else temporal_drive(state.Z, Tensor(paths.derivatives(t)), params)
    weights = transmission_weights(E_t, edge_weights, edge_threshold)

    if sir:
        infection, recovery = sir_flows(state.S, state.I, weights, params)
        if drift == "modulation":
            infection, recovery = infection * g, recovery * g
        dS, dI, dR = compose_flows(infection, recovery)
    else:
        dS, dI, dR = generic_drift(state, weights, params)
        if drift == "modulation":
            dS, dI, dR = dS * g, dI * g, dR * g

    return LatentState(Z=g, S=dS, I=dI, R=dR, H=zeros(state.shape))


# ── Classical SIR (oracle and synthetic-data core) ───────────────────────────

def sir_rates(model: ClassicalSir, s, i):
    flow     = model.beta * s * i / model.population
    recovery = model.gamma * i
    return -flow, flow - recovery, recovery


def classical_sir_step(model: ClassicalSir, s: float, i: float, r: float, h: float):
    """One RK4 step of the classical SIR system; s + i + r is conserved."""
    total = s + i + r
    if abs(total - model.population) > 1e-6 * model.population:
        raise ContractError(f"compartments sum to {total}, population is {model.population}")

    def rates(s_, i_):
        return sir_rates(model, s_, i_)

    k1 = rates(s, i)
    k2 = rates(s + 0.5 * h * k1[0], i + 0.5 * h * k1[1])
    k3 = rates(s + 0.5 * h * k2[0], i + 0.5 * h * k2[1])
    k4 = rates(s + h * k3[0], i + h * k3[1])
    s_next, i_next, r_next = (
        x + (h / 6.0) * (a + 2.0 * b + 2.0 * c + e)
        for x, a, b, c, e in zip((s, i, r), k1, k2, k3, k4)
    )
    if min(s_next, i_next, r_next) < -1e-9:
        raise NumericError(f"negative compartment after step: s={s_next}, i={i_next}, r={r_next}")
    return s_next, i_next, r_next


def simulate_classical_sir(model: ClassicalSir, s0: float, i0: float, r0: float, h: float, steps: int) -> np.ndarray:
    """(steps+1)×3 trajectory of (s, i, r)."""
    out = np.empty((steps + 1, 3))
    out[0] = (s0, i0, r0)
    s, i, r = s0, i0, r0
    for k in range(1, steps + 1):
        s, i, r = classical_sir_step(model, s, i, r, h)
        out[k] = (s, i, r)
    return out

# Fusion Head — per-region cross-attention over {S, I, R}, readout MLP and loss
#
# Each region attends with one query (Z(T) or H(T)) over exactly three
# tokens; there is no attention across regions. Heads are column blocks
# of the d×d projections, d_f = d / n_heads.

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from services.errors import ConfigError, ContractError, DimensionError
from services.tensor_core import (
    Tensor, absolute, affine, as_tensor, broadcast_columns, concat_last_axis,
    matmul, mean_all, relu, row_sums, slice_last_axis, softmax_rows, square, sub,
)


@dataclass(frozen=True)
class AttentionParams:
    W_Q:     Tensor     # d×d, head μ owns columns [μ·d_f, (μ+1)·d_f)
    W_K:     Tensor
    W_V:     Tensor
    W_O:     Tensor     # d×d output projection
    n_heads: int


@dataclass(frozen=True)
class HeadParams:
    W_1: Tensor         # 2d×m
    b_1: Tensor         # 1×m
    W_2: Tensor         # m×1
    b_2: Tensor         # 1×1


def cross_attention(query: Tensor, tokens: Sequence[Tensor], params: AttentionParams) -> Tuple[Tensor, np.ndarray]:
    """
    F = (Ω_1 ⊕ … ⊕ Ω_H) W_O with Ω_μ = softmax(q_μ k_μᵀ / √d_f) v_μ per region.
    Returns (F: N×d, weights: N×heads×tokens).
    """
    n, d = query.shape
    if d % params.n_heads != 0:
        raise ConfigError(f"hidden size {d} is not divisible by {params.n_heads} heads")
    if any(tok.shape != query.shape for tok in tokens):
        raise DimensionError(f"tokens must match query shape {query.shape}")
    d_f   = d // params.n_heads
    scale = 1.0 / math.sqrt(d_f)

    heads, weights = [], []
    for mu in range(params.n_heads):
        lo, hi = mu * d_f, (mu + 1) * d_f
        q = matmul(query, slice_last_axis(params.W_Q, lo, hi))
        keys   = [matmul(tok, slice_last_axis(params.W_K, lo, hi)) for tok in tokens]
        values = [matmul(tok, slice_last_axis(params.W_V, lo, hi)) for tok in tokens]

        scores = concat_last_axis(*[row_sums(q * k) for k in keys]) * scale
        attn   = softmax_rows(scores)
        weights.append(attn.data)

        omega = None
        for j, v in enumerate(values):
            term = broadcast_columns(slice_last_axis(attn, j, j + 1), d_f) * v
            omega = term if omega is None else omega + term
        heads.append(omega)

    fused = matmul(concat_last_axis(*heads), params.W_O)
    return fused, np.stack(weights, axis=1)


def predict(F: Tensor, Z: Tensor, params: HeadParams) -> Tensor:
    """y_v = MLP([F_v ‖ Z_v]); N×1, in normalized units."""
    if F.shape != Z.shape:
        raise DimensionError(f"F is {F.shape}, Z is {Z.shape}")
    hidden = relu(affine(concat_last_axis(F, Z), params.W_1, params.b_1))
    return affine(hidden, params.W_2, params.b_2)


def loss(y, y_true, mode: str = "mse") -> Tensor:
    """Mean squared (default) or mean absolute residual over all (sample, region) pairs."""
    y, y_true = as_tensor(y), as_tensor(y_true)
    if y.shape != y_true.shape:
        raise DimensionError(f"prediction {y.shape} vs target {y_true.shape}")
    residual = sub(y, y_true)
    if mode == "mse":
        return mean_all(square(residual))
    if mode == "mae":
        return mean_all(absolute(residual))
    raise ContractError(f"unknown loss mode '{mode}'")

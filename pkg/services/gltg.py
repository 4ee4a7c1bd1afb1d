# GLTG — global-guided local transmission graph
#
# Static part (built once per dataset):
#   DTW distances on the z-normalized training split → top-k semantic edges Ã,
#   self-looped symmetric degree normalization D̃^-1/2 (Ã+I) D̃^-1/2.
# Dynamic part (evaluated at every solver stage from the global trend H):
#   Ã(t) = σ(tanh(M₁M₂ᵀ − M₂M₁ᵀ)),  𝕄(t) = σ(w₃Ã(t) + b₃),  E(t) = 𝕄⊙A + (J−𝕄)⊙Ã(t)

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from services.errors import ConfigError, ContractError, DimensionError, FormatError
from services.tensor_core import (
    Tensor, affine, absolute, matmul, mean_all, relu, sigmoid, tanh, transpose,
)

logger = logging.getLogger(__name__)

DTW_CACHE_MAGIC = b"EDTW"


@dataclass(frozen=True)
class TransmissionGraph:
    A:              np.ndarray               # N×N binary geographic adjacency
    A_tilde_static: np.ndarray               # N×N binary, DTW-augmented
    deg_norm:       np.ndarray               # D̃^-1/2 (Ã+I) D̃^-1/2
    A_tilde_dyn:    Optional[Tensor] = None  # Ã(t)
    mask:           Optional[Tensor] = None  # 𝕄(t)
    E:              Optional[Tensor] = None  # fused E(t)

    @property
    def n_regions(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class GltgParams:
    enc_H_W: Tensor     # c×d, H(0) encoder
    enc_H_b: Tensor
    W_g:     Tensor     # d×d
    W_1:     Tensor     # d×d
    b_1:     Tensor     # 1×d
    W_2:     Tensor
    b_2:     Tensor
    w_3:     Tensor     # 1×1 gain
    b_3:     Tensor     # 1×1 bias


# ── DTW ──────────────────────────────────────────────────────────────────────

def dtw_distance(a, b) -> float:
    """
    Classic DTW: absolute-difference local cost, full window,
    symmetric step pattern (match / insert / delete).
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ContractError("DTW needs two nonempty series")

    n, m = x.size, y.size
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        cost = np.abs(x[i - 1] - y)
        for j in range(1, m + 1):
            acc[i, j] = cost[j - 1] + min(
                acc[i - 1, j],      # insertion
                acc[i, j - 1],      # deletion
                acc[i - 1, j - 1],  # match
            )
    return float(acc[n, m])


def _znormalize(series: np.ndarray) -> np.ndarray:
    mean = series.mean(axis=1, keepdims=True)
    std  = series.std(axis=1, keepdims=True)
    return (series - mean) / np.where(std > 0, std, 1.0)


def dtw_matrix(series: np.ndarray, znormalize: bool = True) -> np.ndarray:
    """Symmetric N×N DTW distance matrix over the rows of `series`."""
    data = _znormalize(series) if znormalize else np.asarray(series, dtype=np.float64)
    n = data.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(u + 1, n):
            out[u, v] = out[v, u] = dtw_distance(data[u], data[v])
    return out


def dataset_hash(series: np.ndarray, znormalize: bool) -> bytes:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(series, dtype="<f8").tobytes())
    digest.update(struct.pack("<II", *series.shape))
    digest.update(b"z" if znormalize else b"r")
    return digest.digest()


def save_dtw_cache(path: Path, key: bytes, distances: np.ndarray) -> None:
    n = distances.shape[0]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(DTW_CACHE_MAGIC)
        fh.write(key)
        fh.write(struct.pack("<I", n))
        fh.write(np.ascontiguousarray(distances, dtype="<f8").tobytes())


def load_dtw_cache(path: Path, key: bytes) -> Optional[np.ndarray]:
    """Cached distances, or None when the file is missing or was built for other data."""
    if not path.exists():
        return None
    raw = path.read_bytes()
    head = len(DTW_CACHE_MAGIC) + len(key) + 4
    if len(raw) < head or raw[:4] != DTW_CACHE_MAGIC:
        raise FormatError(f"{path} is not a DTW cache file")
    if raw[4:4 + len(key)] != key:
        return None
    (n,) = struct.unpack("<I", raw[head - 4:head])
    body = raw[head:]
    if len(body) != 8 * n * n:
        raise FormatError(f"{path}: expected {n}x{n} distances")
    return np.frombuffer(body, dtype="<f8").reshape(n, n).copy()


def cached_dtw_matrix(series: np.ndarray, znormalize: bool = True, cache_dir: Optional[str] = None) -> np.ndarray:
    if cache_dir is None:
        return dtw_matrix(series, znormalize)
    key  = dataset_hash(series, znormalize)
    path = Path(cache_dir) / f"dtw-{key.hex()[:16]}.bin"
    hit  = load_dtw_cache(path, key)
    if hit is not None:
        logger.debug("dtw cache hit path=%s", path)
        return hit
    logger.debug("dtw cache miss path=%s", path)
    distances = dtw_matrix(series, znormalize)
    save_dtw_cache(path, key, distances)
    return distances


# ── Static graph ─────────────────────────────────────────────────────────────

def top_k_neighbours(distances: np.ndarray, k: int) -> np.ndarray:
    """Row v lists the k nearest u ≠ v; ties go to the lowest index."""
    n = distances.shape[0]
    out = np.empty((n, k), dtype=int)
    for v in range(n):
        order = np.argsort(distances[v], kind="stable")
        out[v] = [u for u in order if u != v][:k]
    return out


def build_semantic_adjacency(
    A:            np.ndarray,
    train_series: np.ndarray,
    k:            int,
    znormalize:   bool = True,
    distances:    Optional[np.ndarray] = None,
    cache_dir:    Optional[str] = None
) -> np.ndarray:
    """Ã = A plus, in row v, an edge to each of the k regions most DTW-similar to v."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if not 0 <= k < n:
        raise ConfigError(f"top_k must lie in [0, N) = [0, {n}), got {k}")
    A_tilde = A.copy()
    if k == 0:
        return A_tilde
    if distances is None:
        distances = cached_dtw_matrix(train_series, znormalize, cache_dir)
    for v, neighbours in enumerate(top_k_neighbours(distances, k)):
        A_tilde[v, neighbours] = 1.0
    return A_tilde


def normalized_adjacency(A_tilde: np.ndarray) -> np.ndarray:
    """D̃^-1/2 (Ã + I) D̃^-1/2, degrees taken over rows."""
    looped = np.asarray(A_tilde, dtype=np.float64) + np.eye(A_tilde.shape[0])
    inv_sqrt = 1.0 / np.sqrt(looped.sum(axis=1))
    return looped * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_graph(
    A:            np.ndarray,
    train_series: np.ndarray,
    k:            int,
    znormalize:   bool = True,
    cache_dir:    Optional[str] = None
) -> TransmissionGraph:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    A_tilde = build_semantic_adjacency(A, train_series, k, znormalize, cache_dir=cache_dir)
    return TransmissionGraph(A=A, A_tilde_static=A_tilde, deg_norm=normalized_adjacency(A_tilde))


# ── Learned graph ops ────────────────────────────────────────────────────────

def residual_gnn(H: Tensor, deg_norm, params: GltgParams) -> Tensor:
    """ReLU(D̃^-1/2 Ã D̃^-1/2 · H · W_g) + H."""
    if H.shape[1] != params.W_g.shape[0]:
        raise DimensionError(f"H is {H.shape}, W_g is {params.W_g.shape}")
    return relu(matmul(matmul(deg_norm, H), params.W_g)) + H


def dynamic_graph(H: Tensor, params: GltgParams) -> Tensor:
    """Ã(t); antisymmetric pre-activation so Ã + Ãᵀ = J and diag = 0.5."""
    M1 = tanh(affine(H, params.W_1, params.b_1))
    M2 = tanh(affine(H, params.W_2, params.b_2))
    return sigmoid(tanh(matmul(M1, transpose(M2)) - matmul(M2, transpose(M1))))


def fuse_mask(A, A_tilde_dyn: Tensor, params: GltgParams) -> Tuple[Tensor, Tensor]:
    """(𝕄, E) with 𝕄 = σ(w₃Ã(t) + b₃) a per-edge gate in (0, 1)."""
    mask = sigmoid(A_tilde_dyn * params.w_3 + params.b_3)
    E = mask * A + (1.0 - mask) * A_tilde_dyn
    return mask, E


def graph_at(graph: TransmissionGraph, H: Tensor, params: GltgParams) -> TransmissionGraph:
    """The graph with its dynamic fields evaluated at global trend H."""
    A_dyn = dynamic_graph(H, params)
    mask, E = fuse_mask(graph.A, A_dyn, params)
    return replace(graph, A_tilde_dyn=A_dyn, mask=mask, E=E)


def global_trend_field(
    t:      float,
    H:      Tensor,
    drive:  Tensor,
    graph:  TransmissionGraph,
    params: GltgParams
) -> Tensor:
    """dH/dt = φ_g(H) ⊙ g(t), with g the temporal drive."""
    return residual_gnn(H, graph.deg_norm, params) * drive


def sparsity_penalty(E: Tensor) -> Tensor:
    """Mean absolute edge weight of the fused graph."""
    return mean_all(absolute(E))

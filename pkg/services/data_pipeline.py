# Data Pipeline — ingestion, windowing, normalization, metrics, synthetic data
#
# Series CSV:    header row of region names, one row per time step.
# Adjacency CSV: "src,dst" edge list, undirected, deduplicated.
# Splits are chronological (train < val < test); normalizer statistics
# come from the training split only and windows never straddle splits.

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ENGINE_DEFAULTS, STD_FLOOR, SYNTH_SOLVER_DT
from models.schemas import SynthConfig
from services.control_path import drop_observations
from services.errors import ConfigError, ContractError, FormatError, NumericError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ── Dataset types ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Split:
    train: Tuple[int, int]
    val:   Tuple[int, int]
    test:  Tuple[int, int]

    @classmethod
    def chronological(
        cls,
        length:      int,
        train_ratio: float = ENGINE_DEFAULTS["train_ratio"],
        val_ratio:   float = ENGINE_DEFAULTS["val_ratio"]
    ) -> "Split":
        n_train = int(round(length * train_ratio))
        n_val   = int(round(length * val_ratio))
        return cls(train=(0, n_train), val=(n_train, n_train + n_val), test=(n_train + n_val, length))

    def range(self, name: str) -> Tuple[int, int]:
        if name not in SPLITS:
            raise ContractError(f"unknown split '{name}'")
        return getattr(self, name)


@dataclass(frozen=True)
class EpidemicDataset:
    name:         str
    region_names: List[str]
    series:       np.ndarray       # N×L cases per step
    adjacency:    np.ndarray       # N×N binary, symmetric, zero diagonal
    split:        Split

    def __post_init__(self):
        n, length = self.series.shape
        if len(self.region_names) != n:
            raise ContractError(f"{len(self.region_names)} names for {n} series")
        if self.adjacency.shape != (n, n):
            raise ContractError(f"adjacency is {self.adjacency.shape}, expected {(n, n)}")
        if np.any(self.series < 0) or not np.isfinite(self.series).all():
            raise ContractError("series must be finite and nonnegative")
        bounds = [self.split.train, self.split.val, self.split.test]
        if bounds[0][0] != 0 or bounds[-1][1] != length:
            raise ContractError("splits must cover the whole series")
        if any(lo > hi for lo, hi in bounds) or any(a[1] != b[0] for a, b in zip(bounds, bounds[1:])):
            raise ContractError("splits must be contiguous and ordered train < val < test")

    @property
    def n_regions(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1]

    def split_series(self, name: str) -> np.ndarray:
        lo, hi = self.split.range(name)
        return self.series[:, lo:hi]


@dataclass(frozen=True)
class WindowSample:
    X:            np.ndarray          # N×T normalized inputs
    target:       np.ndarray          # (N,) normalized value at offset T-1+h
    knot_times:   List[np.ndarray]    # surviving observation times per region
    start:        int                 # absolute index of the first input step
    target_index: int                 # absolute index of the target step
    last_raw:     np.ndarray          # (N,) raw value at the last input step
    target_raw:   np.ndarray          # (N,) raw target

    def observations(self, region: int) -> np.ndarray:
        return self.X[region, self.knot_times[region].astype(int)]


@dataclass(frozen=True)
class Normalizer:
    """Per-region z-score with statistics from the training split only."""

    mean: np.ndarray
    std:  np.ndarray

    @classmethod
    def fit(cls, train_series: np.ndarray) -> "Normalizer":
        return cls(
            mean=train_series.mean(axis=1),
            std=np.maximum(train_series.std(axis=1), STD_FLOOR),
        )

    def _shape(self, stat: np.ndarray, x: np.ndarray) -> np.ndarray:
        return stat if x.ndim == 1 else stat.reshape((-1,) + (1,) * (x.ndim - 1))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x is (N,) or N×…"""
        return (x - self._shape(self.mean, x)) / self._shape(self.std, x)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self._shape(self.std, z) + self._shape(self.mean, z)


# ── CSV ingestion ────────────────────────────────────────────────────────────

def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _missing(cell) -> bool:
    return cell is None or (isinstance(cell, float) and np.isnan(cell)) or str(cell).strip() == ""


def _read_frame(path, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, **kwargs)
    except pd.errors.EmptyDataError as exc:
        raise FormatError(f"{path} is empty", line=1) from exc
    except pd.errors.ParserError as exc:
        found = re.search(r"line (\d+)", str(exc))
        raise FormatError(f"ragged row in {path}: {exc}", line=int(found.group(1)) if found else None) from exc


def load_series_csv(path) -> Tuple[List[str], np.ndarray]:
    """Region names and the N×L series matrix."""
    frame = _read_frame(path, header=None, skip_blank_lines=False)
    header = [str(c).strip() for c in frame.iloc[0]]
    if any(_missing(c) for c in header) or all(_is_number(c) for c in header):
        raise FormatError("missing header row of region names", line=1)
    if len(set(header)) != len(header):
        raise FormatError("duplicate region names in header", line=1)

    rows = []
    for idx in range(1, len(frame)):
        line = idx + 1
        cells = list(frame.iloc[idx])
        if all(_missing(c) for c in cells):
            continue
        if any(_missing(c) for c in cells):
            raise FormatError(f"ragged row: expected {len(header)} values", line=line)
        try:
            values = [float(c) for c in cells]
        except ValueError as exc:
            raise FormatError(f"non-numeric value ({exc})", line=line) from exc
        if any(v < 0 or not np.isfinite(v) for v in values):
            raise FormatError("counts must be finite and nonnegative", line=line)
        rows.append(values)
    if not rows:
        raise FormatError("series file has no data rows", line=2)
    return header, np.asarray(rows, dtype=np.float64).T


def load_adjacency_csv(path, region_names: Sequence[str]) -> np.ndarray:
    frame = _read_frame(path)
    if [c.strip() for c in frame.columns] != ["src", "dst"]:
        raise FormatError("adjacency header must be 'src,dst'", line=1)
    index = {name: i for i, name in enumerate(region_names)}
    A = np.zeros((len(region_names), len(region_names)))
    for idx, (src, dst) in enumerate(frame.itertuples(index=False)):
        line = idx + 2
        if _missing(src) or _missing(dst):
            raise FormatError("ragged edge row", line=line)
        src, dst = src.strip(), dst.strip()
        for name in (src, dst):
            if name not in index:
                raise FormatError(f"unknown region '{name}'", line=line)
        if src == dst:
            raise FormatError(f"self-loop edge on '{src}'", line=line)
        A[index[src], index[dst]] = A[index[dst], index[src]] = 1.0
    return A


def load_csv(
    series_path,
    adjacency_path=None,
    name:        Optional[str] = None,
    train_ratio: float = ENGINE_DEFAULTS["train_ratio"],
    val_ratio:   float = ENGINE_DEFAULTS["val_ratio"],
    adjacency:   Optional[np.ndarray] = None
) -> EpidemicDataset:
    """Load and validate a dataset; adjacency comes from a CSV or a given matrix."""
    names, series = load_series_csv(series_path)
    if adjacency_path is not None:
        A = load_adjacency_csv(adjacency_path, names)
    elif adjacency is not None:
        A = np.asarray(adjacency, dtype=np.float64)
    else:
        A = np.zeros((len(names), len(names)))
    return EpidemicDataset(
        name=name or Path(series_path).stem,
        region_names=names,
        series=series,
        adjacency=A,
        split=Split.chronological(series.shape[1], train_ratio, val_ratio),
    )


def save_csv(ds: EpidemicDataset, out_dir) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series_path, adjacency_path = out / "series.csv", out / "adjacency.csv"
    pd.DataFrame(ds.series.T, columns=ds.region_names).to_csv(series_path, index=False, float_format="%.10g")
    edges = [
        (ds.region_names[u], ds.region_names[v])
        for u in range(ds.n_regions) for v in range(u + 1, ds.n_regions)
        if ds.adjacency[u, v] or ds.adjacency[v, u]
    ]
    pd.DataFrame(edges, columns=["src", "dst"]).to_csv(adjacency_path, index=False)
    return series_path, adjacency_path


# ── Windowing ────────────────────────────────────────────────────────────────

def count_windows(length: int, window: int, horizon: int) -> int:
    return length - window - horizon + 1


def make_windows(
    ds:           EpidemicDataset,
    window:       int,
    horizon:      int,
    missing_rate: float = 0.0,
    seed:         int = 0,
    split:        str = "train",
    normalizer:   Optional[Normalizer] = None
) -> List[WindowSample]:
    """
    Stride-1 windows inside one split. The target sits h steps after the
    last input; knots are dropped per (window, region) at `missing_rate`.
    """
    lo, hi = ds.split.range(split)
    if window + horizon > hi - lo:
        raise ConfigError(
            f"{split} split has {hi - lo} steps, needs window + horizon = {window + horizon}"
        )
    normalizer = normalizer or Normalizer.fit(ds.split_series("train"))
    scaled = normalizer.forward(ds.series)
    times  = np.arange(window, dtype=np.float64)

    samples = []
    for start in range(lo, hi - window - horizon + 1):
        stop   = start + window
        target = stop - 1 + horizon
        X = scaled[:, start:stop]
        knots = [
            drop_observations(times, X[v], missing_rate, (seed, start, v))[0]
            for v in range(ds.n_regions)
        ]
        samples.append(WindowSample(
            X            = X,
            target       = scaled[:, target],
            knot_times   = knots,
            start        = start,
            target_index = target,
            last_raw     = ds.series[:, stop - 1],
            target_raw   = ds.series[:, target],
        ))
    return samples


def latest_window(ds: EpidemicDataset, window: int, normalizer: Normalizer) -> WindowSample:
    """The final `window` steps of the series, for forecasting past the data."""
    if ds.length < window:
        raise ConfigError(f"series has {ds.length} steps, window needs {window}")
    start = ds.length - window
    X = normalizer.forward(ds.series)[:, start:]
    nan = np.full(ds.n_regions, np.nan)
    return WindowSample(
        X=X, target=nan, knot_times=[np.arange(window, dtype=np.float64)] * ds.n_regions,
        start=start, target_index=ds.length - 1, last_raw=ds.series[:, -1], target_raw=nan,
    )


# ── Metrics ──────────────────────────────────────────────────────────────────

def rmse(pred, truth) -> float:
    p, t = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size or p.size == 0:
        raise ContractError(f"rmse needs equal nonempty inputs, got {p.size} and {t.size}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def peak_time_error(pred, truth, threshold) -> Optional[float]:
    """
    MAE over the points where truth exceeds `threshold` (scalar, or one value
    per region broadcast along the last axis). None when no point qualifies.
    """
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction {p.shape} vs truth {t.shape}")
    mask = t > np.asarray(threshold, dtype=np.float64)
    if not mask.any():
        return None
    return float(np.mean(np.abs(p - t)[mask]))


def peak_thresholds(ds: EpidemicDataset, spec: str = ENGINE_DEFAULTS["peak_threshold"]) -> np.ndarray:
    """Per-region significance thresholds: 'percentile:p' of training values or 'absolute:v'."""
    kind, _, number = spec.partition(":")
    value = float(number)
    if kind == "percentile":
        return np.percentile(ds.split_series("train"), value, axis=1)
    if kind == "absolute":
        return np.full(ds.n_regions, value)
    raise ConfigError(f"bad peak threshold spec '{spec}'")


# ── Synthetic networked SIR ──────────────────────────────────────────────────

def beta_at(cfg: SynthConfig, t: float) -> float:
    beta = cfg.beta_schedule[0].beta
    for seg in cfg.beta_schedule:
        if seg.start <= t:
            beta = seg.beta
    return beta


def simulate_network_sir(cfg: SynthConfig) -> np.ndarray:
    """
    (L+1)×3×N compartments at integer steps. Region v is infected at rate
    β(t)·S_v·(I_v + Σ_u c_vu I_u)/P_v; integrated with RK4 at dt = 0.1.
    """
    C     = np.asarray(cfg.coupling, dtype=np.float64)
    P     = np.asarray(cfg.population, dtype=np.float64)
    gamma = cfg.gamma
    substeps = int(round(1.0 / SYNTH_SOLVER_DT))
    h = 1.0 / substeps

    def rates(t, s, i):
        flow     = beta_at(cfg, t) * s * (i + C @ i) / P
        recovery = gamma * i
        return -flow, flow - recovery, recovery

    s = P - np.asarray(cfg.initial_infected, dtype=np.float64)
    i = np.asarray(cfg.initial_infected, dtype=np.float64)
    r = np.zeros_like(P)
    out = np.empty((cfg.length + 1, 3, cfg.n_regions))
    out[0] = (s, i, r)
    for step in range(cfg.length):
        for sub in range(substeps):
            t = step + sub * h
            k1 = rates(t, s, i)
            k2 = rates(t + 0.5 * h, s + 0.5 * h * k1[0], i + 0.5 * h * k1[1])
            k3 = rates(t + 0.5 * h, s + 0.5 * h * k2[0], i + 0.5 * h * k2[1])
            k4 = rates(t + h, s + h * k3[0], i + h * k3[1])
            s, i, r = (
                x + (h / 6.0) * (a + 2.0 * b + 2.0 * c + e)
                for x, a, b, c, e in zip((s, i, r), k1, k2, k3, k4)
            )
        if not (np.isfinite(s).all() and np.isfinite(i).all()):
            raise NumericError(f"synthetic trajectory diverged at step {step}")
        out[step + 1] = (s, i, r)
    return out


def generate_synthetic(cfg: SynthConfig, train_ratio: float = ENGINE_DEFAULTS["train_ratio"],
                       val_ratio: float = ENGINE_DEFAULTS["val_ratio"]) -> EpidemicDataset:
    """Per-step new infections of a networked SIR, plus clipped Gaussian noise."""
    states = simulate_network_sir(cfg)
    clean  = (states[:-1, 0, :] - states[1:, 0, :]).T        # N×L
    std    = cfg.noise_std + cfg.noise_peak_fraction * float(clean.max())
    if std > 0:
        rng = np.random.default_rng(cfg.seed)
        observed = np.clip(clean + rng.normal(0.0, std, clean.shape), 0.0, None)
    else:
        observed = np.clip(clean, 0.0, None)

    C = np.asarray(cfg.coupling, dtype=np.float64)
    A = ((C + C.T) > 0).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    names = cfg.region_names or [f"region_{v}" for v in range(cfg.n_regions)]
    logger.info("synthetic dataset name=%s regions=%d length=%d noise_std=%.4g",
                cfg.name, cfg.n_regions, cfg.length, std)
    return EpidemicDataset(
        name=cfg.name,
        region_names=list(names),
        series=observed,
        adjacency=A,
        split=Split.chronological(cfg.length, train_ratio, val_ratio),
    )

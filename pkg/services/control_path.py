# Control Path — continuous path Q_v(t) per region and its derivative dQ/dt
#
# Channel 0 is time itself (identity map, derivative exactly 1).
# Channels 1..c-1 are natural cubic splines through the observation knots.
# Paths are immutable after fit and never extrapolate past the last knot.

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

from services.errors import ConfigError, DomainError, InsufficientDataError, NumericError, OrderingError

# Solver stage times may overshoot the last knot by rounding error only.
_DOMAIN_SLACK = 1e-9

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class ControlPath:
    knots:  np.ndarray          # (n,) strictly increasing
    values: np.ndarray          # (n, c); column 0 is the knot time
    spline: CubicSpline         # observation channels 1..c-1

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def spline_coeffs(self) -> np.ndarray:
        """Per-segment cubic coefficients, shape (4, n-1, c-1)."""
        return self.spline.c

    @property
    def t_start(self) -> float:
        return float(self.knots[0])

    @property
    def t_end(self) -> float:
        return float(self.knots[-1])

    def _clip(self, t: float) -> float:
        if t < self.t_start - _DOMAIN_SLACK or t > self.t_end + _DOMAIN_SLACK:
            raise DomainError(f"t={t} outside path domain [{self.t_start}, {self.t_end}]")
        return min(max(t, self.t_start), self.t_end)

    def evaluate(self, t: float) -> np.ndarray:
        t = self._clip(t)
        return np.concatenate(([t], self.spline(t)))

    def derivative(self, t: float) -> np.ndarray:
        t = self._clip(t)
        return np.concatenate(([1.0], self.spline(t, 1)))


def fit(times: Sequence[float], observations) -> ControlPath:
    """Natural cubic spline through (t_i, x_i); observations is n×(c-1) or length n."""
    knots = np.asarray(times, dtype=np.float64)
    obs   = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[:, None]
    if knots.ndim != 1 or knots.size < 2:
        raise InsufficientDataError(f"a control path needs at least 2 knots, got {knots.size}")
    if obs.shape[0] != knots.size:
        raise InsufficientDataError(f"{knots.size} knots but {obs.shape[0]} observation rows")
    if np.any(np.diff(knots) <= 0):
        raise OrderingError("knot times must be strictly increasing")
    if not np.isfinite(obs).all():
        raise NumericError("observations must be finite; drop missing points instead")

    spline = CubicSpline(knots, obs, axis=0, bc_type="natural", extrapolate=False)
    values = np.column_stack([knots, obs])
    return ControlPath(knots=knots, values=values, spline=spline)


def drop_observations(
    times:        Sequence[float],
    observations,
    missing_rate: float,
    seed:         Seed
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Remove a uniformly random subset of interior knots.
    Exactly floor(rate × n_interior) knots go; both endpoints always stay,
    so the integration domain never changes.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise ConfigError(f"missing_rate must lie in [0, 1), got {missing_rate}")
    knots = np.asarray(times, dtype=np.float64)
    obs   = np.asarray(observations, dtype=np.float64)
    if knots.size < 2:
        raise InsufficientDataError(f"at least 2 knots must survive, got {knots.size}")
    if missing_rate == 0.0:
        return knots, obs

    interior = np.arange(1, knots.size - 1)
    n_drop   = int(np.floor(missing_rate * interior.size + 1e-9))
    if n_drop == 0:
        return knots, obs
    rng     = np.random.default_rng(seed)
    dropped = rng.choice(interior, size=n_drop, replace=False)
    keep    = np.setdiff1d(np.arange(knots.size), dropped)
    return knots[keep], obs[keep]


@dataclass
class PathSet:
    """One control path per region, sharing a common time domain."""

    paths:  List[ControlPath]
    _cache: Dict[float, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def fit_regions(cls, knot_times: Sequence[Sequence[float]], series: Sequence[Sequence[float]]) -> "PathSet":
        paths = [fit(t, x) for t, x in zip(knot_times, series)]
        starts = {p.t_start for p in paths}
        ends   = {p.t_end for p in paths}
        if len(starts) != 1 or len(ends) != 1:
            raise DomainError("all regions must share the first and last knot")
        return cls(paths=paths)

    @property
    def t_start(self) -> float:
        return self.paths[0].t_start

    @property
    def t_end(self) -> float:
        return self.paths[0].t_end

    def initial(self) -> np.ndarray:
        """Q(t_0) per region, N×c."""
        return np.stack([p.values[0] for p in self.paths])

    def values(self, t: float) -> np.ndarray:
        return np.stack([p.evaluate(t) for p in self.paths])

    def derivatives(self, t: float) -> np.ndarray:
        """dQ/dt per region, N×c. RK4 stages revisit t, so results are memoized."""
        key = float(t)
        if key not in self._cache:
            self._cache[key] = np.stack([p.derivative(key) for p in self.paths])
        return self._cache[key]

# ODE Engine — fixed-step integration, differentiated through the unrolled steps
#
# States are anything closed under `state + state` and `state * float`
# (Tensor, LatentState). Every stage evaluation runs against the active
# GradientTape, so backward() through the final state yields gradients
# w.r.t. parameters and the initial state (discretize-then-optimize).

import logging
from typing import List, Protocol, Tuple, TypeVar

from models.schemas import OdeConfig
from services.errors import ContractError, DivergenceError

logger = logging.getLogger(__name__)

State = TypeVar("State")


class VectorField(Protocol):
    """dstate/dt at (t, state). Output shapes must equal input shapes."""

    def __call__(self, t: float, state: State) -> State: ...


def _is_finite(state) -> bool:
    return state.is_finite()


def step_euler(field: VectorField, t: float, state: State, h: float) -> State:
    return state + field(t, state) * h


def step_rk4(field: VectorField, t: float, state: State, h: float) -> State:
    """Classical 4-stage Runge–Kutta update."""
    if not h > 0:
        raise ContractError(f"step size must be positive, got {h}")
    half = 0.5 * h
    k1 = field(t, state)
    k2 = field(t + half, state + k1 * half)
    k3 = field(t + half, state + k2 * half)
    k4 = field(t + h, state + k3 * h)
    return state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


STEPPERS = {
    "euler": step_euler,
    "rk4":   step_rk4,
}


def n_steps(cfg: OdeConfig) -> int:
    """One unit of time is one observation interval."""
    intervals = max(1, round(cfg.t_end - cfg.t_start))
    return intervals * cfg.substeps_per_interval


def integrate(field: VectorField, initial: State, cfg: OdeConfig) -> List[Tuple[float, State]]:
    """
    Integrate from cfg.t_start to cfg.t_end with a fixed step.
    Returns [(t_i, state_i)], t_i = t_start + i·h, including both endpoints;
    the last stamp is cfg.t_end itself.

    States accumulate in floating point: Euler on a constant field lands on
    z(0) + (t_end − t_start) exactly only when every increment h·f is exact
    (dyadic h); with h = 1/3 it can miss by a few ulps.
    Raises DivergenceError naming the first step whose state is non-finite.
    """
    if not _is_finite(initial):
        raise DivergenceError(0, "non-finite initial state")

    stepper = STEPPERS[cfg.method]
    steps   = n_steps(cfg)
    h       = (cfg.t_end - cfg.t_start) / steps

    trajectory = [(cfg.t_start, initial)]
    state = initial
    for i in range(steps):
        t = cfg.t_start + i * h
        state = stepper(field, t, state, h)
        if not _is_finite(state):
            raise DivergenceError(i + 1)
        t_next = cfg.t_end if i + 1 == steps else cfg.t_start + (i + 1) * h
        trajectory.append((t_next, state))

    logger.debug("integrated method=%s steps=%d h=%.4g", cfg.method, steps, h)
    return trajectory

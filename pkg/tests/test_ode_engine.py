import math

import numpy as np
import pytest

from models.schemas import OdeConfig
from services.errors import ContractError, DivergenceError
from services.ode_engine import integrate, n_steps, step_rk4
from services.tensor_core import GradientTape, Tensor, matmul, sum_all, tanh


def growth(t, z):
    return z


def final(method: str, substeps: int, t_end: float = 1.0) -> float:
    cfg = OdeConfig(method=method, substeps_per_interval=substeps, t_start=0.0, t_end=t_end)
    return integrate(growth, Tensor([[1.0]]), cfg)[-1][1].item()


class TestIntegrate:

    def test_rk4_exponential(self):
        # ten RK4 steps of size 0.1 land 2.08e-6 below e
        assert abs(final("rk4", 10) - math.e) < 3e-6

    def test_rk4_convergence_order(self):
        errors = [abs(final("rk4", n) - math.e) for n in (10, 20, 40)]
        orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
        assert min(orders) >= 3.8

    def test_euler_dyadic_steps_are_exact(self):
        assert final("euler", 2) == 2.25
        assert final("euler", 4) == (1.25 ** 4)

    def test_trajectory_times(self):
        cfg = OdeConfig(method="euler", substeps_per_interval=2, t_start=0.0, t_end=3.0)
        traj = integrate(growth, Tensor([[1.0]]), cfg)
        assert len(traj) == n_steps(cfg) + 1 == 7
        assert [t for t, _ in traj] == [0.5 * i for i in range(7)]

    @pytest.mark.parametrize("t_end, substeps, expected", [
        (19.0, 2, 38),
        (1.0, 1, 1),
        (0.4, 3, 3),
    ])
    def test_step_count(self, t_end, substeps, expected):
        assert n_steps(OdeConfig(substeps_per_interval=substeps, t_start=0.0, t_end=t_end)) == expected

    def test_divergence_names_step(self):
        def blow_up(t, z):
            return z * 1e200

        cfg = OdeConfig(method="euler", substeps_per_interval=4, t_start=0.0, t_end=1.0)
        with pytest.raises(DivergenceError) as info:
            integrate(blow_up, Tensor([[1e200]]), cfg)
        assert info.value.step == 1

    def test_non_finite_initial_state(self):
        cfg = OdeConfig(t_start=0.0, t_end=1.0)
        with pytest.raises(DivergenceError) as info:
            integrate(growth, Tensor([[np.inf]]), cfg)
        assert info.value.step == 0

    def test_rejects_empty_span(self):
        with pytest.raises(ValueError):
            OdeConfig(t_start=1.0, t_end=1.0)

    def test_rk4_rejects_non_positive_step(self):
        with pytest.raises(ContractError):
            step_rk4(growth, 0.0, Tensor([[1.0]]), 0.0)

    def test_gradient_through_solver(self):
        # z(1) = z0·e^{a} for dz/dt = a·z; d z(1)/d a = z0·e^{a} at t = 1
        cfg = OdeConfig(method="rk4", substeps_per_interval=50, t_start=0.0, t_end=1.0)
        with GradientTape() as tape:
            a = tape.watch(np.array([[0.5]]))
            z1 = integrate(lambda t, z: z * a, Tensor([[2.0]]), cfg)[-1][1]
            loss = sum_all(z1)
        grad = tape.gradient(loss, {"a": a})["a"]
        assert grad.item() == pytest.approx(2.0 * math.exp(0.5), rel=1e-7)

    def test_euler_convergence_order(self):
        errors = [abs(final("euler", n) - math.e) for n in (10, 20, 40)]
        orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
        assert min(orders) >= 0.9

    def test_rk4_single_step_on_time_field(self):
        out = step_rk4(lambda t, z: Tensor([[t]]), 0.0, Tensor([[0.0]]), 1.0)
        assert out.item() == pytest.approx(0.5, abs=1e-15)

    def test_constant_field_with_dyadic_step_is_exact(self):
        cfg = OdeConfig(method="euler", substeps_per_interval=4, t_start=0.0, t_end=1.0)
        traj = integrate(lambda t, z: Tensor([[1.0]]), Tensor([[7.0]]), cfg)
        assert traj[-1][1].item() == 8.0

    def test_rk4_constant_field(self):
        cfg = OdeConfig(method="rk4", substeps_per_interval=3, t_start=0.0, t_end=2.0)
        traj = integrate(lambda t, z: Tensor([[1.0]]), Tensor([[7.0]]), cfg)
        assert traj[-1][1].item() == pytest.approx(9.0, abs=1e-14)

    def test_constant_field_with_third_steps(self):
        cfg = OdeConfig(method="euler", substeps_per_interval=3, t_start=0.0, t_end=1.0)
        traj = integrate(lambda t, z: Tensor([[1.0]]), Tensor([[0.3]]), cfg)
        assert traj[-1][0] == 1.0
        assert traj[-1][1].item() == pytest.approx(1.3, abs=1e-15)

    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_zero_field_keeps_state(self, method):
        cfg = OdeConfig(method=method, substeps_per_interval=5, t_start=0.0, t_end=2.0)
        traj = integrate(lambda t, z: z * 0.0, Tensor([[7.0, -2.0]]), cfg)
        assert all(np.array_equal(z.data, [[7.0, -2.0]]) for _, z in traj)

    def test_last_stamp_is_t_end(self):
        cfg = OdeConfig(method="rk4", substeps_per_interval=3, t_start=0.1, t_end=2.1)
        traj = integrate(growth, Tensor([[1.0]]), cfg)
        assert traj[-1][0] == 2.1

    def test_gradient_wrt_initial_state(self):
        w = np.array([[0.4, -0.3], [0.2, 0.5]])
        z0 = np.array([[0.7, -0.2]])
        cfg = OdeConfig(method="rk4", substeps_per_interval=8, t_start=0.0, t_end=1.0)

        def field(t, z):
            return tanh(matmul(z, Tensor(w)))

        def loss_at(z: np.ndarray) -> float:
            z1 = integrate(field, Tensor(z), cfg)[-1][1]
            return sum_all(z1 * z1).item()

        with GradientTape() as tape:
            z = tape.watch(z0)
            z1 = integrate(field, z, cfg)[-1][1]
            loss = sum_all(z1 * z1)
        grad = tape.gradient(loss, {"z0": z})["z0"]

        step, numeric = 1e-6, np.zeros_like(z0)
        for idx in np.ndindex(z0.shape):
            up, down = z0.copy(), z0.copy()
            up[idx] += step
            down[idx] -= step
            numeric[idx] = (loss_at(up) - loss_at(down)) / (2 * step)
        assert np.allclose(grad, numeric, rtol=1e-6, atol=1e-9)

import numpy as np
import pytest

from src.config.schemas import ScenarioConfig, SensorConfig
from src.nn import Tensor, no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scenario_cfg(**overrides) -> ScenarioConfig:
    data = {
        "name": "toy",
        "num_steps": 20,
        "dt": 1.0,
        "seed": 7,
        "process_noise_pos_std": 0.0,
        "process_noise_vel_std": 0.0,
        "targets": [
            {"position": (-500.0, 200.0, 0.0), "velocity": (8.0, 0.0, 0.0)},
            {"position": (600.0, -300.0, 0.0), "velocity": (0.0, -6.0, 0.0)},
        ],
    }
    data.update(overrides)
    return ScenarioConfig.model_validate(data)


@pytest.fixture
def scenario_cfg() -> ScenarioConfig:
    return make_scenario_cfg()


@pytest.fixture
def small_sensor() -> SensorConfig:
    return SensorConfig(h=32, w=32, m=2, endo_width_bins=6, clutter_window_half_width=6)


def gradcheck(fn, *arrays, eps=1e-6, rtol=1e-6, atol=1e-7, seed=0):
    """Compare analytic gradients of sum(fn(*xs) * R) with central differences in float64."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = np.asarray(np.random.default_rng(seed).standard_normal(out.shape))
    (out * Tensor(weights)).sum().backward()

    def objective(values):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in values]).data * weights))

    for index, (array, tensor) in enumerate(zip(arrays, tensors)):
        numeric = np.zeros_like(array)
        for pos in np.ndindex(array.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[index][pos] += eps
            minus[index][pos] -= eps
            numeric[pos] = (objective(plus) - objective(minus)) / (2 * eps)
        np.testing.assert_allclose(tensor.grad, numeric, rtol=rtol, atol=atol, err_msg=f"argument {index}")

import math

import numpy as np
import pytest

from src.core.models.state import EnuState, MotionModel, Trajectory
from src.core.services.scenario import (
    beam_gain,
    coverage_ok,
    generate_scenario,
    propagate,
    sweep_schedule,
)
from src.utils.errors import ConfigError
from tests.conftest import make_scenario_cfg


def test_propagate_constant_velocity_arithmetic():
    model = MotionModel.constant_velocity(0.5)
    z = propagate(EnuState(0, 0, 0, 1, 2, 0), model)
    np.testing.assert_allclose(z.as_array(), [0.5, 1.0, 0.0, 1.0, 2.0, 0.0])


def test_propagate_zero_velocity_is_fixed_point(rng):
    state = EnuState(10.0, -4.0, 2.0)
    assert propagate(state, MotionModel.constant_velocity(1.0), rng) == state


@pytest.mark.slow
def test_propagate_noise_mean(rng):
    sigma = 2.0
    model = MotionModel(phi=MotionModel.constant_velocity(1.0).phi, q=sigma ** 2 * np.eye(6), dt=1.0)
    state = EnuState(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    draws = np.array([propagate(state, model, rng).as_array() for _ in range(10_000)])
    expected = model.phi @ state.as_array()
    np.testing.assert_array_less(np.abs(draws.mean(axis=0) - expected), 4 * sigma / 100)


def test_motion_model_block_form():
    model = MotionModel.constant_velocity(2.0, 0.1, 0.5, vertical=False)
    np.testing.assert_array_equal(model.phi[:3, 3:], 2.0 * np.eye(3))
    np.testing.assert_array_equal(model.phi[3:, :3], np.zeros((3, 3)))
    assert model.q[2, 2] == 0.0 and model.q[5, 5] == 0.0
    assert model.q[0, 0] == pytest.approx(0.01)


def test_beam_gain_shape(rng):
    bw = math.radians(10)
    assert beam_gain(0.3, 0.3, bw) == 1.0
    assert beam_gain(0.3 + 0.51 * bw, 0.3, bw) == 0.0
    offsets = rng.uniform(-bw, bw, 100)
    for off in offsets:
        assert beam_gain(off, 0.0, bw) == pytest.approx(beam_gain(-off, 0.0, bw))
    grid = np.linspace(0, bw, 50)
    gains = [beam_gain(o, 0.0, bw) for o in grid]
    assert all(a >= b for a, b in zip(gains, gains[1:]))


def test_beam_gain_wraps_across_pi():
    bw = math.radians(10)
    assert beam_gain(math.pi - 0.01, -math.pi + 0.01, bw) > 0.9


def test_constant_velocity_trajectories_are_affine(scenario_cfg):
    scenario = generate_scenario(scenario_cfg)
    phi = MotionModel.constant_velocity(scenario_cfg.dt).phi
    for target in scenario.targets:
        assert len(target) == scenario_cfg.num_steps
        for a, b in zip(target.states, target.states[1:]):
            np.testing.assert_allclose(b, phi @ a, atol=1e-9)


def test_generation_is_reproducible():
    cfg = make_scenario_cfg(process_noise_pos_std=0.1, process_noise_vel_std=0.5)
    a = generate_scenario(cfg)
    b = generate_scenario(cfg)
    for ta, tb in zip(a.targets, b.targets):
        assert ta.states.tobytes() == tb.states.tobytes()
    assert a.aim_azimuths.tobytes() == b.aim_azimuths.tobytes()


def test_noise_never_moves_targets_vertically():
    cfg = make_scenario_cfg(process_noise_pos_std=0.5, process_noise_vel_std=0.5)
    for target in generate_scenario(cfg).targets:
        assert np.all(target.states[:, 2] == 0.0)
        assert np.all(target.states[:, 5] == 0.0)


def test_move_stop_move_segments():
    cfg = make_scenario_cfg(
        process_noise_pos_std=0.1,
        process_noise_vel_std=0.5,
        targets=[{
            "position": (0.0, 0.0, 0.0),
            "velocity": (5.0, 5.0, 0.0),
            "segments": [
                {"kind": "cruise", "start": 0, "end": 4},
                {"kind": "decelerate", "start": 4, "end": 6, "accel": 2.0},
                {"kind": "stop", "start": 6, "end": 11},
                {"kind": "accelerate", "start": 11, "end": 14, "accel": 2.0},
                {"kind": "turn", "start": 14, "end": 20, "turn_rate_deg": 10.0},
            ],
        }],
    )
    target = generate_scenario(cfg).targets[0]
    stopped = (target.times >= 6) & (target.times <= 11)
    np.testing.assert_array_equal(target.states[stopped, 3:], 0.0)
    # no drift while parked
    parked = target.states[(target.times >= 7) & (target.times <= 11), :3]
    np.testing.assert_array_equal(parked, np.repeat(parked[:1], len(parked), axis=0))
    assert np.hypot(*target.states[13, 3:5]) > 0.0
    speeds = np.hypot(target.states[:, 3], target.states[:, 4])
    assert speeds[12] > speeds[11]


def test_segments_must_partition_horizon():
    with pytest.raises(Exception):
        make_scenario_cfg(targets=[{
            "position": (0.0, 0.0, 0.0),
            "segments": [{"kind": "cruise", "start": 0, "end": 5}],
        }])


def test_leaving_field_of_regard_is_config_error():
    cfg = make_scenario_cfg(targets=[{"position": (1900.0, 0.0, 0.0), "velocity": (20.0, 0.0, 0.0)}])
    with pytest.raises(ConfigError):
        generate_scenario(cfg)


def test_sweep_covers_targets_within_window(scenario_cfg):
    scenario = generate_scenario(scenario_cfg)
    assert coverage_ok(
        scenario.aim_azimuths, scenario.platform, scenario.targets,
        math.radians(scenario_cfg.beam.beamwidth_deg), scenario_cfg.beam.revisit_window
    )


def test_sweep_revisits_opposite_extremes():
    cfg = make_scenario_cfg(targets=[
        {"position": (0.0, -1400.0, 0.0)},
        {"position": (0.0, 1400.0, 0.0)},
    ])
    scenario = generate_scenario(cfg)
    bw = math.radians(cfg.beam.beamwidth_deg)
    window = cfg.beam.revisit_window
    for target in scenario.targets:
        d = target.states[:, :2] - scenario.platform.states[:, :2]
        az = np.arctan2(d[:, 0], d[:, 1])
        off = np.abs((az - scenario.aim_azimuths + np.pi) % (2 * np.pi) - np.pi)
        hits = off < bw / 2
        for start in range(len(hits) - window + 1):
            assert hits[start:start + window].any()


def test_zero_sweep_rate_is_config_error(scenario_cfg):
    cfg = scenario_cfg.model_copy(update={"beam": scenario_cfg.beam.model_copy(update={"sweep_rate_deg": 0.0})})
    platform = Trajectory(times=np.arange(3.0), states=np.zeros((3, 6)))
    with pytest.raises(ConfigError):
        sweep_schedule(cfg, platform)


def test_narrow_beam_fails_coverage():
    cfg = make_scenario_cfg(beam={"beamwidth_deg": 1.0, "sweep_rate_deg": 1.0, "revisit_window": 2})
    with pytest.raises(ConfigError):
        generate_scenario(cfg)

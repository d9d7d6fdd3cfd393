import math
from typing import List, Optional, Sequence

import numpy as np

from src.config.schemas import ScenarioConfig, Segment, SegmentKind, TargetScript
from src.core.models.state import EnuState, MotionModel, Scenario, Trajectory
from src.core.services.geometry import wrap_angle
from src.utils.errors import ConfigError
from src.utils.logging import logger
from src.utils.rng import derive_rng


def propagate(state: EnuState, model: MotionModel, rng: Optional[np.random.Generator] = None) -> EnuState:
    z = model.phi @ state.as_array()
    if rng is not None and np.any(model.q):
        z = z + rng.multivariate_normal(np.zeros(6), model.q)
    return EnuState.from_array(z)


def beam_gain(target_azimuth: float, aim_azimuth: float, beamwidth: float) -> float:
    """Raised-cosine two-way gain, 1 at boresight and 0 from half a beamwidth outward."""
    offset = abs(wrap_angle(target_azimuth - aim_azimuth))
    if offset >= beamwidth / 2.0:
        return 0.0
    return 0.5 * (1.0 + math.cos(2.0 * math.pi * offset / beamwidth))


def _segment_at(segments: Sequence[Segment], t: float) -> Optional[Segment]:
    if not segments:
        return None
    eps = 1e-9
    # Stop intervals are closed so the scripted zero-velocity samples include both ends.
    for seg in segments:
        if seg.kind == SegmentKind.STOP and seg.start - eps <= t <= seg.end + eps:
            return seg
    for seg in segments:
        if seg.start - eps <= t < seg.end - eps:
            return seg
    return segments[-1]


def _platform_trajectory(cfg: ScenarioConfig, times: np.ndarray) -> Trajectory:
    profile = cfg.platform
    states = np.zeros((len(times), 6))
    if profile.kind == "straight":
        p0 = np.asarray(profile.position, dtype=np.float64)
        v = np.asarray(profile.velocity, dtype=np.float64)
        states[:, :3] = p0 + times[:, None] * v
        states[:, 3:] = v
    else:
        ce, cn, alt = profile.position
        sign = -1.0 if profile.clockwise else 1.0
        omega = sign * profile.speed / profile.radius
        phi = math.radians(profile.start_angle_deg) + omega * times
        states[:, 0] = ce + profile.radius * np.cos(phi)
        states[:, 1] = cn + profile.radius * np.sin(phi)
        states[:, 2] = alt
        states[:, 3] = -omega * profile.radius * np.sin(phi)
        states[:, 4] = omega * profile.radius * np.cos(phi)
    return Trajectory(times=times, states=states, object_id=-1)


def _target_trajectory(
    script: TargetScript,
    cfg: ScenarioConfig,
    times: np.ndarray,
    rng: np.random.Generator,
    object_id: int
) -> Trajectory:
    model = MotionModel.constant_velocity(
        cfg.dt, cfg.process_noise_pos_std, cfg.process_noise_vel_std, vertical=False
    )
    noise_std = np.sqrt(np.diag(model.q))
    noisy = bool(np.any(noise_std))
    states = np.zeros((len(times), 6))
    states[0, :3] = script.position
    states[0, 3:] = script.velocity
    first = _segment_at(script.segments, float(times[0]))
    if first is not None and first.kind == SegmentKind.STOP:
        states[0, 3:] = 0.0

    v0 = np.asarray(script.velocity, dtype=np.float64)
    heading = math.atan2(v0[0], v0[1]) if np.hypot(v0[0], v0[1]) > 0 else 0.0

    for i in range(1, len(times)):
        prev = states[i - 1]
        seg = _segment_at(script.segments, float(times[i]))
        kind = seg.kind if seg is not None else SegmentKind.CRUISE
        z = model.phi @ prev

        if kind == SegmentKind.STOP:
            z[3:] = 0.0
            states[i] = z
            continue

        speed = float(np.hypot(z[3], z[4]))
        if kind == SegmentKind.ACCELERATE:
            speed += seg.accel * cfg.dt
        elif kind == SegmentKind.DECELERATE:
            speed = max(speed - seg.accel * cfg.dt, 0.0)
        elif kind == SegmentKind.TURN:
            heading += math.radians(seg.turn_rate_deg) * cfg.dt
        if kind != SegmentKind.CRUISE:
            z[3] = speed * math.sin(heading)
            z[4] = speed * math.cos(heading)

        if noisy:
            z = z + rng.standard_normal(6) * noise_std
        if np.hypot(z[3], z[4]) > 1e-9:
            heading = math.atan2(z[3], z[4])
        states[i] = z

    center = np.asarray(cfg.field_of_regard.center, dtype=np.float64)
    horiz = np.hypot(states[:, 0] - center[0], states[:, 1] - center[1])
    if np.any(horiz > cfg.field_of_regard.radius):
        k = int(np.argmax(horiz > cfg.field_of_regard.radius))
        raise ConfigError(
            f"Target {object_id} leaves the field of regard at t={times[k]:.2f}s "
            f"({horiz[k]:.1f} m from center, radius {cfg.field_of_regard.radius} m)"
        )
    return Trajectory(times=times, states=states, object_id=object_id)


def coverage_ok(
    aims: np.ndarray,
    platform: Trajectory,
    targets: List[Trajectory],
    beamwidth: float,
    window: int
) -> bool:
    """True when every target falls inside the beam at least once in every `window` consecutive steps."""
    n = len(aims)
    if n == 0:
        return False
    for target in targets:
        d = target.states[:, :2] - platform.states[:, :2]
        az = np.arctan2(d[:, 0], d[:, 1])
        inside = np.abs(wrap_angle(az - aims)) < beamwidth / 2.0
        w = min(window, n)
        counts = np.convolve(inside.astype(np.int64), np.ones(w, dtype=np.int64), mode="valid")
        if np.any(counts == 0):
            return False
    return True


def sweep_schedule(
    cfg: ScenarioConfig,
    platform: Trajectory,
    targets: Optional[List[Trajectory]] = None
) -> np.ndarray:
    """Sawtooth aim azimuths across the sector subtended by the field of regard."""
    beam = cfg.beam
    if beam.sweep_rate_deg <= 0:
        raise ConfigError(f"Sweep rate must be positive, got {beam.sweep_rate_deg} deg/s")
    step = math.radians(beam.sweep_rate_deg) * cfg.dt
    beamwidth = math.radians(beam.beamwidth_deg)
    margin = math.radians(beam.sector_margin_deg)
    center = np.asarray(cfg.field_of_regard.center, dtype=np.float64)

    aims = np.zeros(len(platform))
    for k in range(len(platform)):
        d = center - platform.states[k, :2]
        dist = float(np.hypot(d[0], d[1]))
        if dist <= cfg.field_of_regard.radius:
            half = math.pi
        else:
            half = math.asin(cfg.field_of_regard.radius / dist) + margin
        positions = max(1, math.ceil(2.0 * half / step))
        j = k % positions
        aims[k] = wrap_angle(math.atan2(d[0], d[1]) + (j - (positions - 1) / 2.0) * step)

    if targets is not None and not coverage_ok(aims, platform, targets, beamwidth, beam.revisit_window):
        raise ConfigError(
            f"Sweep at {beam.sweep_rate_deg} deg/s with a {beam.beamwidth_deg} deg beam cannot revisit every "
            f"target within {beam.revisit_window} steps"
        )
    return aims


def broadside_azimuth(cfg: ScenarioConfig, platform: EnuState, offset_deg: float = 0.0) -> float:
    """Array broadside: facing the field-of-regard center from the platform."""
    ce, cn = cfg.field_of_regard.center
    return wrap_angle(math.atan2(ce - platform.p_e, cn - platform.p_n) + math.radians(offset_deg))


def generate_scenario(cfg: ScenarioConfig, root_seed: Optional[int] = None) -> Scenario:
    seed = cfg.seed if root_seed is None else root_seed
    times = np.arange(cfg.num_steps, dtype=np.float64) * cfg.dt
    platform = _platform_trajectory(cfg, times)
    targets = [
        _target_trajectory(script, cfg, times, derive_rng(seed, f"scenario/{cfg.name}/target/{k}"), k)
        for k, script in enumerate(cfg.targets)
    ]
    aims = sweep_schedule(cfg, platform, targets)
    logger.info(
        f"Generated scenario '{cfg.name}': {cfg.num_steps} steps, {len(targets)} targets, "
        f"platform {cfg.platform.kind}"
    )
    return Scenario(platform=platform, targets=targets, aim_azimuths=aims)

"""ENU state <-> radar measurement transforms.

All functions are pure and thread-safe. Angles are radians.
"""
import numpy as np

from src.core.models.state import EnuState, Measurement4
from src.utils.errors import DomainError


def _relative(target: EnuState, platform: EnuState):
    d = target.position - platform.position
    u = target.velocity - platform.velocity
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise DomainError(f"Target and platform positions coincide at {target.position}")
    return d, u, r


def measure(target: EnuState, platform: EnuState) -> Measurement4:
    d, u, r = _relative(target, platform)
    range_rate = float(d @ u) / r
    azimuth = float(np.arctan2(d[0], d[1]))
    elevation = float(np.arcsin(np.clip(d[2] / r, -1.0, 1.0)))
    return Measurement4(range=r, range_rate=range_rate, azimuth=azimuth, elevation=elevation)


def measure_array(target: EnuState, platform: EnuState) -> np.ndarray:
    return measure(target, platform).as_array()


def jacobian(target: EnuState, platform: EnuState) -> np.ndarray:
    """4x6 partials of (range, range_rate, azimuth, elevation) w.r.t. the target state."""
    d, u, r = _relative(target, platform)
    de, dn, du = d
    rho2 = de * de + dn * dn
    if rho2 == 0.0:
        raise DomainError("Azimuth is undefined for a target directly above or below the platform")
    rho = np.sqrt(rho2)
    r2 = r * r
    los = d / r

    H = np.zeros((4, 6), dtype=np.float64)
    H[0, :3] = los
    H[1, :3] = u / r - (d @ u) * d / (r2 * r)
    H[1, 3:] = los
    H[2, 0] = dn / rho2
    H[2, 1] = -de / rho2
    H[3, 0] = -du * de / (rho * r2)
    H[3, 1] = -du * dn / (rho * r2)
    H[3, 2] = rho / r2
    return H


def finite_difference_jacobian(target: EnuState, platform: EnuState, step: float = 1e-3) -> np.ndarray:
    """Central-difference reference for `jacobian` with an absolute step in metres and m/s."""
    z = target.as_array()
    H = np.zeros((4, 6), dtype=np.float64)
    for j in range(6):
        h = step
        plus, minus = z.copy(), z.copy()
        plus[j] += h
        minus[j] -= h
        fp = measure_array(EnuState.from_array(plus), platform)
        fm = measure_array(EnuState.from_array(minus), platform)
        diff = fp - fm
        diff[2] = (diff[2] + np.pi) % (2.0 * np.pi) - np.pi
        H[:, j] = diff / (2.0 * h)
    return H


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def ground_clutter_range_rate(platform: EnuState, aim_azimuth: float) -> float:
    """Range-rate of stationary ground seen along the aim azimuth."""
    return -float(platform.v_e * np.sin(aim_azimuth) + platform.v_n * np.cos(aim_azimuth))


def point_on_ray(platform: EnuState, azimuth: float, range_m: float, altitude: float = 0.0) -> np.ndarray:
    """Point at slant range `range_m` along `azimuth` from the platform, at the given altitude."""
    dz = altitude - platform.p_u
    horiz2 = range_m * range_m - dz * dz
    if horiz2 <= 0.0:
        raise DomainError(f"Range {range_m} m is shorter than the altitude difference {abs(dz)} m")
    horiz = np.sqrt(horiz2)
    return np.array([
        platform.p_e + horiz * np.sin(azimuth),
        platform.p_n + horiz * np.cos(azimuth),
        altitude,
    ], dtype=np.float64)

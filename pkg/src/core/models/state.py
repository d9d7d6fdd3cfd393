from dataclasses import dataclass, field
from typing import Iterator, Tuple
import numpy as np


@dataclass(frozen=True)
class EnuState:
    """Position (m) and velocity (m/s) in a local East-North-Up frame."""
    p_e: float
    p_n: float
    p_u: float
    v_e: float = 0.0
    v_n: float = 0.0
    v_u: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"EnuState components must be finite: {self}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.p_e, self.p_n, self.p_u], dtype=np.float64)

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.v_e, self.v_n, self.v_u], dtype=np.float64)

    def as_array(self) -> np.ndarray:
        return np.array([self.p_e, self.p_n, self.p_u, self.v_e, self.v_n, self.v_u], dtype=np.float64)

    @classmethod
    def from_array(cls, z) -> "EnuState":
        z = np.asarray(z, dtype=np.float64).reshape(6)
        return cls(*(float(v) for v in z))


@dataclass(frozen=True)
class Measurement4:
    range: float
    range_rate: float
    azimuth: float
    elevation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.range_rate, self.azimuth, self.elevation], dtype=np.float64)


@dataclass(frozen=True)
class MotionModel:
    """Linear dynamics z' = phi @ z + w, w ~ N(0, q)."""
    phi: np.ndarray
    q: np.ndarray
    dt: float

    @classmethod
    def constant_velocity(cls, dt: float, pos_std: float = 0.0, vel_std: float = 0.0,
                          vertical: bool = True) -> "MotionModel":
        phi = np.eye(6)
        phi[:3, 3:] = dt * np.eye(3)
        diag = np.array([pos_std ** 2] * 3 + [vel_std ** 2] * 3, dtype=np.float64)
        if not vertical:
            diag[[2, 5]] = 0.0
        return cls(phi=phi, q=np.diag(diag), dt=dt)


@dataclass
class Trajectory:
    """Time-ordered states of one platform or target; `states` is (T, 6)."""
    times: np.ndarray
    states: np.ndarray
    object_id: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 6)
        if len(self.times) != len(self.states):
            raise ValueError("Trajectory times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("Trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Tuple[float, EnuState]]:
        for t, z in zip(self.times, self.states):
            yield float(t), EnuState.from_array(z)

    def state_at(self, k: int) -> EnuState:
        return EnuState.from_array(self.states[k])


@dataclass
class Scenario:
    """Generated platform and target trajectories plus the per-step beam aim."""
    platform: Trajectory
    targets: list = field(default_factory=list)
    aim_azimuths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def times(self) -> np.ndarray:
        return self.platform.times

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.config.settings import settings
from src.utils.errors import ConfigError

Vec3 = Tuple[float, float, float]


class SegmentKind(str, Enum):
    CRUISE = "cruise"
    ACCELERATE = "accelerate"
    DECELERATE = "decelerate"
    STOP = "stop"
    TURN = "turn"


class Segment(BaseModel):
    kind: SegmentKind
    start: float = Field(..., ge=0.0, description="Segment start time (s)")
    end: float = Field(..., description="Segment end time (s)")
    accel: float = Field(0.0, ge=0.0, description="Speed change rate for accelerate/decelerate (m/s^2)")
    turn_rate_deg: float = Field(0.0, description="Heading change rate for turn (deg/s, clockwise positive)")

    @model_validator(mode="after")
    def check_interval(self):
        if self.end <= self.start:
            raise ValueError(f"Segment end {self.end} must exceed start {self.start}")
        return self


class TargetScript(BaseModel):
    position: Vec3
    velocity: Vec3 = (0.0, 0.0, 0.0)
    snr_db: float = Field(15.0, description="Target SNR before beam gain (dB)")
    segments: List[Segment] = Field(default_factory=list)


class PlatformProfile(BaseModel):
    kind: Literal["straight", "circular"] = "circular"
    position: Vec3 = Field((0.0, 0.0, 3000.0), description="Start (straight) or orbit center + altitude (circular)")
    velocity: Vec3 = (50.0, 0.0, 0.0)
    radius: float = Field(10000.0, gt=0.0)
    speed: float = Field(50.0, ge=0.0)
    start_angle_deg: float = 0.0
    clockwise: bool = False


class BeamConfig(BaseModel):
    beamwidth_deg: float = Field(10.0, gt=0.0)
    sweep_rate_deg: float = Field(10.0, description="Aim azimuth step rate (deg/s)")
    revisit_window: int = Field(4, ge=1, description="Coverage window W in steps")
    sector_margin_deg: float = Field(1.0, ge=0.0)


class FieldOfRegard(BaseModel):
    center: Tuple[float, float] = (0.0, 0.0)
    radius: float = Field(2000.0, gt=0.0)


class ScenarioConfig(BaseModel):
    name: str = "scenario"
    num_steps: int = Field(100, ge=1)
    dt: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    platform: PlatformProfile = Field(default_factory=PlatformProfile)
    targets: List[TargetScript] = Field(..., min_length=1)
    beam: BeamConfig = Field(default_factory=BeamConfig)
    field_of_regard: FieldOfRegard = Field(default_factory=FieldOfRegard)
    process_noise_pos_std: float = Field(0.1, ge=0.0)
    process_noise_vel_std: float = Field(0.5, ge=0.0)

    @property
    def K(self) -> int:
        return len(self.targets)

    @property
    def duration(self) -> float:
        return self.num_steps * self.dt

    @model_validator(mode="after")
    def check_segments_partition(self):
        horizon = self.duration
        for k, target in enumerate(self.targets):
            if not target.segments:
                continue
            segments = sorted(target.segments, key=lambda s: s.start)
            if not math.isclose(segments[0].start, 0.0, abs_tol=1e-9):
                raise ValueError(f"Target {k}: first segment must start at 0")
            for prev, nxt in zip(segments, segments[1:]):
                if not math.isclose(prev.end, nxt.start, abs_tol=1e-9):
                    raise ValueError(f"Target {k}: segments leave a gap or overlap at t={prev.end}")
            if not math.isclose(segments[-1].end, horizon, abs_tol=1e-9):
                raise ValueError(f"Target {k}: segments must end at num_steps*dt = {horizon}")
            target.segments = segments
        return self


class SensorConfig(BaseModel):
    h: int = Field(256, ge=4, description="Range bins (rows)")
    w: int = Field(128, ge=4, description="Doppler bins (columns)")
    m: int = Field(2, ge=1, description="Receive channels")
    wavelength: float = Field(0.03, gt=0.0)
    bandwidth: float = Field(5e6, gt=0.0)
    n_pulse: int = Field(128, ge=1)
    t_pri: float = Field(1e-4, gt=0.0)
    l_az: float = Field(1.0, gt=0.0)
    l_el: float = Field(0.3, gt=0.0)
    range_start: float = Field(7000.0, gt=0.0)
    noise_variances: List[float] = Field(default_factory=lambda: [1.0, 1.0])
    clutter_cnr_db: float = 20.0
    clutter_range_decay: float = Field(2.0, ge=0.0)
    clutter_correlation: float = Field(0.9, ge=0.0, lt=1.0)
    clutter_phase_slope: float = 0.5
    endo_width_bins: int = Field(16, ge=0)
    clutter_window_half_width: int = Field(25, ge=1)
    broadside_offset_deg: float = 0.0
    stap_loading: float = Field(1e-3, ge=0.0, description="Diagonal loading as a fraction of trace/m")
    stap_oracle: bool = Field(False, description="Whiten with the generating covariances instead of estimates")

    @model_validator(mode="after")
    def check_channels(self):
        if len(self.noise_variances) != self.m:
            raise ValueError(f"noise_variances has {len(self.noise_variances)} entries, expected m={self.m}")
        if any(v <= 0 for v in self.noise_variances):
            raise ValueError("noise variances must be positive")
        return self


class DatasetConfig(BaseModel):
    num_images: int = Field(800, ge=1)
    targets_per_image: int = Field(300, ge=0)
    endo_fraction: float = Field(0.5, ge=0.0, le=1.0)
    snr_db_min: float = 5.0
    snr_db_max: float = 20.0
    beamwidth_deg: float = Field(6.0, gt=0.0)
    platform_speed: float = Field(50.0, ge=0.0)
    platform_altitude: float = Field(3000.0, ge=0.0)

    @model_validator(mode="after")
    def check_snr(self):
        if self.snr_db_max < self.snr_db_min:
            raise ValueError("snr_db_max must be >= snr_db_min")
        return self


class UNetConfig(BaseModel):
    depth_blocks: int = Field(4, ge=1)
    feature_width: int = Field(32, ge=1)
    kernel_size: int = Field(3, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    threshold: float = Field(0.5, gt=0.0, le=1.0)
    patch_radius: int = Field(1, ge=0)

    @field_validator("kernel_size")
    @classmethod
    def odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd for same padding")
        return v


class TrainingConfig(BaseModel):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class CvaeConfig(BaseModel):
    latent_dim: int = Field(8, ge=1)
    hidden_sizes: List[int] = Field(default_factory=lambda: [64, 64, 32])
    samples: int = Field(1000, ge=2)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    match_threshold: float = Field(0.5, gt=0.0, le=1.0)


class TrackerConfig(BaseModel):
    p_detection: float = Field(0.9, gt=0.0, lt=1.0)
    false_alarm_density: Optional[float] = Field(None, gt=0.0, description="Per (m * m/s); derived from the detector threshold when unset")
    new_track_density: float = Field(1e-7, gt=0.0)
    unet_false_alarm_rate: float = Field(1e-4, gt=0.0, description="Per-pixel false alarm rate at the UNet threshold")
    n_scan: int = Field(3, ge=1)
    max_hypotheses: int = Field(100, ge=1)
    confirm_m: int = Field(3, ge=1)
    confirm_n: int = Field(5, ge=1)
    delete_misses: int = Field(5, ge=1)
    gate_probability: float = Field(0.99, gt=0.0, lt=1.0)
    cfar_threshold: float = Field(30.0, ge=0.0)
    unet_threshold: Union[float, Literal["auto"]] = 0.5
    snr_floor: float = Field(1.0, gt=0.0)
    process_noise_pos_std: float = Field(0.5, ge=0.0)
    process_noise_vel_std: float = Field(1.0, ge=0.0)
    init_velocity_std: float = Field(15.0, gt=0.0)

    @model_validator(mode="after")
    def check_m_of_n(self):
        if self.confirm_m > self.confirm_n:
            raise ValueError("confirm_m must not exceed confirm_n")
        return self


class MetricsConfig(BaseModel):
    association_distance: float = Field(50.0, gt=0.0)
    num_thresholds: int = Field(200, ge=2)
    bleed_tolerance: int = Field(1, ge=0)
    target_fpr: float = Field(1e-4, gt=0.0, lt=1.0)


class ArtifactsConfig(BaseModel):
    dataset: str = "dataset.rdmd"
    test_dataset: str = "test.rdmd"
    unet_checkpoint: str = "unet.nnck"
    cvae_checkpoint: str = "cvae.nnck"


class RunConfig(BaseModel):
    seed: Optional[int] = Field(None, ge=0, le=2**64 - 1)
    output_dir: str = f"{settings.OUTPUT_DIR}/default"
    detector: Literal["cfar", "unet"] = "unet"
    uncertainty: Literal["baseline-eq9", "cvae"] = "cvae"
    scenario: Optional[ScenarioConfig] = None
    scenario_file: Optional[str] = None
    sensor: SensorConfig = Field(default_factory=SensorConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    test_dataset: DatasetConfig = Field(default_factory=lambda: DatasetConfig(num_images=100))
    unet: UNetConfig = Field(default_factory=UNetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    cvae: CvaeConfig = Field(default_factory=CvaeConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    artifacts: ArtifactsConfig = Field(default_factory=ArtifactsConfig)

    @model_validator(mode="after")
    def check_targets_fit(self):
        pixels = self.sensor.h * self.sensor.w
        for name, ds in (("dataset", self.dataset), ("test_dataset", self.test_dataset)):
            if ds.targets_per_image > pixels:
                raise ValueError(f"{name}.targets_per_image={ds.targets_per_image} exceeds h*w={pixels}")
        return self

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("No seed given: set `seed` in the config or pass --seed")
        return self.seed

    def require_scenario(self) -> ScenarioConfig:
        if self.scenario is None:
            raise ConfigError("This command needs a scenario (inline `scenario` or `scenario_file`)")
        return self.scenario


def _read_yaml(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Top level of {path} must be a mapping")
    return data


def load_run_config(
    path: Union[str, Path],
    seed: Optional[int] = None,
    output_dir: Optional[str] = None
) -> RunConfig:
    """Load and validate a run document; command-line overrides win over file values."""
    path = Path(path)
    if not path.exists() and not path.is_absolute() and (settings.config_dir_path / path).exists():
        path = settings.config_dir_path / path
    data = _read_yaml(path)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir

    scenario_file = data.get("scenario_file")
    if scenario_file and data.get("scenario") is None:
        scenario_path = Path(scenario_file)
        if not scenario_path.is_absolute():
            scenario_path = path.parent / scenario_path
        data["scenario"] = _read_yaml(scenario_path)
        data["scenario_file"] = str(scenario_file)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config {path}: {e}")


def config_hash(cfg: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a validated config."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

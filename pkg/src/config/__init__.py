from .settings import settings
from .schemas import RunConfig, ScenarioConfig, load_run_config, config_hash

__all__ = ['settings', 'RunConfig', 'ScenarioConfig', 'load_run_config', 'config_hash']

from pathlib import Path
from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    # Project
    PROJECT_NAME: str = "GMTI Tracker"
    VERSION: str = "0.1.0"
    LOG_LEVEL: str = "INFO"

    # Paths
    PROJECT_ROOT: Path = Path(__file__).parent.parent.parent
    LOGS_DIR: Path = PROJECT_ROOT / "logs"
    CONFIG_DIR: str = "configs"
    OUTPUT_DIR: str = "runs"

    # Execution
    NUM_THREADS: int = 1

    @property
    def config_dir_path(self) -> Path:
        path = Path(self.CONFIG_DIR)
        if not path.is_absolute():
            path = self.PROJECT_ROOT / path
        return path

    class Config:
        env_file = ".env"
        env_prefix = "GMTI_"

settings = Settings()

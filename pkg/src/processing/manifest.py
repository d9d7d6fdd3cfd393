"""Companion manifest stamping every artifact of a run with its config hash and seed."""
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Union

from src.utils.errors import ConfigError, VerificationError
from src.utils.logging import logger

MANIFEST_NAME = ".manifest.json"
_CHUNK = 1 << 20


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(_CHUNK), b""):
            digest.update(block)
    return digest.hexdigest()


class ArtifactManifest:
    """Artifact name -> {sha256, config_hash, seed, command} for one output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        self.entries: Dict[str, Dict] = {}
        if self.path.exists():
            try:
                self.entries = json.loads(self.path.read_text(encoding="utf-8"))["artifacts"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ConfigError(f"Corrupt manifest {self.path}: {e}")

    def record(self, path: Union[str, Path], config_hash: str, seed: int, command: str) -> Optional[str]:
        """Stamp an artifact; files outside the output directory (shared checkpoints) are not recorded."""
        path = Path(path)
        try:
            name = path.resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            logger.debug(f"Not recording {path}: outside {self.out_dir}")
            return None
        self.entries[name] = {
            "sha256": sha256_file(path),
            "config_hash": config_hash,
            "seed": seed,
            "command": command,
        }
        self.save()
        return name

    def save(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        body = {"artifacts": dict(sorted(self.entries.items()))}
        self.path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def verify(self, config_hash: Optional[str] = None) -> List[str]:
        """Re-hash every recorded artifact; raise on any mismatch and return the verified names."""
        if not self.entries:
            raise VerificationError(f"No artifacts recorded in {self.path}")
        problems = []
        for name, entry in sorted(self.entries.items()):
            target = self.out_dir / name
            if not target.exists():
                problems.append(f"{name}: missing")
            elif sha256_file(target) != entry["sha256"]:
                problems.append(f"{name}: content hash mismatch")
            elif config_hash is not None and entry["config_hash"] != config_hash:
                problems.append(f"{name}: written under config {entry['config_hash'][:12]}")
        if problems:
            raise VerificationError("Verification failed: " + "; ".join(problems))
        logger.info(f"Verified {len(self.entries)} artifacts in {self.out_dir}")
        return sorted(self.entries)

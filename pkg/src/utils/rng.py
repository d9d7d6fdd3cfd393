"""Named random streams derived from a single root seed."""
import hashlib
import numpy as np


def stream_key(name: str) -> list[int]:
    """Fold a stream name into four 32-bit words."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(root_seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under `root_seed`.

    The same (seed, name) pair always yields the same stream, and distinct names are
    statistically independent, e.g. derive_rng(7, "noise/img/17").
    """
    if root_seed < 0:
        raise ValueError(f"Seed must be non-negative, got {root_seed}")
    seq = np.random.SeedSequence([root_seed & 0xFFFFFFFF, root_seed >> 32, *stream_key(name)])
    return np.random.Generator(np.random.PCG64(seq))

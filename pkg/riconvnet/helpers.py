import zlib
from typing import Sequence, Union

import numpy as np

from riconvnet.constants import FLOAT_PRECISION

# List Helpers
# \________________


def mean(values: Union[Sequence[int], Sequence[float]]) -> float:
    if not values:
        return 0.0
    return sum(values) / len(values)


# Random sources
# \______________


def stable_key(name: str) -> int:
    # Stable across processes, unlike hash()
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, *keys: Union[int, str]) -> np.random.SeedSequence:
    entropy = [seed] + [stable_key(k) if isinstance(k, str) else k for k in keys]
    return np.random.SeedSequence(entropy)


def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])


# Numeric helpers
# \_______________


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Norm-wise over the tensor, exact zero entries do not blow it up
    if analytic.size == 0:
        return 0.0
    scale = max(
        float(np.linalg.norm(analytic)),
        float(np.linalg.norm(numeric)),
        float(np.finfo(np.float64).tiny),
    )
    return float(np.linalg.norm(analytic - numeric)) / scale


# Format
# \_____


def format_float(value: float) -> str:
    return f"{value:.{FLOAT_PRECISION}g}"

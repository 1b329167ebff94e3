"""Seed fan-out: every random draw in a command descends from one --seed."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *labels: str | int) -> int:
    """Independent, reproducible child seed for ``labels`` under ``seed``."""
    entropy = [int(seed)] + [zlib.crc32(str(label).encode("utf-8")) for label in labels]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])

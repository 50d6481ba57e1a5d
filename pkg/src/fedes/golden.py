"""Pinned determinism fixtures: emit once, check everywhere."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .detrand import CommonSeed, PerturbSeed, derive_seed, scaled_normals

DEFAULT_DIR = Path("tests/golden")
STREAM_FILE = "gauss_stream.bin"
SEED_FILE = "derive_seed.hex"
STREAM_VALUES = 64
MAX_ULP = 1


def stream_values() -> np.ndarray:
    """First 64 values of the all-zero-key stream at sigma = 1."""
    return scaled_normals(PerturbSeed(bytes(32), 0, 0, 0), 1.0, 0, STREAM_VALUES)


def seed_value() -> str:
    return derive_seed(CommonSeed(bytes(32)), 0, 0, 0).bytes.hex()


def emit(directory=DEFAULT_DIR) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stream = directory / STREAM_FILE
    stream.write_bytes(stream_values().astype("<f4").tobytes())
    seed = directory / SEED_FILE
    seed.write_text(seed_value() + "\n")
    return [stream, seed]


def check(directory=DEFAULT_DIR) -> list[str]:
    """Problems found; empty when the fixtures still hold."""
    directory = Path(directory)
    problems = []
    stream = directory / STREAM_FILE
    if not stream.exists():
        problems.append(f"missing {stream}")
    else:
        pinned = np.frombuffer(stream.read_bytes(), dtype="<f4")
        if len(pinned) != STREAM_VALUES:
            problems.append(f"{stream}: expected {STREAM_VALUES} values, found {len(pinned)}")
        else:
            now = stream_values()
            ulps = np.abs(pinned.view("<i4").astype(np.int64) - now.view(np.int32).astype(np.int64))
            if ulps.max() > MAX_ULP:
                problems.append(f"{stream}: drift of {int(ulps.max())} ulp at index {int(ulps.argmax())}")
    seed = directory / SEED_FILE
    if not seed.exists():
        problems.append(f"missing {seed}")
    elif seed.read_text().strip() != seed_value():
        problems.append(f"{seed}: derived seed changed")
    return problems

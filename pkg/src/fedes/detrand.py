"""Seed hierarchy and position-addressable Gaussian streams.

Every perturbation used in training is a pure function of
``(common seed, round, client, batch, sigma)``, so the server can
regenerate exactly what a client used without anything but the losses
crossing the wire.

Pipeline::

    common seed --SHA-256(common || round u64 LE || client u32 LE || batch u32 LE)--> key
    key --ChaCha20 (zero nonce, counter from 0)--> byte stream
    byte stream --8-byte LE words--> u64 draws
    u64 --(float64(u) + 1) * 2**-64--> u in (0, 1]
    (u1, u2) --Box-Muller in float64--> (z0, z1), times sigma, cast to float32
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

SEED_BYTES = 32
CHACHA_BLOCK = 64
# cryptography packs a 32-bit LE block counter in front of a 96-bit nonce.
_MAX_BLOCKS = 1 << 32
_TWO_NEG_64 = 2.0**-64
_TWO_PI = 2.0 * math.pi

# Chunk size (in values) used when regenerating long streams.
DEFAULT_CHUNK = 1 << 18

# Setup randomness lives in round 0 under a reserved client id so it can never
# collide with training perturbations, which use rounds >= 1.
SETUP_CLIENT = 0xFFFFFFFF
INIT_BATCH = 0
PARTITION_BATCH = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CommonSeed:
    bytes: bytes

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != SEED_BYTES:
            raise ConfigurationError(f"common seed must be {SEED_BYTES} bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @classmethod
    def from_hex(cls, text: str) -> "CommonSeed":
        text = text.strip().lower()
        if text.startswith("0x"):
            text = text[2:]
        if len(text) != 2 * SEED_BYTES:
            raise ConfigurationError(f"seed must be {2 * SEED_BYTES} hex digits, got {len(text)}")
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise ConfigurationError(f"seed is not valid hex: {exc}") from None

    def hex(self) -> str:
        return self.bytes.hex()

    def __repr__(self) -> str:
        # keep the secret out of logs
        return "CommonSeed(<redacted>)"


@dataclass(frozen=True)
class PerturbSeed:
    bytes: bytes
    round: int
    client: int
    batch: int


def derive_seed(common: CommonSeed, round: int, client: int, batch: int) -> PerturbSeed:
    msg = common.bytes + struct.pack("<QII", round, client, batch)
    return PerturbSeed(hashlib.sha256(msg).digest(), round, client, batch)


def child_seed(parent: PerturbSeed, index: int) -> PerturbSeed:
    """Independent sub-stream seed, for consumers needing several streams."""
    return derive_seed(CommonSeed(parent.bytes), 0, index, 0)


def setup_seed(common: CommonSeed, purpose: int) -> PerturbSeed:
    """Seed for non-training randomness (initialisation, partitioning)."""
    return derive_seed(common, 0, SETUP_CLIENT, purpose)


def keystream(key: bytes, offset: int, nbytes: int) -> bytes:
    """ChaCha20 keystream bytes ``[offset, offset + nbytes)`` for ``key``."""
    block, skip = divmod(offset, CHACHA_BLOCK)
    end_block = (offset + nbytes + CHACHA_BLOCK - 1) // CHACHA_BLOCK
    if end_block > _MAX_BLOCKS:
        raise ConfigurationError("stream position beyond 2**32 ChaCha20 blocks")
    nonce = struct.pack("<I", block) + bytes(12)
    enc = Cipher(algorithms.ChaCha20(key, nonce), mode=None).encryptor()
    return enc.update(bytes(skip + nbytes))[skip:]


def uint64_draws(seed: PerturbSeed, start: int, count: int) -> np.ndarray:
    """Raw u64 draws ``[start, start + count)`` of the stream."""
    raw = keystream(seed.bytes, 8 * start, 8 * count)
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64, copy=False)


def uniforms(draws: np.ndarray) -> np.ndarray:
    """Map u64 draws into (0, 1]; zero is excluded so ``log`` stays finite."""
    return (draws.astype(np.float64) + 1.0) * _TWO_NEG_64


def box_muller(u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    return r * np.cos(theta), r * np.sin(theta)


def standard_normals(seed: PerturbSeed, start: int, count: int) -> np.ndarray:
    """Float64 standard normals ``z[start:start + count]`` of the stream.

    Normal ``2p`` and ``2p + 1`` both come from Box-Muller pair ``p``, which
    consumes u64 draws ``2p`` and ``2p + 1``.
    """
    if count <= 0:
        return np.empty(0, dtype=np.float64)
    first_pair = start // 2
    end_pair = (start + count + 1) // 2
    u = uniforms(uint64_draws(seed, 2 * first_pair, 2 * (end_pair - first_pair)))
    z0, z1 = box_muller(u[0::2], u[1::2])
    z = np.empty(2 * len(z0), dtype=np.float64)
    z[0::2] = z0
    z[1::2] = z1
    lo = start - 2 * first_pair
    return z[lo:lo + count]


def _check_sigma(sigma: float) -> np.float32:
    if not sigma > 0 or not math.isfinite(sigma):
        raise ConfigurationError(f"sigma must be positive and finite, got {sigma}")
    return np.float32(sigma)


def scaled_normals(seed: PerturbSeed, sigma: float, start: int, count: int) -> np.ndarray:
    s = _check_sigma(sigma)
    return (np.float64(s) * standard_normals(seed, start, count)).astype(np.float32)


def fill_gaussian(seed: PerturbSeed, sigma: float, count: int, out: np.ndarray) -> None:
    """Write the first ``count`` values of the sigma-scaled stream into ``out``."""
    if out.dtype != np.float32 or out.ndim != 1:
        raise ConfigurationError("out must be a 1-d float32 buffer")
    if len(out) != count:
        raise ConfigurationError(f"count {count} does not match buffer length {len(out)}")
    s = _check_sigma(sigma)
    for lo in range(0, count, DEFAULT_CHUNK):
        n = min(DEFAULT_CHUNK, count - lo)
        out[lo:lo + n] = np.float64(s) * standard_normals(seed, lo, n)


def gaussian_vector(seed: PerturbSeed, sigma: float, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.float32)
    fill_gaussian(seed, sigma, count, out)
    return out


@dataclass
class GaussStream:
    """Cursor over a sigma-scaled stream; ``take(a)`` then ``take(b)`` equals ``take(a + b)``."""

    seed: PerturbSeed
    sigma: float
    cursor: int = field(default=0)

    def __post_init__(self):
        _check_sigma(self.sigma)

    def take(self, count: int) -> np.ndarray:
        out = scaled_normals(self.seed, self.sigma, self.cursor, count)
        self.cursor += count
        return out

    def seek(self, position: int) -> None:
        if position < 0:
            raise ConfigurationError("stream position must be non-negative")
        self.cursor = position

    def chunks(self, count: int, chunk: int = DEFAULT_CHUNK):
        """Yield ``(offset, values)`` pieces covering the next ``count`` values."""
        end = self.cursor + count
        while self.cursor < end:
            offset = self.cursor
            yield offset, self.take(min(chunk, end - offset))


def permutation(seed: PerturbSeed, n: int) -> np.ndarray:
    """Seeded permutation of ``range(n)`` from sorting u64 keys of the stream."""
    keys = uint64_draws(seed, 0, n)
    return np.argsort(keys, kind="stable")

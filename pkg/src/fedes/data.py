"""MNIST-style IDX ingestion, client partitioning and batching."""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .detrand import PerturbSeed, child_seed, permutation
from .nn import Batch, UsageError

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
MODES = ("iid", "noniid")


class IngestionError(ValueError):
    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise UsageError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idxs) -> "Dataset":
        return Dataset(self.images[idxs], self.labels[idxs])


@dataclass
class Partition:
    assignments: list
    mode: str
    clients: int

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def label_histograms(self, labels: np.ndarray, classes: int = 10) -> np.ndarray:
        return np.stack([np.bincount(labels[a], minlength=classes) for a in self.assignments])


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IngestionError(f"corrupt gzip stream: {exc}", 0, str(path)) from None
    return raw


def parse_idx(raw: bytes, magic: int, path: Optional[str] = None) -> np.ndarray:
    """Decode one IDX container with unsigned-byte payload."""
    if len(raw) < 4:
        raise IngestionError("truncated header", len(raw), path)
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IngestionError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", 0, path)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IngestionError("truncated dimension block", len(raw), path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < head + size:
        raise IngestionError(f"truncated payload: need {size} bytes, have {len(raw) - head}",
                             len(raw), path)
    if len(raw) > head + size:
        raise IngestionError("trailing bytes after payload", head + size, path)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, limit: Optional[int] = None) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        # the count field sits right after the magic
        raise IngestionError(f"{len(images)} images vs {len(labels)} labels", 4, str(labels_path))
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    flat = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(flat, labels.astype(np.uint8))


def write_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)


def partition(data: Dataset, clients: int, mode: str, seed: PerturbSeed) -> Partition:
    """Split sample indices across clients.

    ``iid``: seeded shuffle, then equal contiguous slices.
    ``noniid``: stable sort by label, ``2K`` equal shards, two shards per
    client by a seeded permutation.  Each client's indices are then shuffled
    so its local batches mix its classes.  Remainders are dropped.
    """
    n = len(data)
    if clients < 1:
        raise UsageError("need at least one client")
    if clients > n:
        raise UsageError(f"{clients} clients for {n} samples")
    if mode not in MODES:
        raise UsageError(f"unknown partition mode {mode!r}")

    if mode == "iid":
        order = permutation(seed, n)
        size = n // clients
        parts = [order[k * size:(k + 1) * size] for k in range(clients)]
        dropped = n - size * clients
    else:
        shards = 2 * clients
        size = n // shards
        if size == 0:
            raise UsageError(f"{n} samples cannot fill {shards} shards")
        order = np.argsort(data.labels, kind="stable")
        deal = permutation(child_seed(seed, 0), shards)
        parts = []
        for k in range(clients):
            a, b = deal[2 * k], deal[2 * k + 1]
            idx = np.concatenate([order[a * size:(a + 1) * size], order[b * size:(b + 1) * size]])
            mix = permutation(child_seed(seed, k + 1), len(idx))
            parts.append(idx[mix])
        dropped = n - size * shards
    if dropped:
        log.info("partition dropped %d remainder samples", dropped)
    return Partition([np.asarray(p, dtype=np.int64) for p in parts], mode, clients)


def batches(data: Dataset, idxs, n_b: int) -> list[Batch]:
    if n_b < 1:
        raise UsageError("n_b must be >= 1")
    return list(iter_batches(data, idxs, n_b))


def iter_batches(data: Dataset, idxs, n_b: int) -> Iterator[Batch]:
    idxs = np.asarray(idxs)
    for lo in range(0, len(idxs), n_b):
        sel = idxs[lo:lo + n_b]
        yield Batch(data.images[sel], data.labels[sel])

"""Evolution-strategies estimators and the FedES round arithmetic.

Clients turn ``(w, data)`` into a handful of scalar antithetic losses; the
server turns those scalars back into a descent direction by regenerating the
perturbations from the shared seed.  Objectives are plain callables
``f(params, sample) -> float`` so small analytic losses can stand in for the
network in tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .detrand import (
    DEFAULT_CHUNK,
    CommonSeed,
    ConfigurationError,
    GaussStream,
    derive_seed,
    gaussian_vector,
)
from .nn import UsageError

Objective = Callable[[np.ndarray, object], float]
# (client, batch) -> perturbation; replaces seed regeneration in tests.
PerturbationSource = Callable[[int, int], np.ndarray]

DEFAULT_SIGMA = 0.01
SCHEDULES = ("constant", "inverse_t")


class ProtocolError(RuntimeError):
    pass


@dataclass
class RoundConfig:
    sigma: float = DEFAULT_SIGMA
    alpha: float = 0.01
    n_b: int = 64
    beta: float = 1.0
    t: int = 1
    schedule: str = "constant"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.beta <= 1:
            raise ConfigurationError(f"beta must be in (0, 1], got {self.beta}")
        if self.n_b < 1:
            raise ConfigurationError(f"n_b must be >= 1, got {self.n_b}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def step_size(self) -> float:
        if self.schedule == "inverse_t":
            if self.t < 1:
                raise UsageError("inverse_t schedule needs t >= 1")
            return 1.0 / self.t
        return float(self.alpha)

    def at(self, t: int) -> "RoundConfig":
        return RoundConfig(self.sigma, self.alpha, self.n_b, self.beta, t, self.schedule)


@dataclass
class ClientWeights:
    rho: np.ndarray
    batches: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.batches = np.asarray(self.batches, dtype=np.int64)
        if len(self.rho) != len(self.batches):
            raise ConfigurationError("rho and batch counts differ in length")
        if (self.rho < 0).any() or abs(self.rho.sum() - 1.0) > 1e-6:
            raise ConfigurationError(f"rho must be non-negative and sum to 1, got {self.rho.sum()}")
        if (self.batches < 1).any():
            raise ConfigurationError("every client needs at least one batch")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], n_b: int) -> "ClientWeights":
        sizes = np.asarray(sizes, dtype=np.int64)
        return cls(sizes / sizes.sum(), [batch_count(int(n), n_b) for n in sizes])

    def restricted(self, clients: Iterable[int]) -> "ClientWeights":
        """Renormalise rho over a subset (stragglers skipped)."""
        keep = np.zeros(len(self.rho), dtype=bool)
        keep[list(clients)] = True
        rho = np.where(keep, self.rho, 0.0)
        if rho.sum() <= 0:
            raise ProtocolError("no reporting client carries weight")
        return ClientWeights(rho / rho.sum(), self.batches)


@dataclass
class LossReport:
    round: int
    client: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [(int(b), float(np.float32(l))) for b, l in self.entries]

    def validate(self, n_batches: Optional[int] = None) -> None:
        idx = [b for b, _ in self.entries]
        if any(b2 <= b1 for b1, b2 in zip(idx, idx[1:])):
            raise ProtocolError(f"client {self.client}: batch indices not strictly increasing")
        if n_batches is not None and idx and idx[-1] >= n_batches:
            raise ProtocolError(f"client {self.client}: batch index {idx[-1]} >= B_k={n_batches}")


def batch_count(n_samples: int, n_b: int) -> int:
    return -(-n_samples // n_b)


def elite_count(n: int, beta: float) -> int:
    # round first so that e.g. 0.25 * 96 is exactly 24, not 24.000000000000004
    return max(1, math.ceil(round(beta * n, 9)))


def antithetic_batch_loss(objective: Objective, w: np.ndarray, eps: np.ndarray, batch) -> float:
    """Half the loss difference between ``w + eps`` and ``w - eps``.

    Perturbed copies go to scratch buffers; ``w`` is never touched.
    """
    if w.shape != eps.shape:
        raise UsageError(f"perturbation shape {eps.shape} does not match parameters {w.shape}")
    scratch = np.add(w, eps)
    up = objective(scratch, batch)
    np.subtract(w, eps, out=scratch)
    down = objective(scratch, batch)
    return 0.5 * (up - down)


def elite_select(entries: Sequence[tuple[int, float]], beta: float) -> list[tuple[int, float]]:
    """Keep the ``ceil(beta * len)`` entries with the largest ``|loss|``, in batch order."""
    if not entries:
        raise UsageError("nothing to select from")
    if not 0 < beta <= 1:
        raise ConfigurationError(f"beta must be in (0, 1], got {beta}")
    m = elite_count(len(entries), beta)
    if m >= len(entries):
        return list(entries)
    ranked = sorted(entries, key=lambda e: (-abs(e[1]), e[0]))
    return sorted(ranked[:m], key=lambda e: e[0])


def perturbation(common: CommonSeed, t: int, client: int, batch: int, sigma: float,
                 n_params: int) -> np.ndarray:
    return gaussian_vector(derive_seed(common, t, client, batch), sigma, n_params)


def client_round(k: int, w: np.ndarray, cfg: RoundConfig, common: CommonSeed,
                 batches: Sequence, objective: Objective) -> LossReport:
    """One ``ClientUpdate``: an antithetic loss per local batch, then elite selection."""
    if len(batches) == 0:
        raise ConfigurationError(f"client {k} has no data")
    entries = []
    for b, batch in enumerate(batches):
        eps = perturbation(common, cfg.t, k, b, cfg.sigma, len(w))
        entries.append((b, float(np.float32(antithetic_batch_loss(objective, w, eps, batch)))))
    return LossReport(cfg.t, k, elite_select(entries, cfg.beta))


def aggregate(reports: Sequence[LossReport], cfg: RoundConfig, weights: ClientWeights,
              common: CommonSeed, n_params: int,
              source: Optional[PerturbationSource] = None,
              chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Server-side natural-gradient estimate from loss reports.

    Each client contributes ``rho_k / B_k`` times its loss-weighted
    perturbations.  The divisor is the full ``B_k`` even when elite selection
    dropped entries, so the unsent losses count as zeros.  Perturbations are
    regenerated ``chunk`` values at a time.
    """
    seen = set()
    for r in reports:
        if r.client in seen:
            raise ProtocolError(f"duplicate report from client {r.client}")
        if r.round != cfg.t:
            raise ProtocolError(f"report for round {r.round} during round {cfg.t}")
        if not 0 <= r.client < len(weights.rho):
            raise ProtocolError(f"unknown client {r.client}")
        seen.add(r.client)
        r.validate(int(weights.batches[r.client]))

    inv_var = 1.0 / float(np.float32(cfg.sigma)) ** 2
    g = np.zeros(n_params, dtype=np.float64)
    for r in sorted(reports, key=lambda r: r.client):
        scale = inv_var * weights.rho[r.client] / weights.batches[r.client]
        for b, loss in r.entries:
            coef = scale * loss
            if coef == 0.0:
                continue
            if source is not None:
                g += coef * np.asarray(source(r.client, b), dtype=np.float64)
                continue
            stream = GaussStream(derive_seed(common, cfg.t, r.client, b), cfg.sigma)
            for off, eps in stream.chunks(n_params, chunk):
                g[off:off + len(eps)] += coef * eps
    return g.astype(np.float32)


def sgd_update(w: np.ndarray, g: np.ndarray, cfg: RoundConfig) -> np.ndarray:
    if w.shape != g.shape:
        raise UsageError(f"gradient shape {g.shape} does not match parameters {w.shape}")
    return (w.astype(np.float64) - cfg.step_size() * g.astype(np.float64)).astype(np.float32)


def es_estimate_plain(objective: Objective, w: np.ndarray, samples: Sequence,
                      perturbations: Iterable[np.ndarray], sigma: float) -> np.ndarray:
    """Vanilla ES: ``(1 / (n sigma^2)) * sum f(w + eps_i; xi_i) eps_i``."""
    return _es_sum(lambda eps, x: objective(w + eps, x), samples, perturbations, sigma)


def es_estimate_antithetic(objective: Objective, w: np.ndarray, samples: Sequence,
                           perturbations: Iterable[np.ndarray], sigma: float) -> np.ndarray:
    return _es_sum(lambda eps, x: antithetic_batch_loss(objective, w, eps, x),
                   samples, perturbations, sigma)


def _es_sum(loss, samples, perturbations, sigma):
    if len(samples) == 0:
        raise UsageError("need at least one sample")
    total = None
    n = 0
    for x, eps in zip(samples, perturbations):
        term = loss(eps, x) * np.asarray(eps, dtype=np.float64)
        total = term if total is None else total + term
        n += 1
    if n != len(samples):
        raise UsageError("fewer perturbations than samples")
    return total / (n * float(sigma) ** 2)


# Vectorised forms for analytic objectives; rows of ``eps`` are perturbations.

def plain_losses(batched_f: Callable[[np.ndarray, np.ndarray], np.ndarray], w, eps, xs):
    return batched_f(w[None, :] + eps, xs)


def antithetic_losses(batched_f: Callable[[np.ndarray, np.ndarray], np.ndarray], w, eps, xs):
    return 0.5 * (batched_f(w[None, :] + eps, xs) - batched_f(w[None, :] - eps, xs))


def estimate_from_losses(losses: np.ndarray, eps: np.ndarray, sigma: float) -> np.ndarray:
    return (losses[:, None] * eps).sum(axis=0) / (len(losses) * sigma**2)

"""Experiment orchestration: configs, FedES/FedGD runners, metrics, studies."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import MODES, Dataset, batches, load_idx, partition
from .detrand import (
    INIT_BATCH,
    PARTITION_BATCH,
    CommonSeed,
    ConfigurationError,
    derive_seed,
    setup_seed,
    standard_normals,
)
from .escore import (
    SCHEDULES,
    ClientWeights,
    RoundConfig,
    aggregate,
    antithetic_losses,
    batch_count,
    elite_count,
    client_round,
    estimate_from_losses,
    sgd_update,
)
from .fednet import (
    ServerState,
    TcpListener,
    channel_pair,
    client_run,
    parse_address,
    server_run,
    tcp_connect,
)

log = logging.getLogger(__name__)

ALGOS = ("fedes", "fedgd")
TRANSPORTS = ("inproc", "tcp")
CSV_HEADER = ("t", "train_loss", "test_acc", "uplink", "downlink", "wall_ms")
PARAMS_MAGIC = b"FESW"
PARAMS_VERSION = 1
_PARAMS_HEAD = struct.Struct("<4sIQ")

MNIST_WIDTHS = (784, 1024, 1024, 10)
DEFAULT_SEED = "00" * 32


@dataclass
class ExperimentConfig:
    algo: str = "fedes"
    widths: tuple = MNIST_WIDTHS
    clients: int = 10
    n_b: int = 64
    sigma: float = 0.01
    alpha: float = 0.01
    schedule: str = "constant"
    beta: float = 1.0
    mode: str = "iid"
    rounds: int = 100
    common_seed: str = DEFAULT_SEED
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_limit: Optional[int] = None
    transport: str = "inproc"
    eval_every: int = 10
    listen: str = "127.0.0.1:0"
    connect: Optional[str] = None
    timeout: float = 60.0
    skip_stragglers: bool = False
    out: str = "runs/latest"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.algo in ALGOS, f"algo must be one of {ALGOS}"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.transport in TRANSPORTS, f"transport must be one of {TRANSPORTS}"),
            (self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}"),
            (self.clients >= 1, "clients must be >= 1"),
            (self.n_b >= 1, "n_b must be >= 1"),
            (self.sigma > 0, "sigma must be > 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (0 < self.beta <= 1, "beta must be in (0, 1]"),
            (self.rounds >= 0, "rounds must be >= 0"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.timeout > 0, "timeout must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        if self.algo == "fedgd" and self.transport == "tcp":
            raise ConfigurationError("fedgd runs in-process only; the wire protocol carries losses")
        nn.MlpSpec(self.widths)
        self.seed()
        return self

    def seed(self) -> CommonSeed:
        return CommonSeed.from_hex(self.common_seed)

    def spec(self) -> nn.MlpSpec:
        return nn.MlpSpec(self.widths)

    def round_config(self, t: int = 1) -> RoundConfig:
        return RoundConfig(self.sigma, self.alpha, self.n_b, self.beta, t, self.schedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[str] = None) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        if base_dir is not None:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                value = getattr(cfg, key)
                if value and not os.path.isabs(value):
                    setattr(cfg, key, os.path.normpath(os.path.join(base_dir, value)))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class MetricsRow:
    t: int
    train_loss: float
    test_acc: Optional[float]
    uplink: int
    downlink: int
    wall_ms: int

    def as_csv(self) -> list:
        acc = "" if self.test_acc is None else repr(self.test_acc)
        return [self.t, repr(self.train_loss), acc, self.uplink, self.downlink, self.wall_ms]


@dataclass
class ExperimentResult:
    params: np.ndarray
    rows: list
    uplink_per_client: list = field(default_factory=list)
    uplink_frames: list = field(default_factory=list)
    csv_path: Optional[Path] = None
    params_path: Optional[Path] = None

    @property
    def final_accuracy(self) -> Optional[float]:
        accs = [r.test_acc for r in self.rows if r.test_acc is not None]
        return accs[-1] if accs else None


# ---------------------------------------------------------------- params file

def write_params(path, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_PARAMS_HEAD.pack(PARAMS_MAGIC, PARAMS_VERSION, len(params)))
        fh.write(params.tobytes())


def read_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PARAMS_HEAD.size:
        raise ValueError(f"{path}: truncated params header")
    magic, version, n = _PARAMS_HEAD.unpack_from(raw, 0)
    if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
        raise ValueError(f"{path}: not a version-{PARAMS_VERSION} params file")
    if len(raw) != _PARAMS_HEAD.size + 4 * n:
        raise ValueError(f"{path}: expected {n} parameters")
    return np.frombuffer(raw, dtype="<f4", offset=_PARAMS_HEAD.size).astype(np.float32)


# ---------------------------------------------------------------- setup

@dataclass
class Workload:
    """Everything derived from a config before the first round."""

    spec: nn.MlpSpec
    train: Dataset
    test: Optional[Dataset]
    shards: list
    client_batches: list
    weights: ClientWeights
    w0: np.ndarray

    @property
    def pooled_indices(self) -> np.ndarray:
        return np.concatenate(self.shards)


def load_datasets(cfg: ExperimentConfig, with_test: bool = True) -> tuple[Dataset, Optional[Dataset]]:
    if not cfg.train_images or not cfg.train_labels:
        raise ConfigurationError("config needs train_images and train_labels")
    train = load_idx(cfg.train_images, cfg.train_labels, limit=cfg.train_limit)
    test = None
    if with_test and cfg.test_images and cfg.test_labels:
        test = load_idx(cfg.test_images, cfg.test_labels)
    return train, test


def prepare(cfg: ExperimentConfig, train: Dataset, test: Optional[Dataset] = None) -> Workload:
    cfg.validate()
    common = cfg.seed()
    spec = cfg.spec()
    part = partition(train, cfg.clients, cfg.mode, setup_seed(common, PARTITION_BATCH))
    client_batches = [batches(train, idx, cfg.n_b) for idx in part.assignments]
    weights = ClientWeights.from_sizes(part.sizes(), cfg.n_b)
    w0 = nn.init_params(spec, setup_seed(common, INIT_BATCH))
    return Workload(spec, train, test, part.assignments, client_batches, weights, w0)


# ---------------------------------------------------------------- metrics

class MetricsWriter:
    """Streams rows to CSV; the file is valid after every flush."""

    def __init__(self, path: Optional[Path]):
        self.rows: list[MetricsRow] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._csv = csv.writer(self._fh)
            self._csv.writerow(CSV_HEADER)
            self._fh.flush()

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow(row.as_csv())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _evaluator(cfg: ExperimentConfig, work: Workload, writer: MetricsWriter,
               started: float, final_t: int):
    pooled = work.pooled_indices
    x, y = work.train.images[pooled], work.train.labels[pooled]

    def record(t: int, w: np.ndarray, uplink: int, downlink: int) -> None:
        train_loss = float(np.float32(nn.mean_loss(work.spec, w, x, y)))
        acc = None
        if work.test is not None and (t % cfg.eval_every == 0 or t == final_t):
            acc = float(np.float32(nn.accuracy(work.spec, w, work.test.images, work.test.labels)))
        wall = int((time.monotonic() - started) * 1000)
        writer.add(MetricsRow(t, train_loss, acc, uplink, downlink, wall))
        if acc is not None:
            log.info("round %d: train_loss=%.4f test_acc=%.4f", t, train_loss, acc)
    return record


# ---------------------------------------------------------------- FedES

def _client_thread(chan, k, work: Workload, cfg: ExperimentConfig, errors: list):
    try:
        client_run(chan, k, work.client_batches[k], len(work.shards[k]), cfg.round_config(),
                   cfg.seed(), nn.mlp_objective(work.spec))
    except BaseException as exc:  # surfaced by the orchestrator after join
        errors.append(exc)
        chan.close()


def run_fedes(cfg: ExperimentConfig, work: Workload, on_round: Optional[Callable] = None,
              local_clients: bool = True,
              on_listen: Optional[Callable] = None) -> tuple[np.ndarray, ServerState]:
    """Run the federation server, with clients as threads of this process.

    With ``local_clients=False`` (TCP only) the server waits for ``K``
    external client processes instead of spawning its own.
    """
    if not local_clients and cfg.transport != "tcp":
        raise ConfigurationError("external clients need transport 'tcp'")
    state = ServerState(work.w0.copy(), cfg.round_config(), work.weights, cfg.seed(),
                        timeout=cfg.timeout, skip_stragglers=cfg.skip_stragglers)
    errors: list = []
    threads = []
    listener = None
    try:
        if cfg.transport == "inproc":
            server_ends = []
            for k in range(cfg.clients):
                s_end, c_end = channel_pair()
                server_ends.append(s_end)
                threads.append(threading.Thread(target=_client_thread,
                                                args=(c_end, k, work, cfg, errors), daemon=True))
            for th in threads:
                th.start()
        else:
            listener = TcpListener(*parse_address(cfg.listen))
            host, port = listener.address
            if on_listen is not None:
                on_listen(host, port)

            def connect_and_run(k):
                try:
                    chan = tcp_connect(host, port)
                except BaseException as exc:
                    errors.append(exc)
                    return
                _client_thread(chan, k, work, cfg, errors)

            if local_clients:
                threads = [threading.Thread(target=connect_and_run, args=(k,), daemon=True)
                           for k in range(cfg.clients)]
            for th in threads:
                th.start()
            server_ends = [listener.accept(timeout=cfg.timeout) for _ in range(cfg.clients)]
        try:
            w = server_run(state, server_ends, cfg.rounds, on_round=on_round)
        except BaseException:
            if errors:
                raise errors[0]
            raise
        for th in threads:
            th.join(timeout=cfg.timeout)
        if errors:
            raise errors[0]
        if listener is not None:
            for chan in server_ends:
                chan.close()
        return w, state
    finally:
        if listener is not None:
            listener.close()


def run_client(cfg: ExperimentConfig, k: int, train: Optional[Dataset] = None) -> int:
    """Client process for TCP mode; returns the number of rounds served.

    The shard is re-derived from the common seed, so server and client agree
    on the partition without exchanging it.
    """
    cfg.validate()
    if not 0 <= k < cfg.clients:
        raise ConfigurationError(f"client index {k} outside [0, {cfg.clients})")
    if not cfg.connect:
        raise ConfigurationError("client needs a server address (connect)")
    if train is None:
        train, _ = load_datasets(cfg, with_test=False)
    work = prepare(cfg, train)
    chan = tcp_connect(*parse_address(cfg.connect), retry_for=cfg.timeout)
    try:
        return client_run(chan, k, work.client_batches[k], len(work.shards[k]), cfg.round_config(),
                          cfg.seed(), nn.mlp_objective(work.spec))
    finally:
        chan.close()


def es_train_local(w0: np.ndarray, client_batches: Sequence, weights: ClientWeights,
                   cfg: RoundConfig, common: CommonSeed, rounds: int, objective) -> np.ndarray:
    """FedES arithmetic with no transport at all, for equivalence checks."""
    w = w0.copy()
    for t in range(1, rounds + 1):
        rc = cfg.at(t)
        reports = [client_round(k, w, rc, common, b, objective) for k, b in enumerate(client_batches)]
        w = sgd_update(w, aggregate(reports, rc, weights, common, len(w)), rc)
    return w


# ---------------------------------------------------------------- FedGD

def client_gradient(grad_fn, w: np.ndarray, client_batches: Sequence) -> np.ndarray:
    """Full-shard gradient: sample-weighted mean of per-batch gradients."""
    total = np.zeros(len(w), dtype=np.float64)
    n = 0
    for batch in client_batches:
        total += len(batch) * grad_fn(w, batch).astype(np.float64)
        n += len(batch)
    return total / n


def run_fedgd_round(w: np.ndarray, clients: Sequence, cfg: RoundConfig,
                    weights: ClientWeights, grad_fn) -> np.ndarray:
    """One baseline round: every client uplinks its full gradient."""
    g = np.zeros(len(w), dtype=np.float64)
    for k, client_batches in enumerate(clients):
        g += weights.rho[k] * client_gradient(grad_fn, w, client_batches)
    return sgd_update(w, g.astype(np.float32), cfg)


def run_fedgd(cfg: ExperimentConfig, work: Workload, on_round: Optional[Callable] = None):
    w = work.w0.copy()

    def grad_fn(params, batch):
        return nn.backward(work.spec, params, batch)

    for t in range(1, cfg.rounds + 1):
        w = run_fedgd_round(w, work.client_batches, cfg.round_config(t), work.weights, grad_fn)
        if on_round is not None:
            on_round(t, w)
    return w


# ---------------------------------------------------------------- accounting

def uplink_scalars_per_client(cfg: ExperimentConfig, client_sizes: Sequence[int]) -> list[int]:
    """Scalars each client transmits per round under ``cfg``."""
    spec = cfg.spec()
    if cfg.algo == "fedgd":
        return [spec.param_count] * len(client_sizes)
    return [elite_count(batch_count(n, cfg.n_b), cfg.beta) for n in client_sizes]


# ---------------------------------------------------------------- driver

def run_experiment(cfg: ExperimentConfig, train: Optional[Dataset] = None,
                   test: Optional[Dataset] = None, out_dir=None, local_clients: bool = True,
                   on_listen: Optional[Callable] = None) -> ExperimentResult:
    """Train for ``cfg.rounds`` rounds and write ``metrics.csv`` and ``params.bin``.

    ``train``/``test`` may be given directly; otherwise they are loaded from
    the config's IDX paths.  ``out_dir=False`` disables file output.  With
    ``local_clients=False`` this process is only the TCP server.
    """
    cfg.validate()
    if train is None:
        train, test = load_datasets(cfg)
    work = prepare(cfg, train, test)
    out = None if out_dir is False else Path(out_dir or cfg.out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv" if out else None
    params_path = out / "params.bin" if out else None

    writer = MetricsWriter(csv_path)
    started = time.monotonic()
    record = _evaluator(cfg, work, writer, started, cfg.rounds)
    n_params = work.spec.param_count
    frames: list = []
    per_client = uplink_scalars_per_client(cfg, [len(s) for s in work.shards])
    try:
        if cfg.algo == "fedes":
            def on_round(state, stats):
                record(stats.t, state.w, max(stats.uplink.values(), default=0),
                       stats.downlink_scalars)

            w, state = run_fedes(cfg, work, on_round, local_clients, on_listen)
            for k in sorted(state.channels):
                frames.append(list(state.channels[k].received))
        else:
            w = run_fedgd(cfg, work, lambda t, w: record(t, w, n_params, n_params))
    finally:
        writer.close()
    if params_path is not None:
        write_params(params_path, w)
    return ExperimentResult(w, writer.rows, per_client, frames, csv_path, params_path)


# ---------------------------------------------------------------- quadratic study

@dataclass
class StudyResult:
    mean_loss: np.ndarray
    slope: float
    intercept: float
    fit_from: int


def quadratic_study(d: int = 10, schedule: str = "inverse_t", T: int = 1000,
                    repeats: int = 20, directions: int = 64, sigma: float = 0.05,
                    noise: float = 1.0, alpha: float = 0.01, start_at_optimum: bool = False,
                    fit_from: int = 10, common: Optional[CommonSeed] = None) -> StudyResult:
    """Antithetic ES on ``f(w; xi) = 0.5 * ||w - w* - xi||^2``.

    Each direction is paired with one sample ``xi ~ N(0, noise^2 I)``, so the
    global objective is ``0.5 * ||w - w*||^2`` plus a constant and
    ``L(w) - L(w*) = 0.5 * ||w - w*||^2``.  Returns the mean excess loss after
    each of the ``T`` updates, and the log-log slope fitted over
    ``t in [fit_from, T]``.
    """
    if d > 100:
        raise ConfigurationError("quadratic study is meant for d <= 100")
    common = common or CommonSeed(bytes(32))
    base = RoundConfig(sigma=sigma, alpha=alpha, schedule=schedule)
    losses = np.zeros((repeats, T))
    for r in range(repeats):
        # the problem is translation invariant; an optimum at the origin keeps
        # the fixed point exact in floating point
        w_star = np.zeros(d)
        w = w_star.copy() if start_at_optimum else standard_normals(derive_seed(common, 0, r, 1), 0, d)

        def f(points, xs, w_star=w_star):
            return 0.5 * ((points - w_star - xs) ** 2).sum(axis=1)

        for t in range(1, T + 1):
            eps = sigma * standard_normals(derive_seed(common, t, r, 0), 0, directions * d)
            eps = eps.reshape(directions, d)
            xs = noise * standard_normals(derive_seed(common, t, r, 1), 0, directions * d)
            xs = xs.reshape(directions, d)
            g = estimate_from_losses(antithetic_losses(f, w, eps, xs), eps, sigma)
            w = w - base.at(t).step_size() * g
            losses[r, t - 1] = 0.5 * float(((w - w_star) ** 2).sum())
    mean = losses.mean(axis=0)
    ts = np.arange(1, T + 1)
    sel = ts >= fit_from
    if np.all(mean[sel] > 0):
        slope, intercept = np.polyfit(np.log(ts[sel]), np.log(mean[sel]), 1)
    else:
        slope, intercept = math.nan, math.nan
    return StudyResult(mean, float(slope), float(intercept), fit_from)

"""Server side of the federation: broadcast, collect, aggregate, update."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..detrand import CommonSeed
from ..escore import (
    ClientWeights,
    LossReport,
    ProtocolError,
    RoundConfig,
    aggregate,
    batch_count,
    sgd_update,
)
from .codec import Hello, LossReportMsg, RoundStart, Shutdown
from .transport import Channel, TransportTimeout

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class Phase(enum.Enum):
    AWAITING_CLIENTS = "awaiting_clients"
    BROADCASTING = "broadcasting"
    COLLECTING = "collecting"
    UPDATING = "updating"
    DONE = "done"


@dataclass
class RoundStats:
    t: int
    uplink: dict = field(default_factory=dict)
    downlink_scalars: int = 0
    skipped: list = field(default_factory=list)

    @property
    def uplink_total(self) -> int:
        return sum(self.uplink.values())


@dataclass
class ServerState:
    w: np.ndarray
    cfg: RoundConfig
    weights: ClientWeights
    common: CommonSeed
    timeout: float = DEFAULT_TIMEOUT
    skip_stragglers: bool = False
    phase: Phase = Phase.AWAITING_CLIENTS
    t: int = 0
    pending: set = field(default_factory=set)
    channels: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    _lagging: set = field(default_factory=set)

    @property
    def clients(self) -> int:
        return len(self.weights.rho)


def handshake(state: ServerState, channels: Sequence[Channel]) -> None:
    """Read the mandatory Hello from every channel and index them by client id."""
    if state.phase is not Phase.AWAITING_CLIENTS:
        raise ProtocolError(f"handshake in phase {state.phase.value}")
    for chan in channels:
        msg = chan.recv(timeout=state.timeout)
        if not isinstance(msg, Hello):
            raise ProtocolError(f"first client frame must be Hello, got {type(msg).__name__}")
        k = msg.client
        if not 0 <= k < state.clients:
            raise ProtocolError(f"client id {k} outside [0, {state.clients})")
        if k in state.channels:
            raise ProtocolError(f"client id {k} connected twice")
        want = int(state.weights.batches[k])
        if batch_count(msg.n_k, state.cfg.n_b) != want:
            raise ProtocolError(f"client {k} holds {msg.n_k} samples; expected {want} batches")
        chan.max_entries = want
        state.channels[k] = chan
        state.sizes[k] = msg.n_k
    if len(state.channels) != state.clients:
        raise ProtocolError(f"{len(state.channels)} of {state.clients} clients connected")
    state.phase = Phase.BROADCASTING


def _collect(state: ServerState, stats: RoundStats) -> list[LossReport]:
    t = state.t
    state.pending = set(state.channels)
    reports = []
    deadline = time.monotonic() + state.timeout
    for k in sorted(state.channels):
        chan = state.channels[k]
        while True:
            try:
                msg = chan.recv(timeout=max(deadline - time.monotonic(), 1e-3))
            except TransportTimeout:
                if not state.skip_stragglers:
                    raise TransportTimeout(f"client {k} did not report round {t}") from None
                log.warning("client %d skipped in round %d", k, t)
                stats.skipped.append(k)
                state._lagging.add(k)
                break
            if not isinstance(msg, LossReportMsg):
                raise ProtocolError(f"client {k} sent {type(msg).__name__} while collecting")
            report = msg.report
            if report.client != k:
                raise ProtocolError(f"channel of client {k} carried a report from {report.client}")
            if report.round != t:
                if k in state._lagging and report.round < t:
                    log.info("dropping stale round-%d report from client %d", report.round, k)
                    continue
                raise ProtocolError(f"client {k} reported round {report.round} during round {t}")
            state._lagging.discard(k)
            reports.append(report)
            stats.uplink[k] = len(report.entries)
            state.pending.discard(k)
            break
    return reports


def server_round(state: ServerState) -> RoundStats:
    """Broadcast ``w``, gather one report per client, apply the ES update."""
    if state.phase is not Phase.BROADCASTING:
        raise ProtocolError(f"round started in phase {state.phase.value}")
    state.t += 1
    t = state.t
    stats = RoundStats(t)
    msg = RoundStart(t, state.w)
    for k in sorted(state.channels):
        state.channels[k].send(msg)
    stats.downlink_scalars = len(state.w)

    state.phase = Phase.COLLECTING
    reports = _collect(state, stats)

    state.phase = Phase.UPDATING
    cfg = state.cfg.at(t)
    weights = state.weights
    if stats.skipped:
        weights = weights.restricted(r.client for r in reports)
    g = aggregate(reports, cfg, weights, state.common, len(state.w))
    state.w = sgd_update(state.w, g, cfg)
    state.phase = Phase.BROADCASTING
    return stats


def server_run(state: ServerState, channels: Sequence[Channel], rounds: int,
               on_round: Optional[Callable[[ServerState, RoundStats], None]] = None) -> np.ndarray:
    """Run the whole federation: handshake, ``rounds`` rounds, Shutdown."""
    handshake(state, channels)
    try:
        for _ in range(rounds):
            stats = server_round(state)
            if on_round is not None:
                on_round(state, stats)
    finally:
        for chan in state.channels.values():
            try:
                chan.send(Shutdown(state.t))
            except OSError:
                pass
    state.phase = Phase.DONE
    return state.w

"""Client side: answer each RoundStart with a loss report."""
from __future__ import annotations

import logging
from typing import Sequence

from ..detrand import CommonSeed
from ..escore import ProtocolError, RoundConfig, client_round
from .codec import DecodeError, Hello, LossReportMsg, RoundStart, Shutdown
from .transport import Channel

log = logging.getLogger(__name__)


def client_run(channel: Channel, k: int, batches: Sequence, n_k: int, cfg: RoundConfig,
               common: CommonSeed, objective) -> int:
    """Serve rounds until Shutdown; returns the number of rounds answered.

    The common seed comes from local configuration and never touches the
    channel.  Only Hello and loss reports are ever sent.
    """
    channel.send(Hello(k, n_k))
    served = 0
    try:
        while True:
            msg = channel.recv()
            if isinstance(msg, Shutdown):
                log.info("client %d: shutdown after round %d", k, msg.final_t)
                return served
            if not isinstance(msg, RoundStart):
                raise ProtocolError(f"client {k} received unexpected {type(msg).__name__}")
            report = client_round(k, msg.params, cfg.at(msg.t), common, batches, objective)
            channel.send(LossReportMsg(report))
            served += 1
    except DecodeError as exc:
        log.error("client %d: malformed frame, disconnecting: %s", k, exc)
        channel.close()
        raise

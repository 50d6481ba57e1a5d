from .client import client_run
from .codec import (
    DecodeError,
    Hello,
    LossReportMsg,
    RoundStart,
    Shutdown,
    decode,
    decode_uplink,
    encode,
    report_payload_size,
)
from .server import Phase, RoundStats, ServerState, handshake, server_round, server_run
from .transport import (
    Channel,
    ChannelClosed,
    SocketChannel,
    TcpListener,
    TransportTimeout,
    channel_pair,
    parse_address,
    tcp_connect,
)

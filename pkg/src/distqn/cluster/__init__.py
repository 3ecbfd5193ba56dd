from .codec import (
    HEADER_SIZE,
    MASTER_ID,
    CodecError,
    Message,
    MsgType,
    decode_message,
    encode_message,
)
from .ledger import CommLedger, Transfer, ledger_summary
from .partition import average, partition_data
from .transport import (
    InMemoryTransport,
    TcpMasterTransport,
    Transport,
    WorkerFailure,
    serve_tcp_worker,
)

__all__ = [
    "HEADER_SIZE",
    "MASTER_ID",
    "CodecError",
    "CommLedger",
    "InMemoryTransport",
    "Message",
    "MsgType",
    "TcpMasterTransport",
    "Transfer",
    "Transport",
    "WorkerFailure",
    "average",
    "decode_message",
    "encode_message",
    "ledger_summary",
    "partition_data",
    "serve_tcp_worker",
]

"""Master/worker transports sharing one contract.

A transport connects a master to ``M`` worker handlers. The master calls
:meth:`Transport.broadcast` to send one message to every worker and
:meth:`Transport.gather` to collect exactly one reply per worker. Every frame
crosses the wire in the :mod:`.codec` format and is recorded in the ledger.

A worker handler is any object with a ``worker_id`` attribute and a
``handle(msg) -> Message | None`` method.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
from typing import Optional, Sequence

import numpy as np

from .codec import MASTER_ID, Message, MsgType, decode_message, encode_message
from .ledger import DOWN, UP, CommLedger

CMD_STOP = 0.0
CMD_START = 1.0
CMD_HELLO = 2.0

_LEN = struct.Struct("<I")


def control(cmd: float, stage: int = 0, worker_id: int = MASTER_ID) -> Message:
    return Message(MsgType.CONTROL, stage, worker_id, (np.array([cmd]),))


def control_command(msg: Message) -> Optional[float]:
    if msg.msg_type is not MsgType.CONTROL or not msg.payload:
        return None
    return float(msg.payload[0][0])


class WorkerFailure(RuntimeError):
    def __init__(self, worker_id: int, cause: BaseException):
        super().__init__(f"worker {worker_id} failed: {cause}")
        self.worker_id = worker_id
        self.cause = cause


def thread_cap() -> Optional[int]:
    raw = os.environ.get("DQN_THREADS")
    if not raw:
        return None
    cap = int(raw)
    if cap < 1:
        raise ValueError("DQN_THREADS must be a positive integer")
    return cap


class Transport:
    """Contract shared by the in-memory and TCP transports."""

    M: int
    ledger: CommLedger

    def begin_round(self, label: str = "") -> int:
        return self.ledger.begin_round(label)

    def broadcast(self, msg: Message) -> None:
        raise NotImplementedError

    def gather(self) -> list[Message]:
        raise NotImplementedError

    def worker_compute_seconds(self) -> list[float]:
        return [0.0] * self.M

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_gathered(self, replies: dict) -> list[Message]:
        missing = set(range(self.M)) - set(replies)
        if missing:
            raise RuntimeError(f"no reply from workers {sorted(missing)}")
        return [replies[w] for w in range(self.M)]


class InMemoryTransport(Transport):
    """Each worker handler runs in its own thread behind a pair of queues.

    Frames are encoded bytes, so the codec is exercised on every transfer.
    ``DQN_THREADS`` (or ``max_threads``) caps how many handlers compute at once.
    """

    def __init__(self, handlers: Sequence, max_threads: Optional[int] = None):
        self.handlers = list(handlers)
        self.M = len(self.handlers)
        ids = [h.worker_id for h in self.handlers]
        if ids != list(range(self.M)):
            raise ValueError(f"worker ids must be 0..M-1 in order, got {ids}")
        self.ledger = CommLedger()
        cap = max_threads if max_threads is not None else thread_cap()
        self._slots = threading.Semaphore(cap or self.M)
        self._inboxes = [queue.SimpleQueue() for _ in range(self.M)]
        self._outbox: queue.SimpleQueue = queue.SimpleQueue()
        self._cpu = [0.0] * self.M
        self._threads = [
            threading.Thread(target=self._serve, args=(m,), daemon=True, name=f"dqn-worker-{m}")
            for m in range(self.M)
        ]
        for t in self._threads:
            t.start()
        self._closed = False

    def _serve(self, m: int) -> None:
        handler, inbox = self.handlers[m], self._inboxes[m]
        while True:
            frame = inbox.get()
            if frame is None:
                return
            msg = decode_message(frame)
            if control_command(msg) == CMD_STOP:
                return
            with self._slots:
                t0 = time.thread_time()
                try:
                    reply = handler.handle(msg)
                except Exception as exc:  # surfaced to the master by gather()
                    reply = exc
                self._cpu[m] += time.thread_time() - t0
            if isinstance(reply, Exception):
                self._outbox.put((m, reply))
            elif reply is not None:
                self._outbox.put((m, encode_message(reply)))

    def broadcast(self, msg: Message) -> None:
        frame = encode_message(msg)
        for m in range(self.M):
            self._inboxes[m].put(frame)
            self.ledger.record(DOWN, msg.msg_type, m, msg.payload_floats)

    def gather(self) -> list[Message]:
        replies = {}
        for _ in range(self.M):
            m, item = self._outbox.get()
            if isinstance(item, Exception):
                raise WorkerFailure(m, item)
            msg = decode_message(item)
            if msg.worker_id != m or m in replies:
                raise RuntimeError(f"unexpected reply from worker {msg.worker_id}")
            replies[m] = msg
        # recorded in worker-id order so the ledger is reproducible run to run
        for m in sorted(replies):
            self.ledger.record(UP, replies[m].msg_type, m, replies[m].payload_floats)
        return self._check_gathered(replies)

    def worker_compute_seconds(self) -> list[float]:
        return list(self._cpu)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for box in self._inboxes:
            box.put(None)
        for t in self._threads:
            t.join(timeout=5)


# ---------------------------------------------------------------------------
# TCP


def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(_LEN.pack(len(frame)) + frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return _recv_exact(sock, length)


class TcpMasterTransport(Transport):
    """Master side of the TCP transport: listens and accepts ``M`` workers.

    Each worker opens one connection and introduces itself with a hello
    control frame carrying its worker id. Frames are length-prefixed (u32).
    """

    def __init__(self, M: int, host: str = "127.0.0.1", port: int = 0, timeout: float = 60.0,
                 listener: Optional[socket.socket] = None):
        self.M = M
        self.ledger = CommLedger()
        self._listener = listener or socket.create_server((host, port))
        self._listener.settimeout(timeout)
        self._timeout = timeout
        self._conns: dict[int, socket.socket] = {}
        self._closed = False

    @property
    def address(self) -> tuple:
        return self._listener.getsockname()[:2]

    def accept_workers(self) -> None:
        while len(self._conns) < self.M:
            conn, _ = self._listener.accept()
            conn.settimeout(self._timeout)
            hello = decode_message(recv_frame(conn))
            if control_command(hello) != CMD_HELLO:
                conn.close()
                raise RuntimeError("expected a hello frame from worker")
            wid = hello.worker_id
            if wid >= self.M or wid in self._conns:
                conn.close()
                raise RuntimeError(f"invalid or duplicate worker id {wid}")
            self._conns[wid] = conn

    def broadcast(self, msg: Message) -> None:
        frame = encode_message(msg)
        for m in range(self.M):
            send_frame(self._conns[m], frame)
            self.ledger.record(DOWN, msg.msg_type, m, msg.payload_floats)

    def gather(self) -> list[Message]:
        replies = {}
        for m in range(self.M):
            try:
                msg = decode_message(recv_frame(self._conns[m]))
            except (ConnectionError, OSError) as exc:
                raise WorkerFailure(m, exc) from None
            if msg.worker_id != m:
                raise RuntimeError(f"worker {m} replied as {msg.worker_id}")
            replies[m] = msg
            self.ledger.record(UP, msg.msg_type, m, msg.payload_floats)
        return self._check_gathered(replies)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        stop = encode_message(control(CMD_STOP))
        for conn in self._conns.values():
            try:
                send_frame(conn, stop)
            except OSError:
                pass
            conn.close()
        self._listener.close()


def serve_tcp_worker(handler, host: str, port: int, connect_timeout: float = 30.0) -> int:
    """Connect to a master and serve requests until told to stop.

    Returns the number of requests handled.
    """
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    handled = 0
    with sock:
        sock.settimeout(None)
        send_frame(sock, encode_message(control(CMD_HELLO, 0, handler.worker_id)))
        while True:
            try:
                msg = decode_message(recv_frame(sock))
            except ConnectionError:
                return handled
            if control_command(msg) == CMD_STOP:
                return handled
            reply = handler.handle(msg)
            handled += 1
            if reply is not None:
                send_frame(sock, encode_message(reply))

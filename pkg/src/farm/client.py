"""Farm client: register, then fetch -> compute -> submit until told to stop.

Heartbeats run on their own thread over the shared connection so that long
computations never cost the client its lease. The client exits on its own
when the server goes away; it never retries.
"""
from __future__ import annotations

import enum
import logging
import queue
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from farm import protocol as P
from farm.workloads import POISONED, compute_task

log = logging.getLogger("farm.client")


class ClientStatus(enum.Enum):
    DRAINED = 0
    SERVER_LOST = 3
    KILLED = 143

    @property
    def exit_code(self) -> int:
        return self.value


@dataclass
class ClientConfig:
    server_address: tuple[str, int]
    slots: int = 1
    heartbeat_interval_ms: int = 500
    max_missed_acks: int = 4
    chunk_request_size: int | None = None
    connect_timeout_s: float = 5.0

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("slots must be >= 1")
        if self.chunk_request_size is None:
            self.chunk_request_size = 2 * self.slots


def _run_one(compute, payload):
    try:
        return compute(payload)
    except Exception:
        log.warning("event=poisoned_task bytes=%d", len(payload), exc_info=True)
        return POISONED


def compute_chunk(tasks, slots: int, compute: Callable[[bytes], bytes] = compute_task) -> list[bytes]:
    """Run ``tasks`` with up to ``slots`` in parallel; results keep task order."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if slots == 1 or len(tasks) <= 1:
        return [_run_one(compute, t) for t in tasks]
    with ThreadPoolExecutor(max_workers=min(slots, len(tasks))) as pool:
        return list(pool.map(lambda t: _run_one(compute, t), tasks))


class _Session:
    def __init__(self, cfg: ClientConfig, sock: socket.socket):
        self.cfg = cfg
        self.sock = sock
        self.write_lock = threading.Lock()
        self.replies: queue.Queue = queue.Queue()
        self.done = threading.Event()
        self.status: ClientStatus | None = None
        self.acked_seq = 0
        self.sent_seq = 0
        self.client_id = 0
        self.submitted = 0

    def finish(self, status: ClientStatus) -> None:
        if self.status is None:
            self.status = status
        self.done.set()

    def send(self, msg) -> None:
        data = P.encode_message(msg)
        with self.write_lock:
            self.sock.sendall(data)

    def reader(self) -> None:
        frames = P.FrameReader()
        try:
            while not self.done.is_set():
                data = self.sock.recv(65536)
                if not data:
                    break
                for msg in frames.feed(data):
                    if isinstance(msg, P.HeartbeatAck):
                        self.acked_seq = max(self.acked_seq, msg.seq)
                    elif isinstance(msg, P.ShutdownNotice):
                        log.info("event=shutdown_notice client_id=%d reason=%s",
                                 self.client_id, msg.reason.name)
                        self.finish(ClientStatus.SERVER_LOST)
                        return
                    else:
                        self.replies.put(msg)
        except (OSError, P.ProtocolError):
            pass
        self.finish(ClientStatus.SERVER_LOST)

    def heartbeater(self) -> None:
        interval = self.cfg.heartbeat_interval_ms / 1000.0
        while not self.done.wait(interval):
            if self.sent_seq - self.acked_seq >= self.cfg.max_missed_acks:
                log.info("event=server_lost client_id=%d missed=%d", self.client_id,
                         self.sent_seq - self.acked_seq)
                self.finish(ClientStatus.SERVER_LOST)
                return
            self.sent_seq += 1
            try:
                self.send(P.Heartbeat(self.client_id, self.sent_seq))
            except OSError:
                self.finish(ClientStatus.SERVER_LOST)
                return

    def request(self, msg):
        self.send(msg)
        while True:
            try:
                return self.replies.get(timeout=0.05)
            except queue.Empty:
                if self.done.is_set():
                    raise _Stop from None

    def worker(self, compute) -> None:
        cfg = self.cfg
        idle = min(0.2, cfg.heartbeat_interval_ms / 1000.0)
        try:
            while not self.done.is_set():
                reply = self.request(P.ChunkRequest(self.client_id, cfg.chunk_request_size))
                if isinstance(reply, P.Drained):
                    self.finish(ClientStatus.DRAINED)
                    return
                if not isinstance(reply, P.TaskChunkMsg):
                    raise P.ProtocolError(f"unexpected reply {reply!r}")
                if not reply.tasks:
                    self.done.wait(idle)
                    continue
                results = compute_chunk(reply.tasks, cfg.slots, compute)
                if self.done.is_set():
                    return
                ack = self.request(P.ResultChunkMsg(reply.chunk_id, tuple(results)))
                if not isinstance(ack, P.ResultAck) or ack.chunk_id != reply.chunk_id:
                    raise P.ProtocolError(f"unexpected ack {ack!r}")
                self.submitted += len(results)
        except (_Stop, OSError, P.ProtocolError):
            self.finish(ClientStatus.SERVER_LOST)


class _Stop(Exception):
    pass


def run_client(cfg: ClientConfig, compute: Callable[[bytes], bytes] = compute_task,
               kill: threading.Event | None = None) -> ClientStatus:
    """Run the client loop until drained, server loss, or ``kill`` is set.

    Setting ``kill`` abandons any in-flight chunk without telling the server.
    """
    try:
        sock = socket.create_connection(cfg.server_address, timeout=cfg.connect_timeout_s)
    except OSError as exc:
        log.info("event=connect_failed server=%s:%d error=%s", *cfg.server_address, exc)
        return ClientStatus.SERVER_LOST
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    s = _Session(cfg, sock)
    try:
        s.send(P.ClientHello(cfg.slots))
        frames, pending = P.FrameReader(), []
        sock.settimeout(cfg.connect_timeout_s)
        hello = P.read_message(sock, frames, pending)
        sock.settimeout(None)
    except (OSError, P.ProtocolError):
        sock.close()
        return ClientStatus.SERVER_LOST
    if not isinstance(hello, P.HelloAck):
        sock.close()
        return ClientStatus.SERVER_LOST
    s.client_id = hello.client_id
    for msg in pending:
        s.replies.put(msg)
    log.info("event=attached client_id=%d slots=%d", s.client_id, cfg.slots)

    threads = [
        threading.Thread(target=s.reader, daemon=True),
        threading.Thread(target=s.heartbeater, daemon=True),
        threading.Thread(target=s.worker, args=(compute,), daemon=True),
    ]
    for t in threads:
        t.start()
    while not s.done.wait(0.05):
        if kill is not None and kill.is_set():
            s.finish(ClientStatus.KILLED)
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
    log.info("event=exit client_id=%d status=%s submitted=%d", s.client_id, s.status.name, s.submitted)
    return s.status

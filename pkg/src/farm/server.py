"""Task-farm server: leases, task ledger, and the TCP front end.

:class:`FarmServer` is the state machine. Every public method takes the
current time in milliseconds and mutates state under one lock, so the
operations are linearizable. :class:`ServerHost` puts it on a socket.
"""
from __future__ import annotations

import enum
import itertools
import logging
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from farm import protocol as P
from farm.workloads import Workload

log = logging.getLogger("farm.server")

NO_WORK_YET = P.TaskChunkMsg(0, ())
"""Reply meaning "nothing to hand out now, ask again"; chunk_id 0 is never dispensed."""


class LossPolicy(str, enum.Enum):
    RESCHEDULE = "reschedule"
    DROP = "drop"


class FarmError(Exception):
    pass


class UnknownClient(FarmError):
    pass


class LeaseExpired(UnknownClient):
    pass


class UnknownChunk(FarmError):
    pass


class Rejected(FarmError):
    """The server is shutting down and refuses the request."""


@dataclass
class ServerConfig:
    lease_ms: int = 5000
    chunk_max: int = 8
    loss_policy: LossPolicy = LossPolicy.RESCHEDULE
    heartbeat_sweep_ms: int = 250

    def __post_init__(self):
        self.loss_policy = LossPolicy(self.loss_policy)
        if self.chunk_max < 1:
            raise ValueError("chunk_max must be >= 1")
        if self.lease_ms <= 0:
            raise ValueError("lease_ms must be > 0")


@dataclass
class ClientLease:
    client_id: int
    deadline: int
    slots: int
    outstanding_chunks: set[int] = field(default_factory=set)


@dataclass
class TaskLedger:
    pending: deque = field(default_factory=deque)
    in_flight: dict[int, tuple[int, list[bytes]]] = field(default_factory=dict)
    completed: int = 0
    dropped: int = 0

    @property
    def in_flight_count(self) -> int:
        return sum(len(tasks) for _, tasks in self.in_flight.values())


class FarmServer:
    def __init__(self, config: ServerConfig, workload: Workload):
        self.config = config
        self.workload = workload
        self.ledger = TaskLedger(pending=deque(workload.initial_tasks()))
        self.leases: dict[int, ClientLease] = {}
        self._acked: dict[int, int] = {}  # chunk_id -> client_id
        self._client_ids = itertools.count(1)
        self._chunk_ids = itertools.count(1)
        self._lock = threading.RLock()
        self.stopping = False
        self.total_registered = 0

    # -- lifecycle -----------------------------------------------------

    def register_client(self, hello: P.ClientHello, now: int) -> P.HelloAck:
        with self._lock:
            if self.stopping:
                raise Rejected("server is stopping")
            cid = next(self._client_ids)
            self.leases[cid] = ClientLease(cid, now + self.config.lease_ms, hello.requested_slots)
            self.total_registered += 1
            log.info("event=register client_id=%d slots=%d t_ms=%d", cid, hello.requested_slots, now)
            return P.HelloAck(cid, self.config.lease_ms, self.config.chunk_max)

    def shutdown(self) -> None:
        with self._lock:
            if not self.stopping:
                self.stopping = True
                log.info("event=shutdown live_clients=%d completed=%d dropped=%d",
                         len(self.leases), self.ledger.completed, self.ledger.dropped)
                self.workload.close()

    def release_client(self, client_id: int, now: int) -> bool:
        """Drop a lease that holds no chunks (clean detach). Returns True if released."""
        with self._lock:
            lease = self.leases.get(client_id)
            if lease is None or lease.outstanding_chunks:
                return False
            del self.leases[client_id]
            log.info("event=detach client_id=%d t_ms=%d", client_id, now)
            return True

    # -- requests --------------------------------------------------------

    def _live_lease(self, client_id: int, now: int) -> ClientLease:
        lease = self.leases.get(client_id)
        if lease is None:
            raise UnknownClient(client_id)
        if lease.deadline <= now:
            self._expire(lease)
            raise LeaseExpired(client_id)
        return lease

    def fetch_chunk(self, client_id: int, max_tasks: int, now: int) -> P.TaskChunkMsg | P.Drained:
        with self._lock:
            if self.stopping:
                raise Rejected("server is stopping")
            lease = self._live_lease(client_id, now)
            led = self.ledger
            want = min(max_tasks, self.config.chunk_max)
            if len(led.pending) < want and not self.workload.exhausted():
                led.pending.extend(self.workload.next_tasks(want - len(led.pending)))
            n = min(want, len(led.pending))
            if n == 0:
                # In-flight tasks may still come back under Reschedule.
                may_return = led.in_flight and self.config.loss_policy is LossPolicy.RESCHEDULE
                if led.pending or not self.workload.exhausted() or may_return:
                    return NO_WORK_YET
                return P.Drained()
            tasks = [led.pending.popleft() for _ in range(n)]
            chunk_id = next(self._chunk_ids)
            led.in_flight[chunk_id] = (client_id, tasks)
            lease.outstanding_chunks.add(chunk_id)
            return P.TaskChunkMsg(chunk_id, tuple(tasks))

    def submit_results(self, client_id: int, chunk: P.ResultChunkMsg, now: int) -> P.ResultAck:
        with self._lock:
            if self._acked.get(chunk.chunk_id) == client_id:
                return P.ResultAck(chunk.chunk_id)
            owner = self.ledger.in_flight.get(chunk.chunk_id)
            if owner is None or owner[0] != client_id:
                raise UnknownChunk(chunk.chunk_id)
            lease = self._live_lease(client_id, now)
            _, tasks = self.ledger.in_flight.pop(chunk.chunk_id)
            lease.outstanding_chunks.discard(chunk.chunk_id)
            self._acked[chunk.chunk_id] = client_id
            results = list(chunk.results)
            if len(results) != len(tasks):
                # Missing positions count as poisoned; the tasks are still accounted once.
                results = (results + [b""] * len(tasks))[:len(tasks)]
            self.ledger.completed += len(tasks)
            self.workload.absorb(tasks, results)
            return P.ResultAck(chunk.chunk_id)

    def heartbeat(self, client_id: int, seq: int, now: int) -> P.HeartbeatAck:
        with self._lock:
            try:
                lease = self._live_lease(client_id, now)
            except LeaseExpired:
                raise UnknownClient(client_id) from None
            lease.deadline = now + self.config.lease_ms
            return P.HeartbeatAck(seq)

    # -- expiry ----------------------------------------------------------

    def _expire(self, lease: ClientLease) -> None:
        del self.leases[lease.client_id]
        lost = 0
        for chunk_id in sorted(lease.outstanding_chunks):
            _, tasks = self.ledger.in_flight.pop(chunk_id)
            lost += len(tasks)
            if self.config.loss_policy is LossPolicy.RESCHEDULE:
                self.ledger.pending.extend(tasks)
            else:
                self.ledger.dropped += len(tasks)
        log.info("event=expire client_id=%d lost_tasks=%d policy=%s",
                 lease.client_id, lost, self.config.loss_policy.value)

    def sweep_expired(self, now: int) -> list[int]:
        with self._lock:
            expired = [lease for lease in self.leases.values() if lease.deadline <= now]
            for lease in expired:
                self._expire(lease)
            return [lease.client_id for lease in expired]

    # -- inspection ------------------------------------------------------

    @property
    def drain_complete(self) -> bool:
        led = self.ledger
        return not led.pending and not led.in_flight and self.workload.exhausted()

    def snapshot(self) -> dict:
        with self._lock:
            led = self.ledger
            return {
                "pending": len(led.pending),
                "in_flight": led.in_flight_count,
                "completed": led.completed,
                "dropped": led.dropped,
                "live_clients": len(self.leases),
                "registered": self.total_registered,
            }


def _now_ms() -> int:
    return int(time.monotonic() * 1000)


class _Connection(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def setup(self):
        self.write_lock = threading.Lock()
        self.client_id: int | None = None
        self.server.host._attach(self)

    def send(self, msg: P.Message) -> bool:
        data = P.encode_message(msg)
        try:
            with self.write_lock:
                self.request.sendall(data)
            return True
        except OSError:
            return False

    def handle(self):
        core = self.server.host.core
        reader = P.FrameReader()
        sock = self.request
        while True:
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            try:
                messages = reader.feed(data)
            except P.ProtocolError as exc:
                log.warning("event=protocol_error client_id=%s error=%r", self.client_id, exc)
                break
            for msg in messages:
                reply = self._dispatch(core, msg)
                if reply is not None and not self.send(reply):
                    return
                if isinstance(reply, P.ShutdownNotice):
                    return

    def _dispatch(self, core: FarmServer, msg: P.Message) -> P.Message | None:
        now = _now_ms()
        try:
            if isinstance(msg, P.Heartbeat):
                return core.heartbeat(msg.client_id, msg.seq, now)
            if isinstance(msg, P.ChunkRequest):
                return core.fetch_chunk(msg.client_id, msg.max_tasks, now)
            if isinstance(msg, P.ResultChunkMsg):
                if self.client_id is None:
                    raise UnknownClient(None)
                return core.submit_results(self.client_id, msg, now)
            if isinstance(msg, P.ClientHello):
                ack = core.register_client(msg, now)
                self.client_id = ack.client_id
                return ack
        except UnknownChunk as exc:
            log.info("event=discard_late_chunk client_id=%s chunk_id=%s", self.client_id, exc.args[0])
            return P.ResultAck(msg.chunk_id)
        except (UnknownClient, Rejected):
            return P.ShutdownNotice(P.ShutdownReason.REJECTED)
        log.warning("event=unexpected_message client_id=%s type=%s", self.client_id, type(msg).__name__)
        return None

    def finish(self):
        self.server.host._detach(self)
        if self.client_id is not None:
            self.server.host.core.release_client(self.client_id, _now_ms())


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    host: "ServerHost"


class ServerHost:
    """Serves a :class:`FarmServer` over TCP and runs the lease sweeper."""

    def __init__(self, core: FarmServer, address: tuple[str, int] = ("127.0.0.1", 0),
                 drain_grace_ms: int | None = None):
        self.core = core
        self._tcp = _TCPServer(address, _Connection)
        self._tcp.host = self
        self._conns: set[_Connection] = set()
        self._conns_lock = threading.Lock()
        self._stopped = threading.Event()
        self._threads: list[threading.Thread] = []
        self.drain_grace_ms = core.config.lease_ms if drain_grace_ms is None else drain_grace_ms

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def _attach(self, conn):
        with self._conns_lock:
            self._conns.add(conn)

    def _detach(self, conn):
        with self._conns_lock:
            self._conns.discard(conn)

    def start(self) -> "ServerHost":
        host, port = self.address
        log.info("event=listen host=%s port=%d lease_ms=%d chunk_max=%d policy=%s workload=%s",
                 host, port, self.core.config.lease_ms, self.core.config.chunk_max,
                 self.core.config.loss_policy.value, self.core.workload.name)
        for target in (self._tcp.serve_forever, self._sweep_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _sweep_loop(self):
        period = self.core.config.heartbeat_sweep_ms / 1000.0
        drained_at = None
        while not self._stopped.wait(period):
            now = _now_ms()
            self.core.sweep_expired(now)
            if self.core.drain_complete:
                if drained_at is None:
                    drained_at = now
                    log.info("event=drain %s", " ".join(f"{k}={v}" for k, v in self.core.snapshot().items()))
                if not self.core.leases or now - drained_at >= self.drain_grace_ms:
                    self.stop()
                    return

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self.core.shutdown()
        self._stopped.set()
        notice = P.ShutdownNotice(P.ShutdownReason.SERVER_STOPPING)
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.send(notice)
            try:
                conn.request.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._threads:
            self._tcp.shutdown()
        self._tcp.server_close()

    def wait(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

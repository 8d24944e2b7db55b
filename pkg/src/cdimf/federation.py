"""Aggregator/worker federation over a length-prefixed binary protocol.

Frame (little-endian): b"CDFW", u16 version, u8 msg_type, u8 reserved,
u64 body_len, body. Only X_i + U_i shares, Z and round metadata cross the
wire; the aggregator never sees interactions or item factors.
"""

from __future__ import annotations

import hashlib
import logging
import os
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .consensus import ConsensusConfig, DomainNode, aggregate
from .dataio import DomainDataset
from .solver import FactorModel, SolverConfig

logger = logging.getLogger(__name__)

MAGIC = b"CDFW"
VERSION = 1
HELLO, SHARE, GLOBAL, BYE, ERROR = 1, 2, 3, 4, 5
ENV_ADDRESS = "CDIMF_AGGREGATOR"

_FRAME = struct.Struct("<4sHBBQ")
_HELLO = struct.Struct("<IQQ32s")
_SHARE = struct.Struct("<QIQQ32s")
_GLOBAL = struct.Struct("<QQQ")
_BYE = struct.Struct("<Q")
_MAX_BODY = 1 << 40


class ProtocolError(Exception):
    pass


class FederationError(Exception):
    """Session aborted (peer lost, timeout, or rejected)."""


@dataclass
class ShareMessage:
    round: int
    domain_id: int
    payload: np.ndarray
    alignment_digest: bytes

    @property
    def row_count(self) -> int:
        return self.payload.shape[0]

    @property
    def dim(self) -> int:
        return self.payload.shape[1]


@dataclass
class GlobalMessage:
    round: int
    payload: np.ndarray


@dataclass
class Hello:
    domain_id: int
    n_shared: int
    dim: int
    alignment_digest: bytes


def alignment_digest(user_ids: Sequence[str]) -> bytes:
    return hashlib.sha256("\n".join(sorted(user_ids)).encode("utf-8")).digest()


def frame(msg_type: int, body: bytes) -> bytes:
    if len(body) > _MAX_BODY:
        raise ProtocolError(f"frame body of {len(body)} bytes exceeds limit")
    return _FRAME.pack(MAGIC, VERSION, msg_type, 0, len(body)) + body


def split_frame(data: bytes) -> tuple[int, bytes]:
    """Parse one complete frame; returns (msg_type, body)."""
    if len(data) < _FRAME.size:
        raise ProtocolError(f"truncated frame header ({len(data)} bytes)")
    magic, version, msg_type, _, body_len = _FRAME.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ProtocolError(f"bad frame magic/version {magic!r}/{version}")
    if len(data) != _FRAME.size + body_len:
        raise ProtocolError(f"frame length {len(data)} != header + {body_len}")
    return msg_type, data[_FRAME.size:]


def _matrix_bytes(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def _matrix_from(body: bytes, offset: int, rows: int, dim: int) -> np.ndarray:
    if len(body) - offset != 8 * rows * dim:
        raise ProtocolError(f"payload is {len(body) - offset} bytes, expected {rows}x{dim} doubles")
    return np.frombuffer(body, dtype="<f8", offset=offset).reshape(rows, dim).astype(np.float64)


def encode_share(msg: ShareMessage) -> bytes:
    if len(msg.alignment_digest) != 32:
        raise ProtocolError("alignment digest must be 32 bytes")
    head = _SHARE.pack(msg.round, msg.domain_id, msg.row_count, msg.dim, msg.alignment_digest)
    return frame(SHARE, head + _matrix_bytes(msg.payload))


def decode_share(data: bytes) -> ShareMessage:
    msg_type, body = split_frame(data)
    if msg_type != SHARE:
        raise ProtocolError(f"expected SHARE, got type {msg_type}")
    return _share_body(body)


def _share_body(body: bytes) -> ShareMessage:
    if len(body) < _SHARE.size:
        raise ProtocolError("truncated SHARE body")
    rnd, domain_id, rows, dim, digest = _SHARE.unpack_from(body)
    return ShareMessage(rnd, domain_id, _matrix_from(body, _SHARE.size, rows, dim), digest)


def encode_global(msg: GlobalMessage) -> bytes:
    rows, dim = msg.payload.shape
    return frame(GLOBAL, _GLOBAL.pack(msg.round, rows, dim) + _matrix_bytes(msg.payload))


def _global_body(body: bytes) -> GlobalMessage:
    if len(body) < _GLOBAL.size:
        raise ProtocolError("truncated GLOBAL body")
    rnd, rows, dim = _GLOBAL.unpack_from(body)
    return GlobalMessage(rnd, _matrix_from(body, _GLOBAL.size, rows, dim))


def encode_hello(msg: Hello) -> bytes:
    return frame(HELLO, _HELLO.pack(msg.domain_id, msg.n_shared, msg.dim, msg.alignment_digest))


def _hello_body(body: bytes) -> Hello:
    if len(body) != _HELLO.size:
        raise ProtocolError("bad HELLO body")
    return Hello(*_HELLO.unpack(body))


def encode_error(message: str) -> bytes:
    return frame(ERROR, message.encode("utf-8"))


def parse_address(address: str | None) -> tuple[str, int]:
    address = address or os.environ.get(ENV_ADDRESS)
    if not address:
        raise ValueError(f"no aggregator address (flag or ${ENV_ADDRESS})")
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class Connection:
    """Frame-level wrapper over a stream socket, optionally recording traffic."""

    def __init__(self, sock: socket.socket, capture: list | None = None):
        self.sock = sock
        self.capture = capture

    def _recv_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise FederationError("timed out waiting for peer") from None
            except OSError as e:
                raise FederationError(f"connection lost: {e}") from None
            if not chunk:
                raise FederationError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self) -> tuple[int, bytes]:
        head = self._recv_exact(_FRAME.size)
        magic, version, msg_type, _, body_len = _FRAME.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise ProtocolError(f"bad frame magic/version {magic!r}/{version}")
        if body_len > _MAX_BODY:
            raise ProtocolError("frame too large")
        body = self._recv_exact(body_len)
        if self.capture is not None:
            self.capture.append(head + body)
        if msg_type == ERROR:
            raise FederationError(f"peer error: {body.decode('utf-8', 'replace')}")
        return msg_type, body

    def send(self, data: bytes) -> None:
        if self.capture is not None:
            self.capture.append(data)
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise FederationError(f"connection lost: {e}") from None

    def expect(self, msg_type: int) -> bytes:
        got, body = self.recv()
        if got != msg_type:
            raise ProtocolError(f"expected message type {msg_type}, got {got}")
        return body

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class SessionResult:
    rounds: int
    z: np.ndarray | None
    digest: bytes


class Aggregator:
    """Hub of the star topology: registers N workers, then per round collects
    N shares with the same round index, aggregates and broadcasts Z."""

    def __init__(self, address: str | tuple[str, int], config: ConsensusConfig,
                 timeout: float = 120.0, capture: list | None = None):
        host, port = address if isinstance(address, tuple) else parse_address(address)
        self.config = config
        self.timeout = timeout
        self.capture = capture
        self.server = socket.create_server((host, port))
        self.server.settimeout(timeout)
        self.address = self.server.getsockname()[:2]
        self.conns: dict[int, Connection] = {}

    def _abort(self, message: str) -> None:
        for conn in self.conns.values():
            try:
                conn.send(encode_error(message))
            except FederationError:
                pass

    def _register(self) -> Hello:
        hellos: dict[int, Hello] = {}
        while len(hellos) < self.config.n_domains:
            try:
                sock, _ = self.server.accept()
            except socket.timeout:
                raise FederationError(f"only {len(hellos)} of {self.config.n_domains} "
                                      "workers registered before timeout") from None
            sock.settimeout(self.timeout)
            conn = Connection(sock, self.capture)
            hello = _hello_body(conn.expect(HELLO))
            if hello.domain_id in hellos:
                conn.send(encode_error(f"duplicate domain_id {hello.domain_id}"))
                conn.close()
                raise ProtocolError(f"duplicate domain_id {hello.domain_id}")
            self.conns[hello.domain_id] = conn
            hellos[hello.domain_id] = hello
        first = next(iter(hellos.values()))
        for h in hellos.values():
            if (h.alignment_digest, h.n_shared, h.dim) != \
                    (first.alignment_digest, first.n_shared, first.dim):
                self._abort("alignment digest mismatch")
                raise ProtocolError(f"domain {h.domain_id}: alignment digest mismatch")
        for domain_id, conn in self.conns.items():
            conn.send(encode_hello(Hello(domain_id, first.n_shared, first.dim,
                                         first.alignment_digest)))
        return first

    def _collect(self, rnd: int, hello: Hello, pool: ThreadPoolExecutor) -> list[np.ndarray]:
        ids = sorted(self.conns)
        bodies = list(pool.map(lambda i: self.conns[i].expect(SHARE), ids))
        shares = []
        for domain_id, body in zip(ids, bodies):
            msg = _share_body(body)
            if msg.round != rnd:
                raise ProtocolError(f"domain {domain_id} sent round {msg.round}, "
                                    f"aggregator is at round {rnd}")
            if msg.domain_id != domain_id or msg.alignment_digest != hello.alignment_digest:
                raise ProtocolError(f"domain {domain_id}: share does not match registration")
            if msg.payload.shape != (hello.n_shared, hello.dim):
                raise ProtocolError(f"domain {domain_id}: share shape {msg.payload.shape}")
            shares.append(msg.payload)
        return shares

    def serve(self) -> SessionResult:
        z, rnd = None, 0
        try:
            hello = self._register()
            n_rounds = self.config.outer_rounds if self.config.rho > 0 else 0
            with ThreadPoolExecutor(max(1, len(self.conns))) as pool:
                for rnd in range(1, n_rounds + 1):
                    z = aggregate(self._collect(rnd, hello, pool), self.config)
                    out = encode_global(GlobalMessage(rnd, z))
                    for conn in self.conns.values():
                        conn.send(out)
                for conn in self.conns.values():
                    conn.expect(BYE)
            return SessionResult(n_rounds, z, hello.alignment_digest)
        except ProtocolError as e:
            self._abort(str(e))
            raise
        finally:
            for conn in self.conns.values():
                conn.close()
            self.server.close()


def run_aggregator(listen_address: str | tuple[str, int], config: ConsensusConfig,
                   timeout: float = 120.0) -> SessionResult:
    return Aggregator(listen_address, config, timeout).serve()


def save_checkpoint(path: str | Path, node: DomainNode, rnd: int, digest: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, users=node.model.users, items=node.model.items, dual=node.dual, z=node.z,
             round=rnd, digest=np.frombuffer(digest, dtype=np.uint8))
    return path


def load_checkpoint(path: str | Path) -> dict:
    with np.load(path) as f:
        return {k: f[k] for k in f.files}


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    # the aggregator may still be starting; retry until the timeout
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            if time.monotonic() >= deadline:
                raise FederationError(f"cannot reach aggregator at {host}:{port}: {e}") from None
            time.sleep(0.2)


def run_worker(aggregator_address: str | tuple[str, int] | None, dataset: DomainDataset,
               solver_config: SolverConfig, consensus_config: ConsensusConfig, seed: int,
               domain_id: int = 0, timeout: float = 120.0, checkpoint: str | Path | None = None,
               workers: int = 1) -> FactorModel:
    """One domain's training loop, exchanging shares through the aggregator.

    Initializes from ``seed + domain_id`` so a session reproduces
    in-process ``consensus.train(..., seed)`` exactly.
    """
    host, port = aggregator_address if isinstance(aggregator_address, tuple) \
        else parse_address(aggregator_address)
    node = DomainNode(dataset, solver_config, consensus_config, seed + domain_id, workers)
    digest = alignment_digest(node.alignment)
    cfg = consensus_config
    sock = _connect(host, port, timeout)
    conn = Connection(sock)
    rnd = 0
    try:
        conn.send(encode_hello(Hello(domain_id, len(node.alignment), solver_config.d, digest)))
        ack = _hello_body(conn.expect(HELLO))
        if ack.alignment_digest != digest:
            raise ProtocolError("aggregator reported a different alignment digest")
        if cfg.rho == 0:
            for _ in range(cfg.epochs):
                node.update_users()
                node.update_items()
        else:
            for rnd in range(1, cfg.outer_rounds + 1):
                for _ in range(cfg.aggregation_period):
                    node.update_users()
                    node.update_items()
                conn.send(encode_share(ShareMessage(rnd, domain_id, node.share(), digest)))
                msg = _global_body(conn.expect(GLOBAL))
                if msg.round != rnd:
                    raise ProtocolError(f"received Z for round {msg.round} at round {rnd}")
                node.apply_global(msg.payload)
        conn.send(frame(BYE, _BYE.pack(rnd)))
    except (FederationError, ProtocolError):
        if checkpoint is not None:
            saved = save_checkpoint(checkpoint, node, rnd, digest)
            logger.error("session aborted at round %d; state saved to %s", rnd, saved)
        raise
    finally:
        conn.close()
    return node.model

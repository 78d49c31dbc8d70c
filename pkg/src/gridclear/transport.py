"""Round-synchronous message passing between trading agents.

Each market round has two sub-phases: every node announces its selling
price, then every node places its purchase bids (bids can only be computed
once all prices are known). A transport carries the frames; the loopback
keeps all agents in one process, the TCP transport gives every node its
own process and socket endpoint.

Wire format, little-endian, 21 bytes per frame:

    len:u32 | round:u32 | sender:u16 | receiver:u16 | kind:u8 | value:f64

where len = 17 counts the bytes after the length field.
"""

from __future__ import annotations

import math
import selectors
import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "MessageKind",
    "Message",
    "TransportError",
    "ProtocolError",
    "encode",
    "decode",
    "exchange_round",
    "LoopbackTransport",
    "TcpTransport",
    "FRAME_SIZE",
    "DEFAULT_TIMEOUT",
]

_FRAME = struct.Struct("<IIHHBd")
FRAME_SIZE = _FRAME.size            # 21 bytes on the wire
_PAYLOAD = FRAME_SIZE - 4           # length-field value: 17
DEFAULT_TIMEOUT = 10.0              # seconds


class MessageKind(IntEnum):
    PRICE = 1   # value = sender's selling price, $/MWh
    BID = 2     # value = MWh the sender wants to buy from the receiver


class TransportError(RuntimeError):
    """Lost peer, timeout, or an endpoint misused."""


class ProtocolError(TransportError):
    """A peer violated the round protocol or sent a malformed frame."""


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    kind: MessageKind
    value: float


def encode(m: Message) -> bytes:
    """Serialize a message to its 21-byte frame.

    Raises ValueError on out-of-range fields, non-finite values, or a
    negative bid; bad messages must not reach the wire.
    """
    if m.kind not in (MessageKind.PRICE, MessageKind.BID):
        raise ValueError(f"invalid message kind {m.kind!r}")
    if not 0 <= m.round < 2**32:
        raise ValueError(f"round {m.round} out of u32 range")
    for label, node in (("sender", m.sender), ("receiver", m.receiver)):
        if not 0 <= node < 2**16:
            raise ValueError(f"{label} id {node} out of u16 range")
    if not math.isfinite(m.value):
        raise ValueError(f"non-finite message value {m.value}")
    if m.kind == MessageKind.BID and m.value < 0.0:
        raise ValueError(f"negative bid {m.value}")
    return _FRAME.pack(_PAYLOAD, m.round, m.sender, m.receiver,
                       int(m.kind), m.value)


def decode(frame: bytes) -> Message:
    """Parse one frame; raises ProtocolError on anything malformed."""
    if len(frame) != FRAME_SIZE:
        raise ProtocolError(f"frame is {len(frame)} bytes, expected {FRAME_SIZE}")
    length, round_no, sender, receiver, kind, value = _FRAME.unpack(frame)
    if length != _PAYLOAD:
        raise ProtocolError(f"length field {length}, expected {_PAYLOAD}")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    if not math.isfinite(value):
        raise ProtocolError(f"non-finite value in {kind.name} frame")
    if kind == MessageKind.BID and value < 0.0:
        raise ProtocolError(f"negative bid {value} from node {sender}")
    return Message(round_no, sender, receiver, kind, value)


def exchange_round(transport, node: int, round_no: int, kind: MessageKind,
                   outbox, senders) -> dict:
    """One sub-phase of a round: post this node's messages, then block
    until one `kind` message of this round has arrived from every node in
    `senders`. Returns {sender id: Message}.
    """
    for m in outbox:
        if m.round != round_no:
            raise ProtocolError(
                f"outbox message carries round {m.round}, current round is {round_no}")
        if m.sender != node:
            raise ProtocolError(
                f"node {node} tried to send a message from {m.sender}")
    transport.post(outbox)
    return transport.collect(node, round_no, kind, senders)


# ---------------------------------------------------------------------------
# in-process transport
# ---------------------------------------------------------------------------

class LoopbackTransport:
    """Mailbox shared by all agents in one process.

    Every message still goes through encode/decode, so the loopback
    exercises the same wire format as the socket transport.
    """

    def __init__(self, m: int):
        if m < 1:
            raise ValueError(f"need at least one node, got {m}")
        self.m = m
        self._mailboxes = [[] for _ in range(m)]

    def post(self, messages) -> None:
        for msg in messages:
            if not 0 <= msg.receiver < self.m:
                raise TransportError(f"no such node {msg.receiver}")
            self._mailboxes[msg.receiver].append(decode(encode(msg)))

    def collect(self, node: int, round_no: int, kind: MessageKind,
                senders) -> dict:
        expected = set(senders)
        got = {}
        keep = []
        for msg in self._mailboxes[node]:
            if msg.round < round_no:
                raise ProtocolError(
                    f"stale round-{msg.round} message at node {node} in round {round_no}")
            if msg.round == round_no and msg.kind == kind:
                if msg.sender not in expected:
                    raise ProtocolError(
                        f"unexpected {kind.name} from node {msg.sender} to {node}")
                if msg.sender in got:
                    raise ProtocolError(
                        f"duplicate {kind.name} from node {msg.sender} to {node}")
                got[msg.sender] = msg
            else:
                keep.append(msg)   # a later phase or round; leave queued
        self._mailboxes[node] = keep
        if set(got) != expected:
            missing = sorted(expected - set(got))
            raise TransportError(
                f"node {node} round {round_no}: no {kind.name} from {missing}")
        return got


# ---------------------------------------------------------------------------
# socket transport
# ---------------------------------------------------------------------------

class TcpTransport:
    """One endpoint of the TCP mesh; each node runs in its own process.

    For every neighbor pair the higher id dials the lower id, which is
    listening; the dialer identifies itself with a 2-byte id preamble.
    Frames for rounds or phases ahead of the current collect are buffered,
    frames for past rounds are a protocol error.
    """

    def __init__(self, node: int, addresses: dict, neighbors,
                 timeout: float = DEFAULT_TIMEOUT):
        self.node = node
        self.timeout = timeout
        self._addresses = dict(addresses)
        self._neighbors = sorted(set(neighbors))
        if node in self._neighbors:
            raise ValueError(f"node {node} cannot neighbor itself")
        for peer in self._neighbors:
            if peer not in self._addresses:
                raise ValueError(f"no address configured for node {peer}")
        if node not in self._addresses:
            raise ValueError(f"no address configured for node {node}")
        self._conns = {}
        self._buffers = {}
        self._pending = []
        self._eof = set()
        self._listener = None

    # -- connection setup ---------------------------------------------------

    def connect(self) -> None:
        """Establish the mesh: accept higher-id peers, dial lower-id peers."""
        deadline = time.monotonic() + self.timeout
        above = [p for p in self._neighbors if p > self.node]
        below = [p for p in self._neighbors if p < self.node]
        if above:
            host, port = self._addresses[self.node]
            self._listener = socket.create_server((host, port), backlog=len(above))
            self._listener.settimeout(self.timeout)
        try:
            for peer in below:
                self._conns[peer] = self._dial(peer, deadline)
            for _ in above:
                self._accept_one(deadline)
        except OSError as e:
            self.close()
            raise TransportError(f"node {self.node} mesh setup failed: {e}") from e
        finally:
            if self._listener is not None:
                self._listener.close()
                self._listener = None
        for peer in self._conns:
            self._buffers[peer] = bytearray()

    def _dial(self, peer: int, deadline: float):
        host, port = self._addresses[peer]
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportError(
                    f"node {self.node}: timeout dialing node {peer} at {host}:{port}")
            try:
                s = socket.create_connection((host, port), timeout=remaining)
                break
            except ConnectionRefusedError:
                time.sleep(0.05)   # peer not listening yet
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(struct.pack("<H", self.node))
        return s

    def _accept_one(self, deadline: float) -> None:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TransportError(f"node {self.node}: timeout waiting for peers")
        self._listener.settimeout(remaining)
        try:
            conn, _ = self._listener.accept()
        except socket.timeout:
            raise TransportError(
                f"node {self.node}: timeout waiting for peers") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        preamble = self._recv_exact(conn, 2, deadline)
        (peer,) = struct.unpack("<H", preamble)
        if peer not in self._neighbors or peer <= self.node or peer in self._conns:
            conn.close()
            raise ProtocolError(f"node {self.node}: unexpected peer id {peer}")
        self._conns[peer] = conn

    @staticmethod
    def _recv_exact(conn, n: int, deadline: float) -> bytes:
        buf = b""
        while len(buf) < n:
            conn.settimeout(max(0.001, deadline - time.monotonic()))
            chunk = conn.recv(n - len(buf))
            if not chunk:
                raise TransportError("peer closed connection during handshake")
            buf += chunk
        return buf

    # -- message plane ------------------------------------------------------

    def post(self, messages) -> None:
        for msg in messages:
            conn = self._conns.get(msg.receiver)
            if conn is None:
                raise TransportError(
                    f"node {self.node} has no connection to node {msg.receiver}")
            try:
                conn.sendall(encode(msg))
            except OSError as e:
                raise TransportError(
                    f"node {self.node} lost node {msg.receiver}: {e}") from e

    def collect(self, node: int, round_no: int, kind: MessageKind,
                senders) -> dict:
        if node != self.node:
            raise TransportError(
                f"endpoint of node {self.node} asked to collect for node {node}")
        expected = set(senders)
        got = {}

        def take(msg) -> bool:
            if msg.round < round_no:
                raise ProtocolError(
                    f"stale round-{msg.round} message in round {round_no}")
            if msg.round == round_no and msg.kind == kind:
                if msg.sender not in expected:
                    raise ProtocolError(
                        f"unexpected {kind.name} from node {msg.sender}")
                if msg.sender in got:
                    raise ProtocolError(
                        f"duplicate {kind.name} from node {msg.sender}")
                got[msg.sender] = msg
                return True
            return False

        still_pending = [m for m in self._pending if not take(m)]
        self._pending = still_pending
        if set(got) == expected:
            return got
        for peer in sorted(expected - set(got)):
            if peer in self._eof:
                raise TransportError(
                    f"node {self.node}: node {peer} closed the connection")

        deadline = time.monotonic() + self.timeout
        with selectors.DefaultSelector() as sel:
            for peer, conn in self._conns.items():
                if peer not in self._eof:
                    sel.register(conn, selectors.EVENT_READ, peer)
            while set(got) != expected:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(expected - set(got))
                    raise TransportError(
                        f"node {self.node} round {round_no}: timeout, "
                        f"no {kind.name} from {missing}")
                for key, _ in sel.select(remaining):
                    peer = key.data
                    try:
                        chunk = key.fileobj.recv(65536)
                    except OSError as e:
                        raise TransportError(
                            f"node {self.node} lost node {peer}: {e}") from e
                    if not chunk:
                        # A peer that finished its rounds closes while slower
                        # nodes are still draining; that is only an error if
                        # this collect still needs a frame from it.
                        sel.unregister(key.fileobj)
                        self._eof.add(peer)
                        if self._buffers[peer]:
                            raise ProtocolError(
                                f"node {self.node}: node {peer} closed mid-frame")
                        if peer in expected and peer not in got:
                            raise TransportError(
                                f"node {self.node}: node {peer} closed the connection")
                        continue
                    buf = self._buffers[peer]
                    buf.extend(chunk)
                    while len(buf) >= FRAME_SIZE:
                        frame = bytes(buf[:FRAME_SIZE])
                        del buf[:FRAME_SIZE]
                        msg = decode(frame)
                        if msg.receiver != self.node:
                            raise ProtocolError(
                                f"frame addressed to {msg.receiver} arrived at {self.node}")
                        if not take(msg):
                            self._pending.append(msg)
        return got

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._conns.clear()
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

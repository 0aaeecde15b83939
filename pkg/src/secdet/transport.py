"""Two-party runtimes: message framing, channels, transcripts, accounting.

A protocol program is a plain function ``fn(ctx, inputs) -> outputs`` that
both parties execute symmetrically; ``run_two_party`` hosts the two
executions on coordinated threads joined by an in-process queue pair or a
localhost TCP socket.  Every flight of messages carries a fixed 16-byte
header (session, protocol, round, sender) behind a 4-byte length prefix,
over either transport, so transcripts are byte-identical across them.

Round convention: one strictly-alternating flight of messages counts as one
round; a simultaneous exchange (both parties send before reading) also
counts as one.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, RoundOrderError, TransportError

_HEADER = struct.Struct("<IIII")  # session, protocol index, round, sender
_PAYLOAD_HEAD = struct.Struct("<BI")  # dtype tag, element count
_DT_U64, _DT_F64, _DT_RAW = 0, 1, 2

RECV_TIMEOUT = 120.0


@dataclass
class Message:
    session: int
    protocol: int
    round_index: int
    sender: int
    payload: bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.session, self.protocol, self.round_index, self.sender)
        return head + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Message":
        if len(raw) < _HEADER.size:
            raise TransportError("short frame")
        s, p, r, snd = _HEADER.unpack_from(raw, 0)
        return cls(s, p, r, snd, raw[_HEADER.size :])


def _pack_array(arr) -> bytes:
    if isinstance(arr, bytes):
        return _PAYLOAD_HEAD.pack(_DT_RAW, len(arr)) + arr
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint64:
        tag = _DT_U64
    elif arr.dtype == np.float64:
        tag = _DT_F64
    else:
        raise TransportError(f"unsupported wire dtype {arr.dtype}")
    return _PAYLOAD_HEAD.pack(tag, arr.size) + arr.astype(
        "<u8" if tag == _DT_U64 else "<f8"
    ).tobytes()


def _unpack_array(payload: bytes):
    tag, count = _PAYLOAD_HEAD.unpack_from(payload, 0)
    body = payload[_PAYLOAD_HEAD.size :]
    if tag == _DT_RAW:
        return body, count
    dt = "<u8" if tag == _DT_U64 else "<f8"
    arr = np.frombuffer(body, dtype=dt, count=count)
    return arr.astype(np.uint64 if tag == _DT_U64 else np.float64), count


# -- channels -----------------------------------------------------------------


class InprocChannel:
    """Queue-backed duplex channel half; mirrors the wire framing exactly."""

    def __init__(self, send_q: queue.Queue, recv_q: queue.Queue):
        self._send_q = send_q
        self._recv_q = recv_q

    def send_bytes(self, raw: bytes) -> None:
        self._send_q.put(raw)

    def recv_bytes(self) -> bytes:
        try:
            return self._recv_q.get(timeout=RECV_TIMEOUT)
        except queue.Empty:
            raise TransportError("in-process channel receive timed out") from None

    def close(self) -> None:
        pass


class TcpChannel:
    """Length-prefixed frames over a socket; sends drain via a writer thread
    so simultaneous large exchanges cannot deadlock on kernel buffers."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.settimeout(RECV_TIMEOUT)
        self._out: queue.Queue = queue.Queue()
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def _drain(self):
        while True:
            raw = self._out.get()
            if raw is None:
                return
            try:
                self._sock.sendall(struct.pack("<I", len(raw)) + raw)
            except OSError:
                return

    def send_bytes(self, raw: bytes) -> None:
        self._out.put(raw)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                part = self._sock.recv(min(n, 1 << 20))
            except socket.timeout:
                raise TransportError("socket receive timed out") from None
            if not part:
                raise TransportError("peer closed connection")
            chunks.append(part)
            n -= len(part)
        return b"".join(chunks)

    def recv_bytes(self) -> bytes:
        (length,) = struct.unpack("<I", self._read_exact(4))
        return self._read_exact(length)

    def close(self) -> None:
        self._out.put(None)
        self._writer.join(timeout=5)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def inproc_pair():
    q12: queue.Queue = queue.Queue()
    q21: queue.Queue = queue.Queue()
    return InprocChannel(q12, q21), InprocChannel(q21, q12)


def tcp_pair(host: str = "127.0.0.1"):
    listener = socket.create_server((host, 0))
    port = listener.getsockname()[1]
    result = {}

    def _accept():
        conn, _ = listener.accept()
        result["server"] = conn

    t = threading.Thread(target=_accept)
    t.start()
    client = socket.create_connection((host, port), timeout=10)
    t.join()
    listener.close()
    return TcpChannel(result["server"]), TcpChannel(client)


# -- transcripts ----------------------------------------------------------------


@dataclass
class ProtocolSpan:
    """Accounting for one protocol execution as seen by one party."""

    protocol: str
    depth: int = 0
    rounds: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    elements_sent: int = 0
    elements_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    open_tags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Transcript:
    """Both parties' spans for one run, in execution order."""

    spans: dict = field(default_factory=lambda: {1: [], 2: []})

    def party_spans(self, party_id: int, protocol: str | None = None):
        spans = self.spans[party_id]
        if protocol is None:
            # nested spans re-count their parents' flights, so run-wide
            # totals use top-level spans only
            return [s for s in spans if s.depth == 0]
        return [s for s in spans if s.protocol == protocol]

    def totals(self, protocol: str | None = None) -> dict:
        out = {
            "rounds": 0,
            "messages": 0,
            "elements": 0,
            "bytes_sent": {1: 0, 2: 0},
            "bytes_received": {1: 0, 2: 0},
        }
        for pid in (1, 2):
            for s in self.party_spans(pid, protocol):
                if pid == 1:  # rounds are symmetric; count once
                    out["rounds"] += s.rounds
                out["messages"] += s.messages_sent
                out["elements"] += s.elements_sent
                out["bytes_sent"][pid] += s.bytes_sent
                out["bytes_received"][pid] += s.bytes_received
        return out

    def check_conservation(self) -> None:
        sent1 = sum(s.bytes_sent for s in self.spans[1])
        sent2 = sum(s.bytes_sent for s in self.spans[2])
        recv1 = sum(s.bytes_received for s in self.spans[1])
        recv2 = sum(s.bytes_received for s in self.spans[2])
        if sent1 != recv2 or sent2 != recv1:
            raise ProtocolError(
                f"byte conservation violated: sent {sent1}/{sent2}, "
                f"received {recv1}/{recv2}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {str(pid): [s.as_dict() for s in spans] for pid, spans in self.spans.items()},
            indent=2,
        )


# -- party context ---------------------------------------------------------------


class PartyCtx:
    """One party's view of a running session.

    Protocol code uses ``begin(name)`` to scope accounting, and the
    exchange/send/recv/open primitives for every wire interaction.  All
    online randomness must come from the dealer bundle, which keeps runs
    bit-reproducible.
    """

    def __init__(self, party_id, channel, bundle, codec, session_id=1):
        self.party_id = party_id
        self.other_id = 3 - party_id
        self.channel = channel
        self.bundle = bundle
        self.codec = codec
        self.ring = codec.ring
        self.session_id = session_id
        self.round_index = 0
        self._proto_names: list[str] = []
        self._stack: list[ProtocolSpan] = []
        self.spans: list[ProtocolSpan] = []
        # both parties derive identical pads in lockstep; adding the pad on
        # one side and subtracting it on the other re-randomizes a sharing
        # before local truncation without any communication
        self._pad_rng = np.random.default_rng(np.random.PCG64((bundle.seed + 1) & 0xFFFFFFFF))

    def rerandomize(self, share):
        pad = self.ring.rand(self._pad_rng, np.shape(share))
        if self.party_id == 1:
            return self.ring.add(share, pad)
        return self.ring.sub(share, pad)

    # protocol scoping

    class _Scope:
        def __init__(self, ctx, span):
            self.ctx, self.span = ctx, span

        def __enter__(self):
            return self.span

        def __exit__(self, *exc):
            self.ctx._stack.pop()
            return False

    def begin(self, protocol: str):
        span = ProtocolSpan(protocol, depth=len(self._stack))
        if protocol not in self._proto_names:
            self._proto_names.append(protocol)
        self._stack.append(span)
        self.spans.append(span)
        return PartyCtx._Scope(self, span)

    def _proto_index(self) -> int:
        name = self._stack[-1].protocol if self._stack else "_"
        if name not in self._proto_names:
            self._proto_names.append(name)
        return self._proto_names.index(name)

    # accounting helpers

    def _note_sent(self, elements: int, nbytes: int):
        for span in self._stack:
            span.messages_sent += 1
            span.elements_sent += elements
            span.bytes_sent += nbytes

    def _note_received(self, elements: int, nbytes: int):
        for span in self._stack:
            span.messages_received += 1
            span.elements_received += elements
            span.bytes_received += nbytes

    def _note_round(self):
        self.round_index += 1
        for span in self._stack:
            span.rounds += 1

    def note_open(self, tag: str):
        if self._stack:
            self._stack[-1].open_tags.append(tag)

    # wire primitives

    def _send_frame(self, arr):
        payload = _pack_array(arr)
        msg = Message(
            self.session_id, self._proto_index(), self.round_index, self.party_id, payload
        )
        raw = msg.to_bytes()
        self.channel.send_bytes(raw)
        n = arr.size if hasattr(arr, "size") else 0
        self._note_sent(n, len(raw) + 4)

    def _recv_frame(self):
        raw = self.channel.recv_bytes()
        msg = Message.from_bytes(raw)
        if msg.session != self.session_id:
            raise TransportError(
                f"session mismatch: expected {self.session_id}, got {msg.session}"
            )
        if msg.round_index != self.round_index:
            raise RoundOrderError(
                f"round {msg.round_index} arrived, expected {self.round_index}"
            )
        arr, count = _unpack_array(msg.payload)
        self._note_received(count, len(raw) + 4)
        return arr

    def exchange(self, arr):
        """Simultaneous flight: both parties send, then read.  One round."""
        self._send_frame(arr)
        other = self._recv_frame()
        self._note_round()
        return other

    def send_to_other(self, arr):
        """One-directional flight from this party.  One round."""
        self._send_frame(arr)
        self._note_round()

    def recv_from_other(self):
        arr = self._recv_frame()
        self._note_round()
        return arr

    # openings

    def open_field(self, share, tag: str):
        """Both parties reveal a field sharing; returns the reconstruction."""
        self.note_open(tag)
        other = self.exchange(np.ascontiguousarray(share, dtype=np.uint64))
        return self.ring.add(share, other.reshape(np.shape(share)))

    def open_real(self, share, tag: str):
        self.note_open(tag)
        arr = np.ascontiguousarray(share, dtype=np.float64)
        other = self.exchange(arr)
        return arr + other.reshape(arr.shape)

    def reveal_to_party(self, share, target: int, tag: str):
        """Open a field sharing toward one party only; other side gets None."""
        self.note_open(tag)
        arr = np.ascontiguousarray(share, dtype=np.uint64)
        if self.party_id == target:
            other = self.recv_from_other()
            return self.ring.add(arr, other.reshape(arr.shape))
        self.send_to_other(arr)
        return None


# -- harness ---------------------------------------------------------------------


def run_two_party(program, inputs, bundles, codec, transport: str = "inproc"):
    """Execute one program on both parties; returns (out1, out2, transcript).

    ``inputs`` is a pair of per-party inputs, ``bundles`` a pair of
    PartyBundle.  Outputs are deterministic given inputs and the bundle seed.
    """
    if transport == "inproc":
        ch1, ch2 = inproc_pair()
    elif transport == "tcp":
        ch1, ch2 = tcp_pair()
    else:
        raise TransportError(f"unknown transport {transport!r}")

    ctxs = [
        PartyCtx(1, ch1, bundles[0], codec),
        PartyCtx(2, ch2, bundles[1], codec),
    ]
    outs = [None, None]
    errs = [None, None]

    def _run(i):
        try:
            outs[i] = program(ctxs[i], inputs[i])
        except BaseException as e:  # noqa: BLE001 - surfaced to caller below
            errs[i] = e
            try:  # wake a peer blocked on recv
                ctxs[i].channel.send_bytes(b"ABRT")
            except Exception:
                pass

    threads = [threading.Thread(target=_run, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=RECV_TIMEOUT * 2)
    ch1.close()
    ch2.close()
    if any(e is not None for e in errs):
        # a TransportError is usually collateral from the other party's abort
        order = sorted(
            (i for i, e in enumerate(errs) if e is not None),
            key=lambda i: isinstance(errs[i], TransportError),
        )
        i = order[0]
        stage = ctxs[i]._stack[-1].protocol if ctxs[i]._stack else "setup"
        raise ProtocolError(f"party {i + 1} failed in {stage!r}: {errs[i]}") from errs[i]

    transcript = Transcript(spans={1: ctxs[0].spans, 2: ctxs[1].spans})
    transcript.check_conservation()
    return outs[0], outs[1], transcript


# -- accounting against the cited complexity table --------------------------------

# (rounds, overhead) formulas from the reference comparison table, by protocol.
CITED_COMPLEXITY = {
    "exp": (lambda n: 4, lambda n: 6),
    "divi": (lambda n: 4, lambda n: (7 * n - 7) / 2),
    "comp": (lambda n: 8, lambda n: 16),
    "conv": (lambda n: (n - 1) / 2, lambda n: (2 * n - 1) / 2),
    "bn": (lambda n: 0, lambda n: 0),
    "silu": (lambda n: 10, lambda n: 16 * n - 8),
    "maxpool": (lambda n: n * n - 1, lambda n: 4 * n * n - 4),
    "bbpred": (lambda n: 10, lambda n: 6 * n + 18),
    "ds": (lambda n: 1, lambda n: 2 * n),
    "nms": (lambda n: 5, lambda n: 3 * n - 1),
}


def account(transcript: Transcript, sizes: dict) -> list:
    """Measured rounds/elements/bytes per protocol next to the cited formulas.

    ``sizes`` maps protocol name to its input length N.  Measured values are
    this implementation's regression baseline; the cited column is reported
    for comparison with a per-protocol deviation flag.
    """
    rows = []
    seen = [s.protocol for s in transcript.spans[1]]
    for name in dict.fromkeys(seen):
        totals = transcript.totals(name)
        n = sizes.get(name, 1)
        row = {
            "protocol": name,
            "n": n,
            "measured_rounds": totals["rounds"],
            "measured_elements": totals["elements"],
            "measured_bytes": totals["bytes_sent"][1] + totals["bytes_sent"][2],
        }
        if name in CITED_COMPLEXITY:
            r_f, o_f = CITED_COMPLEXITY[name]
            row["cited_rounds"] = r_f(n)
            row["cited_overhead"] = o_f(n)
            row["rounds_deviate"] = totals["rounds"] != r_f(n)
            row["overhead_deviate"] = totals["elements"] != o_f(n)
        rows.append(row)
    return rows

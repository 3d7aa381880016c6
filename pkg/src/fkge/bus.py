"""Typed protocol messages and a deterministic simulated message bus.

Matrix payloads are raw little-endian float64 bytes; shapes and other
handshake metadata ride in ``meta``. Every message gets a monotone sequence
number and lands in the trace, which can be written as JSON lines.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np


class MessageKind(str, Enum):
    HANDSHAKE_REQUEST = "HandshakeRequest"
    HANDSHAKE_ACCEPT = "HandshakeAccept"
    HANDSHAKE_REJECT = "HandshakeReject"
    ADV_BATCH = "AdvBatch"
    GRAD_BATCH = "GradBatch"
    TRANSLATED_BUNDLE = "TranslatedBundle"
    WAKE_UP_BROADCAST = "WakeUpBroadcast"
    SESSION_DONE = "SessionDone"


MATRIX_KINDS = (MessageKind.ADV_BATCH, MessageKind.GRAD_BATCH, MessageKind.TRANSLATED_BUNDLE)


class ProtocolError(RuntimeError):
    pass


def encode_matrix(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_matrix(payload: bytes, rows: int, cols: int) -> np.ndarray:
    if len(payload) != rows * cols * 8:
        raise ProtocolError(f"payload of {len(payload)} bytes does not hold a {rows}x{cols} matrix")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)


def validate(kind: MessageKind, payload: bytes, meta: dict) -> None:
    """Schema check: matrix messages carry exactly the f64 bytes their meta declares."""
    if kind in MATRIX_KINDS:
        rows, cols = meta.get("rows"), meta.get("cols")
        if rows is None or cols is None or len(payload) != rows * cols * 8:
            raise ProtocolError(f"{kind.value}: payload size does not match declared shape")
        if kind is MessageKind.GRAD_BATCH and rows != cols:
            raise ProtocolError("GradBatch must carry a square d x d matrix")
        if kind is MessageKind.TRANSLATED_BUNDLE and "session" not in meta:
            raise ProtocolError("TranslatedBundle must carry a session tag")
    elif payload:
        raise ProtocolError(f"{kind.value} carries no payload")


@dataclass
class Message:
    seq: int
    kind: MessageKind
    src: str
    dst: str
    payload: bytes = b""
    meta: dict = field(default_factory=dict)
    sent: int = 0
    due: int = 0

    @property
    def size(self) -> int:
        return len(self.payload)

    def digest(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def matrix(self) -> np.ndarray:
        return decode_matrix(self.payload, self.meta["rows"], self.meta["cols"])

    def record(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "from": self.src,
            "to": self.dst,
            "tick": self.sent,
            "payload_digest": self.digest(),
            "payload_size_bytes": self.size,
        }


@dataclass
class Envelope:
    """A message before the bus numbers it."""

    kind: MessageKind
    src: str
    dst: str
    payload: bytes = b""
    meta: dict = field(default_factory=dict)


class SessionChannel:
    """Synchronous in-session link between a client and a host.

    Each call round-trips the payload through its byte encoding, so the
    receiver only ever sees what was serialised. Messages are buffered and
    committed to the bus in one go when the session ends.
    """

    def __init__(self):
        self.outbox: list[Envelope] = []

    def send_matrix(self, kind: MessageKind, src: str, dst: str, arr: np.ndarray,
                    **meta) -> np.ndarray:
        arr = np.atleast_2d(arr)
        payload = encode_matrix(arr)
        meta = {"rows": arr.shape[0], "cols": arr.shape[1], **meta}
        validate(kind, payload, meta)
        self.outbox.append(Envelope(kind, src, dst, payload, meta))
        return decode_matrix(payload, meta["rows"], meta["cols"])

    def send(self, kind: MessageKind, src: str, dst: str, **meta) -> None:
        validate(kind, b"", meta)
        self.outbox.append(Envelope(kind, src, dst, b"", meta))


LatencyModel = Callable[[str, str, np.random.Generator], int]


def zero_latency(src: str, dst: str, rng: np.random.Generator) -> int:
    return 0


def fixed_latency(table: dict[tuple[str, str], int], default: int = 0) -> LatencyModel:
    def model(src, dst, rng):
        return table.get((src, dst), default)
    return model


def jitter_latency(max_ticks: int) -> LatencyModel:
    def model(src, dst, rng):
        return int(rng.integers(0, max_ticks + 1))
    return model


class SimBus:
    """Deterministic message delivery between registered actors.

    A message sent at tick ``t`` becomes due at ``t + 1 + latency``; due
    messages come out ordered by ``(due, seq)``, which with zero latency is
    FIFO per channel.
    """

    def __init__(self, seed: int = 0, latency: LatencyModel | None = None,
                 keep_payloads: bool = True):
        self.rng = np.random.default_rng(seed)
        self.latency = latency or zero_latency
        self.keep_payloads = keep_payloads
        self.actors: set[str] = set()
        self.trace: list[Message] = []
        self._heap: list[tuple[int, int, Message]] = []
        self._seq = 0

    def register(self, actor_id: str) -> None:
        self.actors.add(actor_id)

    def _number(self, env: Envelope, now: int, due: int) -> Message:
        if env.dst not in self.actors:
            raise ProtocolError(f"message to unregistered actor {env.dst!r}")
        if env.src not in self.actors:
            raise ProtocolError(f"message from unregistered actor {env.src!r}")
        validate(env.kind, env.payload, env.meta)
        msg = Message(self._seq, env.kind, env.src, env.dst, env.payload, dict(env.meta), now, due)
        self._seq += 1
        stored = msg if self.keep_payloads else Message(
            msg.seq, msg.kind, msg.src, msg.dst, b"", {**msg.meta, "_digest": msg.digest(),
                                                        "_size": msg.size}, now, due)
        self.trace.append(stored)
        return msg

    def send(self, kind: MessageKind, src: str, dst: str, now: int, payload: bytes = b"",
             **meta) -> Message:
        env = Envelope(kind, src, dst, payload, meta)
        due = now + 1 + int(self.latency(src, dst, self.rng))
        msg = self._number(env, now, due)
        heapq.heappush(self._heap, (due, msg.seq, msg))
        return msg

    def commit(self, envelopes: list[Envelope], now: int) -> list[Message]:
        """Record already-exchanged in-session traffic in order."""
        return [self._number(env, now, now) for env in envelopes]

    def deliver_due(self, now: int) -> list[Message]:
        out = []
        while self._heap and self._heap[0][0] <= now:
            out.append(heapq.heappop(self._heap)[2])
        return out

    @property
    def pending(self) -> int:
        return len(self._heap)

    def records(self) -> list[dict]:
        out = []
        for m in self.trace:
            rec = m.record()
            if not self.keep_payloads:
                rec["payload_digest"] = m.meta["_digest"]
                rec["payload_size_bytes"] = m.meta["_size"]
            out.append(rec)
        return out

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def scan_for_rows(messages, rows: np.ndarray, kinds=MATRIX_KINDS) -> list[tuple[int, int]]:
    """Find any row of ``rows`` appearing verbatim in a matrix payload.

    Every float64-aligned window of each payload is compared byte for byte
    against the rows. Returns ``(message seq, row index)`` hits.
    """
    rows = np.ascontiguousarray(rows, dtype="<f8")
    if not len(rows):
        return []
    d = rows.shape[1]
    lookup = {rows[i].tobytes(): i for i in range(len(rows))}
    hits = []
    for m in messages:
        if m.kind not in kinds or not m.payload:
            continue
        flat = np.frombuffer(m.payload, dtype="<f8")
        if len(flat) < d:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(flat, d)
        for w in windows:
            i = lookup.get(w.tobytes())
            if i is not None:
                hits.append((m.seq, i))
    return hits

"""Metadata-only wire format and simulated node/server channels.

Frame layout (all little-endian)::

    u32 length        bytes that follow (tag + payload)
    u8  tag           1=Query 2=UpdateFeature 3=Release 4=MatchReply
    payload           u64 IDs in field order; a feature is u32 dim + dim * f32

Nothing in the schema can hold coordinates, keypoints or pixels.
"""

from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Iterable, Iterator, Union

DEFAULT_MAX_DIM = 4096
U64_MAX = (1 << 64) - 1

# Set on the global_id field when a node refers to an object by its local
# (temporary) ID because it has not learned the global ID yet.
PROVISIONAL_FLAG = 1 << 63

_LEN = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_U64X2 = struct.Struct("<QQ")


class DecodeError(ValueError):
    """Base class for the four wire decoding failures."""


class Truncated(DecodeError):
    pass


class UnknownTag(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class DimensionOverflow(DecodeError):
    pass


@dataclass(frozen=True)
class Query:
    node_id: int
    temp_id: int
    feature: tuple[float, ...]


@dataclass(frozen=True)
class UpdateFeature:
    node_id: int
    global_id: int
    feature: tuple[float, ...]


@dataclass(frozen=True)
class Release:
    node_id: int
    global_id: int


@dataclass(frozen=True)
class MatchReply:
    temp_id: int
    global_id: int


Message = Union[Query, UpdateFeature, Release, MatchReply]

TAGS: dict[type, int] = {Query: 1, UpdateFeature: 2, Release: 3, MatchReply: 4}
VARIANTS: dict[int, type] = {v: k for k, v in TAGS.items()}

# Every field any message may carry.  The privacy audit checks decoded
# messages against this set.
ALLOWED_FIELDS = frozenset({"node_id", "temp_id", "global_id", "feature"})


def provisional_ref(local_id: int) -> int:
    return PROVISIONAL_FLAG | local_id


def is_provisional(global_id: int) -> bool:
    return bool(global_id & PROVISIONAL_FLAG)


def _check_id(value: int) -> int:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"ID {value} does not fit in u64")
    return value


def _encode_feature(feature: tuple[float, ...]) -> bytes:
    return _LEN.pack(len(feature)) + struct.pack(f"<{len(feature)}f", *feature)


def encode(msg: Message) -> bytes:
    if isinstance(msg, Query):
        body = _U64X2.pack(_check_id(msg.node_id), _check_id(msg.temp_id)) + _encode_feature(msg.feature)
    elif isinstance(msg, UpdateFeature):
        body = _U64X2.pack(_check_id(msg.node_id), _check_id(msg.global_id)) + _encode_feature(msg.feature)
    elif isinstance(msg, Release):
        body = _U64X2.pack(_check_id(msg.node_id), _check_id(msg.global_id))
    elif isinstance(msg, MatchReply):
        body = _U64X2.pack(_check_id(msg.temp_id), _check_id(msg.global_id))
    else:
        raise TypeError(f"not a wire message: {msg!r}")
    payload = bytes([TAGS[type(msg)]]) + body
    return _LEN.pack(len(payload)) + payload


def _decode_payload(payload: memoryview, max_dim: int) -> Message:
    tag = payload[0]
    cls = VARIANTS.get(tag)
    if cls is None:
        raise UnknownTag(f"unknown message tag 0x{tag:02x}")
    body = payload[1:]
    if len(body) < 16:
        raise LengthMismatch(f"tag {tag} needs at least 16 payload bytes, frame has {len(body)}")
    a, b = _U64X2.unpack_from(body, 0)
    if cls in (Release, MatchReply):
        if len(body) != 16:
            raise LengthMismatch(f"tag {tag} payload must be 16 bytes, got {len(body)}")
        return cls(a, b)
    if len(body) < 20:
        raise LengthMismatch("feature dimension field missing")
    (dim,) = _LEN.unpack_from(body, 16)
    if dim > max_dim:
        raise DimensionOverflow(f"feature dimension {dim} exceeds limit {max_dim}")
    if len(body) != 20 + 4 * dim:
        raise LengthMismatch(f"dimension {dim} needs {20 + 4 * dim} payload bytes, frame has {len(body)}")
    feature = struct.unpack_from(f"<{dim}f", body, 20)
    return cls(a, b, tuple(feature))


def decode(data: bytes, max_dim: int = DEFAULT_MAX_DIM) -> Message:
    """Decode exactly one frame; trailing bytes are a LengthMismatch."""
    msg, used = decode_prefix(data, max_dim)
    if used != len(data):
        raise LengthMismatch(f"{len(data) - used} trailing bytes after frame")
    return msg


def decode_prefix(data: bytes, max_dim: int = DEFAULT_MAX_DIM) -> tuple[Message, int]:
    """Decode the frame at the start of ``data``; returns (message, bytes consumed)."""
    view = memoryview(data)
    if len(view) < 4:
        raise Truncated(f"need 4 length bytes, have {len(view)}")
    (length,) = _LEN.unpack_from(view, 0)
    if length == 0:
        raise LengthMismatch("empty frame has no tag")
    if len(view) - 4 < length:
        raise Truncated(f"frame declares {length} bytes, {len(view) - 4} present")
    return _decode_payload(view[4 : 4 + length], max_dim), 4 + length


def iter_frames(stream: bytes, max_dim: int = DEFAULT_MAX_DIM) -> Iterator[Message]:
    pos = 0
    while pos < len(stream):
        msg, used = decode_prefix(stream[pos:], max_dim)
        pos += used
        yield msg


def schema_violations(msg: object) -> list[str]:
    """Names of anything in ``msg`` outside the four-variant schema."""
    if type(msg) not in TAGS:
        return [f"unexpected type {type(msg).__name__}"]
    return [f.name for f in fields(msg) if f.name not in ALLOWED_FIELDS]


@dataclass(order=True)
class _InFlight:
    deliver_at: int
    seq: int
    frame: bytes = field(compare=False)


class Channel:
    """One-direction FIFO link with fixed latency, optional jitter and outages.

    Messages are encoded on send and decoded on delivery, so every byte
    that crosses the link can be recorded for auditing.  When the buffer
    is full the oldest message is dropped and counted.
    """

    def __init__(
        self,
        latency: int = 0,
        jitter: int = 0,
        seed: int = 0,
        capacity: int | None = None,
        record: bool = False,
        max_dim: int = DEFAULT_MAX_DIM,
    ) -> None:
        if latency < 0 or jitter < 0:
            raise ValueError("latency and jitter must be non-negative")
        self.latency = latency
        self.jitter = jitter
        self.capacity = capacity
        self.max_dim = max_dim
        self._rng = random.Random(seed)
        self._queue: deque[_InFlight] = deque()
        self._seq = 0
        self.down = False
        self.dropped = 0
        self.sent = 0
        self.delivered = 0
        self.transcript: list[bytes] | None = [] if record else None

    def __len__(self) -> int:
        return len(self._queue)

    def send(self, msg: Message, now: int) -> None:
        frame = encode(msg)
        delay = self.latency + (self._rng.randint(0, self.jitter) if self.jitter else 0)
        if self.capacity is not None and len(self._queue) >= self.capacity:
            self._queue.popleft()
            self.dropped += 1
        self._queue.append(_InFlight(now + delay, self._seq, frame))
        self._seq += 1
        self.sent += 1
        if self.transcript is not None:
            self.transcript.append(frame)

    def deliver_due(self, now: int) -> list[Message]:
        """Remove and return every message due at ``now``.

        With zero jitter this is plain send order.  With jitter, due
        messages come out ordered by delivery time, then send order.
        """
        if self.down or not self._queue:
            return []
        due = [m for m in self._queue if m.deliver_at <= now]
        if not due:
            return []
        if self.jitter:
            due.sort()
            remaining = [m for m in self._queue if m.deliver_at > now]
            self._queue = deque(remaining)
        else:
            # deliver_at is non-decreasing along the queue without jitter
            for _ in due:
                self._queue.popleft()
        self.delivered += len(due)
        return [decode(m.frame, self.max_dim) for m in due]

    def next_due(self) -> int | None:
        return min((m.deliver_at for m in self._queue), default=None)


def encode_stream(messages: Iterable[Message]) -> bytes:
    return b"".join(encode(m) for m in messages)

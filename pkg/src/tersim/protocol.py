"""Bit-exact little-endian message codec and the deterministic link emulator.

Header layout (18 bytes): magic 0x54 u8, msg_type u8, seq u32,
timestamp_us u64, payload_len u32.  Fixed payload layouts:

    MotionOrder      33 B  3f tip mm, 4f quaternion wxyz, f fine_d, u8 flags
    ForceSample      16 B  3f force N, f normal component N
    RobotStateReport 33 B  4f strap mm, 3f wrist rad, f fine_d, u8 safety
    USFrame           var  u16 width, u16 height, width*height pixel bytes
    SessionControl    1 B  u8 code
    Heartbeat         0 B

Each named stream is an independently clocked pipe: a message occupies the
stream for size*8/budget seconds, then rides the link latency (+ seeded
jitter).  A transit interval touching a disruption window is dropped.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = 0x54
HEADER_SIZE = 18
_HEADER = struct.Struct("<BBIQI")
_MOTION = struct.Struct("<3f4ffB")
_FORCE = struct.Struct("<3ff")
_ROBOT = struct.Struct("<4f3ffB")
_FRAME_HEAD = struct.Struct("<HH")
_CONTROL = struct.Struct("<B")


class MsgType(IntEnum):
    MOTION_ORDER = 1
    US_FRAME = 2
    FORCE_SAMPLE = 3
    ROBOT_STATE = 4
    SESSION_CONTROL = 5
    HEARTBEAT = 6


class CodecError(Exception):
    pass


class BadMagic(CodecError):
    pass


class Truncated(CodecError):
    pass


class UnknownType(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class EncodeOverflow(CodecError):
    pass


@dataclass(frozen=True)
class MotionOrder:
    tip: tuple[float, float, float]
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    fine_d: float = 0.0
    flags: int = 0


@dataclass(frozen=True)
class ForceSample:
    force: tuple[float, float, float]
    normal_magnitude: float


@dataclass(frozen=True)
class RobotStateReport:
    strap_lengths: tuple[float, float, float, float]
    wrist_rpy: tuple[float, float, float]
    fine_d: float
    safety_state: int


@dataclass(frozen=True)
class FramePayload:
    width: int
    height: int
    pixels: bytes


@dataclass(frozen=True)
class SessionControl:
    code: int


@dataclass(frozen=True)
class Heartbeat:
    pass


# SessionControl codes
CTRL_START = 1
CTRL_STOP = 2

_PAYLOAD_TYPES = {
    MsgType.MOTION_ORDER: MotionOrder,
    MsgType.US_FRAME: FramePayload,
    MsgType.FORCE_SAMPLE: ForceSample,
    MsgType.ROBOT_STATE: RobotStateReport,
    MsgType.SESSION_CONTROL: SessionControl,
    MsgType.HEARTBEAT: Heartbeat,
}


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    seq: int
    timestamp_us: int
    payload: object

    def __post_init__(self):
        expected = _PAYLOAD_TYPES[MsgType(self.msg_type)]
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.msg_type!r} requires payload {expected.__name__}")


def _encode_payload(m: Message) -> bytes:
    p = m.payload
    if m.msg_type == MsgType.MOTION_ORDER:
        return _MOTION.pack(*p.tip, *p.orientation, p.fine_d, p.flags)
    if m.msg_type == MsgType.FORCE_SAMPLE:
        return _FORCE.pack(*p.force, p.normal_magnitude)
    if m.msg_type == MsgType.ROBOT_STATE:
        return _ROBOT.pack(*p.strap_lengths, *p.wrist_rpy, p.fine_d, p.safety_state)
    if m.msg_type == MsgType.US_FRAME:
        if len(p.pixels) != p.width * p.height:
            raise EncodeOverflow("frame pixel count does not match dimensions")
        return _FRAME_HEAD.pack(p.width, p.height) + p.pixels
    if m.msg_type == MsgType.SESSION_CONTROL:
        return _CONTROL.pack(p.code)
    return b""


def encode(m: Message) -> bytes:
    payload = _encode_payload(m)
    if len(payload) > 0xFFFFFFFF:
        raise EncodeOverflow("payload exceeds u32 length")
    return _HEADER.pack(MAGIC, int(m.msg_type), m.seq, m.timestamp_us, len(payload)) + payload


def encoded_size(m: Message) -> int:
    return HEADER_SIZE + len(_encode_payload(m))


def decode(buf: bytes) -> Message:
    """Inverse of encode; raises a CodecError subclass on malformed input
    and never reads past the declared payload length."""
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    magic, mtype, seq, ts, plen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic byte 0x{magic:02x}")
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    if len(buf) < HEADER_SIZE + plen:
        raise Truncated(f"payload declares {plen} bytes, {len(buf) - HEADER_SIZE} present")
    if len(buf) > HEADER_SIZE + plen:
        raise LengthMismatch("trailing bytes after declared payload")
    payload = buf[HEADER_SIZE : HEADER_SIZE + plen]

    if msg_type == MsgType.MOTION_ORDER:
        if plen != _MOTION.size:
            raise LengthMismatch(f"MotionOrder payload must be {_MOTION.size} bytes")
        vals = _MOTION.unpack(payload)
        body = MotionOrder(tuple(vals[0:3]), tuple(vals[3:7]), vals[7], vals[8])
    elif msg_type == MsgType.FORCE_SAMPLE:
        if plen != _FORCE.size:
            raise LengthMismatch(f"ForceSample payload must be {_FORCE.size} bytes")
        vals = _FORCE.unpack(payload)
        body = ForceSample(tuple(vals[0:3]), vals[3])
    elif msg_type == MsgType.ROBOT_STATE:
        if plen != _ROBOT.size:
            raise LengthMismatch(f"RobotStateReport payload must be {_ROBOT.size} bytes")
        vals = _ROBOT.unpack(payload)
        body = RobotStateReport(tuple(vals[0:4]), tuple(vals[4:7]), vals[7], vals[8])
    elif msg_type == MsgType.US_FRAME:
        if plen < _FRAME_HEAD.size:
            raise LengthMismatch("USFrame payload shorter than its dimension header")
        w, h = _FRAME_HEAD.unpack_from(payload, 0)
        if plen != _FRAME_HEAD.size + w * h:
            raise LengthMismatch(f"USFrame {w}x{h} needs {w * h} pixel bytes")
        body = FramePayload(w, h, payload[_FRAME_HEAD.size :])
    elif msg_type == MsgType.SESSION_CONTROL:
        if plen != 1:
            raise LengthMismatch("SessionControl payload must be 1 byte")
        body = SessionControl(payload[0])
    else:
        if plen != 0:
            raise LengthMismatch("Heartbeat carries no payload")
        body = Heartbeat()
    return Message(msg_type, seq, ts, body)


# ---------------------------------------------------------------------------
# Channel profiles and the link emulator
# ---------------------------------------------------------------------------

M2S = "m2s"  # master -> slave
S2M = "s2m"  # slave -> master
BOTH = "both"


class UnknownPreset(KeyError):
    pass


class NoSuchStream(KeyError):
    pass


class InvalidSchedule(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    name: str
    budget_bits_per_s: int
    direction: str = BOTH

    def __post_init__(self):
        if self.budget_bits_per_s <= 0:
            raise ValueError("stream budget must be positive")
        if self.direction not in (M2S, S2M, BOTH):
            raise ValueError(f"bad stream direction {self.direction!r}")


@dataclass(frozen=True)
class ChannelProfile:
    name: str
    streams: tuple[StreamSpec, ...]
    link_total_bits_per_s: int
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    disruption_windows: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if sum(s.budget_bits_per_s for s in self.streams) > self.link_total_bits_per_s:
            raise ValueError("stream budgets exceed the link total")
        names = [s.name for s in self.streams]
        if len(set(names)) != len(names):
            raise ValueError("duplicate stream names")
        _check_windows(self.disruption_windows)

    def stream(self, name: str) -> StreamSpec:
        for s in self.streams:
            if s.name == name:
                return s
        raise NoSuchStream(name)


def _check_windows(windows) -> list[tuple[float, float]]:
    out = []
    prev_end = None
    for w in windows:
        start, end = float(w[0]), float(w[1])
        if end <= start:
            raise InvalidSchedule(f"window [{start}, {end}] is empty or reversed")
        if prev_end is not None and start < prev_end:
            raise InvalidSchedule("disruption windows overlap or are unsorted")
        prev_end = end
        out.append((start, end))
    return out


# Presets mirror the experiment link configurations: three ISDN partitions
# and two shared high-rate networks.  kb/s means 1000 bits per second.
_PRESETS = {
    "ISDN256": dict(
        streams=(
            StreamSpec("us_images", 128_000, S2M),
            StreamSpec("av", 64_000, BOTH),
            StreamSpec("haptic_robot", 64_000, BOTH),
        ),
        link_total_bits_per_s=256_000,
        latency_ms=20.0,
    ),
    "ISDN512": dict(
        streams=(
            StreamSpec("us_images", 320_000, S2M),
            StreamSpec("av", 128_000, BOTH),
            StreamSpec("haptic_robot", 64_000, BOTH),
        ),
        link_total_bits_per_s=512_000,
        latency_ms=20.0,
    ),
    # Two bonded 128 kb/s lines: images on one, av + haptic sharing the other.
    "ISDN128x2": dict(
        streams=(
            StreamSpec("us_images", 128_000, S2M),
            StreamSpec("haptic_robot", 64_000, BOTH),
            StreamSpec("av", 64_000, BOTH),
        ),
        link_total_bits_per_s=256_000,
        latency_ms=20.0,
    ),
    "LAN100M": dict(
        streams=(
            StreamSpec("us_images", 98_000_000, S2M),
            StreamSpec("av", 1_000_000, BOTH),
            StreamSpec("haptic_robot", 1_000_000, BOTH),
        ),
        link_total_bits_per_s=100_000_000,
        latency_ms=1.0,
    ),
    "VTHD": dict(
        streams=(
            StreamSpec("us_images", 9_800_000_000, S2M),
            StreamSpec("av", 100_000_000, BOTH),
            StreamSpec("haptic_robot", 100_000_000, BOTH),
        ),
        link_total_bits_per_s=10_000_000_000,
        latency_ms=15.0,
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ChannelProfile:
    try:
        spec = _PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown channel preset {name!r}") from None
    return ChannelProfile(name=name, **spec)


# Fault kinds (scheduled through the scenario; see the session engine).
@dataclass(frozen=True)
class LinkDisruption:
    window: tuple[float, float]  # seconds


@dataclass(frozen=True)
class MasterInputFreeze:
    window: tuple[float, float]  # seconds


@dataclass(frozen=True)
class SlaveCrash:
    at: float  # seconds


@dataclass(frozen=True)
class SendOutcome:
    start_us: int
    delivery_us: int
    dropped: bool
    size_bytes: int


@dataclass
class _StreamState:
    busy_until_us: int = 0
    last_delivery_us: int = 0
    queue_len: int = 0  # informational; FIFO order is enforced by timestamps


class LinkEmulator:
    """Single-owner scheduler for one bandwidth-partitioned link.

    Each (stream, direction) pair serializes messages at the stream budget;
    `send` returns the deterministic delivery decision for the caller's
    event queue.  Duplex streams carry their full budget in each direction.
    """

    def __init__(self, profile: ChannelProfile, seed: int = 0):
        self.profile = profile
        self._states: dict[tuple[str, str], _StreamState] = {}
        self._rng = random.Random(seed)
        self._windows_us = [
            (int(round(w0 * 1_000_000)), int(round(w1 * 1_000_000)))
            for w0, w1 in profile.disruption_windows
        ]
        self._windows_us.sort()
        self.delivered_bytes: dict[str, int] = {s.name: 0 for s in profile.streams}
        self.dropped_count = 0

    def add_disruption(self, window_s: tuple[float, float]) -> None:
        w = (int(round(window_s[0] * 1_000_000)), int(round(window_s[1] * 1_000_000)))
        if w[1] <= w[0]:
            raise InvalidSchedule("empty disruption window")
        for w0, w1 in self._windows_us:
            if w[0] < w1 and w[1] > w0:
                raise InvalidSchedule("disruption windows overlap")
        self._windows_us.append(w)
        self._windows_us.sort()

    def disruption_windows_us(self) -> list[tuple[int, int]]:
        return list(self._windows_us)

    def _disrupted(self, start_us: int, delivery_us: int) -> bool:
        for w0, w1 in self._windows_us:
            if start_us < w1 and delivery_us > w0:
                return True
        return False

    def send(self, stream_name: str, direction: str, size_bytes: int, now_us: int) -> SendOutcome:
        spec = self.profile.stream(stream_name)
        if spec.direction != BOTH and spec.direction != direction:
            raise NoSuchStream(f"stream {stream_name!r} does not carry {direction} traffic")
        key = (stream_name, direction)
        state = self._states.setdefault(key, _StreamState())
        bits = size_bytes * 8
        tx_us = -(-bits * 1_000_000 // spec.budget_bits_per_s)  # ceil division
        start = max(now_us, state.busy_until_us)
        delivery = start + tx_us + int(round(self.profile.latency_ms * 1000))
        if self.profile.jitter_ms > 0:
            delivery += int(self._rng.random() * self.profile.jitter_ms * 1000)
        # FIFO even under jitter: never deliver before an earlier message.
        delivery = max(delivery, state.last_delivery_us)
        state.busy_until_us = start + tx_us
        if self._disrupted(start, delivery):
            self.dropped_count += 1
            return SendOutcome(start, delivery, True, size_bytes)
        state.last_delivery_us = delivery
        self.delivered_bytes[stream_name] += size_bytes
        return SendOutcome(start, delivery, False, size_bytes)


# ---------------------------------------------------------------------------
# Golden codec vectors shared with other implementations of this protocol
# ---------------------------------------------------------------------------


def golden_messages() -> list[Message]:
    frame_pixels = bytes((i * 7 + 3) % 256 for i in range(16 * 8))
    return [
        Message(MsgType.HEARTBEAT, 1, 1_000, Heartbeat()),
        Message(MsgType.SESSION_CONTROL, 2, 2_000, SessionControl(CTRL_START)),
        Message(
            MsgType.MOTION_ORDER,
            7,
            123_456_789,
            MotionOrder((12.5, -3.25, 101.5), (0.5, -0.5, 0.5, 0.5), 1.5, 1),
        ),
        Message(MsgType.FORCE_SAMPLE, 9, 4_000, ForceSample((0.25, -1.5, 3.75), 3.5)),
        Message(
            MsgType.ROBOT_STATE,
            11,
            5_000,
            RobotStateReport((100.5, 200.25, 300.125, 400.0625), (0.5, -0.25, 0.75), 2.5, 0x83),
        ),
        Message(MsgType.US_FRAME, 13, 6_000, FramePayload(16, 8, frame_pixels)),
    ]


def write_golden_vectors(path) -> None:
    """Length-prefixed concatenation of the golden messages."""
    with open(path, "wb") as fh:
        for m in golden_messages():
            blob = encode(m)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_golden_vectors(path) -> list[bytes]:
    blobs = []
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blobs.append(data[pos : pos + n])
        pos += n
    return blobs

"""Challenge-response wire messages, canonical serialization and replay defense.

Canonical response bytes (everything little-endian)::

    "LFAT1" | nonce (16 raw bytes)
           | prover_id  (u32 length + UTF-8 bytes)
           | trigger_id (u32 length + UTF-8 bytes)
           | period_us (u64) | duration_us (u64) | sample count (u64)
           | per sample: t_offset_us, d_instructions, d_cycles,
             d_cache_accesses (u64 each)

The 32-byte response tag is HMAC-SHA256 over exactly these bytes with a
32-byte pre-shared key.  The window's truncated flag is not serialized: it
is derivable from the sample count versus duration_us // period_us, which
keeps the canonical encoding injective over valid responses.

Wire framing: u32 little-endian frame length, then the frame (one message
type byte, 0x01 challenge / 0x02 response, followed by the payload).
Challenge payload: nonce (16) | trigger_id (u32 length + UTF-8) |
period_us (u64) | duration_us (u64) | issued_at unix ms (u64).

Verification order is tag first: any single-byte tamper of the canonical
bytes is reported as a bad tag before the nonce is even looked up.
"""

from __future__ import annotations

import hmac
import hashlib
import secrets
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

from .trace import MAX_ID_BYTES, CounterSample, TraceWindow, check_identifier

MAGIC = b"LFAT1"
NONCE_LEN = 16
TAG_LEN = 32
KEY_LEN = 32
GRACE_MS = 5000
DEFAULT_PERIOD_US = 1000
DEFAULT_DURATION_US = 300_000

FRAME_CHALLENGE = 0x01
FRAME_RESPONSE = 0x02
MAX_FRAME_LEN = 16 * 1024 * 1024


class ProtocolError(Exception):
    """Base class for malformed protocol inputs."""


class FieldTooLongError(ProtocolError):
    """An identifier exceeds MAX_ID_BYTES in its UTF-8 encoding."""


class FramingError(ProtocolError):
    """Broken frame layout or connection closed mid-frame."""


class Reject(Enum):
    """Distinct verification failure reasons."""

    BAD_TAG = "bad-tag"
    UNKNOWN_NONCE = "unknown-nonce"
    EXPIRED_NONCE = "expired-nonce"
    REPLAYED_NONCE = "replayed-nonce"
    MALFORMED_RESPONSE = "malformed-response"


@dataclass(frozen=True, slots=True)
class VerifyResult:
    accepted: bool
    reason: Reject | None = None
    detail: str = ""


@dataclass(frozen=True, slots=True)
class Challenge:
    nonce: bytes
    trigger_id: str
    period_us: int
    duration_us: int
    issued_at: int

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        check_identifier("trigger_id", self.trigger_id)
        if self.period_us <= 0 or self.duration_us < self.period_us:
            raise ValueError("invalid monitoring window parameters")


@dataclass(frozen=True, slots=True)
class AttestationResponse:
    nonce: bytes
    window: TraceWindow
    prover_id: str
    tag: bytes

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        if len(self.tag) != TAG_LEN:
            raise ValueError(f"tag must be {TAG_LEN} bytes")
        check_identifier("prover_id", self.prover_id)


def _pack_str(value: str, what: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > MAX_ID_BYTES:
        raise FieldTooLongError(f"{what} exceeds {MAX_ID_BYTES} bytes")
    return struct.pack("<I", len(raw)) + raw


def canonical_bytes(nonce: bytes, prover_id: str, window: TraceWindow) -> bytes:
    """Deterministic byte layout of a response minus its tag."""
    parts = [
        MAGIC,
        nonce,
        _pack_str(prover_id, "prover_id"),
        _pack_str(window.trigger_id, "trigger_id"),
        struct.pack("<QQQ", window.period_us, window.duration_us, len(window.samples)),
    ]
    parts.extend(
        struct.pack("<QQQQ", s.t_offset_us, s.d_instructions, s.d_cycles, s.d_cache_accesses)
        for s in window.samples
    )
    return b"".join(parts)


def sign_response(nonce: bytes, prover_id: str, window: TraceWindow, key: bytes) -> bytes:
    """HMAC-SHA256 tag over the canonical response bytes."""
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be {KEY_LEN} bytes")
    return hmac.new(key, canonical_bytes(nonce, prover_id, window), hashlib.sha256).digest()


def now_ms() -> int:
    return int(time.time() * 1000)


class NonceLedger:
    """Tracks outstanding and consumed nonces; a nonce is accepted at most once.

    ``issued`` maps nonces to their challenge and expiry; ``consumed`` is a
    bounded FIFO of used nonces (oldest evicted past ``retention`` entries).
    Safe for concurrent verify calls: check-and-consume is serialized.
    """

    RETENTION = 1 << 16

    def __init__(self, clock: Callable[[], int] = now_ms, retention: int = RETENTION):
        self._clock = clock
        self._retention = retention
        self._issued: dict[bytes, tuple[Challenge, int]] = {}
        self._consumed: OrderedDict[bytes, int] = OrderedDict()
        self._lock = threading.Lock()

    @property
    def clock(self) -> Callable[[], int]:
        return self._clock

    def register(self, challenge: Challenge, grace_ms: int = GRACE_MS) -> None:
        expiry = self._clock() + challenge.duration_us // 1000 + grace_ms
        with self._lock:
            if challenge.nonce in self._issued or challenge.nonce in self._consumed:
                raise ValueError("nonce already known to the ledger")
            self._purge_expired_locked()
            self._issued[challenge.nonce] = (challenge, expiry)

    def _purge_expired_locked(self) -> None:
        now = self._clock()
        for nonce in [n for n, (_, exp) in self._issued.items() if exp < now]:
            del self._issued[nonce]

    def check_and_consume(self, nonce: bytes) -> tuple[Challenge | None, Reject | None]:
        """Atomically validate and consume a nonce.

        Returns (challenge, None) on success and (None, reason) otherwise.
        """
        with self._lock:
            if nonce in self._consumed:
                return None, Reject.REPLAYED_NONCE
            entry = self._issued.get(nonce)
            if entry is None:
                return None, Reject.UNKNOWN_NONCE
            challenge, expiry = entry
            if self._clock() > expiry:
                del self._issued[nonce]
                return None, Reject.EXPIRED_NONCE
            del self._issued[nonce]
            self._consumed[nonce] = self._clock()
            while len(self._consumed) > self._retention:
                self._consumed.popitem(last=False)
            return challenge, None

    def outstanding(self) -> int:
        with self._lock:
            return len(self._issued)

    def consumed_count(self) -> int:
        with self._lock:
            return len(self._consumed)


def make_challenge(
    ledger: NonceLedger,
    trigger_id: str,
    period_us: int = DEFAULT_PERIOD_US,
    duration_us: int = DEFAULT_DURATION_US,
    rng: Callable[[int], bytes] = secrets.token_bytes,
    grace_ms: int = GRACE_MS,
) -> Challenge:
    """Create a challenge with a fresh nonce and register it with the ledger."""
    while True:
        challenge = Challenge(
            nonce=rng(NONCE_LEN),
            trigger_id=trigger_id,
            period_us=period_us,
            duration_us=duration_us,
            issued_at=ledger.clock(),
        )
        try:
            ledger.register(challenge, grace_ms=grace_ms)
            return challenge
        except ValueError:
            continue  # nonce collision: draw again


def verify_response(
    response: AttestationResponse, key: bytes, ledger: NonceLedger
) -> tuple[VerifyResult, Challenge | None]:
    """Authenticate a response and enforce nonce freshness.

    Checks, in order: canonical serializability, tag (constant-time
    compare), nonce state, and consistency of the window with the
    challenged parameters.  The nonce is consumed only on acceptance.
    """
    try:
        expected = sign_response(response.nonce, response.prover_id, response.window, key)
    except ProtocolError as e:
        return VerifyResult(False, Reject.MALFORMED_RESPONSE, str(e)), None
    if not hmac.compare_digest(expected, response.tag):
        return VerifyResult(False, Reject.BAD_TAG, "authentication tag mismatch"), None

    challenge, reject = ledger.check_and_consume(response.nonce)
    if reject is not None:
        return VerifyResult(False, reject, "nonce rejected"), None

    w = response.window
    if (
        w.trigger_id != challenge.trigger_id
        or w.period_us != challenge.period_us
        or w.duration_us != challenge.duration_us
    ):
        return (
            VerifyResult(False, Reject.MALFORMED_RESPONSE, "window does not match challenge"),
            None,
        )
    return VerifyResult(True), challenge


# -- wire encoding ----------------------------------------------------------


def encode_challenge(challenge: Challenge) -> bytes:
    return (
        challenge.nonce
        + _pack_str(challenge.trigger_id, "trigger_id")
        + struct.pack("<QQQ", challenge.period_us, challenge.duration_us, challenge.issued_at)
    )


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FramingError(f"truncated payload while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def take_u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def take_str(self, what: str) -> str:
        (length,) = struct.unpack("<I", self.take(4, what + " length"))
        if length > MAX_ID_BYTES:
            raise FramingError(f"{what} length {length} exceeds {MAX_ID_BYTES}")
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FramingError(f"{what} is not valid UTF-8") from None

    def done(self, what: str) -> None:
        if self.pos != len(self.data):
            raise FramingError(f"{len(self.data) - self.pos} trailing bytes after {what}")


def decode_challenge(payload: bytes) -> Challenge:
    cur = _Cursor(payload)
    nonce = cur.take(NONCE_LEN, "nonce")
    trigger_id = cur.take_str("trigger_id")
    period_us = cur.take_u64("period_us")
    duration_us = cur.take_u64("duration_us")
    issued_at = cur.take_u64("issued_at")
    cur.done("challenge")
    try:
        return Challenge(nonce, trigger_id, period_us, duration_us, issued_at)
    except ValueError as e:
        raise FramingError(str(e)) from None


def encode_response(response: AttestationResponse) -> bytes:
    return canonical_bytes(response.nonce, response.prover_id, response.window) + response.tag


def decode_response(payload: bytes) -> AttestationResponse:
    """Parse canonical bytes + tag back into a response.

    The truncated flag of the reconstructed window is implied by the sample
    count, exactly as the canonical encoding defines it.
    """
    cur = _Cursor(payload)
    if cur.take(len(MAGIC), "magic") != MAGIC:
        raise FramingError("bad canonical magic")
    nonce = cur.take(NONCE_LEN, "nonce")
    prover_id = cur.take_str("prover_id")
    trigger_id = cur.take_str("trigger_id")
    period_us = cur.take_u64("period_us")
    duration_us = cur.take_u64("duration_us")
    count = cur.take_u64("sample count")
    if count > MAX_FRAME_LEN // 32:
        raise FramingError(f"implausible sample count {count}")
    samples = []
    for _ in range(count):
        fields = struct.unpack("<QQQQ", cur.take(32, "sample"))
        try:
            samples.append(CounterSample(*fields))
        except ValueError as e:
            raise FramingError(str(e)) from None
    tag = cur.take(TAG_LEN, "tag")
    cur.done("response")
    try:
        window = TraceWindow(trigger_id, period_us, duration_us, tuple(samples))
        return AttestationResponse(nonce, window, prover_id, tag)
    except ValueError as e:
        raise FramingError(str(e)) from None


# -- stream framing ---------------------------------------------------------


def send_frame(sock, frame_type: int, payload: bytes) -> None:
    frame = bytes([frame_type]) + payload
    sock.sendall(struct.pack("<I", len(frame)) + frame)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FramingError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock) -> tuple[int, bytes]:
    """Read one length-prefixed frame; returns (message type, payload)."""
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length < 1 or length > MAX_FRAME_LEN:
        raise FramingError(f"frame length {length} out of bounds")
    frame = _recv_exact(sock, length)
    return frame[0], frame[1:]


def load_key(path: str | Path) -> bytes:
    """Load the 32-byte shared key from a 64-hex-character file."""
    text = Path(path).read_text().strip()
    if len(text) != 2 * KEY_LEN:
        raise ValueError(f"key file must hold {2 * KEY_LEN} hex characters")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ValueError("key file is not valid hex") from None

"""Counter-trace data model, feature extraction and the on-disk trace format.

A monitoring window is a fixed-rate series of per-interval deltas of three
cumulative hardware counters: instructions retired, CPU cycles, and L1 data
cache accesses.  The verifier consumes a two-dimensional summary of the
window (mean IPC, mean cache accesses per interval).

Trace file format (UTF-8, LF line endings, base-10 integers)::

    # trigger_id=<id> period_us=<p> duration_us=<d> truncated=<0|1>
    t_offset_us,d_instructions,d_cycles,d_cache_accesses
    1000,1498231,1000000,2507
    ...

The preamble's ``truncated`` flag is redundant with the sample count (a
window is truncated exactly when it holds fewer than ``duration_us //
period_us`` samples); the decoder rejects files where the two disagree.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

MAX_ID_BYTES = 64
DEFAULT_MAX_IPC = 16.0

_PREAMBLE_RE = re.compile(
    r"# trigger_id=(\S+) period_us=(\d+) duration_us=(\d+) truncated=([01])"
)
_CSV_HEADER = "t_offset_us,d_instructions,d_cycles,d_cache_accesses"


class TraceError(Exception):
    """Base class for trace-layer errors."""


class EmptyWindowError(TraceError):
    """Raised when an operation needs at least one sample."""


class FeatureBoundsError(TraceError):
    """Raised when extracted features violate their sanity bounds."""


class FormatError(TraceError):
    """Malformed trace file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def check_identifier(name: str, value: str) -> None:
    """Validate an opaque identifier (trigger id, prover id).

    Identifiers must be non-empty, at most MAX_ID_BYTES UTF-8 bytes, and
    contain no whitespace or unprintable characters (the text formats use
    space- and line-delimited fields).
    """
    if not value:
        raise ValueError(f"{name} must be non-empty")
    if len(value.encode("utf-8")) > MAX_ID_BYTES:
        raise ValueError(f"{name} exceeds {MAX_ID_BYTES} bytes: {value!r}")
    if any(c.isspace() or not c.isprintable() for c in value):
        raise ValueError(f"{name} contains whitespace or unprintable characters: {value!r}")


class Label(Enum):
    NORMAL = "normal"
    ATTACK = "attack"


class AttackMode(Enum):
    CODE_INJECTION = "code-injection"
    NODE_SKIPPING = "node-skipping"


@dataclass(frozen=True, slots=True)
class CounterSample:
    """Per-interval counter deltas, timestamped relative to window start."""

    t_offset_us: int
    d_instructions: int
    d_cycles: int
    d_cache_accesses: int

    def __post_init__(self):
        for name in ("t_offset_us", "d_instructions", "d_cycles", "d_cache_accesses"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")


@dataclass(frozen=True, slots=True)
class TraceWindow:
    """One completed (or truncated) monitoring window.

    Immutable after construction.  ``truncated`` is derived: a window is
    truncated iff it carries fewer samples than ``duration_us // period_us``.
    """

    trigger_id: str
    period_us: int
    duration_us: int
    samples: tuple[CounterSample, ...]

    def __post_init__(self):
        check_identifier("trigger_id", self.trigger_id)
        if self.period_us <= 0:
            raise ValueError("period_us must be > 0")
        if self.duration_us < self.period_us:
            raise ValueError("duration_us must be >= period_us")
        object.__setattr__(self, "samples", tuple(self.samples))
        if len(self.samples) > self.expected_samples:
            raise ValueError(
                f"{len(self.samples)} samples exceeds window capacity {self.expected_samples}"
            )
        last = -1
        for s in self.samples:
            if s.t_offset_us <= last:
                raise ValueError("sample t_offset_us values must be strictly increasing")
            last = s.t_offset_us

    @property
    def expected_samples(self) -> int:
        return self.duration_us // self.period_us

    @property
    def truncated(self) -> bool:
        return len(self.samples) < self.expected_samples


@dataclass(frozen=True, slots=True)
class FeatureVector:
    """The two model features: mean IPC and mean cache accesses per interval."""

    mean_ipc: float
    mean_cache_accesses: float

    def __post_init__(self):
        if not (math.isfinite(self.mean_ipc) and math.isfinite(self.mean_cache_accesses)):
            raise ValueError("feature values must be finite")
        if self.mean_ipc < 0 or self.mean_cache_accesses < 0:
            raise ValueError("feature values must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_ipc, self.mean_cache_accesses], dtype=np.float64)


@dataclass(frozen=True, slots=True)
class LabeledTrace:
    """A window plus its ground-truth label, used only for evaluation."""

    window: TraceWindow
    label: Label
    attack_mode: AttackMode | None = None

    def __post_init__(self):
        if (self.label is Label.ATTACK) != (self.attack_mode is not None):
            raise ValueError("attack_mode must be present iff label is ATTACK")


def ipc_from_deltas(d_instructions: int, d_cycles: int) -> float:
    """Instructions per cycle for one interval.

    An interval with zero cycles (target descheduled or idle) carries no
    throughput and maps to 0.0 by convention.
    """
    if d_instructions < 0 or d_cycles < 0:
        raise ValueError("counter deltas must be non-negative")
    if d_cycles == 0:
        return 0.0
    return d_instructions / d_cycles


def compute_features(window: TraceWindow, max_ipc: float = DEFAULT_MAX_IPC) -> FeatureVector:
    """Reduce a window to its feature vector (mean IPC, mean cache accesses).

    Raises EmptyWindowError on sample-less windows and FeatureBoundsError
    when the mean IPC exceeds ``max_ipc`` (a corrupt-counter guard).
    """
    if not window.samples:
        raise EmptyWindowError("cannot extract features from a window with no samples")
    ipc = np.fromiter(
        (ipc_from_deltas(s.d_instructions, s.d_cycles) for s in window.samples),
        dtype=np.float64,
        count=len(window.samples),
    )
    cache = np.fromiter(
        (s.d_cache_accesses for s in window.samples),
        dtype=np.float64,
        count=len(window.samples),
    )
    mean_ipc = float(ipc.mean())
    if mean_ipc > max_ipc:
        raise FeatureBoundsError(f"mean IPC {mean_ipc:.3f} exceeds sanity bound {max_ipc}")
    return FeatureVector(mean_ipc=mean_ipc, mean_cache_accesses=float(cache.mean()))


def encode_trace(window: TraceWindow) -> bytes:
    lines = [
        f"# trigger_id={window.trigger_id} period_us={window.period_us} "
        f"duration_us={window.duration_us} truncated={int(window.truncated)}",
        _CSV_HEADER,
    ]
    lines.extend(
        f"{s.t_offset_us},{s.d_instructions},{s.d_cycles},{s.d_cache_accesses}"
        for s in window.samples
    )
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_trace(data: bytes) -> TraceWindow:
    """Parse a trace file; inverse of encode_trace (field-exact round trip)."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"not valid UTF-8: {e}", line=1) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise FormatError("missing trailing newline", line=max(len(lines), 1))
    if not lines:
        raise FormatError("empty file", line=1)

    m = _PREAMBLE_RE.fullmatch(lines[0])
    if m is None:
        raise FormatError("malformed preamble comment", line=1)
    trigger_id = m.group(1)
    period_us, duration_us = int(m.group(2)), int(m.group(3))
    truncated_flag = m.group(4) == "1"

    if len(lines) < 2 or lines[1] != _CSV_HEADER:
        raise FormatError(f"expected header {_CSV_HEADER!r}", line=2)

    samples = []
    prev_offset = -1
    for lineno, row in enumerate(lines[2:], start=3):
        fields = row.split(",")
        if len(fields) != 4:
            raise FormatError(f"expected 4 comma-separated fields, got {len(fields)}", line=lineno)
        try:
            values = [int(f, 10) for f in fields]
        except ValueError:
            raise FormatError(f"non-integer field in row {row!r}", line=lineno) from None
        if any(v < 0 for v in values):
            raise FormatError("negative counter field", line=lineno)
        if values[0] <= prev_offset:
            raise FormatError("t_offset_us not strictly increasing", line=lineno)
        prev_offset = values[0]
        samples.append(CounterSample(*values))

    try:
        window = TraceWindow(trigger_id, period_us, duration_us, tuple(samples))
    except ValueError as e:
        raise FormatError(str(e), line=1) from None
    if window.truncated != truncated_flag:
        raise FormatError(
            f"truncated flag {int(truncated_flag)} inconsistent with "
            f"{len(samples)}/{window.expected_samples} samples",
            line=1,
        )
    return window


def write_trace(path: str | Path, window: TraceWindow) -> None:
    Path(path).write_bytes(encode_trace(window))


def read_trace(path: str | Path) -> TraceWindow:
    return decode_trace(Path(path).read_bytes())

"""Event value types, immutable stream container and the EVT1 / CSV file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHIQ")
HEADER_SIZE = HEADER.size  # 20 bytes
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("pol", "i1")])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 13 bytes, packed
MAX_VIOLATIONS = 100
CSV_HEADER = ["t_us", "x", "y", "pol"]


class EventFileError(Exception):
    """Base class for event file errors."""


class MalformedHeader(EventFileError):
    pass


class TruncatedRecord(EventFileError):
    pass


class InvariantViolation(EventFileError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class Event(NamedTuple):
    x: int
    y: int
    t: int
    pol: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 640
    height: int = 480
    temporal_resolution_us: int = 200

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor dimensions must be positive")
        if self.width % 5 or self.height % 5:
            raise ValueError("width and height must be divisible by 5")
        if self.temporal_resolution_us <= 0:
            raise ValueError("temporal_resolution_us must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) of a dense per-pixel grid."""
        return self.height, self.width

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events held as four read-only column arrays.

    Construction does not validate; use :func:`validate_stream` or
    :meth:`checked` where the invariants matter.
    """

    geometry: SensorGeometry
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pol: np.ndarray
    _len: int = field(init=False, repr=False)

    def __post_init__(self):
        t = _frozen(self.t, np.uint64)
        x = _frozen(self.x, np.uint16)
        y = _frozen(self.y, np.uint16)
        pol = _frozen(self.pol, np.int8)
        if not (len(t) == len(x) == len(y) == len(pol)):
            raise ValueError("event columns differ in length")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "pol", pol)
        object.__setattr__(self, "_len", len(t))

    @classmethod
    def empty(cls, geometry: SensorGeometry | None = None) -> "EventStream":
        geometry = geometry or SensorGeometry()
        return cls(geometry, [], [], [], [])

    @classmethod
    def from_events(cls, events, geometry: SensorGeometry | None = None) -> "EventStream":
        events = list(events)
        geometry = geometry or SensorGeometry()
        if not events:
            return cls.empty(geometry)
        x, y, t, pol = zip(*events)
        return cls(geometry, t, x, y, pol)

    @classmethod
    def from_records(cls, records: np.ndarray, geometry: SensorGeometry) -> "EventStream":
        return cls(geometry, records["t"], records["x"], records["y"], records["pol"])

    def __len__(self) -> int:
        return self._len

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.pol.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.pol[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.pol, other.pol)
        )

    def records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["t"] = self.t
        rec["x"] = self.x
        rec["y"] = self.y
        rec["pol"] = self.pol
        return rec

    def slice_time(self, t_lo: int, t_hi: int) -> "EventStream":
        """Events with t_lo < t <= t_hi."""
        i0 = int(np.searchsorted(self.t, t_lo, side="right")) if t_lo >= 0 else 0
        i1 = int(np.searchsorted(self.t, t_hi, side="right")) if t_hi >= 0 else 0
        return EventStream(self.geometry, self.t[i0:i1], self.x[i0:i1], self.y[i0:i1], self.pol[i0:i1])

    def checked(self) -> "EventStream":
        report = validate_stream(self)
        if not report.ok:
            first = report.violations[0]
            raise InvariantViolation(first.message, first.index)
        return self


def merge_streams(*streams: EventStream) -> EventStream:
    """Stable time-merge; ties keep argument order."""
    if not streams:
        raise ValueError("nothing to merge")
    geometry = streams[0].geometry
    if any(s.geometry != geometry for s in streams):
        raise ValueError("cannot merge streams with different geometry")
    t = np.concatenate([s.t for s in streams])
    order = np.argsort(t, kind="stable")
    return EventStream(
        geometry,
        t[order],
        np.concatenate([s.x for s in streams])[order],
        np.concatenate([s.y for s in streams])[order],
        np.concatenate([s.pol for s in streams])[order],
    )


@dataclass(frozen=True)
class Violation:
    index: int
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_stream(stream: EventStream) -> ValidationReport:
    """Check ordering, bounds and polarity; report at most the first 100 violations."""
    g = stream.geometry
    n = len(stream)
    if n == 0:
        return ValidationReport()
    found: list[tuple[int, str]] = []

    def collect(mask: np.ndarray, msg: str, offset: int = 0):
        idx = np.flatnonzero(mask)[:MAX_VIOLATIONS] + offset
        found.extend((int(i), msg) for i in idx)

    collect(stream.t[1:] < stream.t[:-1], "timestamp order", offset=1)
    collect(stream.x >= g.width, "x out of bounds")
    collect(stream.y >= g.height, "y out of bounds")
    collect((stream.pol != 1) & (stream.pol != -1), "polarity not +1/-1")
    found.sort()
    return ValidationReport(
        tuple(Violation(i, f"{msg} at index {i}") for i, msg in found[:MAX_VIOLATIONS])
    )


def write_events(stream: EventStream, path) -> None:
    stream.checked()
    g = stream.geometry
    header = HEADER.pack(MAGIC, g.width, g.height, g.temporal_resolution_us, len(stream))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stream.records().tobytes())


def read_events(path) -> EventStream:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than header")
    magic, width, height, tres, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    try:
        geometry = SensorGeometry(width, height, tres)
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from None
    body = len(data) - HEADER_SIZE
    if body < count * RECORD_SIZE:
        raise TruncatedRecord(
            f"{path}: header declares {count} records, found {body // RECORD_SIZE} "
            f"(+{body % RECORD_SIZE} stray bytes)"
        )
    if body > count * RECORD_SIZE:
        raise MalformedHeader(f"{path}: {body - count * RECORD_SIZE} trailing bytes after records")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE)
    return EventStream.from_records(rec, geometry).checked()


def write_events_csv(stream: EventStream, path) -> None:
    stream.checked()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.pol.tolist()))


def read_events_csv(path, geometry: SensorGeometry | None = None) -> EventStream:
    geometry = geometry or SensorGeometry()
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise MalformedHeader(f"{path}: expected CSV header {','.join(CSV_HEADER)}")
        rows = [tuple(int(v) for v in row) for row in r if row]
    if not rows:
        return EventStream.empty(geometry)
    t, x, y, pol = (np.array(c, dtype=np.int64) for c in zip(*rows))
    if (t < 0).any() or (x < 0).any() or (y < 0).any():
        bad = int(np.flatnonzero((t < 0) | (x < 0) | (y < 0))[0])
        raise InvariantViolation(f"negative field at index {bad}", bad)
    return EventStream(geometry, t, x, y, pol).checked()

"""Sliding-window per-pixel event counts, advanced on a fixed 2 ms grid.

Windows are half-open, ``(t_c - t_h, t_c]``, and polarity is ignored.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .backend import get_kernels
from .events import EventStream, SensorGeometry

UPDATE_MS = 2
UPDATE_US = UPDATE_MS * 1000
ALLOWED_T_H_MS = (2, 10, 20, 30, 40, 50)


class EventOutOfBucket(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    t_h_ms: int = 40
    update_ms: int = UPDATE_MS

    def __post_init__(self):
        if self.update_ms != UPDATE_MS:
            raise ValueError(f"update period is fixed at {UPDATE_MS} ms")
        if self.t_h_ms <= 0 or self.t_h_ms % self.update_ms:
            raise ValueError(f"t_h_ms={self.t_h_ms} must be a positive multiple of {self.update_ms}")

    @property
    def n_buckets(self) -> int:
        return self.t_h_ms // self.update_ms

    @property
    def t_h_us(self) -> int:
        return self.t_h_ms * 1000


@dataclass(frozen=True, eq=False)
class CountFrame:
    geometry: SensorGeometry
    t_c_us: int
    counts: np.ndarray  # (height, width) uint32, read-only

    def __post_init__(self):
        c = np.ascontiguousarray(self.counts, dtype=np.uint32)
        if c.shape != self.geometry.shape:
            raise ValueError(f"counts shape {c.shape} != geometry {self.geometry.shape}")
        c = c.view()
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @classmethod
    def zeros(cls, geometry: SensorGeometry, t_c_us: int = 0) -> "CountFrame":
        return cls(geometry, t_c_us, np.zeros(geometry.shape, dtype=np.uint32))

    @property
    def total(self) -> int:
        return int(self.counts.sum(dtype=np.int64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountFrame):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.t_c_us == other.t_c_us
            and np.array_equal(self.counts, other.counts)
        )


def pixel_index(stream: EventStream, lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Flat row-major pixel indices (int64) of events ``lo:hi``."""
    w = stream.geometry.width
    return stream.y[lo:hi].astype(np.int64) * w + stream.x[lo:hi]


class WindowState:
    """Incremental window: a ring of per-2 ms buckets plus a running count grid.

    Each bucket keeps the flat pixel indices of its events (a sparse count
    grid), so an advance costs O(events entering + events leaving).
    """

    def __init__(self, config: WindowConfig, geometry: SensorGeometry | None = None,
                 t_c_us: int = 0, backend: str | None = None):
        self.config = config
        self.geometry = geometry or SensorGeometry()
        self.t_c_us = int(t_c_us)
        self._k = get_kernels(backend)
        self._running = np.zeros(self.geometry.n_pixels, dtype=np.uint32)
        empty = np.empty(0, dtype=np.int64)
        self._ring: deque[np.ndarray] = deque([empty] * config.n_buckets, maxlen=config.n_buckets)

    @property
    def running(self) -> np.ndarray:
        """Read-only view of the current counts, shape (height, width)."""
        v = self._running.reshape(self.geometry.shape).view()
        v.flags.writeable = False
        return v

    def bucket_grids(self) -> list[np.ndarray]:
        """Dense version of every bucket in the ring, oldest first."""
        n = self.geometry.n_pixels
        return [
            np.bincount(b, minlength=n).astype(np.uint32).reshape(self.geometry.shape)
            for b in self._ring
        ]

    def advance_indices(self, idx: np.ndarray) -> np.ndarray:
        """Advance by one bucket whose events have flat pixel indices ``idx``.

        Returns a read-only view of the running grid; it changes on the next
        advance, so copy it (or use :meth:`advance`) to keep a snapshot.
        """
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        oldest = self._ring[0]
        self._k.window_update(self._running, idx, oldest)
        self._ring.append(idx)
        self.t_c_us += UPDATE_US
        return self.running

    def advance(self, new_events: EventStream) -> CountFrame:
        if new_events.geometry != self.geometry:
            raise ValueError("event geometry does not match window geometry")
        if len(new_events):
            lo, hi = self.t_c_us, self.t_c_us + UPDATE_US
            t = new_events.t
            bad = np.flatnonzero((t <= lo) | (t > hi))
            if len(bad):
                i = int(bad[0])
                raise EventOutOfBucket(
                    f"event {i} at t={int(t[i])} us outside incoming bucket ({lo}, {hi}]"
                )
            if (t[1:] < t[:-1]).any():
                raise ValueError("new events are not time-ordered")
        self.advance_indices(pixel_index(new_events))
        return CountFrame(self.geometry, self.t_c_us, self._running.reshape(self.geometry.shape).copy())


def count_frame_oracle(stream: EventStream, t_c_us: int, t_h_ms: int) -> CountFrame:
    """Direct count of events with ``t_c - t_h < t <= t_c`` per pixel."""
    g = stream.geometry
    t = stream.t.astype(np.int64)
    sel = (t > t_c_us - t_h_ms * 1000) & (t <= t_c_us)
    counts = np.zeros(g.shape, dtype=np.uint32)
    np.add.at(counts, (stream.y[sel].astype(np.intp), stream.x[sel].astype(np.intp)), 1)
    return CountFrame(g, t_c_us, counts)


def frame_times(stream: EventStream, t_start_us: int | None = None,
                t_end_us: int | None = None) -> np.ndarray:
    """Frame end times on the 2 ms grid covering ``[t_start, t_end]``.

    The first frame is the first grid point >= start (and >= 2 ms), the last
    is the first grid point >= end. Defaults come from the first/last event.
    """
    if t_start_us is None:
        if not len(stream):
            return np.empty(0, dtype=np.int64)
        t_start_us = int(stream.t[0])
    if t_end_us is None:
        if not len(stream):
            return np.empty(0, dtype=np.int64)
        t_end_us = int(stream.t[-1])
    first = max(UPDATE_US, -(-t_start_us // UPDATE_US) * UPDATE_US)
    last = max(first, -(-t_end_us // UPDATE_US) * UPDATE_US)
    return np.arange(first, last + 1, UPDATE_US, dtype=np.int64)


def bucket_bounds(stream: EventStream, times: np.ndarray) -> np.ndarray:
    """Index boundaries so that bucket k holds events ``bounds[k]:bounds[k+1]``,
    i.e. those in ``(times[k] - 2 ms, times[k]]``."""
    edges = np.concatenate([[times[0] - UPDATE_US], times]) if len(times) else np.empty(0, np.int64)
    bounds = np.searchsorted(stream.t, np.maximum(edges, 0).astype(np.uint64), side="right")
    bounds[edges < 0] = 0
    return bounds


def iter_windows(stream: EventStream, configs, t_start_us: int | None = None,
                 t_end_us: int | None = None, backend: str | None = None
                 ) -> Iterator[tuple[int, list[np.ndarray]]]:
    """Advance one :class:`WindowState` per config in lockstep.

    Yields ``(t_c_us, [running view per config])``; views are only valid
    until the next iteration.
    """
    times = frame_times(stream, t_start_us, t_end_us)
    if not len(times):
        return
    configs = list(configs)
    # prime with history preceding the first emitted frame
    n_prime = 0
    if len(stream) and int(stream.t[0]) <= int(times[0]) - UPDATE_US:
        longest = max(c.n_buckets for c in configs)
        # grid point 0 closes the bucket (-2 ms, 0] that holds events at t = 0
        first_grid = -(-int(stream.t[0]) // UPDATE_US) * UPDATE_US
        n_prime = min(longest - 1, (int(times[0]) - first_grid) // UPDATE_US)
    if n_prime > 0:
        prime = np.arange(int(times[0]) - n_prime * UPDATE_US, int(times[0]), UPDATE_US, dtype=np.int64)
        times = np.concatenate([prime, times])
    bounds = bucket_bounds(stream, times)
    states = [WindowState(c, stream.geometry, int(times[0]) - UPDATE_US, backend) for c in configs]
    for k, t_c in enumerate(times):
        idx = pixel_index(stream, bounds[k], bounds[k + 1])
        views = [s.advance_indices(idx) for s in states]
        if k >= n_prime:
            yield int(t_c), views


def stream_to_frames(stream: EventStream, config: WindowConfig, t_start_us: int | None = None,
                     t_end_us: int | None = None, backend: str | None = None
                     ) -> list[tuple[int, CountFrame]]:
    g = stream.geometry
    return [
        (t_c, CountFrame(g, t_c, views[0].copy()))
        for t_c, views in iter_windows(stream, [config], t_start_us, t_end_us, backend)
    ]

"""Synthetic event-camera tactile sensor.

A marker-grid scene is deformed by a scripted press / slip / release
sequence, rendered with area-weighted rectangles, and turned into events by
a per-pixel log-intensity threshold model. Background and hot-pixel noise
are merged in afterwards.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .backend import get_kernels
from .events import EventStream, SensorGeometry, merge_streams, read_events, write_events
from .stages import GraspStage

BLACK = 0.05
WHITE = 1.0
LOG_BLACK = math.log(BLACK)
LOG_WHITE = math.log(WHITE)

# phase script, milliseconds
IDLE_MS = 500
RAMP_MS = 300
HOLD_MS = 200
SLIP_MS = 400
POST_MS = 200
CREEP = 0.1  # extra inset gained over the hold, fraction of press depth
# stick-slip release: shear stored during the hold snaps free at slip onset,
# adding SLIP_RELEASE_MS worth of travel with time constant SLIP_RELEASE_TAU_MS
SLIP_RELEASE_MS = 15.0
SLIP_RELEASE_TAU_MS = 4.0
PRESS_ONSET_MS = IDLE_MS
SLIP_ONSET_MS = IDLE_MS + RAMP_MS + HOLD_MS
RELEASE_MS = SLIP_ONSET_MS + SLIP_MS
RUN_MS = RELEASE_MS + POST_MS


class OutOfBounds(ValueError):
    pass


class GeometryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def moved(self, dx: float, dy: float, inset: float = 0.0) -> "Rect":
        return Rect(self.x0 + dx + inset, self.y0 + dy + inset, self.x1 + dx - inset, self.y1 + dy - inset)

    def expanded(self, mx: float, my: float | None = None) -> "Rect":
        my = mx if my is None else my
        return Rect(self.x0 - mx, self.y0 - my, self.x1 + mx, self.y1 + my)

    def overlaps(self, other: "Rect") -> bool:
        return self.x0 < other.x1 and other.x0 < self.x1 and self.y0 < other.y1 and other.y0 < self.y1


@dataclass(frozen=True)
class MarkerPair:
    """Black top rectangle stacked on a slightly larger white base."""

    top: Rect
    base: Rect
    strip: int


@dataclass(frozen=True)
class MarkerLayout:
    geometry: SensorGeometry
    pairs: tuple[MarkerPair, ...]

    def __post_init__(self):
        g = self.geometry
        for i, p in enumerate(self.pairs):
            for r in (p.top, p.base):
                if r.x0 < 0 or r.y0 < 0 or r.x1 > g.width or r.y1 > g.height:
                    raise OutOfBounds(f"marker {i} outside the frame")
        for i, a in enumerate(self.pairs):
            for b in self.pairs[i + 1:]:
                if a.base.overlaps(b.base):
                    raise ValueError("markers overlap at rest")

    @classmethod
    def default(cls, geometry: SensorGeometry | None = None) -> "MarkerLayout":
        """Nine marker pairs over six horizontal strips (2,1,2,1,2,1)."""
        g = geometry or SensorGeometry()
        sx, sy = g.width / 640.0, g.height / 480.0
        half_w, half_h, base_margin = 50.0 * sx, 15.0 * sy, 3.0
        pairs = []
        for strip, n in enumerate((2, 1, 2, 1, 2, 1)):
            yc = g.height * (strip + 1) / 7.0
            xs = (190.0 * sx, 450.0 * sx) if n == 2 else (320.0 * sx,)
            for xc in xs:
                top = Rect(xc - half_w, yc - half_h, xc + half_w, yc + half_h)
                pairs.append(MarkerPair(top, top.expanded(base_margin), strip))
        return cls(g, tuple(pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def centers(self) -> np.ndarray:
        return np.array([((p.top.x0 + p.top.x1) / 2, (p.top.y0 + p.top.y1) / 2) for p in self.pairs])


def zero_deformation(layout: MarkerLayout) -> np.ndarray:
    """Per-marker ``[dx, dy, inset]`` in pixels."""
    return np.zeros((len(layout), 3))


def deformed_rects(layout: MarkerLayout, deformation) -> list[tuple[Rect, Rect]]:
    d = np.asarray(deformation, dtype=np.float64).reshape(len(layout), 3)
    out = []
    for p, (dx, dy, inset) in zip(layout.pairs, d):
        top = p.top.moved(dx, dy, inset)
        if top.x1 <= top.x0 or top.y1 <= top.y0:
            raise ValueError("inset collapses a marker")
        out.append((p.base.moved(dx, dy), top))
    return out


def check_bounds(layout: MarkerLayout, deformation) -> None:
    g = layout.geometry
    for i, (base, top) in enumerate(deformed_rects(layout, deformation)):
        for r in (base, top):
            if r.x0 < 0 or r.y0 < 0 or r.x1 > g.width or r.y1 > g.height:
                raise OutOfBounds(f"marker {i} leaves the frame under deformation")


def _coverage(a: float, b: float, start: int, n: int) -> np.ndarray:
    lo = np.arange(start, start + n, dtype=np.float64)
    return np.clip(np.minimum(b, lo + 1.0) - np.maximum(a, lo), 0.0, 1.0)


def render_region(rects: Iterable[tuple[Rect, Rect]], y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    """Linear intensity of the pixel block ``[y0:y1, x0:x1]``."""
    img = np.full((y1 - y0, x1 - x0), WHITE)
    for base, top in rects:
        for r, level in ((base, WHITE), (top, BLACK)):
            if r.x1 <= x0 or r.x0 >= x1 or r.y1 <= y0 or r.y0 >= y1:
                continue
            ra, rb = max(int(math.floor(r.y0)), y0), min(int(math.ceil(r.y1)), y1)
            ca, cb = max(int(math.floor(r.x0)), x0), min(int(math.ceil(r.x1)), x1)
            cov = np.outer(_coverage(r.y0, r.y1, ra, rb - ra), _coverage(r.x0, r.x1, ca, cb - ca))
            blk = img[ra - y0:rb - y0, ca - x0:cb - x0]
            blk *= 1.0 - cov
            blk += level * cov
    return img


def render_scene(layout: MarkerLayout, deformation=None) -> np.ndarray:
    """Log-intensity image (height, width) of the deformed marker layout."""
    if deformation is None:
        deformation = zero_deformation(layout)
    check_bounds(layout, deformation)
    g = layout.geometry
    return np.log(render_region(deformed_rects(layout, deformation), 0, g.height, 0, g.width))


@dataclass(frozen=True)
class CameraModel:
    threshold: float = 0.2
    refractory_us: int = 200

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.refractory_us < 0:
            raise ValueError("refractory period must be non-negative")


class PixelArray:
    """Threshold-crossing state for a block of pixels (any array shape).

    With a refractory period each eligible pixel fires at most one event per
    tick and the unconsumed change stays in the reference level; with no
    refractory period all ``floor(|dL| / C)`` events fire at once.
    """

    def __init__(self, log_image: np.ndarray, camera: CameraModel, tick_us: int,
                 backend: str | None = None):
        self.shape = np.shape(log_image)
        self.ref = np.array(log_image, dtype=np.float64).reshape(-1)
        self.camera = camera
        self.tick_us = tick_us
        self.last_fire = np.full(self.ref.shape, np.iinfo(np.int64).min // 2, dtype=np.int64)
        self.pending = False
        self._k = get_kernels(backend)

    def step(self, log_image: np.ndarray, t_us: int):
        """Returns ``(index tuple, pol, events per firing pixel)`` for this tick."""
        flat = np.ascontiguousarray(log_image, dtype=np.float64).reshape(-1)
        idx, pol, k, self.pending = self._k.dvs_step(
            flat, self.ref, self.last_fire, float(self.camera.threshold),
            int(self.camera.refractory_us), int(t_us))
        return np.unravel_index(idx, self.shape), pol, k


def generate_events(images, camera: CameraModel | None = None,
                    geometry: SensorGeometry | None = None, backend: str | None = None) -> EventStream:
    """Events from a log-intensity image sequence sampled every camera tick.

    The first image sets the reference; image ``k`` is stamped ``k * tick``.
    """
    camera = camera or CameraModel()
    geometry = geometry or SensorGeometry()
    tick = geometry.temporal_resolution_us
    pixels = None
    chunks = []
    for k, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != geometry.shape:
            raise GeometryMismatch(f"image {k} has shape {img.shape}, expected {geometry.shape}")
        if pixels is None:
            pixels = PixelArray(img, camera, tick, backend)
            continue
        out = pixels.step(img, k * tick)
        if len(out[2]):
            chunks.append(_emit(out, k * tick, 0, 0))
    return _assemble(chunks, geometry)


def _emit(step_out, t_us: int, y0, x0):
    where, pol, k = step_out
    if len(where) == 3:  # (window, row, col) from a stacked block
        w, rows, cols = where
        y0, x0 = y0[w], x0[w]
    else:
        rows, cols = where
    if len(k) and k.max() > 1:
        rows, cols, pol = np.repeat(rows, k), np.repeat(cols, k), np.repeat(pol, k)
    return np.full(len(rows), t_us, dtype=np.uint64), cols + x0, rows + y0, pol


def _assemble(chunks, geometry: SensorGeometry) -> EventStream:
    if not chunks:
        return EventStream.empty(geometry)
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    return EventStream(geometry, t, x, y, p)


@dataclass(frozen=True)
class NoiseModel:
    background_rate: float = 10.0  # events / s / pixel
    hot_pixels: int = 20
    hot_multiplier: float = 400.0  # hot rate = multiplier * background rate

    def __post_init__(self):
        if self.background_rate < 0 or self.hot_pixels < 0 or self.hot_multiplier < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.hot_pixels and self.hot_rate > 0 and self.hot_rate * 2e-3 <= 5.0:
            raise ValueError(
                f"hot-pixel rate {self.hot_rate:g}/s gives <= 5 events per 2 ms; "
                "hot pixels must outpace active pixels by 5x"
            )

    @property
    def hot_rate(self) -> float:
        return self.background_rate * self.hot_multiplier


def add_noise(stream: EventStream, noise: NoiseModel, seed: int,
              duration_us: int | None = None) -> EventStream:
    """Merge Poisson background events and hot-pixel trains into ``stream``.

    Noise covers ``(0, duration_us]``; the default duration is the last
    event time.
    """
    g = stream.geometry
    if duration_us is None:
        duration_us = int(stream.t[-1]) if len(stream) else 0
    bg_ss, hot_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(bg_ss)
    parts = [stream]
    secs = duration_us / 1e6
    if noise.background_rate > 0 and duration_us > 0:
        n = int(rng.poisson(noise.background_rate * g.n_pixels * secs))
        parts.append(EventStream(
            g,
            rng.integers(1, duration_us + 1, n),
            rng.integers(0, g.width, n),
            rng.integers(0, g.height, n),
            rng.integers(0, 2, n, dtype=np.int8) * 2 - 1,
        ))
    if noise.hot_pixels and noise.hot_rate > 0 and duration_us > 0:
        rng = np.random.default_rng(hot_ss)
        where = rng.choice(g.n_pixels, size=noise.hot_pixels, replace=False)
        counts = rng.poisson(noise.hot_rate * secs, size=noise.hot_pixels)
        idx = np.repeat(where, counts)
        n = len(idx)
        parts.append(EventStream(
            g,
            rng.integers(1, duration_us + 1, n),
            idx % g.width,
            idx // g.width,
            rng.integers(0, 2, n, dtype=np.int8) * 2 - 1,
        ))
    if len(parts) == 1:
        return stream
    return merge_streams(*parts)


def hot_pixel_positions(noise: NoiseModel, seed: int, geometry: SensorGeometry) -> np.ndarray:
    """Flat indices of the hot pixels :func:`add_noise` places for ``seed``."""
    _, hot_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(hot_ss).choice(geometry.n_pixels, size=noise.hot_pixels, replace=False)


def press_curve(depth: float, t_ms: float) -> float:
    """Ease-out ramp to ``depth`` over the ramp, then a slow creep during the hold."""
    if t_ms <= 0:
        return 0.0
    if t_ms <= RAMP_MS:
        u = t_ms / RAMP_MS
        return depth * (1.0 - (1.0 - u) ** 2)
    tau = min(t_ms - RAMP_MS, HOLD_MS)
    return depth * (1.0 + CREEP * tau / HOLD_MS)


def slip_travel(velocity: float, t_ms: float) -> float:
    """Tangential travel t_ms into the slip: steady sliding plus the stick-slip release."""
    if t_ms <= 0:
        return 0.0
    return velocity * (t_ms + SLIP_RELEASE_MS * (1.0 - math.exp(-t_ms / SLIP_RELEASE_TAU_MS)))


@dataclass(frozen=True)
class ObjectProfile:
    name: str
    footprint: tuple[tuple[int, float], ...]  # (marker index, press weight)
    press_depth: float  # px of inset at the end of the ramp, full-weight marker
    slip_velocity: float  # px / ms along x
    slip_direction: int = 1
    irregularity: float = 0.05  # jitter amplitude, px
    background_rate: float | None = None
    hot_pixels: int | None = None
    hot_multiplier: float | None = None

    def __post_init__(self):
        if self.press_depth < 0 or self.slip_velocity < 0 or self.irregularity < 0:
            raise ValueError("profile magnitudes must be non-negative")
        if self.slip_direction not in (1, -1):
            raise ValueError("slip_direction must be +1 or -1")

    @property
    def has_contact(self) -> bool:
        return bool(self.footprint) and (self.press_depth > 0 or self.slip_velocity > 0)

    def press_displacement(self, t_ms: float) -> float:
        """Commanded inset (px) ``t_ms`` after press onset; monotone over the press phase."""
        return press_curve(self.press_depth, t_ms)

    def noise_model(self, base: NoiseModel | None = None) -> NoiseModel:
        base = base or NoiseModel()
        return NoiseModel(
            base.background_rate if self.background_rate is None else self.background_rate,
            base.hot_pixels if self.hot_pixels is None else self.hot_pixels,
            base.hot_multiplier if self.hot_multiplier is None else self.hot_multiplier,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["footprint"] = [[i, w] for i, w in self.footprint]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectProfile":
        d = dict(d)
        d["footprint"] = tuple((int(i), float(w)) for i, w in d["footprint"])
        return cls(**d)


def footprint_around(layout: MarkerLayout, cx: float, cy: float, radius: float) -> tuple[tuple[int, float], ...]:
    """Markers whose centre lies within ``radius``; weight falls from 1 to 0.5 at the rim."""
    out = []
    for i, (mx, my) in enumerate(layout.centers()):
        dist = math.hypot(mx - cx, my - cy)
        if dist <= radius:
            out.append((i, round(1.0 - 0.5 * dist / radius, 4)))
    return tuple(out)


# name, contact centre, radius, depth, slip velocity, direction, irregularity, noise overrides
# Background activity of the enclosed, lit skin is ~1 event/s/pixel; hot pixels keep
# 4000 events/s (the NoiseModel default rate) whatever the background.
_QUIET = {"background_rate": 1.0, "hot_multiplier": 4000.0}
_SUITE = (
    ("compact_light", (320, 240), 110, 7.0, 0.15, 1, 0.3, _QUIET),
    ("broad_heavy", (320, 240), 260, 11.0, 0.12, 1, 0.3, _QUIET),
    ("compact_fast", (320, 190), 120, 8.0, 0.30, -1, 0.3, _QUIET),
    ("broad_slow", (320, 260), 250, 10.0, 0.08, -1, 0.3, _QUIET),
    ("rough_small", (250, 200), 150, 7.0, 0.18, 1, 0.8, _QUIET),
    ("rough_large", (320, 240), 280, 9.0, 0.18, 1, 0.7, _QUIET),
    ("smooth_offset", (400, 270), 180, 9.0, 0.20, -1, 0.1, _QUIET),
    ("noisy_medium", (320, 240), 180, 9.0, 0.18, 1, 0.3,
     {"background_rate": 2.0, "hot_pixels": 40, "hot_multiplier": 2000.0}),
    ("quiet_medium", (320, 240), 180, 9.0, 0.18, -1, 0.3,
     {"background_rate": 0.5, "hot_pixels": 10, "hot_multiplier": 8000.0}),
    ("irregular_curved", (300, 220), 200, 10.0, 0.16, 1, 1.0, _QUIET),
)


def make_object_suite(seed: int = 0, layout: MarkerLayout | None = None) -> list[ObjectProfile]:
    """Ten profiles spanning footprint size, slip speed, irregularity and noise.

    The seed perturbs depth, speed and irregularity by up to +-5%.
    """
    layout = layout or MarkerLayout.default()
    rng = np.random.default_rng(seed)
    suite = []
    for name, (cx, cy), radius, depth, vel, direction, irr, noise in _SUITE:
        f = rng.uniform(0.95, 1.05, size=3)
        suite.append(ObjectProfile(
            name=name,
            footprint=footprint_around(layout, cx, cy, radius),
            press_depth=round(depth * f[0], 4),
            slip_velocity=round(vel * f[1], 5),
            slip_direction=direction,
            irregularity=round(irr * f[2], 4),
            **noise,
        ))
    return suite


@dataclass(frozen=True, eq=False)
class SimRun:
    stream: EventStream
    timeline: tuple[tuple[int, GraspStage], ...]
    profile: ObjectProfile
    seed: int
    duration_us: int
    run_index: int = 0
    signal_events: int = 0  # events from the scene, before noise

    @property
    def name(self) -> str:
        return f"run_{self.profile.name}_{self.run_index}"


@dataclass
class _Motion:
    """Per-run draws that turn a profile into a deformation script."""

    profile: ObjectProfile
    layout: MarkerLayout
    depth: float
    velocity: float
    freqs: np.ndarray = field(repr=False)  # (markers, 2 axes, 3) Hz
    phases: np.ndarray = field(repr=False)
    amps: np.ndarray = field(repr=False)

    @classmethod
    def draw(cls, profile: ObjectProfile, layout: MarkerLayout, rng: np.random.Generator) -> "_Motion":
        n = len(layout)
        return cls(
            profile,
            layout,
            depth=profile.press_depth * rng.uniform(0.9, 1.1),
            velocity=profile.slip_velocity * rng.uniform(0.9, 1.1),
            freqs=rng.uniform(15.0, 60.0, size=(n, 2, 3)),
            phases=rng.uniform(0.0, 2 * math.pi, size=(n, 2, 3)),
            amps=rng.uniform(0.5, 1.0, size=(n, 2, 3)) / 3.0,
        )

    def deformation(self, t_ms: float) -> np.ndarray:
        p = self.profile
        d = zero_deformation(self.layout)
        if not p.has_contact or t_ms <= PRESS_ONSET_MS or t_ms > RELEASE_MS:
            return d
        tp = t_ms - PRESS_ONSET_MS
        inset = press_curve(self.depth, tp)
        envelope = inset / self.depth if self.depth > 0 and tp < RAMP_MS else 1.0
        slide = 0.0
        if t_ms > SLIP_ONSET_MS:
            slide = p.slip_direction * slip_travel(self.velocity, t_ms - SLIP_ONSET_MS)
        idx = np.array([i for i, _ in p.footprint], dtype=np.intp)
        w = np.array([wt for _, wt in p.footprint])
        d[idx, 2] = w * inset
        d[idx, 0] = slide
        if p.irregularity > 0:
            t_s = t_ms / 1000.0
            wave = (self.amps[idx] * np.sin(2 * math.pi * self.freqs[idx] * t_s + self.phases[idx])).sum(axis=2)
            d[idx, :2] += p.irregularity * envelope * wave
        return d

    def travel_margin(self) -> tuple[float, float]:
        p = self.profile
        return slip_travel(abs(self.velocity), SLIP_MS) + p.irregularity + 2.0, p.irregularity + 2.0


def _marker_window(layout: MarkerLayout, i: int, motion: _Motion) -> tuple[int, int, int, int]:
    g = layout.geometry
    mx, my = motion.travel_margin()
    r = layout.pairs[i].base.expanded(mx, my)
    return (max(0, int(math.floor(r.y0))), min(g.height, int(math.ceil(r.y1))),
            max(0, int(math.floor(r.x0))), min(g.width, int(math.ceil(r.x1))))


def _active_windows(layout: MarkerLayout, motion: _Motion) -> list[tuple[int, int, int, int]]:
    """Pixel blocks that can ever change during the run, merged where they touch."""
    boxes = [list(_marker_window(layout, i, motion)) for i, _ in motion.profile.footprint]
    merged = True
    while merged:
        merged = False
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                A, B = boxes[a], boxes[b]
                if A[0] < B[1] and B[0] < A[1] and A[2] < B[3] and B[2] < A[3]:
                    boxes[a] = [min(A[0], B[0]), max(A[1], B[1]), min(A[2], B[2]), max(A[3], B[3])]
                    del boxes[b]
                    merged = True
                    break
            if merged:
                break
    return [tuple(b) for b in sorted(boxes)]


def _timeline(profile: ObjectProfile) -> tuple[tuple[int, GraspStage], ...]:
    tl = [(0, GraspStage.IDLE)]
    if profile.has_contact:
        tl += [
            (PRESS_ONSET_MS * 1000, GraspStage.PRESS),
            (SLIP_ONSET_MS * 1000, GraspStage.SLIP),
            (RELEASE_MS * 1000, GraspStage.IDLE),
        ]
    return tuple(tl)


class _StackedRenderer:
    """Renders one equally sized pixel block per contacted marker in a single pass.

    Valid only when no other marker reaches into a block; the arithmetic is
    the same as :func:`render_region` so both paths agree bit for bit.
    """

    def __init__(self, layout: MarkerLayout, markers: list[int], windows):
        g = layout.geometry
        h = max(w[1] - w[0] for w in windows)
        w_ = max(w[3] - w[2] for w in windows)
        self.markers = np.array(markers, dtype=np.intp)
        self.y0 = np.array([min(w[0], g.height - h) for w in windows], dtype=np.int64)
        self.x0 = np.array([min(w[2], g.width - w_) for w in windows], dtype=np.int64)
        self.rows = self.y0[:, None] + np.arange(h)
        self.cols = self.x0[:, None] + np.arange(w_)
        self.rows_f = self.rows.astype(np.float64)
        self.cols_f = self.cols.astype(np.float64)
        self.rects = {
            which: np.array([[getattr(layout.pairs[m], which).x0, getattr(layout.pairs[m], which).y0,
                              getattr(layout.pairs[m], which).x1, getattr(layout.pairs[m], which).y1]
                             for m in markers])
            for which in ("base", "top")
        }

    @classmethod
    def fits(cls, layout: MarkerLayout, markers, windows) -> bool:
        for m, (y0, y1, x0, x1) in zip(markers, windows):
            block = Rect(x0, y0, x1, y1)
            for j, p in enumerate(layout.pairs):
                if j != m and p.base.expanded(1.0).overlaps(block):
                    return False
        return len(set(markers)) == len(markers)

    def _cov(self, a, b, lo):
        return np.clip(np.minimum(b[:, None], lo + 1.0) - np.maximum(a[:, None], lo), 0.0, 1.0)

    def render(self, layout: MarkerLayout, deformation: np.ndarray) -> np.ndarray:
        img = np.full((len(self.markers), self.rows.shape[1], self.cols.shape[1]), WHITE)
        d = deformation[self.markers]
        for which, level in (("base", WHITE), ("top", BLACK)):
            r = self.rects[which]
            inset = d[:, 2] if which == "top" else 0.0
            x0 = r[:, 0] + d[:, 0] + inset
            y0 = r[:, 1] + d[:, 1] + inset
            x1 = r[:, 2] + d[:, 0] - inset
            y1 = r[:, 3] + d[:, 1] - inset
            cov = self._cov(y0, y1, self.rows_f)[:, :, None] * self._cov(x0, x1, self.cols_f)[:, None, :]
            img *= 1.0 - cov
            img += level * cov
        return img


def simulate_signal(profile: ObjectProfile, layout: MarkerLayout, camera: CameraModel,
                    rng: np.random.Generator, duration_ms: int = RUN_MS,
                    backend: str | None = None) -> EventStream:
    g = layout.geometry
    tick = g.temporal_resolution_us
    if not profile.has_contact:
        return EventStream.empty(g)
    motion = _Motion.draw(profile, layout, rng)
    markers = [i for i, _ in profile.footprint]
    per_marker = [_marker_window(layout, i, motion) for i in markers]
    rest = zero_deformation(layout)
    if _StackedRenderer.fits(layout, markers, per_marker):
        stacked = _StackedRenderer(layout, markers, per_marker)
        arrays = [PixelArray(np.log(stacked.render(layout, rest)), camera, tick, backend)]
        origins = [(stacked.y0, stacked.x0)]

        def render_all(d):
            return [np.log(stacked.render(layout, d))]
    else:
        windows = _active_windows(layout, motion)
        rest_rects = deformed_rects(layout, rest)
        arrays = [PixelArray(np.log(render_region(rest_rects, *w)), camera, tick, backend) for w in windows]
        origins = [(w[0], w[2]) for w in windows]

        def render_all(d):
            rects = deformed_rects(layout, d)
            return [np.log(render_region(rects, *w)) for w in windows]

    chunks = []
    prev = rest
    imgs = None
    n_ticks = duration_ms * 1000 // tick
    for k in range(1, n_ticks + 1):
        t_us = k * tick
        d = motion.deformation(t_us / 1000.0)
        moved = not np.array_equal(d, prev)
        if not moved and not any(a.pending for a in arrays):
            continue
        if moved or imgs is None:
            check_bounds(layout, d)
            imgs = render_all(d)
            prev = d
        for img, arr, (y0, x0) in zip(imgs, arrays, origins):
            out = arr.step(img, t_us)
            if len(out[2]):
                chunks.append(_emit(out, t_us, y0, x0))
    return _assemble(chunks, g)


def run_seeds(seed: int, run_index: int) -> tuple[np.random.SeedSequence, int]:
    """(motion seed sequence, integer noise seed) of one run; the two streams are independent."""
    motion_seed, noise_seed = np.random.SeedSequence([seed, run_index]).spawn(2)
    return motion_seed, int(np.random.default_rng(noise_seed).integers(2**63))


def simulate_run(profile: ObjectProfile, layout: MarkerLayout | None = None,
                 camera: CameraModel | None = None, noise: NoiseModel | None = None,
                 seed: int = 0, run_index: int = 0, backend: str | None = None) -> SimRun:
    """One press -> slip -> release run with exact ground-truth change points.

    ``noise`` defaults to the profile's noise model; pass ``NoiseModel(0, 0)``
    for a clean stream.
    """
    layout = layout or MarkerLayout.default()
    camera = camera or CameraModel()
    noise = noise if noise is not None else profile.noise_model()
    motion_seed, noise_int = run_seeds(seed, run_index)
    signal = simulate_signal(profile, layout, camera, np.random.default_rng(motion_seed), backend=backend)
    duration_us = RUN_MS * 1000
    stream = add_noise(signal, noise, noise_int, duration_us=duration_us)
    return SimRun(stream, _timeline(profile), profile, seed, duration_us, run_index, len(signal))


def write_run_bundle(run: SimRun, root) -> Path:
    """``run_<object>_<index>/`` with ``events.evt1``, ``timeline.csv``, ``profile.json``."""
    d = Path(root) / run.name
    d.mkdir(parents=True, exist_ok=True)
    write_events(run.stream, d / "events.evt1")
    with open(d / "timeline.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_us", "stage"])
        w.writerows((t, GraspStage(s).label) for t, s in run.timeline)
    meta = {
        "profile": run.profile.to_dict(),
        "seed": run.seed,
        "run_index": run.run_index,
        "duration_us": run.duration_us,
        "signal_events": run.signal_events,
    }
    (d / "profile.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_timeline(path) -> tuple[tuple[int, GraspStage], ...]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r, None) != ["t_us", "stage"]:
            raise ValueError(f"{path}: expected header t_us,stage")
        tl = tuple((int(t), GraspStage.parse(s)) for t, s in r if t)
    if any(b[0] <= a[0] for a, b in zip(tl, tl[1:])):
        raise ValueError(f"{path}: change points not strictly increasing")
    return tl


def read_run_bundle(path) -> SimRun:
    d = Path(path)
    meta = json.loads((d / "profile.json").read_text())
    return SimRun(
        read_events(d / "events.evt1"),
        read_timeline(d / "timeline.csv"),
        ObjectProfile.from_dict(meta["profile"]),
        int(meta["seed"]),
        int(meta["duration_us"]),
        int(meta["run_index"]),
        int(meta.get("signal_events", 0)),
    )

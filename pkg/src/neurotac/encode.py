"""Count frame -> 128x96 heatmap.

Pipeline: hot-pixel penalization ``D = E * s(E, b)`` with
``s(E, b) = 1 / (1 + exp(E - b))`` and ``b`` the mean count over triggered
pixels, then a linear remap so the frame maximum becomes 255, then a 5x5
block mean and round-half-up quantization.

Counts are integers, so the penalized value depends only on the count. The
fast path builds a lookup table over the count histogram and lets the kernel
backend do the gather + block sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import get_kernels
from .events import SensorGeometry
from .windowing import CountFrame

DOWNSAMPLE = 5
HEATMAP_WIDTH = 128
HEATMAP_HEIGHT = 96


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DenoisedFrame:
    geometry: SensorGeometry
    t_c_us: int
    values: np.ndarray  # (height, width) float64


@dataclass(frozen=True, eq=False)
class Heatmap:
    t_c_us: int
    values: np.ndarray  # (96, 128) uint8

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Heatmap):
            return NotImplemented
        return self.t_c_us == other.t_c_us and np.array_equal(self.values, other.values)


def penalty(e, b: float):
    """Penalization factor in (0, 1); 0.5 at ``e == b``, strictly decreasing in ``e``."""
    return 1.0 / (1.0 + np.exp(np.asarray(e, dtype=np.float64) - b))


def mean_nonzero(frame: CountFrame) -> float:
    c = frame.counts
    nz = np.count_nonzero(c)
    if nz == 0:
        return 0.0
    return float(c.sum(dtype=np.int64)) / nz


def sigmoid_penalize(frame: CountFrame) -> DenoisedFrame:
    b = mean_nonzero(frame)
    e = frame.counts.astype(np.float64)
    return DenoisedFrame(frame.geometry, frame.t_c_us, e * penalty(e, b))


def remap_to_255(frame: DenoisedFrame) -> DenoisedFrame:
    v = frame.values
    peak = float(v.max()) if v.size else 0.0
    if peak <= 0.0:
        out = np.zeros_like(v, dtype=np.float64)
    else:
        out = v / peak * 255.0
    return DenoisedFrame(frame.geometry, frame.t_c_us, out)


def block_mean(values: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    h, w = values.shape
    if h % factor or w % factor:
        raise DimensionMismatch(f"{w}x{h} frame is not divisible by {factor}")
    return values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def quantize(values: np.ndarray) -> np.ndarray:
    """Round half up, clamp to [0, 255], uint8."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def downsample_5x(frame: DenoisedFrame | np.ndarray, t_c_us: int | None = None) -> Heatmap:
    if isinstance(frame, DenoisedFrame):
        values, t_c_us = frame.values, frame.t_c_us
    else:
        values = np.asarray(frame, dtype=np.float64)
    return Heatmap(int(t_c_us or 0), quantize(block_mean(values)))


@dataclass(frozen=True)
class EncodeStages:
    b: float
    peak: float  # max penalized value, 0 for an empty frame
    scaled_lut: np.ndarray  # remapped value per count
    block_means: np.ndarray  # pre-quantization heatmap (96, 128)
    heatmap: np.ndarray  # uint8 (96, 128)


def _encode_counts(counts: np.ndarray, backend: str | None = None) -> EncodeStages:
    k = get_kernels(backend)
    h, w = counts.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionMismatch(f"{w}x{h} frame is not divisible by {DOWNSAMPLE}")
    counts = np.ascontiguousarray(counts, dtype=np.uint32)
    hist = k.count_histogram(counts.reshape(-1))
    levels = np.arange(len(hist), dtype=np.float64)
    nz = int(hist[1:].sum())
    if nz == 0:
        lut = np.zeros(len(hist), dtype=np.float64)
        means = np.zeros((h // DOWNSAMPLE, w // DOWNSAMPLE), dtype=np.float64)
        return EncodeStages(0.0, 0.0, lut, means, np.zeros(means.shape, dtype=np.uint8))
    b = float(int(np.dot(np.arange(len(hist), dtype=np.int64), hist))) / nz
    dvals = levels * penalty(levels, b)
    peak = float(dvals[hist > 0].max())
    scaled = dvals / peak * 255.0
    means = k.block_means(counts, scaled, DOWNSAMPLE)
    return EncodeStages(b, peak, scaled, means, k.quantize(means))


def encode_stages(frame: CountFrame, backend: str | None = None) -> EncodeStages:
    return _encode_counts(frame.counts, backend)


def encode_counts(counts: np.ndarray, t_c_us: int = 0, backend: str | None = None) -> Heatmap:
    return Heatmap(int(t_c_us), _encode_counts(counts, backend).heatmap)


def encode(frame: CountFrame, backend: str | None = None) -> Heatmap:
    return encode_counts(frame.counts, frame.t_c_us, backend)


def write_pgm(heatmap: Heatmap, out_dir) -> Path:
    """Binary 8-bit PGM, ``heatmap_<t_c_us>.pgm``."""
    path = Path(out_dir) / f"heatmap_{heatmap.t_c_us}.pgm"
    h, w = heatmap.values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(heatmap.values, dtype=np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)

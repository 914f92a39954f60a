"""Labeled heatmap datasets built from simulated runs.

Samples are held column-wise in :class:`SampleSet` (uint8 heatmaps plus
per-sample stage, time, run and object) so a few thousand of them stay cheap.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encode import HEATMAP_HEIGHT, HEATMAP_WIDTH, Heatmap, encode_counts
from .sim import SimRun
from .stages import GraspStage
from .windowing import UPDATE_US, WindowConfig, iter_windows

INCIDENT_LIMIT_US = 500_000
SMP_MAGIC = b"SMP1"
SMP_VERSION = 1
SMP_HEADER = struct.Struct("<4sHI")
SMP_DTYPE = np.dtype([("t_c_us", "<u8"), ("stage", "u1"), ("heatmap", "u1", (HEATMAP_HEIGHT, HEATMAP_WIDTH))])
MANIFEST_HEADER = ["object", "run_id", "split", "events_path", "timeline_path"]

__all__ = ["GraspStage", "LabeledSample", "SampleSet", "label_run", "label_run_multi",
           "truncate_incidents", "balance", "split_runs", "DatasetManifest"]


class MissingClass(ValueError):
    pass


class InvalidScheme(ValueError):
    pass


class SampleFileError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    heatmap: Heatmap
    stage: GraspStage
    t_c_us: int
    run_id: str
    object_name: str

    def __post_init__(self):
        if self.heatmap.t_c_us != self.t_c_us:
            raise ValueError("heatmap time does not match sample time")


@dataclass(frozen=True, eq=False)
class SampleSet:
    heatmaps: np.ndarray  # (n, 96, 128) uint8
    stages: np.ndarray  # (n,) uint8
    t_c_us: np.ndarray  # (n,) int64
    run_ids: np.ndarray  # (n,) str
    objects: np.ndarray  # (n,) str

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(np.zeros((0, HEATMAP_HEIGHT, HEATMAP_WIDTH), np.uint8), np.zeros(0, np.uint8),
                   np.zeros(0, np.int64), np.zeros(0, dtype=object), np.zeros(0, dtype=object))

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "SampleSet":
        if not samples:
            return cls.empty()
        return cls(
            np.stack([s.heatmap.values for s in samples]).astype(np.uint8),
            np.array([int(s.stage) for s in samples], np.uint8),
            np.array([s.t_c_us for s in samples], np.int64),
            np.array([s.run_id for s in samples], dtype=object),
            np.array([s.object_name for s in samples], dtype=object),
        )

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("heatmaps", "stages", "t_c_us", "run_ids", "objects")))

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> LabeledSample:
        t = int(self.t_c_us[i])
        return LabeledSample(Heatmap(t, self.heatmaps[i]), GraspStage(int(self.stages[i])), t,
                             str(self.run_ids[i]), str(self.objects[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet(self.heatmaps[idx], self.stages[idx], self.t_c_us[idx],
                         self.run_ids[idx], self.objects[idx])

    def class_counts(self) -> dict[GraspStage, int]:
        c = np.bincount(self.stages, minlength=3)
        return {s: int(c[s]) for s in GraspStage}


def stages_at(timeline, times: np.ndarray) -> np.ndarray:
    """Vectorized :func:`neurotac.stages.stage_at`."""
    cp_t = np.array([t for t, _ in timeline], dtype=np.int64)
    cp_s = np.array([int(s) for _, s in timeline], dtype=np.uint8)
    pos = np.searchsorted(cp_t, np.asarray(times, dtype=np.int64), side="left") - 1
    out = np.full(len(pos), int(GraspStage.IDLE), dtype=np.uint8)
    ok = pos >= 0
    out[ok] = cp_s[pos[ok]]
    return out


def label_run_multi(run: SimRun, t_h_list: Sequence[int], backend: str | None = None,
                    drop_warmup: bool = True) -> dict[int, SampleSet]:
    """Label one run for several window lengths in a single pass over its events."""
    configs = [WindowConfig(t) for t in t_h_list]
    n_frames = run.duration_us // UPDATE_US
    maps = {c.t_h_ms: np.empty((n_frames, HEATMAP_HEIGHT, HEATMAP_WIDTH), np.uint8) for c in configs}
    times = np.empty(n_frames, np.int64)
    n = 0
    for t_c, views in iter_windows(run.stream, configs, 0, run.duration_us, backend):
        times[n] = t_c
        for c, v in zip(configs, views):
            maps[c.t_h_ms][n] = encode_counts(v, t_c, backend).values
        n += 1
    times = times[:n]
    stages = stages_at(run.timeline, times)
    out = {}
    for c in configs:
        keep = times >= c.t_h_us if drop_warmup else np.ones(n, bool)
        k = int(keep.sum())
        out[c.t_h_ms] = SampleSet(
            maps[c.t_h_ms][:n][keep], stages[keep], times[keep],
            np.full(k, run.name, dtype=object), np.full(k, run.profile.name, dtype=object),
        )
    return out


def label_run(run: SimRun, config: WindowConfig, backend: str | None = None) -> SampleSet:
    return label_run_multi(run, [config.t_h_ms], backend)[config.t_h_ms]


def _segments(samples: SampleSet) -> list[tuple[int, int]]:
    """Maximal runs of equal (run id, stage) in sample order, as [start, end) pairs."""
    n = len(samples)
    if n == 0:
        return []
    brk = np.flatnonzero((samples.stages[1:] != samples.stages[:-1]) | (samples.run_ids[1:] != samples.run_ids[:-1])) + 1
    bounds = np.concatenate([[0], brk, [n]])
    return list(zip(bounds[:-1].tolist(), bounds[1:].tolist()))


def truncate_incidents(samples: SampleSet, limit_us: int = INCIDENT_LIMIT_US) -> SampleSet:
    """Keep only the first ``limit_us`` of every press or slip segment."""
    keep = np.ones(len(samples), bool)
    for a, b in _segments(samples):
        if samples.stages[a] == GraspStage.IDLE:
            continue
        first = samples.t_c_us[a]
        keep[a:b] = samples.t_c_us[a:b] - first < limit_us
    return samples.take(np.flatnonzero(keep))


def balance(samples: SampleSet, seed: int) -> SampleSet:
    """Downsample every class to the size of the rarest one (order preserved)."""
    counts = np.bincount(samples.stages, minlength=3)
    missing = [GraspStage(i).label for i in range(3) if counts[i] == 0]
    if missing:
        raise MissingClass(f"no samples for class(es): {', '.join(missing)}")
    target = int(counts.min())
    if (counts == target).all():
        return samples
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(3):
        idx = np.flatnonzero(samples.stages == cls)
        if len(idx) > target:
            idx = np.sort(rng.choice(idx, size=target, replace=False))
        chosen.append(idx)
    return samples.take(np.sort(np.concatenate(chosen)))


@dataclass(frozen=True)
class RunRef:
    object_name: str
    run_index: int
    events_path: str = ""
    timeline_path: str = ""

    @property
    def run_id(self) -> str:
        return f"run_{self.object_name}_{self.run_index}"


@dataclass(frozen=True)
class PerObjectScheme:
    """One training run per object (the lowest run index), the rest for testing."""


@dataclass(frozen=True)
class UnseenObjectsScheme:
    train_objects: tuple[str, ...]
    test_objects: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_objects) & set(self.test_objects):
            raise InvalidScheme("an object cannot be both seen and unseen")


@dataclass
class DatasetManifest:
    entries: list[tuple[RunRef, str]] = field(default_factory=list)  # (run, "train" | "test")
    t_h_ms: int | None = None
    seed: int | None = None

    def runs(self, split: str) -> list[RunRef]:
        return [r for r, s in self.entries if s == split]

    @property
    def train(self) -> list[RunRef]:
        return self.runs("train")

    @property
    def test(self) -> list[RunRef]:
        return self.runs("test")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r, split in self.entries:
                w.writerow([r.object_name, r.run_id, split, r.events_path, r.timeline_path])

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        entries = []
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            if next(rows, None) != MANIFEST_HEADER:
                raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
            for obj, run_id, split, ev, tl in rows:
                idx = int(run_id.rsplit("_", 1)[1])
                entries.append((RunRef(obj, idx, ev, tl), split))
        return cls(entries)


def split_runs(runs: Sequence[RunRef], scheme, seed: int = 0, t_h_ms: int | None = None) -> DatasetManifest:
    by_object: dict[str, list[RunRef]] = {}
    for r in runs:
        by_object.setdefault(r.object_name, []).append(r)
    for rs in by_object.values():
        rs.sort(key=lambda r: r.run_index)
    entries: list[tuple[RunRef, str]] = []
    if isinstance(scheme, PerObjectScheme):
        for obj in sorted(by_object):
            rs = by_object[obj]
            entries.append((rs[0], "train"))
            entries.extend((r, "test") for r in rs[1:])
    elif isinstance(scheme, UnseenObjectsScheme):
        unknown = (set(scheme.train_objects) | set(scheme.test_objects)) - set(by_object)
        if unknown:
            raise InvalidScheme(f"unknown objects: {sorted(unknown)}")
        for obj in scheme.train_objects:
            entries.append((by_object[obj][0], "train"))
        for obj in scheme.test_objects:
            entries.extend((r, "test") for r in by_object[obj])
    else:
        raise InvalidScheme(f"unsupported split scheme {scheme!r}")
    return DatasetManifest(entries, t_h_ms, seed)


def choose_unseen(objects: Sequence[str], k: int, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Randomly hold out ``k`` objects; returns (train objects, held-out objects) in input order."""
    rng = np.random.default_rng(seed)
    held = set(rng.choice(len(objects), size=k, replace=False).tolist())
    return (tuple(o for i, o in enumerate(objects) if i not in held),
            tuple(o for i, o in enumerate(objects) if i in held))


def write_samples(samples: SampleSet, path) -> None:
    rec = np.empty(len(samples), dtype=SMP_DTYPE)
    rec["t_c_us"] = samples.t_c_us
    rec["stage"] = samples.stages
    rec["heatmap"] = samples.heatmaps
    with open(path, "wb") as fh:
        fh.write(SMP_HEADER.pack(SMP_MAGIC, SMP_VERSION, len(samples)))
        fh.write(rec.tobytes())


def read_samples(path, run_id: str = "", object_name: str = "") -> SampleSet:
    data = Path(path).read_bytes()
    if len(data) < SMP_HEADER.size:
        raise SampleFileError(f"{path}: file shorter than header")
    magic, version, count = SMP_HEADER.unpack_from(data)
    if magic != SMP_MAGIC:
        raise SampleFileError(f"{path}: bad magic {magic!r}")
    if version != SMP_VERSION:
        raise SampleFileError(f"{path}: unsupported version {version}")
    if len(data) != SMP_HEADER.size + count * SMP_DTYPE.itemsize:
        raise SampleFileError(f"{path}: size does not match {count} records")
    rec = np.frombuffer(data, dtype=SMP_DTYPE, count=count, offset=SMP_HEADER.size)
    if count and rec["stage"].max() > 2:
        raise SampleFileError(f"{path}: stage code out of range")
    return SampleSet(
        np.ascontiguousarray(rec["heatmap"]), rec["stage"].copy(), rec["t_c_us"].astype(np.int64),
        np.full(count, run_id, dtype=object), np.full(count, object_name, dtype=object),
    )


def sample_cache_name(run_id: str, t_h_ms: int) -> str:
    return f"samples_{run_id}_{t_h_ms}.bin"

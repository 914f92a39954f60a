"""Experiment orchestration on the synthetic suite.

A :class:`Workspace` owns an output directory and caches everything it
builds there: run bundles under ``runs/``, labeled samples under
``samples/`` and trained models under ``models/``. Experiments ask the
workspace for what they need, so a ``delay`` after a ``sweep`` reuses the
sweep's t_h = 40 ms model instead of retraining.

Training uses one classifier per configuration, fed the first run of every
training object; accuracy is frame-level over truncated, class-balanced test
runs, so chance is 1/3.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .backend import available_backends
from .dataset import (DatasetManifest, PerObjectScheme, RunRef, SampleSet, UnseenObjectsScheme, balance,
                      choose_unseen, label_run_multi, read_samples, sample_cache_name, split_runs,
                      truncate_incidents, write_samples)
from .encode import encode_counts
from .events import EventStream, SensorGeometry
from .plots import bar_chart, line_chart, step_chart
from .sim import (NoiseModel, ObjectProfile, SimRun, make_object_suite, read_run_bundle,
                  simulate_run, write_run_bundle, add_noise)
from .stages import GraspStage
from .windowing import ALLOWED_T_H_MS, UPDATE_US, WindowConfig, WindowState, bucket_bounds, frame_times, pixel_index

log = logging.getLogger("neurotac")

DEFAULT_TRAIN = nn.TrainConfig(max_epochs=8, patience=3)
BEST_T_H_MS = 40
N_UNSEEN = 5
VAL_BLOCK_US = 50_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    t_h_list: tuple[int, ...] = ALLOWED_T_H_MS
    runs_per_object: int = 10
    objects: tuple[str, ...] | None = None  # subset of suite names, suite order kept
    train: nn.TrainConfig = DEFAULT_TRAIN
    out_dir: Path = Path("out")
    backend: str | None = None
    val_fraction: float = 0.2
    n_unseen: int = N_UNSEEN

    def __post_init__(self):
        if not self.t_h_list:
            raise ConfigError("t_h list is empty")
        bad = [t for t in self.t_h_list if t not in ALLOWED_T_H_MS]
        if bad:
            raise ConfigError(f"t_h values {bad} not in {list(ALLOWED_T_H_MS)}")
        if self.runs_per_object < 2:
            raise ConfigError("need at least 2 runs per object (one to train, one to test)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("validation fraction must be in [0, 1)")
        if self.backend is not None and self.backend not in available_backends():
            raise ConfigError(f"backend {self.backend!r} not available; have {available_backends()}")
        object.__setattr__(self, "t_h_list", tuple(sorted(set(int(t) for t in self.t_h_list))))
        object.__setattr__(self, "out_dir", Path(self.out_dir))

    def suite(self) -> list[ObjectProfile]:
        suite = make_object_suite(self.seed)
        if self.objects is None:
            return suite
        names = [p.name for p in suite]
        unknown = [o for o in self.objects if o not in names]
        if unknown:
            raise ConfigError(f"unknown objects {unknown}; suite has {names}")
        return [p for p in suite if p.name in self.objects]


def derive_seed(*parts) -> int:
    """Stable integer seed from ints and strings (strings via CRC-32)."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> 1)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


@dataclass
class Workspace:
    config: ExperimentConfig
    _profiles: dict[str, ObjectProfile] = field(default_factory=dict, repr=False)
    _models: dict[str, nn.CnnModel] = field(default_factory=dict, repr=False)
    _preds: dict[tuple[str, str], np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.root = self.config.out_dir
        for sub in ("runs", "samples", "models"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        suite = self.config.suite()
        self._profiles = {p.name: p for p in suite}
        self.object_index = {p.name: i for i, p in enumerate(make_object_suite(self.config.seed))}

    @property
    def objects(self) -> list[str]:
        return list(self._profiles)

    # -- runs -------------------------------------------------------------

    def run_ref(self, obj: str, idx: int) -> RunRef:
        d = self.root / "runs" / f"run_{obj}_{idx}"
        return RunRef(obj, idx, str(d / "events.evt1"), str(d / "timeline.csv"))

    def all_runs(self) -> list[RunRef]:
        return [self.run_ref(o, i) for o in self.objects for i in range(self.config.runs_per_object)]

    def run_seed(self, obj: str) -> int:
        return self.config.seed * 1000 + self.object_index[obj]

    def run(self, obj: str, idx: int) -> SimRun:
        d = self.root / "runs" / f"run_{obj}_{idx}"
        if (d / "profile.json").exists():
            return read_run_bundle(d)
        t0 = time.perf_counter()
        r = simulate_run(self._profiles[obj], seed=self.run_seed(obj), run_index=idx, backend=self.config.backend)
        write_run_bundle(r, self.root / "runs")
        log.info("simulated %s: %d events (%.1f s)", r.name, len(r.stream), time.perf_counter() - t0)
        return r

    def simulate_all(self) -> DatasetManifest:
        for ref in self.all_runs():
            if not Path(ref.timeline_path).exists():
                self.run(ref.object_name, ref.run_index)
        manifest = split_runs(self.all_runs(), PerObjectScheme(), self.config.seed)
        manifest.write(self.root / "manifest.csv")
        return manifest

    # -- samples ----------------------------------------------------------

    def samples(self, obj: str, idx: int, t_h: int) -> SampleSet:
        """Every labeled frame of a run (no truncation, no balancing), cached."""
        run_id = f"run_{obj}_{idx}"
        path = self.root / "samples" / sample_cache_name(run_id, t_h)
        if path.exists():
            return read_samples(path, run_id, obj)
        wanted = sorted(set(self.config.t_h_list) | {t_h})
        missing = [t for t in wanted if not (self.root / "samples" / sample_cache_name(run_id, t)).exists()]
        t0 = time.perf_counter()
        sets = label_run_multi(self.run(obj, idx), missing, self.config.backend)
        for t, s in sets.items():
            write_samples(s, self.root / "samples" / sample_cache_name(run_id, t))
        log.info("labeled %s for t_h %s (%.1f s)", run_id, missing, time.perf_counter() - t0)
        return sets[t_h]

    def encode_all(self) -> None:
        for ref in self.all_runs():
            for t_h in self.config.t_h_list:
                self.samples(ref.object_name, ref.run_index, t_h)

    def dataset(self, obj: str, idx: int, t_h: int, purpose: str) -> SampleSet:
        """Truncated and balanced samples of one run."""
        s = truncate_incidents(self.samples(obj, idx, t_h))
        return balance(s, derive_seed(self.config.seed, purpose, obj, idx, t_h))

    # -- models -----------------------------------------------------------

    def model_tag(self, t_h: int, train_refs: Sequence[RunRef]) -> str:
        key = json.dumps([self.config.seed, t_h, sorted(r.run_id for r in train_refs),
                          asdict(self.config.train), self.config.val_fraction], sort_keys=True)
        return f"t{t_h}_s{self.config.seed}_{zlib.crc32(key.encode()):08x}"

    def model(self, t_h: int, train_refs: Sequence[RunRef]) -> nn.CnnModel:
        tag = self.model_tag(t_h, train_refs)
        if tag in self._models:
            return self._models[tag]
        path = self.root / "models" / f"model_{tag}.tnn"
        if path.exists():
            m = nn.load_model(path)
        else:
            m = self._train(tag, t_h, train_refs)
            nn.save_model(m, path)
        self._models[tag] = m
        return m

    def _train(self, tag: str, t_h: int, train_refs: Sequence[RunRef]) -> nn.CnnModel:
        data = SampleSet.concat([self.dataset(r.object_name, r.run_index, t_h, "train") for r in train_refs])
        tr_idx, va_idx = block_split(data, self.config.val_fraction, derive_seed(self.config.seed, "val", t_h))
        cfg = replace(self.config.train, seed=derive_seed(self.config.seed, "init", t_h))
        model = nn.CnnModel.init(cfg.seed)
        log.info("training %s on %d samples (%d validation)", tag, len(tr_idx), len(va_idx))
        t0 = time.perf_counter()
        res = nn.train(model, data.heatmaps[tr_idx], data.stages[tr_idx], data.heatmaps[va_idx],
                       data.stages[va_idx], cfg, log=log.info)
        log.info("trained %s in %.0f s, best epoch %d", tag, time.perf_counter() - t0, res.best_epoch)
        _write_csv(self.root / "models" / f"history_{tag}.csv",
                   ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"],
                   [[h.epoch, _fmt(h.train_loss), _fmt(h.train_accuracy), _fmt(h.val_loss), _fmt(h.val_accuracy)]
                    for h in res.history])
        return res.model

    def predictions(self, model: nn.CnnModel, obj: str, idx: int, t_h: int) -> tuple[SampleSet, np.ndarray]:
        """Full labeled run and the model's stage code for every frame."""
        s = self.samples(obj, idx, t_h)
        key = (model.checksum(), f"{obj}/{idx}/{t_h}")
        if key not in self._preds:
            self._preds[key] = nn.predict(model, s.heatmaps)
        return s, self._preds[key]

    def accuracy(self, model: nn.CnnModel, obj: str, idx: int, t_h: int) -> float:
        """Balanced frame-level accuracy on the truncated run."""
        full, pred = self.predictions(model, obj, idx, t_h)
        test = self.dataset(obj, idx, t_h, "test")
        pos = np.searchsorted(full.t_c_us, test.t_c_us)
        return float((pred[pos] == test.stages).mean())

    def train_refs(self, objects: Sequence[str]) -> list[RunRef]:
        return [self.run_ref(o, 0) for o in objects]

    def per_object_model(self, t_h: int) -> nn.CnnModel:
        manifest = split_runs(self.all_runs(), PerObjectScheme(), self.config.seed, t_h)
        return self.model(t_h, manifest.train)


def block_split(samples: SampleSet, fraction: float, seed: int,
                block_us: int = VAL_BLOCK_US) -> tuple[np.ndarray, np.ndarray]:
    """Hold out whole time blocks of every run for validation; both parts sorted.

    Neighbouring frames share most of their events, so a frame-level split
    would let validation see near-copies of training frames. Blocks are
    ``block_us`` long (at least the longest window) and drawn per run.
    """
    rng = np.random.default_rng(seed)
    block = samples.t_c_us // block_us
    val = np.zeros(len(samples), bool)
    for run_id in dict.fromkeys(samples.run_ids.tolist()):
        sel = samples.run_ids == run_id
        ids = np.unique(block[sel])
        k = int(round(fraction * len(ids)))
        held = rng.choice(ids, size=k, replace=False) if k else ids[:0]
        val |= sel & np.isin(block, held)
    return np.flatnonzero(~val), np.flatnonzero(val)


# -- experiments --------------------------------------------------------------

def exp_history_sweep(config: ExperimentConfig, ws: Workspace | None = None) -> dict[tuple[str, int], float]:
    """Mean test accuracy per (object, t_h); writes ``history_sweep.csv``."""
    ws = ws or Workspace(config)
    out = {}
    for t_h in config.t_h_list:
        model = ws.per_object_model(t_h)
        for obj in ws.objects:
            accs = [ws.accuracy(model, obj, i, t_h) for i in range(1, config.runs_per_object)]
            out[(obj, t_h)] = float(np.mean(accs))
            log.info("t_h %d ms, %s: accuracy %.4f", t_h, obj, out[(obj, t_h)])
    _write_csv(config.out_dir / "history_sweep.csv", ["object", "t_h_ms", "mean_test_accuracy"],
               [[obj, t_h, _fmt(out[(obj, t_h)])] for obj in ws.objects for t_h in config.t_h_list])
    series = {obj: [out[(obj, t)] for t in config.t_h_list] for obj in ws.objects}
    series["mean"] = [float(np.mean([out[(o, t)] for o in ws.objects])) for t in config.t_h_list]
    line_chart(config.out_dir / "history_sweep.svg", "Test accuracy vs. events history (ms)",
               config.t_h_list, series, (0.0, 1.0))
    return out


@dataclass(frozen=True)
class IncidentDelay:
    object_name: str
    run_id: str
    stage: GraspStage
    delay_ms: float
    detected: bool


@dataclass(frozen=True)
class DelayStats:
    mean_ms: float
    sem_ms: float
    n: int
    missed: int


@dataclass
class DelayReport:
    t_h_ms: int
    incidents: list[IncidentDelay]

    def stats(self, obj: str, stage: GraspStage) -> DelayStats:
        d = np.array([i.delay_ms for i in self.incidents if i.object_name == obj and i.stage == stage])
        missed = sum(1 for i in self.incidents if i.object_name == obj and i.stage == stage and not i.detected)
        if len(d) == 0:
            return DelayStats(float("nan"), float("nan"), 0, 0)
        sem = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
        return DelayStats(float(d.mean()), sem, len(d), missed)

    @property
    def objects(self) -> list[str]:
        return list(dict.fromkeys(i.object_name for i in self.incidents))


def incident_delays(timeline, t_c_us: np.ndarray, pred: np.ndarray) -> list[tuple[GraspStage, float, bool]]:
    """Delay of the first correct prediction in every press/slip segment.

    A segment spans ``(onset, next change]``; the delay is the frame time of
    the first correct frame minus the onset, so the floor is one update
    period. A segment without any correct frame reports its full length.
    """
    out = []
    changes = list(timeline) + [(None, None)]
    end_us = int(t_c_us[-1]) if len(t_c_us) else 0
    for (onset, stage), (nxt, _) in zip(changes, changes[1:]):
        if stage == GraspStage.IDLE:
            continue
        stop = end_us if nxt is None else nxt
        sel = (t_c_us > onset) & (t_c_us <= stop)
        hits = np.flatnonzero(sel & (pred == stage))
        if len(hits):
            out.append((GraspStage(stage), (int(t_c_us[hits[0]]) - onset) / 1000.0, True))
        else:
            out.append((GraspStage(stage), (stop - onset) / 1000.0, False))
    return out


def exp_detection_delay(config: ExperimentConfig, t_h: int = BEST_T_H_MS, ws: Workspace | None = None) -> DelayReport:
    ws = ws or Workspace(config)
    model = ws.per_object_model(t_h)
    incidents = []
    for obj in ws.objects:
        for i in range(1, config.runs_per_object):
            full, pred = ws.predictions(model, obj, i, t_h)
            run = ws.run(obj, i)
            for stage, d, ok in incident_delays(run.timeline, full.t_c_us, pred):
                incidents.append(IncidentDelay(obj, run.name, stage, d, ok))
    report = DelayReport(t_h, incidents)
    rows = []
    for obj in report.objects:
        p, s = report.stats(obj, GraspStage.PRESS), report.stats(obj, GraspStage.SLIP)
        rows.append([obj, _fmt(p.mean_ms), _fmt(p.sem_ms), p.missed, _fmt(s.mean_ms), _fmt(s.sem_ms), s.missed])
    _write_csv(config.out_dir / "delay.csv",
               ["object", "press_delay_ms", "press_sem_ms", "press_missed", "slip_delay_ms", "slip_sem_ms", "slip_missed"],
               rows)
    bar_chart(config.out_dir / "delay.svg", f"Detection delay (ms), t_h = {t_h} ms", report.objects,
              {"press": [report.stats(o, GraspStage.PRESS).mean_ms for o in report.objects],
               "slip": [report.stats(o, GraspStage.SLIP).mean_ms for o in report.objects]})
    return report


def exp_full_timeline(config: ExperimentConfig, obj: str, run_index: int, t_h: int = BEST_T_H_MS,
                      ws: Workspace | None = None) -> Path:
    """Per-frame truth and prediction over a whole run, no truncation."""
    ws = ws or Workspace(config)
    if obj not in ws.objects:
        raise ConfigError(f"unknown object {obj!r}")
    if not 0 <= run_index < config.runs_per_object:
        raise ConfigError(f"run index {run_index} outside 0..{config.runs_per_object - 1}")
    model = ws.per_object_model(t_h)
    full, pred = ws.predictions(model, obj, run_index, t_h)
    path = config.out_dir / f"timeline_{obj}_{run_index}.csv"
    _write_csv(path, ["t_c_us", "truth", "predicted"],
               [[int(t), GraspStage(int(a)).label, GraspStage(int(b)).label]
                for t, a, b in zip(full.t_c_us, full.stages, pred)])
    step_chart(config.out_dir / f"timeline_{obj}_{run_index}.svg", f"{obj} run {run_index}",
               (full.t_c_us / 1000.0).tolist(), {"truth": full.stages.tolist(), "predicted": pred.tolist()})
    return path


def read_timeline_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    t = np.array([int(r[0]) for r in rows], np.int64)
    truth = np.array([int(GraspStage.parse(r[1])) for r in rows], np.uint8)
    pred = np.array([int(GraspStage.parse(r[2])) for r in rows], np.uint8)
    return t, truth, pred


@dataclass(frozen=True)
class UnseenRow:
    object_name: str
    seen_accuracy: float
    unseen_accuracy: float


def exp_unseen_objects(config: ExperimentConfig, t_h: int = BEST_T_H_MS, ws: Workspace | None = None) -> list[UnseenRow]:
    """Held-out objects: accuracy with and without their own training run.

    Unseen: trained on the first run of the remaining objects, tested on all
    runs of the held-out object. Seen: the model trained on the first run of
    every object, tested on the held-out object's other runs (its own
    training run is excluded to avoid leakage).
    """
    ws = ws or Workspace(config)
    k = min(config.n_unseen, len(ws.objects) - 1)
    if k < 1:
        raise ConfigError("need at least two objects for the unseen-object experiment")
    train_objs, held = choose_unseen(ws.objects, k, derive_seed(config.seed, "unseen"))
    manifest = split_runs(ws.all_runs(), UnseenObjectsScheme(train_objs, held), config.seed, t_h)
    manifest.write(config.out_dir / "unseen_manifest.csv")
    unseen_model = ws.model(t_h, manifest.train)
    seen_model = ws.per_object_model(t_h)
    rows = []
    for obj in held:
        unseen = float(np.mean([ws.accuracy(unseen_model, obj, i, t_h) for i in range(config.runs_per_object)]))
        seen = float(np.mean([ws.accuracy(seen_model, obj, i, t_h) for i in range(1, config.runs_per_object)]))
        rows.append(UnseenRow(obj, seen, unseen))
        log.info("%s: seen %.4f unseen %.4f", obj, seen, unseen)
    _write_csv(config.out_dir / "unseen.csv", ["object", "seen_accuracy", "unseen_accuracy"],
               [[r.object_name, _fmt(r.seen_accuracy), _fmt(r.unseen_accuracy)] for r in rows])
    bar_chart(config.out_dir / "unseen.svg", "Seen vs. unseen object accuracy", [r.object_name for r in rows],
              {"seen": [r.seen_accuracy for r in rows], "unseen": [r.unseen_accuracy for r in rows]}, (0.0, 1.0))
    return rows


# -- throughput ---------------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    backend: str
    frames: int
    events: int
    seconds: float
    p50_ms: float
    p99_ms: float
    forward_mean_ms: float
    forward_p99_ms: float

    @property
    def frames_per_s(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else float("inf")

    @property
    def events_per_s(self) -> float:
        return self.events / self.seconds if self.seconds > 0 else float("inf")

    @property
    def realtime(self) -> bool:
        return self.frames_per_s >= 500.0


def bench_stream(seed: int = 0, duration_us: int = 1_000_000, background_rate: float = 10.0) -> EventStream:
    """Noise-only stream at the simulator's default rates (about 3M events per second)."""
    return add_noise(EventStream.empty(SensorGeometry()), NoiseModel(background_rate), seed, duration_us)


def bench_window_encode(stream: EventStream, t_h: int = BEST_T_H_MS, backend: str | None = None,
                        duration_us: int | None = None) -> tuple[np.ndarray, int]:
    """Per-frame wall-clock seconds of window advance + encode, and frames processed."""
    end = duration_us if duration_us is not None else (int(stream.t[-1]) if len(stream) else 0)
    times = frame_times(stream, 0, end)
    bounds = bucket_bounds(stream, times)
    state = WindowState(WindowConfig(t_h), stream.geometry, int(times[0]) - UPDATE_US, backend)
    lat = np.empty(len(times))
    clock = time.perf_counter
    for k, t_c in enumerate(times):
        t0 = clock()
        view = state.advance_indices(pixel_index(stream, bounds[k], bounds[k + 1]))
        encode_counts(view, int(t_c), backend)
        lat[k] = clock() - t0
    return lat, len(times)


def bench_forward(n: int = 50, seed: int = 0) -> np.ndarray:
    model = nn.CnnModel.init(seed)
    x = np.random.default_rng(seed).integers(0, 256, (n, 96, 128)).astype(np.uint8)
    nn.predict(model, x[:1])
    lat = np.empty(n)
    for i in range(n):
        t0 = time.perf_counter()
        nn.predict(model, x[i:i + 1])
        lat[i] = time.perf_counter() - t0
    return lat


def bench_throughput(config: ExperimentConfig, stream: EventStream | None = None,
                     t_h: int = BEST_T_H_MS, forward_frames: int = 50) -> list[BenchResult]:
    """Window + encode latency on every available backend; forward timed separately."""
    stream = stream if stream is not None else bench_stream(config.seed)
    fwd = bench_forward(forward_frames, config.seed) * 1e3 if forward_frames else np.array([float("nan")])
    backends = [config.backend] if config.backend else available_backends()
    results = []
    for b in backends:
        bench_window_encode(stream, t_h, b, 100_000)  # warm-up
        lat, frames = bench_window_encode(stream, t_h, b, 1_000_000)
        ms = lat * 1e3
        results.append(BenchResult(b, frames, len(stream), float(lat.sum()), float(np.percentile(ms, 50)),
                                   float(np.percentile(ms, 99)), float(fwd.mean()), float(np.percentile(fwd, 99))))
        r = results[-1]
        log.info("%s: %d frames, %.0f frames/s, p99 %.3f ms", b, frames, r.frames_per_s, r.p99_ms)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(config.out_dir / "bench.csv",
               ["backend", "frames", "events", "frames_per_s", "events_per_s", "p50_ms", "p99_ms",
                "realtime_500hz", "forward_mean_ms", "forward_p99_ms"],
               [[r.backend, r.frames, r.events, f"{r.frames_per_s:.1f}", f"{r.events_per_s:.0f}", f"{r.p50_ms:.4f}",
                 f"{r.p99_ms:.4f}", int(r.realtime), f"{r.forward_mean_ms:.3f}", f"{r.forward_p99_ms:.3f}"]
                for r in results])
    return results

"""Acceptance criteria at their stated tolerances, one PASS/FAIL line each.

Criteria 5-8 and 10 run the desk-scale experiment suite (10 objects x 10 runs,
six windows) and take a few hours on one core. Set NEUROTAC_ACCEPTANCE_DIR to
keep that workspace between sessions; the determinism check always repeats the
sweep in a fresh directory.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from neurotac import nn
from neurotac.backend import BACKEND
from neurotac.encode import encode_stages, mean_nonzero, sigmoid_penalize
from neurotac.events import SensorGeometry
from neurotac.harness import (ExperimentConfig, Workspace, bench_stream, bench_throughput, exp_detection_delay,
                              exp_history_sweep, exp_unseen_objects)
from neurotac.sim import CameraModel, generate_events, hot_pixel_positions, make_object_suite, run_seeds, simulate_run
from neurotac.stages import GraspStage
from neurotac.windowing import ALLOWED_T_H_MS, CountFrame, WindowConfig, WindowState, count_frame_oracle

from conftest import random_stream
from reference import reference_encode
from sim_oracle import SCENE, moving_edge_scene, polarity_violations, replay_scene

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# -- fast criteria ------------------------------------------------------------

def test_windowing_oracle(report):
    checked = mismatched = 0
    for seed in range(50):
        s = random_stream(seed, n=10_000, t_max=200_000)
        buckets = [s.slice_time(t - 2000, t) for t in range(0, 200_001, 2000)]
        for t_h in ALLOWED_T_H_MS:
            state = WindowState(WindowConfig(t_h), s.geometry, t_c_us=-2000)
            for b in buckets:
                f = state.advance(b)
                checked += 1
                mismatched += f != count_frame_oracle(s, f.t_c_us, t_h)
    report(1, mismatched == 0 and checked == 50 * 6 * 101,
           f"{checked} incremental frames over 50 streams x 6 windows, {mismatched} differ from the oracle")


def test_encode_reference(report):
    g = SensorGeometry()
    worst = 0.0
    exact = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        counts = np.zeros(g.shape, np.uint32)
        n = int(rng.integers(1, 40_000))
        np.add.at(counts.reshape(-1), rng.integers(0, g.n_pixels, n), rng.integers(1, 4, n).astype(np.uint32))
        hot = rng.integers(0, g.n_pixels, int(rng.integers(0, 30)))
        counts.reshape(-1)[hot] += rng.integers(5, 200, len(hot)).astype(np.uint32)
        st = encode_stages(CountFrame(g, 2000, counts))
        pre, out = reference_encode(counts)
        worst = max(worst, float(np.max(np.abs(st.block_means - pre) / np.maximum(np.abs(pre), 1e-300))))
        exact += np.array_equal(st.heatmap, out)
    report(2, worst <= 1e-9 and exact == 100,
           f"max relative pre-quantization error {worst:.2e} (<= 1e-9), {exact}/100 heatmaps identical")


def test_hot_pixel_suppression(report):
    profile = make_object_suite(0)[0]
    noise = profile.noise_model()
    run = simulate_run(profile, seed=11, run_index=0)
    hot = hot_pixel_positions(noise, run_seeds(11, 0)[1], run.stream.geometry)
    windows = checked = 0
    worst = 0.0
    for t_h in (2, 10, 40):
        for t_c in range(t_h * 1000, 500_001, 2000):
            f = count_frame_oracle(run.stream, t_c, t_h)
            b = mean_nonzero(f)
            e = f.counts.reshape(-1)[hot].astype(float)
            d = sigmoid_penalize(f).values.reshape(-1)[hot]
            sel = e >= b + 6
            windows += 1
            checked += int(sel.sum())
            if sel.any():
                worst = max(worst, float((d[sel] / e[sel]).max()))
    report(3, windows >= 100 and checked > 0 and worst < 0.01,
           f"{windows} Idle windows, {checked} hot-pixel checks with E >= b+6, max D/E = {worst:.2e} (< 0.01)")


def test_gradient_check(report):
    errs = []
    for seed in range(5):
        m = nn.CnnModel.init(seed, (24, 32))
        rng = np.random.default_rng(100 + seed)
        for k in nn.PARAM_NAMES:
            if k.endswith("_b"):
                m.params[k] = rng.normal(0, 0.1, m.params[k].shape)
        img = rng.integers(0, 256, (24, 32)).astype(np.uint8)
        errs.append(nn.gradient_check(m, img, seed % 3, n_params=200, step=1e-5, seed=seed))
    report(4, max(errs) < 1e-4, "max relative errors " + ", ".join(f"{e:.1e}" for e in errs) + " (< 1e-4)")


def test_realtime(report, tmp_path):
    stream = bench_stream(0)
    res = {r.backend: r for r in bench_throughput(ExperimentConfig(out_dir=tmp_path), stream, forward_frames=20)}
    r = res[BACKEND]
    others = "; ".join(f"{b}: {x.frames_per_s:.0f} frames/s, p99 {x.p99_ms:.2f} ms" for b, x in res.items() if b != BACKEND)
    report(9, len(stream) >= 100_000 and r.frames == 500 and r.frames_per_s >= 500 and r.p99_ms < 2.0,
           f"{BACKEND} kernels on {len(stream)} events: {r.frames_per_s:.0f} frames/s (>= 500), "
           f"p99 {r.p99_ms:.3f} ms (< 2)" + (f"; {others}" if others else ""))


def test_simulator_soundness(report):
    cam = CameraModel()
    static = polarity = oracle = 0
    for seed in range(20):
        frames = moving_edge_scene(seed)
        static += len(generate_events([frames[seed % len(frames)]] * 10, cam, SCENE)) == 0
        s = generate_events(frames, cam, SCENE)
        polarity += len(s) > 0 and polarity_violations(s, frames, cam.threshold, SCENE.temporal_resolution_us) == 0
        got = {}
        for e in s:
            got.setdefault((e.x, e.y), []).append((e.t, e.pol))
        oracle += got == replay_scene(frames, cam, SCENE.temporal_resolution_us)
    report(11, static == polarity == oracle == 20,
           f"20 scenes: static zero-event {static}/20, polarity {polarity}/20, per-pixel oracle {oracle}/20")


# -- desk-scale experiments ---------------------------------------------------

@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory) -> Path:
    d = os.environ.get("NEUROTAC_ACCEPTANCE_DIR")
    return Path(d) if d else tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def workspace(suite_dir):
    return Workspace(ExperimentConfig(seed=0, out_dir=suite_dir / "run_a"))


@pytest.fixture(scope="module")
def sweep(workspace):
    return exp_history_sweep(workspace.config, workspace)


def test_accuracy_above_95(report, workspace, sweep):
    accs = {o: sweep[(o, 40)] for o in workspace.objects}
    good = sum(a >= 0.95 for a in accs.values())
    report(5, good >= 8, f"{good}/10 objects >= 0.95 at t_h = 40 ms; "
           + ", ".join(f"{o} {a:.3f}" for o, a in accs.items()))


def test_two_ms_is_worst(report, workspace, sweep):
    means = {t: float(np.mean([sweep[(o, t)] for o in workspace.objects])) for t in ALLOWED_T_H_MS}
    others = [means[t] for t in ALLOWED_T_H_MS if t != 2]
    report(6, means[2] < min(others), "suite means " + ", ".join(f"{t} ms {m:.4f}" for t, m in means.items()))


def test_detection_delay(report, workspace, sweep):
    rep = exp_detection_delay(workspace.config, 40, workspace)
    rows = {o: (rep.stats(o, GraspStage.PRESS).mean_ms, rep.stats(o, GraspStage.SLIP).mean_ms) for o in rep.objects}
    good = sum(p < 5 and s < 5 for p, s in rows.values())
    report(7, good >= 8, f"{good}/10 objects with press and slip delay < 5 ms; "
           + ", ".join(f"{o} {p:.1f}/{s:.1f}" for o, (p, s) in rows.items()))


def test_unseen_objects(report, workspace, sweep):
    rows = exp_unseen_objects(workspace.config, 40, workspace)
    good = sum(r.unseen_accuracy >= 0.80 for r in rows)
    seen, unseen = np.mean([r.seen_accuracy for r in rows]), np.mean([r.unseen_accuracy for r in rows])
    report(8, len(rows) == 5 and good >= 4 and seen >= unseen,
           f"{good}/5 held-out objects with unseen >= 0.80, mean seen {seen:.3f} vs unseen {unseen:.3f}; "
           + ", ".join(f"{r.object_name} {r.seen_accuracy:.3f}/{r.unseen_accuracy:.3f}" for r in rows))


def test_sweep_determinism(report, workspace, sweep, tmp_path_factory):
    again = tmp_path_factory.mktemp("sweep_again")
    exp_history_sweep(ExperimentConfig(seed=0, out_dir=again))
    a = (workspace.root / "history_sweep.csv").read_bytes()
    b = (again / "history_sweep.csv").read_bytes()
    report(10, a == b, f"history_sweep.csv from two independent executions: {len(a)} bytes, identical={a == b}")

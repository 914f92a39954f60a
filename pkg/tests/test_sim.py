import math

import numpy as np
import pytest

from neurotac.encode import mean_nonzero, sigmoid_penalize
from neurotac.events import EventStream, validate_stream
from neurotac.sim import (
    BLACK, PRESS_ONSET_MS, WHITE, CameraModel, GeometryMismatch, MarkerLayout, NoiseModel,
    ObjectProfile, OutOfBounds, SLIP_RELEASE_MS, add_noise, generate_events, hot_pixel_positions,
    make_object_suite, read_run_bundle, render_scene, simulate_run, slip_travel, write_run_bundle,
    zero_deformation,
)
from neurotac.stages import GraspStage
from neurotac.windowing import WindowConfig, count_frame_oracle, stream_to_frames

from sim_oracle import SCENE, moving_edge_scene, polarity_violations, replay_scene

SMALL = SCENE


@pytest.fixture(scope="module")
def suite():
    return make_object_suite(0)


@pytest.fixture(scope="module")
def clean_run(suite):
    return simulate_run(suite[0], noise=NoiseModel(0, 0), seed=3, run_index=1)


def test_default_layout():
    lay = MarkerLayout.default()
    assert len(lay) == 9
    assert sorted({p.strip for p in lay.pairs}) == list(range(6))
    g = lay.geometry
    for i, a in enumerate(lay.pairs):
        assert 0 <= a.base.x0 and a.base.x1 <= g.width and 0 <= a.base.y0 and a.base.y1 <= g.height
        for b in lay.pairs[i + 1:]:
            assert not a.base.overlaps(b.base)


def test_render_deterministic():
    lay = MarkerLayout.default()
    a, b = render_scene(lay), render_scene(lay)
    assert np.array_equal(a, b)
    assert math.isclose(a.min(), math.log(BLACK)) and a.max() == math.log(WHITE)


def test_render_translation_by_whole_pixels():
    lay = MarkerLayout.default()
    d = zero_deformation(lay)
    d[4, 0] = 5.0
    p = lay.pairs[4]
    shifted = MarkerLayout(lay.geometry, lay.pairs[:4] + (type(p)(p.top.moved(5, 0), p.base.moved(5, 0), p.strip),) + lay.pairs[5:])
    assert np.array_equal(render_scene(lay, d), render_scene(shifted))


def test_half_pixel_shift_gives_mixed_edges():
    lay = MarkerLayout.default()
    d = zero_deformation(lay)
    d[0, 0] = 0.5
    lin = np.exp(render_scene(lay, d))
    top = lay.pairs[0].top
    edge = lin[int(top.y0) + 2, int(math.floor(top.x0 + 0.5))]
    assert BLACK < edge < WHITE


def test_out_of_bounds():
    lay = MarkerLayout.default()
    d = zero_deformation(lay)
    d[0, 0] = -1000
    with pytest.raises(OutOfBounds):
        render_scene(lay, d)


def test_static_sequence_no_events():
    img = np.log(np.full(SMALL.shape, 0.5))
    assert len(generate_events([img] * 5, geometry=SMALL)) == 0


def test_step_of_two_thresholds_with_refractory():
    base = np.zeros(SMALL.shape)
    step = base.copy()
    step[3, 4] = 2 * 0.2 + 1e-9
    s = generate_events([base, step, step, step], CameraModel(0.2, 200), SMALL)
    assert [(e.t, e.x, e.y, e.pol) for e in s] == [(200, 4, 3, 1), (400, 4, 3, 1)]


def test_no_refractory_fires_burst():
    base = np.zeros(SMALL.shape)
    step = base.copy()
    step[3, 4] = -(3 * 0.2 + 1e-9)
    s = generate_events([base, step], CameraModel(0.2, 0), SMALL)
    assert s.t.tolist() == [200] * 3 and set(s.pol.tolist()) == {-1}


def test_geometry_mismatch():
    with pytest.raises(GeometryMismatch):
        generate_events([np.zeros((10, 10))], geometry=SMALL)


@pytest.mark.parametrize("refractory", [200, 0])
@pytest.mark.parametrize("seed", range(4))
def test_matches_scalar_oracle(seed, refractory, backend):
    cam = CameraModel(0.2, refractory)
    frames = moving_edge_scene(seed)
    s = generate_events(frames, cam, SMALL, backend)
    got = {}
    for e in s:
        got.setdefault((e.x, e.y), []).append((e.t, e.pol))
    assert got == replay_scene(frames, cam, SMALL.temporal_resolution_us)
    assert len(s) > 0


def test_polarity_follows_sign_of_change():
    base = np.zeros(SMALL.shape)
    nxt = base.copy()
    nxt[1, 1], nxt[2, 2] = 0.5, -0.5
    s = generate_events([base, nxt], CameraModel(0.2, 200), SMALL)
    assert {(e.x, e.y): e.pol for e in s} == {(1, 1): 1, (2, 2): -1}


@pytest.mark.parametrize("seed", range(4))
def test_polarity_on_moving_scene(seed):
    frames = moving_edge_scene(seed)
    s = generate_events(frames, CameraModel(), SMALL)
    assert len(s) > 0 and polarity_violations(s, frames, 0.2, 200) == 0


def test_add_noise_zero_rates_unchanged(clean_run):
    s = clean_run.stream
    assert add_noise(s, NoiseModel(0, 0), 5, 1_600_000) == s


def test_add_noise_deterministic_and_ordered():
    e = EventStream.empty()
    a = add_noise(e, NoiseModel(1.0, 5, 5000.0), 11, 200_000)
    b = add_noise(e, NoiseModel(1.0, 5, 5000.0), 11, 200_000)
    assert a == b and validate_stream(a).ok
    assert not (a == add_noise(e, NoiseModel(1.0, 5, 5000.0), 12, 200_000))


def test_background_rate_within_three_sigma():
    s = add_noise(EventStream.empty(), NoiseModel(10.0, 0), 7, 1_000_000)
    mean = 10.0 * 640 * 480
    assert abs(len(s) - mean) < 3 * math.sqrt(mean)
    assert s.t.min() >= 1 and s.t.max() <= 1_000_000


def test_noise_model_rejects_weak_hot_pixels():
    with pytest.raises(ValueError):
        NoiseModel(10.0, 20, 200.0)


def test_hot_pixel_premise(suite):
    noise = NoiseModel()
    s = add_noise(EventStream.empty(), noise, 21, 400_000)
    hot = set(hot_pixel_positions(noise, 21, s.geometry).tolist())
    hot_mask = np.zeros(s.geometry.n_pixels, bool)
    hot_mask[list(hot)] = True
    for t_c in range(2000, 400_001, 20_000):
        c = count_frame_oracle(s, t_c, 2).counts.reshape(-1)
        cold = c[~hot_mask]
        assert c[hot_mask].max() >= 5 * cold[cold > 0].mean()


def test_idle_hot_pixels_are_penalized(suite):
    noise = NoiseModel()
    s = add_noise(EventStream.empty(), noise, 4, 200_000)
    hot = hot_pixel_positions(noise, 4, s.geometry)
    checked = 0
    for t_c, f in stream_to_frames(s, WindowConfig(40), 40_000, 200_000)[::5]:
        b = mean_nonzero(f)
        d = sigmoid_penalize(f).values.reshape(-1)
        e = f.counts.reshape(-1).astype(float)
        for p in hot:
            if e[p] >= b + 6:
                assert d[p] < 0.01 * e[p]
                checked += 1
    assert checked > 0


def test_suite(suite):
    assert len(suite) == 10
    assert len({p.name for p in suite}) == 10
    assert make_object_suite(0) == suite
    assert make_object_suite(1) != suite
    for i, a in enumerate(suite):
        for b in suite[i + 1:]:
            assert a.to_dict() != b.to_dict()
    assert ObjectProfile.from_dict(suite[3].to_dict()) == suite[3]


def test_suite_spans_noise_levels(suite):
    rates = {p.name: p.noise_model().background_rate for p in suite}
    assert min(rates.values()) < rates["compact_light"] < max(rates.values())
    for p in suite:
        n = p.noise_model()
        assert n.background_rate * n.hot_multiplier >= 4000.0


def test_slip_travel_release_then_steady():
    v = 0.2
    assert slip_travel(v, 0.0) == 0.0 and slip_travel(v, -3.0) == 0.0
    t = np.arange(0.0, 400.0, 0.2)
    x = np.array([slip_travel(v, u) for u in t])
    speed = np.diff(x) / 0.2
    assert (speed[t[1:] < 100] > v).all() and (speed > v - 1e-9).all()
    # release makes the first ms several times faster than steady sliding
    assert speed[0] > 4 * v and abs(speed[-1] - v) < 1e-6
    assert slip_travel(v, 400.0) == pytest.approx(v * (400.0 + SLIP_RELEASE_MS), rel=1e-9)


def test_no_contact_run_is_idle_noise_only():
    p = ObjectProfile("ghost", footprint=((0, 1.0),), press_depth=0.0, slip_velocity=0.0)
    r = simulate_run(p, noise=NoiseModel(0.5, 2, 20_000.0), seed=1)
    assert r.timeline == ((0, GraspStage.IDLE),)
    assert r.signal_events == 0 and len(r.stream) > 0


def test_standard_timeline(clean_run):
    tl = clean_run.timeline
    assert [s for _, s in tl] == [GraspStage.IDLE, GraspStage.PRESS, GraspStage.SLIP, GraspStage.IDLE]
    assert tl[1][0] == PRESS_ONSET_MS * 1000
    assert all(b[0] > a[0] for a, b in zip(tl, tl[1:]))
    assert validate_stream(clean_run.stream).ok


def test_no_events_before_press(clean_run):
    assert clean_run.stream.t.min() > PRESS_ONSET_MS * 1000


def test_press_events_within_footprint(suite, clean_run):
    lay = MarkerLayout.default()
    s = clean_run.stream.slice_time(500_000, 540_000)
    inside = np.zeros(len(s), bool)
    for i, _ in suite[0].footprint:
        r = lay.pairs[i].base.expanded(2.0)
        inside |= (s.x >= r.x0) & (s.x < r.x1) & (s.y >= r.y0) & (s.y < r.y1)
    assert len(s) > 0 and inside.mean() >= 0.8


def test_run_deterministic(suite, clean_run):
    again = simulate_run(suite[0], noise=NoiseModel(0, 0), seed=3, run_index=1)
    assert again.stream == clean_run.stream


def test_backends_agree(suite):
    from neurotac.backend import available_backends
    if len(available_backends()) < 2:
        pytest.skip("compiled extension not built")
    a = simulate_run(suite[2], noise=NoiseModel(0, 0), seed=5, backend="python")
    b = simulate_run(suite[2], noise=NoiseModel(0, 0), seed=5, backend="cython")
    assert a.stream == b.stream


def test_bundle_round_trip(tmp_path, suite):
    r = simulate_run(suite[0], noise=NoiseModel(0.2, 2, 20_000.0), seed=2)
    d = write_run_bundle(r, tmp_path)
    assert d.name == "run_compact_light_0"
    assert (d / "timeline.csv").read_text().splitlines() == ["t_us,stage", "0,idle", "500000,press", "1000000,slip", "1400000,idle"]
    back = read_run_bundle(d)
    assert back.stream == r.stream and back.timeline == r.timeline and back.profile == r.profile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurotac.events import (
    HEADER_SIZE, MAGIC, RECORD_SIZE, Event, EventStream, InvariantViolation, MalformedHeader,
    SensorGeometry, TruncatedRecord, merge_streams, read_events, read_events_csv, validate_stream,
    write_events, write_events_csv,
)

from conftest import random_stream


def test_geometry_defaults():
    g = SensorGeometry()
    assert (g.width, g.height, g.temporal_resolution_us) == (640, 480, 200)
    assert g.shape == (480, 640)
    assert g.n_pixels == 307200


@pytest.mark.parametrize("kw", [dict(width=641), dict(height=482), dict(temporal_resolution_us=0), dict(width=0)])
def test_geometry_rejects(kw):
    with pytest.raises(ValueError):
        SensorGeometry(**kw)


def test_stream_columns_are_read_only():
    s = random_stream(0, 10)
    with pytest.raises(ValueError):
        s.t[0] = 5


def test_from_events_and_iteration():
    evs = [Event(1, 2, 10, 1), Event(3, 4, 20, -1)]
    s = EventStream.from_events(evs)
    assert list(s) == evs
    assert s[1] == evs[1]
    assert len(EventStream.from_events([])) == 0


def test_validate_empty_ok():
    assert validate_stream(EventStream.empty()).ok


def test_validate_timestamp_order():
    s = EventStream.from_events([Event(0, 0, 5, 1), Event(0, 0, 3, 1)])
    rep = validate_stream(s)
    assert [v.message for v in rep.violations] == ["timestamp order at index 1"]
    assert rep.violations[0].index == 1


def test_validate_x_bound():
    rep = validate_stream(EventStream.from_events([Event(640, 0, 1, 1)]))
    assert not rep.ok
    assert rep.violations[0].message.startswith("x out of bounds")


def test_validate_caps_at_100():
    n = 500
    s = EventStream(SensorGeometry(), np.arange(n), np.full(n, 700), np.zeros(n), np.ones(n))
    assert len(validate_stream(s).violations) == 100


@pytest.mark.parametrize("field,value,message", [
    ("t", None, "timestamp order"),
    ("x", 640, "x out of bounds"),
    ("y", 480, "y out of bounds"),
    ("pol", 0, "polarity"),
    ("pol", 2, "polarity"),
])
@pytest.mark.parametrize("seed", range(5))
def test_single_field_mutation_is_caught(seed, field, value, message):
    s = random_stream(seed, 200)
    assert validate_stream(s).ok
    cols = {k: getattr(s, k).copy() for k in ("t", "x", "y", "pol")}
    i = int(np.random.default_rng(seed).integers(1, 199))
    if field == "t":
        cols["t"][i] = cols["t"][i - 1] + 1
        cols["t"][i + 1:] = np.maximum(cols["t"][i + 1:], cols["t"][i])
        cols["t"][i + 1] = cols["t"][i] - 1
        i += 1
    else:
        cols[field][i] = value
    rep = validate_stream(EventStream(s.geometry, **cols))
    assert not rep.ok
    assert rep.violations[0].index == i
    assert rep.violations[0].message.startswith(message)


def test_round_trip_10k(tmp_path):
    s = random_stream(1)
    write_events(s, tmp_path / "a.evt1")
    assert read_events(tmp_path / "a.evt1") == s


def test_write_is_deterministic(tmp_path):
    s = random_stream(2, 1000)
    write_events(s, tmp_path / "a.evt1")
    write_events(s, tmp_path / "b.evt1")
    assert (tmp_path / "a.evt1").read_bytes() == (tmp_path / "b.evt1").read_bytes()


def test_byte_layout(tmp_path):
    s = EventStream.from_events([Event(0x0102, 0x0304, 0x05060708, -1)], SensorGeometry(1000, 1000, 100))
    write_events(s, tmp_path / "one.evt1")
    data = (tmp_path / "one.evt1").read_bytes()
    assert len(data) == HEADER_SIZE + RECORD_SIZE == 33
    assert data[:4] == b"\x45\x56\x54\x31" == MAGIC
    assert data[4:20] == bytes.fromhex("e803" "e803" "64000000" "0100000000000000")
    assert data[20:] == bytes.fromhex("0807060500000000" "0201" "0403" "ff")


def test_empty_file_keeps_geometry(tmp_path):
    g = SensorGeometry(100, 50, 10)
    write_events(EventStream.empty(g), tmp_path / "e.evt1")
    s = read_events(tmp_path / "e.evt1")
    assert len(s) == 0 and s.geometry == g


def test_corrupt_magic(tmp_path):
    p = tmp_path / "x.evt1"
    write_events(random_stream(3, 5), p)
    data = bytearray(p.read_bytes())
    data[0] = ord("X")
    p.write_bytes(bytes(data))
    with pytest.raises(MalformedHeader):
        read_events(p)


def test_truncated_record(tmp_path):
    p = tmp_path / "x.evt1"
    write_events(random_stream(3, 5), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TruncatedRecord):
        read_events(p)


def test_short_header(tmp_path):
    p = tmp_path / "x.evt1"
    p.write_bytes(b"EVT1\x00")
    with pytest.raises(MalformedHeader):
        read_events(p)


def test_read_reports_violation_index(tmp_path):
    s = EventStream.from_events([Event(0, 0, 5, 1), Event(0, 0, 9, 1), Event(0, 0, 7, 1)])
    p = tmp_path / "bad.evt1"
    with pytest.raises(InvariantViolation):
        write_events(s, p)
    # bypass the writer check and corrupt the file directly
    write_events(EventStream.from_events([Event(0, 0, 5, 1), Event(0, 0, 9, 1), Event(0, 0, 11, 1)]), p)
    data = bytearray(p.read_bytes())
    data[HEADER_SIZE + 2 * RECORD_SIZE] = 7
    p.write_bytes(bytes(data))
    with pytest.raises(InvariantViolation) as exc:
        read_events(p)
    assert exc.value.index == 2


def test_csv_round_trip(tmp_path):
    s = random_stream(4, 300)
    write_events_csv(s, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t_us,x,y,pol"
    assert read_events_csv(tmp_path / "e.csv") == s


def test_csv_bad_header(tmp_path):
    (tmp_path / "e.csv").write_text("t,x,y,p\n1,2,3,1\n")
    with pytest.raises(MalformedHeader):
        read_events_csv(tmp_path / "e.csv")


def test_merge_is_stable_and_ordered():
    a = EventStream.from_events([Event(1, 1, 10, 1), Event(1, 1, 30, 1)])
    b = EventStream.from_events([Event(2, 2, 10, -1), Event(2, 2, 20, -1)])
    m = merge_streams(a, b)
    assert m.t.tolist() == [10, 10, 20, 30]
    assert m.x.tolist() == [1, 2, 2, 1]


def test_slice_time_half_open():
    s = EventStream.from_events([Event(0, 0, t, 1) for t in (10, 20, 30)])
    assert s.slice_time(10, 30).t.tolist() == [20, 30]


events_st = st.lists(
    st.tuples(st.integers(0, 639), st.integers(0, 479), st.integers(0, 2**40), st.sampled_from([-1, 1])),
    max_size=60,
)


@settings(max_examples=60, deadline=None)
@given(events_st)
def test_round_trip_property(tmp_path_factory, evs):
    evs = sorted(evs, key=lambda e: e[2])
    s = EventStream.from_events([Event(*e) for e in evs])
    p = tmp_path_factory.mktemp("rt") / "s.evt1"
    write_events(s, p)
    back = read_events(p)
    assert back == s
    assert p.stat().st_size == HEADER_SIZE + RECORD_SIZE * len(evs)

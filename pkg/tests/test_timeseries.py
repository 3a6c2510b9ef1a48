import csv
import io
import json
import random
import threading
from datetime import datetime, timedelta, timezone

import pytest

from ami.timeseries import (
    CSV_HEADER,
    FULL_RANGE,
    AggregateStats,
    AppendLogReadingStore,
    InvalidRangeError,
    MemoryReadingStore,
    SensorReading,
    TimeRange,
    UnknownFieldError,
    format_measurement,
    format_timestamp,
    parse_timestamp,
)

T0 = datetime(2025, 1, 1, tzinfo=timezone.utc)


def make_reading(offset_s=0, device_id="s1", **overrides):
    fields = dict(temperature=21.5, humidity=40.0, co2=600.0, pm1_0=3.0, pm2_5=8.0, pm10=12.0)
    fields.update(overrides)
    return SensorReading.new(device_id=device_id, captured_at=T0 + timedelta(seconds=offset_s), **fields)


def random_reading(rng, max_offset=10_000):
    pm = sorted(round(rng.uniform(0, 80), 3) for _ in range(3))
    if rng.random() < 0.2:
        pm[0], pm[2] = pm[2], pm[0]
    return SensorReading.new(
        device_id=f"dev{rng.randrange(4)}",
        captured_at=T0 + timedelta(seconds=rng.randrange(max_offset)),
        temperature=round(rng.uniform(-30, 45), 3),
        humidity=round(rng.uniform(0, 100), 3),
        co2=round(rng.uniform(400, 2000), 3),
        pm1_0=pm[0],
        pm2_5=pm[1],
        pm10=pm[2],
    )


class TestSensorReading:
    def test_flags_empty_when_pm_ordered(self):
        assert make_reading().flags == frozenset()

    def test_pm_ordering_flag_set_iff_violated(self):
        r = make_reading(pm2_5=20.0, pm10=12.0)
        assert r.flags == frozenset({"pm-ordering"})

    @pytest.mark.parametrize("overrides", [
        {"humidity": -1.0},
        {"humidity": 101.0},
        {"co2": -0.5},
        {"pm1_0": -1.0},
        {"temperature": 95.0},
        {"temperature": -95.0},
    ])
    def test_bounds_rejected(self, overrides):
        with pytest.raises(ValueError):
            make_reading(**overrides)

    def test_empty_device_id_rejected(self):
        with pytest.raises(ValueError):
            make_reading(device_id="")

    def test_inconsistent_flags_rejected(self):
        with pytest.raises(ValueError):
            SensorReading(
                device_id="s1", captured_at=T0, temperature=20.0, humidity=40.0,
                co2=500.0, pm1_0=1.0, pm2_5=2.0, pm10=3.0,
                flags=frozenset({"pm-ordering"}),
            )

    def test_timestamp_truncated_to_seconds(self):
        r = SensorReading.new("s1", T0 + timedelta(microseconds=750_000),
                              20.0, 40.0, 500.0, 1.0, 2.0, 3.0)
        assert r.captured_at == T0

    def test_dict_round_trip(self):
        r = make_reading(pm2_5=20.0, pm10=12.0)
        assert SensorReading.from_dict(r.to_dict()) == r


class TestTimestamps:
    def test_parse_rfc3339_z(self):
        assert parse_timestamp("2025-01-01T00:00:00Z") == T0

    def test_parse_offset(self):
        assert parse_timestamp("2025-01-01T01:00:00+01:00") == T0

    def test_parse_epoch_seconds(self):
        assert parse_timestamp(1735689600) == T0

    def test_format_round_trip(self):
        assert parse_timestamp(format_timestamp(T0)) == T0

    @pytest.mark.parametrize("bad", ["yesterday", "", "2025-13-40T00:00:00Z", None, True, float("nan")])
    def test_unparseable(self, bad):
        with pytest.raises(ValueError):
            parse_timestamp(bad)


class TestInsert:
    def test_first_insert_gets_id_one(self, store):
        assert store.insert(make_reading()) == 1

    def test_ids_monotone(self, store):
        assert store.insert(make_reading(0)) == 1
        assert store.insert(make_reading(1)) == 2

    def test_read_your_write(self, store):
        r = make_reading()
        store.insert(r)
        assert store.query_recent(1) == [r]


class TestQueryRecent:
    def test_empty_store(self, store):
        assert store.query_recent(5) == []

    def test_newest_first(self, store):
        r_old, r_mid, r_new = make_reading(0), make_reading(10), make_reading(20)
        for r in (r_mid, r_new, r_old):
            store.insert(r)
        assert store.query_recent(2) == [r_new, r_mid]

    def test_limit_zero_rejected(self, store):
        with pytest.raises(ValueError):
            store.query_recent(0)

    def test_tie_broken_by_stored_id(self, store):
        a, b = make_reading(0, device_id="a"), make_reading(0, device_id="b")
        store.insert(a)
        store.insert(b)
        assert store.query_recent(2) == [b, a]

    def test_matches_full_sort_oracle(self, store):
        rng = random.Random(1)
        rows = []
        for _ in range(100):
            r = random_reading(rng)
            rows.append((store.insert(r), r))
        # Oracle: sort everything by (captured_at, id) descending, take 10.
        rows.sort(key=lambda row: (row[1].captured_at, row[0]), reverse=True)
        expected = [r for _, r in rows[:10]]
        assert store.query_recent(10) == expected


class TestQueryRange:
    def test_invalid_range_rejected(self):
        with pytest.raises(InvalidRangeError):
            TimeRange(T0, T0 - timedelta(seconds=1))

    def test_empty_window(self, store):
        store.insert(make_reading(100))
        assert store.query_range(TimeRange(T0, T0 + timedelta(seconds=50))) == []

    def test_endpoints_inclusive(self, store):
        r = make_reading(5)
        store.insert(r)
        point = TimeRange(r.captured_at, r.captured_at)
        assert store.query_range(point) == [r]

    def test_matches_linear_scan_oracle(self, store):
        rng = random.Random(2)
        rows = [(store.insert(r), r) for r in (random_reading(rng) for _ in range(200))]
        window = TimeRange(T0 + timedelta(seconds=2000), T0 + timedelta(seconds=7000))
        expected = sorted(
            ((sid, r) for sid, r in rows if window.start <= r.captured_at <= window.end),
            key=lambda row: (row[1].captured_at, row[0]),
        )
        assert store.query_range(window) == [r for _, r in expected]

    def test_recent_equals_reversed_range_prefix(self, store):
        rng = random.Random(3)
        for _ in range(60):
            store.insert(random_reading(rng))
        everything = store.query_range(FULL_RANGE)
        for k in (1, 7, 60, 100):
            assert store.query_recent(k) == list(reversed(everything))[:k]


class TestAggregate:
    def test_simple_arithmetic(self, store):
        for value in (10.0, 20.0, 30.0):
            store.insert(make_reading(int(value), co2=value * 10))
        stats = store.aggregate(FULL_RANGE, "co2")
        assert (stats.min, stats.max, stats.mean) == (100.0, 300.0, 200.0)
        assert stats.count == 3

    def test_empty_range(self, store):
        stats = store.aggregate(FULL_RANGE, "temperature")
        assert stats.count == 0
        assert stats.min is None and stats.max is None and stats.mean is None
        assert stats.to_dict() == {"field": "temperature", "count": 0}

    def test_unknown_field(self, store):
        with pytest.raises(UnknownFieldError):
            store.aggregate(FULL_RANGE, "pm99")

    def test_matches_naive_sum_oracle(self, store):
        rng = random.Random(4)
        readings = [random_reading(rng) for _ in range(1000)]
        for r in readings:
            store.insert(r)
        for field_name in ("temperature", "humidity", "co2", "pm2_5"):
            stats = store.aggregate(FULL_RANGE, field_name)
            values = [getattr(r, field_name) for r in readings]
            naive_mean = sum(values) / len(values)
            assert stats.count == 1000
            assert stats.min == min(values)
            assert stats.max == max(values)
            assert abs(stats.mean - naive_mean) <= 1e-9 * abs(naive_mean)

    def test_mean_within_bounds(self, store):
        rng = random.Random(5)
        for _ in range(37):
            store.insert(random_reading(rng))
        stats = store.aggregate(FULL_RANGE, "pm10")
        assert stats.min <= stats.mean <= stats.max


def parse_csv(data: bytes):
    """Independent CSV reader used as the round-trip oracle."""
    rows = list(csv.DictReader(io.StringIO(data.decode("utf-8"))))
    return [
        SensorReading.new(
            device_id=row["device_id"],
            captured_at=parse_timestamp(row["captured_at"]),
            temperature=float(row["temperature"]),
            humidity=float(row["humidity"]),
            co2=float(row["co2"]),
            pm1_0=float(row["pm1_0"]),
            pm2_5=float(row["pm2_5"]),
            pm10=float(row["pm10"]),
        )
        for row in rows
    ]


class TestExportCsv:
    def test_empty_range_header_only(self, store):
        assert store.export_csv(FULL_RANGE) == (CSV_HEADER + "\n").encode()

    def test_single_reading_round_trips(self, store):
        r = make_reading()
        store.insert(r)
        data = store.export_csv(FULL_RANGE)
        lines = data.decode().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 2
        assert parse_csv(data) == [r]

    def test_round_trip_preserves_multiset(self, store):
        rng = random.Random(6)
        readings = [random_reading(rng) for _ in range(150)]
        for r in readings:
            store.insert(r)
        recovered = parse_csv(store.export_csv(FULL_RANGE))
        assert sorted(recovered, key=lambda r: (r.captured_at, r.device_id, r.temperature)) == \
            sorted(readings, key=lambda r: (r.captured_at, r.device_id, r.temperature))

    def test_lf_newlines_only(self, store):
        store.insert(make_reading())
        assert b"\r" not in store.export_csv(FULL_RANGE)

    def test_six_decimal_cap(self, store):
        store.insert(make_reading(temperature=21.12345678, humidity=40.0))
        body = store.export_csv(FULL_RANGE).decode().splitlines()[1]
        assert "21.123457" in body
        assert ",40," in body


@pytest.mark.parametrize("value,expected", [
    (12.0, "12"),
    (12.5, "12.5"),
    (0.0000001, "0"),
    (-0.0, "0"),
    (3.1400001, "3.14"),
])
def test_format_measurement(value, expected):
    assert format_measurement(value) == expected


class TestAppendLog:
    def test_replay_restores_rows_and_ids(self, tmp_path):
        path = tmp_path / "readings.log"
        first = AppendLogReadingStore(path)
        readings = [make_reading(i, device_id=f"d{i}") for i in range(5)]
        ids = [first.insert(r) for r in readings]
        first.close()
        assert ids == [1, 2, 3, 4, 5]

        reopened = AppendLogReadingStore(path)
        assert reopened.query_range(FULL_RANGE) == readings
        assert reopened.insert(make_reading(99)) == 6
        reopened.close()

    def test_log_lines_are_plain_json(self, tmp_path):
        path = tmp_path / "readings.log"
        store = AppendLogReadingStore(path)
        store.insert(make_reading())
        store.close()
        lines = path.read_text().splitlines()
        record = json.loads(lines[0])
        assert set(record) == {
            "device_id", "captured_at", "temperature", "humidity",
            "co2", "pm1_0", "pm2_5", "pm10", "flags",
        }


def test_concurrent_writers_keep_ids_dense():
    store = MemoryReadingStore()
    errors = []

    def writer(k):
        try:
            for i in range(50):
                store.insert(make_reading(k * 100 + i, device_id=f"w{k}"))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    rows = store._snapshot()
    assert [sid for sid, _ in rows] == list(range(1, 201))


@pytest.fixture(params=["memory", "appendlog"])
def store(request, tmp_path):
    if request.param == "memory":
        yield MemoryReadingStore()
    else:
        s = AppendLogReadingStore(tmp_path / "readings.log")
        yield s
        s.close()

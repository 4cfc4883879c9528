import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvos import bench
from streamvos.bench import BenchConfig, BenchRow


def small(**kw):
    base = dict(policies=["mca", "full"], lengths=[25], delta=4, grid=16, stride=4, dim=8, warmup=1, repetitions=2)
    base.update(kw)
    return BenchConfig(**base)


@pytest.fixture(scope="module")
def rows():
    return bench.run(small())


def test_one_row_per_frame_per_cell(rows):
    assert len(rows) == 2 * 24
    assert [r.frame_index for r in rows if r.policy == "mca"] == list(range(1, 25))


def test_token_accounting(rows):
    hw = 4 * 4
    for r in rows:
        if r.policy == "mca":
            assert r.tokens_stored == (2 if r.frame_index >= 4 else 1) * hw
        else:
            assert r.tokens_stored == (1 + r.frame_index // 4) * hw
        assert r.logical_bytes == r.tokens_stored * 8 * 8
        assert r.ms_per_frame > 0


def test_csv_format_and_roundtrip(rows, tmp_path):
    path = tmp_path / "b.csv"
    bench.write_csv(rows, path)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    lines = raw.decode().splitlines()
    assert lines[0] == ",".join(bench.COLUMNS)
    assert all(len(l.split(",")[-1].split(".")[1]) == 4 for l in lines[1:])
    back = bench.read_csv(path)
    assert [(r.policy, r.frame_index, r.tokens_stored) for r in back] == [(r.policy, r.frame_index, r.tokens_stored) for r in rows]
    assert all(abs(a.ms_per_frame - b.ms_per_frame) <= 5e-5 for a, b in zip(back, rows))
    # formatted values are a fixed point of parse then write
    assert bench.dumps_csv(back) == raw.decode()


@given(st.lists(st.tuples(st.sampled_from(["mca", "full", "window:3"]), st.integers(2, 10**6),
                          st.integers(0, 10**6), st.integers(0, 10**9), st.integers(0, 10**6).map(lambda x: x / 1e4)),
                max_size=20))
@settings(max_examples=50, deadline=None)
def test_csv_parse_back_equals_rows(items):
    rows = [BenchRow(p, n, t, k, 8 * k, ms) for p, n, t, k, ms in items]
    assert bench.loads_csv(bench.dumps_csv(rows)) == rows


def test_rejects_bad_header():
    with pytest.raises(ValueError):
        bench.loads_csv("a,b\n1,2\n")


@pytest.mark.parametrize("kw", [dict(lengths=[]), dict(repetitions=0), dict(lengths=[1]), dict(policies=["lru"]),
                                dict(warmup=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small(**kw)


def test_policy_names_normalized():
    assert small(policies=["MCA", "Window:2"]).policies == ["mca", "window:2"]


def test_structural_columns_deterministic(rows):
    again = bench.run(small())
    strip = lambda rs: [(r.policy, r.video_length, r.frame_index, r.tokens_stored, r.logical_bytes) for r in rs]
    assert strip(again) == strip(rows)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv(bench.THREADS_ENV, "2")
    assert bench.worker_count(8) == 2
    assert bench.worker_count(1) == 1
    monkeypatch.delenv(bench.THREADS_ENV)
    assert bench.worker_count(3) == 3
    monkeypatch.setenv(bench.THREADS_ENV, "many")
    with pytest.raises(ValueError):
        bench.worker_count(2)


def test_parallel_cells_match_sequential_structure(rows, monkeypatch):
    monkeypatch.setenv(bench.THREADS_ENV, "2")
    par = bench.run(small(repetitions=1), workers=2)
    assert [(r.policy, r.frame_index, r.tokens_stored) for r in par] == [(r.policy, r.frame_index, r.tokens_stored) for r in rows]


def test_flatness_of_synthetic_series():
    t = np.arange(1, 2001)
    flat = 10 + 0.01 * np.sin(t)
    growing = 10 + 0.01 * t
    s, med = bench.flatness(t, flat)
    assert abs(s) < 0.2 * med
    s, med = bench.flatness(t, growing)
    assert s == pytest.approx(0.01 * 2000) and s > 0.2 * med
    assert bench.smoothed_at(t, growing, 1000) == pytest.approx(20.0)

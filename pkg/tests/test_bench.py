import csv

import numpy as np
import pytest

from matchfree import bench
from matchfree.bench import BenchResult, BenchSpec, CellResult

TINY = BenchSpec(grid=((0, 5), (3, 8), (3, 16)), reps=5, probe_dim=8, probe_depth=1, num_classes=4, min_sample_s=1e-4)


@pytest.mark.parametrize(
    "kw", [{"reps": 4}, {"warmup": 0}, {"grid": ((-1, 5),)}, {"grid": ((2, 0),)}, {"methods": ("magic",)}]
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        BenchSpec(**kw)


def test_default_grid():
    assert BenchSpec().grid == ((20, 100), (20, 300), (20, 900)) and BenchSpec().reps >= 5


def test_random_instance_is_seeded():
    a, b = bench.random_instance(3, 7, 5, 11), bench.random_instance(3, 7, 5, 11)
    np.testing.assert_array_equal(a[1].boxes, b[1].boxes)
    np.testing.assert_array_equal(a[0].labels, b[0].labels)


@pytest.fixture(scope="module")
def tiny_result():
    return bench.run_bench(TINY)


def test_cells_and_empty_scene(tiny_result):
    r = tiny_result
    assert r.get(bench.HUNGARIAN, 0, 5) is None
    assert r.get(bench.MATCHFREE_FWDBWD, 0, 5) is not None
    for m, n in ((3, 8), (3, 16)):
        for method in bench.METHODS:
            c = r.get(method, m, n)
            assert c.median_ms > 0 and c.iqr_ms >= 0 and c.reps == 5
    assert r.env["cores"] >= 1 and "numpy" in r.env


def test_csv_round_trip(tiny_result, tmp_path):
    text = bench.emit_report(tiny_result, tmp_path / "b.csv")
    with (tmp_path / "b.csv").open() as fh:
        assert next(csv.reader(fh)) == bench.CSV_FIELDS
    back = bench.read_report(tmp_path / "b.csv")
    assert [(c.method, c.m, c.n, c.median_ms, c.iqr_ms, c.reps) for c in back.cells] == [
        (c.method, c.m, c.n, c.median_ms, c.iqr_ms, c.reps) for c in tiny_result.cells
    ]
    assert (tmp_path / "b_summary.txt").read_text() == text
    assert "speedup hungarian/matchfree_fwdbwd" in text


def test_empty_result_writes_header_only(tmp_path):
    bench.emit_report(BenchResult(), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(bench.CSV_FIELDS)
    assert bench.read_report(tmp_path / "e.csv").cells == []


def test_speedup_and_growth_arithmetic():
    r = BenchResult(
        [
            CellResult(bench.HUNGARIAN, 2, 10, 8.0, 0.1, 5),
            CellResult(bench.MATCHFREE_FWDBWD, 2, 10, 2.0, 0.1, 5),
            CellResult(bench.HUNGARIAN, 2, 20, 64.0, 0.1, 5),
            CellResult(bench.MATCHFREE_FWDBWD, 2, 20, 4.0, 0.1, 5),
        ]
    )
    assert (2, 20, bench.MATCHFREE_FWDBWD, 16.0) in bench.speedups(r)
    assert bench.growth(r, bench.HUNGARIAN, 2, 10, 20) == 8.0
    checks = bench.shape_checks(r, m=2, n_lo=10, n_hi=20)
    assert len(checks) == 4 and all(c.passed for c in checks)
    r.cells[3].median_ms = 100.0
    assert not all(c.passed for c in bench.shape_checks(r, m=2, n_lo=10, n_hi=20))


def test_shape_checks_skip_missing_cells():
    assert bench.shape_checks(BenchResult()) == []


def test_timer_inner_loop():
    med, iqr, inner = bench._time(lambda: None, 5, 1, 1e-3)
    assert inner > 1 and med >= 0 and iqr >= 0

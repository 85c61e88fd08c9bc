import csv
import json
import math

import numpy as np
import pytest

from vir import bench
from vir.bench import BenchRecord, BenchSpec, emit, fit_scaling_exponent, read_records, run_benchmark
from vir.cli import main, scaling_checks
from vir.errors import ParameterError

SMALL = dict(dim=16, heads=2, patch=16, repeats=1, warmup=0)


def test_single_resolution_record():
    [rec] = run_benchmark(BenchSpec(resolutions=[32], **SMALL))
    assert (rec.resolution, rec.N, rec.patch, rec.status) == (32, 4, 16, "ok")
    assert len(rec.timings) == 1
    assert rec.median_seconds == rec.timings[0]
    assert rec.tokens_per_sec == pytest.approx(4 / rec.median_seconds)


def test_recurrent_peak_independent_of_resolution():
    recs = run_benchmark(BenchSpec(mode="recurrent", resolutions=[224, 448], exclude_io=True,
                                   **SMALL))
    assert recs[0].peak_live_f64 == recs[1].peak_live_f64 > 0


def test_io_counted_unless_excluded():
    with_io, = run_benchmark(BenchSpec(mode="recurrent", resolutions=[64], **SMALL))
    without, = run_benchmark(BenchSpec(mode="recurrent", resolutions=[64], exclude_io=True,
                                       **SMALL))
    assert with_io.peak_live_f64 - without.peak_live_f64 == 5 * 17 * 16


def test_parallel_peak_grows():
    recs = run_benchmark(BenchSpec(mode="parallel", lengths=[8, 16], exclude_io=True, **SMALL))
    assert [r.resolution for r in recs] == [0, 0]
    assert recs[1].peak_live_f64 > 3 * recs[0].peak_live_f64


def test_full_model_and_2d():
    recs = run_benchmark(BenchSpec(mode="recurrent", mask="2d", resolutions=[32],
                                   full_model=True, depth=1, **SMALL))
    assert recs[0].status == "ok"


def test_batch_parallel():
    [rec] = run_benchmark(BenchSpec(resolutions=[32], batch_parallel=3, **SMALL))
    assert rec.tokens_per_sec == pytest.approx(3 * 4 / rec.median_seconds)


def test_oom_recorded(monkeypatch):
    monkeypatch.setattr(bench, "_available_bytes", lambda: 1)
    [rec] = run_benchmark(BenchSpec(resolutions=[32], **SMALL))
    assert rec.status == "oom" and math.isnan(rec.median_seconds)


@pytest.mark.parametrize("bad", [dict(resolutions=[30]), dict(repeats=0), dict(dtype="f16"),
                                 dict(lengths=[8], mask="2d"), dict(lengths=[0]),
                                 dict(resolutions=[])])
def test_spec_rejects(bad):
    with pytest.raises(ParameterError):
        BenchSpec(**bad)


def test_fit_quadratic_and_linear():
    ns = [1024, 2048, 4096, 8192]
    assert fit_scaling_exponent([(n, 3e-9 * n * n) for n in ns]) == pytest.approx(2.0, abs=1e-6)
    assert fit_scaling_exponent([(n, 7e-6 * n) for n in ns]) == pytest.approx(1.0, abs=1e-6)


def test_fit_skips_oom_and_needs_three():
    recs = [BenchRecord("parallel", "1d", 0, 16, n, 8, 2, 64, "f64", t, n / t, 0)
            for n, t in [(10, 1.0), (20, 4.0)]]
    with pytest.raises(ParameterError):
        fit_scaling_exponent(recs)
    recs.append(BenchRecord("parallel", "1d", 0, 16, 40, 8, 2, 64, "f64", math.nan, math.nan,
                            -1, status="oom"))
    with pytest.raises(ParameterError):
        fit_scaling_exponent(recs)


def test_emit_csv(tmp_path):
    recs = run_benchmark(BenchSpec(resolutions=[32], **SMALL))
    emit(recs, "csv", tmp_path / "one.csv")
    lines = (tmp_path / "one.csv").read_text().splitlines()
    assert len(lines) == 2
    assert tuple(lines[0].split(",")) == bench.CSV_FIELDS
    emit([], "csv", tmp_path / "none.csv")
    assert (tmp_path / "none.csv").read_text().splitlines() == [",".join(bench.CSV_FIELDS)]


def test_csv_json_roundtrip(tmp_path):
    recs = run_benchmark(BenchSpec(resolutions=[32, 64], **SMALL))
    emit(recs, "csv", tmp_path / "r.csv")
    emit(recs, "json", tmp_path / "r.json")
    from_csv = read_records(tmp_path / "r.csv", "csv")
    from_json = read_records(tmp_path / "r.json", "json")
    for a, b in zip(from_csv, from_json):
        for name in bench.CSV_FIELDS:
            assert getattr(a, name) == getattr(b, name)
    assert json.loads((tmp_path / "r.json").read_text())[0]["mode"] == "parallel"


def test_emit_bad_format(tmp_path):
    with pytest.raises(ParameterError):
        emit([], "xml", tmp_path / "x")


def test_emit_unwritable():
    with pytest.raises(OSError):
        emit([], "csv", "/nonexistent-dir/out.csv")


def test_scaling_checks_verdicts():
    def rec(n, t, peak=10):
        return BenchRecord("parallel", "1d", 0, 16, n, 8, 2, 64, "f32", t, n / t, peak)
    quad = [rec(n, 1e-9 * n * n) for n in (100, 200, 400)]
    assert all(ok for _, ok in scaling_checks(quad, "parallel"))
    assert not all(ok for _, ok in scaling_checks(quad, "chunkwise"))
    flat = [rec(n, 1.0, peak) for n, peak in ((1, 5), (2, 5), (3, 6))]
    assert scaling_checks(flat, "recurrent")[0][1] is False


class TestCli:
    def test_run_ok(self, tmp_path, capsys):
        out = tmp_path / "r.csv"
        code = main(["run", "--res", "32,64", "--dim", "16", "--heads", "2", "--repeats", "1",
                     "--warmup", "0", "--out", str(out)])
        assert code == 0
        with open(out, newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_run_json(self, tmp_path):
        out = tmp_path / "r.json"
        assert main(["run", "--res", "32", "--dim", "16", "--heads", "2", "--repeats", "1",
                     "--format", "json", "--out", str(out)]) == 0
        assert len(json.loads(out.read_text())) == 1

    def test_strict_failure_exits_1(self, capsys):
        # recurrent peaks differ when io is counted, so the strict check fails
        code = main(["run", "--mode", "recurrent", "--res", "32,64,96", "--dim", "16",
                     "--heads", "2", "--repeats", "1", "--warmup", "0", "--strict"])
        assert code == 1
        assert "[FAIL]" in capsys.readouterr().out

    def test_informational_without_strict(self, capsys):
        code = main(["run", "--mode", "recurrent", "--res", "32,64,96", "--dim", "16",
                     "--heads", "2", "--repeats", "1", "--warmup", "0"])
        assert code == 0
        assert "[info]" in capsys.readouterr().out

    def test_strict_recurrent_pass(self):
        assert main(["run", "--mode", "recurrent", "--res", "32,64,96", "--dim", "16",
                     "--heads", "2", "--repeats", "1", "--warmup", "0", "--exclude-io",
                     "--strict"]) == 0

    def test_unwritable_out(self, capsys):
        code = main(["run", "--res", "32", "--dim", "16", "--heads", "2", "--repeats", "1",
                     "--out", "/nonexistent-dir/out.csv"])
        assert code == 2

    @pytest.mark.parametrize("argv", [["run", "--res", "30"], ["run", "--mode", "fast"],
                                      ["run", "--res", "a,b"], [], ["frobnicate"],
                                      ["run", "--dim", "10", "--heads", "4", "--res", "32"]])
    def test_usage_errors(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            code = main(argv)
            raise SystemExit(code)
        assert exc.value.code == 2

    def test_verify(self, capsys):
        assert main(["verify"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_verify_zero_tolerance_fails(self, capsys):
        assert main(["verify", "--tol", "0"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_verify_negative_tolerance(self):
        assert main(["verify", "--tol", "-1"]) == 2

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "PASS" in capsys.readouterr().out


def test_accounting_deterministic_across_repeats():
    spec = BenchSpec(mode="chunkwise", lengths=[100], dim=16, heads=2, chunk=8, repeats=3,
                     warmup=0)
    _, peaks = bench._measure(spec, 0, 100)
    assert len(set(peaks)) == 1


def test_memory_laws():
    def peaks(mode, lengths, chunk=8):
        spec = BenchSpec(mode=mode, lengths=lengths, dim=16, heads=2, chunk=chunk, repeats=1,
                         warmup=0, exclude_io=True)
        return [r.peak_live_f64 for r in run_benchmark(spec)]

    assert len(set(peaks("recurrent", [10, 100, 1000]))) == 1
    # chunkwise: N-independent once N >= C, growing with C^2
    assert len(set(peaks("chunkwise", [64, 256, 1024]))) == 1
    by_chunk = [peaks("chunkwise", [256], c)[0] for c in (8, 16, 32)]
    assert by_chunk[2] - by_chunk[1] > 3 * (by_chunk[1] - by_chunk[0]) > 0
    par = peaks("parallel", [100, 200, 400])
    assert all(p2 >= 4 * p1 * 0.99 for p1, p2 in zip(par, par[1:]))


@pytest.mark.slow
def test_parallel_doubling_ratio():
    recs = run_benchmark(BenchSpec(mode="parallel", lengths=[2048, 4096], dim=256, heads=4,
                                   repeats=5, warmup=2, exclude_io=True))
    ratio = recs[1].median_seconds / recs[0].median_seconds
    assert 3.0 <= ratio <= 5.5, ratio

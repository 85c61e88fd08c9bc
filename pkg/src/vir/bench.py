"""Throughput and accounted-memory scaling of the retention modes."""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from vir import accounting
from vir.encoder import EncoderConfig, WeightStore, encoder_forward, init_weights, multi_head_retention
from vir.errors import ParameterError
from vir.tensor import Rng, fill_uniform

CSV_FIELDS = ("mode", "mask", "resolution", "patch", "N", "dim", "heads", "chunk", "dtype",
              "median_seconds", "tokens_per_sec", "peak_live_f64", "status")
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class BenchSpec:
    mode: str = "parallel"
    mask: str = "1d"
    resolutions: list[int] = field(default_factory=lambda: [224, 448, 768, 1024])
    patch: int = 16
    dim: int = 256
    heads: int = 4
    chunk: int = 64
    repeats: int = 5
    warmup: int = 2
    dtype: str = "f64"
    seed: int = 42
    full_model: bool = False
    depth: int = 2
    exclude_io: bool = False
    batch_parallel: int = 1
    lengths: list[int] | None = None

    def __post_init__(self):
        positive = ("patch", "dim", "heads", "chunk", "repeats", "depth", "batch_parallel")
        for name in positive:
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup < 0:
            raise ParameterError(f"warmup must be >= 0, got {self.warmup}")
        if self.dtype not in DTYPES:
            raise ParameterError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.lengths is not None:
            if self.mask != "1d" or self.full_model:
                raise ParameterError("a sequence-length scan needs the 1d mask and a single layer")
            if not self.lengths or min(self.lengths) < 1:
                raise ParameterError(f"lengths must be positive, got {self.lengths}")
            return
        if not self.resolutions:
            raise ParameterError("at least one resolution is required")
        for res in self.resolutions:
            if res < 1 or res % self.patch:
                raise ParameterError(f"resolution {res} is not a positive multiple of "
                                     f"patch {self.patch}")

    def points(self) -> list[tuple[int, int, int]]:
        """``(resolution, N, tokens processed)`` per measurement.

        Image scans process the N patches plus the class token. A length scan
        (``lengths`` set) processes exactly N tokens and reports resolution 0.
        """
        if self.lengths is not None:
            return [(0, n, n) for n in self.lengths]
        return [(res, (res // self.patch) ** 2, (res // self.patch) ** 2 + 1)
                for res in self.resolutions]

    def config(self, resolution: int) -> EncoderConfig:
        if resolution == 0:
            resolution = self.patch
        return EncoderConfig(image_size=resolution, patch_size=self.patch, model_dim=self.dim,
                             depth=self.depth if self.full_model else 1, heads=self.heads,
                             mask_mode=self.mask, mode=self.mode, chunk_size=self.chunk)


@dataclass
class BenchRecord:
    mode: str
    mask: str
    resolution: int
    patch: int
    N: int
    dim: int
    heads: int
    chunk: int
    dtype: str
    median_seconds: float
    tokens_per_sec: float
    peak_live_f64: int
    status: str = "ok"
    timings: list[float] = field(default_factory=list)


def _available_bytes() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _check_fits(spec: BenchSpec, tokens: int) -> None:
    if spec.mode != "parallel":
        return
    need = 2 * tokens * tokens * np.dtype(DTYPES[spec.dtype]).itemsize * spec.batch_parallel
    avail = _available_bytes()
    if avail is not None and need > avail:
        raise MemoryError(f"parallel mode needs ~{need} bytes, {avail} available")


def _make_workload(spec: BenchSpec, resolution: int, tokens: int, seed: int):
    """Returns ``(run, io_floats)``; ``run()`` performs one timed forward."""
    cfg = spec.config(resolution)
    dtype = DTYPES[spec.dtype]
    rng = Rng(seed)
    if spec.full_model:
        image = fill_uniform(rng, (resolution, resolution, cfg.channels), -1.0, 1.0, dtype)
        weights = WeightStore({name: w.astype(dtype) for name, w in
                               init_weights(cfg, seed=seed + 1).items()})
        return (lambda: encoder_forward(image, weights, cfg)), image.size + 2 * tokens * cfg.model_dim
    d = cfg.model_dim
    z = fill_uniform(rng, (tokens, d), -1.0, 1.0, dtype)
    bound = 1.0 / math.sqrt(d)
    layer = WeightStore({
        "qkv.weight": fill_uniform(rng, (d, 3 * d), -bound, bound, dtype),
        "ret_ln.gain": np.ones(d, dtype), "ret_ln.bias": np.zeros(d, dtype),
    })
    # input, q/k/v projections, output
    return (lambda: multi_head_retention(z, layer, cfg)), 5 * tokens * d


def _timed_run(run, io_floats: int, exclude_io: bool):
    with accounting.metered() as meter:
        if not exclude_io:
            meter.alloc(io_floats)
        start = time.perf_counter()
        run()
        elapsed = time.perf_counter() - start
    return elapsed, meter.peak


def _worker_cap() -> int:
    cap = os.environ.get("VIR_BENCH_THREADS")
    return max(1, int(cap)) if cap else os.cpu_count() or 1


def _measure(spec: BenchSpec, resolution: int, tokens: int):
    batch = spec.batch_parallel
    loads = [_make_workload(spec, resolution, tokens, spec.seed + i) for i in range(batch)]
    if batch == 1:
        run, io = loads[0]
        for _ in range(spec.warmup):
            _timed_run(run, io, spec.exclude_io)
        results = [_timed_run(run, io, spec.exclude_io) for _ in range(spec.repeats)]
        return [t for t, _ in results], [p for _, p in results]

    with ThreadPoolExecutor(max_workers=min(batch, _worker_cap())) as pool:
        def one_batch():
            start = time.perf_counter()
            out = list(pool.map(lambda wl: _timed_run(wl[0], wl[1], spec.exclude_io), loads))
            return time.perf_counter() - start, max(p for _, p in out)

        for _ in range(spec.warmup):
            one_batch()
        results = [one_batch() for _ in range(spec.repeats)]
    return [t for t, _ in results], [p for _, p in results]


def run_benchmark(spec: BenchSpec) -> list[BenchRecord]:
    """Warm up, then time ``repeats`` forwards per scan point; one record each."""
    records = []
    for res, n, tokens in spec.points():
        base = dict(mode=spec.mode, mask=spec.mask, resolution=res, patch=spec.patch, N=n,
                    dim=spec.dim, heads=spec.heads, chunk=spec.chunk, dtype=spec.dtype)
        try:
            _check_fits(spec, tokens)
            timings, peaks = _measure(spec, res, tokens)
        except MemoryError:
            records.append(BenchRecord(**base, median_seconds=math.nan,
                                       tokens_per_sec=math.nan, peak_live_f64=-1,
                                       status="oom"))
            continue
        median = statistics.median(timings)
        records.append(BenchRecord(**base, median_seconds=median,
                                   tokens_per_sec=spec.batch_parallel * n / median,
                                   peak_live_f64=max(peaks), timings=timings))
    return records


def fit_scaling_exponent(records) -> float:
    """Least-squares slope of log(median time) against log(N).

    Accepts :class:`BenchRecord` objects or ``(N, seconds)`` pairs; records
    with a non-ok status are skipped.
    """
    points = []
    for rec in records:
        if isinstance(rec, BenchRecord):
            if rec.status != "ok":
                continue
            points.append((rec.N, rec.median_seconds))
        else:
            points.append(tuple(rec))
    if len({n for n, _ in points}) < 3:
        raise ParameterError(f"need at least 3 distinct sequence lengths, got {len(points)} points")
    n, t = np.log(np.array(points, dtype=np.float64)).T
    slope, _ = np.polyfit(n, t, 1)
    return float(slope)


def emit(records, fmt: str, path) -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for rec in records:
                writer.writerow([getattr(rec, name) for name in CSV_FIELDS])
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([asdict(rec) for rec in records], fh, indent=2)
    else:
        raise ParameterError(f"format must be csv or json, got {fmt!r}")


def read_records(path, fmt: str) -> list[BenchRecord]:
    """Parse a file written by :func:`emit` back into records."""
    types = {f.name: f.type for f in fields(BenchRecord)}
    if fmt == "json":
        with open(path) as fh:
            return [BenchRecord(**row) for row in json.load(fh)]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    casts = {"int": int, "float": float, "str": str}
    return [BenchRecord(**{k: casts[types[k]](v) for k, v in row.items()}) for row in rows]

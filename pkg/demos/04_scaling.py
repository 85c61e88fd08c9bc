"""How the three modes scale with sequence length.

Uses a short scan so it finishes in seconds. ``bench run --lengths ...``
does the same from the shell with more control.
"""

from vir.bench import BenchSpec, fit_scaling_exponent, run_benchmark

# per-call overhead flattens the chunkwise curve below ~1k tokens
lengths = [1024, 2048, 4096, 8192]
for mode in ("parallel", "chunkwise", "recurrent"):
    spec = BenchSpec(mode=mode, lengths=lengths, dim=64, heads=4, dtype="f32",
                     repeats=1, warmup=1, exclude_io=True)
    records = run_benchmark(spec)
    for r in records:
        print(f"{mode:>9} N={r.N:<5} {r.median_seconds * 1e3:8.2f} ms  peak floats {r.peak_live_f64}")
    if mode != "recurrent":
        print(f"{mode:>9} log-log slope {fit_scaling_exponent(records):.2f}")

"""``bench`` command line: run | verify | gradcheck.

Exit codes: 0 success, 1 property failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from vir.bench import BenchSpec, emit, fit_scaling_exponent, run_benchmark
from vir.errors import ParameterError
from vir.verify import gradient_check, run_equivalence_suite

SLOPE_BOUNDS = {"parallel": (1.7, 2.3), "chunkwise": (0.8, 1.3)}
GRAD_TOLERANCE = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="measure throughput and accounted memory")
    run.add_argument("--mode", choices=("parallel", "recurrent", "chunkwise"), default="parallel")
    run.add_argument("--mask", choices=("1d", "2d"), default="1d")
    run.add_argument("--res", type=_int_list, default=[224, 448, 768, 1024])
    run.add_argument("--lengths", type=_int_list, default=None,
                     help="scan raw sequence lengths instead of resolutions (1d mask)")
    run.add_argument("--patch", type=int, default=16)
    run.add_argument("--dim", type=int, default=256)
    run.add_argument("--heads", type=int, default=4)
    run.add_argument("--chunk", type=int, default=64)
    run.add_argument("--repeats", type=int, default=5)
    run.add_argument("--warmup", type=int, default=2)
    run.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    run.add_argument("--seed", type=int, default=42)
    run.add_argument("--out", default=None, help="output path (stdout table if omitted)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--full-model", action="store_true")
    run.add_argument("--exclude-io", action="store_true")
    run.add_argument("--strict", action="store_true",
                     help="turn scaling-law checks into pass/fail")
    run.add_argument("--batch-parallel", type=int, default=1, metavar="B")

    verify = sub.add_parser("verify", help="run the cross-mode equivalence suite")
    verify.add_argument("--tol", type=float, default=1e-9)
    verify.add_argument("--seed", type=int, action="append",
                        help="repeatable; default 42")

    grad = sub.add_parser("gradcheck", help="finite-difference check of the parallel backward")
    grad.add_argument("--seed", type=int, default=7)
    return parser


def scaling_checks(records, mode: str) -> list[tuple[str, bool]]:
    """Scaling-law verdicts for one mode's records as ``(message, ok)`` pairs."""
    ok_records = [r for r in records if r.status == "ok"]
    checks = []
    if mode == "recurrent":
        peaks = {r.peak_live_f64 for r in ok_records}
        checks.append((f"recurrent accounted peak floats across N: {sorted(peaks)}",
                       len(peaks) == 1))
    if mode in SLOPE_BOUNDS and len({r.N for r in ok_records}) >= 3:
        lo, hi = SLOPE_BOUNDS[mode]
        slope = fit_scaling_exponent(ok_records)
        checks.append((f"{mode} log-log slope {slope:.3f}, expected [{lo}, {hi}]",
                       lo <= slope <= hi))
    return checks


def _cmd_run(args) -> int:
    spec = BenchSpec(mode=args.mode, mask=args.mask, resolutions=args.res, patch=args.patch,
                     dim=args.dim, heads=args.heads, chunk=args.chunk, repeats=args.repeats,
                     warmup=args.warmup, dtype=args.dtype, seed=args.seed,
                     full_model=args.full_model, exclude_io=args.exclude_io,
                     batch_parallel=args.batch_parallel, lengths=args.lengths)
    records = run_benchmark(spec)
    for r in records:
        print(f"{r.mode:>9} {r.mask} res={r.resolution:<5} N={r.N:<6} "
              f"median={r.median_seconds:.4g}s tok/s={r.tokens_per_sec:.4g} "
              f"peak_f64={r.peak_live_f64} {r.status}")
    if args.out:
        try:
            emit(records, args.format, args.out)
        except OSError as exc:
            print(f"bench: cannot write {args.out}: {exc}", file=sys.stderr)
            return 2
    failed = False
    for message, ok in scaling_checks(records, args.mode):
        label = ("PASS" if ok else "FAIL") if args.strict else "info"
        print(f"[{label}] {message}")
        failed |= args.strict and not ok
    return 1 if failed else 0


def _cmd_verify(args) -> int:
    report = run_equivalence_suite(args.tol, args.seed or [42])
    print(report.format())
    return 0 if report.passed else 1


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for offset in range(3):
        for gamma in (0.5, 0.9):
            errs = gradient_check(args.seed + offset, gamma)
            worst = max(worst, *errs.values())
            print(f"seed={args.seed + offset} gamma={gamma} " +
                  " ".join(f"rel_err[{name}]={e:.2e}" for name, e in errs.items()))
    ok = worst <= GRAD_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.2e} (tolerance {GRAD_TOLERANCE:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "verify": _cmd_verify, "gradcheck": _cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except ParameterError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

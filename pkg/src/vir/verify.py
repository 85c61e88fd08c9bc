"""Cross-mode equivalence suite and finite-difference gradient check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vir.encoder import EncoderConfig, encoder_forward, init_weights
from vir.errors import ParameterError
from vir.retention1d import (
    ChunkParams,
    retention_chunkwise,
    retention_parallel,
    retention_parallel_backward,
    retention_recurrent,
)
from vir.retention2d import (
    Grid,
    retention_2d_parallel,
    retention_2d_recurrent,
    retention_2d_simplified,
)
from vir.tensor import Rng, fill_uniform

GAMMAS_1D = (0.0, 0.25, 0.9, 1.0 - 2.0 ** -5)
LENGTHS_1D = (1, 2, 3, 5, 8, 16, 33, 64)
DIMS_1D = (4, 16)
GAMMAS_2D = (0.0, 0.5, 0.9)
TINY_CONFIG = dict(image_size=32, patch_size=8, model_dim=16, heads=2, depth=2)


def random_qkv(rng: Rng, n: int, dk: int, dv: int | None = None):
    dv = dk if dv is None else dv
    return (fill_uniform(rng, (n, dk), -1.0, 1.0), fill_uniform(rng, (n, dk), -1.0, 1.0),
            fill_uniform(rng, (n, dv), -1.0, 1.0))


def max_abs_diff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


@dataclass
class PropertyResult:
    name: str
    tolerance: float
    max_deviation: float = 0.0
    cases: int = 0
    worst_case: str = ""
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, deviation: float, case: str) -> None:
        self.cases += 1
        if deviation >= self.max_deviation:
            self.max_deviation, self.worst_case = deviation, case
        if not deviation <= self.tolerance:
            self.failures.append(f"{case}: {deviation:.3e}")


@dataclass
class EquivalenceReport:
    tolerance: float
    seeds: tuple[int, ...]
    properties: list[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties)

    def format(self) -> str:
        lines = [f"equivalence suite, tolerance {self.tolerance:g}, seeds {list(self.seeds)}"]
        for p in self.properties:
            status = "PASS" if p.passed else "FAIL"
            lines.append(f"  {status}  {p.name:<34} max|d| = {p.max_deviation:.3e} "
                         f"over {p.cases} cases (worst: {p.worst_case})")
            for failure in p.failures[:10]:
                lines.append(f"        failing {failure}")
            if len(p.failures) > 10:
                lines.append(f"        ... {len(p.failures) - 10} more")
        lines.append("ALL PASS" if self.passed else "FAILED")
        return "\n".join(lines)


def check_1d_modes(seed: int, tolerance: float, lengths=LENGTHS_1D, gammas=GAMMAS_1D,
                   dims=DIMS_1D):
    recurrent = PropertyResult("1d parallel vs recurrent", tolerance)
    chunkwise = PropertyResult("1d parallel vs chunkwise", tolerance)
    rng = Rng(seed)
    for n in lengths:
        for gamma in gammas:
            for d in dims:
                q, k, v = random_qkv(rng, n, d)
                scale = math.sqrt(d)
                ref = retention_parallel(q, k, v, gamma, scale)
                case = f"seed={seed} N={n} gamma={gamma} D={d}"
                recurrent.record(max_abs_diff(ref, retention_recurrent(q, k, v, gamma, scale)), case)
                for c in (1, 3, 8, n, n + 7):
                    out = retention_chunkwise(q, k, v, ChunkParams(c, gamma), scale)
                    chunkwise.record(max_abs_diff(ref, out), f"{case} C={c}")
    return [recurrent, chunkwise]


def check_2d_forms(seed: int, tolerance: float, sizes=range(1, 9), gammas=GAMMAS_2D, dim: int = 4):
    pairs = {
        "2d parallel vs recurrent": PropertyResult("2d parallel vs recurrent", tolerance),
        "2d parallel vs simplified": PropertyResult("2d parallel vs simplified", tolerance),
        "2d recurrent vs simplified": PropertyResult("2d recurrent vs simplified", tolerance),
    }
    rng = Rng(seed)
    for w in sizes:
        for h in sizes:
            grid = Grid(w, h)
            for gamma in gammas:
                q, k, v = random_qkv(rng, grid.size, dim)
                scale = math.sqrt(dim)
                par = retention_2d_parallel(q, k, v, grid, gamma, scale)
                rec = retention_2d_recurrent(q, k, v, grid, gamma, scale)
                sim = retention_2d_simplified(q, k, v, grid, gamma, scale)
                case = f"seed={seed} W={w} H={h} gamma={gamma}"
                pairs["2d parallel vs recurrent"].record(max_abs_diff(par, rec), case)
                pairs["2d parallel vs simplified"].record(max_abs_diff(par, sim), case)
                pairs["2d recurrent vs simplified"].record(max_abs_diff(rec, sim), case)
    return list(pairs.values())


def check_1d_2d_degeneracy(seed: int, tolerance: float, lengths=LENGTHS_1D, gammas=GAMMAS_1D,
                           dim: int = 4):
    result = PropertyResult("1d vs 2d on single-row grids", tolerance)
    rng = Rng(seed)
    for n in lengths:
        for gamma in gammas:
            q, k, v = random_qkv(rng, n, dim)
            scale = math.sqrt(dim)
            outs_1d = [retention_parallel(q, k, v, gamma, scale),
                       retention_recurrent(q, k, v, gamma, scale),
                       retention_chunkwise(q, k, v, ChunkParams(3, gamma), scale)]
            grid = Grid(n, 1)
            outs_2d = [f(q, k, v, grid, gamma, scale) for f in
                       (retention_2d_parallel, retention_2d_recurrent, retention_2d_simplified)]
            dev = max(max_abs_diff(a, b) for a in outs_1d for b in outs_2d)
            result.record(dev, f"seed={seed} N={n} gamma={gamma}")
    return [result]


def check_encoder_modes(seed: int, tolerance: float, chunks=(1, 4, None)):
    """Parallel vs streaming vs chunkwise logits on the tiny config (``None`` chunk = N+1)."""
    streaming = PropertyResult("encoder parallel vs streaming", tolerance)
    chunked = PropertyResult("encoder parallel vs chunkwise", tolerance)
    for mask in ("1d", "2d"):
        cfg = EncoderConfig(**TINY_CONFIG, mask_mode=mask)
        weights = init_weights(cfg, seed=seed, scale=0.5)
        image = fill_uniform(Rng(seed + 1), (cfg.image_size, cfg.image_size, cfg.channels), -1.0, 1.0)
        ref, _ = encoder_forward(image, weights, cfg, "parallel")
        stream, _ = encoder_forward(image, weights, cfg, "recurrent")
        streaming.record(max_abs_diff(ref, stream), f"seed={seed} mask={mask}")
        if mask == "2d":
            continue
        for c in chunks:
            c = c or cfg.num_patches + 1
            cfg_c = EncoderConfig(**TINY_CONFIG, mask_mode=mask, chunk_size=c)
            logits, _ = encoder_forward(image, weights, cfg_c, "chunkwise")
            chunked.record(max_abs_diff(ref, logits), f"seed={seed} mask={mask} C={c}")
    return [streaming, chunked]


def _merge(results: list[PropertyResult]) -> list[PropertyResult]:
    merged: dict[str, PropertyResult] = {}
    for r in results:
        if r.name not in merged:
            merged[r.name] = r
            continue
        m = merged[r.name]
        if r.max_deviation >= m.max_deviation:
            m.max_deviation, m.worst_case = r.max_deviation, r.worst_case
        m.cases += r.cases
        m.failures.extend(r.failures)
    return list(merged.values())


def run_equivalence_suite(tolerance: float = 1e-9, seeds=(42,)) -> EquivalenceReport:
    if tolerance < 0 or math.isnan(tolerance):
        raise ParameterError(f"tolerance must be >= 0, got {tolerance}")
    seeds = tuple(seeds)
    results = []
    for seed in seeds:
        results += check_1d_modes(seed, tolerance)
        results += check_2d_forms(seed, tolerance)
        results += check_1d_2d_degeneracy(seed, tolerance)
        results += check_encoder_modes(seed, tolerance)
    return EquivalenceReport(tolerance, seeds, _merge(results))


def numerical_gradient(loss, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``loss()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = loss()
        x[idx] = orig - h
        down = loss()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|)``; entries where both vanish count as 0."""
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    return float(rel.max())


def gradient_check(seed: int, gamma: float, n: int = 6, d: int = 4, h: float = 1e-5) -> dict:
    """Analytic vs finite-difference gradients of ``sum(retention_parallel(...) * R)``."""
    rng = Rng(seed)
    q, k, v = random_qkv(rng, n, d)
    weight = fill_uniform(rng, (n, d), -1.0, 1.0)
    scale = math.sqrt(d)

    def loss():
        return float(np.sum(retention_parallel(q, k, v, gamma, scale) * weight))

    analytic = retention_parallel_backward(q, k, v, gamma, scale, weight)
    return {name: relative_error(a, numerical_gradient(loss, x, h))
            for name, a, x in zip(("q", "k", "v"), analytic, (q, k, v))}

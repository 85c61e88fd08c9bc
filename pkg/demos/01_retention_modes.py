"""Three ways to evaluate the same 1D retention.

The parallel form builds the whole N x N decay mask. The recurrent form keeps
a single Dk x Dv state. The chunkwise form does parallel work inside each
chunk and carries the recurrent state between chunks. All three agree to
rounding error.
"""

import math

from vir import (
    ChunkParams,
    Rng,
    accounting,
    fill_uniform,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
)

n, d, gamma = 50, 8, 0.9
rng = Rng(0)
q, k, v = (fill_uniform(rng, (n, d), -1.0, 1.0) for _ in range(3))
scale = math.sqrt(d)

outputs = {}
for name, run in [
    ("parallel", lambda: retention_parallel(q, k, v, gamma, scale)),
    ("recurrent", lambda: retention_recurrent(q, k, v, gamma, scale)),
    ("chunkwise C=8", lambda: retention_chunkwise(q, k, v, ChunkParams(8, gamma), scale)),
]:
    with accounting.metered() as meter:
        outputs[name] = run()
    print(f"{name:>14}: peak working floats {meter.peak}")

ref = outputs["parallel"]
for name, out in outputs.items():
    print(f"{name:>14}: max |diff| vs parallel = {abs(out - ref).max():.2e}")

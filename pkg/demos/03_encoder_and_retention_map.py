"""A tiny encoder, run three ways, plus its retention map.

Weights are random, so the logits mean nothing; the point is that parallel,
streaming and chunkwise execution produce the same numbers, and that the
streaming state does not grow with the image.
"""

import numpy as np

from vir import (
    EncoderConfig,
    Rng,
    StreamSession,
    encoder_forward,
    fill_uniform,
    init_weights,
    retention_map,
)

cfg = EncoderConfig(image_size=32, patch_size=8, model_dim=16, heads=2, depth=2, chunk_size=5)
weights = init_weights(cfg, seed=0, scale=0.5)
image = fill_uniform(Rng(1), (32, 32, 3), -1.0, 1.0)

logits = {mode: encoder_forward(image, weights, cfg, mode)[0]
          for mode in ("parallel", "recurrent", "chunkwise")}
for mode, out in logits.items():
    print(f"{mode:>9}: {np.array2string(out[:4], precision=6)} ...")

for size in (32, 64, 128):
    big = EncoderConfig(image_size=size, patch_size=8, model_dim=16, heads=2, depth=2)
    print(f"image {size:>3}: {big.num_patches:>3} patches, "
          f"streaming state {StreamSession(init_weights(big), big).state_floats} floats")

np.set_printoptions(precision=3, suppress=True)
print("retention map (class token's scores on the 4x4 grid):")
print(retention_map(image, weights, cfg))

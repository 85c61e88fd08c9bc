"""Isotropic ViR encoder: patch embedding, retention blocks, class-token head.

The class token is appended after the position-embedded patch tokens, so
under the causal mask it is the one token that reads the whole image. The
encoder runs in three interchangeable modes selected by
``EncoderConfig.mode``: ``parallel``, ``recurrent`` (token-by-token through a
:class:`StreamSession`) and ``chunkwise``. All produce the same logits up to
floating-point reassociation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from vir import accounting
from vir.errors import DimensionError, MissingWeightError, ParameterError, StreamOrderError
from vir.retention1d import (
    ChunkParams,
    RetentionState1D,
    build_decay_mask_1d,
    flush_tiny,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
    retention_recurrent_step,
)
from vir.retention2d import Grid, RowState2D, build_decay_mask_2d
from vir.tensor import Rng, fill_uniform, gelu, layer_norm

MODES = ("parallel", "recurrent", "chunkwise")
MASK_MODES = ("1d", "2d")


def default_gamma_schedule(heads: int) -> list[float]:
    """Per-head decays ``1 - 2**(-5-h)``."""
    return [1.0 - 2.0 ** (-5 - h) for h in range(heads)]


@dataclass
class EncoderConfig:
    image_size: int
    patch_size: int
    model_dim: int
    depth: int
    heads: int
    mlp_ratio: int = 4
    gamma_schedule: list[float] | None = None
    mask_mode: str = "1d"
    mode: str = "parallel"
    chunk_size: int = 64
    num_classes: int = 10
    channels: int = 3

    def __post_init__(self):
        if self.heads < 1 or self.model_dim % self.heads:
            raise ParameterError(f"model_dim {self.model_dim} is not divisible by "
                                 f"{self.heads} heads")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} is not divisible by "
                                 f"patch_size {self.patch_size}")
        if self.depth < 0 or self.mlp_ratio < 1 or self.chunk_size < 1:
            raise ParameterError("depth must be >= 0, mlp_ratio and chunk_size >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ParameterError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gamma_schedule is None:
            self.gamma_schedule = default_gamma_schedule(self.heads)
        self.gamma_schedule = [float(g) for g in self.gamma_schedule]
        if len(self.gamma_schedule) != self.heads:
            raise ParameterError(f"{len(self.gamma_schedule)} decays for {self.heads} heads")
        if any(not 0.0 <= g <= 1.0 for g in self.gamma_schedule):
            raise ParameterError(f"decays must lie in [0, 1]: {self.gamma_schedule}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def grid(self) -> Grid:
        side = self.image_size // self.patch_size
        return Grid(side, side)

    @property
    def num_patches(self) -> int:
        return self.grid.size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


class WeightStore(dict):
    """Ordered ``name -> array`` map; a missing name raises :class:`MissingWeightError`."""

    prefix = ""

    def __missing__(self, key):
        raise MissingWeightError(self.prefix + key)

    def scope(self, prefix: str) -> "WeightStore":
        sub = WeightStore({name[len(prefix):]: value for name, value in self.items()
                           if name.startswith(prefix)})
        sub.prefix = self.prefix + prefix
        return sub


def weight_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = config.model_dim, config.mlp_ratio * config.model_dim
    patch_dim = config.patch_size ** 2 * config.channels
    shapes = {
        "patch_embed.weight": (patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_patches, d),
        "cls_token": (1, d),
    }
    for layer in range(config.depth):
        p = f"blocks.{layer}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "qkv.weight": (d, 3 * d),
            p + "ret_ln.gain": (d,), p + "ret_ln.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden), p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d), p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "head_ln.gain": (d,), "head_ln.bias": (d,),
        "head.weight": (d, config.num_classes), "head.bias": (config.num_classes,),
    })
    return shapes


def init_weights(config: EncoderConfig, seed: int = 0, scale: float = 0.02,
                 dtype=np.float64) -> WeightStore:
    """Deterministic weights: every tensor uniform in [-scale, scale) from one splitmix64 stream.

    LayerNorm gains are offset by one so that they start near identity.
    """
    rng = Rng(seed)
    store = WeightStore()
    for name, shape in weight_shapes(config).items():
        values = fill_uniform(rng, shape, -scale, scale, dtype=dtype)
        if name.endswith(".gain"):
            values = values + 1.0
        store[name] = values
    return store


def check_weights(weights: WeightStore, config: EncoderConfig) -> None:
    for name, shape in weight_shapes(config).items():
        if weights[name].shape != shape:
            raise DimensionError(f"weight {name!r} has shape {weights[name].shape}, "
                                 f"expected {shape}")


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``H x W x C`` into non-overlapping patches in raster order, each flattened (row, col, channel)."""
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    patches = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return patches.reshape((h // p) * (w // p), p * p * c)


def patchify_embed(image: np.ndarray, weights: WeightStore, config: EncoderConfig) -> np.ndarray:
    if image.shape[:2] != (config.image_size, config.image_size):
        raise DimensionError(f"image {image.shape} does not match image_size {config.image_size}")
    tokens = patchify(image, config.patch_size)
    return tokens @ weights["patch_embed.weight"] + weights["patch_embed.bias"]


def assemble_sequence(patch_emb: np.ndarray, weights: WeightStore) -> np.ndarray:
    """Add position embeddings, then append the class token as the last row."""
    pos = weights["pos_embed"]
    if patch_emb.shape != pos.shape:
        raise DimensionError(f"patch embedding {patch_emb.shape} vs position "
                             f"embedding {pos.shape}")
    return np.concatenate([patch_emb + pos, weights["cls_token"]], axis=0)


def encoder_mask_2d(grid: Grid, gamma: float, dtype=np.float64) -> np.ndarray:
    """2D decay mask extended with the trailing class token.

    The class token sits at virtual cell ``(W+1, H+1)``: it reads patch
    ``(x, y)`` with weight ``gamma**((W+1-x) + (H+1-y))`` and no patch reads it.
    """
    n = grid.size
    mask = np.zeros((n + 1, n + 1), dtype=dtype)
    mask[:n, :n] = build_decay_mask_2d(grid, gamma, dtype)
    s = np.arange(n)
    dist = (grid.width - s % grid.width) + (grid.height - s // grid.width)
    mask[n, :n] = flush_tiny(np.asarray(gamma, dtype=dtype) ** dist.astype(dtype))
    mask[n, n] = 1.0
    return mask


def _sequence_mask(config: EncoderConfig, gamma: float, n_tokens: int, dtype) -> np.ndarray:
    if config.mask_mode == "2d":
        return encoder_mask_2d(config.grid, gamma, dtype)
    return build_decay_mask_1d(n_tokens, gamma, dtype)


def _split_heads(z: np.ndarray, layer: WeightStore, config: EncoderConfig):
    qkv = z @ layer["qkv.weight"]
    d, dh = config.model_dim, config.head_dim
    for h in range(config.heads):
        cols = slice(h * dh, (h + 1) * dh)
        yield (h, qkv[:, :d][:, cols], qkv[:, d:2 * d][:, cols], qkv[:, 2 * d:][:, cols])


def retention_scores(z: np.ndarray, layer: WeightStore, config: EncoderConfig) -> np.ndarray:
    """Masked scaled scores ``(q k^T / sqrt(D_h)) * M`` per head, shape ``heads x T x T``."""
    scale = math.sqrt(config.head_dim)
    out = []
    for h, q, k, _ in _split_heads(z, layer, config):
        mask = _sequence_mask(config, config.gamma_schedule[h], z.shape[0], z.dtype)
        out.append(((q / scale) @ k.T) * mask)
    return np.stack(out)


def _retention_2d_with_class(q, k, v, grid: Grid, gamma: float, scale: float) -> np.ndarray:
    state = RowState2D.fresh(grid, q.shape[1], v.shape[1], gamma, dtype=q.dtype)
    out = np.empty((q.shape[0], v.shape[1]), dtype=q.dtype)
    accounting.alloc(state.floats)
    for s in range(grid.size):
        out[s] = (q[s] / scale) @ state.absorb(k[s], v[s])
    out[-1] = (q[-1] / scale) @ (gamma * gamma * state.corner() + np.outer(k[-1], v[-1]))
    accounting.free(state.floats)
    return out


def _head_retention(q, k, v, gamma: float, config: EncoderConfig, mode: str) -> np.ndarray:
    scale = math.sqrt(config.head_dim)
    if config.mask_mode == "2d":
        if mode == "parallel":
            n = q.shape[0]
            accounting.alloc(2 * n * n)
            out = (((q / scale) @ k.T) * encoder_mask_2d(config.grid, gamma, q.dtype)) @ v
            accounting.free(2 * n * n)
            return out
        if mode == "recurrent":
            return _retention_2d_with_class(q, k, v, config.grid, gamma, scale)
        raise ParameterError("chunkwise execution is defined for the 1d mask only")
    if mode == "parallel":
        return retention_parallel(q, k, v, gamma, scale)
    if mode == "recurrent":
        return retention_recurrent(q, k, v, gamma, scale)
    return retention_chunkwise(q, k, v, ChunkParams(config.chunk_size, gamma), scale)


def multi_head_retention(z: np.ndarray, layer: WeightStore, config: EncoderConfig,
                         mode: str | None = None) -> np.ndarray:
    """Per-head retention with head-specific decay, heads concatenated, then LayerNorm."""
    mode = mode or config.mode
    if z.ndim != 2 or z.shape[1] != config.model_dim:
        raise DimensionError(f"input {z.shape} does not have model_dim {config.model_dim}")
    if config.mask_mode == "2d" and z.shape[0] != config.num_patches + 1:
        raise DimensionError(f"2d mask expects {config.num_patches + 1} tokens, got {z.shape[0]}")
    heads = [_head_retention(q, k, v, config.gamma_schedule[h], config, mode)
             for h, q, k, v in _split_heads(z, layer, config)]
    return layer_norm(np.concatenate(heads, axis=1), layer["ret_ln.gain"], layer["ret_ln.bias"])


def mlp(x: np.ndarray, layer: WeightStore) -> np.ndarray:
    hidden = gelu(x @ layer["mlp.fc1.weight"] + layer["mlp.fc1.bias"])
    return hidden @ layer["mlp.fc2.weight"] + layer["mlp.fc2.bias"]


def encoder_block(z: np.ndarray, layer: WeightStore, config: EncoderConfig,
                  mode: str | None = None) -> np.ndarray:
    z = multi_head_retention(layer_norm(z, layer["ln1.gain"], layer["ln1.bias"]),
                             layer, config, mode) + z
    return mlp(layer_norm(z, layer["ln2.gain"], layer["ln2.bias"]), layer) + z


def classify(class_row: np.ndarray, weights: WeightStore) -> np.ndarray:
    normed = layer_norm(class_row, weights["head_ln.gain"], weights["head_ln.bias"])
    return normed @ weights["head.weight"] + weights["head.bias"]


def encoder_forward(image: np.ndarray, weights: WeightStore, config: EncoderConfig,
                    mode: str | None = None):
    """Run the encoder. Returns ``(logits, final_tokens)``.

    ``final_tokens`` is the last block's output, ``(N+1) x D``; the logits
    are read from its final row (the class token).
    """
    mode = mode or config.mode
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    z = assemble_sequence(patchify_embed(image, weights, config), weights)
    if mode == "recurrent":
        session = StreamSession(weights, config)
        tokens = np.stack([session.step(row) for row in z])
        return session.finalize(), tokens
    for layer in range(config.depth):
        z = encoder_block(z, weights.scope(f"blocks.{layer}."), config, mode)
    return classify(z[-1], weights), z


@dataclass
class StreamSession:
    """Token-by-token encoder state: one recurrent accumulator per layer and head.

    Feed the assembled sequence rows in raster order with the class token
    last, then call :meth:`finalize` for the logits.
    """

    weights: WeightStore
    config: EncoderConfig
    tokens_consumed: int = 0
    states: list = field(default_factory=list)
    last_output: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        dh = cfg.head_dim
        for _ in range(cfg.depth):
            if cfg.mask_mode == "2d":
                self.states.append([RowState2D.fresh(cfg.grid, dh, dh, g)
                                    for g in cfg.gamma_schedule])
            else:
                self.states.append([RetentionState1D.fresh(dh, dh, g)
                                    for g in cfg.gamma_schedule])
        self._layers = [self.weights.scope(f"blocks.{layer}.") for layer in range(cfg.depth)]
        accounting.alloc(self.state_floats)

    @property
    def expected_tokens(self) -> int:
        return self.config.num_patches + 1

    @property
    def state_floats(self) -> int:
        """Live recurrent-state element count across all layers and heads."""
        total = 0
        for heads in self.states:
            for st in heads:
                total += st.floats if isinstance(st, RowState2D) else st.s.size
        return total

    def _retain(self, layer: int, h: int, q, k, v) -> np.ndarray:
        scale = math.sqrt(self.config.head_dim)
        state = self.states[layer][h]
        if isinstance(state, RetentionState1D):
            self.states[layer][h], out = retention_recurrent_step(state, q, k, v, scale)
            return out
        if self.tokens_consumed < self.config.num_patches:
            return (q / scale) @ state.absorb(k, v)
        gamma = state.gamma
        return (q / scale) @ (gamma * gamma * state.corner() + np.outer(k, v))

    def step(self, token_row: np.ndarray) -> np.ndarray:
        """Push one assembled token through every layer; returns the final-layer row."""
        cfg = self.config
        if self.tokens_consumed >= self.expected_tokens:
            raise StreamOrderError(f"session already consumed all {self.expected_tokens} tokens")
        if token_row.shape != (cfg.model_dim,):
            raise DimensionError(f"token row {token_row.shape} is not ({cfg.model_dim},)")
        x = token_row
        d, dh = cfg.model_dim, cfg.head_dim
        for layer, lw in enumerate(self._layers):
            qkv = layer_norm(x, lw["ln1.gain"], lw["ln1.bias"]) @ lw["qkv.weight"]
            heads = []
            for h in range(cfg.heads):
                cols = slice(h * dh, (h + 1) * dh)
                heads.append(self._retain(layer, h, qkv[:d][cols], qkv[d:2 * d][cols],
                                          qkv[2 * d:][cols]))
            x = layer_norm(np.concatenate(heads), lw["ret_ln.gain"], lw["ret_ln.bias"]) + x
            x = mlp(layer_norm(x, lw["ln2.gain"], lw["ln2.bias"]), lw) + x
        self.tokens_consumed += 1
        self.last_output = x
        return x

    def finalize(self) -> np.ndarray:
        if self.tokens_consumed != self.expected_tokens:
            raise StreamOrderError(f"expected {self.expected_tokens} tokens "
                                   f"(patches then class), got {self.tokens_consumed}")
        accounting.free(self.state_floats)
        return classify(self.last_output, self.weights)


def encoder_forward_streaming(session: StreamSession, token_row: np.ndarray) -> np.ndarray:
    return session.step(token_row)


def retention_map(image: np.ndarray, weights: WeightStore, config: EncoderConfig) -> np.ndarray:
    """Head-averaged class-token score row of the last layer on the patch grid.

    Scores are the masked, scaled ``q k^T`` values with no softmax or other
    normalization; the class token's self-score is dropped.
    """
    if config.depth < 1:
        raise ParameterError("retention_map needs at least one encoder layer")
    z = assemble_sequence(patchify_embed(image, weights, config), weights)
    for layer in range(config.depth - 1):
        z = encoder_block(z, weights.scope(f"blocks.{layer}."), config, "parallel")
    last = weights.scope(f"blocks.{config.depth - 1}.")
    scores = retention_scores(layer_norm(z, last["ln1.gain"], last["ln1.bias"]), last, config)
    row = scores[:, -1, :-1].mean(axis=0)
    grid = config.grid
    return row.reshape(grid.height, grid.width)

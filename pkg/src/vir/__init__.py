"""Retention operators (1D and 2D), a small isotropic ViR encoder, and scaling benchmarks."""

from vir.encoder import (
    EncoderConfig,
    StreamSession,
    WeightStore,
    assemble_sequence,
    encoder_forward,
    encoder_forward_streaming,
    init_weights,
    multi_head_retention,
    patchify_embed,
    retention_map,
)
from vir.retention1d import (
    ChunkParams,
    RetentionState1D,
    build_decay_mask_1d,
    retention_chunkwise,
    retention_parallel,
    retention_parallel_backward,
    retention_recurrent,
    retention_recurrent_step,
)
from vir.retention2d import (
    Grid,
    RowState2D,
    build_decay_mask_2d,
    retention_2d_parallel,
    retention_2d_recurrent,
    retention_2d_simplified,
)
from vir.tensor import Rng, fill_uniform, gelu, hadamard, layer_norm, matmul
from vir.weights_io import load_config, load_weights, save_config, save_weights

__version__ = "0.1.0"

"""Emulator of a focal-plane processor array running the binary encoders."""

from .array import (
    ANALOG_NAMES,
    BLOCK,
    DIRECTIONS,
    GRID,
    INCREMENT,
    SIDE,
    NoiseModel,
    PEArray,
    block_mask,
    block_view,
    shift_plane,
)
from .programs import (
    GATE_BLOCKS,
    binarize_frame_on_array,
    characterize_noise,
    clip_seed,
    cnn_on_array,
    conv_taps_in_order,
    downsample_concat,
    encode_clips,
    load_encoder,
    rnn_on_array,
    run_clip,
    shift_add_conv,
    store_weights,
)

__all__ = [
    "ANALOG_NAMES", "BLOCK", "DIRECTIONS", "GATE_BLOCKS", "GRID", "INCREMENT", "SIDE",
    "NoiseModel", "PEArray", "binarize_frame_on_array", "block_mask", "block_view", "characterize_noise",
    "clip_seed", "cnn_on_array", "conv_taps_in_order", "downsample_concat", "encode_clips", "load_encoder",
    "rnn_on_array", "run_clip", "shift_add_conv", "shift_plane", "store_weights",
]

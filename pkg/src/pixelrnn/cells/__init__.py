"""The encoder zoo behind one step contract, plus its accounting."""

from .accounting import (
    FeatureMemory,
    bits_per_value,
    compression_readings,
    feature_memory,
    feature_tally,
    parameter_count,
    readout_bandwidth,
    readout_bits,
)
from .reference import (
    baseline_step,
    binarize_frame,
    cnn_forward,
    encode_clip,
    genrnn_cell,
    init_state,
    pixelrnn_cell,
    pixelrnn_step,
    prepare_frame,
    run_sequence,
    step,
    ternary,
)
from .spec import (
    CAMERA_KINDS,
    GATE_KERNELS,
    KINDS,
    RNN_KINDS,
    CellSpec,
    CellState,
    CnnEncoderSpec,
    CnnLayer,
    LayerShape,
    Params,
    make_spec,
    random_params,
)

__all__ = [
    "CAMERA_KINDS", "GATE_KERNELS", "KINDS", "RNN_KINDS",
    "CellSpec", "CellState", "CnnEncoderSpec", "CnnLayer", "FeatureMemory", "LayerShape", "Params",
    "baseline_step", "binarize_frame", "bits_per_value", "cnn_forward", "compression_readings",
    "encode_clip", "feature_memory", "feature_tally", "genrnn_cell", "init_state", "make_spec",
    "parameter_count", "pixelrnn_cell", "pixelrnn_step", "prepare_frame", "random_params", "readout_bandwidth",
    "readout_bits", "run_sequence", "step", "ternary",
]

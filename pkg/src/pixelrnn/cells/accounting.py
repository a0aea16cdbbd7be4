"""Parameter, feature-memory and readout-bandwidth accounting.

Feature memory counts the planes materialized per pixel during one forward
step.  The tally rule:

* every CNN layer holds its convolution outputs, one value per kernel;
* every gate convolution of the recurrent cell holds one value (the gate
  pre-activations and activations are accumulated in place on top of these);
* the hidden state h, the LSTM cell state c, and a separate output plane for
  cells that own output-gate kernels (PixelRNN, genRNN, LSTM) hold one each;
* cameras hold their remembered frame and their output; RAW holds the frame.

Bytes per pixel are value-count / 8 for 1-bit features and value-count * 4
for 32-bit features.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..bitcore import KERNEL_SIZE
from .spec import CellSpec

RAW_BITS = 8
WINDOW = 16  # bandwidth is reported per 16-frame window


def parameter_count(spec: CellSpec) -> int:
    """Trainable encoder parameters: CNN taps and thresholds, gate taps, gate thresholds."""
    taps = KERNEL_SIZE * KERNEL_SIZE
    cnn = spec.cnn_layers * (spec.layer.n_kernels * taps + 1)
    return cnn + len(spec.gate_names) * taps + len(spec.scalar_names)


def readout_side(spec: CellSpec) -> int:
    return spec.sensor if spec.kind == "RAW" else spec.plane


def readout_bandwidth(spec: CellSpec) -> int:
    """Values leaving the sensor per 16 frames."""
    per_frame = readout_side(spec) ** 2
    if spec.streams_every_frame:
        return per_frame * WINDOW
    return per_frame * WINDOW // spec.K


def bits_per_value(spec: CellSpec) -> int:
    """Bits needed per emitted value.

    RAW pixels are 8-bit; camera events are ternary (2 bits).  Binary cells
    emitting a binarized state need 1 bit; binary cells emitting an accumulator
    (PixelRNN and genRNN output, SRNN pre-activation) are digitized at 8 bits.
    Full-precision emissions are 32-bit floats.
    """
    if spec.kind == "RAW":
        return RAW_BITS
    if spec.kind in ("DIFF", "EVENT"):
        return 2
    if not spec.binary:
        return 32
    if spec.kind in ("PIXELRNN", "GENRNN", "SRNN"):
        return 8
    return 1


def readout_bits(spec: CellSpec) -> int:
    return readout_bandwidth(spec) * bits_per_value(spec)


def feature_tally(spec: CellSpec) -> dict[str, int]:
    """Per-pixel count of materialized values, itemized."""
    if spec.kind == "RAW":
        return {"frame": 1}
    if spec.kind in ("DIFF", "EVENT"):
        return {"remembered frame h": 1, "output o": 1}
    tally = {}
    for i in range(spec.cnn_layers):
        tally[f"cnn layer {i + 1} conv outputs"] = spec.layer.n_kernels
    if spec.is_rnn:
        tally["gate conv outputs"] = len(spec.gate_names)
        tally["hidden state h"] = 1
        if spec.kind == "LSTM":
            tally["cell state c"] = 1
        if "w_o" in spec.gate_names:
            tally["output o"] = 1
    return tally


@dataclass(frozen=True)
class FeatureMemory:
    values: int
    binary_bytes: float
    full32_bytes: float
    tally: dict


def feature_memory(spec: CellSpec) -> FeatureMemory:
    tally = feature_tally(spec)
    n = sum(tally.values())
    return FeatureMemory(values=n, binary_bytes=n / 8, full32_bytes=n * 4.0, tally=tally)


def compression_readings(spec: CellSpec) -> dict[str, float]:
    """Bandwidth reduction relative to streaming the raw sensor, three ways.

    values_vs_raw:        raw sensor values / emitted values
    values_vs_plane:      plane-sized per-frame stream / emitted values
    raw_bytes_vs_float32: raw 8-bit bytes / emitted values stored as 4-byte floats
    """
    raw_values = spec.sensor ** 2 * WINDOW
    plane_values = spec.plane ** 2 * WINDOW
    emitted = readout_bandwidth(spec)
    return {
        "values_vs_raw": raw_values / emitted,
        "values_vs_plane": plane_values / emitted,
        "raw_bytes_vs_float32": raw_values * RAW_BITS / (emitted * 32),
    }

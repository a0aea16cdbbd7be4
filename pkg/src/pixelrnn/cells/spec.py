"""Architecture descriptors, weights and recurrent state."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..bitcore import KERNEL_SIZE

CAMERA_KINDS = ("RAW", "DIFF", "EVENT")
RNN_KINDS = ("SRNN", "LSTM", "GRU", "MGU", "GENRNN", "PIXELRNN")
KINDS = CAMERA_KINDS + ("CNN",) + RNN_KINDS

# Gate kernels per architecture; each is one 5x5 kernel, w_* on the CNN output
# and u_* on the previous hidden state.
GATE_KERNELS = {
    "SRNN": ("w_h", "u_h"),
    "LSTM": ("w_f", "u_f", "w_i", "u_i", "w_o", "u_o", "w_c", "u_c"),
    "GRU": ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h"),
    "MGU": ("w_f", "u_f", "w_h", "u_h"),
    "GENRNN": ("w_f", "u_f", "w_h", "u_h", "w_o", "u_o"),
    "PIXELRNN": ("w_f", "u_f", "w_o", "u_o"),
}
# Learned scalar thresholds of the forget and candidate gates.
GATE_SCALARS = {"GENRNN": ("th_f", "th_h")}

REGIMES = ("pm1", "01")
PRECISIONS = ("binary", "full32")
HIDDEN_INITS = ("ones", "zeros", "first_frame")


@dataclass(frozen=True)
class LayerShape:
    n_kernels: int = 16
    pool: int = 4
    grid: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if self.grid[0] * self.grid[1] != self.n_kernels:
            raise ValueError("tile grid must hold exactly one cell per kernel")


@dataclass(frozen=True)
class CellSpec:
    """Structure of one encoder: CNN depth plus the recurrent cell or camera mode.

    regime "pm1" binarizes to {-1, +1}, "01" to {0, 1} (recurrent part only).
    `plane` is the side of the square plane the cell runs on; `sensor` the raw
    sensor side used by RAW mode.  `frame_threshold` binarizes 8-bit frames
    entering a binary CNN.  `delta` is the camera event threshold on [0, 1]
    intensities.
    """

    kind: str = "PIXELRNN"
    cnn_layers: int = 1
    precision: str = "binary"
    regime: str = "pm1"
    K: int = 16
    hidden_init: str = "ones"
    delta: float = 0.1
    plane: int = 64
    sensor: int = 256
    layer: LayerShape = LayerShape()
    frame_threshold: float = 127.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.hidden_init not in HIDDEN_INITS:
            raise ValueError(f"unknown hidden init {self.hidden_init!r}")
        if self.K < 1:
            raise ValueError("readout period K must be >= 1")
        if self.kind in CAMERA_KINDS and self.cnn_layers:
            raise ValueError(f"{self.kind} has no CNN encoder")
        if self.kind == "CNN" and self.cnn_layers < 1:
            raise ValueError("CNN mode needs at least one layer")
        if self.cnn_layers < 0:
            raise ValueError("cnn_layers must be >= 0")

    @property
    def binary(self) -> bool:
        return self.precision == "binary"

    @property
    def is_rnn(self) -> bool:
        return self.kind in RNN_KINDS

    @property
    def streams_every_frame(self) -> bool:
        return not self.is_rnn

    @property
    def gate_names(self) -> tuple[str, ...]:
        return GATE_KERNELS.get(self.kind, ())

    @property
    def scalar_names(self) -> tuple[str, ...]:
        return GATE_SCALARS.get(self.kind, ())

    @property
    def arch_id(self) -> str:
        if self.kind in CAMERA_KINDS:
            return self.kind
        base = f"{self.cnn_layers}CNN"
        return base if self.kind == "CNN" else f"{base}+{self.kind}"

    def with_(self, **changes) -> "CellSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cnn_layers": self.cnn_layers,
            "precision": self.precision,
            "regime": self.regime,
            "K": self.K,
            "hidden_init": self.hidden_init,
            "delta": self.delta,
            "plane": self.plane,
            "sensor": self.sensor,
            "layer": {"n_kernels": self.layer.n_kernels, "pool": self.layer.pool, "grid": list(self.layer.grid)},
            "frame_threshold": self.frame_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellSpec":
        d = dict(d)
        layer = d.pop("layer", None)
        if layer is not None:
            d["layer"] = LayerShape(layer["n_kernels"], layer["pool"], tuple(layer["grid"]))
        return cls(**d)


def default_hidden_init(kind: str) -> str:
    return "first_frame" if kind in ("DIFF", "EVENT") else "ones"


def make_spec(kind: str, cnn_layers: int | None = None, **kw) -> CellSpec:
    """CellSpec with sensible per-kind defaults (cameras: no CNN, remember first frame)."""
    if cnn_layers is None:
        cnn_layers = 0 if kind in CAMERA_KINDS else 1
    kw.setdefault("hidden_init", default_hidden_init(kind))
    return CellSpec(kind=kind, cnn_layers=cnn_layers, **kw)


@dataclass
class CnnLayer:
    kernels: np.ndarray
    threshold: float
    pool: int = 4
    grid: tuple[int, int] = (4, 4)


@dataclass
class CnnEncoderSpec:
    """Weights of the per-frame CNN: conv -> ReLU -> max-pool -> binarize -> tile."""

    layers: list[CnnLayer]
    binary: bool = True

    @property
    def n_params(self) -> int:
        return sum(layer.kernels.size + 1 for layer in self.layers)


@dataclass
class Params:
    """Deployed (quantized) weights of an encoder."""

    cnn: CnnEncoderSpec | None
    gates: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)


@dataclass
class CellState:
    """Recurrent state.  `h` also holds the remembered frame of the cameras."""

    h: np.ndarray | None = None
    c: np.ndarray | None = None
    t: int = 0


def random_params(spec: CellSpec, rng: np.random.Generator) -> Params:
    """Random weights of the right structure: +-1 (or 0/1) in binary mode."""
    shape = spec.layer
    layers = []
    for _ in range(spec.cnn_layers):
        if spec.binary:
            k = rng.choice(np.array([-1, 1], dtype=np.int8), size=(shape.n_kernels, KERNEL_SIZE, KERNEL_SIZE))
            tau = float(rng.integers(-3, 4)) + 0.5
        else:
            k = rng.normal(0, 0.2, size=(shape.n_kernels, KERNEL_SIZE, KERNEL_SIZE))
            tau = float(rng.normal(0, 0.1))
        layers.append(CnnLayer(k, tau, shape.pool, shape.grid))
    cnn = CnnEncoderSpec(layers, binary=spec.binary) if layers else None
    gates = {}
    for name in spec.gate_names:
        if spec.binary and spec.regime == "pm1":
            gates[name] = rng.choice(np.array([-1, 1], dtype=np.int8), size=(KERNEL_SIZE, KERNEL_SIZE))
        elif spec.binary:
            gates[name] = rng.integers(0, 2, size=(KERNEL_SIZE, KERNEL_SIZE)).astype(np.int8)
        else:
            gates[name] = rng.normal(0, 0.2, size=(KERNEL_SIZE, KERNEL_SIZE))
    scalars = {name: float(rng.normal(0, 0.5)) for name in spec.scalar_names}
    return Params(cnn, gates, scalars)

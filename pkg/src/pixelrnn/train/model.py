"""Torch mirror of the reference encoders, trainable through surrogate gradients.

In "binary" mode the forward pass is the quantized network (bit-identical to
`cells.reference` at zero noise); "smooth" replaces every quantizer by its
tanh/sigmoid proxy; full-precision specs run unquantized.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..bitcore import KERNEL_SIZE, RADIUS
from ..cells.spec import CellSpec, CnnEncoderSpec, CnnLayer, Params
from .quant import Quantizer, accumulator_sigma

INCREMENT = 10.0
CONV_WRITES = KERNEL_SIZE * KERNEL_SIZE
PAIR_WRITES = 2 * CONV_WRITES + 1  # two convolutions and the plane add


def emission_scale(spec: CellSpec) -> float:
    """Typical magnitude of one emitted value; the decoder sees emissions divided by it."""
    if spec.binary and spec.kind in ("PIXELRNN", "GENRNN", "SRNN"):
        return 2.0 * CONV_WRITES
    return 1.0


def _conv(x, k):
    """Same-size cross-correlation of (N, H, W) planes with one or more 5x5 kernels."""
    if k.dim() == 2:
        # one kernel: run it depthwise over the batch, much faster than a 1-channel conv on CPU
        n = x.shape[0]
        w = k.view(1, 1, KERNEL_SIZE, KERNEL_SIZE).expand(n, 1, KERNEL_SIZE, KERNEL_SIZE)
        return F.conv2d(x.unsqueeze(0), w, padding=RADIUS, groups=n)[0]
    return F.conv2d(x.unsqueeze(1), k.unsqueeze(1), padding=RADIUS)


def _tile(maps, grid):
    """(N, C, h, w) -> (N, gh*h, gw*w), channels row-major over the grid."""
    n, c, h, w = maps.shape
    gh, gw = grid
    return maps.view(n, gh, gw, h, w).permute(0, 1, 3, 2, 4).reshape(n, gh * h, gw * w)


class Encoder(nn.Module):
    """Shadow weights of one CellSpec and its unrolled forward pass.

    forward(frames) takes raw 8-bit intensities (N, T, H, W) and returns the
    stacked emissions (N, E, h, w): one per frame for cameras and the CNN-only
    mode, one per K-frame window for recurrent cells.
    """

    def __init__(self, spec: CellSpec, mode: str = "binary", m: float = 2.0,
                 noise_sigma: float = 0.0, seed: int = 0, init_scale: float = 0.5, tau_init: float = 0.5):
        super().__init__()
        if mode not in ("binary", "smooth"):
            raise ValueError(f"unknown mode {mode!r}")
        if noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        self.spec = spec
        self.mode = mode if spec.binary else "full"
        self.m = m
        self.noise_sigma = noise_sigma
        self.q_cnn = Quantizer(mode, "pm1", m)
        self.q_rnn = Quantizer(mode, spec.regime, m)

        g = torch.Generator().manual_seed(seed)
        self.noise_gen = torch.Generator().manual_seed(seed + 7919)
        n_k = spec.layer.n_kernels
        self.cnn_w = nn.ParameterList([
            nn.Parameter(init_scale * (2 * torch.rand(n_k, KERNEL_SIZE, KERNEL_SIZE, generator=g) - 1))
            for _ in range(spec.cnn_layers)
        ])
        tau0 = tau_init if spec.binary else 0.0
        self.cnn_tau = nn.Parameter(torch.full((spec.cnn_layers,), float(tau0)))
        self.gates = nn.ParameterDict({
            name: nn.Parameter(init_scale * (2 * torch.rand(KERNEL_SIZE, KERNEL_SIZE, generator=g) - 1))
            for name in spec.gate_names
        })
        self.scalars = nn.ParameterDict({name: nn.Parameter(torch.zeros(())) for name in spec.scalar_names})

    # -- quantized views (pure functions of the shadows)

    def cnn_kernels(self, i: int) -> torch.Tensor:
        w = self.cnn_w[i]
        return w if self.mode == "full" else self.q_cnn(w)

    def gate_kernel(self, name: str) -> torch.Tensor:
        w = self.gates[name]
        return w if self.mode == "full" else self.q_rnn(w)

    def export_params(self) -> Params:
        """Deployed weights as numpy, in the form `cells.reference` consumes."""
        with torch.no_grad():
            layers = []
            for i in range(self.spec.cnn_layers):
                k = self.cnn_kernels(i).double().numpy()
                if self.spec.binary:
                    k = k.astype(np.int8)
                shape = self.spec.layer
                layers.append(CnnLayer(k, float(self.cnn_tau[i]), shape.pool, shape.grid))
            cnn = CnnEncoderSpec(layers, binary=self.spec.binary) if layers else None
            gates = {}
            for name in self.spec.gate_names:
                k = self.gate_kernel(name).double().numpy()
                gates[name] = k.astype(np.int8) if self.spec.binary else k
            scalars = {name: float(p) for name, p in self.scalars.items()}
        return Params(cnn, gates, scalars)

    # -- noise

    def _noisy(self, x, sigma_taps: float):
        if self.noise_sigma > 0 and self.training and self.mode != "full":
            return x + sigma_taps * torch.randn(x.shape, generator=self.noise_gen, dtype=x.dtype)
        return x

    # -- pieces

    def prepare(self, frames: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        frames = frames.to(self.cnn_tau.dtype)
        if spec.kind in ("RAW", "DIFF", "EVENT") or not spec.binary:
            return frames / 255.0
        frames = self._noisy(frames, self.noise_sigma)  # analog upload of the pixel value
        return torch.where(frames > spec.frame_threshold, 1.0, -1.0).to(frames.dtype)

    def cnn(self, x: torch.Tensor) -> torch.Tensor:
        """(N, H, W) -> (N, H, W) through every CNN layer."""
        spec = self.spec
        pool, grid = spec.layer.pool, spec.layer.grid
        sigma_conv = accumulator_sigma(self.noise_sigma, CONV_WRITES, INCREMENT)
        for i in range(spec.cnn_layers):
            h, w = x.shape[-2:]
            z = _conv(x, self.cnn_kernels(i))
            tau = self.cnn_tau[i]
            if self.mode == "full":
                maps = F.max_pool2d(F.relu(z - tau), pool, ceil_mode=True)
            else:
                z = self._noisy(z, sigma_conv)
                pooled = F.max_pool2d(F.relu(z), pool, ceil_mode=True)
                maps = self.q_cnn(pooled - tau, scale=CONV_WRITES, strict=True)
            x = _tile(maps, grid)
            if h % pool or w % pool:
                x = x[:, :h, :w]
        return x

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        x = self.prepare(frames)
        n, t_len, h, w = x.shape
        if spec.kind in ("RAW", "DIFF", "EVENT"):
            return self._camera(x)
        c = self.cnn(x.reshape(n * t_len, h, w)) if spec.cnn_layers else x.reshape(n * t_len, h, w)
        c = c.reshape(n, t_len, *c.shape[-2:])
        if spec.kind == "CNN":
            return c
        return self._recurrent(c)

    def _camera(self, x):
        spec = self.spec
        if spec.kind == "RAW":
            return x
        outs = []
        h = x[:, 0]
        for t in range(x.shape[1]):
            xt = x[:, t]
            diff = xt - h
            outs.append((diff > spec.delta).to(x.dtype) - (diff < -spec.delta).to(x.dtype))
            if spec.kind == "DIFF":
                h = xt
            else:
                f = (diff.abs() > spec.delta).to(x.dtype)
                h = (1 - f) * h + f * xt
        return torch.stack(outs, 1)

    def _acts(self):
        if self.mode == "full":
            return torch.sigmoid, torch.tanh, (lambda v: v)
        q = self.q_rnn
        gate = lambda v: q(v, scale=2 * CONV_WRITES)  # noqa: E731
        state = lambda v: q(v, scale=1.0)  # noqa: E731
        return gate, gate, state

    def _init_hidden(self, c_t):
        spec = self.spec
        if spec.hidden_init == "first_frame":
            return c_t.detach().clone()
        value = 1.0 if spec.hidden_init == "ones" else 0.0
        return torch.full_like(c_t, value)

    def _recurrent(self, c):
        spec = self.spec
        n, t_len, h, w = c.shape
        names = spec.gate_names
        w_names = [k for k in names if k.startswith("w_")]
        # every w_* * c_t at once; only the u_* * h terms are sequential
        wk = torch.stack([self.gate_kernel(k) for k in w_names])
        wc = _conv(c.reshape(n * t_len, h, w), wk).reshape(n, t_len, len(w_names), h, w)
        wc = {k: wc[:, :, j] for j, k in enumerate(w_names)}
        uk = {k: self.gate_kernel(k) for k in names if k.startswith("u_")}
        sig, tanh_, binst = self._acts()
        sigma_pair = accumulator_sigma(self.noise_sigma, PAIR_WRITES, INCREMENT)

        def pre(gate, t, hh):
            return self._noisy(wc["w_" + gate][:, t] + _conv(hh, uk["u_" + gate]), sigma_pair)

        kind = spec.kind
        outs = []
        hid = cell = None
        for t in range(t_len):
            if t % spec.K == 0:
                # fresh tensors: no gradient crosses a reset
                hid = self._init_hidden(c[:, t])
                cell = self._init_hidden(c[:, t]) if kind == "LSTM" else None
            emit = (t + 1) % spec.K == 0
            out = None
            if kind == "PIXELRNN":
                f = sig(pre("f", t, hid))
                if emit:
                    out = pre("o", t, hid)
                hid = f * hid
            elif kind == "SRNN":
                p = pre("h", t, hid)
                hid = tanh_(p)
                out = p if emit else None
            elif kind == "LSTM":
                f, i, o, cc = (sig(pre(g, t, hid)) for g in ("f", "i", "o", "c"))
                cell = binst(f * cell + i * cc)
                hid = o * sig(cell) if self.mode == "full" else o * binst(cell)
                out = hid if emit else None
            elif kind == "GRU":
                z = sig(pre("z", t, hid))
                r = sig(pre("r", t, hid))
                hc = tanh_(pre("h", t, r * hid))
                hid = binst((1 - z) * hid + z * hc)
                out = hid if emit else None
            elif kind == "MGU":
                f = sig(pre("f", t, hid))
                hc = tanh_(pre("h", t, f * hid))
                hid = binst((1 - f) * hid + f * hc)
                out = hid if emit else None
            elif kind == "GENRNN":
                f = sig(pre("f", t, hid) - self.scalars["th_f"])
                hc = sig(pre("h", t, hid) - self.scalars["th_h"])
                o = pre("o", t, hid)
                hid = binst((1 - f) * hid + f * hc)
                out = o if emit else None
            else:
                raise ValueError(f"unknown kind {kind!r}")
            if out is not None:
                outs.append(out)
        if not outs:
            raise ValueError(f"sequence of {t_len} frames is shorter than the readout period K={spec.K}")
        return torch.stack(outs, 1)


class Classifier(nn.Module):
    """Encoder followed by the off-sensor fully connected decoder.

    Per-frame encoders (cameras, CNN-only) get a decoder over one frame's
    emission, applied to every frame; logits come back as (N, T, M).
    Recurrent encoders get one decoder over all emissions of the clip: (N, M).
    """

    def __init__(self, encoder: Encoder, n_classes: int, frames: int = 16, side: int | None = None,
                 bias: bool = False):
        super().__init__()
        spec = encoder.spec
        self.encoder = encoder
        self.n_classes = n_classes
        side = side if side is not None else (spec.sensor if spec.kind == "RAW" else spec.plane)
        per_emission = side * side
        if spec.streams_every_frame:
            self.n_emissions = 1
        else:
            self.n_emissions = frames // spec.K
        self.n_features = per_emission * self.n_emissions
        self.scale = emission_scale(spec)
        self.decoder = nn.Linear(self.n_features, n_classes, bias=bias)
        nn.init.zeros_(self.decoder.weight)
        if bias:
            nn.init.zeros_(self.decoder.bias)

    def with_decoder(self, decoder: nn.Linear) -> "Classifier":
        """A Classifier sharing this encoder but using `decoder`."""
        other = Classifier.__new__(Classifier)
        nn.Module.__init__(other)
        other.encoder = self.encoder
        other.n_classes, other.n_emissions = self.n_classes, self.n_emissions
        other.n_features, other.scale = self.n_features, self.scale
        other.decoder = decoder
        return other

    def decode(self, emissions: torch.Tensor) -> torch.Tensor:
        """Logits from stacked emissions (N, E, h, w)."""
        emissions = emissions.to(self.decoder.weight.dtype) / self.scale
        if self.encoder.spec.streams_every_frame:
            return self.decoder(emissions.flatten(2))
        flat = emissions.flatten(1)
        if flat.shape[1] != self.n_features:
            raise ValueError(f"decoder expects {self.n_features} features per clip, got {flat.shape[1]}")
        return self.decoder(flat)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encoder(frames))


def clip_logits(logits: torch.Tensor) -> torch.Tensor:
    """Per-clip logits; per-frame logits are averaged over time."""
    return logits.mean(1) if logits.dim() == 3 else logits


def loss_fn(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy; per-frame logits are scored against the clip label at every frame."""
    if logits.dim() == 3:
        n, t, m = logits.shape
        return F.cross_entropy(logits.reshape(n * t, m), labels.repeat_interleave(t))
    return F.cross_entropy(logits, labels)


def chance_loss(n_classes: int) -> float:
    return math.log(n_classes)

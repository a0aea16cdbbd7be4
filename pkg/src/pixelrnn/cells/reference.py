"""Straight numpy execution of every encoder, bit-exact in binary mode.

All cells share one step contract::

    state, emission = step(spec, params, state, frame)

`emission` is None on frames where nothing leaves the sensor.  Recurrent
cells reset their hidden state before consuming frame t whenever t % K == 0
and emit after consuming frame t whenever (t + 1) % K == 0, so a T-frame
sequence yields floor(T / K) emissions.  Cameras and the CNN-only mode emit
every frame.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..bitcore import (
    AnalogArithmetic,
    BitPlane,
    real_conv_multi,
    tile_concat,
    xnor_conv_multi,
)
from .spec import CellSpec, CellState, CnnEncoderSpec, Params


def binarize_frame(frame, threshold: float = 127.5) -> np.ndarray:
    """8-bit intensity frame to a +-1 plane (+1 where brighter than threshold)."""
    return np.where(np.asarray(frame) > threshold, 1, -1).astype(np.int8)


def prepare_frame(spec: CellSpec, frame) -> np.ndarray:
    """Map a raw 8-bit frame to what the encoder consumes."""
    frame = np.asarray(frame)
    if spec.kind in ("RAW", "DIFF", "EVENT"):
        return frame.astype(np.float64) / 255.0
    if spec.binary:
        return binarize_frame(frame, spec.frame_threshold)
    return frame.astype(np.float64) / 255.0


def maxpool_ceil(x: np.ndarray, k: int, fill=-np.inf) -> np.ndarray:
    """k x k max pooling over the last two axes; partial edge windows are kept."""
    h, w = x.shape[-2:]
    H, W = -(-h // k) * k, -(-w // k) * k
    if (H, W) != (h, w):
        pad = np.full(x.shape[:-2] + (H, W), fill, dtype=np.float64)
        pad[..., :h, :w] = x
        x = pad
    lead = x.shape[:-2]
    return x.reshape(lead + (H // k, k, W // k, k)).max(axis=(-3, -1))


class _Ops:
    """Convolution and accumulation for one arithmetic model."""

    def __init__(self, mode: str, arith: AnalogArithmetic | None = None):
        self.mode = mode  # "xnor", "analog" or "real"
        self.arith = arith
        self.scale = arith.increment if mode == "analog" else 1

    def conv(self, x, kernels):
        if self.mode == "xnor":
            return xnor_conv_multi(BitPlane.from_signs(x), kernels).astype(np.int64)
        if self.mode == "analog":
            return self.arith.conv_multi(BitPlane.from_signs(x), kernels)
        return real_conv_multi(x, kernels)

    def add(self, a, b):
        if self.mode == "analog":
            return self.arith.add(a, b)
        return a + b

    def pair(self, wk, x, uk, h):
        """w * x + u * h, the pre-activation shared by every gate."""
        if x is h:
            a, b = self.conv(x, np.stack([wk, uk]))
        else:
            (a,), (b,) = self.conv(x, wk[None]), self.conv(h, uk[None])
        return self.add(a, b)


def _ops_for(spec: CellSpec, arith: AnalogArithmetic | None, recurrent: bool = False) -> _Ops:
    if not spec.binary:
        return _Ops("real")
    if recurrent and spec.regime == "01":
        if arith is not None:
            raise ValueError("the analog model covers the (-1, 1) regime only")
        return _Ops("real")
    if arith is not None:
        return _Ops("analog", arith)
    return _Ops("xnor")


def cnn_forward(encoder: CnnEncoderSpec, x, arith: AnalogArithmetic | None = None) -> np.ndarray:
    """Run every CNN layer: conv, ReLU, max-pool, binarize, tile.

    Binary layers return +-1 planes; with `arith` the accumulators follow the
    saturating analog model and thresholds are compared in analog units.
    Full-precision layers apply ReLU(conv - tau) and pooling, no binarization.
    """
    if isinstance(x, BitPlane):
        x = x.decode()
    x = np.asarray(x)
    for layer in encoder.layers:
        h, w = x.shape
        if encoder.binary:
            ops = _Ops("analog", arith) if arith is not None else _Ops("xnor")
            z = ops.conv(x, layer.kernels)
            pooled = maxpool_ceil(np.maximum(z, 0), layer.pool)
            maps = np.where(pooled > layer.threshold * ops.scale, 1, -1).astype(np.int8)
        else:
            z = real_conv_multi(x, layer.kernels)
            maps = maxpool_ceil(np.maximum(z - layer.threshold, 0), layer.pool)
        x = tile_concat(maps, layer.grid)
        if h % layer.pool or w % layer.pool:
            x = x[:h, :w]
    return x


def sign(x):
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def step01(x):
    return (np.asarray(x) > 0).astype(np.int8)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ternary(x, delta: float):
    """-1 below -delta, 0 inside [-delta, delta], +1 above delta."""
    x = np.asarray(x)
    return np.where(x > delta, 1, np.where(x < -delta, -1, 0)).astype(np.int8)


def _activations(spec: CellSpec):
    """(sigmoid-like, tanh-like, state binarizer) for the spec's precision/regime."""
    if not spec.binary:
        return sigmoid, np.tanh, (lambda v: v)
    if spec.regime == "pm1":
        return sign, sign, sign
    return step01, step01, step01


def _hidden_init(spec: CellSpec, shape, frame=None):
    if spec.hidden_init == "first_frame":
        return np.array(frame, dtype=np.float64, copy=True)
    value = 1 if spec.hidden_init == "ones" else 0
    if spec.binary:
        return np.full(shape, value, dtype=np.int8)
    return np.full(shape, float(value))


def genrnn_cell(c, h, kernels, psi_f, psi_h, psi_o, conv=None, thresholds=(0.0, 0.0), psi_state=None):
    """One general-RNN update.

    f = psi_f(w_f*c + u_f*h - th_f); hc = psi_h(w_h*c + u_h*h - th_h);
    h' = psi_state((1 - f) h + f hc); o = psi_o(w_o*c + u_o*h).
    Returns (h', o).  `conv(x, kernel)` defaults to real-valued convolution.
    """
    if conv is None:
        def conv(x, k):
            return real_conv_multi(x, np.asarray(k)[None])[0]
    th_f, th_h = thresholds
    f = psi_f(conv(c, kernels["w_f"]) + conv(h, kernels["u_f"]) - th_f)
    hc = psi_h(conv(c, kernels["w_h"]) + conv(h, kernels["u_h"]) - th_h)
    o = psi_o(conv(c, kernels["w_o"]) + conv(h, kernels["u_o"]))
    h_new = (1 - f) * h + f * hc
    if psi_state is not None:
        h_new = psi_state(h_new)
    return h_new, o


def pixelrnn_cell(c, h, kernels, psi_f, pair=None, emit: bool = True):
    """One PixelRNN update: f = psi_f(w_f*c + u_f*h); h' = f h; o = w_o*c + u_o*h.

    A gate value of +1 keeps a pixel's state and -1 flips it.  `pair(wk, x, uk, h)`
    computes w*x + u*h (default: real-valued convolutions).  Returns (h', o),
    o None unless `emit`.
    """
    if pair is None:
        def pair(wk, x, uk, hh):
            return real_conv_multi(x, np.asarray(wk)[None])[0] + real_conv_multi(hh, np.asarray(uk)[None])[0]
    f = psi_f(pair(kernels["w_f"], c, kernels["u_f"], h))
    o = pair(kernels["w_o"], c, kernels["u_o"], h) if emit else None
    return f * h, o


def init_state() -> CellState:
    return CellState(h=None, c=None, t=0)


def step(spec: CellSpec, params: Params, state: CellState, frame, arith: AnalogArithmetic | None = None):
    """Advance any encoder by one frame.  See the module docstring for timing."""
    if state is None:
        raise ValueError("state is uninitialized; start from init_state()")
    t = state.t
    frame = frame.decode() if isinstance(frame, BitPlane) else np.asarray(frame)
    kind = spec.kind

    if kind in ("RAW", "DIFF", "EVENT"):
        return _camera_step(spec, state, frame)
    if arith is not None and kind not in ("CNN", "PIXELRNN"):
        raise ValueError(f"the analog model is defined for CNN and PIXELRNN, not {kind}")

    c = cnn_forward(params.cnn, frame, arith) if params.cnn is not None else frame
    if kind == "CNN":
        return replace(state, t=t + 1), c

    h, cell = state.h, state.c
    if t % spec.K == 0:
        h = _hidden_init(spec, c.shape, c)
        cell = _hidden_init(spec, c.shape, c) if kind == "LSTM" else None
    elif h is None:
        raise ValueError("hidden state is uninitialized mid-window")

    emit = (t + 1) % spec.K == 0
    ops = _ops_for(spec, arith, recurrent=True)
    sig, tanh_, binst = _activations(spec)
    g = params.gates
    out = None

    if kind == "PIXELRNN":
        h, out = pixelrnn_cell(c, h, g, sig, ops.pair, emit)
        out = out / ops.scale if emit else None
    elif kind == "SRNN":
        pre = ops.pair(g["w_h"], c, g["u_h"], h)
        h = tanh_(pre)
        out = pre / ops.scale if emit else None
    elif kind == "LSTM":
        f = sig(ops.pair(g["w_f"], c, g["u_f"], h))
        i = sig(ops.pair(g["w_i"], c, g["u_i"], h))
        o = sig(ops.pair(g["w_o"], c, g["u_o"], h))
        cc = sig(ops.pair(g["w_c"], c, g["u_c"], h))
        cell = binst(f * cell + i * cc)
        h = o * sig(cell)
        out = h if emit else None
    elif kind == "GRU":
        z = sig(ops.pair(g["w_z"], c, g["u_z"], h))
        r = sig(ops.pair(g["w_r"], c, g["u_r"], h))
        hc = tanh_(ops.pair(g["w_h"], c, g["u_h"], r * h))
        h = binst((1 - z) * h + z * hc)
        out = h if emit else None
    elif kind == "MGU":
        f = sig(ops.pair(g["w_f"], c, g["u_f"], h))
        hc = tanh_(ops.pair(g["w_h"], c, g["u_h"], f * h))
        h = binst((1 - f) * h + f * hc)
        out = h if emit else None
    elif kind == "GENRNN":
        def conv(x, k):
            return ops.conv(x, np.asarray(k)[None])[0]

        h, o = genrnn_cell(
            c, h, g, sig, sig, lambda v: v, conv=conv,
            thresholds=(params.scalars["th_f"], params.scalars["th_h"]), psi_state=binst,
        )
        out = o / ops.scale if emit else None
    else:
        raise ValueError(f"unknown kind {kind!r}")

    if out is not None:
        out = np.asarray(out, dtype=np.float64)
    return CellState(h=h, c=cell, t=t + 1), out


def _camera_step(spec: CellSpec, state: CellState, x: np.ndarray):
    t = state.t
    if spec.kind == "RAW":
        return replace(state, t=t + 1), x.astype(np.float64)
    h = state.h
    if t == 0 or h is None:
        h = _hidden_init(spec, x.shape, x).astype(np.float64)
    diff = x - h
    o = ternary(diff, spec.delta)
    if spec.kind == "DIFF":
        h = x.astype(np.float64)
    else:
        f = (np.abs(diff) > spec.delta).astype(np.float64)
        h = (1 - f) * h + f * x
    return CellState(h=h, c=None, t=t + 1), o.astype(np.float64)


def pixelrnn_step(spec: CellSpec, params: Params, state: CellState, x_t, arith=None):
    if spec.kind != "PIXELRNN":
        raise ValueError("pixelrnn_step needs a PIXELRNN spec")
    return step(spec, params, state, x_t, arith)


def baseline_step(spec: CellSpec, params: Params, state: CellState, x_t):
    if spec.kind == "PIXELRNN":
        raise ValueError("use pixelrnn_step for PixelRNN")
    return step(spec, params, state, x_t)


def run_sequence(spec: CellSpec, params: Params, frames, arith=None) -> list[np.ndarray]:
    """Drive any encoder over a sequence of prepared frames; returns the emissions."""
    state = init_state()
    emissions = []
    for frame in frames:
        state, out = step(spec, params, state, frame, arith)
        if out is not None:
            emissions.append(out)
    return emissions


def encode_clip(spec: CellSpec, params: Params, frames, arith=None) -> np.ndarray:
    """Raw 8-bit frames in, stacked emissions out: (n_emissions, H, W)."""
    prepared = [prepare_frame(spec, f) for f in frames]
    return np.stack(run_sequence(spec, params, prepared, arith))

"""Binary planes and the exact arithmetic shared by every encoder.

Values are restricted to {-1, +1} and stored one bit per element: stored bit 1
encodes +1 and stored bit 0 encodes -1, so XNOR of two stored bits is directly
the stored bit of their product.

Convolutions are cross-correlations with a same-size output.  Taps that fall
outside the plane contribute nothing to the accumulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KERNEL_SIZE = 5
RADIUS = KERNEL_SIZE // 2

# Tap t = (dy + 2) * 5 + (dx + 2), raster order.  Output[y, x] accumulates
# kernel[dy + 2, dx + 2] * input[y + dy, x + dx].
TAP_OFFSETS = tuple((dy, dx) for dy in range(-RADIUS, RADIUS + 1) for dx in range(-RADIUS, RADIUS + 1))


@dataclass(frozen=True, eq=False)
class BitPlane:
    """A height x width plane of {-1, +1} values, packed row-major."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"plane dimensions must be positive, got {self.height}x{self.width}")
        expected = math.ceil(self.width * self.height / 8)
        if self.data.dtype != np.uint8 or self.data.size != expected:
            raise ValueError("packed data does not match plane dimensions")
        self.data.flags.writeable = False

    @classmethod
    def from_bits(cls, bits) -> "BitPlane":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("a BitPlane is two-dimensional")
        h, w = bits.shape
        return cls(width=w, height=h, data=np.packbits(bits.ravel()))

    @classmethod
    def from_signs(cls, values) -> "BitPlane":
        values = np.asarray(values)
        if not np.all((values == 1) | (values == -1)):
            raise ValueError("BitPlane values must be exactly -1 or +1")
        return cls.from_bits(values > 0)

    @classmethod
    def ones(cls, height: int, width: int) -> "BitPlane":
        return cls.from_bits(np.ones((height, width), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def bits(self) -> np.ndarray:
        n = self.width * self.height
        return np.unpackbits(self.data, count=n).astype(bool).reshape(self.height, self.width)

    def decode(self) -> np.ndarray:
        """Return the plane as an int8 array of -1/+1."""
        return np.where(self.bits(), 1, -1).astype(np.int8)

    def __neg__(self) -> "BitPlane":
        return BitPlane.from_bits(~self.bits())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitPlane):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.height, self.width, self.data.tobytes()))

    def __repr__(self):
        return f"BitPlane({self.height}x{self.width})"


def as_signs(x) -> np.ndarray:
    """Decode a BitPlane, or pass a +-1 array through unchanged."""
    if isinstance(x, BitPlane):
        return x.decode()
    return np.asarray(x)


def sign_quantize(w):
    """Map reals to {-1, +1}; zero maps to +1.

    Accepts a scalar or an array.  Non-finite input is rejected.
    """
    arr = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("sign_quantize requires finite input")
    out = np.where(arr >= 0, 1, -1).astype(np.int8)
    if out.ndim == 0:
        return int(out)
    return out


def check_kernel(kernel, binary: bool = True) -> np.ndarray:
    k = np.asarray(kernel)
    if k.shape != (KERNEL_SIZE, KERNEL_SIZE):
        raise ValueError(f"kernels are {KERNEL_SIZE}x{KERNEL_SIZE}, got {k.shape}")
    if binary and not np.all((k == 1) | (k == -1)):
        raise ValueError("binary kernels must hold only -1/+1")
    return k


def shifted(plane: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """out[y, x] = plane[y + dy, x + dx], with `fill` where that index is outside."""
    h, w = plane.shape[-2:]
    out = np.full_like(plane, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = plane[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def window_words(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gather each pixel's 5x5 receptive field into a 25-bit word.

    Returns (window, valid): bit t of window[y, x] is the input bit at tap t,
    and bit t of valid[y, x] says whether that tap lies inside the plane.
    """
    bits = np.asarray(bits, dtype=bool)
    ones = np.ones_like(bits)
    window = np.zeros(bits.shape, dtype=np.uint32)
    valid = np.zeros(bits.shape, dtype=np.uint32)
    for t, (dy, dx) in enumerate(TAP_OFFSETS):
        window |= shifted(bits, dy, dx, False).astype(np.uint32) << np.uint32(t)
        valid |= shifted(ones, dy, dx, False).astype(np.uint32) << np.uint32(t)
    return window, valid


def kernel_word(kernel) -> np.uint32:
    k = check_kernel(kernel).ravel()
    word = 0
    for t, v in enumerate(k):
        if v > 0:
            word |= 1 << t
    return np.uint32(word)


def xnor_popcount(window, valid, kword) -> np.ndarray:
    """Signed tap sum from packed words: 2 * matches - valid taps."""
    window = np.asarray(window, dtype=np.uint32)
    valid = np.asarray(valid, dtype=np.uint32)
    matches = np.bitwise_count(~(window ^ np.uint32(kword)) & valid).astype(np.int32)
    return 2 * matches - np.bitwise_count(valid).astype(np.int32)


def xnor_conv(x: BitPlane, kernel) -> np.ndarray:
    """Binary same-size convolution via XNOR and popcount.

    Equal to the real-valued cross-correlation of the decoded +-1 operands
    with zero contribution from out-of-plane taps.  Returns int32 sums.
    """
    return xnor_conv_multi(x, np.asarray(kernel)[None])[0]


def xnor_conv_multi(x: BitPlane, kernels) -> np.ndarray:
    """Apply C binary kernels to one plane; returns (C, H, W) int32."""
    kernels = np.asarray(kernels)
    if kernels.ndim != 3:
        raise ValueError("kernels must be stacked as (C, 5, 5)")
    window, valid = window_words(x.bits() if isinstance(x, BitPlane) else np.asarray(x) > 0)
    return np.stack([xnor_popcount(window, valid, kernel_word(k)) for k in kernels])


def real_conv_multi(x: np.ndarray, kernels) -> np.ndarray:
    """Real-valued same-size cross-correlation of one plane with (C, 5, 5) kernels.

    Accumulates taps in raster order; float64 output.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    out = np.zeros((kernels.shape[0],) + x.shape)
    for t, (dy, dx) in enumerate(TAP_OFFSETS):
        s = shifted(x, dy, dx, 0.0)
        out += kernels[:, dy + RADIUS, dx + RADIUS, None, None] * s[None]
    return out


def real_conv(x: np.ndarray, kernel) -> np.ndarray:
    return real_conv_multi(x, np.asarray(kernel)[None])[0]


def maxpool(x, k: int):
    """Non-overlapping k x k max pooling.  BitPlane in, BitPlane out."""
    if isinstance(x, BitPlane):
        return BitPlane.from_signs(maxpool(x.decode(), k))
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if k < 1 or h % k or w % k:
        raise ValueError(f"pool window {k} does not divide plane {h}x{w}")
    lead = x.shape[:-2]
    return x.reshape(lead + (h // k, k, w // k, k)).max(axis=(-3, -1))


def threshold_binarize(x, tau: float) -> BitPlane:
    """+1 where x > tau, else -1 (so x == tau gives -1)."""
    if not math.isfinite(tau):
        raise ValueError("threshold must be finite")
    return BitPlane.from_bits(np.asarray(x) > tau)


def tile_concat(maps, grid: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Place C equal-shape maps in a rows x cols grid, row-major by channel."""
    maps = np.asarray(maps)
    rows, cols = grid
    if maps.ndim != 3:
        raise ValueError("expected a stack of maps shaped (C, h, w)")
    if maps.shape[0] != rows * cols:
        raise ValueError(f"expected {rows * cols} maps, got {maps.shape[0]}")
    c, h, w = maps.shape
    return maps.reshape(rows, cols, h, w).transpose(0, 2, 1, 3).reshape(rows * h, cols * w)


def block_split(plane, grid: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Inverse of tile_concat."""
    plane = np.asarray(plane)
    rows, cols = grid
    H, W = plane.shape
    if H % rows or W % cols:
        raise ValueError(f"plane {H}x{W} does not split into a {rows}x{cols} grid")
    h, w = H // rows, W // cols
    return plane.reshape(rows, h, cols, w).transpose(0, 2, 1, 3).reshape(rows * cols, h, w)


@dataclass(frozen=True)
class AnalogArithmetic:
    """Integer model of the analog accumulator: fixed increment, saturating range.

    Each tap adds or subtracts `increment` and the running sum is clamped to
    [lo, hi] after every addition, in raster tap order.  This reproduces what a
    shift-and-accumulate array computes with noise switched off.
    """

    increment: int = 10
    lo: float = -128
    hi: float = 127

    def clamp(self, v):
        return np.clip(v, self.lo, self.hi)

    def conv_multi(self, x: BitPlane, kernels) -> np.ndarray:
        bits = x.bits() if isinstance(x, BitPlane) else np.asarray(x) > 0
        kernels = np.asarray(kernels)
        valid_all = np.ones_like(bits)
        acc = np.zeros((kernels.shape[0],) + bits.shape, dtype=np.float64)
        for t, (dy, dx) in enumerate(TAP_OFFSETS):
            s = shifted(bits, dy, dx, False)
            valid = shifted(valid_all, dy, dx, False)
            wbit = kernels[:, dy + RADIUS, dx + RADIUS] > 0
            agree = s[None] == wbit[:, None, None]
            step = np.where(agree, self.increment, -self.increment) * valid[None]
            acc = self.clamp(acc + step)
        return acc

    def add(self, a, b):
        return self.clamp(np.asarray(a, dtype=np.float64) + b)

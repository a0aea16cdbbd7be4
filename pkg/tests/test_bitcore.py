import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixelrnn.bitcore import (
    AnalogArithmetic,
    BitPlane,
    block_split,
    maxpool,
    real_conv,
    sign_quantize,
    threshold_binarize,
    tile_concat,
    xnor_conv,
    xnor_conv_multi,
)


def naive_conv(x, k):
    """Float cross-correlation by explicit loops, out-of-plane taps contribute 0."""
    h, w = x.shape
    out = np.zeros((h, w))
    for y in range(h):
        for xx in range(w):
            s = 0.0
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    yy, xs = y + dy, xx + dx
                    if 0 <= yy < h and 0 <= xs < w:
                        s += float(x[yy, xs]) * float(k[dy + 2, dx + 2])
            out[y, xx] = s
    return out


def pm1(rng, shape):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)


signs = st.sampled_from([-1, 1])


def pm1_planes(h, w):
    return arrays(np.int8, (h, w), elements=signs)


# -- BitPlane

@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_bitplane_roundtrip(h, w, data):
    v = data.draw(pm1_planes(h, w))
    p = BitPlane.from_signs(v)
    assert p.shape == (h, w)
    assert np.array_equal(p.decode(), v)
    assert set(np.unique(p.decode())) <= {-1, 1}
    assert p == BitPlane.from_bits(p.bits())


def test_bitplane_bit_encoding():
    p = BitPlane.from_signs(np.array([[1, -1, -1, 1, 1, 1, -1, -1]]))
    assert p.data.tolist() == [0b10011100]


def test_bitplane_rejects_bad_values():
    with pytest.raises(ValueError):
        BitPlane.from_signs(np.array([[1, 0]]))
    with pytest.raises(ValueError):
        BitPlane(width=0, height=3, data=np.zeros(0, np.uint8))
    with pytest.raises(ValueError):
        BitPlane(width=4, height=4, data=np.zeros(5, np.uint8))


def test_bitplane_negation_and_immutability():
    rng = np.random.default_rng(0)
    v = pm1(rng, (7, 9))
    p = BitPlane.from_signs(v)
    assert np.array_equal((-p).decode(), -v)
    with pytest.raises(ValueError):
        p.data[0] = 0


# -- sign_quantize

def test_sign_quantize_examples():
    assert sign_quantize(0.3) == 1
    assert sign_quantize(-0.7) == -1
    assert sign_quantize(0.0) == 1
    assert sign_quantize(-0.0) == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_sign_quantize_rejects_nonfinite(bad):
    with pytest.raises(ValueError):
        sign_quantize(bad)
    with pytest.raises(ValueError):
        sign_quantize(np.array([0.0, bad]))


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_sign_quantize_idempotent(w):
    q = sign_quantize(w)
    assert set(np.unique(q)) <= {-1, 1}
    assert np.array_equal(sign_quantize(q), q)


# -- xnor_conv

def test_xnor_conv_all_ones_interior():
    out = xnor_conv(BitPlane.ones(64, 64), np.ones((5, 5), np.int8))
    assert np.all(out[2:-2, 2:-2] == 25)
    # border pixels see fewer taps
    assert out[0, 0] == 9 and out[0, 10] == 15


def test_xnor_conv_matches_naive_float_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, k = pm1(rng, (64, 64)), pm1(rng, (5, 5))
        assert np.array_equal(xnor_conv(BitPlane.from_signs(x), k), naive_conv(x, k))


def test_xnor_conv_exhaustive_small_planes_one_kernel():
    """All 2^16 4x4 planes for one random kernel (the 8x8 sweep is in the acceptance suite)."""
    rng = np.random.default_rng(2)
    k = pm1(rng, (5, 5))
    for code in range(1 << 16):
        bits = np.array([(code >> i) & 1 for i in range(16)], bool).reshape(4, 4)
        x = np.where(bits, 1, -1)
        assert np.array_equal(xnor_conv(BitPlane.from_bits(bits), k), real_conv(x, k))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.data())
def test_xnor_conv_equals_float_conv(h, w, data):
    x = data.draw(pm1_planes(h, w))
    k = data.draw(pm1_planes(5, 5))
    xb = BitPlane.from_signs(x)
    out = xnor_conv(xb, k)
    assert np.array_equal(out, real_conv(x, k))
    # negation equivariance in either operand
    assert np.array_equal(xnor_conv(-xb, k), -out)
    assert np.array_equal(xnor_conv(xb, -k), -out)
    # each element is a sum of at most 25 +-1 terms
    assert np.abs(out).max() <= 25


def test_xnor_conv_multi_and_kernel_checks():
    rng = np.random.default_rng(3)
    x = BitPlane.from_signs(pm1(rng, (16, 16)))
    ks = pm1(rng, (3, 5, 5))
    out = xnor_conv_multi(x, ks)
    for c in range(3):
        assert np.array_equal(out[c], xnor_conv(x, ks[c]))
    with pytest.raises(ValueError):
        xnor_conv(x, np.ones((3, 3)))
    with pytest.raises(ValueError):
        xnor_conv(x, np.zeros((5, 5)))


# -- maxpool

def test_maxpool_examples():
    assert np.array_equal(maxpool(np.full((8, 8), 3), 4), np.full((2, 2), 3))
    block = -np.ones((4, 4), np.int8)
    block[2, 1] = 1
    assert maxpool(block, 4).item() == 1
    with pytest.raises(ValueError):
        maxpool(np.zeros((6, 6)), 4)


def test_maxpool_brute_force():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(64, 64))
    out = maxpool(x, 4)
    for i, j in itertools.product(range(16), range(16)):
        assert out[i, j] == max(x[4 * i + a, 4 * j + b] for a in range(4) for b in range(4))


def test_maxpool_bitplane():
    rng = np.random.default_rng(5)
    v = pm1(rng, (8, 8))
    assert np.array_equal(maxpool(BitPlane.from_signs(v), 2).decode(), maxpool(v, 2))


@given(arrays(np.int16, (8, 8), elements=st.integers(-50, 50)), arrays(np.int16, (8, 8), elements=st.integers(0, 9)),
       st.sampled_from([1, 2, 4, 8]))
def test_maxpool_constant_and_monotone(x, bump, k):
    assert np.all(maxpool(np.full((8, 8), 7), k) == 7)
    assert np.all(maxpool(x + bump, k) >= maxpool(x, k))


# -- threshold_binarize

def test_threshold_examples():
    assert threshold_binarize(np.array([[5]]), 0).decode().item() == 1
    assert threshold_binarize(np.array([[-5]]), 0).decode().item() == -1
    assert threshold_binarize(np.array([[2.5]]), 2.5).decode().item() == -1
    with pytest.raises(ValueError):
        threshold_binarize(np.zeros((2, 2)), np.nan)


# -- tile_concat

def test_tile_concat_constant_maps():
    maps = np.arange(16)[:, None, None] * np.ones((16, 16, 16))
    out = tile_concat(maps)
    assert out.shape == (64, 64)
    for c in range(16):
        r, col = divmod(c, 4)
        assert np.all(out[16 * r:16 * (r + 1), 16 * col:16 * (col + 1)] == c)


def test_tile_concat_index_oracle():
    rng = np.random.default_rng(6)
    maps = rng.integers(-100, 100, size=(16, 16, 16))
    out = tile_concat(maps)
    for y, x in itertools.product(range(64), range(64)):
        assert out[y, x] == maps[(y // 16) * 4 + x // 16, y % 16, x % 16]


def test_tile_concat_rejects_bad_input():
    with pytest.raises(ValueError):
        tile_concat(np.zeros((15, 16, 16)))
    with pytest.raises(ValueError):
        tile_concat(np.zeros((16, 16)))


@given(arrays(np.int8, (16, 4, 3), elements=st.integers(-5, 5)))
def test_tile_concat_block_split_roundtrip(maps):
    assert np.array_equal(block_split(tile_concat(maps)), maps)


# -- saturating analog model

def test_analog_arithmetic_running_sum_oracle():
    rng = np.random.default_rng(7)
    x = pm1(rng, (12, 12))
    k = pm1(rng, (5, 5))
    got = AnalogArithmetic().conv_multi(BitPlane.from_signs(x), k[None])[0]
    for y, xx in itertools.product(range(12), range(12)):
        acc = 0.0
        for dy, dx in itertools.product(range(-2, 3), range(-2, 3)):
            if 0 <= y + dy < 12 and 0 <= xx + dx < 12:
                acc = min(127.0, max(-128.0, acc + 10 * x[y + dy, xx + dx] * k[dy + 2, dx + 2]))
        assert got[y, xx] == acc


def test_analog_arithmetic_equals_scaled_xnor_without_saturation():
    # with the rails moved out of reach the accumulator is exactly 10x the tap sum
    rng = np.random.default_rng(8)
    x = BitPlane.from_signs(pm1(rng, (32, 32)))
    k = pm1(rng, (2, 5, 5))
    got = AnalogArithmetic(lo=-1e9, hi=1e9).conv_multi(x, k)
    assert np.array_equal(got, 10 * xnor_conv_multi(x, k))


def test_analog_arithmetic_saturates():
    out = AnalogArithmetic().conv_multi(BitPlane.ones(8, 8), np.ones((1, 5, 5), np.int8))
    assert out[0, 4, 4] == 127


def test_window_gather_exhaustive_by_linearity():
    from oracles import check_window_gather_basis

    assert check_window_gather_basis(8, 8) > 64


def test_exhaustive_corner_windows():
    from oracles import border_classes, exhaustive_window_check

    rng = np.random.default_rng(9)
    k = pm1(rng, (5, 5))
    classes = border_classes(8, 8)
    assert len(classes) == 25
    small = [np.array(v) for v in classes if sum(v) <= 16]
    assert sum(exhaustive_window_check(k, v) for v in small) > 0

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from squeezejet.errors import FormatError, ShapeError
from squeezejet.fixedpoint import (
    Fmap,
    QFormat,
    QTensor,
    dequantize,
    dequantize_array,
    quantize_array,
    quantize_value,
    round_half_away,
    shift_round,
)


def test_qformat_ranges():
    fmt = QFormat(16, 7)
    assert (fmt.raw_min, fmt.raw_max) == (-32768, 32767)
    assert fmt.step == 2**-7
    assert str(fmt) == "Q16.7"
    assert QFormat(8, -2).step == 4.0


def test_qformat_rejects_odd_widths():
    with pytest.raises(FormatError):
        QFormat(12, 3)


def test_quantize_examples():
    assert quantize_value(1.5, QFormat(16, 7)) == 192
    assert quantize_value(-0.3, QFormat(8, 4)) == -5
    assert quantize_value(1e9, QFormat(8, 7)) == 127
    assert quantize_value(-1e9, QFormat(8, 7)) == -128
    assert quantize_value(0.0, QFormat(32, 20)) == 0


def test_quantize_rounds_half_away_from_zero():
    fmt = QFormat(16, 0)
    assert quantize_value(2.5, fmt) == 3
    assert quantize_value(-2.5, fmt) == -3
    assert quantize_value(0.49999999999999994, fmt) == 0
    rounded = round_half_away(np.array([0.5, -0.5, 1.49, -1.5]))
    np.testing.assert_array_equal(rounded, [1, -1, 1, -2])


def test_quantize_nan_rejected():
    with pytest.raises(FormatError):
        quantize_value(float("nan"), QFormat(16, 4))
    with pytest.raises(FormatError):
        quantize_array(np.array([1.0, np.nan]), QFormat(16, 4))


def test_dequantize_examples():
    assert dequantize(192, QFormat(16, 7)) == 1.5
    assert dequantize(-128, QFormat(8, 7)) == -1.0
    with pytest.raises(FormatError):
        dequantize(200, QFormat(8, 7))


@given(
    x=st.floats(min_value=-1e4, max_value=1e4, allow_nan=False),
    frac=st.integers(min_value=-4, max_value=12),
)
def test_roundtrip_error_bounded_by_half_step(x, frac):
    fmt = QFormat(16, frac)
    if abs(x) > fmt.max_real:
        return
    error = abs(dequantize(quantize_value(x, fmt), fmt) - x)
    assert error <= fmt.step / 2 + 1e-12


@given(
    a=st.floats(min_value=-500, max_value=500, allow_nan=False),
    b=st.floats(min_value=-500, max_value=500, allow_nan=False),
    frac=st.integers(min_value=-2, max_value=10),
)
def test_quantize_is_monotonic(a, b, frac):
    fmt = QFormat(16, frac)
    low, high = sorted((a, b))
    assert quantize_value(low, fmt) <= quantize_value(high, fmt)


def test_array_and_scalar_paths_agree(rng):
    fmt = QFormat(16, 9)
    values = rng.normal(0, 40, size=500)
    values[:4] = [0.5 / 512, -1.5 / 512, 1e6, -1e6]
    expected = [quantize_value(v, fmt) for v in values]
    np.testing.assert_array_equal(quantize_array(values, fmt), expected)
    np.testing.assert_array_equal(
        dequantize_array(quantize_array(values, fmt), fmt),
        [dequantize(raw, fmt) for raw in expected],
    )


def rational_quantize(x, fmt):
    scaled = Fraction(x) * 2**fmt.frac_bits
    magnitude = math.floor(abs(scaled) + Fraction(1, 2))
    raw = -magnitude if scaled < 0 else magnitude
    return max(fmt.raw_min, min(fmt.raw_max, raw))


def test_quantize_matches_rational_rounding(rng):
    fmt = QFormat(8, 5)
    values = rng.uniform(-4.0, 4.0, size=1000)
    # exact ties and the saturation edges
    values[:8] = [1 / 64, -1 / 64, 3 / 64, -3 / 64, 3.984375, 3.99, -4.0, -4.015625]
    for value in values:
        assert quantize_value(value, fmt) == rational_quantize(value, fmt)
    assert quantize_value(3.99, fmt) == 127
    assert quantize_value(-4.015625, fmt) == -128


@pytest.mark.parametrize(
    "value,shift,expected",
    [(5, 1, 3), (-5, 1, -3), (4, 1, 2), (7, 2, 2), (6, 2, 2), (-6, 2, -2), (3, 0, 3), (3, -2, 12)],
)
def test_shift_round(value, shift, expected):
    assert int(shift_round(np.array([value]), shift)[0]) == expected


def test_fmap_pixel_major_layout():
    fmap = Fmap(2, 2, 3, np.arange(12, dtype=np.float32))
    np.testing.assert_array_equal(fmap.pixel_slice(1, 0), [3, 4, 5])
    np.testing.assert_array_equal(fmap.pixel_slice(0, 1), [6, 7, 8])
    assert fmap.index(1, 1, 2) == 11
    fmap.pixel_slice(1, 1)[:] = 0
    assert fmap.data[9:12].tolist() == [0, 0, 0]


def test_fmap_single_pixel_and_bounds():
    fmap = Fmap(1, 1, 16, np.zeros(16, dtype=np.int16), QFormat(16, 8))
    assert fmap.pixel_slice(0, 0).size == 16
    with pytest.raises(FormatError):
        fmap.pixel_slice(1, 0)


@given(
    width=st.integers(1, 6),
    height=st.integers(1, 6),
    channels=st.integers(1, 5),
)
def test_pixel_slices_reassemble_the_buffer(width, height, channels):
    data = np.arange(width * height * channels, dtype=np.float32)
    fmap = Fmap(width, height, channels, data)
    pieces = [fmap.pixel_slice(x, y) for y in range(height) for x in range(width)]
    np.testing.assert_array_equal(np.concatenate(pieces), data)


def test_fmap_checks_length_and_dtype():
    with pytest.raises(ShapeError):
        Fmap(2, 2, 2, np.zeros(7, dtype=np.float32))
    with pytest.raises(FormatError):
        Fmap(1, 1, 2, np.zeros(2, dtype=np.int32), QFormat(16, 2))


def test_fmap_quantize_dequantize():
    fmap = Fmap.from_hwc(np.array([[[1.25, -2.0]]], dtype=np.float32))
    quant = fmap.quantized(QFormat(16, 4))
    assert quant.data.tolist() == [20, -32]
    assert quant.dequantized().data.tolist() == [1.25, -2.0]


def test_qtensor_layout_and_range():
    fmt = QFormat(8, 6)
    raws = np.arange(2 * 3 * 3 * 4).reshape(2, 3, 3, 4) - 36
    tensor = QTensor.from_array(raws, fmt)
    assert tensor.shape == (2, 3, 3, 4)
    assert tensor.as_array()[1, 2, 0, 3] == raws[1, 2, 0, 3]
    with pytest.raises(FormatError):
        QTensor(1, 1, 1, 1, fmt, np.array([300]))
    with pytest.raises(FormatError):
        QTensor(1, 1, 1, 1, QFormat(16, 2), np.array([3]))


def test_max_real_matches_raw_max():
    fmt = QFormat(16, 3)
    assert math.isclose(fmt.max_real, 32767 / 8)

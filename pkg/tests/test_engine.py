import numpy as np
import pytest
from pydantic import ValidationError

from conftest import random_qfmap, random_qspec, random_qtensor
from squeezejet.engine import (
    ItbState,
    LayerDims,
    MacArray,
    SqjConfig,
    SqjEngine,
    conv_first_layer,
    conv_quant_naive,
    conv_sqj,
    estimate_cycles,
    mac16,
    trace_stream,
)
from squeezejet.errors import AccumulatorOverflowError, ConstraintViolation, FormatError
from squeezejet.fixedpoint import Fmap, QFormat, QTensor, quantize_array, quantize_value
from squeezejet.graph import accelerated_convs, build_v11_topology
from squeezejet.quantizer import choose_frac_bits
from squeezejet.reference import FloatLayerParams, conv2d_ref
from squeezejet.weights import LayerQSpec


def _round_away(values):
    """Round half away from zero for exactly representable float64 values."""
    return np.trunc(values + np.copysign(0.5, values))


def oracle_conv(fmap, weights, bias, qspec, stride, pad, relu):
    """Integer convolution built from explicit per-pixel patches."""
    wf, bf, inf, of = qspec.frac_bits()
    image = fmap.as_hwc().astype(np.int64)
    taps = weights.as_array().astype(np.int64)
    out_c, kh, kw, _ = taps.shape
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    out_h = (padded.shape[0] - kh) // stride + 1
    out_w = (padded.shape[1] - kw) // stride + 1
    patches = np.empty((out_h, out_w, kh, kw, image.shape[2]), np.int64)
    for y in range(out_h):
        for x in range(out_w):
            patches[y, x] = padded[y * stride : y * stride + kh, x * stride : x * stride + kw]
    products = np.tensordot(patches, taps, axes=([2, 3, 4], [1, 2, 3]))

    acc_frac = wf + inf
    aligned = _round_away(np.asarray(bias, np.float64) * 2.0 ** (acc_frac - bf)).astype(np.int64)
    acc = products + aligned
    assert acc.min() >= -(2**31) and acc.max() < 2**31
    out = _round_away(acc.astype(np.float64) * 2.0 ** (of - acc_frac))
    out = np.clip(out, -32768, 32767)
    if relu:
        out = np.maximum(out, 0)
    return out.astype(np.int16)


def random_layer(rng, in_c, out_c, kernel, width, height):
    qspec = random_qspec(rng)
    fmap = random_qfmap(rng, width, height, in_c, qspec.input_fmt)
    weights = random_qtensor(rng, out_c, in_c, kernel, qspec.weight_fmt)
    bias = rng.integers(-128, 128, size=out_c).astype(np.int8)
    return fmap, weights, bias, qspec


def test_mac16_examples():
    assert mac16([0] * 16, [0] * 16, 1234) == 1234
    assert mac16([1] * 16, [1] * 16, 0) == 16
    assert mac16([-128] * 16, [-32768] * 16, 0) == 16 * 128 * 32768


def test_mac16_matches_scalar_loop(rng):
    weights = rng.integers(-128, 128, size=(100_000, 16))
    acts = rng.integers(-32768, 32768, size=(100_000, 16))
    accs = rng.integers(-(2**28), 2**28, size=100_000)
    for index in range(0, 100_000, 97):
        expected = int(accs[index])
        for lane in range(16):
            expected += int(weights[index, lane]) * int(acts[index, lane])
        assert mac16(weights[index], acts[index], int(accs[index])) == expected
    # Vector form over all triples.
    lanes = acts[:, None, :]
    taps = np.ones((1, 1, 16), dtype=np.int64)
    array = MacArray(8)
    totals = array.run(lanes, taps, np.zeros((100_000, 1), np.int64))
    np.testing.assert_array_equal(totals[:, 0], acts.sum(axis=1))
    assert array.mac_cycles == 100_000


def test_mac_array_is_repeated_mac16(rng):
    pixels, chunks, outputs = 5, 4, 8
    lanes = rng.integers(-32768, 32768, size=(pixels, chunks, 16), dtype=np.int64)
    taps = rng.integers(-128, 128, size=(outputs, chunks, 16), dtype=np.int64)
    start = rng.integers(-1000, 1000, size=(pixels, outputs), dtype=np.int64)
    array = MacArray(8)
    totals = array.run(lanes, taps, start.copy())

    invocations = 0
    for n in range(pixels):
        for p in range(outputs):
            acc = int(start[n, p])
            for t in range(chunks):
                acc = mac16(taps[p, t].tolist(), lanes[n, t].tolist(), acc)
                invocations += 1
            assert totals[n, p] == acc
    assert array.mac_cycles * outputs == invocations


def test_mac16_range_and_overflow():
    with pytest.raises(FormatError):
        mac16([128] + [0] * 15, [0] * 16, 0)
    with pytest.raises(FormatError):
        mac16([0] * 15, [0] * 16, 0)
    with pytest.raises(AccumulatorOverflowError):
        mac16([127] * 16, [32767] * 16, 2**31 - 100)


def test_sqj_config_validation():
    assert SqjConfig().mac_units == 8
    assert SqjConfig().clock_mhz == 100
    for bad in (dict(mac_units=6), dict(mac_units=2), dict(lane_width=8), dict(clock_mhz=0)):
        with pytest.raises(ValidationError):
            SqjConfig(**bad)


def test_identity_1x1():
    fmt = QFormat(16, 6)
    qspec = LayerQSpec(QFormat(8, 0), QFormat(8, 0), fmt, fmt)
    raws = np.random.default_rng(3).integers(0, 30000, size=(3, 4, 16)).astype(np.int16)
    fmap = Fmap.from_hwc(raws, fmt)
    eye = np.zeros((16, 1, 1, 16), dtype=np.int8)
    eye[np.arange(16), 0, 0, np.arange(16)] = 1
    out = conv_sqj(fmap, QTensor.from_array(eye, QFormat(8, 0)), np.zeros(16), qspec, relu=False)
    np.testing.assert_array_equal(out.as_hwc(), raws)


def test_bias_only_3x3():
    qspec = LayerQSpec.from_frac_bits(6, 6, 8, 7)
    fmap = random_qfmap(np.random.default_rng(4), 4, 4, 16, qspec.input_fmt)
    zeros = QTensor.from_array(np.zeros((8, 3, 3, 16), dtype=np.int8), qspec.weight_fmt)
    bias = np.full(8, quantize_value(1.0, qspec.bias_fmt), dtype=np.int8)
    out = conv_sqj(fmap, zeros, bias, qspec)
    assert set(out.data.tolist()) == {quantize_value(1.0, qspec.output_fmt)}


def test_sqj_bit_exact_against_oracle():
    rng = np.random.default_rng(2024)
    engine = SqjEngine()
    for _ in range(1000):
        in_c = int(rng.choice([16, 32, 48]))
        out_c = int(rng.choice([8, 16, 32]))
        kernel = int(rng.choice([1, 3]))
        width, height = (int(v) for v in rng.integers(1, 9, size=2))
        fmap, weights, bias, qspec = random_layer(rng, in_c, out_c, kernel, width, height)
        relu = bool(rng.integers(0, 2))
        got = engine.conv_sqj(fmap, weights, bias, qspec, relu=relu)
        expected = oracle_conv(fmap, weights, bias, qspec, 1, kernel // 2, relu)
        np.testing.assert_array_equal(got.as_hwc(), expected)
        assert got.fmt == qspec.output_fmt


def test_fine_bias_is_rounded_down_to_accumulator_scale(rng):
    # bias frac 7 against accumulator frac 0 + 1: align_bias shifts right by 6
    qspec = LayerQSpec.from_frac_bits(0, 7, 1, -4)
    assert qspec.bias_fmt.frac_bits > qspec.accumulator_frac_bits
    engine = SqjEngine()
    for _ in range(100):
        in_c = int(rng.choice([16, 32]))
        kernel = int(rng.choice([1, 3]))
        fmap = random_qfmap(rng, 5, 4, in_c, qspec.input_fmt, high=256)
        weights = random_qtensor(rng, 8, in_c, kernel, qspec.weight_fmt)
        bias = rng.integers(-128, 128, size=8).astype(np.int8)
        expected = oracle_conv(fmap, weights, bias, qspec, 1, kernel // 2, False)
        got = engine.conv_sqj(fmap, weights, bias, qspec, relu=False)
        np.testing.assert_array_equal(got.as_hwc(), expected)
        naive = conv_quant_naive(fmap, weights, bias, qspec, stride=1, pad=kernel // 2, relu=False)
        np.testing.assert_array_equal(naive.as_hwc(), expected)

    # 96 / 64 = 1.5 rounds away to 2; -96 / 64 to -2
    qspec = LayerQSpec.from_frac_bits(0, 7, 1, 1)
    zeros = QTensor.from_array(np.zeros((8, 1, 1, 16), dtype=np.int8), qspec.weight_fmt)
    blank = Fmap.from_hwc(np.zeros((1, 1, 16), dtype=np.int16), qspec.input_fmt)
    bias = np.array([96, -96, 31, 32, -32, 0, 127, -128], dtype=np.int8)
    out = engine.conv_sqj(blank, zeros, bias, qspec, relu=False)
    assert out.as_hwc()[0, 0].tolist() == [2, -2, 0, 1, -1, 0, 2, -2]


def test_naive_backend_matches_oracle(rng):
    for _ in range(100):
        kernel, stride, pad = [(1, 1, 0), (3, 1, 1), (3, 2, 0), (3, 2, 1)][int(rng.integers(0, 4))]
        in_c = int(rng.integers(1, 20))
        fmap, weights, bias, qspec = random_layer(rng, in_c, int(rng.integers(1, 12)), kernel, 7, 6)
        got = conv_quant_naive(fmap, weights, bias, qspec, stride=stride, pad=pad, relu=False)
        expected = oracle_conv(fmap, weights, bias, qspec, stride, pad, False)
        np.testing.assert_array_equal(got.as_hwc(), expected)


def test_first_layer_bit_exact(rng):
    for _ in range(50):
        width, height = (int(v) for v in rng.integers(3, 12, size=2))
        fmap, weights, bias, qspec = random_layer(rng, 3, 16, 3, width, height)
        got = conv_first_layer(fmap, weights, bias, qspec)
        np.testing.assert_array_equal(
            got.as_hwc(), oracle_conv(fmap, weights, bias, qspec, 2, 0, True)
        )


def test_first_layer_geometry_and_zeros():
    qspec = LayerQSpec.from_frac_bits(7, 7, 8, 8)
    fmap = Fmap.from_hwc(np.zeros((7, 7, 3), dtype=np.int16), qspec.input_fmt)
    weights = random_qtensor(np.random.default_rng(1), 8, 3, 3, qspec.weight_fmt)
    out = conv_first_layer(fmap, weights, np.zeros(8, dtype=np.int8), qspec)
    assert out.shape == (3, 3, 8)
    assert not out.data.any()


def test_first_layer_constraints():
    qspec = LayerQSpec.from_frac_bits(7, 7, 8, 8)
    rng = np.random.default_rng(0)
    fmap = random_qfmap(rng, 5, 5, 4, qspec.input_fmt)
    with pytest.raises(ConstraintViolation) as info:
        conv_first_layer(fmap, random_qtensor(rng, 8, 4, 3, qspec.weight_fmt), np.zeros(8), qspec)
    assert info.value.constraint == "first-layer-3-channels"
    fmap = random_qfmap(rng, 5, 5, 3, qspec.input_fmt)
    with pytest.raises(ConstraintViolation) as info:
        conv_first_layer(fmap, random_qtensor(rng, 8, 3, 1, qspec.weight_fmt), np.zeros(8), qspec)
    assert info.value.constraint == "first-layer-3x3-kernel"


@pytest.mark.parametrize(
    "in_c,out_c,kernel,stride,pad,constraint",
    [
        (16, 8, 3, 2, 1, "stride-1"),
        (16, 8, 3, 1, 0, "kernel-1x1-or-3x3-pad-1"),
        (16, 8, 5, 1, 2, "kernel-1x1-or-3x3-pad-1"),
        (24, 8, 1, 1, 0, "input-channels-multiple-of-16"),
        (16, 12, 1, 1, 0, "output-channels-multiple-of-8"),
    ],
)
def test_sqj_constraints_are_named(in_c, out_c, kernel, stride, pad, constraint):
    rng = np.random.default_rng(5)
    fmap, weights, bias, qspec = random_layer(rng, in_c, out_c, kernel, 6, 6)
    with pytest.raises(ConstraintViolation) as info:
        SqjEngine().conv_sqj(fmap, weights, bias, qspec, stride=stride, pad=pad)
    assert info.value.constraint == constraint
    assert constraint in str(info.value)


def test_sqj_overflow_is_reported():
    qspec = LayerQSpec.from_frac_bits(0, 0, 0, 0)
    fmap = Fmap.from_hwc(np.full((3, 3, 64), 32767, dtype=np.int16), qspec.input_fmt)
    weights = QTensor.from_array(np.full((8, 3, 3, 64), 127, dtype=np.int8), qspec.weight_fmt)
    with pytest.raises(AccumulatorOverflowError):
        conv_sqj(fmap, weights, np.zeros(8), qspec)


@pytest.mark.parametrize("units", [4, 16, 32])
def test_mac_units_change_cycles_not_values(rng, units):
    fmap, weights, bias, qspec = random_layer(rng, 32, 32, 3, 5, 4)
    base = SqjEngine(SqjConfig(mac_units=8))
    other = SqjEngine(SqjConfig(mac_units=units))
    first = base.conv_sqj(fmap, weights, bias, qspec)
    second = other.conv_sqj(fmap, weights, bias, qspec)
    np.testing.assert_array_equal(first.data, second.data)
    assert other.mac_cycles * units == base.mac_cycles * 8


def test_sqj_is_deterministic(rng):
    fmap, weights, bias, qspec = random_layer(rng, 16, 16, 3, 6, 6)
    first = conv_sqj(fmap, weights, bias, qspec)
    second = conv_sqj(fmap, weights, bias, qspec)
    assert first.data.tobytes() == second.data.tobytes()


def test_itbw_equals_padded_window(rng):
    channels, width, height = 16, 5, 4
    image = rng.integers(-100, 100, size=(height, width, channels))
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)))
    itb = ItbState(3, 3, width + 2, channels)
    for row in range(height + 2):
        itb.push_row(padded[row])
        if not itb.ready:
            continue
        y = row - 2
        windows = itb.windows(width)
        for x in range(width):
            expected = padded[y : y + 3, x : x + 3]
            np.testing.assert_array_equal(itb.window(x), expected)
            np.testing.assert_array_equal(windows[x], expected)


def test_trace_stream_row_major(rng):
    qspec = random_qspec(rng)
    fmap = random_qfmap(rng, 2, 2, 16, qspec.input_fmt)
    weights = random_qtensor(rng, 8, 16, 3, qspec.weight_fmt)
    assert trace_stream(fmap, weights, np.zeros(8), qspec) == [(0, 0), (1, 0), (0, 1), (1, 1)]

    fmap = random_qfmap(rng, 6, 1, 16, qspec.input_fmt)
    weights = random_qtensor(rng, 8, 16, 1, qspec.weight_fmt)
    assert trace_stream(fmap, weights, np.zeros(8), qspec) == [(x, 0) for x in range(6)]

    fmap = random_qfmap(rng, 5, 7, 32, qspec.input_fmt)
    weights = random_qtensor(rng, 16, 32, 3, qspec.weight_fmt)
    emitted = trace_stream(fmap, weights, np.zeros(16), qspec)
    assert len(emitted) == len(set(emitted)) == 35
    assert set(emitted) == {(x, y) for y in range(7) for x in range(5)}
    assert emitted == sorted(emitted, key=lambda xy: (xy[1], xy[0]))


def test_estimate_cycles_examples():
    single = estimate_cycles(LayerDims(1, 1, 16, 8, 1))
    assert single.mac_cycles == 1
    conv10 = estimate_cycles(LayerDims(13, 13, 512, 1000, 1, w_in=13))
    assert conv10.mac_cycles == 13 * 13 * 32 * 1 * 125 == 676_000
    assert conv10.buffer_init_cycles == 32 * 1 * 13
    assert conv10.total_cycles == conv10.mac_cycles + conv10.buffer_init_cycles
    assert conv10.latency_ms == pytest.approx(conv10.total_cycles / 100_000)
    assert 6.76 <= conv10.latency_ms < 6.77


def test_estimate_cycles_halves_with_double_units():
    dims = LayerDims(27, 27, 128, 256, 3, w_in=27)
    eight = estimate_cycles(dims, SqjConfig(mac_units=8))
    sixteen = estimate_cycles(dims, SqjConfig(mac_units=16))
    assert eight.mac_cycles == 2 * sixteen.mac_cycles


def test_cycle_report_serializes():
    report = estimate_cycles(LayerDims(2, 2, 16, 8, 3, w_in=2))
    record = report.to_record()
    assert record["mac_cycles"] == 2 * 2 * 9
    assert "mac_cycles=36" in report.to_text()
    assert f"total_cycles={report.total_cycles}" in report.to_text()


def test_mac_count_identity_on_shipped_topology():
    net = build_v11_topology()
    cfg = SqjConfig()
    rng = np.random.default_rng(11)
    qspec = LayerQSpec.from_frac_bits(4, 4, 4, 0)
    for layer, unit, dims in accelerated_convs(net, cfg):
        width, height, in_c = unit.in_dims
        fmap = random_qfmap(rng, width, height, in_c, qspec.input_fmt, high=64)
        raws = rng.integers(-16, 16, size=(unit.out_channels, unit.kernel, unit.kernel, in_c))
        weights = QTensor.from_array(raws.astype(np.int8), qspec.weight_fmt)
        bias = np.zeros(unit.out_channels, dtype=np.int8)
        engine = SqjEngine(cfg)
        if unit.stride == 2:
            out = engine.conv_first_layer(fmap, weights, bias, qspec, relu=unit.relu)
        else:
            out = engine.conv_sqj(fmap, weights, bias, qspec, relu=unit.relu)
        assert out.shape == unit.out_dims, unit.name
        assert engine.mac_cycles == estimate_cycles(dims, cfg).mac_cycles, unit.name


def test_quantized_output_within_float_bound():
    rng = np.random.default_rng(99)
    for _ in range(100):
        in_c = int(rng.choice([16, 32]))
        out_c = int(rng.choice([8, 16]))
        kernel = int(rng.choice([1, 3]))
        width, height = (int(v) for v in rng.integers(1, 7, size=2))
        weights_f = rng.normal(0, 0.2, size=(out_c, kernel, kernel, in_c))
        bias_f = rng.normal(0, 0.5, size=out_c)
        pad = kernel // 2

        input_fmt = QFormat(16, 10)
        raws = rng.integers(-4096, 4096, size=(height, width, in_c)).astype(np.int16)
        fmap = Fmap.from_hwc(raws, input_fmt)
        real_in = fmap.dequantized()

        weight_fmt = QFormat(8, choose_frac_bits(float(np.abs(weights_f).max()), 8))
        bias_fmt = QFormat(8, choose_frac_bits(float(np.abs(bias_f).max()), 8))
        reference = conv2d_ref(real_in, FloatLayerParams(weights_f, bias_f, pad=pad), relu=False)
        output_fmt = QFormat(16, choose_frac_bits(float(np.abs(reference.data).max()) * 1.5, 16))
        qspec = LayerQSpec(weight_fmt, bias_fmt, input_fmt, output_fmt)

        weights_q = QTensor.from_array(quantize_array(weights_f, weight_fmt), weight_fmt)
        bias_q = quantize_array(bias_f, bias_fmt)
        out = conv_sqj(fmap, weights_q, bias_q, qspec, relu=False)

        ones = FloatLayerParams(np.ones((1, kernel, kernel, in_c)), [0.0], pad=pad)
        abs_sum = conv2d_ref(Fmap.from_hwc(np.abs(real_in.as_hwc())), ones, relu=False)
        acc_step = 2.0 ** -(weight_fmt.frac_bits + input_fmt.frac_bits)
        bound = (
            weight_fmt.step / 2 * abs_sum.as_hwc().astype(np.float64)
            + bias_fmt.step / 2
            + acc_step / 2
            + output_fmt.step / 2
        )
        error = np.abs(out.dequantized().as_hwc().astype(np.float64) - reference.as_hwc())
        slack = 1e-5 * (1 + abs_sum.as_hwc())
        assert (error <= bound + slack).all()

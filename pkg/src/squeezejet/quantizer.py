"""
Dynamic fixed-point quantization of a float network.

Each convolution gets its own formats: 8-bit weights and bias, 16-bit input and
output fmaps. Fraction lengths come from the largest absolute value seen per
tensor group during a float calibration pass, picking the finest format that
still holds that value without saturating. No fine-tuning happens afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, QuantizationError
from .fixedpoint import Fmap, QFormat, QTensor, quantize_array, round_half_away
from .graph import ExecMode, ExecPlan, LayerKind, NetworkDef, forward, top_k
from .reference import FloatLayerParams, conv2d_ref, maxpool_ref
from .weights import ConvWeights, LayerQSpec, QuantConvParams, WeightStore

logger = logging.getLogger(__name__)

__all__ = [
    "LayerQSpec",
    "ConvStats",
    "CalibrationStats",
    "AccuracyDelta",
    "Classifier",
    "network_classifier",
    "choose_frac_bits",
    "calibrate",
    "quantize_network",
    "measure_accuracy_delta",
    "render_quant_report",
    "random_float_store",
]

# SQNW stores fraction lengths as signed bytes.
FRAC_BITS_MIN = -128
FRAC_BITS_MAX = 127


def _saturates(max_abs: float, frac_bits: int, raw_max: int) -> bool:
    return float(round_half_away(np.ldexp(max_abs, frac_bits))) > raw_max


def choose_frac_bits(max_abs: float, total_bits: int) -> int:
    """Largest fraction length at which ``+-max_abs`` quantizes without saturating."""
    if total_bits not in (8, 16, 32):
        raise FormatError(f"total_bits must be 8, 16 or 32, got {total_bits}")
    if math.isnan(max_abs) or max_abs < 0:
        raise QuantizationError(f"max_abs must be a non-negative number, got {max_abs}")
    if max_abs == 0:
        return total_bits - 1
    raw_max = (1 << (total_bits - 1)) - 1
    frac = math.floor(math.log2(raw_max / max_abs))
    frac = max(FRAC_BITS_MIN, min(FRAC_BITS_MAX, frac))
    while frac > FRAC_BITS_MIN and _saturates(max_abs, frac, raw_max):
        frac -= 1
    while frac < FRAC_BITS_MAX and not _saturates(max_abs, frac + 1, raw_max):
        frac += 1
    return frac


@dataclass
class ConvStats:
    """Largest absolute values seen for one convolution."""

    input_max: float = 0.0
    output_max: float = 0.0
    weight_max: float = 0.0
    bias_max: float = 0.0

    def merge(self, other: "ConvStats") -> "ConvStats":
        return ConvStats(
            max(self.input_max, other.input_max),
            max(self.output_max, other.output_max),
            max(self.weight_max, other.weight_max),
            max(self.bias_max, other.bias_max),
        )


@dataclass
class CalibrationStats:
    layers: Dict[str, ConvStats] = field(default_factory=dict)
    samples: int = 0

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        names = list(self.layers) + [name for name in other.layers if name not in self.layers]
        merged = {
            name: self.layers.get(name, ConvStats()).merge(other.layers.get(name, ConvStats()))
            for name in names
        }
        return CalibrationStats(merged, self.samples + other.samples)


def _max_abs(values: np.ndarray) -> float:
    return float(np.abs(values).max()) if values.size else 0.0


def _calibrate_one(net: NetworkDef, store: WeightStore, sample: Fmap) -> CalibrationStats:
    stats = CalibrationStats(samples=1)

    def run_unit(name: str, fmap: Fmap, relu: bool) -> Fmap:
        params = store.float_params(name)
        out = conv2d_ref(fmap, params, relu=relu)
        stats.layers[name] = ConvStats(
            input_max=_max_abs(fmap.data),
            output_max=_max_abs(out.data),
            weight_max=_max_abs(params.weights),
            bias_max=_max_abs(params.bias),
        )
        return out

    fmap = sample.dequantized()
    for layer in net.layers:
        if layer.kind is LayerKind.CONV:
            fmap = run_unit(layer.name, fmap, layer.relu)
        elif layer.kind is LayerKind.FIRE:
            squeeze, left, right = layer.conv_units()
            squeezed = run_unit(squeeze.name, fmap, True)
            joined = [run_unit(left.name, squeezed, True), run_unit(right.name, squeezed, True)]
            fmap = Fmap.from_hwc(np.concatenate([part.as_hwc() for part in joined], axis=2))
        elif layer.kind is LayerKind.MAXPOOL:
            fmap = maxpool_ref(fmap, layer.kernel, layer.stride)
        else:
            break
    return stats


def calibrate(net: NetworkDef, store: WeightStore, samples: Sequence[Fmap]) -> CalibrationStats:
    """Float forward passes recording max |value| of every convolution's tensors.

    Per-sample results merge with an elementwise max, so sample order never
    matters.
    """
    if not samples:
        raise QuantizationError("calibration needs at least one sample")
    stats: Optional[CalibrationStats] = None
    for sample in samples:
        one = _calibrate_one(net, store, sample)
        stats = one if stats is None else stats.merge(one)
    assert stats is not None
    logger.info("Calibrated %d convolutions over %d samples", len(stats.layers), stats.samples)
    return stats


def _quantize_params(record: ConvWeights, qspec: LayerQSpec) -> QuantConvParams:
    params = record.float_params
    if params is None:
        raise QuantizationError(f"{record.name} has no float parameters to quantize")
    weights = QTensor.from_array(quantize_array(params.weights, qspec.weight_fmt), qspec.weight_fmt)
    bias = quantize_array(params.bias, qspec.bias_fmt)
    return QuantConvParams(weights, bias, qspec, stride=params.stride, pad=params.pad)


def quantize_network(
    net: NetworkDef, store: WeightStore, stats: CalibrationStats
) -> WeightStore:
    """Quantize every convolution with formats chosen from ``stats``.

    A convolution's input format is always its producer's output format; the
    two expand convolutions of a Fire layer share one output format so their
    concatenation is a single fmap. The returned store keeps the float
    parameters alongside the quantized ones.
    """

    def unit_stats(name: str) -> ConvStats:
        if name not in stats.layers:
            raise QuantizationError(f"calibration stats missing for {name}")
        return stats.layers[name]

    def build(name: str, input_fmt: QFormat, output_fmt: QFormat) -> None:
        unit = unit_stats(name)
        if name not in store:
            raise QuantizationError(f"weight store has no record for {name}")
        record = store[name]
        qspec = LayerQSpec(
            weight_fmt=QFormat(8, choose_frac_bits(unit.weight_max, 8)),
            bias_fmt=QFormat(8, choose_frac_bits(unit.bias_max, 8)),
            input_fmt=input_fmt,
            output_fmt=output_fmt,
        )
        quant = _quantize_params(record, qspec)
        result.add(ConvWeights(name, record.role, record.float_params, quant))
        logger.debug("%s: %s", name, qspec.frac_bits())

    result = WeightStore()
    first = net.first_conv.name
    current = QFormat(16, choose_frac_bits(unit_stats(first).input_max, 16))
    for layer in net.layers:
        if layer.kind is LayerKind.CONV:
            out_fmt = QFormat(16, choose_frac_bits(unit_stats(layer.name).output_max, 16))
            build(layer.name, current, out_fmt)
            current = out_fmt
        elif layer.kind is LayerKind.FIRE:
            squeeze, left, right = layer.conv_units()
            squeeze_fmt = QFormat(16, choose_frac_bits(unit_stats(squeeze.name).output_max, 16))
            build(squeeze.name, current, squeeze_fmt)
            expand_max = max(unit_stats(left.name).output_max, unit_stats(right.name).output_max)
            out_fmt = QFormat(16, choose_frac_bits(expand_max, 16))
            build(left.name, squeeze_fmt, out_fmt)
            build(right.name, squeeze_fmt, out_fmt)
            current = out_fmt
    return result


Classifier = Callable[[Fmap], np.ndarray]


def network_classifier(net: NetworkDef, store: WeightStore, mode: ExecMode) -> Classifier:
    plan = ExecPlan.for_mode(net, mode)

    def classify(sample: Fmap) -> np.ndarray:
        return forward(net, store, plan, sample).probs

    return classify


@dataclass
class AccuracyDelta:
    float_topk_acc: float
    quant_topk_acc: float
    delta: float
    samples: int


def _topk_hits(model: Classifier, dataset: Sequence[Tuple[Fmap, int]], k: int) -> int:
    hits = 0
    for sample, label in dataset:
        probs = model(sample)
        if not 0 <= label < probs.size:
            raise ValueError(f"label {label} outside class range [0, {probs.size})")
        if label in {class_id for class_id, _ in top_k(probs, k)}:
            hits += 1
    return hits


def measure_accuracy_delta(
    float_model: Classifier,
    quant_model: Classifier,
    dataset: Sequence[Tuple[Fmap, int]],
    k: int = 5,
) -> AccuracyDelta:
    """Top-k accuracy of both models on labeled inputs and their difference."""
    if not dataset:
        raise QuantizationError("accuracy measurement needs a non-empty dataset")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    total = len(dataset)
    float_acc = _topk_hits(float_model, dataset, k) / total
    quant_acc = _topk_hits(quant_model, dataset, k) / total
    return AccuracyDelta(float_acc, quant_acc, float_acc - quant_acc, total)


def render_quant_report(net: NetworkDef, store: WeightStore, stats: CalibrationStats) -> str:
    header = (
        f"{'layer':<20} {'w':>4} {'b':>4} {'in':>4} {'out':>4} "
        f"{'max|w|':>10} {'max|b|':>10} {'max|in|':>10} {'max|out|':>10}"
    )
    lines: List[str] = [header, "-" * len(header)]
    for unit in net.conv_units():
        qspec = store.quant_params(unit.name).qspec
        unit_stats = stats.layers.get(unit.name, ConvStats())
        w, b, i, o = qspec.frac_bits()
        lines.append(
            f"{unit.name:<20} {w:>4} {b:>4} {i:>4} {o:>4} "
            f"{unit_stats.weight_max:>10.4g} {unit_stats.bias_max:>10.4g} "
            f"{unit_stats.input_max:>10.4g} {unit_stats.output_max:>10.4g}"
        )
    return "\n".join(lines)


def random_float_store(net: NetworkDef, seed: int = 0) -> WeightStore:
    """He-initialized float parameters for every convolution of ``net``.

    Stands in for trained weights when only timing or dataflow matters.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for unit in net.conv_units():
        in_channels = unit.in_dims[2]
        fan_in = unit.kernel * unit.kernel * in_channels
        shape = (unit.out_channels, unit.kernel, unit.kernel, in_channels)
        weights = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        bias = rng.normal(0.0, 0.01, size=unit.out_channels)
        params = FloatLayerParams(weights, bias, stride=unit.stride, pad=unit.pad)
        store.add(ConvWeights(unit.name, unit.role, params, None))
    return store

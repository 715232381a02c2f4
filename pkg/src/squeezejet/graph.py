"""
SqueezeNet topology, execution planning and the forward pass.

Layer geometry comes from a line-oriented topology file, one layer per line::

    input 227 227 3
    classes 1000
    1 Conv conv1 in=227x227x3 out=64 kernel=3 stride=2 pad=0
    2 Maxpool pool1 in=113x113x64 kernel=3 stride=2
    3 Fire fire2 in=56x56x64 squeeze=16 expand1=64 expand3=64
    ...

``in=WxHxC`` is optional; when given it must equal the predecessor's output.
The shipped file transcribes the public SqueezeNet v1.1 model since the
accelerator's description names the network but not its dimensions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .engine import (
    CycleReport,
    LayerDims,
    SqjConfig,
    SqjEngine,
    conv_quant_naive,
    estimate_cycles,
)
from .errors import PlanError, ShapeError, TopologyError
from .fixedpoint import Fmap
from .reference import (
    avgpool_global_ref,
    conv2d_ref,
    conv_output_dim,
    fire_ref,
    maxpool_ref,
    softmax_ref,
)
from .weights import ConvRole, QuantConvParams, WeightStore

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]

V11_KINDS = (
    "Conv", "Maxpool", "Fire", "Fire", "Maxpool", "Fire", "Fire", "Maxpool",
    "Fire", "Fire", "Fire", "Fire", "Conv", "Avgpool", "Softmax",
)
V11_CLASSES = 1000
DEFAULT_TOPOLOGY = "squeezenet_v1_1.topology"


class LayerKind(str, Enum):
    CONV = "Conv"
    MAXPOOL = "Maxpool"
    FIRE = "Fire"
    AVGPOOL = "Avgpool"
    SOFTMAX = "Softmax"


@dataclass(frozen=True)
class ConvUnit:
    """One convolution inside a Conv or Fire layer."""

    name: str
    role: ConvRole
    in_dims: Dims
    out_channels: int
    kernel: int
    stride: int
    pad: int
    relu: bool = True

    @property
    def out_dims(self) -> Dims:
        width, height, _ = self.in_dims
        return (
            conv_output_dim(width, self.kernel, self.stride, self.pad),
            conv_output_dim(height, self.kernel, self.stride, self.pad),
            self.out_channels,
        )


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    kind: LayerKind
    in_dims: Dims
    out_dims: Dims
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    out_channels: int = 0
    squeeze: int = 0
    expand1: int = 0
    expand3: int = 0
    relu: bool = True

    @property
    def label(self) -> str:
        """Row name as the per-layer latency table prints it, e.g. ``3:Fire``."""
        return f"{self.index}:{self.kind.value}"

    @property
    def is_conv_or_fire(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FIRE)

    def conv_units(self) -> List[ConvUnit]:
        if self.kind is LayerKind.CONV:
            return [
                ConvUnit(self.name, ConvRole.CONV, self.in_dims, self.out_channels,
                         self.kernel, self.stride, self.pad, self.relu)
            ]
        if self.kind is LayerKind.FIRE:
            width, height, _ = self.in_dims
            squeezed = (width, height, self.squeeze)
            return [
                ConvUnit(f"{self.name}/squeeze1x1", ConvRole.SQUEEZE, self.in_dims,
                         self.squeeze, 1, 1, 0),
                ConvUnit(f"{self.name}/expand1x1", ConvRole.EXPAND1, squeezed,
                         self.expand1, 1, 1, 0),
                ConvUnit(f"{self.name}/expand3x3", ConvRole.EXPAND3, squeezed,
                         self.expand3, 3, 1, 1),
            ]
        return []


@dataclass(frozen=True)
class NetworkDef:
    layers: Tuple[LayerSpec, ...]
    input_dims: Dims
    class_count: int

    def conv_units(self) -> List[ConvUnit]:
        return [unit for layer in self.layers for unit in layer.conv_units()]

    @property
    def first_conv(self) -> ConvUnit:
        units = self.conv_units()
        if not units:
            raise TopologyError("network has no convolution")
        return units[0]


def _parse_dims(text: str, index: int) -> Dims:
    try:
        width, height, channels = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise TopologyError(f"bad dims {text!r}, expected WxHxC", index) from exc
    return (width, height, channels)


def _int_field(fields: Dict[str, str], key: str, index: int, default: Optional[int] = None) -> int:
    if key not in fields:
        if default is None:
            raise TopologyError(f"missing '{key}='", index)
        return default
    try:
        return int(fields[key])
    except ValueError as exc:
        raise TopologyError(f"'{key}' must be an integer, got {fields[key]!r}", index) from exc


def parse_topology(text: str) -> NetworkDef:
    """Parse and validate a topology description of any length."""
    input_dims: Optional[Dims] = None
    class_count: Optional[int] = None
    layers: List[LayerSpec] = []
    current: Optional[Dims] = None

    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "input":
            if len(tokens) != 4:
                raise TopologyError("input line needs width height channels")
            input_dims = (int(tokens[1]), int(tokens[2]), int(tokens[3]))
            current = input_dims
            continue
        if tokens[0] == "classes":
            class_count = int(tokens[1])
            continue
        if current is None:
            raise TopologyError("layers must follow the 'input' line")

        try:
            index = int(tokens[0])
        except ValueError as exc:
            raise TopologyError(f"unrecognized line {line!r}") from exc
        if index != len(layers) + 1:
            raise TopologyError(f"expected layer index {len(layers) + 1}", index)
        if len(tokens) < 3:
            raise TopologyError("layer line needs index, kind and name", index)
        try:
            kind = LayerKind(tokens[1])
        except ValueError as exc:
            raise TopologyError(f"unknown layer kind {tokens[1]!r}", index) from exc
        name = tokens[2]
        fields = dict(token.split("=", 1) for token in tokens[3:] if "=" in token)

        if "in" in fields:
            declared = _parse_dims(fields["in"], index)
            if declared != current:
                raise TopologyError(
                    f"declared input {declared} does not match previous output {current}", index
                )
        width, height, channels = current

        if kind is LayerKind.CONV:
            out_channels = _int_field(fields, "out", index)
            kernel = _int_field(fields, "kernel", index)
            stride = _int_field(fields, "stride", index, 1)
            pad = _int_field(fields, "pad", index, 0)
            relu = _int_field(fields, "relu", index, 1) != 0
            out_w = conv_output_dim(width, kernel, stride, pad)
            out_h = conv_output_dim(height, kernel, stride, pad)
            if out_w < 1 or out_h < 1:
                raise TopologyError(f"kernel {kernel} does not fit {width}x{height}", index)
            spec = LayerSpec(index, name, kind, current, (out_w, out_h, out_channels),
                             kernel=kernel, stride=stride, pad=pad,
                             out_channels=out_channels, relu=relu)
        elif kind is LayerKind.MAXPOOL:
            kernel = _int_field(fields, "kernel", index, 3)
            stride = _int_field(fields, "stride", index, 2)
            if kernel > width or kernel > height:
                raise TopologyError(f"pool kernel {kernel} larger than {width}x{height}", index)
            out_dims = ((width - kernel) // stride + 1, (height - kernel) // stride + 1, channels)
            spec = LayerSpec(index, name, kind, current, out_dims, kernel=kernel, stride=stride)
        elif kind is LayerKind.FIRE:
            squeeze = _int_field(fields, "squeeze", index)
            expand1 = _int_field(fields, "expand1", index)
            expand3 = _int_field(fields, "expand3", index)
            spec = LayerSpec(index, name, kind, current, (width, height, expand1 + expand3),
                             squeeze=squeeze, expand1=expand1, expand3=expand3)
        elif kind is LayerKind.AVGPOOL:
            spec = LayerSpec(index, name, kind, current, (1, 1, channels))
        else:
            spec = LayerSpec(index, name, kind, current, current)

        layers.append(spec)
        current = spec.out_dims

    if input_dims is None or not layers:
        raise TopologyError("topology needs an 'input' line and at least one layer")
    final_channels = layers[-1].out_dims[2]
    if class_count is None:
        class_count = final_channels
    if class_count != final_channels:
        raise TopologyError(
            f"classes {class_count} != final layer channels {final_channels}", layers[-1].index
        )
    return NetworkDef(tuple(layers), input_dims, class_count)


def build_v11_topology(topology_config: Union[str, Path, None] = None) -> NetworkDef:
    """Load the 15-layer SqueezeNet v1.1 topology (shipped file by default)."""
    if topology_config is None:
        text = resources.files("squeezejet.data").joinpath(DEFAULT_TOPOLOGY).read_text()
    else:
        text = Path(topology_config).read_text()
    net = parse_topology(text)
    kinds = tuple(layer.kind.value for layer in net.layers)
    if len(kinds) != len(V11_KINDS):
        raise TopologyError(
            f"SqueezeNet v1.1 has {len(V11_KINDS)} layers, config lists {len(kinds)}"
        )
    for layer, expected in zip(net.layers, V11_KINDS):
        if layer.kind.value != expected:
            raise TopologyError(f"expected {expected}, got {layer.kind.value}", layer.index)
    if net.class_count != V11_CLASSES:
        raise TopologyError(f"expected {V11_CLASSES} classes, got {net.class_count}")
    return net


class ExecMode(str, Enum):
    FLOAT = "float"
    QUANT_NAIVE = "quant-naive"
    QUANT_SQJ = "quant-sqj"


class Backend(str, Enum):
    REFERENCE_FLOAT = "reference-float"
    REFERENCE_QUANT = "reference-quant"
    SQJ = "sqj"
    SQJ_FIRST_LAYER = "sqj-first-layer"


@dataclass(frozen=True)
class ExecPlan:
    mode: ExecMode
    backends: Tuple[Backend, ...]

    @classmethod
    def for_mode(cls, net: NetworkDef, mode: Union[ExecMode, str]) -> "ExecPlan":
        mode = ExecMode(mode)
        backends: List[Backend] = []
        first_conv_seen = False
        for layer in net.layers:
            if mode is ExecMode.FLOAT:
                backends.append(Backend.REFERENCE_FLOAT)
            elif layer.kind is LayerKind.MAXPOOL:
                backends.append(Backend.REFERENCE_QUANT)
            elif not layer.is_conv_or_fire:
                backends.append(Backend.REFERENCE_FLOAT)
            elif mode is ExecMode.QUANT_NAIVE:
                backends.append(Backend.REFERENCE_QUANT)
            elif layer.kind is LayerKind.CONV and not first_conv_seen:
                backends.append(Backend.SQJ_FIRST_LAYER)
            else:
                backends.append(Backend.SQJ)
            if layer.kind is LayerKind.CONV:
                first_conv_seen = True
        return cls(mode, tuple(backends))


@dataclass
class ForwardResult:
    probs: np.ndarray
    per_layer_ms: Optional[List[float]] = None
    mac_cycles: int = 0


def check_store(net: NetworkDef, store: WeightStore, plan: ExecPlan) -> None:
    """Raise :class:`PlanError` unless ``store`` holds every parameter ``plan`` reads."""
    if len(plan.backends) != len(net.layers):
        raise PlanError(f"plan covers {len(plan.backends)} layers, network has {len(net.layers)}")
    need_float = plan.mode is ExecMode.FLOAT
    for unit in net.conv_units():
        if unit.name not in store:
            raise PlanError(f"weight store has no record for {unit.name}")
        record = store[unit.name]
        params = record.float_params if need_float else record.quant_params
        if params is None:
            kind = "float" if need_float else "quantized"
            raise PlanError(f"{unit.name} has no {kind} parameters for mode {plan.mode.value}")
        if record.dims[:4] != (unit.out_channels, unit.in_dims[2], unit.kernel, unit.kernel):
            raise PlanError(f"{unit.name} weights {record.dims[:4]} do not match the topology")


def _run_quant_conv(
    fmap: Fmap, unit: ConvUnit, params: QuantConvParams, backend: Backend, engine: SqjEngine
) -> Fmap:
    if backend is Backend.SQJ_FIRST_LAYER:
        return engine.conv_first_layer(
            fmap, params.weights, params.bias, params.qspec, relu=unit.relu
        )
    if backend is Backend.SQJ:
        return engine.conv_sqj(fmap, params.weights, params.bias, params.qspec,
                               relu=unit.relu, stride=unit.stride, pad=unit.pad)
    return conv_quant_naive(fmap, params.weights, params.bias, params.qspec,
                            stride=unit.stride, pad=unit.pad, relu=unit.relu)


def _run_layer(
    layer: LayerSpec, fmap: Fmap, store: WeightStore, backend: Backend, engine: SqjEngine
) -> Fmap:
    if layer.kind is LayerKind.MAXPOOL:
        return maxpool_ref(fmap, layer.kernel, layer.stride)
    if layer.kind is LayerKind.AVGPOOL:
        return avgpool_global_ref(fmap)
    if layer.kind is LayerKind.SOFTMAX:
        probs = softmax_ref(fmap.dequantized().data)
        return Fmap(1, 1, probs.size, probs.astype(np.float32))

    units = layer.conv_units()
    if backend is Backend.REFERENCE_FLOAT:
        if layer.kind is LayerKind.CONV:
            return conv2d_ref(fmap, store.float_params(units[0].name), relu=units[0].relu)
        squeeze, expand1, expand3 = (store.float_params(unit.name) for unit in units)
        return fire_ref(fmap, squeeze, expand1, expand3)

    if layer.kind is LayerKind.CONV:
        return _run_quant_conv(fmap, units[0], store.quant_params(units[0].name), backend, engine)
    squeeze_unit, left_unit, right_unit = units
    squeezed = _run_quant_conv(fmap, squeeze_unit, store.quant_params(squeeze_unit.name),
                               backend, engine)
    left = _run_quant_conv(squeezed, left_unit, store.quant_params(left_unit.name), backend, engine)
    right = _run_quant_conv(squeezed, right_unit, store.quant_params(right_unit.name),
                            backend, engine)
    if left.fmt != right.fmt:
        raise PlanError(
            f"{layer.name}: expand outputs use different formats {left.fmt} / {right.fmt}"
        )
    joined = np.concatenate([left.as_hwc(), right.as_hwc()], axis=2)
    return Fmap.from_hwc(joined, left.fmt)


def forward(
    net: NetworkDef,
    store: WeightStore,
    plan: ExecPlan,
    input: Fmap,
    timing: bool = False,
    clock: Callable[[], float] = time.perf_counter,
    engine: Optional[SqjEngine] = None,
) -> ForwardResult:
    """Run the network layer by layer with the planned backends.

    Float inputs are quantized with the first convolution's input format in
    the quantized modes. ``clock`` must be monotonic and return seconds.
    """
    check_store(net, store, plan)
    if input.shape != net.input_dims:
        raise ShapeError(f"input {input.shape} does not match network input {net.input_dims}")

    fmap = input
    if plan.mode is ExecMode.FLOAT:
        fmap = fmap.dequantized()
    else:
        input_fmt = store.quant_params(net.first_conv.name).qspec.input_fmt
        if fmap.is_float:
            fmap = fmap.quantized(input_fmt)
        elif fmap.fmt != input_fmt:
            raise PlanError(f"input format {fmap.fmt} != first layer input format {input_fmt}")

    engine = engine or SqjEngine()
    cycles_before = engine.mac_cycles
    per_layer: List[float] = []
    for layer, backend in zip(net.layers, plan.backends):
        started = clock() if timing else 0.0
        fmap = _run_layer(layer, fmap, store, backend, engine)
        if timing:
            per_layer.append((clock() - started) * 1000.0)
        if fmap.shape != layer.out_dims:
            raise ShapeError(
                f"layer {layer.label} produced {fmap.shape}, expected {layer.out_dims}"
            )

    probs = fmap.dequantized().data.astype(np.float64)
    return ForwardResult(
        probs=probs,
        per_layer_ms=per_layer if timing else None,
        mac_cycles=engine.mac_cycles - cycles_before,
    )


def top_k(probs: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """Top ``k`` (class_id, probability) pairs, ties broken by lower class id."""
    probs = np.asarray(probs).reshape(-1)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > probs.size:
        raise ValueError(f"k={k} exceeds class count {probs.size}")
    order = np.lexsort((np.arange(probs.size), -probs))[:k]
    return [(int(index), float(probs[index])) for index in order]


def load_labels(path: Union[str, Path]) -> List[str]:
    """Class names, one per line; class id is the zero-based line number."""
    return Path(path).read_text(encoding="utf-8").splitlines()


def accelerated_convs(
    net: NetworkDef, cfg: SqjConfig = SqjConfig()
) -> List[Tuple[LayerSpec, ConvUnit, LayerDims]]:
    """Every Conv/Fire convolution with its accelerator geometry.

    The first-layer unit pads its input channels to one 16-lane chunk.
    """
    rows = []
    for layer in net.layers:
        for unit in layer.conv_units():
            out_w, out_h, out_c = unit.out_dims
            c_in = unit.in_dims[2]
            if c_in < cfg.lane_width:
                c_in = cfg.lane_width
            dims = LayerDims(out_h, out_w, c_in, out_c, unit.kernel, w_in=unit.in_dims[0])
            rows.append((layer, unit, dims))
    return rows


@dataclass
class NetworkCycles:
    per_layer: Dict[str, CycleReport] = field(default_factory=dict)
    per_unit: Dict[str, CycleReport] = field(default_factory=dict)

    @property
    def mac_cycles(self) -> int:
        return sum(report.mac_cycles for report in self.per_unit.values())

    @property
    def total_cycles(self) -> int:
        return sum(report.total_cycles for report in self.per_unit.values())


def estimate_network_cycles(net: NetworkDef, cfg: SqjConfig = SqjConfig()) -> NetworkCycles:
    """Cycle estimates per convolution and summed per Conv/Fire layer."""
    result = NetworkCycles()
    for layer, unit, dims in accelerated_convs(net, cfg):
        report = estimate_cycles(dims, cfg)
        result.per_unit[unit.name] = report
        previous = result.per_layer.get(layer.label)
        if previous is None:
            result.per_layer[layer.label] = report
        else:
            total = previous.total_cycles + report.total_cycles
            result.per_layer[layer.label] = CycleReport(
                mac_cycles=previous.mac_cycles + report.mac_cycles,
                buffer_init_cycles=previous.buffer_init_cycles + report.buffer_init_cycles,
                total_cycles=total,
                latency_ms=total / (cfg.clock_mhz * 1000.0),
            )
    return result


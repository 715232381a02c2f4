"""
Benchmark harness and the derived latency arithmetic.

Remote benchmarks time full client round trips against a running service,
local benchmarks time each layer of an in-process forward pass. Every
reported figure is the arithmetic mean over the iterations. Clocks are
injected so the arithmetic can be checked against synthetic timings.

Row names follow the published latency table of the accelerator so reports
can be compared side by side.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import partial
from typing import (
    Awaitable,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .config import PowerProfile, PreprocessConfig
from .engine import SqjConfig, SqjEngine
from .errors import BenchError
from .fixedpoint import Fmap
from .graph import ExecPlan, NetworkDef, estimate_network_cycles, forward
from .preprocess import RgbImage, preprocess_image
from .service import ClassifyResult, client_classify
from .weights import WeightStore

logger = logging.getLogger(__name__)

LayerTimes = Sequence[Tuple[str, float]]

REMOTE_ROWS = (
    ("img_preprocessing_ms", "Img Preprocessing"),
    ("inference_ms", "SqN Inference"),
    ("net_transfer_ms", "Net Transfer"),
    ("end_to_end_ms", "End-To-End"),
    ("total_ms", "Total"),
)
REPORT_FORMATS = ("table", "csv", "jsonl")


def mean(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of no values")
    return math.fsum(values) / len(values)


@dataclass
class BenchReport:
    """Mean timings of a benchmark run, in milliseconds."""

    mode: str
    iterations: int
    img_preprocessing_ms: float = 0.0
    inference_ms: float = 0.0
    net_transfer_ms: float = 0.0
    end_to_end_ms: float = 0.0
    total_ms: float = 0.0
    per_layer_ms: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def total_conv_fire_ms(self) -> float:
        return total_conv_fire(self.per_layer_ms)

    @property
    def fps(self) -> float:
        return compute_fps(self.end_to_end_ms)


def _layer_kind(label: str) -> str:
    return label.split(":", 1)[-1]


def total_conv_fire(per_layer: Union[LayerTimes, Mapping[str, float]]) -> float:
    """Sum of the Conv and Fire rows of a per-layer table."""
    items = per_layer.items() if isinstance(per_layer, Mapping) else per_layer
    return math.fsum(ms for label, ms in items if _layer_kind(label) in ("Conv", "Fire"))


def maxpool_share(per_layer: Union[LayerTimes, Mapping[str, float]]) -> float:
    """Fraction of the per-layer total spent in Maxpool layers."""
    items = list(per_layer.items() if isinstance(per_layer, Mapping) else per_layer)
    total = math.fsum(ms for _, ms in items)
    if total <= 0:
        return 0.0
    return math.fsum(ms for label, ms in items if _layer_kind(label) == "Maxpool") / total


def _require_positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{name} must be a positive number, got {value}")


def compute_fps(end_to_end_ms: float) -> float:
    _require_positive("end_to_end_ms", end_to_end_ms)
    return 1000.0 / end_to_end_ms


def compute_speedup(baseline_ms: float, accelerated_ms: float) -> float:
    _require_positive("baseline_ms", baseline_ms)
    _require_positive("accelerated_ms", accelerated_ms)
    return baseline_ms / accelerated_ms


def power_efficiency(profile: PowerProfile, a: str, b: str) -> float:
    """How many times less power platform ``b`` draws than platform ``a``.

    ``power_efficiency(p, "i5", "arm+sqj")`` is ``watts(i5) / watts(arm+sqj)``.
    """
    for platform in (a, b):
        if platform not in profile.watts:
            raise KeyError(f"platform {platform!r} missing from power profile")
    return profile.watts[a] / profile.watts[b]


def energy_per_frame_mj(watts: float, end_to_end_ms: float) -> float:
    """Energy of one remote recognition in millijoules."""
    _require_positive("watts", watts)
    _require_positive("end_to_end_ms", end_to_end_ms)
    return watts * end_to_end_ms


Classify = Callable[[str, int, RgbImage], Awaitable[ClassifyResult]]


async def bench_remote(
    host: str,
    port: int,
    image: RgbImage,
    iterations: int = 100,
    preprocess: PreprocessConfig = PreprocessConfig(),
    clock: Callable[[], float] = time.perf_counter,
    classify: Optional[Classify] = None,
) -> BenchReport:
    """Sequential classify round trips; preprocessing is timed client side."""
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    if classify is None:
        classify = partial(client_classify, clock=clock)

    samples: Dict[str, List[float]] = {key: [] for key, _ in REMOTE_ROWS[:4]}
    for iteration in range(iterations):
        try:
            started = clock()
            prepared = preprocess_image(image, preprocess)
            samples["img_preprocessing_ms"].append((clock() - started) * 1000.0)
            result = await classify(host, port, prepared)
        except Exception as exc:
            raise BenchError(iteration, exc) from exc
        samples["inference_ms"].append(result.inference_ms)
        samples["net_transfer_ms"].append(result.net_transfer_ms)
        samples["end_to_end_ms"].append(result.end_to_end_ms)
        logger.debug("Iteration %d: %.3f ms end to end", iteration, result.end_to_end_ms)

    means = {key: mean(values) for key, values in samples.items()}
    return BenchReport(
        mode="remote",
        iterations=iterations,
        total_ms=means["end_to_end_ms"] + means["img_preprocessing_ms"],
        **means,
    )


def bench_local(
    net: NetworkDef,
    store: WeightStore,
    plan: ExecPlan,
    input: Fmap,
    iterations: int = 100,
    clock: Callable[[], float] = time.perf_counter,
    engine: Optional[SqjEngine] = None,
) -> BenchReport:
    """Per-layer mean latency of in-process forward passes.

    ``total_ms`` is the sum of the per-layer means; there is no network
    transfer or client preprocessing in this mode.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    engine = engine or SqjEngine()
    samples: List[List[float]] = [[] for _ in net.layers]
    for iteration in range(iterations):
        result = forward(net, store, plan, input, timing=True, clock=clock, engine=engine)
        assert result.per_layer_ms is not None
        for column, ms in zip(samples, result.per_layer_ms):
            column.append(ms)
        logger.debug("Iteration %d: %.3f ms", iteration, math.fsum(result.per_layer_ms))

    per_layer = [(layer.label, mean(column)) for layer, column in zip(net.layers, samples)]
    total = math.fsum(ms for _, ms in per_layer)
    return BenchReport(
        mode=f"local/{plan.mode.value}",
        iterations=iterations,
        inference_ms=total,
        end_to_end_ms=total,
        total_ms=total,
        per_layer_ms=per_layer,
    )


def _render_table(report: BenchReport) -> str:
    lines = [f"Benchmark: {report.mode}, {report.iterations} iterations", ""]
    if report.mode == "remote":
        lines.append("SqN Remote Application Latency Results (ms)")
        for key, name in REMOTE_ROWS:
            lines.append(f"  {name:<20} {getattr(report, key):>12.4f}")
        if report.end_to_end_ms > 0:
            lines.append(f"  {'fps':<20} {report.fps:>12.2f}")
    if report.per_layer_ms:
        if report.mode == "remote":
            lines.append("")
        lines.append("SqN Local Application Per Layer Latency Results (ms)")
        for label, ms in report.per_layer_ms:
            lines.append(f"  {label:<20} {ms:>12.4f}")
        lines.append(f"  {'Total Conv+Fire':<20} {report.total_conv_fire_ms:>12.4f}")
        lines.append(f"  {'Total':<20} {report.total_ms:>12.4f}")
        lines.append(f"  {'Maxpool share':<20} {maxpool_share(report.per_layer_ms):>12.2%}")
    return "\n".join(lines)


def _render_csv(report: BenchReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["section", "name", "value"])
    writer.writerow(["meta", "mode", report.mode])
    writer.writerow(["meta", "iterations", report.iterations])
    for key, _ in REMOTE_ROWS:
        writer.writerow(["row", key, repr(float(getattr(report, key)))])
    for label, ms in report.per_layer_ms:
        writer.writerow(["layer", label, repr(float(ms))])
    return buffer.getvalue()


def _render_jsonl(report: BenchReport) -> str:
    summary = {"kind": "summary", "mode": report.mode, "iterations": report.iterations}
    summary.update({key: float(getattr(report, key)) for key, _ in REMOTE_ROWS})
    lines = [json.dumps(summary)]
    lines.extend(
        json.dumps({"kind": "layer", "layer": label, "ms": float(ms)})
        for label, ms in report.per_layer_ms
    )
    return "\n".join(lines) + "\n"


def render_report(report: BenchReport, fmt: str = "table") -> str:
    if fmt == "table":
        return _render_table(report)
    if fmt == "csv":
        return _render_csv(report)
    if fmt == "jsonl":
        return _render_jsonl(report)
    raise ValueError(f"unknown report format {fmt!r}, expected one of {REPORT_FORMATS}")


def _parse_csv(text: str) -> BenchReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["section", "name", "value"]:
        raise ValueError("not a benchmark csv report")
    meta: Dict[str, str] = {}
    values: Dict[str, float] = {}
    layers: List[Tuple[str, float]] = []
    for row in rows[1:]:
        if not row:
            continue
        section, name, value = row
        if section == "meta":
            meta[name] = value
        elif section == "row":
            values[name] = float(value)
        elif section == "layer":
            layers.append((name, float(value)))
        else:
            raise ValueError(f"unknown csv section {section!r}")
    return BenchReport(meta["mode"], int(meta["iterations"]), per_layer_ms=layers, **values)


def _parse_jsonl(text: str) -> BenchReport:
    report: Optional[BenchReport] = None
    layers: List[Tuple[str, float]] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("kind") == "summary":
            values = {key: float(record[key]) for key, _ in REMOTE_ROWS}
            report = BenchReport(record["mode"], int(record["iterations"]), **values)
        elif record.get("kind") == "layer":
            layers.append((record["layer"], float(record["ms"])))
        else:
            raise ValueError(f"unknown jsonl record {record!r}")
    if report is None:
        raise ValueError("jsonl report has no summary record")
    report.per_layer_ms = layers
    return report


def parse_report(text: str, fmt: str) -> BenchReport:
    """Inverse of :func:`render_report` for the machine formats."""
    if fmt == "csv":
        return _parse_csv(text)
    if fmt == "jsonl":
        return _parse_jsonl(text)
    raise ValueError(f"cannot parse {fmt!r} reports")


@dataclass(frozen=True)
class PublishedColumn:
    """One platform column of the published latency and power table."""

    platform: str
    description: str
    remote: Mapping[str, float]
    per_layer: Tuple[Tuple[str, float], ...]
    chip_power_w: float
    technology: str


def _column(platform: str, description: str, remote: Sequence[float],
            per_layer: Sequence[float], watts: float, technology: str) -> PublishedColumn:
    labels = (
        "1:Conv", "2:Maxpool", "3:Fire", "4:Fire", "5:Maxpool", "6:Fire", "7:Fire",
        "8:Maxpool", "9:Fire", "10:Fire", "11:Fire", "12:Fire", "13:Conv", "14:Avgpool",
        "15:Softmax",
    )
    keys = [key for key, _ in REMOTE_ROWS]
    return PublishedColumn(
        platform, description, dict(zip(keys, remote)), tuple(zip(labels, per_layer)),
        watts, technology,
    )


PUBLISHED_TABLE: Dict[str, PublishedColumn] = {
    column.platform: column
    for column in (
        _column(
            "i3", "NUC Intel-i3@2.4GHz",
            (10.0961, 181.8990, 58.2517, 240.1507, 250.2468),
            (25.5531, 2.2457, 16.6766, 17.8092, 1.5101, 14.167, 15.1649, 0.06697,
             7.7804, 8.2085, 13.7099, 14.2955, 36.3992, 1.6158, 0.0277),
            4.1187, "14nm",
        ),
        _column(
            "i5", "Ultrabook Intel-i5@1.8GHz",
            (10.4999, 285.5170, 57.3641, 342.8810, 353.3810),
            (35.6304, 3.4679, 25.4867, 26.8687, 2.1909, 20.6089, 22.0343, 1.0116,
             11.1605, 11.6817, 19.3248, 20.0220, 49.9700, 1.5544, 0.0420),
            5.9883, "22nm",
        ),
        _column(
            "arm", "ZC702 ARM@667MHz",
            (10.0174, 5057.6200, 91.6487, 5149.2687, 5159.2861),
            (297.3461, 28.7091, 446.0529, 474.0225, 27.3655, 450.0639, 482.4270, 14.4056,
             258.0127, 273.4767, 497.9448, 517.3455, 1258.8026, 5.7776, 0.2242),
            1.629, "28nm",
        ),
        _column(
            "arm+sqj", "ZC702 ARM@667MHz SqJ@100MHz",
            (10.3446, 323.3100, 58.4605, 381.7705, 392.1151),
            (26.4994, 22.7482, 32.7412, 34.8575, 18.0697, 17.8422, 19.0028, 9.4262,
             8.6744, 8.8977, 12.2668, 12.8121, 49.5907, 5.7192, 0.2255),
            2.227, "28nm",
        ),
    )
}


def published_power_profile() -> PowerProfile:
    watts = {name: column.chip_power_w for name, column in PUBLISHED_TABLE.items()}
    return PowerProfile(watts=watts)


def render_published_summary(
    table: Mapping[str, PublishedColumn] = PUBLISHED_TABLE,
    baseline: str = "arm",
    accelerated: str = "arm+sqj",
    power_reference: str = "i5",
) -> str:
    """Derived figures of the published measurements, one row per platform."""
    header = (
        f"{'platform':<10} {'End-To-End':>11} {'fps':>6} {'Conv+Fire':>11} "
        f"{'Maxpool':>8} {'W':>7} {'mJ/frame':>10}"
    )
    lines = [header, "-" * len(header)]
    for name, column in table.items():
        end_to_end = column.remote["end_to_end_ms"]
        lines.append(
            f"{name:<10} {end_to_end:>11.4f} {compute_fps(end_to_end):>6.2f} "
            f"{total_conv_fire(column.per_layer):>11.4f} "
            f"{maxpool_share(column.per_layer):>8.1%} {column.chip_power_w:>7.4f} "
            f"{energy_per_frame_mj(column.chip_power_w, end_to_end):>10.1f}"
        )
    profile = PowerProfile(watts={name: column.chip_power_w for name, column in table.items()})
    speedup = compute_speedup(
        table[baseline].remote["end_to_end_ms"], table[accelerated].remote["end_to_end_ms"]
    )
    efficiency = power_efficiency(profile, power_reference, accelerated)
    lines.append("")
    lines.append(f"speedup {baseline} -> {accelerated}: {speedup:.3f}x")
    lines.append(f"power efficiency {accelerated} vs {power_reference}: {efficiency:.3f}x")
    return "\n".join(lines)


def render_cycle_report(
    net: NetworkDef, cfg: SqjConfig = SqjConfig(), compare_published: bool = False
) -> str:
    """Cycle model per Conv/Fire layer, optionally next to the measured latency.

    The model counts MAC and buffer fill cycles only, so it is a lower bound;
    the ratio column shows how far the measurement sits above it.
    """
    cycles = estimate_network_cycles(net, cfg)
    measured = dict(PUBLISHED_TABLE["arm+sqj"].per_layer) if compare_published else {}
    header = f"{'layer':<10} {'mac_cycles':>12} {'total_cycles':>13} {'model_ms':>10}"
    if compare_published:
        header += f" {'measured_ms':>12} {'ratio':>7}"
    lines = [
        f"SqJ cycle model: {cfg.mac_units} MAC-16 units at {cfg.clock_mhz:g} MHz",
        header,
        "-" * len(header),
    ]
    for label, report in cycles.per_layer.items():
        line = (
            f"{label:<10} {report.mac_cycles:>12} {report.total_cycles:>13} "
            f"{report.latency_ms:>10.4f}"
        )
        if compare_published and label in measured:
            ratio = measured[label] / report.latency_ms if report.latency_ms > 0 else math.inf
            line += f" {measured[label]:>12.4f} {ratio:>7.2f}"
        lines.append(line)
    total_ms = cycles.total_cycles / (cfg.clock_mhz * 1000.0)
    lines.append(
        f"{'total':<10} {cycles.mac_cycles:>12} {cycles.total_cycles:>13} {total_ms:>10.4f}"
    )
    return "\n".join(lines)

"""
SqueezeJet command line.

Subcommands::

    serve      run the recognition service
    classify   send one PPM image to a running service
    quantize   calibrate float weights and write quantized ones
    bench      remote / local / published latency reports
    cycles     accelerator cycle model for a topology
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import aiofiles
import numpy as np

from .bench import (
    REPORT_FORMATS,
    bench_local,
    bench_remote,
    render_cycle_report,
    render_published_summary,
    render_report,
)
from .config import AppConfig, load_config, log_level
from .engine import SqjConfig, SqjEngine
from .errors import SqueezeJetError
from .fixedpoint import Fmap
from .graph import (
    ExecMode,
    ExecPlan,
    NetworkDef,
    build_v11_topology,
    load_labels,
    parse_topology,
)
from .preprocess import RgbImage, decode_ppm, load_ppm, normalize, preprocess_image
from .quantizer import calibrate, quantize_network, random_float_store, render_quant_report
from .service import RecognitionService, client_classify, network_inference, serve
from .weights import WeightStore, load_weights, save_weights

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def _load_network(path: Optional[str]) -> NetworkDef:
    if path is None:
        return build_v11_topology()
    return parse_topology(Path(path).read_text(encoding="utf-8"))


def _load_store(args: argparse.Namespace, net: NetworkDef, mode: ExecMode) -> WeightStore:
    if args.weights:
        return load_weights(args.weights)
    if args.random_weights is None:
        raise SqueezeJetError("either --weights or --random-weights is required")
    logger.warning(
        "Using random weights (seed %d); predictions are meaningless", args.random_weights
    )
    store = random_float_store(net, seed=args.random_weights)
    if mode is ExecMode.FLOAT:
        return store
    rng = np.random.default_rng(args.random_weights)
    w, h, c = net.input_dims
    sample = Fmap.from_hwc(rng.uniform(-128.0, 128.0, size=(h, w, c)).astype(np.float32))
    return quantize_network(net, store, calibrate(net, store, [sample]))


def _input_fmap(image_path: Optional[str], net: NetworkDef, config: AppConfig) -> Fmap:
    w, h, _ = net.input_dims
    cfg = config.preprocess.model_copy(update={"target_w": w, "target_h": h})
    if image_path:
        image = preprocess_image(load_ppm(image_path), cfg)
    else:
        rng = np.random.default_rng(0)
        image = RgbImage(w, h, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
    return normalize(image, cfg)


async def _read_image(path: str) -> RgbImage:
    async with aiofiles.open(path, "rb") as handle:
        return decode_ppm(await handle.read())


def cmd_serve(args: argparse.Namespace, config: AppConfig) -> int:
    net = _load_network(args.topology)
    mode = ExecMode(args.mode)
    store = _load_store(args, net, mode)
    settings = config.service.model_copy(
        update={
            key: value
            for key, value in (
                ("host", args.host),
                ("port", args.port),
                ("max_pending", args.max_pending),
                ("read_deadline_s", args.read_deadline),
            )
            if value is not None
        }
    )
    if args.labels:
        logger.info("Loaded %d class labels", len(load_labels(args.labels)))
    infer = network_inference(net, store, mode, config.preprocess, engine=SqjEngine(config.sqj))
    dims = (config.preprocess.target_w, config.preprocess.target_h, 3)
    service = RecognitionService(infer, dims=dims)
    logger.info("Serving %s inference with %d MAC units", mode.value, config.sqj.mac_units)
    try:
        asyncio.run(serve(service, settings))
    except KeyboardInterrupt:
        logger.info("Shutting down recognition service")
    return 0


def cmd_classify(args: argparse.Namespace, config: AppConfig) -> int:
    host = args.host or config.service.host
    port = args.port or config.service.port

    async def run() -> None:
        image = preprocess_image(await _read_image(args.image), config.preprocess)
        result = await client_classify(host, port, image, timeout=args.timeout)
        labels: List[str] = load_labels(args.labels) if args.labels else []
        for rank, (class_id, probability) in enumerate(result.entries, start=1):
            name = labels[class_id] if class_id < len(labels) else str(class_id)
            print(f"{rank}. {name:<40} {probability:.6f}")
        print(
            f"inference {result.inference_ms:.3f} ms, net transfer "
            f"{result.net_transfer_ms:.3f} ms, end-to-end {result.end_to_end_ms:.3f} ms"
        )

    asyncio.run(run())
    return 0


def cmd_quantize(args: argparse.Namespace, config: AppConfig) -> int:
    net = _load_network(args.topology)
    store = load_weights(args.weights_in)
    paths = sorted(Path(args.calib_dir).glob("*.ppm"))
    if not paths:
        raise SqueezeJetError(f"no .ppm calibration images in {args.calib_dir}")
    samples = [normalize(preprocess_image(load_ppm(path), config.preprocess), config.preprocess)
               for path in paths]
    stats = calibrate(net, store, samples)
    quantized = quantize_network(net, store, stats)
    save_weights(quantized, args.weights_out)
    print(render_quant_report(net, quantized, stats))
    logger.info("Wrote %d quantized convolutions to %s", len(quantized), args.weights_out)
    return 0


def cmd_bench(args: argparse.Namespace, config: AppConfig) -> int:
    if args.target == "published":
        print(render_published_summary())
        return 0
    if args.target == "remote":
        host = args.host or config.service.host
        port = args.port or config.service.port
        image = load_ppm(args.image)
        report = asyncio.run(
            bench_remote(host, port, image, args.iterations, preprocess=config.preprocess)
        )
    else:
        net = _load_network(args.topology)
        mode = ExecMode(args.mode)
        store = _load_store(args, net, mode)
        fmap = _input_fmap(args.image, net, config)
        plan = ExecPlan.for_mode(net, mode)
        engine = SqjEngine(config.sqj)
        report = bench_local(net, store, plan, fmap, args.iterations, engine=engine)
    print(render_report(report, args.format))
    return 0


def cmd_cycles(args: argparse.Namespace, config: AppConfig) -> int:
    net = _load_network(args.topology)
    cfg = SqjConfig(
        mac_units=args.mac_units or config.sqj.mac_units,
        clock_mhz=args.clock_mhz or config.sqj.clock_mhz,
    )
    print(render_cycle_report(net, cfg, compare_published=args.compare_published))
    return 0


def _add_weights_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--weights", help="SQNW weight file")
    parser.add_argument(
        "--random-weights", type=int, metavar="SEED", help="Use random weights with this seed"
    )
    parser.add_argument("--topology", help="Topology file (default: shipped SqueezeNet v1.1)")
    parser.add_argument(
        "--mode",
        choices=[mode.value for mode in ExecMode],
        default=ExecMode.QUANT_SQJ.value,
        help="Execution mode",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="squeezejet", description="SqueezeNet v1.1 on a modeled SqueezeJet accelerator"
    )
    parser.add_argument("--config", help="TOML configuration file (default: $SQJ_CONFIG)")
    parser.add_argument("--log-level", help="Logging level (default: $SQJ_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="Run the recognition service")
    serve_p.add_argument("--host", help="Host to bind")
    serve_p.add_argument("--port", type=int, help="Port to bind")
    serve_p.add_argument("--max-pending", type=int, help="Requests queued before refusing")
    serve_p.add_argument("--read-deadline", type=float, help="Per-connection read deadline (s)")
    serve_p.add_argument("--labels", help="Class names file (logged only)")
    _add_weights_args(serve_p)
    serve_p.set_defaults(handler=cmd_serve)

    classify_p = sub.add_parser("classify", help="Classify one PPM image remotely")
    classify_p.add_argument("--host", help="Service host")
    classify_p.add_argument("--port", type=int, help="Service port")
    classify_p.add_argument("--image", required=True, help="P6 PPM image")
    classify_p.add_argument("--labels", help="Class names file, one per line")
    classify_p.add_argument("--timeout", type=float, default=10.0, help="Timeout in seconds")
    classify_p.set_defaults(handler=cmd_classify)

    quantize_p = sub.add_parser("quantize", help="Calibrate and quantize float weights")
    quantize_p.add_argument("--weights-in", required=True, help="Float SQNW weight file")
    quantize_p.add_argument("--calib-dir", required=True, help="Directory of .ppm images")
    quantize_p.add_argument("--weights-out", required=True, help="Output SQNW weight file")
    quantize_p.add_argument("--topology", help="Topology file")
    quantize_p.set_defaults(handler=cmd_quantize)

    bench_p = sub.add_parser("bench", help="Latency benchmarks")
    bench_sub = bench_p.add_subparsers(dest="target", required=True)
    remote_p = bench_sub.add_parser("remote", help="Round trips against a running service")
    remote_p.add_argument("--host", help="Service host")
    remote_p.add_argument("--port", type=int, help="Service port")
    remote_p.add_argument("--image", required=True, help="P6 PPM image")
    local_p = bench_sub.add_parser("local", help="Per-layer in-process latency")
    local_p.add_argument("--image", help="P6 PPM image (default: random pixels)")
    _add_weights_args(local_p)
    for target in (remote_p, local_p):
        target.add_argument("--iterations", type=int, default=100, help="Iterations to average")
        target.add_argument("--format", choices=REPORT_FORMATS, default="table")
    bench_sub.add_parser("published", help="Derived figures of the published measurements")
    bench_p.set_defaults(handler=cmd_bench)

    cycles_p = sub.add_parser("cycles", help="Accelerator cycle model")
    cycles_p.add_argument("--topology", help="Topology file")
    cycles_p.add_argument("--mac-units", type=int, help="MAC-16 units (default 8)")
    cycles_p.add_argument("--clock-mhz", type=float, help="Accelerator clock (default 100)")
    cycles_p.add_argument(
        "--compare-published",
        action="store_true",
        help="Show published per-layer latency next to the model",
    )
    cycles_p.set_defaults(handler=cmd_cycles)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or log_level())
    try:
        config = load_config(args.config)
        return args.handler(args, config)
    except (SqueezeJetError, OSError, ValueError, KeyError) as exc:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

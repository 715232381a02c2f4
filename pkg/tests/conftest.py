import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
SRC = ROOT / "src"
if SRC.exists():
    sys.path.insert(0, str(SRC))

from squeezejet.fixedpoint import Fmap, QFormat, QTensor  # noqa: E402
from squeezejet.graph import NetworkDef, parse_topology  # noqa: E402
from squeezejet.quantizer import calibrate, quantize_network, random_float_store  # noqa: E402
from squeezejet.weights import LayerQSpec, WeightStore  # noqa: E402

# Same 15-layer shape as SqueezeNet v1.1, scaled down so a forward pass is cheap.
MINI_TOPOLOGY = """
input 35 35 3
classes 8
1 Conv conv1 out=16 kernel=3 stride=2 pad=0
2 Maxpool pool1 kernel=3 stride=2
3 Fire fire2 squeeze=16 expand1=16 expand3=16
4 Fire fire3 squeeze=16 expand1=16 expand3=16
5 Maxpool pool3 kernel=3 stride=2
6 Fire fire4 squeeze=16 expand1=16 expand3=16
7 Fire fire5 squeeze=16 expand1=16 expand3=16
8 Maxpool pool5 kernel=3 stride=2
9 Fire fire6 squeeze=16 expand1=16 expand3=16
10 Fire fire7 squeeze=16 expand1=16 expand3=16
11 Fire fire8 squeeze=32 expand1=16 expand3=16
12 Fire fire9 squeeze=16 expand1=16 expand3=16
13 Conv conv10 out=8 kernel=1
14 Avgpool pool10
15 Softmax prob
"""


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_net() -> NetworkDef:
    return parse_topology(MINI_TOPOLOGY)


def random_input(net: NetworkDef, rng: np.random.Generator) -> Fmap:
    width, height, channels = net.input_dims
    values = rng.uniform(-120.0, 130.0, size=(height, width, channels)).astype(np.float32)
    return Fmap.from_hwc(values)


@pytest.fixture(scope="session")
def mini_store(mini_net: NetworkDef) -> WeightStore:
    """Float and quantized parameters for the mini network."""
    store = random_float_store(mini_net, seed=7)
    rng = np.random.default_rng(7)
    samples = [random_input(mini_net, rng) for _ in range(3)]
    return quantize_network(mini_net, store, calibrate(mini_net, store, samples))


def random_qspec(rng: np.random.Generator, shift_range=(4, 10)) -> LayerQSpec:
    weight = int(rng.integers(4, 8))
    bias = int(rng.integers(2, 7))
    input_frac = int(rng.integers(4, 9))
    output = weight + input_frac - int(rng.integers(*shift_range))
    return LayerQSpec.from_frac_bits(weight, bias, input_frac, output)


def random_qtensor(
    rng: np.random.Generator, out_c: int, in_c: int, kernel: int, fmt: QFormat
) -> QTensor:
    raws = rng.integers(-128, 128, size=(out_c, kernel, kernel, in_c), dtype=np.int64)
    return QTensor.from_array(raws.astype(np.int8), fmt)


def random_qfmap(
    rng: np.random.Generator, width: int, height: int, channels: int, fmt: QFormat, high: int = 2048
) -> Fmap:
    raws = rng.integers(-high, high, size=(height, width, channels), dtype=np.int64)
    return Fmap.from_hwc(raws.astype(np.int16), fmt)

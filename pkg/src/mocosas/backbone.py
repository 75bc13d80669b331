"""Scaled residual-network feature extractors (depths 18, 34, 50).

The stem is a 7x7/2 convolution with bias, batchnorm and a 3x3/2 max pool; four
residual stages follow and the network ends in global average pooling. There
is no classification head. Parameter names are stable strings:

* ``stem.conv.w``, ``stem.conv.b``, ``stem.bn.gamma``, ``stem.bn.beta``
* ``stage{s}.block{i}.conv{j}.w`` and ``stage{s}.block{i}.bn{j}.gamma/beta``
  (``j`` is 1..2 for basic blocks, 1..3 for bottlenecks)
* ``stage{s}.block{i}.down.conv.w`` / ``.down.bn.gamma`` / ``.down.bn.beta``
  for the 1x1 projection shortcut

Batchnorm running statistics live in ``buffers`` under
``<bn name>.running_mean`` and ``<bn name>.running_var``.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .tensor import Tensor

BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3)}
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BackboneConfig:
    depth_variant: int = 18
    in_channels: int = 1
    width_multiplier: float = 0.25
    input_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth_variant not in BLOCKS:
            raise ValueError(f"depth_variant must be one of {sorted(BLOCKS)}, got {self.depth_variant}")
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        base = 64 * self.width_multiplier
        if abs(base - round(base)) > 1e-9 or round(base) < 4:
            raise ValueError(f"64 * width_multiplier must be an integer >= 4, got {base}")
        if self.input_size < 32:
            raise ValueError(f"input_size must be >= 32, got {self.input_size}")

    @property
    def base_width(self) -> int:
        return int(round(64 * self.width_multiplier))

    @property
    def bottleneck(self) -> bool:
        return self.depth_variant == 50

    @property
    def embed_dim(self) -> int:
        return self.base_width * 8 * (4 if self.bottleneck else 1)


@dataclass
class BackboneParams:
    config: BackboneConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            BackboneConfig(**asdict(self.config)),
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def state_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {prefix + k: v.data for k, v in self.params.items()}
        out.update({prefix + k: v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        for k, v in self.params.items():
            src = arrays[prefix + k]
            if src.shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {src.shape} != {v.shape}")
            v.data = np.array(src, dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[prefix + k], dtype=np.float64)


def _config_arrays(config: BackboneConfig) -> Dict[str, np.ndarray]:
    return {
        "config.depth_variant": np.array(float(config.depth_variant)),
        "config.in_channels": np.array(float(config.in_channels)),
        "config.width_multiplier": np.array(float(config.width_multiplier)),
        "config.input_size": np.array(float(config.input_size)),
    }


def config_from_arrays(arrays: Dict[str, np.ndarray], prefix: str = "") -> BackboneConfig:
    return BackboneConfig(
        depth_variant=int(arrays[prefix + "config.depth_variant"]),
        in_channels=int(arrays[prefix + "config.in_channels"]),
        width_multiplier=float(arrays[prefix + "config.width_multiplier"]),
        input_size=int(arrays[prefix + "config.input_size"]),
    )


def save_backbone(path, bp: BackboneParams) -> None:
    arrays = _config_arrays(bp.config)
    arrays.update(bp.state_arrays())
    save_arrays(path, arrays)


def load_backbone(path, prefix: str = "") -> BackboneParams:
    arrays = load_arrays(path)
    bp = build(config_from_arrays(arrays, prefix), seed=0)
    bp.load_state_arrays(arrays, prefix)
    return bp


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = False) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[name + ".w"] = Tensor(self.rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        if bias:
            self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    def bn(self, name: str, c: int) -> None:
        self.params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers[name + ".running_mean"] = np.zeros(c)
        self.buffers[name + ".running_var"] = np.ones(c)


def stage_layout(config: BackboneConfig):
    """Yield ``(stage, block, in_ch, mid_ch, out_ch, stride)`` for every residual block."""
    base = config.base_width
    expansion = 4 if config.bottleneck else 1
    cin = base
    for s, nblocks in enumerate(BLOCKS[config.depth_variant], start=1):
        planes = base * 2 ** (s - 1)
        cout = planes * expansion
        for i in range(1, nblocks + 1):
            stride = 2 if (s > 1 and i == 1) else 1
            yield s, i, cin, planes, cout, stride
            cin = cout


def build(config: BackboneConfig, seed: int = 0) -> BackboneParams:
    """Initialize a backbone deterministically from ``seed``.

    Convolutions get Kaiming-normal weights (std = sqrt(2 / fan_in)); batchnorm
    scale 1 and shift 0; biases 0.
    """
    config.validate()
    b = _Builder(seed)
    b.conv("stem.conv", config.in_channels, config.base_width, 7, bias=True)
    b.bn("stem.bn", config.base_width)
    for s, i, cin, mid, cout, stride in stage_layout(config):
        p = f"stage{s}.block{i}"
        if config.bottleneck:
            b.conv(p + ".conv1", cin, mid, 1)
            b.bn(p + ".bn1", mid)
            b.conv(p + ".conv2", mid, mid, 3)
            b.bn(p + ".bn2", mid)
            b.conv(p + ".conv3", mid, cout, 1)
            b.bn(p + ".bn3", cout)
        else:
            b.conv(p + ".conv1", cin, cout, 3)
            b.bn(p + ".bn1", cout)
            b.conv(p + ".conv2", cout, cout, 3)
            b.bn(p + ".bn2", cout)
        if stride != 1 or cin != cout:
            b.conv(p + ".down.conv", cin, cout, 1)
            b.bn(p + ".down.bn", cout)
    return BackboneParams(config, b.params, b.buffers)


def parameter_count(bp: BackboneParams, prefix: Optional[str] = None) -> int:
    """Total parameter elements, optionally only those whose name starts with ``prefix``."""
    return sum(v.size for k, v in bp.params.items() if prefix is None or k.startswith(prefix))


def _bn(bp: BackboneParams, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batchnorm2d(
        x,
        bp.params[name + ".gamma"],
        bp.params[name + ".beta"],
        bp.buffers[name + ".running_mean"],
        bp.buffers[name + ".running_var"],
        eps=BN_EPS,
        momentum=BN_MOMENTUM,
        training=training,
    )


def forward_features(bp: BackboneParams, batch, training: bool = False, trace: Optional[list] = None) -> Tensor:
    """Run stem, residual stages and global pooling; returns (N, embed_dim).

    When ``trace`` is a list, ``(layer name, output shape without batch)`` pairs
    are appended to it as the forward pass proceeds.
    """
    cfg = bp.config
    x = T.as_tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(
            f"expected input (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )
    P = bp.params

    def note(name, t):
        if trace is not None:
            trace.append((name, t.shape[1:]))
        return t

    x = note("stem.conv", T.conv2d(x, P["stem.conv.w"], P["stem.conv.b"], stride=2, padding=3))
    x = note("stem.bn", _bn(bp, "stem.bn", x, training))
    x = note("stem.relu", T.relu(x))
    x = note("stem.pool", T.maxpool2d(x, 3, 2, 1))
    for s, i, cin, mid, cout, stride in stage_layout(cfg):
        p = f"stage{s}.block{i}"
        if cfg.bottleneck:
            h = T.relu(_bn(bp, p + ".bn1", T.conv2d(x, P[p + ".conv1.w"]), training))
            h = T.relu(_bn(bp, p + ".bn2", T.conv2d(h, P[p + ".conv2.w"], stride=stride, padding=1), training))
            h = _bn(bp, p + ".bn3", T.conv2d(h, P[p + ".conv3.w"]), training)
        else:
            h = T.relu(_bn(bp, p + ".bn1", T.conv2d(x, P[p + ".conv1.w"], stride=stride, padding=1), training))
            h = _bn(bp, p + ".bn2", T.conv2d(h, P[p + ".conv2.w"], padding=1), training)
        if p + ".down.conv.w" in P:
            shortcut = _bn(bp, p + ".down.bn", T.conv2d(x, P[p + ".down.conv.w"], stride=stride), training)
        else:
            shortcut = x
        x = note(p, T.relu(T.add(h, shortcut)))
    x = note("avgpool", T.adaptive_avg_pool2d(x, 1))
    return T.flatten(x)

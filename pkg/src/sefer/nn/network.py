"""SE-ResNet with configurable topology.

One code path covers both the full 50-layer network (stage depths 3-4-6-3,
expanded widths 256..2048) and a tiny desk-scale variant that trains on a
CPU in seconds. Parameter names are stable dotted paths ("head.weight",
"stage2_block0.conv1.weight", ...) and double as the checkpoint key schema.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from ..errors import ConfigError, ContractError
from .layers import (
    BatchNorm2d, Bottleneck, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, ReLU,
)

_ALLOWED_DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class NetworkConfig:
    stage_depths: tuple = (3, 4, 6, 3)
    stage_widths: tuple = (256, 512, 1024, 2048)
    num_classes: int = 7
    input_size: int = 112
    input_channels: int = 3
    stem_channels: int = 64
    se_reduction: int = 16
    bottleneck_ratio: int = 4
    dtype: str = "float32"
    bn_frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    def validate(self):
        if len(self.stage_depths) != len(self.stage_widths) or not self.stage_depths:
            raise ConfigError("stage_depths and stage_widths must be equally long and non-empty")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage depths and widths must be positive")
        for w in self.stage_widths:
            if w % self.se_reduction != 0 or w // self.se_reduction < 1:
                raise ConfigError(f"stage width {w} incompatible with se_reduction "
                                  f"{self.se_reduction}")
            if w % self.bottleneck_ratio != 0:
                raise ConfigError(f"stage width {w} not divisible by bottleneck_ratio "
                                  f"{self.bottleneck_ratio}")
        for name in ("num_classes", "input_size", "input_channels", "stem_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dtype not in _ALLOWED_DTYPES:
            raise ConfigError(f"dtype must be one of {_ALLOWED_DTYPES}")

    def to_dict(self):
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad network config: {exc}")
        cfg.validate()
        return cfg


def senet50_config(**overrides) -> NetworkConfig:
    """The full-scale network: 3-4-6-3 bottlenecks at widths 256..2048."""
    return NetworkConfig(**overrides)


def tiny_config(**overrides) -> NetworkConfig:
    """Desk-scale network used for tests and CPU smoke runs."""
    base = dict(stage_depths=(1, 1), stage_widths=(8, 16), input_size=32,
                stem_channels=8, se_reduction=4)
    base.update(overrides)
    return NetworkConfig(**base)


class SEResNet(Layer):
    """Stem conv -> bottleneck stages -> global average pool -> linear head."""

    def __init__(self, config: NetworkConfig, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        c = self.children
        c["stem_conv"] = Conv2d(config.input_channels, config.stem_channels, 7,
                                stride=2, pad=3, rng=rng, dtype=dtype)
        c["stem_bn"] = BatchNorm2d(config.stem_channels, frozen=config.bn_frozen, dtype=dtype)
        c["stem_relu"] = ReLU()
        c["stem_pool"] = MaxPool2d(3, 2, 1)
        in_ch = config.stem_channels
        self._block_names = []
        for si, (depth, width) in enumerate(zip(config.stage_depths, config.stage_widths),
                                            start=1):
            for bi in range(depth):
                stride = 2 if si > 1 and bi == 0 else 1
                name = f"stage{si}_block{bi}"
                c[name] = Bottleneck(in_ch, width, stride,
                                     reduction=config.se_reduction,
                                     ratio=config.bottleneck_ratio,
                                     rng=rng, dtype=dtype, bn_frozen=config.bn_frozen)
                self._block_names.append(name)
                in_ch = width
        c["gap"] = GlobalAvgPool()
        self.feature_dim = in_ch
        c["head"] = Linear(in_ch, config.num_classes, rng=rng, dtype=dtype, init="lecun")

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels \
                or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ContractError(
                f"expected input (N, {cfg.input_channels}, {cfg.input_size}, "
                f"{cfg.input_size}), got {x.shape}")
        if x.dtype != np.dtype(cfg.dtype):
            x = x.astype(cfg.dtype)
        return x

    def forward(self, x, train=False):
        x = self._check_input(x)
        c = self.children
        h = c["stem_relu"].forward(c["stem_bn"].forward(c["stem_conv"].forward(x), train))
        h = c["stem_pool"].forward(h)
        for name in self._block_names:
            h = c[name].forward(h, train)
        pooled = c["gap"].forward(h)
        logits = c["head"].forward(pooled)
        if not np.isfinite(logits).all():
            raise ContractError("non-finite logits")
        return logits

    def backward(self, dlogits):
        c = self.children
        d = c["gap"].backward(c["head"].backward(dlogits))
        for name in reversed(self._block_names):
            d = c[name].backward(d)
        d = c["stem_pool"].backward(d)
        return c["stem_conv"].backward(c["stem_bn"].backward(c["stem_relu"].backward(d)))

    def num_parameters(self):
        return sum(int(p.size) for p in self.named_parameters().values())


HEAD_PARAM_NAMES = ("head.weight", "head.bias")


@dataclass(frozen=True)
class ParameterGroups:
    """Dual learning-rate partition: classifier head vs everything else."""
    head: tuple
    backbone: tuple

    def lr_map(self, lr_head, lr_backbone):
        out = {name: lr_head for name in self.head}
        out.update({name: lr_backbone for name in self.backbone})
        return out


def split_parameter_groups(net) -> ParameterGroups:
    names = list(net.named_parameters())
    head = tuple(n for n in names if n in HEAD_PARAM_NAMES)
    backbone = tuple(n for n in names if n not in HEAD_PARAM_NAMES)
    if set(head) | set(backbone) != set(names) or set(head) & set(backbone):
        raise ContractError("parameter groups do not partition the parameter set")
    return ParameterGroups(head=head, backbone=backbone)

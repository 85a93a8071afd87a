"""Configurable dense convolutional backbone.

The network is a stem (7x7 stride-2 convolution and a 3x3 stride-2 max
pool) followed by four dense blocks interleaved with three transition
layers.  Each dense layer runs conv -> batch norm -> relu and concatenates
its ``growth_rate`` new channels onto its input; transitions compress
channels with a 1x1 convolution and halve resolution with a 2x2 average
pool.

Two variants are built from the same config:

* ``adaptive=True`` removes the pool from the third transition and dilates
  every kernel in the fourth block, trading stride 32 for stride 16 while
  keeping each kernel's pixel coverage unchanged;
* ``adaptive=False`` is the plain stride-32 layout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor, ShapeError
from .ops import (
    BatchNormSpec,
    Conv2dSpec,
    avg_pool2d,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    he_normal_conv,
    max_pool2d,
    relu,
)

__all__ = [
    "DenseNetConfig",
    "DenseBackbone",
    "build_backbone",
    "full_config",
    "toy_config",
    "channel_plan",
    "ReceptiveFieldReport",
    "LayerStat",
    "receptive_field_report",
]

BOTTLENECK_WIDTH = 4  # 1x1 bottleneck emits width * growth_rate channels


@dataclass(frozen=True)
class DenseNetConfig:
    growth_rate: int = 32
    block_sizes: tuple = (6, 12, 32, 32)
    init_channels: int = 64
    compression: float = 0.5
    use_bottleneck: bool = True
    dilation_last_block: int = 2
    drop_rate: float = 0.1
    adaptive: bool = True

    def validate(self) -> None:
        if len(self.block_sizes) != 4:
            raise ValueError(
                f"config must describe exactly 4 dense blocks, got {len(self.block_sizes)}"
            )
        if not 0.0 < self.compression <= 1.0:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        if self.dilation_last_block < 1:
            raise ValueError("dilation_last_block must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")


def full_config(adaptive: bool = True, drop_rate: float = 0.1) -> DenseNetConfig:
    """The 169-layer-style preset: final feature width 1664."""
    return DenseNetConfig(adaptive=adaptive, drop_rate=drop_rate)


def toy_config(adaptive: bool = True, drop_rate: float = 0.0) -> DenseNetConfig:
    """A seconds-scale preset for tests and desk experiments."""
    return DenseNetConfig(
        growth_rate=4,
        block_sizes=(2, 2, 2, 2),
        init_channels=8,
        use_bottleneck=False,
        drop_rate=drop_rate,
        adaptive=adaptive,
    )


def channel_plan(cfg: DenseNetConfig) -> dict:
    """Channel counts at each stage: after every block and transition."""
    cfg.validate()
    plan = {"stem": cfg.init_channels}
    c = cfg.init_channels
    for i, n_layers in enumerate(cfg.block_sizes):
        c = c + cfg.growth_rate * n_layers
        plan[f"block{i + 1}"] = c
        if i < 3:
            c = int(c * cfg.compression)
            plan[f"transition{i + 1}"] = c
    plan["out"] = c
    return plan


class _DenseLayer:
    """conv(-bn-relu) unit that appends growth_rate channels to its input."""

    def __init__(self, name, in_channels, cfg: DenseNetConfig, dilation, rng, dtype):
        self.name = name
        g = cfg.growth_rate
        self.drop_rate = cfg.drop_rate
        pad = dilation  # keeps 3x3 output size: dilation*(3-1)/2
        if cfg.use_bottleneck:
            mid = BOTTLENECK_WIDTH * g
            self.conv1 = he_normal_conv(in_channels, mid, 1, dilation=dilation, rng=rng, dtype=dtype)
            self.bn1 = BatchNormSpec.create(mid, dtype=dtype)
            self.conv2 = he_normal_conv(mid, g, 3, padding=pad, dilation=dilation, rng=rng, dtype=dtype)
            self.bn2 = BatchNormSpec.create(g, dtype=dtype)
        else:
            self.conv1 = he_normal_conv(in_channels, g, 3, padding=pad, dilation=dilation, rng=rng, dtype=dtype)
            self.bn1 = BatchNormSpec.create(g, dtype=dtype)
            self.conv2 = None
            self.bn2 = None

    def forward(self, x, mode, rng):
        y = relu(batch_norm(conv2d(x, self.conv1), self.bn1, mode))
        if self.conv2 is not None:
            y = relu(batch_norm(conv2d(y, self.conv2), self.bn2, mode))
        if self.drop_rate > 0.0:
            y = dropout(y, self.drop_rate, mode, rng)
        return concat_channels([x, y])

    def modules(self):
        yield f"{self.name}.conv1", self.conv1, self.bn1
        if self.conv2 is not None:
            yield f"{self.name}.conv2", self.conv2, self.bn2


class _Transition:
    """1x1 compression conv, optionally followed by a 2x2 average pool."""

    def __init__(self, name, in_channels, out_channels, pooled, rng, dtype):
        self.name = name
        self.pooled = pooled
        self.conv = he_normal_conv(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNormSpec.create(out_channels, dtype=dtype)

    def forward(self, x, mode):
        y = relu(batch_norm(conv2d(x, self.conv), self.bn, mode))
        if self.pooled:
            y = avg_pool2d(y, 2, 2)
        return y


class DenseBackbone:
    """Built layer graph.  Read-only in eval mode; training mutates batch
    norm running statistics and (through the optimizer) the weights.
    """

    def __init__(self, cfg: DenseNetConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.stem_conv = he_normal_conv(3, cfg.init_channels, 7, stride=2, padding=3,
                                        rng=rng, dtype=dtype)
        self.stem_bn = BatchNormSpec.create(cfg.init_channels, dtype=dtype)

        self.blocks: list[list[_DenseLayer]] = []
        self.transitions: list[_Transition] = []
        c = cfg.init_channels
        for bi, n_layers in enumerate(cfg.block_sizes):
            dilation = cfg.dilation_last_block if (cfg.adaptive and bi == 3) else 1
            layers = []
            for li in range(n_layers):
                layers.append(
                    _DenseLayer(f"block{bi + 1}.layer{li}", c, cfg, dilation, rng, dtype)
                )
                c += cfg.growth_rate
            self.blocks.append(layers)
            if bi < 3:
                out_c = int(c * cfg.compression)
                pooled = not (cfg.adaptive and bi == 2)
                self.transitions.append(
                    _Transition(f"transition{bi + 1}", c, out_c, pooled, rng, dtype)
                )
                c = out_c
        self.out_channels = c

    @property
    def output_stride(self) -> int:
        return 16 if self.cfg.adaptive else 32

    def forward(self, x: Tensor, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        """Run the backbone. Eval mode is deterministic; train mode uses
        batch statistics and dropout and therefore mutates running stats.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone: input must be (N,3,H,W), got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(
                f"backbone: spatial size must be divisible by 32, got {x.shape[2]}x{x.shape[3]}"
            )
        y = relu(batch_norm(conv2d(x, self.stem_conv), self.stem_bn, mode))
        y = max_pool2d(y, 3, 2, padding=1)
        for bi, layers in enumerate(self.blocks):
            for layer in layers:
                y = layer.forward(y, mode, rng)
            if bi < 3:
                y = self.transitions[bi].forward(y, mode)
        return y

    __call__ = forward

    # -- parameter traversal (deterministic order, used by the optimizer
    #    and the checkpoint format; names are layer path strings) --

    def _conv_bn_units(self):
        yield "stem", self.stem_conv, self.stem_bn
        for bi, layers in enumerate(self.blocks):
            for layer in layers:
                yield from layer.modules()
            if bi < 3:
                t = self.transitions[bi]
                yield t.name, t.conv, t.bn

    def named_parameters(self):
        out = []
        for name, conv, bn in self._conv_bn_units():
            out.append((f"{name}.weight", conv.weight))
            if conv.bias is not None:
                out.append((f"{name}.bias", conv.bias))
            if bn is not None:
                out.append((f"{name}.bn.gamma", bn.gamma))
                out.append((f"{name}.bn.beta", bn.beta))
        return out

    def named_buffers(self):
        out = []
        for name, _conv, bn in self._conv_bn_units():
            if bn is not None:
                out.append((f"{name}.bn.running_mean", bn.running_mean))
                out.append((f"{name}.bn.running_var", bn.running_var))
        return out


def build_backbone(cfg: DenseNetConfig, rng: np.random.Generator | None = None,
                   dtype=np.float64) -> DenseBackbone:
    return DenseBackbone(cfg, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# receptive field / stride accounting


@dataclass(frozen=True)
class LayerStat:
    name: str
    kind: str  # "conv" or "pool"
    out_stride: int
    receptive_field: int


@dataclass(frozen=True)
class ReceptiveFieldReport:
    layers: tuple
    final_stride: int
    final_receptive_field: int


def receptive_field_report(cfg: DenseNetConfig) -> ReceptiveFieldReport:
    """Analytic per-layer stride and kernel-coverage receptive field.

    The tracked receptive field is the span of input pixels woven together
    by convolution kernels: a conv with kernel ``k``, dilation ``d`` at
    input stride ``j`` widens it by ``d*(k-1)*j``.  Pooling layers are
    counted as resamplers, multiplying the stride without widening the
    tracked span.  Under this accounting, removing a transition pool and
    dilating the following block leaves the final coverage exactly equal
    to the unmodified network's.
    """
    cfg.validate()
    stats: list[LayerStat] = []
    rf, stride = 1, 1

    def conv_step(name, k, s, d):
        nonlocal rf, stride
        rf += d * (k - 1) * stride
        stride *= s
        stats.append(LayerStat(name, "conv", stride, rf))

    def pool_step(name, s):
        nonlocal stride
        stride *= s
        stats.append(LayerStat(name, "pool", stride, rf))

    conv_step("stem.conv", 7, 2, 1)
    pool_step("stem.pool", 2)
    for bi, n_layers in enumerate(cfg.block_sizes):
        dilation = cfg.dilation_last_block if (cfg.adaptive and bi == 3) else 1
        for li in range(n_layers):
            prefix = f"block{bi + 1}.layer{li}"
            if cfg.use_bottleneck:
                conv_step(f"{prefix}.conv1", 1, 1, dilation)
                conv_step(f"{prefix}.conv2", 3, 1, dilation)
            else:
                conv_step(f"{prefix}.conv1", 3, 1, dilation)
        if bi < 3:
            conv_step(f"transition{bi + 1}.conv", 1, 1, 1)
            if not (cfg.adaptive and bi == 2):
                pool_step(f"transition{bi + 1}.pool", 2)
    return ReceptiveFieldReport(tuple(stats), stride, rf)

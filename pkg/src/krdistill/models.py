"""Residual teacher/student networks with feature taps at block boundaries.

A block optionally average-pools its input, then runs ``convs`` 3×3
convolutions (ReLU between them) as the residual branch. The branch output is
scaled by 0.5 and added to the shortcut, which is the identity when shapes
agree and a learnable 1×1 convolution otherwise. The block output is the ReLU
of that sum; this is also the tap emitted for the block.

There is no batch normalisation. He fan-in initialisation plus the 0.5 branch
scale keep activations in range for the shallow desk-scale presets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UsageError

BRANCH_SCALE = 0.5


@dataclass(frozen=True)
class BlockSpec:
    width: int
    convs: int
    downsample: int = 1  # average-pool factor applied to the block input


@dataclass(frozen=True)
class NetworkConfig:
    blocks: tuple
    input_shape: tuple = (1, 28, 28)
    class_count: int = 10
    conv_layer_count: int = 0
    classifier_width: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.conv_layer_count:
            object.__setattr__(self, "conv_layer_count", sum(b.convs for b in self.blocks))
        if not self.classifier_width and self.blocks:
            object.__setattr__(self, "classifier_width", self.blocks[-1].width)
        self.validate()

    def validate(self):
        if not self.blocks:
            raise ConfigError("network needs at least one block")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        for i, b in enumerate(self.blocks):
            if b.width < 1 or b.convs < 1 or b.downsample < 1:
                raise ConfigError(f"block {i}: width, convs and downsample must be positive: {b}")
        if self.conv_layer_count != sum(b.convs for b in self.blocks):
            raise ConfigError(
                f"conv_layer_count={self.conv_layer_count} but blocks hold "
                f"{sum(b.convs for b in self.blocks)} conv layers")
        if self.classifier_width != self.blocks[-1].width:
            raise ConfigError(
                f"classifier_width={self.classifier_width} must equal the last block width "
                f"{self.blocks[-1].width}")
        _, h, w = self.input_shape
        for i, b in enumerate(self.blocks):
            if h % b.downsample or w % b.downsample:
                raise ConfigError(f"block {i}: {h}×{w} not divisible by downsample {b.downsample}")
            h, w = h // b.downsample, w // b.downsample

    def block_shapes(self):
        """(C, H, W) of every block output."""
        _, h, w = self.input_shape
        shapes = []
        for b in self.blocks:
            h, w = h // b.downsample, w // b.downsample
            shapes.append((b.width, h, w))
        return shapes


PRESETS = {
    # teacher: 6 conv layers as 2 blocks of 3; student keeps ~1/3 of the filters
    "T6": ((12, 3, 2), (24, 3, 2)),
    "S2": ((4, 1, 2), (8, 1, 2)),
    "T9": ((12, 3, 2), (24, 3, 2), (48, 3, 1)),
    "S3": ((4, 1, 2), (8, 1, 2), (16, 1, 1)),
}


def preset(name, input_shape=(1, 28, 28), class_count=10):
    try:
        blocks = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return NetworkConfig(
        blocks=tuple(BlockSpec(width=w, convs=c, downsample=d) for w, c, d in blocks),
        input_shape=input_shape,
        class_count=class_count,
    )


@dataclass
class Parameter:
    tensor: ad.Tensor
    name: str
    layer_index: int

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class ResidualBlock:
    """One residual block; also reused for aggregated teacher blocks."""

    def __init__(self, prefix, spec, in_channels, first_layer, rng):
        self.prefix = prefix
        self.spec = spec
        self.in_channels = in_channels
        self.convs = []
        cin = in_channels
        for j in range(spec.convs):
            shape = (spec.width, cin, 3, 3)
            self.convs.append(Parameter(
                ad.Tensor(he_normal(rng, shape, cin * 9), requires_grad=True),
                f"{prefix}.conv{j}.weight", first_layer + j))
            cin = spec.width
        self.shortcut = None
        if in_channels != spec.width:
            shape = (spec.width, in_channels, 1, 1)
            self.shortcut = Parameter(
                ad.Tensor(he_normal(rng, shape, in_channels), requires_grad=True),
                f"{prefix}.shortcut.weight", first_layer)

    def parameters(self):
        return self.convs + ([self.shortcut] if self.shortcut is not None else [])

    def __call__(self, x):
        if self.spec.downsample > 1:
            x = ad.avgpool2d(x, self.spec.downsample)
        h = x
        for j, conv in enumerate(self.convs):
            if j:
                h = ad.relu(h)
            h = ad.conv2d(h, conv.tensor, stride=1, pad=1)
        skip = x if self.shortcut is None else ad.conv2d(x, self.shortcut.tensor)
        return ad.relu(ad.add(skip, ad.scale(h, BRANCH_SCALE)))


class IdentityMapping:
    """1×1 convolution (after optional average pooling) reconciling feature shapes."""

    def __init__(self, name, in_channels, out_channels, pool, rng, layer_index=-1):
        # rectangular identity: shared channels pass through, the rest start at zero
        w = np.eye(out_channels, in_channels).reshape(out_channels, in_channels, 1, 1)
        self.pool = pool
        self.weight = Parameter(ad.Tensor(w, requires_grad=True), name, layer_index)

    def parameters(self):
        return [self.weight]

    def __call__(self, x):
        if self.pool > 1:
            x = ad.avgpool2d(x, self.pool)
        return ad.conv2d(x, self.weight.tensor)


class Network:
    def __init__(self, config, init_seed=0, zero_classifier=False):
        config.validate()
        self.config = config
        rng = np.random.default_rng(init_seed)
        self.blocks = []
        cin = config.input_shape[0]
        layer = 0
        for i, spec in enumerate(config.blocks):
            self.blocks.append(ResidualBlock(f"block{i}", spec, cin, layer, rng))
            cin = spec.width
            layer += spec.convs
        k = config.class_count
        w = np.zeros((cin, k)) if zero_classifier else he_normal(rng, (cin, k), cin)
        self.fc_weight = Parameter(ad.Tensor(w, requires_grad=True), "fc.weight", layer)
        self.fc_bias = Parameter(ad.Tensor(np.zeros(k), requires_grad=True), "fc.bias", layer)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names))

    @property
    def tap_names(self):
        return [f"block{i}" for i in range(len(self.blocks))]

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params + [self.fc_weight, self.fc_bias]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def conv_parameters(self):
        return [c for block in self.blocks for c in block.convs]

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.tensor.requires_grad = flag
            p.tensor.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None

    def head(self, features):
        if features.shape[2] != features.shape[3]:
            raise DimensionError(f"global pooling expects square feature maps, got {features.shape}")
        pooled = ad.avgpool2d(features, features.shape[2])
        return ad.add_bias(ad.matmul(ad.flatten(pooled), self.fc_weight.tensor), self.fc_bias.tensor)

    def forward_with_taps(self, x):
        x = ad.as_tensor(x)
        expected = self.config.input_shape
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"input {x.shape} does not match N×{expected}")
        taps = {}
        h = x
        for name, block in zip(self.tap_names, self.blocks):
            h = block(h)
            taps[name] = h
        return self.head(h), taps

    def __call__(self, x):
        return self.forward_with_taps(x)[0]


def build_network(config, init_seed=0, zero_classifier=False):
    return Network(config, init_seed=init_seed, zero_classifier=zero_classifier)


def parameter_count(config):
    """Closed-form scalar parameter count for a config."""
    total = 0
    cin = config.input_shape[0]
    for b in config.blocks:
        total += b.width * cin * 9 + (b.convs - 1) * b.width * b.width * 9
        if cin != b.width:
            total += b.width * cin
        cin = b.width
    return total + cin * config.class_count + config.class_count


def param_stats(params):
    """Mean and population standard deviation over every scalar in ``params``."""
    if not params:
        raise UsageError("param_stats needs at least one parameter")
    flat = np.concatenate([p.data.ravel() for p in params])
    return float(flat.mean()), float(flat.std())


def snapshot(params):
    """Copies of parameter values keyed by name."""
    return {p.name: p.data.copy() for p in params}

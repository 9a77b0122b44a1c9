"""Building blocks shared by the three MSFIM levels and the deep feature extractor."""
from typing import Tuple

from msfin.core.exceptions import ShapeError
from msfin.models.network import NetworkConfig
from msfin.nn.layers import Conv2d, ConvTranspose2d
from msfin.nn.module import Initializer, Module
from msfin.tensor import (
    Tensor,
    add,
    channel_shuffle,
    concat_channels,
    global_avg_pool,
    leaky_relu,
    mul,
    pixel_shuffle,
    relu,
    sigmoid,
)


class ChannelAttention(Module):
    """GAP -> 1x1 squeeze -> ReLU -> 1x1 excite -> sigmoid gate."""

    def __init__(self, channels: int, bottleneck: int, init: Initializer):
        super().__init__()
        if bottleneck < 1:
            raise ShapeError(f"channel attention bottleneck must be >= 1, got {bottleneck}")
        self.down = Conv2d(channels, bottleneck, 1, init)
        self.up = Conv2d(bottleneck, channels, 1, init)

    def forward(self, x: Tensor) -> Tensor:
        return channel_attention(x, self.down, self.up)


def attention_weights(x: Tensor, ca_down: Conv2d, ca_up: Conv2d) -> Tensor:
    """(N, C, 1, 1) gate in (0, 1)."""
    return sigmoid(ca_up(relu(ca_down(global_avg_pool(x)))))


def channel_attention(x: Tensor, ca_down: Conv2d, ca_up: Conv2d) -> Tensor:
    return mul(x, attention_weights(x, ca_down, ca_up))


class RRCAB(Module):
    """Recurrent residual channel attention block.

    One parameter set is reused for every recurrence, so the parameter count does not depend
    on the loop count.
    """

    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        self.cfg = cfg
        c, g = cfg.channels, cfg.groups
        self.gc2 = Conv2d(c, c, 3, init, padding=1, groups=g)
        self.gc1 = Conv2d(c, c, 3, init, padding=1, groups=g)
        self.fuse = Conv2d(c, c, 1, init) if cfg.ff else None
        self.ca = ChannelAttention(c, cfg.ca_bottleneck, init) if cfg.ca else None

    def forward(self, x: Tensor) -> Tensor:
        return rrcab_forward(x, self, self.cfg)


def _grouped(x: Tensor, conv: Conv2d, cfg: NetworkConfig) -> Tensor:
    out = conv(x)
    if cfg.cs:
        out = channel_shuffle(out, cfg.groups)
    return relu(out)


def rrcab_body(u: Tensor, block: RRCAB, cfg: NetworkConfig) -> Tensor:
    h = _grouped(_grouped(u, block.gc2, cfg), block.gc1, cfg)
    if cfg.ff:
        h = block.fuse(h)
    if cfg.ca:
        h = channel_attention(h, block.ca.down, block.ca.up)
    return add(u, h)


def rrcab_forward(x: Tensor, block: RRCAB, cfg: NetworkConfig) -> Tensor:
    """Apply the residual body rrcab_loops + 1 times with shared weights."""
    if x.shape[1] != cfg.channels:
        raise ShapeError(f"RRCAB expects {cfg.channels} channels, got {x.shape[1]}")
    if (cfg.ff and block.fuse is None) or (cfg.ca and block.ca is None):
        raise ShapeError("RRCAB was built without a layer the configuration enables")
    u = x
    for _ in range(cfg.rrcab_loops + 1):
        u = rrcab_body(u, block, cfg)
    return u


class DownsampleBlock(Module):
    """3x3 stride-2 conv, LeakyReLU, 3x3 conv: halves H and W."""

    def __init__(self, channels: int, slope: float, init: Initializer):
        super().__init__()
        self.slope = slope
        self.strided = Conv2d(channels, channels, 3, init, stride=2, padding=1)
        self.conv = Conv2d(channels, channels, 3, init, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(leaky_relu(self.strided(x), self.slope))


class UpsampleBlock(Module):
    """3x3 conv to 4C channels followed by pixel_shuffle(2)."""

    def __init__(self, channels: int, init: Initializer):
        super().__init__()
        self.conv = Conv2d(channels, 4 * channels, 3, init, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(self.conv(x), 2)


class LocalFeatureFusion(Module):
    """Channel concatenation of three features then a 1x1 projection back to C."""

    def __init__(self, channels: int, init: Initializer, inputs: int = 3):
        super().__init__()
        self.inputs = inputs
        self.proj = Conv2d(inputs * channels, channels, 1, init)

    def forward(self, *features: Tensor) -> Tensor:
        if len(features) != self.inputs:
            raise ShapeError(f"LFF expects {self.inputs} features, got {len(features)}")
        return self.proj(concat_channels(list(features)))


SUPPORTED_RATIOS = (1, 2, 4)


class InteractiveAdapter(Module):
    """Learned cross-level connection matching a source resolution to its target.

    ratio 1 is a 3x3 conv; ratio 2 a stride-2 transposed conv; ratio 4 two chained ones.
    """

    def __init__(self, channels: int, ratio: int, init: Initializer):
        super().__init__()
        if ratio not in SUPPORTED_RATIOS:
            raise ShapeError(f"unsupported resolution ratio {ratio}")
        self.ratio = ratio
        if ratio == 1:
            self.conv = Conv2d(channels, channels, 3, init, padding=1)
        else:
            self.deco1 = ConvTranspose2d(channels, channels, init)
            if ratio == 4:
                self.deco2 = ConvTranspose2d(channels, channels, init)

    def forward(self, source: Tensor) -> Tensor:
        if self.ratio == 1:
            return self.conv(source)
        out = self.deco1(source)
        if self.ratio == 4:
            out = self.deco2(out)
        return out


def resolution_ratio(source_hw: Tuple[int, int], target_hw: Tuple[int, int]) -> int:
    sh, sw = source_hw
    th, tw = target_hw
    for ratio in SUPPORTED_RATIOS:
        if (sh * ratio, sw * ratio) == (th, tw):
            return ratio
    raise ShapeError(f"unsupported resolution ratio {sh}x{sw} -> {th}x{tw}")


def interactive_adapter(source: Tensor, adapter: InteractiveAdapter, target_hw: Tuple[int, int]) -> Tensor:
    """Carry `source` to `target_hw` through `adapter`."""
    ratio = resolution_ratio(source.shape[2:], tuple(target_hw))
    if ratio != adapter.ratio:
        raise ShapeError(f"adapter built for ratio {adapter.ratio}, connection needs {ratio}")
    return adapter(source)

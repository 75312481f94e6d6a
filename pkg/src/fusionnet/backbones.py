"""The two feature extractors: a residual CNN and a multi-axis attention
transformer, each ending at a pooled feature vector with no classification
head.

Full-scale presets mirror the published parent architectures; desk presets
are small enough to train and test on a laptop CPU. Builds are
deterministic given an ``RngState``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError, DimensionError
from .nn import (
    Attention,
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    MBConv,
    Mlp,
    Module,
    ModuleList,
    ResidualBlock,
    block_attention,
    global_avg_pool,
    grid_attention,
    grid_reverse,
    grid_partition,
    window_partition,
    window_reverse,
)
from .tensor import RngState, Tensor, gelu, maxpool2d, relu, reshape, transpose


@dataclass
class ResNetConfig:
    """Four-stage residual CNN; feature dim is the last stage width."""

    stage_depths: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    stage_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    width_scale: float = 1.0
    depth_scale: float = 1.0
    resolution: int = 224

    def scaled_widths(self) -> list[int]:
        return [max(1, round(w * self.width_scale)) for w in self.stage_widths]

    def scaled_depths(self) -> list[int]:
        return [max(1, round(d * self.depth_scale)) for d in self.stage_depths]

    @property
    def stem_channels(self) -> int:
        return self.scaled_widths()[0]

    @property
    def feature_dim(self) -> int:
        return self.scaled_widths()[-1]

    def validate(self) -> None:
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ConfigurationError(
                f"residual backbone needs exactly 4 stages, got depths "
                f"{self.stage_depths} widths {self.stage_widths}")
        if any(d < 1 for d in self.scaled_depths()) or any(w < 1 for w in self.scaled_widths()):
            raise ConfigurationError("stage depths and widths must be positive")
        if self.resolution < 8:
            raise ConfigurationError(f"input resolution {self.resolution} too small")


@dataclass
class MaxViTConfig:
    """Hierarchical stages of MBConv + block attention + grid attention.

    Every stage's spatial extent must divide evenly by both the window and
    the grid size (pad-free contract, checked at build time).
    """

    stem_channels: int = 64
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 5, 2])
    stage_channels: list[int] = field(default_factory=lambda: [96, 192, 384, 768])
    stage_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    window: int = 7
    grid: int = 7
    mbconv_expansion: int = 4
    se_ratio: float = 0.25
    use_se: bool = True
    mlp_ratio: float = 4.0
    rel_bias: bool = False
    resolution: int = 224

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def stage_resolutions(self) -> list[int]:
        res = self.resolution // 2  # stem stride 2
        out = []
        for _ in self.stage_depths:
            res //= 2  # first block of each stage strides 2
            out.append(res)
        return out

    def validate(self) -> None:
        n = len(self.stage_depths)
        if n < 1 or len(self.stage_channels) != n or len(self.stage_heads) != n:
            raise ConfigurationError(
                f"stage lists disagree: depths {self.stage_depths}, channels "
                f"{self.stage_channels}, heads {self.stage_heads}")
        if any(d < 1 for d in self.stage_depths) or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError("stage depths and channels must be positive")
        if self.resolution % (2 ** (n + 1)):
            raise ConfigurationError(
                f"resolution {self.resolution} not divisible by the downsample "
                f"factor {2 ** (n + 1)}")
        for i, (res, ch, heads) in enumerate(
                zip(self.stage_resolutions(), self.stage_channels, self.stage_heads)):
            if res % self.window or res % self.grid:
                raise ConfigurationError(
                    f"stage {i}: extent {res} not divisible by window "
                    f"{self.window} / grid {self.grid}")
            if ch % heads:
                raise ConfigurationError(
                    f"stage {i}: channels {ch} not divisible by heads {heads}")


@dataclass
class BackboneOutput:
    """Globally average-pooled feature vector, head removed."""

    features: Tensor


class ResNetBackbone(Module):
    """7x7 stem, 3x3 max pool, four residual stages, global average pool."""

    def __init__(self, cfg: ResNetConfig, rng: RngState):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = cfg.scaled_widths()
        depths = cfg.scaled_depths()
        self.stem = Conv2d(3, widths[0], 7, stride=2, pad=3, rng=rng)
        self.stem_bn = BatchNorm2d(widths[0])
        self.stages = ModuleList()
        in_ch = widths[0]
        for stage_idx, (width, depth) in enumerate(zip(widths, depths)):
            blocks = ModuleList()
            for block_idx in range(depth):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                blocks.append(ResidualBlock(in_ch, width, stride=stride, rng=rng))
                in_ch = width
            self.stages.append(blocks)
        self.feature_dim = cfg.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.stem_bn(self.stem(x)))
        h = maxpool2d(h, kernel=3, stride=2, pad=1)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return global_avg_pool(h)


class MaxViTBlock(Module):
    """MBConv, then pre-norm block attention, grid attention, and MLP."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, heads: int,
                 window: int, grid: int, cfg: MaxViTConfig, rng: RngState):
        super().__init__()
        self.window = window
        self.grid = grid
        self.mbconv = MBConv(in_ch, out_ch, stride=stride,
                             expansion=cfg.mbconv_expansion,
                             se_ratio=cfg.se_ratio, use_se=cfg.use_se, rng=rng)
        rel = window if cfg.rel_bias else None
        self.norm_block = LayerNorm(out_ch)
        self.attn_block = Attention(out_ch, heads, rng=rng, rel_bias_window=rel)
        self.norm_grid = LayerNorm(out_ch)
        self.attn_grid = Attention(out_ch, heads, rng=rng,
                                   rel_bias_window=grid if cfg.rel_bias else None)
        self.norm_mlp = LayerNorm(out_ch)
        self.mlp = Mlp(out_ch, ratio=cfg.mlp_ratio, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.mbconv(x)
        b, c, h, w = x.shape

        tokens = window_partition(x, self.window)
        attended = self.attn_block(self.norm_block(tokens))
        x = x + window_reverse(attended, self.window, h, w)

        tokens = grid_partition(x, self.grid)
        attended = self.attn_grid(self.norm_grid(tokens))
        x = x + grid_reverse(attended, self.grid, h, w)

        tokens = reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))
        mixed = self.mlp(self.norm_mlp(tokens))
        mixed = transpose(reshape(mixed, (b, h, w, c)), (0, 3, 1, 2))
        return x + mixed


class MaxViTBackbone(Module):
    """Conv stem (stride 2) then hierarchical multi-axis attention stages."""

    def __init__(self, cfg: MaxViTConfig, rng: RngState):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.stem_channels, 3, stride=2, pad=1, rng=rng)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        self.stages = ModuleList()
        in_ch = cfg.stem_channels
        for depth, channels, heads in zip(cfg.stage_depths, cfg.stage_channels,
                                          cfg.stage_heads):
            blocks = ModuleList()
            for block_idx in range(depth):
                stride = 2 if block_idx == 0 else 1
                blocks.append(MaxViTBlock(in_ch, channels, stride, heads,
                                          cfg.window, cfg.grid, cfg, rng))
                in_ch = channels
            self.stages.append(blocks)
        self.feature_dim = cfg.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        h = gelu(self.stem_bn(self.stem(x)))
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return global_avg_pool(h)


def build_resnet(cfg: ResNetConfig, rng: RngState) -> ResNetBackbone:
    return ResNetBackbone(cfg, rng)


def build_maxvit(cfg: MaxViTConfig, rng: RngState) -> MaxViTBackbone:
    return MaxViTBackbone(cfg, rng)


def extract_features(backbone: Module, x: Tensor) -> BackboneOutput:
    """Run a backbone on a (B, 3, H, W) batch at its configured resolution."""
    res = backbone.cfg.resolution
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != res or x.shape[3] != res:
        raise DimensionError(
            f"backbone expects (B, 3, {res}, {res}) input, got {x.shape}")
    return BackboneOutput(features=backbone(x))


def resnet_desk(resolution: int = 64) -> ResNetConfig:
    return ResNetConfig(stage_depths=[2, 2, 2, 2], stage_widths=[16, 32, 64, 128],
                        resolution=resolution)


def resnet_full(resolution: int = 224) -> ResNetConfig:
    return ResNetConfig(resolution=resolution)


def maxvit_desk(resolution: int = 64) -> MaxViTConfig:
    return MaxViTConfig(stem_channels=16, stage_depths=[1, 1],
                        stage_channels=[32, 64], stage_heads=[1, 2],
                        window=4, grid=4, resolution=resolution)


def maxvit_full(resolution: int = 224) -> MaxViTConfig:
    return MaxViTConfig(resolution=resolution)

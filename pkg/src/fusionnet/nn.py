"""Reusable network layers: convolution blocks, normalization, residual and
MBConv blocks, windowed (block) and dilated (grid) attention, dense heads.

Layers are plain parameter containers; ``Module`` gives hierarchical
parameter naming (used by checkpoints) and a train/eval flag (used by
batch norm). All math runs through the taped ops in ``tensor``, so every
layer is differentiable end to end.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    RngState,
    Tensor,
    concat,
    conv2d,
    default_dtype,
    gelu,
    matmul,
    maxpool2d,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    tmean,
    transpose,
)


class Parameter(Tensor):
    """A tensor registered as a trainable leaf."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal layer base: attribute assignment registers children.

    ``named_parameters`` / ``named_buffers`` walk the tree with dotted
    names ("resnet.stages.0.conv1.weight"), which is also the checkpoint
    naming scheme. Buffers are non-trainable state (batch-norm running
    statistics).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all parameters and buffers."""
        state: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into matching parameters/buffers (shapes must agree)."""
        params = dict(self.named_parameters())
        buffer_owners = {}
        for name, m in self._walk_modules(""):
            for bname in m._buffers:
                buffer_owners[name + bname] = (m, bname)
        for name, value in arrays.items():
            if name in params:
                target = params[name]
                if tuple(value.shape) != target.shape:
                    raise DimensionError(
                        f"array {name!r} has shape {tuple(value.shape)}, "
                        f"model expects {target.shape}")
                target.data = value.astype(target.data.dtype, copy=True)
            elif name in buffer_owners:
                owner, bname = buffer_owners[name]
                current = getattr(owner, bname)
                if tuple(value.shape) != current.shape:
                    raise DimensionError(
                        f"buffer {name!r} has shape {tuple(value.shape)}, "
                        f"model expects {current.shape}")
                owner.set_buffer(bname, value.astype(current.dtype, copy=True))
            else:
                raise DimensionError(f"array {name!r} does not exist in the model")

    def _walk_modules(self, prefix: str) -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m._walk_modules(prefix + name + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for item in items:
            self.append(item)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def he_normal(rng: RngState, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in))

def trunc_normal(rng: RngState, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw re-sampled until everything lies within two deviations."""
    x = rng.normal(shape, std=std)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(int(bad.sum()), std=std)
        bad = np.abs(x) > 2 * std
    return x


class Conv2d(Module):
    """Convolution layer (cross-correlation), He fan-in initialized."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, groups: int = 1, bias: bool = False, *,
                 rng: RngState):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, pad=self.pad, groups=self.groups)
        if self.bias is not None:
            out = out + reshape(self.bias, (1, -1, 1, 1))
        return out


class BatchNorm2d(Module):
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes with batch statistics and updates running
    stats; eval mode is a pure function of the running stats.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"BatchNorm2d expects (B, C, H, W), got {x.shape}")
        if self.training:
            m = tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - m
            var = tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            xhat = centered / sqrt(var + self.eps)
            mom = self.momentum
            self.running_mean *= (1 - mom)
            self.running_mean += mom * m.data.reshape(-1)
            self.running_var *= (1 - mom)
            self.running_var += mom * var.data.reshape(-1)
        else:
            rm = self.running_mean.reshape(1, -1, 1, 1)
            rv = self.running_var.reshape(1, -1, 1, 1)
            xhat = (x - Tensor(rm)) / Tensor(np.sqrt(rv + self.eps))
        return xhat * reshape(self.gamma, (1, -1, 1, 1)) + reshape(self.beta, (1, -1, 1, 1))


class LayerNorm(Module):
    """Normalization over the trailing (channel) axis of token tensors."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        m = tmean(x, axis=-1, keepdims=True)
        centered = x - m
        var = tmean(centered * centered, axis=-1, keepdims=True)
        xhat = centered / sqrt(var + self.eps)
        return xhat * self.gamma + self.beta


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ w + b for (batch, features) inputs."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dense features {x.shape} do not match weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else out + b


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, *, rng: RngState, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class Mlp(Module):
    """Token-wise two-layer feed-forward with GELU, used after attention."""

    def __init__(self, dim: int, ratio: float = 4.0, *, rng: RngState):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = Dense(dim, hidden, rng=rng)
        self.fc2 = Dense(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SqueezeExcite(Module):
    """Channel gating: global average, bottleneck, sigmoid scale."""

    def __init__(self, channels: int, ratio: float = 0.25, *, rng: RngState):
        super().__init__()
        reduced = max(1, int(channels * ratio))
        self.fc1 = Dense(channels, reduced, rng=rng)
        self.fc2 = Dense(reduced, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        pooled = tmean(x, axis=(2, 3))
        gate = sigmoid(self.fc2(gelu(self.fc1(pooled))))
        return x * reshape(gate, (gate.shape[0], gate.shape[1], 1, 1))


class ResidualBlock(Module):
    """Two 3x3 convolutions with a shortcut; the second norm starts at zero
    so a freshly built block is the identity up to the final activation."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, *, rng: RngState):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, pad=1, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, pad=1, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.bn2.gamma.data[:] = 0
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        branch = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return relu(branch + skip)


class MBConv(Module):
    """Inverted bottleneck: 1x1 expand, depthwise 3x3, squeeze-excitation,
    1x1 project; identity skip when stride 1 and channels match."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 expansion: int = 4, se_ratio: float = 0.25,
                 use_se: bool = True, *, rng: RngState):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f"MBConv stride must be 1 or 2, got {stride}")
        mid = in_ch * expansion
        self.expand = Conv2d(in_ch, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid)
        self.depthwise = Conv2d(mid, mid, 3, stride=stride, pad=1, groups=mid, rng=rng)
        self.bn2 = BatchNorm2d(mid)
        self.se = SqueezeExcite(mid, se_ratio, rng=rng) if use_se else None
        self.project = Conv2d(mid, out_ch, 1, rng=rng)
        self.bn3 = BatchNorm2d(out_ch)
        self.has_skip = stride == 1 and in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        h = gelu(self.bn1(self.expand(x)))
        h = gelu(self.bn2(self.depthwise(h)))
        if self.se is not None:
            h = self.se(h)
        h = self.bn3(self.project(h))
        return h + x if self.has_skip else h


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, C, H, W) -> (B*nWin, window*window, C) of non-overlapping tiles."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ConfigurationError(
            f"spatial extent {h}x{w} not divisible by window {window}")
    t = transpose(x, (0, 2, 3, 1))
    t = reshape(t, (b, h // window, window, w // window, window, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b * (h // window) * (w // window), window * window, c))


def window_reverse(tokens: Tensor, window: int, h: int, w: int) -> Tensor:
    n, _, c = tokens.shape
    b = n // ((h // window) * (w // window))
    t = reshape(tokens, (b, h // window, w // window, window, window, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    t = reshape(t, (b, h, w, c))
    return transpose(t, (0, 3, 1, 2))


def grid_partition(x: Tensor, grid: int) -> Tensor:
    """(B, C, H, W) -> (B*nGroup, grid*grid, C) of dilated token lattices.

    Group (a, b) collects positions (a + u*H/grid, b + v*W/grid), so each
    group spans the whole map with stride (H/grid, W/grid).
    """
    b, c, h, w = x.shape
    if h % grid or w % grid:
        raise ConfigurationError(f"spatial extent {h}x{w} not divisible by grid {grid}")
    t = transpose(x, (0, 2, 3, 1))
    t = reshape(t, (b, grid, h // grid, grid, w // grid, c))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (b * (h // grid) * (w // grid), grid * grid, c))


def grid_reverse(tokens: Tensor, grid: int, h: int, w: int) -> Tensor:
    n, _, c = tokens.shape
    b = n // ((h // grid) * (w // grid))
    t = reshape(tokens, (b, h // grid, w // grid, grid, grid, c))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    t = reshape(t, (b, h, w, c))
    return transpose(t, (0, 3, 1, 2))


class Attention(Module):
    """Multi-head scaled dot-product attention over token groups.

    ``dim`` must divide evenly into ``heads``; scaling is head_dim^-1/2.
    A learned per-head relative position bias table can be enabled for
    square token windows (off by default).
    """

    def __init__(self, dim: int, heads: int, *, rng: RngState,
                 rel_bias_window: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.wq = Parameter(trunc_normal(rng, (dim, dim)))
        self.wk = Parameter(trunc_normal(rng, (dim, dim)))
        self.wv = Parameter(trunc_normal(rng, (dim, dim)))
        self.wo = Parameter(trunc_normal(rng, (dim, dim)))
        self.bq = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.bk = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.bv = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.bo = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.rel_bias_window = rel_bias_window
        if rel_bias_window is not None:
            side = 2 * rel_bias_window - 1
            self.rel_bias = Parameter(trunc_normal(rng, (heads, side * side)))
            # constant scatter map from the bias table onto (T, T) logits;
            # derived from the window, so not checkpoint state
            self._rel_onehot = _one_hot_index(_relative_index(rel_bias_window))
        else:
            self.rel_bias = None

    def forward(self, tokens: Tensor) -> Tensor:
        out, _ = self.forward_with_weights(tokens)
        return out

    def forward_with_weights(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output tokens, attention weights (N, heads, T, T))."""
        n, t, c = tokens.shape
        if c != self.dim:
            raise DimensionError(f"token dim {c} does not match attention dim {self.dim}")

        def split_heads(v):
            v = reshape(v, (n, t, self.heads, self.head_dim))
            return transpose(v, (0, 2, 1, 3))

        q = split_heads(dense(tokens, self.wq, self.bq))
        k = split_heads(dense(tokens, self.wk, self.bk))
        v = split_heads(dense(tokens, self.wv, self.bv))
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * self.scale
        if self.rel_bias is not None:
            if t != self.rel_bias_window ** 2:
                raise DimensionError(
                    f"relative bias built for {self.rel_bias_window ** 2} tokens, got {t}")
            bias = matmul(self.rel_bias, Tensor(self._rel_onehot))
            logits = logits + reshape(bias, (1, self.heads, t, t))
        weights = softmax(logits, axis=-1)
        out = matmul(weights, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (n, t, c))
        return dense(out, self.wo, self.bo), weights


def _relative_index(window: int) -> np.ndarray:
    """(T, T) lookup into the (2w-1)^2 relative position table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + window - 1
    return rel[0] * (2 * window - 1) + rel[1]


def _one_hot_index(index: np.ndarray) -> np.ndarray:
    """One-hot matrix mapping table entries onto (T*T) logit positions."""
    side = index.max() + 1
    flat = index.reshape(-1)
    onehot = np.zeros((side, flat.size), dtype=default_dtype())
    onehot[flat, np.arange(flat.size)] = 1.0
    return onehot


def block_attention(x: Tensor, attn: Attention, window: int) -> Tensor:
    """Attention within non-overlapping window x window tiles; tokens in
    different tiles cannot influence each other."""
    _, _, h, w = x.shape
    tokens = window_partition(x, window)
    out = attn(tokens)
    return window_reverse(out, window, h, w)


def grid_attention(x: Tensor, attn: Attention, grid: int) -> Tensor:
    """Attention within dilated grid x grid token lattices spanning the
    whole map; with grid == spatial extent this is full global attention."""
    _, _, h, w = x.shape
    tokens = grid_partition(x, grid)
    out = attn(tokens)
    return grid_reverse(out, grid, h, w)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return tmean(x, axis=(2, 3))


__all__ = [
    "Attention",
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "MBConv",
    "Mlp",
    "Module",
    "ModuleList",
    "LayerNorm",
    "Parameter",
    "ResidualBlock",
    "SqueezeExcite",
    "block_attention",
    "dense",
    "global_avg_pool",
    "grid_attention",
    "grid_partition",
    "grid_reverse",
    "he_normal",
    "maxpool2d",
    "relu",
    "trunc_normal",
    "window_partition",
    "window_reverse",
]

"""Network blocks built on the selective scan and window attention.

All blocks are pre-norm residual blocks whose last projection can be zeroed
to turn the block into the identity.  2D blocks take and return
B x C x H x W maps; :class:`MambaBlock` works on B x L x C token sequences.
Flattening a map into tokens is always row-major.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, default_dtype
from .errors import ShapeError
from .nn import (
    ChannelLayerNorm,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    to_channels_first,
    to_channels_last,
)
from .scan2d import grid_to_tokens, ss2d, tokens_to_grid
from .ssm import SSMParams, selective_scan


class BlockKind(str, enum.Enum):
    MAMBA = "MambaBlock"
    VANILLA_VSS = "VanillaVSS"
    VSS = "VSS"
    RESIDUAL_CONV = "ResidualConv"
    UMAMBA = "UMambaBlock"
    RVM = "RVMLayer"
    SWIN = "SwinWindowAttention"


@dataclass(frozen=True)
class BlockConfig:
    kind: BlockKind
    channels: int
    state_size: int = 8
    expand: int = 2
    window_size: int = 4
    shift: bool = False
    heads: int = 2
    conv_kernel: int = 4
    mlp_ratio: int = 4
    scan_method: str = "blocked"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.expand < 1:
            raise ValueError("expansion factor must be >= 1")
        if self.window_size < 1:
            raise ValueError("window size must be >= 1")
        if self.kind == BlockKind.SWIN and self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")


def _check_channels(x: Tensor, channels: int, axis: int) -> None:
    if x.shape[axis] != channels:
        raise ShapeError(f"block built for {channels} channels got input {x.shape}")


def _check_map(x: Tensor, channels: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected a B x C x H x W map, got {x.shape}")
    _check_channels(x, channels, 1)


class MambaMixer(Module):
    """Gated S6 branch: expand, causal depthwise conv, SiLU, selective scan, gate, contract."""

    def __init__(self, rng, channels: int, cfg: BlockConfig, dtype=None):
        inner = cfg.expand * channels
        self.inner = inner
        self.kernel = cfg.conv_kernel
        self.scan_method = cfg.scan_method
        self.in_proj = Linear(rng, channels, 2 * inner, dtype=dtype)
        self.conv = Conv2d(rng, inner, inner, (1, cfg.conv_kernel), groups=inner, dtype=dtype)
        self.ssm = SSMParams(rng, inner, cfg.state_size, dtype=dtype)
        self.out_proj = Linear(rng, inner, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        xs, z = ops.split(self.in_proj(x), (self.inner, self.inner), axis=-1)
        # causal: left-pad the time axis by kernel - 1
        xc = ops.reshape(ops.transpose(xs, (0, 2, 1)), (B, self.inner, 1, L))
        xc = ops.pad(xc, ((0, 0), (0, 0), (0, 0), (self.kernel - 1, 0)))
        xc = ops.reshape(self.conv(xc), (B, self.inner, L))
        xs = ops.silu(ops.transpose(xc, (0, 2, 1)))
        y = selective_scan(xs, self.ssm, self.scan_method)
        return self.out_proj(y * ops.silu(z))


class MambaBlock(Module):
    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.norm = LayerNorm(cfg.channels, dtype=dtype)
        self.mixer = MambaMixer(rng, cfg.channels, cfg, dtype)

    @property
    def out_proj(self) -> Linear:
        return self.mixer.out_proj

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"MambaBlock expects B x L x C tokens, got {x.shape}")
        _check_channels(x, self.channels, 2)
        return x + self.mixer(self.norm(x))


class _SS2DBranch(Module):
    """in-projection -> depthwise 3x3 conv -> SiLU -> SS2D -> norm, channels-last in and out."""

    def __init__(self, rng, channels: int, inner: int, cfg: BlockConfig, gated: bool, dtype=None):
        self.inner = inner
        self.gated = gated
        self.scan_method = cfg.scan_method
        self.in_proj = Linear(rng, channels, 2 * inner if gated else inner, dtype=dtype)
        self.dwconv = Conv2d(rng, inner, inner, 3, padding=1, groups=inner, dtype=dtype)
        self.ssms = [SSMParams(rng, inner, cfg.state_size, dtype=dtype) for _ in range(4)]
        self.out_norm = LayerNorm(inner, dtype=dtype)
        self.out_proj = Linear(rng, inner, channels, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        proj = self.in_proj(h)
        if self.gated:
            xs, z = ops.split(proj, (self.inner, self.inner), axis=-1)
        else:
            xs, z = proj, None
        g = ops.silu(self.dwconv(to_channels_first(xs)))
        y = self.out_norm(to_channels_last(ss2d(g, self.ssms, self.scan_method)))
        if z is not None:
            y = y * ops.silu(z)
        return self.out_proj(y)


class MLP(Module):
    def __init__(self, rng, channels: int, ratio: int, dtype=None):
        self.fc1 = Linear(rng, channels, ratio * channels, dtype=dtype)
        self.fc2 = Linear(rng, ratio * channels, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class VanillaVSSBlock(Module):
    """Mamba block topology with a 2D depthwise conv and SS2D in place of the 1D conv and S6."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.norm = LayerNorm(cfg.channels, dtype=dtype)
        self.branch = _SS2DBranch(rng, cfg.channels, cfg.expand * cfg.channels, cfg, gated=True, dtype=dtype)

    @property
    def out_proj(self) -> Linear:
        return self.branch.out_proj

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        h = to_channels_last(x)
        return to_channels_first(h + self.branch(self.norm(h)))


class VSSBlock(Module):
    """Single-branch SS2D residual followed by an MLP residual."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.norm1 = LayerNorm(cfg.channels, dtype=dtype)
        self.branch = _SS2DBranch(rng, cfg.channels, cfg.expand * cfg.channels, cfg, gated=False, dtype=dtype)
        self.norm2 = LayerNorm(cfg.channels, dtype=dtype)
        self.mlp = MLP(rng, cfg.channels, cfg.mlp_ratio, dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        h = to_channels_last(x)
        h = h + self.branch(self.norm1(h))
        h = h + self.mlp(self.norm2(h))
        return to_channels_first(h)


class ResidualConv(Module):
    """Pre-activation residual block: x + conv(act(norm(conv(act(norm(x))))))."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        c = cfg.channels
        self.channels = c
        self.norm1 = ChannelLayerNorm(c, dtype=dtype)
        self.conv1 = Conv2d(rng, c, c, 3, padding=1, dtype=dtype)
        self.norm2 = ChannelLayerNorm(c, dtype=dtype)
        self.conv2 = Conv2d(rng, c, c, 3, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        h = self.conv1(ops.silu(self.norm1(x)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return x + h


class UMambaBlock(Module):
    """Two residual conv blocks, then a Mamba block over the row-major token sequence."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.res1 = ResidualConv(rng, cfg, dtype)
        self.res2 = ResidualConv(rng, cfg, dtype)
        self.mamba = MambaBlock(rng, cfg, dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        x = self.res2(self.res1(x))
        _, _, H, W = x.shape
        return tokens_to_grid(self.mamba(grid_to_tokens(x)), H, W)


class RVMLayer(Module):
    """x + scale * Mamba(norm(x)) over row-major tokens; channels and resolution kept."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.norm = LayerNorm(cfg.channels, dtype=dtype)
        self.mixer = MambaMixer(rng, cfg.channels, cfg, dtype)
        self.scale = Parameter(np.ones(1, dtype=dtype or default_dtype()))

    @property
    def out_proj(self) -> Linear:
        return self.mixer.out_proj

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        _, _, H, W = x.shape
        t = grid_to_tokens(x)
        t = t + self.scale * self.mixer(self.norm(t))
        return tokens_to_grid(t, H, W)


# ------------------------------------------------------------- attention
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def shift_region_mask(Hp: int, Wp: int, window: int, shift: int) -> np.ndarray:
    """Additive mask (nW, T, T): 0 within a region, -100 across wrapped boundaries."""
    ids = np.zeros((Hp, Wp), dtype=np.int64)
    spans = lambda n: (slice(0, n - window), slice(n - window, n - shift), slice(n - shift, n))  # noqa: E731
    k = 0
    for hs in spans(Hp):
        for ws in spans(Wp):
            ids[hs, ws] = k
            k += 1
    w = window
    win = ids.reshape(Hp // w, w, Wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    return np.where(win[:, :, None] == win[:, None, :], 0.0, -100.0)


def symmetric_pad_amounts(n: int, window: int) -> tuple[int, int]:
    total = (-n) % window
    return total // 2, total - total // 2


class WindowAttention(Module):
    def __init__(self, rng, channels: int, heads: int, window: int, dtype=None):
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        dtype = dtype or default_dtype()
        self.heads = heads
        self.window = window
        self.qkv = Linear(rng, channels, 3 * channels, dtype=dtype)
        self.proj = Linear(rng, channels, channels, dtype=dtype)
        self.rel_bias = Parameter((0.02 * rng.standard_normal(((2 * window - 1) ** 2, heads))).astype(dtype))
        self.rel_index = relative_position_index(window)

    def bias(self) -> Tensor:
        T = self.window * self.window
        b = ops.getitem(self.rel_bias, self.rel_index.reshape(-1))
        return ops.transpose(ops.reshape(b, (T, T, self.heads)), (2, 0, 1))


def swin_window_attention(x: Tensor, attn: WindowAttention, shift: bool = False, return_attention: bool = False):
    """Multi-head self-attention inside non-overlapping windows of a B x C x H x W map.

    Extents not divisible by the window are zero-padded symmetrically and
    cropped afterwards.  With ``shift`` the map is cyclically rolled by
    window // 2 first and tokens from different wrapped regions are masked.
    """
    B, C, H, W = x.shape
    w, heads = attn.window, attn.heads
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    hd = C // heads
    h = to_channels_last(x)
    (pt, pb), (pl, pr) = symmetric_pad_amounts(H, w), symmetric_pad_amounts(W, w)
    if pt or pb or pl or pr:
        h = ops.pad(h, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    Hp, Wp = H + pt + pb, W + pl + pr
    s = w // 2 if shift and (Hp > w or Wp > w) else 0
    if s:
        h = ops.roll(h, (-s, -s), (1, 2))
    nh, nw = Hp // w, Wp // w
    T = w * w
    win = ops.reshape(ops.transpose(ops.reshape(h, (B, nh, w, nw, w, C)), (0, 1, 3, 2, 4, 5)), (B * nh * nw, T, C))
    qkv = ops.transpose(ops.reshape(attn.qkv(win), (B * nh * nw, T, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (hd**-0.5)
    scores = scores + attn.bias()
    if s:
        mask = shift_region_mask(Hp, Wp, w, s).astype(x.dtype)
        scores = ops.reshape(scores, (B, nh * nw, heads, T, T)) + Tensor(mask[None, :, None])
        scores = ops.reshape(scores, (B * nh * nw, heads, T, T))
    probs = ops.softmax(scores, axis=-1)
    out = ops.matmul(probs, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B * nh * nw, T, C))
    out = attn.proj(out)
    out = ops.reshape(ops.transpose(ops.reshape(out, (B, nh, nw, w, w, C)), (0, 1, 3, 2, 4, 5)), (B, Hp, Wp, C))
    if s:
        out = ops.roll(out, (s, s), (1, 2))
    if pt or pb or pl or pr:
        out = out[:, pt : pt + H, pl : pl + W, :]
    out = to_channels_first(out)
    if return_attention:
        return out, probs
    return out


class SwinBlock(Module):
    """Window attention residual followed by an MLP residual."""

    def __init__(self, rng, cfg: BlockConfig, dtype=None):
        self.channels = cfg.channels
        self.shift = cfg.shift
        self.norm1 = ChannelLayerNorm(cfg.channels, dtype=dtype)
        self.attn = WindowAttention(rng, cfg.channels, cfg.heads, cfg.window_size, dtype)
        self.norm2 = LayerNorm(cfg.channels, dtype=dtype)
        self.mlp = MLP(rng, cfg.channels, cfg.mlp_ratio, dtype)

    @property
    def out_proj(self) -> Linear:
        return self.attn.proj

    def forward(self, x: Tensor) -> Tensor:
        _check_map(x, self.channels)
        x = x + swin_window_attention(self.norm1(x), self.attn, self.shift)
        h = to_channels_last(x)
        h = h + self.mlp(self.norm2(h))
        return to_channels_first(h)


_BLOCKS = {
    BlockKind.MAMBA: MambaBlock,
    BlockKind.VANILLA_VSS: VanillaVSSBlock,
    BlockKind.VSS: VSSBlock,
    BlockKind.RESIDUAL_CONV: ResidualConv,
    BlockKind.UMAMBA: UMambaBlock,
    BlockKind.RVM: RVMLayer,
    BlockKind.SWIN: SwinBlock,
}


def make_block(rng, cfg: BlockConfig, dtype=None) -> Module:
    return _BLOCKS[BlockKind(cfg.kind)](rng, cfg, dtype)

"""U-shaped segmentation networks for the six architecture variants.

One generic builder covers every variant; what differs is the block kind
placed in the encoder, bottleneck, and decoder (:data:`PLACEMENT`).

Layout for S stages with channels c[0..S-1]::

    encoder i   : (stem conv | stride-2 conv) -> depths[i] encoder blocks     -> e[i] at H/2^i
    bottleneck  : bottleneck_depth blocks on e[S-1]                            -> b
    decoder j   : (b | upsample d[j-1] + 1x1 conv), concat e[S-1-j], 1x1 conv,
                  decoder_depth decoder blocks                                -> d[j] at H/2^(S-1-j)
    heads       : primary on d[S-1]; auxiliary on d[0..S-2] with deep supervision
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, default_dtype
from .blocks import BlockConfig, BlockKind, make_block
from .errors import ShapeError, SpecError
from .nn import ChannelLayerNorm, Conv2d, ConvTranspose2, Module, shape_only


class Variant(str, enum.Enum):
    UMAMBA_BOT = "umamba_bot"
    UMAMBA_ENC = "umamba_enc"
    LIGHTM_UNET = "lightm_unet"
    SWIN_UMAMBA = "swin_umamba"
    SWIN_UMAMBA_D = "swin_umamba_d"
    SWIN_UNETR = "swin_unetr"


DISPLAY_NAMES = {
    Variant.UMAMBA_BOT: "U-Mamba BOT",
    Variant.UMAMBA_ENC: "U-Mamba ENC",
    Variant.LIGHTM_UNET: "LightM-UNet",
    Variant.SWIN_UMAMBA: "Swin-UMamba",
    Variant.SWIN_UMAMBA_D: "Swin-UMamba D",
    Variant.SWIN_UNETR: "Swin UNetR",
}

# variant -> (encoder, bottleneck, decoder) block kind
PLACEMENT: dict[Variant, tuple[BlockKind, BlockKind, BlockKind]] = {
    Variant.UMAMBA_BOT: (BlockKind.RESIDUAL_CONV, BlockKind.UMAMBA, BlockKind.RESIDUAL_CONV),
    Variant.UMAMBA_ENC: (BlockKind.UMAMBA, BlockKind.UMAMBA, BlockKind.RESIDUAL_CONV),
    Variant.LIGHTM_UNET: (BlockKind.RVM, BlockKind.RVM, BlockKind.RESIDUAL_CONV),
    Variant.SWIN_UMAMBA: (BlockKind.VSS, BlockKind.VSS, BlockKind.RESIDUAL_CONV),
    Variant.SWIN_UMAMBA_D: (BlockKind.VSS, BlockKind.VSS, BlockKind.VSS),
    Variant.SWIN_UNETR: (BlockKind.SWIN, BlockKind.SWIN, BlockKind.RESIDUAL_CONV),
}

DEEP_SUPERVISED = frozenset({Variant.SWIN_UMAMBA, Variant.SWIN_UMAMBA_D})
LIGHTM_BOTTLENECK_LAYERS = 4


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    stage_channels: tuple[int, ...] = (8, 16, 32)
    depths: tuple[int, ...] = (1, 1, 1)
    in_channels: int = 1
    num_classes: int = 2
    deep_supervision: bool = False
    bottleneck_depth: int = 1
    decoder_depth: int = 1
    state_size: int = 8
    expand: int = 2
    window_size: int = 4
    head_dim: int = 4
    upsample: str = "nearest"
    scan_method: str = "blocked"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.variant in DEEP_SUPERVISED:
            object.__setattr__(self, "deep_supervision", True)
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def validate(self) -> None:
        c = self.stage_channels
        if len(c) < 2:
            raise SpecError("a U-shaped network needs at least two stages")
        if any(x < 1 for x in c) or any(b <= a for a, b in zip(c, c[1:])):
            raise SpecError(f"stage channels must be positive and strictly increasing: {c}")
        if len(self.depths) != len(c) or any(d < 1 for d in self.depths):
            raise SpecError("depths must give one positive entry per stage")
        if self.bottleneck_depth < 1 or self.decoder_depth < 1:
            raise SpecError("bottleneck and decoder depths must be positive")
        if self.variant == Variant.LIGHTM_UNET and self.bottleneck_depth != LIGHTM_BOTTLENECK_LAYERS:
            raise SpecError(f"LightM-UNet uses exactly {LIGHTM_BOTTLENECK_LAYERS} bottleneck RVM layers")
        if self.upsample not in ("nearest", "transposed"):
            raise SpecError(f"unknown upsample mode {self.upsample!r}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise SpecError("need at least one input channel and two classes")
        if PLACEMENT[self.variant][0] == BlockKind.SWIN or PLACEMENT[self.variant][1] == BlockKind.SWIN:
            for ch in c:
                if ch % self.heads_for(ch):
                    raise SpecError(f"channels {ch} not divisible into heads of size {self.head_dim}")

    def heads_for(self, channels: int) -> int:
        return max(1, channels // self.head_dim)

    def block_config(self, kind: BlockKind, channels: int, index: int = 0) -> BlockConfig:
        return BlockConfig(
            kind=kind,
            channels=channels,
            state_size=self.state_size,
            expand=self.expand,
            window_size=self.window_size,
            shift=bool(index % 2),
            heads=self.heads_for(channels),
            scan_method=self.scan_method,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["stage_channels"] = list(self.stage_channels)
        d["depths"] = list(self.depths)
        return d


class SegHead(Module):
    def __init__(self, rng, channels: int, classes: int, dtype=None):
        self.norm = ChannelLayerNorm(channels, dtype=dtype)
        self.conv = Conv2d(rng, channels, classes, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.silu(self.norm(x)))


class EncoderStage(Module):
    def __init__(self, rng, spec: ModelSpec, i: int, dtype=None):
        c = spec.stage_channels[i]
        if i == 0:
            self.entry = Conv2d(rng, spec.in_channels, c, 3, padding=1, dtype=dtype)
        else:
            self.entry = Conv2d(rng, spec.stage_channels[i - 1], c, 3, stride=2, padding=1, dtype=dtype)
        kind = PLACEMENT[spec.variant][0]
        self.blocks = [make_block(rng, spec.block_config(kind, c, k), dtype) for k in range(spec.depths[i])]

    def forward(self, x: Tensor) -> Tensor:
        x = self.entry(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Bottleneck(Module):
    def __init__(self, rng, spec: ModelSpec, dtype=None):
        c = spec.stage_channels[-1]
        kind = PLACEMENT[spec.variant][1]
        self.blocks = [make_block(rng, spec.block_config(kind, c, k), dtype) for k in range(spec.bottleneck_depth)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class DecoderStage(Module):
    def __init__(self, rng, spec: ModelSpec, j: int, dtype=None):
        level = spec.stages - 1 - j
        c = spec.stage_channels[level]
        self.first = j == 0
        self.up = None
        self.up_proj = None
        if not self.first:
            below = spec.stage_channels[level + 1]
            if spec.upsample == "transposed":
                self.up = ConvTranspose2(rng, below, c, dtype=dtype)
            else:
                self.up_proj = Conv2d(rng, below, c, 1, dtype=dtype)
        self.fuse = Conv2d(rng, 2 * c, c, 1, dtype=dtype)
        kind = PLACEMENT[spec.variant][2]
        self.blocks = [make_block(rng, spec.block_config(kind, c, k), dtype) for k in range(spec.decoder_depth)]

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if self.up is not None:
            x = self.up(x)
        elif self.up_proj is not None:
            x = self.up_proj(ops.upsample_nearest2(x))
        x = self.fuse(ops.concat([x, skip], axis=1))
        for blk in self.blocks:
            x = blk(x)
        return x


class Network(Module):
    """Encoder stages, bottleneck, decoder stages with one same-resolution skip each, and heads."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=None):
        self.spec = spec
        S = spec.stages
        self.encoder = [EncoderStage(rng, spec, i, dtype) for i in range(S)]
        self.bottleneck = Bottleneck(rng, spec, dtype)
        self.decoder = [DecoderStage(rng, spec, j, dtype) for j in range(S)]
        self.head = SegHead(rng, spec.stage_channels[0], spec.num_classes, dtype)
        self.aux_heads = []
        if spec.deep_supervision:
            self.aux_heads = [
                SegHead(rng, spec.stage_channels[S - 1 - j], spec.num_classes, dtype) for j in range(S - 1)
            ]

    def block_kinds(self) -> dict[str, list[str]]:
        """Block class names per section, for checking the placement table."""
        return {
            "encoder": [type(b).__name__ for st in self.encoder for b in st.blocks],
            "bottleneck": [type(b).__name__ for b in self.bottleneck.blocks],
            "decoder": [type(b).__name__ for st in self.decoder for b in st.blocks],
        }

    def check_input(self, images: Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected B x {self.spec.in_channels} x H x W images, got {images.shape}")
        _, _, H, W = images.shape
        d = self.spec.divisor
        if H % d or W % d:
            raise ShapeError(f"input {H}x{W} not divisible by {d} for {self.spec.stages} stages")

    def forward_features(self, images: Tensor):
        self.check_input(images)
        skips = []
        x = images
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        b = self.bottleneck(x)
        decoded = []
        x = b
        for j, stage in enumerate(self.decoder):
            x = stage(x, skips[self.spec.stages - 1 - j])
            decoded.append(x)
        return skips, b, decoded

    def forward(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Primary logits at input resolution plus auxiliary logits, finest first."""
        _, _, decoded = self.forward_features(images)
        logits = self.head(decoded[-1])
        aux = [head(d) for head, d in zip(self.aux_heads, decoded[:-1])]
        return logits, aux[::-1]


def build(spec: ModelSpec, seed: int = 0, dtype=None) -> Network:
    """Instantiate a network; the same spec and seed give identical parameters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return Network(spec, rng, dtype or default_dtype())


def forward(net: Network, images: Tensor) -> tuple[Tensor, list[Tensor]]:
    return net(images)


def count_params(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))


def count_spec_params(spec: ModelSpec) -> int:
    """Parameter count of ``spec`` without keeping the weights in memory."""
    with shape_only():
        return count_params(build(spec, seed=0, dtype=np.float32))


# --------------------------------------------------------------- presets
def tiny_spec(variant, **overrides) -> ModelSpec:
    """Three-stage [8, 16, 32] network used for overfit and gradient checks."""
    variant = Variant(variant)
    base = dict(
        variant=variant,
        stage_channels=(8, 16, 32),
        depths=(1, 1, 1),
        bottleneck_depth=LIGHTM_BOTTLENECK_LAYERS if variant == Variant.LIGHTM_UNET else 1,
        state_size=4,
        window_size=4,
        head_dim=4,
    )
    base.update(overrides)
    return ModelSpec(**base)


# widths chosen to land near the reported parameter budgets; only the
# LightM-UNet budget is checked
FULL_PRESETS: dict[Variant, ModelSpec] = {
    Variant.LIGHTM_UNET: ModelSpec(
        Variant.LIGHTM_UNET, stage_channels=(32, 64, 128, 256), depths=(1, 1, 1, 1),
        bottleneck_depth=LIGHTM_BOTTLENECK_LAYERS, state_size=16, head_dim=32,
    ),
    Variant.SWIN_UNETR: ModelSpec(
        Variant.SWIN_UNETR, stage_channels=(48, 96, 192, 384), depths=(2, 2, 18, 2),
        bottleneck_depth=2, decoder_depth=2, window_size=8, head_dim=32,
    ),
    Variant.SWIN_UMAMBA_D: ModelSpec(
        Variant.SWIN_UMAMBA_D, stage_channels=(48, 96, 192, 384), depths=(2, 2, 2, 2),
        bottleneck_depth=2, decoder_depth=1, state_size=16,
    ),
    Variant.SWIN_UMAMBA: ModelSpec(
        Variant.SWIN_UMAMBA, stage_channels=(64, 128, 256, 512), depths=(2, 2, 6, 2),
        bottleneck_depth=2, decoder_depth=2, state_size=16,
    ),
    Variant.UMAMBA_ENC: ModelSpec(
        Variant.UMAMBA_ENC, stage_channels=(32, 64, 128, 256, 512, 640), depths=(1, 1, 1, 1, 1, 1),
        bottleneck_depth=2, decoder_depth=2, state_size=16,
    ),
    Variant.UMAMBA_BOT: ModelSpec(
        Variant.UMAMBA_BOT, stage_channels=(64, 128, 256, 512, 1024, 1472), depths=(2, 2, 2, 2, 2, 2),
        bottleneck_depth=2, decoder_depth=2, state_size=16,
    ),
}

PARAM_BUDGETS = {
    Variant.SWIN_UNETR: 25_000_000,
    Variant.LIGHTM_UNET: 5_000_000,
    Variant.SWIN_UMAMBA_D: 27_000_000,
    Variant.SWIN_UMAMBA: 60_000_000,
    Variant.UMAMBA_ENC: 104_000_000,
    Variant.UMAMBA_BOT: 500_000_000,
}


def preset(variant, size: str = "tiny", **overrides) -> ModelSpec:
    variant = Variant(variant)
    if size == "tiny":
        return tiny_spec(variant, **overrides)
    if size == "full":
        return replace(FULL_PRESETS[variant], **overrides)
    raise SpecError(f"unknown preset size {size!r}")

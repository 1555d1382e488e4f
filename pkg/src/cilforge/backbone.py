"""Nested hierarchical transformer feature extractor.

Patch embedding splits the image into an SxS patch grid, blockify groups
spatially adjacent patch embeddings into local-attention blocks, and each
hierarchy runs transformer encoders inside its blocks before a conv+pool
aggregation merges 2x2 block neighbourhoods into the next level. The final
level holds a single block; its feature maps feed global average pooling
(and the Grad-CAM tap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, InputError, StateError


def _per_level(value, num_levels: int, name: str) -> tuple[int, ...]:
    """Broadcast a scalar or length-1/num_levels list across levels."""
    if isinstance(value, int):
        return (value,) * num_levels
    vals = tuple(int(v) for v in value)
    if len(vals) == 1:
        return vals * num_levels
    if len(vals) != num_levels:
        raise ConfigurationError(
            f"{name} must have length 1 or {num_levels}, got {len(vals)}"
        )
    return vals


@dataclass(frozen=True)
class BackboneConfig:
    """Structural parameters of the hierarchical transformer.

    patch_size: pixels per patch side (S).
    num_hierarchies: number of block hierarchies (levels).
    embed_dims / heads / blocks_per_level: per-level values; a single int
        or length-1 list is shared across levels.
    """

    patch_size: int = 1
    num_hierarchies: int = 3
    embed_dims: tuple[int, ...] = (192,)
    heads: tuple[int, ...] = (6,)
    blocks_per_level: tuple[int, ...] = (4,)
    image_size: int = 32
    channels: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "embed_dims", _per_level(self.embed_dims, self.num_hierarchies, "embed_dims"))
        object.__setattr__(self, "heads", _per_level(self.heads, self.num_hierarchies, "heads"))
        object.__setattr__(self, "blocks_per_level", _per_level(self.blocks_per_level, self.num_hierarchies, "blocks_per_level"))
        if self.patch_size < 1 or self.num_hierarchies < 1 or self.image_size < 1 or self.channels < 1:
            raise ConfigurationError("patch_size, num_hierarchies, image_size and channels must be >= 1")
        if any(v < 1 for v in self.embed_dims + self.heads + self.blocks_per_level):
            raise ConfigurationError("embed_dims, heads and blocks_per_level entries must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        grid = self.image_size // self.patch_size
        merges = 2 ** (self.num_hierarchies - 1)
        if grid % merges != 0:
            raise ConfigurationError(
                f"patch grid {grid} not divisible by 2^(levels-1)={merges}; "
                "each aggregation must halve the grid down to one block"
            )
        for d, h in zip(self.embed_dims, self.heads):
            if d % h != 0:
                raise ConfigurationError(f"embed dim {d} not divisible by head count {h}")

    @property
    def patch_grid(self) -> int:
        """Side of the patch grid after embedding."""
        return self.image_size // self.patch_size

    def block_grid(self, level: int) -> int:
        """Side of the block grid at a level: 2^(levels-1-level)."""
        return 2 ** (self.num_hierarchies - 1 - level)

    def num_blocks(self, level: int) -> int:
        return self.block_grid(level) ** 2

    @property
    def block_size(self) -> int:
        """Tokens per block side; constant across levels."""
        return self.patch_grid // self.block_grid(0)

    @property
    def final_grid(self) -> int:
        """Spatial side of the final-hierarchy feature maps."""
        return self.patch_grid // 2 ** (self.num_hierarchies - 1)

    @property
    def feature_dim(self) -> int:
        return self.embed_dims[-1]

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "num_hierarchies": self.num_hierarchies,
            "embed_dims": list(self.embed_dims),
            "heads": list(self.heads),
            "blocks_per_level": list(self.blocks_per_level),
            "image_size": self.image_size,
            "channels": self.channels,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def blockify(x: torch.Tensor, block_grid: int) -> torch.Tensor:
    """Group a token grid (B, G, G, d) into (B, b*b, (G/b)^2, d) blocks.

    Tokens inside a block form a contiguous G/b x G/b tile; the op is a pure
    reshape/permutation, so the multiset of token vectors is unchanged.
    """
    B, H, W, C = x.shape
    if H != W:
        raise InputError(f"token grid must be square, got {H}x{W}")
    if H % block_grid != 0:
        raise ConfigurationError(
            f"grid side {H} not divisible by block grid {block_grid}"
        )
    t = H // block_grid  # tokens per block side
    x = x.reshape(B, block_grid, t, block_grid, t, C)
    x = x.transpose(2, 3).reshape(B, block_grid * block_grid, t * t, C)
    return x


def deblockify(x: torch.Tensor, block_grid: int) -> torch.Tensor:
    """Inverse of blockify: (B, b*b, t*t, d) back to (B, G, G, d)."""
    B, T, N, C = x.shape
    if T != block_grid * block_grid:
        raise InputError(f"expected {block_grid ** 2} blocks, got {T}")
    t = int(math.isqrt(N))
    if t * t != N:
        raise InputError(f"tokens per block {N} is not a perfect square")
    x = x.reshape(B, block_grid, block_grid, t, t, C)
    x = x.transpose(2, 3).reshape(B, block_grid * t, block_grid * t, C)
    return x


class BlockAttention(nn.Module):
    """Multi-head self-attention within each local block.

    Input is (B, T, N, C): T blocks of N tokens; attention never crosses
    block boundaries.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, T, N, C = x.shape
        qkv = self.qkv(x).reshape(B, T, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(3, 0, 4, 1, 2, 5).unbind(0)  # each (B, h, T, N, C/h)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        x = attn @ v                                       # (B, h, T, N, C/h)
        x = x.permute(0, 2, 3, 4, 1).reshape(B, T, N, C)
        return self.proj(x)


class EncoderBlock(nn.Module):
    """LN -> block MSA -> residual, LN -> FFN (4x) -> residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = BlockAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ConvPool(nn.Module):
    """3x3 conv (stride 1, pad 1) -> channel LayerNorm -> 3x3 max-pool stride 2.

    Halves even spatial dims; maps channels to the next level's embed dim.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x):
        if x.shape[-1] % 2 != 0 or x.shape[-2] % 2 != 0:
            raise InputError(f"aggregation needs even spatial dims, got {tuple(x.shape[-2:])}")
        x = self.conv(x)
        x = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return F.max_pool2d(x, kernel_size=3, stride=2, padding=1)


class FeatureExtractor(nn.Module):
    """Hierarchical transformer producing pooled features plus final maps.

    Per level: (aggregate from previous level), blockify, add a learnable
    positional embedding per block, run the level's encoder stack, deblockify.
    The final level's normalized maps are exposed for Grad-CAM; pooled output
    is their spatial mean.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        dims = config.embed_dims
        self.patch_embed = nn.Conv2d(
            config.channels, dims[0],
            kernel_size=config.patch_size, stride=config.patch_size,
        )
        bs = config.block_size
        self.pos_embeds = nn.ParameterList(
            nn.Parameter(torch.zeros(1, config.num_blocks(lv), bs * bs, dims[lv]))
            for lv in range(config.num_hierarchies)
        )
        self.aggregations = nn.ModuleList(
            ConvPool(dims[lv - 1], dims[lv]) for lv in range(1, config.num_hierarchies)
        )
        self.encoders = nn.ModuleList(
            nn.Sequential(*[
                EncoderBlock(dims[lv], config.heads[lv], config.mlp_ratio)
                for _ in range(config.blocks_per_level[lv])
            ])
            for lv in range(config.num_hierarchies)
        )
        self.final_norm = nn.LayerNorm(dims[-1])
        self._init_weights()

    def _init_weights(self):
        for p in self.pos_embeds:
            nn.init.trunc_normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def aggregate(self, blocks: torch.Tensor, level: int) -> torch.Tensor:
        """Merge 2x2 neighbouring blocks at `level` into level+1 blocks.

        Block count divides by 4 and tokens per block are preserved; channels
        map to the next level's embed dim. Raises StateError at the top level.
        """
        if level >= self.config.num_hierarchies - 1:
            raise StateError("aggregate called at the top level (single block)")
        bg = self.config.block_grid(level)
        if blocks.shape[1] != bg * bg:
            raise InputError(f"expected {bg * bg} blocks at level {level}, got {blocks.shape[1]}")
        x = deblockify(blocks, bg).permute(0, 3, 1, 2)          # (B, C, H, W)
        x = self.aggregations[level](x)                         # (B, C', H/2, W/2)
        return blockify(x.permute(0, 2, 3, 1), bg // 2)

    def forward_maps(self, images: torch.Tensor) -> torch.Tensor:
        """Run the hierarchy; return final-level feature maps (B, d, g, g)."""
        cfg = self.config
        if images.ndim != 4 or images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise InputError(
                f"expected {cfg.image_size}x{cfg.image_size} images, got {tuple(images.shape[-2:])}"
            )
        if images.shape[1] != cfg.channels:
            raise InputError(f"expected {cfg.channels} channels, got {images.shape[1]}")
        x = self.patch_embed(images)                            # (B, d0, G, G)
        blocks = blockify(x.permute(0, 2, 3, 1), cfg.block_grid(0))
        for lv in range(cfg.num_hierarchies):
            if lv > 0:
                blocks = self.aggregate(blocks, lv - 1)
            blocks = blocks + self.pos_embeds[lv]
            blocks = self.encoders[lv](blocks)
        maps = deblockify(blocks, 1)                            # (B, g, g, d)
        maps = self.final_norm(maps)
        return maps.permute(0, 3, 1, 2)                         # (B, d, g, g)

    def extract_features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (pooled B x d, final_maps B x d x g x g).

        pooled is the spatial global average of final_maps.
        """
        maps = self.forward_maps(images)
        return maps.mean(dim=(2, 3)), maps

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.extract_features(images)[0]

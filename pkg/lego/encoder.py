#!/usr/bin/env python3
"""
ViT backbone shared by pretraining and the downstream heads.

Images of 32x128 are cut into 4x8 patches, giving an 8x16 token grid
(row-major, no class token). Masked image modeling replaces patch
embeddings before position embeddings are added, so ``forward`` is split
into ``patch_tokens`` and ``encode``.
"""

from typing import Any, Dict, Tuple

import torch
from timm.layers import trunc_normal_
from timm.models.vision_transformer import Block, PatchEmbed
from torch import nn

from .errors import ValidationError


class ViTEncoder(nn.Module):
    """Plain ViT over rectangular text images."""

    def __init__(
        self,
        image_size: Tuple[int, int] = (32, 128),
        patch_size: Tuple[int, int] = (4, 8),
        embed_dim: int = 384,
        depth: int = 12,
        num_heads: int = 6,
        mlp_ratio: float = 4.0,
    ):
        super().__init__()
        self.image_size = tuple(image_size)
        self.patch_size = tuple(patch_size)
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.patch_embed = PatchEmbed(
            img_size=self.image_size,
            patch_size=self.patch_size,
            in_chans=3,
            embed_dim=embed_dim,
        )
        self.pos_embed = nn.Parameter(
            torch.zeros(1, self.num_tokens, embed_dim)
        )
        self.blocks = nn.Sequential(
            *[
                Block(embed_dim, num_heads, mlp_ratio, qkv_bias=True)
                for _ in range(depth)
            ]
        )
        self.norm = nn.LayerNorm(embed_dim)

        trunc_normal_(self.pos_embed, std=0.02)
        w = self.patch_embed.proj.weight.data
        nn.init.xavier_uniform_(w.view([w.shape[0], -1]))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0)
        elif isinstance(m, nn.LayerNorm):
            nn.init.constant_(m.bias, 0)
            nn.init.constant_(m.weight, 1.0)

    def spec(self) -> Dict[str, Any]:
        """Constructor arguments, enough to rebuild an equal module."""
        return {
            "image_size": list(self.image_size),
            "patch_size": list(self.patch_size),
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @property
    def grid(self) -> Tuple[int, int]:
        return (
            self.image_size[0] // self.patch_size[0],
            self.image_size[1] // self.patch_size[1],
        )

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def patch_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> patch embeddings (B, L, D) without positions."""
        if images.dim() != 4 or tuple(images.shape[2:]) != self.image_size:
            raise ValidationError(
                f"Expected (B, 3, {self.image_size[0]}, "
                f"{self.image_size[1]}) images, got {tuple(images.shape)}"
            )
        return self.patch_embed(images)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Add positions and run the transformer; (B, L, D) -> (B, L, D)."""
        return self.norm(self.blocks(tokens + self.pos_embed))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode(self.patch_tokens(images))

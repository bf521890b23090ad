"""Frozen feature providers and the semantic-injection losses.

Four encoder-side modes exist (``none``, ``direct``, ``substitution``,
``implicit``); decoder alignment toggles independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torch.nn import functional as F

from jointtok.tokenizer import Block, patchify_pixels

ENCODER_MODES = ("none", "direct", "substitution", "implicit")


class AlignmentConfigError(ValueError):
    pass


@dataclass
class VFMFeatures:
    y: torch.Tensor
    provider: str
    frozen: bool = True


class FrozenRandomViT(nn.Module):
    """Small ViT with seeded random weights and every parameter frozen.

    Stands in for a pretrained foundation model: it is deterministic and maps
    an image to one feature vector per patch on a square grid.
    """

    def __init__(self, image_size: int = 32, patch_size: int = 8, channels: int = 3,
                 dim: int = 32, layers: int = 2, heads: int = 4, seed: int = 1234):
        super().__init__()
        self.patch_size = patch_size
        n = (image_size // patch_size) ** 2
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(patch_size**2 * channels, dim)
            self.pos = nn.Parameter(torch.randn(1, n, dim) * 0.1)
            self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
            self.norm = nn.LayerNorm(dim)
        self.dim = dim
        self.requires_grad_(False)
        self.eval()
        self.register_buffer("mask", torch.ones(n, n, dtype=torch.bool), persistent=False)

    def train(self, mode: bool = True) -> FrozenRandomViT:
        return super().train(False)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.embed(patchify_pixels(pixels, self.patch_size)) + self.pos
        for blk in self.blocks:
            x = blk(x, self.mask)
        return self.norm(x)


ProviderFactory = Callable[..., nn.Module]
PROVIDERS: dict[str, ProviderFactory] = {"frozen-random-vit": FrozenRandomViT}


def register_provider(name: str, factory: ProviderFactory) -> None:
    """Hook for plugging in genuinely pretrained feature extractors."""
    PROVIDERS[name] = factory


def make_provider(name: str, **kwargs) -> nn.Module:
    if name not in PROVIDERS:
        raise KeyError(f"unknown feature provider {name!r}; known: {sorted(PROVIDERS)}")
    provider = PROVIDERS[name](**kwargs)
    provider.requires_grad_(False)
    provider.provider_id = name
    return provider


@torch.no_grad()
def extract_features(pixels: torch.Tensor, provider: nn.Module) -> VFMFeatures:
    return VFMFeatures(y=provider(pixels), provider=getattr(provider, "provider_id", type(provider).__name__))


def near_square(n: int) -> tuple[int, int]:
    """Factor ``n = rows * cols`` with ``rows <= cols`` as close as possible."""
    rows = int(math.isqrt(n))
    while n % rows:
        rows -= 1
    return rows, n // rows


def interpolate_grid_to_sequence(y: torch.Tensor, length: int) -> torch.Tensor:
    """Resample a B×N_f×D_f square feature grid to a B×L×D_f sequence.

    Bilinear with corner alignment onto a near-square ``rows x cols`` grid,
    flattened in raster order.
    """
    b, n, d = y.shape
    side = math.isqrt(n)
    if side * side != n:
        raise AlignmentConfigError(f"feature count {n} is not a perfect square")
    rows, cols = near_square(length)
    if rows == 1 and length > 1:
        raise AlignmentConfigError(f"sequence length {length} has no near-square factorisation")
    grid = y.transpose(1, 2).reshape(b, d, side, side)
    if (rows, cols) == (side, side):
        out = grid
    else:
        out = F.interpolate(grid, size=(rows, cols), mode="bilinear", align_corners=True)
    return out.reshape(b, d, length).transpose(1, 2)


class Projector(nn.Module):
    """Three-layer SiLU MLP into the feature-provider width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        width = max(in_dim, out_dim)
        self.net = nn.Sequential(
            nn.Linear(in_dim, width), nn.SiLU(),
            nn.Linear(width, width), nn.SiLU(),
            nn.Linear(width, out_dim),
        )
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def negative_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``-mean cos(a_i, b_i)`` over batch and positions."""
    return -F.cosine_similarity(a, b, dim=-1, eps=1e-8).mean()


def direct_alignment_loss(z: torch.Tensor, y: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    return negative_cosine(proj(z), interpolate_grid_to_sequence(y, z.shape[1]))


def _check_grid(h: torch.Tensor, y: torch.Tensor) -> None:
    if h.shape[1] != y.shape[1]:
        raise AlignmentConfigError(
            f"tokenizer grid has {h.shape[1]} patches but provider grid has {y.shape[1]}"
        )


def implicit_alignment_loss(h_enc: torch.Tensor, y: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    _check_grid(h_enc, y)
    return negative_cosine(proj(h_enc), y)


def decoder_alignment_loss(h_dec: torch.Tensor, y: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    _check_grid(h_dec, y)
    return negative_cosine(proj(h_dec), y)


def substitute_patches(y: torch.Tensor, mlp: nn.Module, mode: str = "substitution") -> torch.Tensor:
    """Projected provider features used in place of pixel patch embeddings."""
    if mode != "substitution":
        raise AlignmentConfigError(f"patch substitution requires mode 'substitution', got {mode!r}")
    return mlp(y)


def check_mode(mode: str, num_tokens: int) -> None:
    if mode not in ENCODER_MODES:
        raise AlignmentConfigError(f"alignment mode must be one of {ENCODER_MODES}, got {mode!r}")
    if mode == "direct":
        rows, _ = near_square(num_tokens)
        if rows == 1 and num_tokens > 1:
            raise AlignmentConfigError(
                f"direct alignment needs a near-square token count; {num_tokens} is prime"
            )

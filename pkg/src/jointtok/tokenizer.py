"""1D ViT tokenizer: patches + learnable queries in, ordered latent tokens out.

The encoder sees ``[patches, queries]`` and the decoder sees ``[latents, mask
tokens]``. Both use a hybrid attention mask that is bidirectional over the 2D
patch grid and causal along the 1D query axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


class ShapeError(ValueError):
    """Raised when tensor dimensions violate a shape contract."""


def num_patches(height: int, width: int, patch_size: int) -> int:
    if height % patch_size or width % patch_size:
        raise ShapeError(
            f"image {height}x{width} is not divisible by patch size {patch_size}"
        )
    return (height // patch_size) * (width // patch_size)


def patchify_pixels(pixels: torch.Tensor, patch_size: int) -> torch.Tensor:
    """B×H×W×C pixels -> B×N×(P·P·C) raw patch vectors in raster order."""
    b, h, w, c = pixels.shape
    num_patches(h, w, patch_size)
    p = patch_size
    x = pixels.reshape(b, h // p, p, w // p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify_pixels(patches: torch.Tensor, patch_size: int, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`patchify_pixels`, returning B×C×H×W (channels first)."""
    b, n, _ = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    if n != gh * gw:
        raise ShapeError(f"expected {gh * gw} patches, got {n}")
    x = patches.reshape(b, gh, gw, p, p, -1)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, -1, height, width)


def build_hybrid_mask(n: int, l: int, side: str) -> torch.Tensor:
    """Boolean attention mask, ``True`` where the row token may attend the column token.

    encoder order is ``[patches, queries]``: patches attend only patches, query
    ``i`` attends every patch and queries ``j <= i``.
    decoder order is ``[queries, patches]``: query ``i`` attends queries
    ``j <= i`` only, patches attend everything.
    """
    if n < 1 or l < 1:
        raise ValueError(f"mask sizes must be positive, got N={n}, L={l}")
    causal = torch.ones(l, l, dtype=torch.bool).tril()
    allow = torch.zeros(n + l, n + l, dtype=torch.bool)
    if side == "encoder":
        allow[:n, :n] = True
        allow[n:, :n] = True
        allow[n:, n:] = causal
    elif side == "decoder":
        allow[:l, :l] = causal
        allow[l:, :] = True
    else:
        raise ValueError(f"side must be 'encoder' or 'decoder', got {side!r}")
    return allow


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


@dataclass
class TokenizerConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    hidden_dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_tokens: int = 16
    latent_dim: int = 16
    decoder_align_layer: int | None = None

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return num_patches(self.image_size, self.image_size, self.patch_size)


@dataclass
class EncoderOutput:
    h_enc: torch.Tensor
    z: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.num_patches, cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.patch_size**2 * cfg.channels, d)
        self.patch_pos = nn.Parameter(torch.randn(1, n, d) * 0.02)
        self.queries = nn.Parameter(torch.randn(1, cfg.num_tokens, d) * 0.02)
        self.query_pos = nn.Parameter(torch.randn(1, cfg.num_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(d)
        self.to_latent = nn.Linear(d, cfg.latent_dim)
        self.register_buffer("mask", build_hybrid_mask(n, cfg.num_tokens, "encoder"), persistent=False)

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        """Linear patch embedding plus learnable positions: B×H×W×C -> B×N×D."""
        if pixels.shape[1] % self.cfg.patch_size or pixels.shape[2] % self.cfg.patch_size:
            raise ShapeError(
                f"image {pixels.shape[1]}x{pixels.shape[2]} is not divisible by "
                f"patch size {self.cfg.patch_size}"
            )
        tokens = self.patch_embed(patchify_pixels(pixels, self.cfg.patch_size))
        if tokens.shape[1] != self.patch_pos.shape[1]:
            raise ShapeError(
                f"image yields {tokens.shape[1]} patches, model expects {self.patch_pos.shape[1]}"
            )
        return tokens + self.patch_pos

    def forward(
        self,
        pixels: torch.Tensor | None = None,
        patch_tokens: torch.Tensor | None = None,
        queries: torch.Tensor | None = None,
    ) -> EncoderOutput:
        """Encode pixels, or pre-embedded patch tokens when substituting features.

        ``queries`` overrides the learnable query tokens (used by causality probes).
        """
        if patch_tokens is None:
            patch_tokens = self.patchify(pixels)
        else:
            patch_tokens = patch_tokens + self.patch_pos
        b, n = patch_tokens.shape[:2]
        q = self.queries if queries is None else queries
        q = (q + self.query_pos).expand(b, -1, -1)
        x = torch.cat([patch_tokens, q], dim=1)
        for blk in self.blocks:
            x = blk(x, self.mask)
        x = self.norm(x)
        return EncoderOutput(h_enc=x[:, :n], z=self.to_latent(x[:, n:]))


class Decoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.num_patches, cfg.hidden_dim
        self.from_latent = nn.Linear(cfg.latent_dim, d)
        self.query_pos = nn.Parameter(torch.randn(1, cfg.num_tokens, d) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.patch_pos = nn.Parameter(torch.randn(1, n, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(d)
        self.to_pixels = nn.Linear(d, cfg.patch_size**2 * cfg.channels)
        self.conv_out = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)
        self.align_layer = (
            cfg.decoder_align_layer if cfg.decoder_align_layer is not None else max(cfg.dec_layers // 2, 1)
        )
        if not 1 <= self.align_layer <= cfg.dec_layers:
            raise ValueError(f"decoder_align_layer must be in [1, {cfg.dec_layers}]")

    def forward(self, z_q: torch.Tensor, prefix_len: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode latents to B×H×W×C pixels in [-1, 1].

        Only the first ``prefix_len`` latents enter the sequence. Also returns
        the mask-token hidden states after decoder layer ``align_layer``.
        """
        cfg = self.cfg
        b, l_full, _ = z_q.shape
        prefix_len = l_full if prefix_len is None else prefix_len
        if not 1 <= prefix_len <= l_full:
            raise ValueError(f"prefix_len must be in [1, {l_full}], got {prefix_len}")
        n = cfg.num_patches
        lat = self.from_latent(z_q[:, :prefix_len]) + self.query_pos[:, :prefix_len]
        patches = (self.mask_token + self.patch_pos).expand(b, -1, -1)
        x = torch.cat([lat, patches], dim=1)
        mask = build_hybrid_mask(n, prefix_len, "decoder").to(x.device)
        h_dec = None
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, mask)
            if i == self.align_layer:
                h_dec = x[:, prefix_len:]
        x = self.to_pixels(self.norm(x[:, prefix_len:]))
        img = unpatchify_pixels(x, cfg.patch_size, cfg.image_size, cfg.image_size)
        img = torch.tanh(self.conv_out(img))
        return img.permute(0, 2, 3, 1), h_dec

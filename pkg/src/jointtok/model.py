"""Assembly of tokenizer, quantizer, generator and alignment heads."""

from __future__ import annotations

import torch
from torch import nn

from jointtok.alignment import Projector, make_provider, substitute_patches
from jointtok.config import TrainConfig
from jointtok.generator import ARTransformer
from jointtok.quantizer import Codebook, QuantizedLatent
from jointtok.tokenizer import Decoder, Encoder, EncoderOutput


class JointModel(nn.Module):
    """Every trainable generator-side module: encoder (phi), decoder (psi),
    codebook (C), AR model (theta) and alignment projectors (omega)."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        tcfg = cfg.tokenizer_config()
        self.encoder = Encoder(tcfg)
        self.decoder = Decoder(tcfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_dim, cfg.temperature)
        self.ar = ARTransformer(cfg.ar_config())
        self.aux_ar = ARTransformer(cfg.ar_config(cfg.aux_layers)) if cfg.autoguide else None
        mode = cfg.alignment_mode
        self.enc_proj = None
        if mode == "direct":
            self.enc_proj = Projector(cfg.latent_dim, cfg.provider_dim)
        elif mode == "implicit":
            self.enc_proj = Projector(cfg.hidden_dim, cfg.provider_dim)
        self.sub_mlp = Projector(cfg.provider_dim, cfg.hidden_dim) if mode == "substitution" else None
        self.dec_proj = Projector(cfg.hidden_dim, cfg.provider_dim) if cfg.decoder_align else None

    def groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameter groups keyed by optimizer."""
        tok = [p for name, p in self.named_parameters() if not name.startswith(("ar.", "aux_ar."))]
        out = {"tokenizer": tok, "ar": list(self.ar.parameters())}
        if self.aux_ar is not None:
            out["aux"] = list(self.aux_ar.parameters())
        return out

    def needs_features(self) -> bool:
        return self.cfg.alignment_mode != "none" or self.cfg.decoder_align

    def encode(self, pixels: torch.Tensor, y: torch.Tensor | None = None) -> EncoderOutput:
        if self.cfg.alignment_mode == "substitution":
            if y is None:
                raise ValueError("substitution mode needs provider features")
            return self.encoder(patch_tokens=substitute_patches(y, self.sub_mlp))
        return self.encoder(pixels)

    def tokenize(self, pixels: torch.Tensor, y: torch.Tensor | None = None) -> tuple[EncoderOutput, QuantizedLatent]:
        enc = self.encode(pixels, y)
        return enc, self.codebook(enc.z)

    def decode_ids(self, ids: torch.Tensor, prefix_len: int | None = None) -> torch.Tensor:
        return self.decoder(self.codebook.lookup(ids), prefix_len)[0]


class FrozenModules(nn.Module):
    """Provider and perceptual network; never trained, never checkpointed as state."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        from jointtok.objectives import PerceptualNet

        self.perceptual = PerceptualNet(cfg.channels)
        self.provider = None
        if cfg.alignment_mode != "none" or cfg.decoder_align:
            self.provider = make_provider(cfg.provider, image_size=cfg.image_size,
                                          patch_size=cfg.patch_size, channels=cfg.channels,
                                          dim=cfg.provider_dim)
        self.requires_grad_(False)

    @torch.no_grad()
    def features(self, pixels: torch.Tensor) -> torch.Tensor | None:
        return None if self.provider is None else self.provider(pixels)

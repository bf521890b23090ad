"""Index-backpropagation quantizer over cosine-similarity logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
from torch import nn
from torch.nn import functional as F


class DegenerateInputError(ValueError):
    """A latent token has zero norm, so its cosine similarity is undefined."""


@dataclass
class QuantizedLatent:
    z: torch.Tensor
    logits: torch.Tensor
    p: torch.Tensor
    ind: torch.Tensor
    ids: torch.Tensor
    z_q: torch.Tensor


def straight_through_onehot(p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(onehot(argmax p) + p - stopgrad(p), argmax p)``.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest id.
    The correction term is exactly zero in value, so the forward is a hard one-hot.
    """
    ids = p.argmax(dim=-1)
    hard = F.one_hot(ids, p.shape[-1]).to(p.dtype)
    return hard + (p - p.detach()), ids


def cosine_logits(z: torch.Tensor, codes: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z_norm = z.norm(dim=-1, keepdim=True)
    if bool((z_norm == 0).any()):
        raise DegenerateInputError("zero-norm latent token passed to quantize")
    c_norm = codes.norm(dim=-1, keepdim=True)
    if bool((c_norm == 0).any()):
        raise DegenerateInputError("zero-norm codebook row")
    return (z / z_norm) @ (codes / c_norm).transpose(0, 1) / temperature


def quantize(z: torch.Tensor, codes: torch.Tensor, temperature: float = 1.0) -> QuantizedLatent:
    logits = cosine_logits(z, codes, temperature)
    p = logits.softmax(dim=-1)
    ind, ids = straight_through_onehot(p)
    return QuantizedLatent(z=z, logits=logits, p=p, ind=ind, ids=ids, z_q=ind @ codes)


class Codebook(nn.Module):
    """K×d learnable code matrix, initialised as unit-normalised Gaussian rows."""

    def __init__(self, size: int, dim: int, temperature: float = 1.0):
        super().__init__()
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.temperature = temperature
        self.weight = nn.Parameter(F.normalize(torch.randn(size, dim), dim=-1))

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    def forward(self, z: torch.Tensor) -> QuantizedLatent:
        return quantize(z, self.weight, self.temperature)

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        return F.embedding(ids, self.weight)


def commitment_loss(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    return (z - z_q.detach()).pow(2).mean()


def entropy_loss(p: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Mean per-token entropy minus entropy of the batch-averaged distribution.

    Lowest (``-ln K``) when every token is confident and the batch spreads
    uniformly over the codebook.
    """
    flat = p.reshape(-1, p.shape[-1])
    per_token = -(flat * (flat + eps).log()).sum(-1).mean()
    avg = flat.mean(0)
    batch = -(avg * (avg + eps).log()).sum()
    return per_token - batch


def code_histogram(ids: torch.Tensor | Iterable[int], k: int) -> torch.Tensor:
    ids = torch.as_tensor(ids if isinstance(ids, torch.Tensor) else list(ids), dtype=torch.long)
    if ids.numel() == 0:
        raise ValueError("empty id stream")
    return torch.bincount(ids.reshape(-1), minlength=k)


def code_usage(ids: torch.Tensor | Iterable[int], k: int, threshold: float = 0.05) -> float:
    """Fraction of codes whose empirical frequency exceeds ``threshold / K``."""
    counts = code_histogram(ids, k).double()
    freq = counts / counts.sum()
    return float((freq > threshold / k).double().mean())

"""Loss terms and their weighted assembly into the joint objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    lambda_recon_l2: float = 1.0
    lambda_recon_perc: float = 1.0
    lambda_gan: float = 0.1
    lambda_lecam: float = 0.05
    lambda_reg: float = 1e-3
    lambda_entropy: float = 0.01
    lambda_ntp: float = 0.1
    lambda_apr_l2: float = 1.0
    lambda_apr_perc: float = 1.0
    lambda_sem: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


# which weight multiplies each generator-side component
COMPONENT_WEIGHTS = {
    "recon_l2": "lambda_recon_l2",
    "recon_perc": "lambda_recon_perc",
    "gan": "lambda_gan",
    "commit": "lambda_reg",
    "entropy": "lambda_entropy",
    "ntp": "lambda_ntp",
    "apr_l2": "lambda_apr_l2",
    "apr_perc": "lambda_apr_perc",
    "align_encoder": "lambda_sem",
    "align_decoder": "lambda_sem",
}


@dataclass
class LossBundle:
    components: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor
    extras: dict[str, float] = field(default_factory=dict)

    def record(self) -> dict[str, float]:
        out = {name: float(v.detach()) for name, v in self.components.items()}
        out["total"] = float(self.total.detach())
        out.update(self.extras)
        return out


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights) -> LossBundle:
    """Weighted sum of every named component.

    Raises :class:`NonFiniteLossError` naming the first non-finite term.
    """
    w = asdict(weights)
    used: dict[str, float] = {}
    total = None
    for name, value in components.items():
        if name not in COMPONENT_WEIGHTS:
            raise KeyError(f"unknown loss component {name!r}")
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLossError(name, float(value.detach()))
        used[name] = w[COMPONENT_WEIGHTS[name]]
        term = used[name] * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return LossBundle(components=dict(components), weights=used, total=total)


class PerceptualNet(nn.Module):
    """Frozen, seeded conv feature stack used for a perceptual distance."""

    def __init__(self, channels: int = 3, widths: tuple[int, ...] = (16, 32, 64), seed: int = 4321):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers = []
            c = channels
            for w in widths:
                layers.append(nn.Sequential(nn.Conv2d(c, w, 3, stride=2, padding=1), nn.ReLU()))
                c = w
            self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> PerceptualNet:
        return super().train(False)

    def features(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        x = pixels.permute(0, 3, 1, 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean over layers of the mean squared feature difference."""
        diffs = [(fa - fb).pow(2).mean() for fa, fb in zip(self.features(a), self.features(b))]
        return torch.stack(diffs).mean()


class Discriminator(nn.Module):
    """Four strided conv blocks and a linear head giving one logit per image."""

    def __init__(self, channels: int = 3, width: int = 32, image_size: int = 32):
        super().__init__()
        blocks = []
        c = channels
        for i in range(4):
            w = width * min(2**i, 4)
            blocks += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        self.net = nn.Sequential(*blocks)
        side = max(image_size // 16, 1)
        self.head = nn.Linear(c * side * side, 1)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.net(pixels.permute(0, 3, 1, 2))
        return self.head(x.flatten(1)).squeeze(-1)


def hinge_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()


def hinge_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return -d_fake.mean()


def lecam_term(d_real: torch.Tensor, d_fake: torch.Tensor, ema_real: float, ema_fake: float) -> torch.Tensor:
    return (d_real - ema_fake).pow(2).mean() + (d_fake - ema_real).pow(2).mean()


class LeCamEMA:
    """Running anchors of mean discriminator outputs on real and fake images."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.real = 0.0
        self.fake = 0.0

    def update(self, d_real: torch.Tensor, d_fake: torch.Tensor) -> None:
        self.real = self.decay * self.real + (1 - self.decay) * float(d_real.mean())
        self.fake = self.decay * self.fake + (1 - self.decay) * float(d_fake.mean())

    def state_dict(self) -> dict[str, float]:
        return {"decay": self.decay, "real": self.real, "fake": self.fake}

    def load_state_dict(self, state: dict[str, float]) -> None:
        self.decay, self.real, self.fake = state["decay"], state["real"], state["fake"]


def gan_step_losses(
    disc: nn.Module, x_real: torch.Tensor, x_fake: torch.Tensor, ema: LeCamEMA
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Hinge discriminator loss, generator loss and LeCam penalty.

    The discriminator loss sees ``x_fake`` detached; the generator loss keeps
    its graph. The LeCam penalty uses the anchors as they stood before this call.
    """
    d_real = disc(x_real)
    d_fake_detached = disc(x_fake.detach())
    lecam = lecam_term(d_real, d_fake_detached, ema.real, ema.fake)
    d_loss = hinge_d_loss(d_real, d_fake_detached)
    g_loss = hinge_g_loss(disc(x_fake))
    ema.update(d_real.detach(), d_fake_detached.detach())
    return d_loss, g_loss, lecam


def reconstruction_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    perceptual: nn.Module,
    disc: nn.Module | None = None,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    weights = weights or LossWeights()
    parts = {"recon_l2": F.mse_loss(x_hat, x), "recon_perc": perceptual(x_hat, x)}
    if disc is not None:
        parts["gan"] = hinge_g_loss(disc(x_hat))
    total = sum(getattr(weights, COMPONENT_WEIGHTS[k]) * v for k, v in parts.items())
    return total, parts


def apr_terms(x: torch.Tensor, x_apr: torch.Tensor, perceptual: nn.Module) -> dict[str, torch.Tensor]:
    return {"apr_l2": F.mse_loss(x_apr, x), "apr_perc": perceptual(x_apr, x)}


def apr_loss(
    x: torch.Tensor,
    pred_z_q: torch.Tensor,
    decoder: nn.Module,
    perceptual: nn.Module,
    weights: LossWeights | None = None,
    prefix_len: int | None = None,
) -> torch.Tensor:
    """Reconstruction loss of the decoded teacher-forcing predictions."""
    weights = weights or LossWeights()
    x_apr, _ = decoder(pred_z_q, prefix_len)
    parts = apr_terms(x, x_apr, perceptual)
    return weights.lambda_apr_l2 * parts["apr_l2"] + weights.lambda_apr_perc * parts["apr_perc"]


def decode_joint(
    decoder: nn.Module, z_q: torch.Tensor, pred_z_q: torch.Tensor | None, prefix_len: int | None = None
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
    """One decoder pass over ``[z_q; pred_z_q]`` stacked on the batch axis.

    Returns reconstructions, APR decodes (or ``None``) and the decoder
    alignment states of the reconstruction half.
    """
    b = z_q.shape[0]
    stacked = z_q if pred_z_q is None else torch.cat([z_q, pred_z_q], dim=0)
    pixels, h_dec = decoder(stacked, prefix_len)
    x_apr = None if pred_z_q is None else pixels[b:]
    return pixels[:b], x_apr, h_dec[:b]


def nested_dropout_sample(length: int, p_apply: float, gen: torch.Generator | None = None) -> int:
    """Keep all ``length`` tokens, or with probability ``p_apply`` a uniform prefix in ``1..length``."""
    if not 0.0 <= p_apply <= 1.0:
        raise ValueError(f"p_apply must be in [0, 1], got {p_apply}")
    if p_apply == 0.0 or float(torch.rand((), generator=gen)) >= p_apply:
        return length
    return int(torch.randint(1, length + 1, (), generator=gen))


def class_dropout(labels: torch.Tensor, ratio: float, null_class: int, gen: torch.Generator | None = None) -> torch.Tensor:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    drop = torch.rand(labels.shape, generator=gen) < ratio
    return torch.where(drop, torch.full_like(labels, null_class), labels)

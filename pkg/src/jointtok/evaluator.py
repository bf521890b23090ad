"""Reconstruction/generation metrics and latent-collapse diagnostics.

Distances use a small frozen conv feature extractor with a fixed seed, so
values are comparable across runs of this package but not to Inception FID.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from jointtok.data import ImageDataset
from jointtok.generator import Guidance, ar_accuracy, sample
from jointtok.quantizer import code_histogram, code_usage

EXTRACTOR_SEED = 20240601
SQRT_EPS = 1e-6


class FeatureExtractor(nn.Module):
    """Frozen conv encoder; output is the concatenation of per-stage average pools."""

    def __init__(self, channels: int = 3, widths: tuple[int, ...] = (16, 48), seed: int = EXTRACTOR_SEED):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages, c = [], channels
            for w in widths:
                stages.append(nn.Sequential(nn.Conv2d(c, w, 3, stride=2, padding=1), nn.Tanh()))
                c = w
            self.stages = nn.ModuleList(stages)
        self.dim = sum(widths)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.permute(0, 3, 1, 2)
        pooled = []
        for stage in self.stages:
            x = stage(x)
            pooled.append(x.mean(dim=(2, 3)))
        return torch.cat(pooled, dim=1)


@dataclass
class FeatureStatistics:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray | torch.Tensor) -> FeatureStatistics:
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d + 1:
            raise ValueError(f"need at least {d + 1} samples for a {d}-dim covariance, got {n}")
        cov = np.cov(feats, rowvar=False)
        return cls(feats.mean(0), (cov + cov.T) / 2, n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FeatureStatistics, b: FeatureStatistics, return_flag: bool = False):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term is taken as ``Tr((A^(1/2) S_b A^(1/2))^(1/2))`` with
    ``A = S_a``, which is symmetric PSD and has the same trace. If the result
    comes out non-finite both covariances get ``1e-6 I`` added and the flag is set.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    regularized = False

    def cross(sa: np.ndarray, sb: np.ndarray) -> float:
        ra = _psd_sqrt(sa)
        return float(np.trace(_psd_sqrt(ra @ sb @ ra)))

    tr = cross(a.cov, b.cov)
    if not np.isfinite(tr):
        eye = np.eye(a.cov.shape[0]) * SQRT_EPS
        tr = cross(a.cov + eye, b.cov + eye)
        regularized = True
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr)
    d = max(d, 0.0)
    return (d, regularized) if return_flag else d


@torch.no_grad()
def image_features(extractor: nn.Module, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    return torch.cat([extractor(chunk) for chunk in images.split(batch_size)]).double().numpy()


def frechet_from_images(extractor: nn.Module, images_a: torch.Tensor, images_b: torch.Tensor) -> float:
    fa = FeatureStatistics.from_features(image_features(extractor, images_a))
    fb = FeatureStatistics.from_features(image_features(extractor, images_b))
    return frechet_distance(fa, fb)


def psnr(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 2.0, max_db: float = 100.0) -> float:
    """Corpus PSNR in dB for images in [-1, 1]; perfect reconstructions hit ``max_db``."""
    mse = float(((x.double() - x_hat.double()) ** 2).mean())
    if mse == 0:
        return max_db
    return min(10 * np.log10(data_range**2 / mse), max_db)


def ssim(x: torch.Tensor, x_hat: torch.Tensor, window: int = 7, data_range: float = 2.0) -> float:
    """Mean SSIM over valid 7x7 uniform windows, channels and images.

    Inputs are B×H×W×C. Local variances use population (1/n) normalisation.
    """
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    a = x.double().permute(0, 3, 1, 2)
    b = x_hat.double().permute(0, 3, 1, 2)

    def local(t: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(t, window, stride=1)

    mu_a, mu_b = local(a), local(b)
    var_a = local(a * a) - mu_a**2
    var_b = local(b * b) - mu_b**2
    cov = local(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@torch.no_grad()
def eval_reconstruction(model, frozen, data: ImageDataset, batch_size: int = 128,
                        extractor: nn.Module | None = None, prefix_len: int | None = None) -> dict[str, float]:
    if len(data) == 0:
        raise ValueError("empty dataset")
    model.eval()
    dtype = next(model.parameters()).dtype
    extractor = (extractor or FeatureExtractor(data.pixels.shape[-1])).to(dtype)
    recons, perc = [], []
    for batch in data.batches(batch_size, shuffle=False, drop_last=False, dtype=dtype):
        y = frozen.features(batch.pixels) if model.needs_features() else None
        _, q = model.tokenize(batch.pixels, y)
        x_hat, _ = model.decoder(q.z_q, prefix_len)
        recons.append(x_hat)
        perc.append(float(frozen.perceptual(x_hat, batch.pixels)) * len(batch))
    x_hat = torch.cat(recons)
    x = data.pixels.to(dtype)
    out = {
        "psnr": psnr(x, x_hat),
        "ssim": ssim(x, x_hat),
        "mse": float(((x - x_hat) ** 2).mean()),
        "perceptual": sum(perc) / len(data),
    }
    if len(data) > extractor.dim:
        out["rfid"] = frechet_from_images(extractor, x_hat, x)
    return out


@torch.no_grad()
def generate_images(model, labels: torch.Tensor, guidance: Guidance | None = None, seed: int = 0,
                    temperature: float = 1.0, batch_size: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    model.eval()
    ids = sample(model.ar, labels, temperature=temperature, guidance=guidance, seed=seed, aux_model=model.aux_ar)
    images = torch.cat([model.decode_ids(chunk) for chunk in ids.split(batch_size)])
    return ids, images


@torch.no_grad()
def class_coverage(extractor: nn.Module, images: torch.Tensor, labels: torch.Tensor, real: ImageDataset) -> float:
    """Share of samples whose nearest real class centroid (feature space) matches their label."""
    real_feats = torch.as_tensor(image_features(extractor, real.pixels.to(images.dtype)))
    classes = torch.unique(real.labels)
    centroids = torch.stack([real_feats[real.labels == c].mean(0) for c in classes])
    feats = torch.as_tensor(image_features(extractor, images))
    nearest = classes[torch.cdist(feats, centroids).argmin(1)]
    return float((nearest == labels).double().mean())


@torch.no_grad()
def eval_generation(model, real: ImageDataset, samples_per_class: int = 32, guidance: Guidance | None = None,
                    seed: int = 0, extractor: nn.Module | None = None, temperature: float = 1.0) -> dict[str, float]:
    dtype = next(model.parameters()).dtype
    extractor = (extractor or FeatureExtractor(real.pixels.shape[-1])).to(dtype)
    num_classes = model.cfg.num_classes
    labels = torch.arange(num_classes).repeat_interleave(samples_per_class)
    if labels.numel() <= extractor.dim:
        raise ValueError(f"need more than {extractor.dim} samples for the covariance, got {labels.numel()}")
    ids, images = generate_images(model, labels, guidance, seed, temperature)
    return {
        "gfid": frechet_from_images(extractor, images, real.pixels.to(dtype)),
        "class_coverage": class_coverage(extractor, images, labels, real),
        "sample_usage": code_usage(ids, model.cfg.codebook_size),
    }


@dataclass
class CollapseReport:
    histogram: np.ndarray
    usage: float
    top1_share: float
    codebook_pca: np.ndarray
    latent_pca: np.ndarray | None = None
    ar_accuracy: float | None = None

    def summary(self) -> dict[str, float]:
        out = {"usage": self.usage, "top1_share": self.top1_share, "tokens": int(self.histogram.sum())}
        if self.ar_accuracy is not None:
            out["ar_accuracy"] = self.ar_accuracy
        return out


def pca_project(rows: np.ndarray, components: int = 3, basis_from: np.ndarray | None = None) -> np.ndarray:
    """Project l2-normalised rows onto the top principal axes of ``basis_from`` (default: rows)."""
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True).clip(1e-12)
    ref = rows if basis_from is None else basis_from / np.linalg.norm(basis_from, axis=1, keepdims=True).clip(1e-12)
    center = ref.mean(0)
    _, _, vt = np.linalg.svd(ref - center, full_matrices=False)
    basis = vt[:components]
    if basis.shape[0] < components:
        basis = np.vstack([basis, np.zeros((components - basis.shape[0], rows.shape[1]))])
    return (rows - center) @ basis.T


def collapse_from_ids(ids: torch.Tensor, k: int, codebook: np.ndarray | None = None) -> CollapseReport:
    hist = code_histogram(ids, k).numpy()
    pca = pca_project(codebook) if codebook is not None else np.zeros((k, 3))
    return CollapseReport(hist, code_usage(ids, k), float(hist.max() / hist.sum()), pca)


@torch.no_grad()
def collapse_report(model, frozen, data: ImageDataset, batch_size: int = 128, max_latents: int = 2048) -> CollapseReport:
    model.eval()
    dtype = next(model.parameters()).dtype
    ids, zs, accs = [], [], []
    for batch in data.batches(batch_size, shuffle=False, drop_last=False, dtype=dtype):
        y = frozen.features(batch.pixels) if model.needs_features() else None
        _, q = model.tokenize(batch.pixels, y)
        ids.append(q.ids)
        zs.append(q.z.reshape(-1, q.z.shape[-1]))
        logits = model.ar(q.ind, batch.labels)
        accs.append(ar_accuracy(logits, q.ids) * len(batch))
    ids_all = torch.cat(ids)
    codes = model.codebook.weight.detach().double().numpy()
    report = collapse_from_ids(ids_all, model.cfg.codebook_size, codes)
    z = torch.cat(zs)[:max_latents].double().numpy()
    report.latent_pca = pca_project(z, basis_from=codes)
    report.ar_accuracy = sum(accs) / len(data)
    return report

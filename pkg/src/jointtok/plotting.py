"""Static report figures. Every figure is written next to the data it shows."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def code_frequency(hist: np.ndarray, out_dir: str | Path, usage: float | None = None) -> Path:
    """Bar chart of code counts sorted by frequency, plus ``code_frequency.csv``."""
    out = Path(out_dir)
    _write_csv(out / "code_frequency.csv", ["code", "count"], enumerate(hist.tolist()))
    order = np.argsort(-hist, kind="stable")
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.bar(np.arange(len(hist)), hist[order], width=1.0, color="tab:blue")
    ax.set_xlabel("code rank")
    ax.set_ylabel("count")
    threshold = 0.05 / len(hist) * hist.sum()
    ax.axhline(threshold, color="tab:red", lw=0.8, ls="--", label="usage threshold")
    title = "code frequency" if usage is None else f"code frequency (usage {usage:.1%})"
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    path = out / "code_frequency.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def pca_scatter(codebook_pca: np.ndarray, latent_pca: np.ndarray | None, out_dir: str | Path,
                hist: np.ndarray | None = None) -> Path:
    """First two principal axes of the codebook, with encoder latents overlaid."""
    out = Path(out_dir)
    rows = [("code", i, *map(float, p)) for i, p in enumerate(codebook_pca)]
    if latent_pca is not None:
        rows += [("latent", i, *map(float, p)) for i, p in enumerate(latent_pca)]
    _write_csv(out / "pca.csv", ["kind", "index", "pc1", "pc2", "pc3"], rows)
    fig, ax = plt.subplots(figsize=(5, 5))
    if latent_pca is not None:
        ax.scatter(latent_pca[:, 0], latent_pca[:, 1], s=3, alpha=0.3, color="tab:gray", label="latents")
    used = hist > 0 if hist is not None else np.ones(len(codebook_pca), bool)
    ax.scatter(codebook_pca[used, 0], codebook_pca[used, 1], s=18, color="tab:orange", label="used codes")
    if (~used).any():
        ax.scatter(codebook_pca[~used, 0], codebook_pca[~used, 1], s=18, marker="x", color="tab:blue",
                   label="unused codes")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out / "pca.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(history: list[dict[str, float]], out_dir: str | Path,
                keys: Sequence[str] | None = None) -> Path:
    out = Path(out_dir)
    keys = keys or [k for k in ("total", "recon_l2", "ntp", "apr_l2", "entropy", "align_encoder",
                                "align_decoder", "gan") if history and k in history[0]]
    fig, axes = plt.subplots(len(keys), 1, figsize=(7, 1.8 * max(len(keys), 1)), sharex=True, squeeze=False)
    steps = [r["step"] for r in history]
    for ax, key in zip(axes[:, 0], keys):
        ax.plot(steps, [r.get(key, np.nan) for r in history], lw=0.8)
        ax.set_ylabel(key, fontsize=8)
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def image_grid(images: torch.Tensor, path: str | Path, nrow: int = 8) -> Path:
    """Save B×H×W×C images in [-1, 1] as one PNG grid with a 1px border."""
    imgs = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()
    b, h, w, c = imgs.shape
    ncol = min(nrow, b)
    nrows = -(-b // ncol)
    grid = np.zeros((nrows * (h + 1) + 1, ncol * (w + 1) + 1, c), dtype=np.uint8)
    for i in range(b):
        r, k = divmod(i, ncol)
        grid[1 + r * (h + 1) : 1 + r * (h + 1) + h, 1 + k * (w + 1) : 1 + k * (w + 1) + w] = imgs[i]
    path = Path(path)
    Image.fromarray(grid[..., 0] if c == 1 else grid).save(path)
    return path

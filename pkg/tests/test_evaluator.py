import math

import numpy as np
import pytest
import torch

from jointtok.evaluator import (
    FeatureExtractor,
    FeatureStatistics,
    collapse_from_ids,
    frechet_distance,
    frechet_from_images,
    pca_project,
    psnr,
    ssim,
)


def brute_psnr(x, y):
    n, total = 0, 0.0
    for a, b in zip(x.flatten().tolist(), y.flatten().tolist()):
        total += (a - b) ** 2
        n += 1
    mse = total / n
    return 100.0 if mse == 0 else min(10 * math.log10(4.0 / mse), 100.0)


def brute_ssim(x, y, win=7, data_range=2.0):
    """Loop-level SSIM: uniform window, population variance, valid positions only."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    b, h, w, c = x.shape
    vals = []
    for i in range(b):
        for ch in range(c):
            for r in range(h - win + 1):
                for s in range(w - win + 1):
                    pa = [float(x[i, r + u, s + v, ch]) for u in range(win) for v in range(win)]
                    pb = [float(y[i, r + u, s + v, ch]) for u in range(win) for v in range(win)]
                    m = len(pa)
                    ma, mb = sum(pa) / m, sum(pb) / m
                    va = sum((p - ma) ** 2 for p in pa) / m
                    vb = sum((p - mb) ** 2 for p in pb) / m
                    cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / m
                    vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


@pytest.mark.parametrize("seed", range(5))
def test_psnr_ssim_match_loops(seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 8, 8, 3, generator=gen, dtype=torch.float64) * 2 - 1
    y = (x + 0.2 * torch.randn(2, 8, 8, 3, generator=gen, dtype=torch.float64)).clamp(-1, 1)
    assert abs(psnr(x, y) - brute_psnr(x, y)) < 1e-6
    assert abs(ssim(x, y) - brute_ssim(x, y)) < 1e-6


def test_psnr_ssim_identity():
    x = torch.rand(1, 8, 8, 3) * 2 - 1
    assert psnr(x, x) == 100.0
    assert abs(ssim(x, x) - 1.0) < 1e-9
    assert psnr(torch.ones(1, 4, 4, 1), -torch.ones(1, 4, 4, 1)) == pytest.approx(0.0)


def stats(rows):
    return FeatureStatistics.from_features(rows)


def test_frechet_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(400, 6))
    b = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6)) + 1.5
    assert frechet_distance(stats(a), stats(a)) < 1e-8
    assert abs(frechet_distance(stats(a), stats(b)) - frechet_distance(stats(b), stats(a))) < 1e-8


def test_frechet_mean_shift():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(500, 4))
    shift = np.zeros(4)
    shift[2] = 1.0
    assert abs(frechet_distance(stats(a), stats(a + shift)) - 1.0) < 1e-8


def test_frechet_gaussian_closed_form():
    # diagonal covariances: (sqrt(s_a) - sqrt(s_b))^2 per axis
    a = FeatureStatistics(np.zeros(3), np.diag([1.0, 4.0, 9.0]), 100)
    b = FeatureStatistics(np.ones(3), np.diag([4.0, 4.0, 1.0]), 100)
    assert abs(frechet_distance(a, b) - (3 + 1 + 0 + 4)) < 1e-9


def test_frechet_singular_covariance_is_finite():
    rng = np.random.default_rng(2)
    low = rng.normal(size=(50, 2)) @ rng.normal(size=(2, 5))
    d, flag = frechet_distance(stats(low), stats(low + 0.1), return_flag=True)
    assert np.isfinite(d) and isinstance(flag, bool)


def test_frechet_needs_enough_samples():
    with pytest.raises(ValueError):
        stats(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        frechet_distance(stats(np.random.rand(10, 2)), stats(np.random.rand(10, 3)))


def test_extractor_frozen_and_deterministic():
    ext = FeatureExtractor()
    x = torch.rand(70, 16, 16, 3) * 2 - 1
    assert torch.equal(ext(x), FeatureExtractor()(x))
    assert all(not p.requires_grad for p in ext.parameters())
    assert frechet_from_images(ext, x, x) < 1e-8


def test_collapse_synthetic_cases():
    k = 64
    uniform = collapse_from_ids(torch.arange(k).repeat(10), k)
    assert uniform.usage == 1.0 and uniform.top1_share == pytest.approx(1 / k)
    single = collapse_from_ids(torch.zeros(640, dtype=torch.long), k)
    assert single.usage == pytest.approx(1 / k) and single.top1_share == 1.0
    # a code at 3% of the tokens clears the 5%/K threshold, one at 0.05% does not
    ids = torch.cat([torch.zeros(1999, dtype=torch.long), torch.ones(1, dtype=torch.long)])
    assert collapse_from_ids(ids, k).usage == pytest.approx(1 / k)
    assert collapse_from_ids(ids, k).histogram.tolist()[:2] == [1999, 1]


def test_pca_projection_shape():
    rows = np.random.default_rng(0).normal(size=(40, 8))
    out = pca_project(rows)
    assert out.shape == (40, 3)
    assert abs(out.mean(0)).max() < 1e-9

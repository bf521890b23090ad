import math

import pytest
import torch

from jointtok.generator import (
    ARConfig,
    ARTransformer,
    Guidance,
    ar_accuracy,
    guidance_combine,
    ntp_loss,
    sample,
    soft_embed,
)
from jointtok.objectives import class_dropout


def model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ARConfig(**{**dict(vocab_size=16, seq_len=8, num_classes=4, layers=2, hidden_dim=32, heads=4), **kw})
    return ARTransformer(cfg)


def onehot(ids, k):
    return torch.nn.functional.one_hot(ids, k).to(torch.float64)


def test_soft_embed_cases():
    embed = torch.randn(5, 3)
    assert torch.equal(soft_embed(torch.nn.functional.one_hot(torch.tensor(3), 5).float(), embed), embed[3])
    half = torch.tensor([0.5, 0.5])
    e2 = torch.randn(2, 3, dtype=torch.float64)
    assert torch.allclose(soft_embed(half.double(), e2), (e2[0] + e2[1]) / 2)
    ind = torch.rand(2, 5, requires_grad=True)
    soft_embed(ind, embed)[:, 1].sum().backward()
    assert torch.allclose(ind.grad, embed[:, 1].expand(2, 5))
    with pytest.raises(ValueError):
        soft_embed(torch.rand(2, 4), embed)


def test_teacher_forcing_shapes():
    m = model()
    ids = torch.randint(0, 16, (3, 8))
    pred = m.teacher_forcing(onehot(ids, 16).float(), torch.tensor([0, 1, 4]), torch.randn(16, 6))
    assert pred.logits.shape == (3, 8, 16)
    assert pred.pred_z_q.shape == (3, 8, 6)
    values = pred.ind_hat.detach()
    assert torch.equal(values, torch.nn.functional.one_hot(values.argmax(-1), 16).float())


def test_paper_scale_logit_shape():
    m = model(vocab_size=4096, seq_len=256, layers=1, hidden_dim=16, heads=2)
    ids = torch.randint(0, 4096, (1, 256))
    assert m(onehot(ids, 4096).float(), torch.tensor([0])).shape == (1, 256, 4096)


def test_label_range_checked():
    m = model()
    with pytest.raises(ValueError):
        m(onehot(torch.zeros(1, 8, dtype=torch.long), 16).float(), torch.tensor([5]))


def test_causality_finite_difference():
    m = model(1).double().eval()
    ind = torch.rand(1, 8, 16, dtype=torch.float64).softmax(-1)
    labels = torch.tensor([2])
    base = m(ind, labels)
    for t in range(8):
        bumped = ind.clone()
        bumped[0, t] += 1e-3 * torch.randn(16, dtype=torch.float64)
        diff = (m(bumped, labels) - base).abs().amax(-1)[0]
        # input token t feeds position t + 1 onwards
        assert torch.all(diff[: t + 1] == 0)
        if t < 7:
            assert torch.all(diff[t + 1 :] > 0)


def test_constant_when_weights_zeroed():
    m = model()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.head.bias.copy_(torch.arange(16.0))
    logits = m(onehot(torch.randint(0, 16, (2, 8)), 16).float(), torch.tensor([0, 3]))
    assert torch.equal(logits, torch.arange(16.0).expand(2, 8, 16))


def test_ntp_loss_cases():
    ids = torch.randint(0, 4096, (2, 5))
    perfect = torch.nn.functional.one_hot(ids, 4096).double() * 100
    assert float(ntp_loss(perfect, ids)) < 1e-6
    uniform = torch.zeros(2, 5, 4096, dtype=torch.float64)
    assert abs(float(ntp_loss(uniform, ids)) - math.log(4096)) < 1e-9
    assert round(math.log(4096), 4) == 8.3178


def test_ar_accuracy():
    ids = torch.randint(0, 64, (4, 16))
    assert ar_accuracy(torch.nn.functional.one_hot(ids, 64).float(), ids) == 1.0
    gen = torch.Generator().manual_seed(0)
    k = 4096
    ids = torch.randint(0, k, (200, 256), generator=gen)
    acc = ar_accuracy(torch.randn(200, 256, k // 8, generator=gen).repeat(1, 1, 8), ids)
    # 51200 draws at chance 1/4096: mean 12.5, std ~3.5
    assert acc * ids.numel() < 40


def test_guidance_combine():
    u, c = torch.randn(3, 7), torch.randn(3, 7)
    assert torch.equal(guidance_combine(u, c, 1.0), c)
    assert torch.equal(guidance_combine(u, c, 0.0), u)
    assert guidance_combine(torch.tensor([0.0, 1.0]), torch.tensor([2.0, 1.0]), 2.0).tolist() == [4.0, 1.0]


def test_guidance_parse():
    assert Guidance.parse("cfg:1.5") == Guidance("cfg", 1.5)
    assert Guidance.parse("none") == Guidance()
    with pytest.raises(ValueError):
        Guidance.parse("topk:3")


def test_greedy_deterministic():
    m = model(2).eval()
    labels = torch.tensor([0, 1, 2, 3])
    a = sample(m, labels, greedy=True)
    assert torch.equal(a, sample(m, labels, greedy=True, seed=99))


@pytest.mark.parametrize("guidance", [Guidance(), Guidance("cfg", 2.0)])
def test_cache_matches_recompute(guidance):
    m = model(3).eval()
    labels = torch.tensor([0, 1, 4])
    cached = sample(m, labels, greedy=True, guidance=guidance)
    full = sample(m, labels, greedy=True, guidance=guidance, use_cache=False)
    assert torch.equal(cached, full)


def test_stochastic_sampling_seeded():
    m = model(4).eval()
    labels = torch.tensor([0, 1])
    assert torch.equal(sample(m, labels, seed=5), sample(m, labels, seed=5))
    assert torch.equal(sample(m, labels, seed=5), sample(m, labels, seed=5, use_cache=False))


def test_cfg_scale_one_equals_conditional():
    m = model(5).eval()
    labels = torch.tensor([0, 1, 2])
    assert torch.equal(sample(m, labels, seed=3), sample(m, labels, seed=3, guidance=Guidance("cfg", 1.0)))


def test_autoguide_needs_aux_model():
    m = model(6).eval()
    with pytest.raises(ValueError):
        sample(m, torch.tensor([0]), guidance=Guidance("autoguide", 2.0))
    aux = model(7, layers=1).eval()
    ids = sample(m, torch.tensor([0, 1]), guidance=Guidance("autoguide", 2.0), aux_model=aux, greedy=True)
    assert ids.shape == (2, 8)


def test_class_dropout_extremes():
    labels = torch.randint(0, 4, (1000,))
    assert torch.equal(class_dropout(labels, 0.0, 4), labels)
    assert torch.all(class_dropout(labels, 1.0, 4) == 4)

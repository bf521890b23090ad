import pytest
import torch

from jointtok.config import load_config

# (criterion number, line) pairs filled in by test_acceptance
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Widths 32, L=8, K=32: the gradient-routing probe model."""
    return load_config(overrides=dict(
        image_size=16, patch_size=4, hidden_dim=32, heads=4, enc_layers=2, dec_layers=2,
        latent_dim=8, num_tokens=8, codebook_size=32, ar_layers=2, ar_hidden=32, ar_heads=4,
        provider_dim=16, batch_size=4, steps=10, train_size=32, val_size=16, log_every=0,
        lambda_gan=0.1, lr=1e-4,
    ))


def brute_mask(n: int, l: int, side: str) -> list[list[bool]]:
    """Enumerate the hybrid attention rule token by token."""
    if side == "encoder":
        kinds = [("patch", i) for i in range(n)] + [("query", i) for i in range(l)]
    else:
        kinds = [("query", i) for i in range(l)] + [("patch", i) for i in range(n)]
    rows = []
    for rk, ri in kinds:
        row = []
        for ck, ci in kinds:
            if side == "encoder":
                ok = ck == "patch" if rk == "patch" else (ck == "patch" or ci <= ri)
            else:
                ok = (ck == "query" and ci <= ri) if rk == "query" else True
            row.append(ok)
        rows.append(row)
    return rows

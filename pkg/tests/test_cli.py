import json

import pytest
import torch

from jointtok.cli import main

TINY = [
    "--image-size", "16", "--patch-size", "4", "--hidden-dim", "32", "--latent-dim", "8",
    "--num-tokens", "8", "--codebook-size", "32", "--ar-hidden", "32", "--provider-dim", "16",
    "--batch-size", "8", "--train-size", "64", "--val-size", "72", "--steps", "4",
    "--set", "log_every=0",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["--run-root", str(root), "--name", "t", "train", *TINY]) == 0
    return root, root / "t" / "checkpoint.pt"


def test_train_run_layout(trained):
    root, ckpt = trained
    run = root / "t"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["subcommand"] == "train" and manifest["seed"] == 0
    assert manifest["config"]["codebook_size"] == 32
    assert len(manifest["dataset_fingerprint"]) == 16 and manifest["finished"]
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2, 3]
    assert {"lr", "recon_l2", "ntp", "total"} <= set(json.loads(lines[0]))
    assert ckpt.exists() and (run / "loss_curves.png").exists() and (run / "config.yaml").exists()


def test_env_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("JOINTTOK_RUN_ROOT", str(tmp_path))
    assert main(["--name", "envrun", "train", *TINY, "--steps", "1"]) == 0
    assert (tmp_path / "envrun" / "manifest.json").exists()


def test_existing_run_refused(trained, capsys):
    root, _ = trained
    assert main(["--run-root", str(root), "--name", "t", "train", *TINY]) == 1
    assert "already" in capsys.readouterr().err


def test_sample_seeded(trained):
    root, ckpt = trained
    grids = []
    for name in ("s1", "s2"):
        args = ["--run-root", str(root), "--name", name, "sample", "--ckpt", str(ckpt), "--classes", "0,1,2",
                "--guidance", "cfg:1.0", "--seed", "7", "--per-class", "2"]
        assert main(args) == 0
        grids.append(torch.load(root / name / "samples.pt"))
        assert (root / name / "samples.png").exists()
    assert torch.equal(grids[0]["ids"], grids[1]["ids"])
    assert grids[0]["labels"].tolist() == [0, 0, 1, 1, 2, 2]


def test_diagnose_histogram_conserved(trained, capsys):
    root, ckpt = trained
    assert main(["--run-root", str(root), "--name", "d", "diagnose", "--ckpt", str(ckpt)]) == 0
    report = json.loads((root / "d" / "collapse_report.json").read_text())
    assert sum(report["histogram"]) == 8 * 72
    for name in ("code_frequency.png", "code_frequency.csv", "pca.png", "pca.csv"):
        assert (root / "d" / name).exists()
    out = capsys.readouterr().out
    assert any(line.startswith("usage\t") for line in out.splitlines())


def test_eval_reproducible(trained):
    root, ckpt = trained
    for name in ("e1", "e2"):
        assert main(["--run-root", str(root), "--name", name, "eval", "--ckpt", str(ckpt),
                     "--samples-per-class", "12"]) == 0
    a = json.loads((root / "e1" / "metrics.json").read_text())
    b = json.loads((root / "e2" / "metrics.json").read_text())
    assert a == b and {"psnr", "ssim", "gfid"} <= set(a)


def test_ordering_manifest(trained):
    root, ckpt = trained
    assert main(["--run-root", str(root), "--name", "o", "ordering", "--ckpt", str(ckpt), "--order", "reversed",
                 "--steps", "2", "--samples-per-class", "12"]) == 0
    manifest = json.loads((root / "o" / "manifest.json").read_text())
    assert manifest["ordering"] == "reversed"
    assert manifest["permutation"] == list(range(7, -1, -1))


def test_user_errors_exit_one(trained, tmp_path, capsys):
    root, ckpt = trained
    assert main(["--run-root", str(tmp_path), "sample", "--ckpt", str(tmp_path / "none.pt")]) == 1
    assert main(["--run-root", str(tmp_path), "sample", "--ckpt", str(ckpt), "--guidance", "autoguide:2"]) == 1
    assert "aux" in capsys.readouterr().err
    assert main(["--run-root", str(tmp_path), "train", "--set", "lambda_ntpp=0.1"]) == 1
    assert "lambda_ntp" in capsys.readouterr().err
    with pytest.raises(SystemExit) as err:
        main(["--run-root", str(tmp_path), "bogus"])
    assert err.value.code == 1


def test_locked_run_dir(tmp_path):
    from filelock import FileLock

    run = tmp_path / "busy"
    run.mkdir()
    with FileLock(str(run / ".lock")):
        assert main(["--run-root", str(tmp_path), "--name", "busy", "train", *TINY]) == 1

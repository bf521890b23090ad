"""Command line entry point: ``jointtok train|sample|eval|diagnose|ordering``.

Every invocation creates its own run directory under the run root (``--run-root``,
else ``$JOINTTOK_RUN_ROOT``, else ``./runs``) and writes ``manifest.json`` there
before doing any work. Results go to stdout as tab-separated ``key<TAB>value``
lines and to files in the run directory.

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from jointtok.alignment import AlignmentConfigError
from jointtok.config import ConfigError, TrainConfig, load_config, parse_overrides, save_config
from jointtok.data import DatasetError, ImageDataset, ingest_dataset
from jointtok.generator import Guidance
from jointtok.trainer import CheckpointError, TrainState, fit, init_state, load_checkpoint

log = logging.getLogger("jointtok")

RUN_ROOT_ENV = "JOINTTOK_RUN_ROOT"
USER_ERRORS = (ConfigError, CheckpointError, DatasetError, AlignmentConfigError, FileExistsError,
               FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def code_version() -> str:
    try:
        from importlib.metadata import version

        return version("jointtok")
    except Exception:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """A locked run directory holding exactly one manifest."""

    def __init__(self, root: Path, name: str, subcommand: str):
        self.path = root / name
        if (self.path / "manifest.json").exists():
            raise FileExistsError(f"run directory {self.path} already holds a run")
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path / ".lock"))
        self.subcommand = subcommand
        self.manifest: dict = {}

    def __enter__(self) -> RunDir:
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            raise UsageError(f"{self.path} is locked by another process") from None
        return self

    def __exit__(self, *exc) -> None:
        self.lock.release()

    def write_manifest(self, **fields) -> None:
        self.manifest.update(fields)
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, default=str))
        tmp.replace(self.path / "manifest.json")

    def start(self, cfg: TrainConfig, dataset: ImageDataset | None, **extra) -> None:
        self.write_manifest(
            subcommand=self.subcommand,
            config=cfg.to_dict(),
            seed=cfg.seed,
            code_version=code_version(),
            dataset_fingerprint=dataset.fingerprint() if dataset is not None else None,
            started=_now(),
            finished=None,
            **extra,
        )

    def finish(self, **extra) -> None:
        self.write_manifest(finished=_now(), **extra)


def emit(results: dict) -> None:
    for key, value in results.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}\t{value}")
    sys.stdout.flush()


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file layered over the preset")
    p.add_argument("--preset", help="desk, S, B, L or H")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    group = p.add_argument_group("config keys")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "preset":
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.name.upper(),
                           help=f"default {f.default!r}")


def config_from_args(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    overrides.update(parse_overrides(args.overrides))
    return load_config(args.config, overrides, args.preset)


def run_root(args) -> Path:
    return Path(args.run_root or os.environ.get(RUN_ROOT_ENV) or "runs")


def run_name(args, stem: str) -> str:
    return args.name or f"{stem}-{time.strftime('%Y%m%d-%H%M%S')}-{os.getpid()}"


def load_state(path: Path) -> TrainState:
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def resolve_guidance(text: str, state: TrainState, aux_ckpt: Path | None):
    guidance = Guidance.parse(text)
    aux = state.model.aux_ar
    if guidance.kind == "autoguide" and aux is None:
        if aux_ckpt is None:
            raise UsageError("autoguide guidance needs an auxiliary model: pass --aux-ckpt or train with autoguide")
        aux = load_state(aux_ckpt).ema_model().ar
    elif aux_ckpt is not None and guidance.kind != "autoguide":
        raise UsageError("--aux-ckpt only applies to autoguide guidance")
    return guidance, aux


def parse_classes(text: str, num_classes: int) -> torch.Tensor:
    try:
        labels = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--classes expects comma-separated integers, got {text!r}") from None
    bad = [c for c in labels if not 0 <= c < num_classes]
    if not labels or bad:
        raise UsageError(f"class ids must lie in [0, {num_classes}), got {text!r}")
    return torch.tensor(labels)


# subcommands


def cmd_train(args) -> dict:
    from jointtok import plotting

    if args.resume:
        state = load_state(args.resume)
        cfg = state.cfg
    else:
        cfg = config_from_args(args)
        state = None
    train, _ = ingest_dataset(cfg.dataset_spec())
    with RunDir(run_root(args), run_name(args, "train"), "train") as run:
        save_config(cfg, run.path / "config.yaml")
        run.start(cfg, train, resumed_from=str(args.resume) if args.resume else None)
        state = state or init_state(cfg)
        fit(state, train, run_dir=run.path, checkpoint_every=args.checkpoint_every)
        plotting.loss_curves(state.history, run.path)
        last = state.history[-1] if state.history else {}
        results = {"run_dir": str(run.path), "steps": state.step, **{k: v for k, v in last.items() if k != "step"}}
        run.finish(final=results)
    return results


def cmd_sample(args) -> dict:
    from jointtok import plotting
    from jointtok.evaluator import generate_images

    state = load_state(args.ckpt)
    model = state.ema_model()
    labels = parse_classes(args.classes, state.cfg.num_classes).repeat_interleave(args.per_class)
    guidance, aux = resolve_guidance(args.guidance, state, args.aux_ckpt)
    model.aux_ar = aux
    with RunDir(run_root(args), run_name(args, "sample"), "sample") as run:
        run.start(state.cfg, None, checkpoint=str(args.ckpt), guidance=args.guidance, classes=args.classes,
                  sample_seed=args.seed, temperature=args.temperature)
        ids, images = generate_images(model, labels, guidance, args.seed, args.temperature)
        grid = plotting.image_grid(images, run.path / "samples.png", nrow=args.per_class)
        torch.save({"ids": ids, "labels": labels}, run.path / "samples.pt")
        results = {"run_dir": str(run.path), "grid": str(grid), "samples": len(labels)}
        run.finish()
    return results


def cmd_eval(args) -> dict:
    from jointtok.evaluator import eval_generation, eval_reconstruction

    state = load_state(args.ckpt)
    model = state.ema_model()
    guidance, aux = resolve_guidance(args.guidance, state, args.aux_ckpt)
    model.aux_ar = aux
    _, val = ingest_dataset(state.cfg.dataset_spec())
    with RunDir(run_root(args), run_name(args, "eval"), "eval") as run:
        run.start(state.cfg, val, checkpoint=str(args.ckpt), suite=args.suite, guidance=args.guidance,
                  eval_seed=args.seed)
        results: dict = {}
        if args.suite in ("recon", "all"):
            results.update(eval_reconstruction(model, state.frozen, val))
        if args.suite in ("gen", "all"):
            results.update(eval_generation(model, val, args.samples_per_class, guidance, args.seed))
        (run.path / "metrics.json").write_text(json.dumps(results, indent=2))
        run.finish(metrics=results)
    return {"run_dir": str(run.path), **results}


def cmd_diagnose(args) -> dict:
    from jointtok import plotting
    from jointtok.evaluator import collapse_report

    state = load_state(args.ckpt)
    model = state.ema_model()
    _, val = ingest_dataset(state.cfg.dataset_spec())
    with RunDir(run_root(args), run_name(args, "diagnose"), "diagnose") as run:
        run.start(state.cfg, val, checkpoint=str(args.ckpt))
        report = collapse_report(model, state.frozen, val)
        plotting.code_frequency(report.histogram, run.path, report.usage)
        plotting.pca_scatter(report.codebook_pca, report.latent_pca, run.path, report.histogram)
        if state.history:
            plotting.loss_curves(state.history, run.path)
        summary = report.summary()
        (run.path / "collapse_report.json").write_text(json.dumps(
            {**summary, "histogram": report.histogram.tolist()}, indent=2))
        run.finish(summary=summary)
    return {"run_dir": str(run.path), **summary}


def cmd_ordering(args) -> dict:
    from jointtok.trainer import run_ordering_experiment

    state = load_state(args.ckpt)
    train, val = ingest_dataset(state.cfg.dataset_spec())
    with RunDir(run_root(args), run_name(args, f"ordering-{args.order}"), "ordering") as run:
        from jointtok.trainer import ordering_permutation

        perm = ordering_permutation(args.order, state.cfg.num_tokens, args.seed)
        run.start(state.cfg, train, checkpoint=str(args.ckpt), ordering=args.order,
                  permutation=perm.tolist(), ar_steps=args.steps, ordering_seed=args.seed)
        out = run_ordering_experiment(state, args.order, train, val, steps=args.steps, seed=args.seed,
                                      samples_per_class=args.samples_per_class)
        results = {"order": out["order"], "gen_distance": out["gen_distance"], "ar_accuracy": out["ar_accuracy"]}
        (run.path / "metrics.json").write_text(json.dumps(results, indent=2))
        run.finish(metrics=results)
    return {"run_dir": str(run.path), **results}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointtok", description=__doc__.splitlines()[0])
    parser.add_argument("--run-root", help=f"directory for run folders (default ${RUN_ROOT_ENV} or ./runs)")
    parser.add_argument("--name", help="run folder name (default: subcommand plus timestamp)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="joint tokenizer + AR training")
    add_config_flags(p)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint; its config wins")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in [("sample", cmd_sample, "decode a labeled sample grid"),
                                  ("eval", cmd_eval, "reconstruction and generation metrics")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--guidance", default="none", help="none, cfg:<s> or autoguide:<s>")
        p.add_argument("--aux-ckpt", type=Path, help="checkpoint whose AR model serves as the autoguide model")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        if name == "sample":
            p.add_argument("--classes", default="0,1,2,3,4,5,6,7")
            p.add_argument("--per-class", type=int, default=8)
            p.add_argument("--temperature", type=float, default=1.0)
        else:
            p.add_argument("--suite", choices=["recon", "gen", "all"], default="all")
            p.add_argument("--samples-per-class", type=int, default=32)

    p = sub.add_parser("diagnose", help="codebook collapse report and plots")
    p.add_argument("--ckpt", type=Path, required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ordering", help="fresh AR on permuted token order over a frozen tokenizer")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--order", choices=["original", "reversed", "random"], required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-class", type=int, default=32)
    p.set_defaults(func=cmd_ordering)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        emit(args.func(args))
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # bad flag values surface as ValueError from the library
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

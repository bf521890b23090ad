"""Single-stage joint training loop, checkpoints and the token-ordering harness."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from jointtok.alignment import decoder_alignment_loss, direct_alignment_loss, implicit_alignment_loss
from jointtok.config import TrainConfig, resolve
from jointtok.data import ImageBatch, ImageDataset
from jointtok.generator import ARTransformer, ar_accuracy, ntp_loss
from jointtok.model import FrozenModules, JointModel
from jointtok.objectives import (
    Discriminator,
    LeCamEMA,
    LossBundle,
    NonFiniteLossError,
    apr_terms,
    class_dropout,
    decode_joint,
    gan_step_losses,
    hinge_g_loss,
    nested_dropout_sample,
    total_loss,
)
from jointtok.quantizer import commitment_loss, entropy_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# fields whose change alters parameter shapes
ARCH_FIELDS = (
    "image_size", "channels", "num_classes", "patch_size", "hidden_dim", "heads", "enc_layers",
    "dec_layers", "latent_dim", "num_tokens", "codebook_size", "ar_layers", "ar_hidden", "ar_heads",
    "alignment_mode", "decoder_align", "provider_dim", "autoguide", "aux_layers",
)


class CheckpointError(RuntimeError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * step / total_steps))


@torch.no_grad()
def ema_update(shadow: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float) -> dict[str, torch.Tensor]:
    """In place ``shadow = decay * shadow + (1 - decay) * params``; returns ``shadow``."""
    if shadow.keys() != params.keys():
        missing = sorted(set(shadow) ^ set(params))
        raise KeyError(f"EMA tree mismatch on {missing[:5]}")
    for name, s in shadow.items():
        p = params[name]
        if s.shape != p.shape:
            raise KeyError(f"EMA tree mismatch: {name} has shape {tuple(s.shape)} vs {tuple(p.shape)}")
        s.mul_(decay).add_(p.detach(), alpha=1 - decay)
    return shadow


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: JointModel
    disc: Discriminator
    frozen: FrozenModules
    optimizers: dict[str, torch.optim.Optimizer]
    ema: dict[str, torch.Tensor]
    lecam: LeCamEMA
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def ema_model(self) -> JointModel:
        """A detached copy of the model carrying the EMA weights."""
        shadow = copy.deepcopy(self.model)
        shadow.load_state_dict({**shadow.state_dict(), **self.ema})
        shadow.eval()
        return shadow


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    model = JointModel(cfg).to(dtype)
    disc = Discriminator(cfg.channels, image_size=cfg.image_size).to(dtype)
    frozen = FrozenModules(cfg).to(dtype)
    groups = model.groups()
    betas = {"tokenizer": cfg.beta2_tokenizer, "ar": cfg.beta2_ar, "aux": cfg.beta2_ar}
    opts = {
        name: torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, betas[name]))
        for name, params in groups.items()
    }
    opts["disc"] = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=(cfg.beta1, 0.999))
    ema = {name: p.detach().clone() for name, p in model.named_parameters()}
    return TrainState(cfg, model, disc, frozen, opts, ema, LeCamEMA(cfg.lecam_ema_decay))


def gan_active(cfg: TrainConfig, step: int) -> bool:
    return cfg.lambda_gan > 0 and step >= int(cfg.gan_warmup * cfg.total_steps())


def compute_losses(state: TrainState, batch: ImageBatch, gen: torch.Generator | None = None,
                   use_gan: bool | None = None) -> tuple[LossBundle, dict[str, torch.Tensor]]:
    """Forward every objective term on one batch without touching optimizers."""
    cfg, model, frozen = state.cfg, state.model, state.frozen
    x = batch.pixels
    use_gan = gan_active(cfg, state.step) if use_gan is None else use_gan
    prefix = nested_dropout_sample(cfg.num_tokens, cfg.nested_dropout, gen)
    labels = class_dropout(batch.labels, cfg.class_dropout, cfg.num_classes, gen)

    y = frozen.features(x) if model.needs_features() else None
    enc, q = model.tokenize(x, y)
    ar_in = q.ind if cfg.ntp_backprop else q.ind.detach()
    use_apr = cfg.lambda_apr_l2 > 0 or cfg.lambda_apr_perc > 0
    pred = model.ar.teacher_forcing(ar_in, labels, model.codebook.weight if use_apr else None)
    x_rec, x_apr, h_dec = decode_joint(model.decoder, q.z_q, pred.pred_z_q, prefix)

    parts = {
        "recon_l2": torch.nn.functional.mse_loss(x_rec, x),
        "recon_perc": frozen.perceptual(x_rec, x),
        "commit": commitment_loss(q.z, q.z_q),
        "entropy": entropy_loss(q.p),
        "ntp": ntp_loss(pred.logits, q.ids),
    }
    if use_gan:
        state.disc.requires_grad_(False)
        parts["gan"] = hinge_g_loss(state.disc(x_rec))
        state.disc.requires_grad_(True)
    if use_apr:
        parts.update(apr_terms(x, x_apr, frozen.perceptual))
    if cfg.alignment_mode == "direct":
        parts["align_encoder"] = direct_alignment_loss(enc.z, y, model.enc_proj)
    elif cfg.alignment_mode == "implicit":
        parts["align_encoder"] = implicit_alignment_loss(enc.h_enc, y, model.enc_proj)
    if cfg.decoder_align:
        parts["align_decoder"] = decoder_alignment_loss(h_dec, y, model.dec_proj)

    bundle = total_loss(parts, cfg.loss_weights())
    bundle.extras.update(prefix_len=float(prefix), ar_acc=ar_accuracy(pred.logits, q.ids))
    aux = {"x_rec": x_rec, "ids": q.ids, "labels": labels, "ind": q.ind}
    return bundle, aux


def _clip(params: list[nn.Parameter], max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm)


def train_step(state: TrainState, batch: ImageBatch) -> LossBundle:
    """One joint update; deterministic given ``(cfg.seed, state.step)``."""
    cfg, model = state.cfg, state.model
    model.train()
    gen = step_generator(cfg.seed, state.step)
    use_gan = gan_active(cfg, state.step)
    bundle, aux = compute_losses(state, batch, gen, use_gan)

    loss = bundle.total
    if model.aux_ar is not None:
        aux_logits = model.aux_ar(aux["ind"].detach(), aux["labels"])
        aux_loss = ntp_loss(aux_logits, aux["ids"])
        if not torch.isfinite(aux_loss):
            raise NonFiniteLossError("aux_ntp", float(aux_loss))
        loss = loss + cfg.lambda_aux * aux_loss
        bundle.extras["aux_ntp"] = float(aux_loss)

    lr = cosine_lr(min(state.step, cfg.total_steps()), cfg.total_steps(), cfg.lr, cfg.lr_min)
    gen_opts = [o for name, o in state.optimizers.items() if name != "disc"]
    for opt in gen_opts:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for name, params in model.groups().items():
        _clip(params, cfg.grad_clip)
    for opt in gen_opts:
        for g in opt.param_groups:
            g["lr"] = lr
        opt.step()

    if use_gan:
        d_opt = state.optimizers["disc"]
        d_opt.zero_grad(set_to_none=True)
        d_loss, _, lecam = gan_step_losses(state.disc, batch.pixels, aux["x_rec"].detach(), state.lecam)
        d_total = d_loss + cfg.lambda_lecam * lecam
        if not torch.isfinite(d_total):
            raise NonFiniteLossError("disc", float(d_total))
        d_total.backward()
        d_opt.step()
        bundle.extras.update(d_loss=float(d_loss.detach()), lecam=float(lecam.detach()))

    ema_update(state.ema, dict(model.named_parameters()), cfg.ema_decay)
    bundle.extras["lr"] = lr
    state.step += 1
    return bundle


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "step": state.step,
        "model": state.model.state_dict(),
        "disc": state.disc.state_dict(),
        "ema": state.ema,
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "lecam": state.lecam.state_dict(),
        "history": state.history,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect: TrainConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`; ``expect`` pins architecture fields."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types on corrupt archives
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} != supported {CHECKPOINT_VERSION}",
            field="format_version",
        )
    cfg = resolve(payload["config"])
    if expect is not None:
        for name in ARCH_FIELDS:
            if getattr(expect, name) != getattr(cfg, name):
                raise CheckpointError(
                    f"checkpoint has {name}={getattr(cfg, name)!r}, expected {getattr(expect, name)!r}",
                    field=name,
                )
    state = init_state(cfg)
    state.model.load_state_dict(payload["model"])
    state.disc.load_state_dict(payload["disc"])
    state.ema = {k: v.clone() for k, v in payload["ema"].items()}
    for name, opt in state.optimizers.items():
        opt.load_state_dict(payload["optimizers"][name])
    state.lecam.load_state_dict(payload["lecam"])
    state.step = payload["step"]
    state.history = list(payload.get("history", []))
    return state


def fit(state: TrainState, train: ImageDataset, steps: int | None = None,
        run_dir: str | Path | None = None, checkpoint_every: int = 0) -> TrainState:
    """Run training until ``state.step`` reaches ``steps`` (default: the configured total)."""
    cfg = state.cfg
    end = steps if steps is not None else cfg.total_steps()
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics = (run_dir / "metrics.jsonl").open("a") if run_dir else None
    try:
        while state.step < end:
            batch = train.batch_at_step(state.step, cfg.batch_size, cfg.seed, cfg.torch_dtype)
            step = state.step
            try:
                bundle = train_step(state, batch)
            except NonFiniteLossError:
                if run_dir:
                    save_checkpoint(state, run_dir / "abort.pt")
                raise
            record = {"step": step, **bundle.record()}
            state.history.append(record)
            if metrics:
                metrics.write(json.dumps(record) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d total %.4f ntp %.3f", step, record["total"], record["ntp"])
            if run_dir and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, run_dir / "checkpoint.pt")
    finally:
        if metrics:
            metrics.close()
    if run_dir:
        save_checkpoint(state, run_dir / "checkpoint.pt")
    return state


@torch.no_grad()
def encode_corpus(model: JointModel, frozen: FrozenModules, data: ImageDataset,
                  batch_size: int = 128, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    model.eval()
    out = []
    for batch in data.batches(batch_size, shuffle=False, drop_last=False, dtype=dtype):
        y = frozen.features(batch.pixels) if model.needs_features() else None
        out.append(model.tokenize(batch.pixels, y)[1].ids)
    return torch.cat(out)


def ordering_permutation(order: str, length: int, seed: int = 0) -> torch.Tensor:
    """Position permutation applied to every sequence: ``original``, ``reversed`` or ``random``."""
    if order == "original":
        return torch.arange(length)
    if order == "reversed":
        return torch.arange(length).flip(0)
    if order == "random":
        return torch.randperm(length, generator=torch.Generator().manual_seed(seed))
    raise ValueError(f"order must be original, reversed or random, got {order!r}")


def train_ar_on_ids(cfg: TrainConfig, ids: torch.Tensor, labels: torch.Tensor, steps: int,
                    seed: int = 0, lr: float | None = None) -> ARTransformer:
    """Fresh AR model trained by plain next-token prediction on fixed id sequences."""
    torch.manual_seed(seed)
    ar = ARTransformer(cfg.ar_config()).to(cfg.torch_dtype)
    opt = torch.optim.Adam(ar.parameters(), lr=lr or cfg.lr, betas=(cfg.beta1, cfg.beta2_ar))
    k = cfg.codebook_size
    n = ids.shape[0]
    ar.train()
    for step in range(steps):
        gen = step_generator(seed, step)
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        lab = class_dropout(labels[idx], cfg.class_dropout, cfg.num_classes, gen)
        onehot = torch.nn.functional.one_hot(ids[idx], k).to(cfg.torch_dtype)
        loss = ntp_loss(ar(onehot, lab), ids[idx])
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, steps, lr or cfg.lr, cfg.lr_min)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip(list(ar.parameters()), cfg.grad_clip)
        opt.step()
    ar.eval()
    return ar


def run_ordering_experiment(checkpoint: str | Path | TrainState, order: str, train: ImageDataset,
                            val: ImageDataset, steps: int = 400, seed: int = 0,
                            samples_per_class: int = 32) -> dict:
    """Freeze a jointly trained tokenizer and fit a fresh AR model on permuted token order."""
    from jointtok.evaluator import FeatureExtractor, frechet_from_images

    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
    cfg = state.cfg
    model = state.ema_model()
    model.requires_grad_(False)
    dtype = cfg.torch_dtype
    perm = ordering_permutation(order, cfg.num_tokens, seed)
    train_ids = encode_corpus(model, state.frozen, train, dtype=dtype)
    val_ids = encode_corpus(model, state.frozen, val, dtype=dtype)
    ar = train_ar_on_ids(cfg, train_ids[:, perm], train.labels, steps, seed)

    with torch.no_grad():
        onehot = torch.nn.functional.one_hot(val_ids[:, perm], cfg.codebook_size).to(dtype)
        acc = ar_accuracy(ar(onehot, val.labels), val_ids[:, perm])
        from jointtok.generator import sample

        labels = torch.arange(cfg.num_classes).repeat_interleave(samples_per_class)
        sampled = sample(ar, labels, seed=seed)
        restored = torch.empty_like(sampled)
        restored[:, perm] = sampled
        images = torch.cat([model.decode_ids(chunk) for chunk in restored.split(128)])
    distance = frechet_from_images(FeatureExtractor(cfg.channels).to(dtype), images, val.pixels.to(dtype))
    return {
        "order": order,
        "permutation": perm.tolist(),
        "gen_distance": distance,
        "ar_accuracy": acc,
        "train_ids": train_ids,
    }

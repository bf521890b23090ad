"""Class-conditional causal transformer over 1D latent token sequences.

The token embedding is a matrix product with soft one-hot code indicators
rather than a lookup, so next-token-prediction gradients reach the tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from jointtok.quantizer import straight_through_onehot


@dataclass
class ARConfig:
    vocab_size: int = 64
    seq_len: int = 16
    num_classes: int = 8
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 8 / 3

    @property
    def null_class(self) -> int:
        return self.num_classes


@dataclass
class ARPrediction:
    logits: torch.Tensor
    ind_hat: torch.Tensor
    pred_z_q: torch.Tensor | None


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class KVCache:
    """Per-session key/value buffers for every layer."""

    def __init__(self, layers: int, batch: int, heads: int, max_len: int, head_dim: int, like: torch.Tensor):
        shape = (batch, heads, max_len, head_dim)
        self.k = [like.new_zeros(shape) for _ in range(layers)]
        self.v = [like.new_zeros(shape) for _ in range(layers)]
        self.length = 0


class CausalAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, cache: KVCache | None = None, layer: int = 0) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if cache is None:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            start = cache.length
            cache.k[layer][:, :, start : start + t] = k
            cache.v[layer][:, :, start : start + t] = v
            k_all = cache.k[layer][:, :, : start + t]
            v_all = cache.v[layer][:, :, : start + t]
            mask = torch.ones(t, start + t, dtype=torch.bool, device=x.device).tril(diagonal=start)
            out = F.scaled_dot_product_attention(q, k_all, v_all, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(dim, hidden, bias=False)
        self.w_up = nn.Linear(dim, hidden, bias=False)
        self.w_down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class ARBlock(nn.Module):
    """RMSNorm/SwiGLU block modulated by a shared AdaLN signal plus its own bias."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = CausalAttention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.mlp = SwiGLU(dim, int(dim * mlp_ratio))
        # shift/scale/gate for attention and MLP; gates start at one
        bias = torch.zeros(6, dim)
        bias[2] = 1.0
        bias[5] = 1.0
        self.mod_bias = nn.Parameter(bias)

    def forward(self, x: torch.Tensor, mod: torch.Tensor, cache: KVCache | None, layer: int) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod + self.mod_bias).unsqueeze(2).unbind(1)
        h = self.norm1(x) * (1 + scale1) + shift1
        x = x + gate1 * self.attn(h, cache, layer)
        h = self.norm2(x) * (1 + scale2) + shift2
        return x + gate2 * self.mlp(h)


def soft_embed(ind: torch.Tensor, embed: torch.Tensor) -> torch.Tensor:
    """``Ind @ Embed`` per token; identical to a row lookup when ``ind`` is one-hot."""
    if ind.shape[-1] != embed.shape[0]:
        raise ValueError(f"indicator width {ind.shape[-1]} != vocab size {embed.shape[0]}")
    return ind @ embed


class ARTransformer(nn.Module):
    def __init__(self, cfg: ARConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        if d % cfg.heads:
            raise ValueError(f"hidden dim {d} not divisible by {cfg.heads} heads")
        self.tok_embed = nn.Parameter(torch.randn(cfg.vocab_size, d) * 0.02)
        # one extra row for the null (unconditional) class
        self.class_embed = nn.Embedding(cfg.num_classes + 1, d)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(cfg.seq_len, d) * 0.02)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)
        self.blocks = nn.ModuleList(ARBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = RMSNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)

    def check_labels(self, labels: torch.Tensor) -> None:
        if bool(((labels < 0) | (labels > self.cfg.num_classes)).any()):
            raise ValueError(f"labels must lie in [0, {self.cfg.num_classes}]")

    def _run(self, x: torch.Tensor, labels: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        mod = self.ada(self.class_embed(labels)).reshape(-1, 6, self.cfg.hidden_dim)
        for i, blk in enumerate(self.blocks):
            x = blk(x, mod, cache, i)
        if cache is not None:
            cache.length += x.shape[1]
        return self.head(self.norm(x))

    def input_sequence(self, ind: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        start = self.class_embed(labels).unsqueeze(1)
        tokens = soft_embed(ind[:, :-1], self.tok_embed)
        x = torch.cat([start, tokens], dim=1)
        return x + self.pos[: x.shape[1]]

    def forward(self, ind: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Teacher-forcing logits: position ``t`` sees the class and tokens ``< t``."""
        self.check_labels(labels)
        return self._run(self.input_sequence(ind, labels), labels)

    def teacher_forcing(
        self, ind: torch.Tensor, labels: torch.Tensor, codebook: torch.Tensor | None = None
    ) -> ARPrediction:
        logits = self(ind, labels)
        ind_hat, _ = straight_through_onehot(logits.softmax(-1))
        pred = ind_hat @ codebook if codebook is not None else None
        return ARPrediction(logits=logits, ind_hat=ind_hat, pred_z_q=pred)

    def new_cache(self, batch: int, max_len: int | None = None) -> KVCache:
        cfg = self.cfg
        return KVCache(
            cfg.layers, batch, cfg.heads, max_len or cfg.seq_len, cfg.hidden_dim // cfg.heads, self.pos
        )

    def step(self, ids: torch.Tensor | None, labels: torch.Tensor, cache: KVCache) -> torch.Tensor:
        """Feed one new position through the cache and return its B×K logits.

        ``ids=None`` feeds the class start token.
        """
        t = cache.length
        if ids is None:
            x = self.class_embed(labels).unsqueeze(1)
        else:
            x = F.embedding(ids, self.tok_embed).unsqueeze(1)
        x = x + self.pos[t : t + 1]
        return self._run(x, labels, cache)[:, -1]

    def full_logits(self, ids: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Logits for the position following ``ids`` by recomputing the whole prefix."""
        start = self.class_embed(labels).unsqueeze(1)
        x = torch.cat([start, F.embedding(ids, self.tok_embed)], dim=1)
        x = x + self.pos[: x.shape[1]]
        return self._run(x, labels)[:, -1]


def ntp_loss(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids.reshape(-1))


@torch.no_grad()
def ar_accuracy(logits: torch.Tensor, ids: torch.Tensor) -> float:
    """Top-1 teacher-forcing accuracy over every position."""
    return float((logits.argmax(-1) == ids).double().mean())


def guidance_combine(ell_u: torch.Tensor, ell_c: torch.Tensor, s: float) -> torch.Tensor:
    """``ell_u + s * (ell_c - ell_u)``, arranged so ``s=0`` and ``s=1`` are exact."""
    return s * ell_c + (1 - s) * ell_u


@dataclass
class Guidance:
    kind: str = "none"
    scale: float = 1.0

    @classmethod
    def parse(cls, text: str) -> Guidance:
        """Parse ``none``, ``cfg:<s>`` or ``autoguide:<s>``."""
        if text in ("", "none"):
            return cls()
        kind, _, value = text.partition(":")
        if kind not in ("cfg", "autoguide") or not value:
            raise ValueError(f"guidance must be none, cfg:<s> or autoguide:<s>, got {text!r}")
        return cls(kind, float(value))


@torch.no_grad()
def sample(
    model: ARTransformer,
    labels: torch.Tensor,
    length: int | None = None,
    temperature: float = 1.0,
    guidance: Guidance | None = None,
    seed: int = 0,
    greedy: bool = False,
    use_cache: bool = True,
    aux_model: ARTransformer | None = None,
) -> torch.Tensor:
    """Left-to-right sampling of B×L code ids from ``softmax(ell_g / temperature)``.

    cfg takes the unconditional logits from the null class; autoguide takes them
    from ``aux_model`` conditioned on the same labels.
    """
    guidance = guidance or Guidance()
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if guidance.kind == "autoguide" and aux_model is None:
        raise ValueError("autoguide requested without an auxiliary model")
    model.check_labels(labels)
    length = length or model.cfg.seq_len
    gen = torch.Generator(device=labels.device).manual_seed(seed)
    b = labels.shape[0]
    null = torch.full_like(labels, model.cfg.null_class)

    if guidance.kind == "none":
        streams = [(model, labels)]
    elif guidance.kind == "cfg":
        streams = [(model, labels), (model, null)]
    else:
        streams = [(model, labels), (aux_model, labels)]
    caches = [m.new_cache(b, length) for m, _ in streams] if use_cache else None

    ids = labels.new_zeros(b, 0)
    for t in range(length):
        outs = []
        for j, (m, lab) in enumerate(streams):
            if use_cache:
                prev = None if t == 0 else ids[:, -1]
                outs.append(m.step(prev, lab, caches[j]))
            else:
                outs.append(m.full_logits(ids, lab))
        logits = outs[0] if len(outs) == 1 else guidance_combine(outs[1], outs[0], guidance.scale)
        if greedy:
            nxt = logits.argmax(-1)
        else:
            probs = (logits.double() / temperature).softmax(-1)
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
        ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
    return ids

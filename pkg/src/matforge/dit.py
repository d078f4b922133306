"""Diffusion transformer over the (z_rgb, z_pbr) latent pair.

Velocity convention: ``x_t = (1 - t) x0 + t x1`` with ``x1`` Gaussian noise,
and the network regresses ``v = x0 - x1``.  Sampling therefore starts from
noise at ``t = 1`` and steps ``x <- x + dt * v`` down to ``t = 0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .procgen import MAX_CAPTION_TOKENS, VOCAB, tokenize
from .tensor import attention


class TaskKind(str, enum.Enum):
    TEXT2MAT = "text2mat"
    IMG2MAT = "img2mat"
    DECOMPOSE = "decompose"


class SamplerError(RuntimeError):
    pass


class LoraStateError(RuntimeError):
    pass


@dataclass
class DitConfig:
    latent_channels: int = 4
    latent_size: int = 4
    patch: int = 1
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = len(VOCAB)
    max_text_tokens: int = MAX_CAPTION_TOKENS
    seed: int = 0

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_size // self.patch) ** 2


@dataclass
class ConditioningSignal:
    """Batch of conditions: text token ids ``[B, L]``, a latent ``[B, Cz, h, w]`` or none."""

    kind: str
    tokens: torch.Tensor | None = None
    latent: torch.Tensor | None = None
    batch: int = 1

    @classmethod
    def text(cls, captions: list[str] | str) -> "ConditioningSignal":
        if isinstance(captions, str):
            captions = [captions]
        ids = torch.zeros(len(captions), MAX_CAPTION_TOKENS, dtype=torch.long)
        for i, c in enumerate(captions):
            tok = tokenize(c)
            ids[i, : len(tok)] = torch.tensor(tok)
        return cls("text", tokens=ids, batch=len(captions))

    @classmethod
    def from_latent(cls, z: torch.Tensor) -> "ConditioningSignal":
        z = z if z.ndim == 4 else z[None]
        return cls("latent", latent=z, batch=z.shape[0])

    @classmethod
    def none(cls, batch: int = 1) -> "ConditioningSignal":
        return cls("none", batch=batch)

    def index(self, idx) -> "ConditioningSignal":
        idx = torch.as_tensor(idx)
        n = int(idx.numel())
        return ConditioningSignal(
            self.kind,
            None if self.tokens is None else self.tokens[idx],
            None if self.latent is None else self.latent[idx],
            n,
        )


@dataclass
class SupervisionMask:
    rgb: bool = True
    pbr: bool = True

    def __post_init__(self):
        if not (self.rgb or self.pbr):
            raise ValueError("at least one latent frame must be supervised")

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor([self.rgb, self.pbr])


# ---------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    """``W x + b + scale * B (A x)`` around a frozen base layer; ``B`` starts at zero."""

    def __init__(self, base: nn.Linear, rank: int = 4, scale: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.base.requires_grad_(False)
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.randn(rank, base.in_features, generator=generator) / math.sqrt(base.in_features))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank))
        self.merged = False

    def forward(self, x):
        out = self.base(x)
        if self.merged:
            return out
        return out + self.scale * F.linear(F.linear(x, self.A), self.B)

    @torch.no_grad()
    def merge(self) -> nn.Linear:
        if self.merged:
            raise LoraStateError("adapter already merged")
        self.base.weight += self.scale * (self.B @ self.A)
        self.merged = True
        return self.base


def lora_targets(model: nn.Module) -> list[str]:
    """Names of the layers LoRA may adapt: attention projections and FFN linears."""
    out = []
    for name, mod in model.named_modules():
        leaf = name.rsplit(".", 1)[-1]
        parent = name.rsplit(".", 2)[-2] if name.count(".") >= 1 else ""
        if isinstance(mod, nn.Linear) and (
            (parent in ("attn", "cross") and leaf in ("q", "k", "v", "o")) or (parent == "ffn" and leaf in ("fc1", "fc2"))
        ):
            out.append(name)
    return out


def attach_lora(model: nn.Module, targets: list[str] | None = None, rank: int = 4, scale: float = 1.0,
                seed: int = 0, trainable: tuple[str, ...] = ()) -> nn.Module:
    """Wrap target linears in :class:`LoraLinear`; freeze every other parameter.

    Parameters whose names start with an entry of ``trainable`` stay trainable.
    """
    allowed = lora_targets(model)
    targets = allowed if targets is None else list(targets)
    bad = [t for t in targets if t not in allowed]
    if bad:
        raise KeyError(f"not LoRA-adaptable layers: {bad}")
    for name, p in model.named_parameters():
        p.requires_grad_(any(name.startswith(t) for t in trainable))
    g = torch.Generator().manual_seed(seed)
    for name in targets:
        parent_name, _, leaf = name.rpartition(".")
        parent = model.get_submodule(parent_name)
        setattr(parent, leaf, LoraLinear(getattr(parent, leaf), rank, scale, g))
    return model


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and drop the wrappers."""
    adapters = [(n, m) for n, m in model.named_modules() if isinstance(m, LoraLinear)]
    if not adapters:
        raise LoraStateError("model has no LoRA adapters to merge")
    for name, mod in adapters:
        parent_name, _, leaf = name.rpartition(".")
        setattr(model.get_submodule(parent_name), leaf, mod.merge())
    return model


def lora_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}


# ---------------------------------------------------------------------------
# transformer


def timestep_embedding(t: torch.Tensor, dim: int = 128, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out = attention(q, k, v, mask).transpose(1, 2).reshape(x.shape)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width * ratio)
        self.fc2 = nn.Linear(width * ratio, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DitBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(width, heads)
        self.norm_cross = nn.LayerNorm(width, eps=1e-6)
        self.cross = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ffn = FeedForward(width, mlp_ratio)
        self.modulation = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, temb, context, context_mask):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(F.silu(temb)).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(_modulate(self.norm1(x), sh1, sc1))
        x = x + self.cross(self.norm_cross(x), context, context_mask)
        return x + g2[:, None] * self.ffn(_modulate(self.norm2(x), sh2, sc2))


class DiT(nn.Module):
    """Velocity network ``v(x_t, t, c)`` for latents ``[B, 2, Cz, h, w]``."""

    def __init__(self, cfg: DitConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DitConfig()
        torch.manual_seed(cfg.seed)
        p, cz, w = cfg.patch, cfg.latent_channels, cfg.width
        n = cfg.tokens_per_frame
        self.embed_rgb = nn.Linear(cz * p * p, w)
        self.embed_pbr = nn.Linear(cz * p * p, w)
        self.pos = nn.Parameter(torch.randn(n, w) * 0.02)
        self.frame = nn.Parameter(torch.randn(2, w) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(128, w), nn.SiLU(), nn.Linear(w, w))
        self.text_embed = nn.Embedding(cfg.vocab_size, w)
        self.text_pos = nn.Parameter(torch.randn(cfg.max_text_tokens, w) * 0.02)
        self.latent_embed = nn.Linear(cz * p * p, w)
        self.latent_pos = nn.Parameter(torch.randn(n, w) * 0.02)
        self.null_token = nn.Parameter(torch.randn(1, w) * 0.02)
        self.blocks = nn.ModuleList(DitBlock(w, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.mod_out = nn.Linear(w, 2 * w)
        self.head = nn.Linear(w, cz * p * p)
        nn.init.zeros_(self.mod_out.weight)
        nn.init.zeros_(self.mod_out.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # per-frame, per-channel latent normalisation fitted on the training corpus
        self.register_buffer("latent_mean", torch.zeros(2, cz))
        self.register_buffer("latent_std", torch.ones(2, cz))

    # token layout -------------------------------------------------------

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, Cz, h, w]`` -> ``[B, (h/p)(w/p), Cz p^2]``."""
        b, c, h, w = z.shape
        p = self.cfg.patch
        z = z.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return z.reshape(b, (h // p) * (w // p), c * p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        p, c = self.cfg.patch, self.cfg.latent_channels
        g = self.cfg.latent_size // p
        z = tokens.view(b, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return z.reshape(b, c, g * p, g * p)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.latent_mean[:, :, None, None]) / self.latent_std[:, :, None, None]

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.latent_std[:, :, None, None] + self.latent_mean[:, :, None, None]

    def context(self, cond: ConditioningSignal):
        if cond.kind == "text":
            ids = cond.tokens
            ctx = self.text_embed(ids) + self.text_pos[: ids.shape[1]]
            mask = ids != 0
            mask[:, 0] = True
            return ctx, mask
        if cond.kind == "latent":
            z = (cond.latent - self.latent_mean[0, :, None, None]) / self.latent_std[0, :, None, None]
            return self.latent_embed(self.patchify(z)) + self.latent_pos, None
        if cond.kind == "none":
            return self.null_token.expand(cond.batch, 1, -1), None
        raise ValueError(f"unknown conditioning kind {cond.kind!r}")

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: ConditioningSignal) -> torch.Tensor:
        """``x``: normalised latents ``[B, 2, Cz, h, w]``; ``t``: ``[B]`` in [0, 1]."""
        b = x.shape[0]
        if x.ndim != 5 or x.shape[1] != 2:
            raise ValueError(f"expected latents [B, 2, Cz, h, w], got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        n = self.cfg.tokens_per_frame
        tok = torch.cat([
            self.embed_rgb(self.patchify(x[:, 0])) + self.frame[0],
            self.embed_pbr(self.patchify(x[:, 1])) + self.frame[1],
        ], dim=1) + self.pos.repeat(2, 1)
        temb = self.t_mlp(timestep_embedding(t))
        ctx, ctx_mask = self.context(cond)
        for block in self.blocks:
            tok = block(tok, temb, ctx, ctx_mask)
        shift, scale = self.mod_out(F.silu(temb)).chunk(2, dim=-1)
        out = self.head(_modulate(self.norm_out(tok), shift, scale))
        return torch.stack([self.unpatchify(out[:, :n]), self.unpatchify(out[:, n:])], dim=1)


# ---------------------------------------------------------------------------
# rectified flow


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(-1, *([1] * (like.ndim - 1))) if t.ndim else t


def rf_interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    tt = torch.as_tensor(t, dtype=x0.dtype)
    if (tt < 0).any() or (tt > 1).any():
        raise ValueError("t must lie in [0, 1]")
    tt = _bcast(tt, x0)
    return (1 - tt) * x0 + tt * x1


def rf_objective(model, x_t: torch.Tensor, t: torch.Tensor, target: torch.Tensor,
                 cond: ConditioningSignal, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared velocity error over supervised latent frames.

    ``mask`` is boolean ``[2]`` or ``[B, 2]`` (rgb, pbr).  Unsupervised frames
    are replaced by exact zeros before the reduction, so their targets cannot
    influence the loss or its gradients.
    """
    v = model(x_t, t, cond)
    if not torch.isfinite(v).all():
        raise FloatingPointError("velocity network returned non-finite values")
    m = mask.to(torch.bool)
    if m.ndim == 1:
        m = m[None].expand(x_t.shape[0], 2)
    m5 = m[:, :, None, None, None].expand_as(v)
    err = torch.where(m5, (v - target) ** 2, torch.zeros((), dtype=v.dtype))
    return err.sum() / (m.sum() * v[0, 0].numel())


def rf_loss(model, x0: torch.Tensor, cond: ConditioningSignal, mask, generator: torch.Generator | None = None,
            clamp_rgb: bool = False, x1: torch.Tensor | None = None, t: torch.Tensor | None = None) -> torch.Tensor:
    """Rectified-flow loss with ``t ~ U(0, 1)`` and ``x1 ~ N(0, I)``.

    ``clamp_rgb`` keeps the RGB latent frame clean in ``x_t`` (decomposition).
    """
    b = x0.shape[0]
    if t is None:
        t = torch.rand(b, generator=generator, dtype=x0.dtype)
    if x1 is None:
        x1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = rf_interpolate(x0, x1, t)
    if clamp_rgb:
        x_t = torch.cat([x0[:, :1], x_t[:, 1:]], dim=1)
    if isinstance(mask, SupervisionMask):
        mask = mask.as_tensor()
    return rf_objective(model, x_t, t, x0 - x1, cond, mask)


@torch.no_grad()
def sample(model, task: TaskKind | str, cond: ConditioningSignal, steps: int = 50, seed: int = 0,
           shape: tuple[int, ...] | None = None, clamp_latent: torch.Tensor | None = None,
           return_path: bool = False):
    """Euler integration of the learned flow from noise (t=1) to data (t=0).

    Works in the model's normalised latent space.  For decomposition,
    ``clamp_latent`` (normalised ``[B, Cz, h, w]``) overwrites the RGB frame
    before every velocity evaluation and at the end; only the PBR frame is
    integrated.  Returns the final ``[B, 2, Cz, h, w]`` state.
    """
    task = TaskKind(task)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if shape is None:
        c = model.cfg
        shape = (cond.batch, 2, c.latent_channels, c.latent_size, c.latent_size)
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=g)
    if task is TaskKind.DECOMPOSE and clamp_latent is None:
        raise ValueError("decomposition needs the encoded RGB latent to clamp")
    dtype = x.dtype
    # the state accumulates in float64 so long step counts do not drift
    x = x.double()
    dt = 1.0 / steps
    path = [x.to(dtype)]
    for i in range(steps):
        t = 1.0 - i * dt
        if clamp_latent is not None:
            x[:, 0] = clamp_latent
        v = model(x.to(dtype), torch.full((shape[0],), t, dtype=dtype), cond).double()
        if clamp_latent is not None:
            v[:, 0] = 0
        x = x + dt * v
        if not torch.isfinite(x).all():
            raise SamplerError(f"non-finite sampler state at step {i}")
        if return_path:
            path.append(x.to(dtype))
    if clamp_latent is not None:
        x[:, 0] = clamp_latent
    x = x.to(dtype)
    return (x, path) if return_path else x


def fit_latent_stats(model: DiT, latents: torch.Tensor, mask: torch.Tensor | None = None) -> None:
    """Set the per-frame, per-channel normalisation from ``[N, 2, Cz, h, w]`` latents.

    ``mask`` ``[N, 2]`` marks which frames hold real data.
    """
    mean = torch.zeros(2, latents.shape[2])
    std = torch.ones(2, latents.shape[2])
    for f in range(2):
        sel = latents[:, f] if mask is None else latents[mask[:, f], f]
        if len(sel) == 0:
            continue
        x = sel.transpose(0, 1).reshape(latents.shape[2], -1).double()
        mean[f] = x.mean(1).float()
        std[f] = x.std(1).clamp_min(1e-4).float() if x.shape[1] > 1 else 1.0
    model.latent_mean.copy_(mean)
    model.latent_std.copy_(std)

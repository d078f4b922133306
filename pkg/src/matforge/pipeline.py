"""Task data assembly, DiT training loops and the three inference tasks."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import procgen
from .dit import (
    DiT,
    ConditioningSignal,
    TaskKind,
    attach_lora,
    fit_latent_stats,
    rf_loss,
    sample,
)
from .procgen import DatasetManifest, SampleRecord
from .render import MaterialMaps
from .tensor import AdamW, backward
from .vae import DivergenceError, JointVAE, maps_from_frames, pack_sequence

log = logging.getLogger(__name__)


@dataclass
class DitTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.0
    warmup: int = 100
    seed: int = 0


@dataclass
class TaskData:
    """Training tensors for one task.

    ``x0``: ``[N, 2, Cz, h, w]`` raw latents; ``mask``: ``[N, 2]`` supervised
    frames; ``cond``: matching conditioning batch.
    """

    task: TaskKind
    x0: torch.Tensor
    mask: torch.Tensor
    cond: ConditioningSignal

    def __len__(self):
        return len(self.x0)


# ---------------------------------------------------------------------------
# corpus -> tensors


def record_frames(manifest: DatasetManifest, rec: SampleRecord) -> torch.Tensor:
    return pack_sequence(procgen.load_maps(manifest, rec), procgen.load_rgb(manifest, rec)).frames


def rgb_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)


def load_frames(manifest: DatasetManifest, records: list[SampleRecord]) -> torch.Tensor:
    return torch.stack([record_frames(manifest, r) for r in records])


def planar_paired(manifest: DatasetManifest) -> list[SampleRecord]:
    return [r for r in manifest.records if r.kind == "paired" and r.provenance.get("view") == "planar"]


@torch.no_grad()
def encode_frames(vae: JointVAE, frames: torch.Tensor, batch: int = 16) -> torch.Tensor:
    out = []
    for s in range(0, len(frames), batch):
        lat = vae.encode(frames[s : s + batch])
        out.append(lat.stacked())
    return torch.cat(out)


@torch.no_grad()
def encode_rgb_images(vae: JointVAE, images: torch.Tensor, batch: int = 32) -> torch.Tensor:
    return torch.cat([vae.encode_rgb(images[s : s + batch]) for s in range(0, len(images), batch)])


def text2mat_data(vae: JointVAE, corpus: DatasetManifest, seed: int = 0) -> TaskData:
    """Planar paired records supervise both latents; RGB-only records only the RGB one.

    RGB-only samples get standard-normal PBR latents so every record has the
    same token layout.
    """
    recs = [r for r in corpus.records if r.provenance.get("view") == "planar"]
    paired = [r for r in recs if r.kind == "paired"]
    rgb_only = [r for r in recs if r.kind == "rgb_only"]
    x0_parts, mask_parts, captions = [], [], []
    if paired:
        x0_parts.append(encode_frames(vae, load_frames(corpus, paired)))
        mask_parts.append(torch.ones(len(paired), 2, dtype=torch.bool))
        captions += [r.caption for r in paired]
    if rgb_only:
        imgs = torch.stack([rgb_tensor(procgen.load_rgb(corpus, r)) for r in rgb_only])
        z_rgb = encode_rgb_images(vae, imgs)
        g = torch.Generator().manual_seed(seed)
        z_pbr = torch.randn(z_rgb.shape, generator=g)
        x0_parts.append(torch.stack([z_rgb, z_pbr], dim=1))
        mask_parts.append(torch.tensor([[True, False]]).expand(len(rgb_only), 2))
        captions += [r.caption for r in rgb_only]
    if not captions:
        raise ValueError("corpus has no planar records")
    return TaskData(TaskKind.TEXT2MAT, torch.cat(x0_parts), torch.cat(mask_parts), ConditioningSignal.text(captions))


def img2mat_data(vae: JointVAE, paired: DatasetManifest) -> TaskData:
    """Distorted renders condition generation of the same material's planar latents."""
    planar = {(r.provenance["material"], r.provenance["light"]): r for r in planar_paired(paired)}
    distorted = [r for r in paired.records if r.kind == "paired" and r.provenance.get("view") == "distorted"]
    pairs = [(d, planar[(d.provenance["material"], d.provenance["light"])]) for d in distorted
             if (d.provenance["material"], d.provenance["light"]) in planar]
    if not pairs:
        raise ValueError("no distorted records with a matching planar render")
    photos = torch.stack([rgb_tensor(procgen.load_rgb(paired, d)) for d, _ in pairs])
    cond = encode_rgb_images(vae, photos)
    x0 = encode_frames(vae, load_frames(paired, [p for _, p in pairs]))
    return TaskData(TaskKind.IMG2MAT, x0, torch.ones(len(pairs), 2, dtype=torch.bool), ConditioningSignal.from_latent(cond))


def decompose_data(vae: JointVAE, paired: DatasetManifest) -> TaskData:
    """Planar renders: the clean RGB latent is both condition and clamped frame."""
    recs = planar_paired(paired)
    if not recs:
        raise ValueError("no planar paired records")
    x0 = encode_frames(vae, load_frames(paired, recs))
    mask = torch.tensor([[False, True]]).expand(len(recs), 2)
    return TaskData(TaskKind.DECOMPOSE, x0, mask, ConditioningSignal.from_latent(x0[:, 0]))


# ---------------------------------------------------------------------------
# training


def _lr_at(cfg: DitTrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * frac))


def train_dit(model: DiT, data: TaskData, cfg: DitTrainConfig | None = None, fit_stats: bool = True,
              on_step=None) -> list[float]:
    """Optimise the rectified-flow loss on ``data``; returns per-step losses.

    ``fit_stats`` refits the latent normalisation first (base training only;
    adapter fine-tunes keep the base model's statistics).
    """
    cfg = cfg or DitTrainConfig()
    if fit_stats:
        fit_latent_stats(model, data.x0, data.mask)
    x0 = model.normalize(data.x0)
    opt = AdamW(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    clamp = data.task is TaskKind.DECOMPOSE
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size))
        loss = rf_loss(model, x0[idx], data.cond.index(idx), data.mask[idx], generator=g, clamp_rgb=clamp)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"DiT loss became {value} at step {step}")
        opt.lr = _lr_at(cfg, step)
        opt.step(backward(loss, model))
        losses.append(value)
        if on_step:
            on_step(step, value)
        if step % 500 == 0:
            log.info("dit %s step %d loss %.5f", data.task.value, step, value)
    model.eval()
    return losses


def lora_finetune(base: DiT, data: TaskData, rank: int = 4, scale: float = 1.0, cfg: DitTrainConfig | None = None,
                  seed: int = 0, on_step=None) -> tuple[DiT, list[float]]:
    """Copy ``base``, attach adapters and train them (plus the latent-condition embedder)."""
    model = copy.deepcopy(base)
    attach_lora(model, rank=rank, scale=scale, seed=seed, trainable=("latent_embed", "latent_pos"))
    losses = train_dit(model, data, cfg, fit_stats=False, on_step=on_step)
    return model, losses


# ---------------------------------------------------------------------------
# inference


class MaterialPipeline:
    """VAE plus one velocity network per task."""

    def __init__(self, vae: JointVAE, models: dict[TaskKind, DiT], steps: int = 50):
        self.vae = vae
        self.models = {TaskKind(k): m for k, m in models.items()}
        self.steps = steps

    def _model(self, task: TaskKind) -> DiT:
        if task not in self.models:
            raise KeyError(f"no model loaded for task {task.value}")
        return self.models[task]

    @torch.no_grad()
    def _decode(self, model: DiT, x: torch.Tensor) -> tuple[np.ndarray, MaterialMaps]:
        z = model.denormalize(x)
        rgb = self.vae.decode_rgb(z[:, 0])[0].permute(1, 2, 0).numpy()
        maps = maps_from_frames(self.vae.decode_pbr(z[:, 0], z[:, 1])[0])
        return rgb, maps

    @torch.no_grad()
    def text2mat(self, caption: str, seed: int = 0, steps: int | None = None) -> tuple[np.ndarray, MaterialMaps]:
        model = self._model(TaskKind.TEXT2MAT)
        x = sample(model, TaskKind.TEXT2MAT, ConditioningSignal.text(caption), steps or self.steps, seed)
        return self._decode(model, x)

    @torch.no_grad()
    def img2mat(self, photo: np.ndarray, seed: int = 0, steps: int | None = None) -> tuple[np.ndarray, MaterialMaps]:
        model = self._model(TaskKind.IMG2MAT)
        cond = self.vae.encode_rgb(rgb_tensor(photo)[None])
        x = sample(model, TaskKind.IMG2MAT, ConditioningSignal.from_latent(cond), steps or self.steps, seed)
        return self._decode(model, x)

    @torch.no_grad()
    def decompose(self, planar_rgb: np.ndarray, seed: int = 0, steps: int | None = None,
                  return_latents: bool = False):
        """Maps decoded from the input's own RGB latent and a sampled PBR latent."""
        model = self._model(TaskKind.DECOMPOSE)
        z_rgb = self.vae.encode_rgb(rgb_tensor(planar_rgb)[None])
        clamp = (z_rgb - model.latent_mean[0, :, None, None]) / model.latent_std[0, :, None, None]
        x = sample(model, TaskKind.DECOMPOSE, ConditioningSignal.from_latent(z_rgb), steps or self.steps, seed,
                   clamp_latent=clamp)
        z = model.denormalize(x)
        z_pbr = z[:, 1]
        maps = maps_from_frames(self.vae.decode_pbr(z_rgb, z_pbr)[0])
        if return_latents:
            return maps, z_rgb, z_pbr
        return maps

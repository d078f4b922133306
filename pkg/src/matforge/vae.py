"""Joint RGB-PBR causal VAE.

A material is packed as five frames ``[rgb, basecolor, normal, roughness,
metallic]``.  The RGB frame has its own spatial-only branch; the four PBR
frames go through a causal 3D branch that also reads the RGB branch's
activations at every resolution and is folded into a single latent frame by
a stride-4 temporal downsample.  The decoder mirrors this: the RGB decoder
runs on ``z_rgb`` alone and the PBR decoder reads its activations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import metrics
from .render import MaterialMaps
from .tensor import AdamW, CausalConv3d, backward, group_norm

log = logging.getLogger(__name__)

FRAME_ORDER = ("rgb", "basecolor", "normal", "roughness", "metallic")
PBR_FRAMES = 4


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class VaeConfig:
    spatial_factor: int = 16
    latent_channels: int = 4
    widths: tuple[int, ...] = (8, 16, 24, 32, 48)
    beta_kl: float = 1e-6
    lambda1: float = 10.0
    lambda2: float = 1.0
    lr: float = 2e-3
    lr_finetune: float = 5e-5
    steps: int = 2000
    finetune_steps: int = 200
    batch_size: int = 4
    temporal_from_level: int = 2
    seed: int = 0

    def __post_init__(self):
        levels = int(round(math.log2(self.spatial_factor)))
        if 2**levels != self.spatial_factor:
            raise ValueError("spatial_factor must be a power of two")
        self.widths = tuple(self.widths)
        if len(self.widths) != levels + 1:
            raise ValueError(f"need {levels + 1} widths for spatial factor {self.spatial_factor}")


@dataclass
class FrameSequence:
    """``frames``: float32 tensor ``[5, 3, H, W]`` in :data:`FRAME_ORDER`."""

    frames: torch.Tensor

    @property
    def rgb(self) -> torch.Tensor:
        return self.frames[0]

    @property
    def pbr(self) -> torch.Tensor:
        return self.frames[1:]


@dataclass
class LatentPair:
    z_rgb: torch.Tensor
    z_pbr: torch.Tensor
    stats: dict = field(default_factory=dict)

    def stacked(self) -> torch.Tensor:
        """``[..., 2, Cz, h, w]`` with the RGB latent frame first."""
        return torch.stack([self.z_rgb, self.z_pbr], dim=-4)


def _to_chw(img: np.ndarray | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img, dtype=np.float32))
    if t.ndim == 2:
        t = t[..., None]
    return t.permute(2, 0, 1)


def pack_sequence(mat: MaterialMaps, rgb) -> FrameSequence:
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.shape[:2] != mat.resolution:
        raise ValueError(f"rgb resolution {rgb.shape[:2]} does not match maps {mat.resolution}")
    frames = [
        _to_chw(rgb),
        _to_chw(mat.basecolor),
        _to_chw(mat.normal),
        _to_chw(mat.roughness).expand(3, -1, -1),
        _to_chw(mat.metallic).expand(3, -1, -1),
    ]
    return FrameSequence(torch.stack(frames).contiguous())


def unpack_sequence(seq: FrameSequence | torch.Tensor) -> tuple[np.ndarray, MaterialMaps]:
    f = seq.frames if isinstance(seq, FrameSequence) else seq
    f = f.detach().float().clamp(0, 1).numpy()
    hwc = lambda x: np.transpose(x, (1, 2, 0))  # noqa: E731
    maps = maps_from_frames(torch.as_tensor(f[1:]))
    return hwc(f[0]), maps


def maps_from_frames(pbr: torch.Tensor) -> MaterialMaps:
    """Four ``[3, H, W]`` frames to maps; single-channel maps take the channel mean."""
    p = pbr.detach().float().clamp(0, 1).numpy()
    hwc = lambda x: np.transpose(x, (1, 2, 0))  # noqa: E731
    return MaterialMaps(
        basecolor=hwc(p[0]),
        normal=hwc(p[1]),
        roughness=p[2].mean(0)[..., None],
        metallic=p[3].mean(0)[..., None],
    )


# ---------------------------------------------------------------------------
# building blocks


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kt: int = 1):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = CausalConv3d(c_in, c_out, (kt, 3, 3))
        self.norm2 = group_norm(c_out)
        self.conv2 = CausalConv3d(c_out, c_out, (kt, 3, 3))
        self.skip = CausalConv3d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


def _fuse(h: torch.Tensor, tap: torch.Tensor) -> torch.Tensor:
    """Concatenate a one-frame RGB activation onto every frame of ``h``."""
    return torch.cat([h, tap.expand(-1, -1, h.shape[2], -1, -1)], dim=1)


def temporal_downsample(x: torch.Tensor, conv: nn.Conv3d, factor: int) -> torch.Tensor:
    """Stride-``factor`` temporal fold; short clips are zero-padded in the past."""
    pad = (-x.shape[2]) % factor
    if pad:
        x = F.pad(x, (0, 0, 0, 0, pad, 0))
    return conv(x)


def _kt(cfg: VaeConfig, level: int) -> int:
    # temporal mixing only where the grid is coarse enough to be cheap
    return 3 if level >= cfg.temporal_from_level else 1


def _upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")


class RgbEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.conv_in = CausalConv3d(3, w[0], (1, 3, 3))
        self.blocks = nn.ModuleList(ResBlock(w[i], w[i]) for i in range(len(w)))
        self.downs = nn.ModuleList(CausalConv3d(w[i], w[i + 1], (1, 3, 3), (1, 2, 2)) for i in range(len(w) - 1))
        self.norm_out = group_norm(w[-1])
        self.conv_out = CausalConv3d(w[-1], 2 * cfg.latent_channels, (1, 3, 3))

    def forward(self, x):
        taps = []
        h = self.conv_in(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            taps.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return self.conv_out(F.silu(self.norm_out(h))), taps


class PbrEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.conv_in = CausalConv3d(3, w[0], (_kt(cfg, 0), 3, 3))
        self.blocks = nn.ModuleList(ResBlock(2 * w[i], w[i], kt=_kt(cfg, i)) for i in range(len(w)))
        self.downs = nn.ModuleList(CausalConv3d(w[i], w[i + 1], (1, 3, 3), (1, 2, 2)) for i in range(len(w) - 1))
        self.fold = nn.Conv3d(w[-1], w[-1], (PBR_FRAMES, 1, 1), stride=(PBR_FRAMES, 1, 1))
        self.norm_out = group_norm(w[-1])
        self.conv_out = CausalConv3d(w[-1], 2 * cfg.latent_channels, (1, 3, 3))

    def forward(self, x, taps):
        h = self.conv_in(x)
        for i, block in enumerate(self.blocks):
            h = block(_fuse(h, taps[i]))
            if i < len(self.downs):
                h = self.downs[i](h)
        h = temporal_downsample(h, self.fold, PBR_FRAMES)
        return self.conv_out(F.silu(self.norm_out(h)))


class RgbDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths[::-1]
        self.conv_in = CausalConv3d(cfg.latent_channels, w[0], (1, 3, 3))
        self.blocks = nn.ModuleList(ResBlock(w[i], w[i]) for i in range(len(w)))
        self.ups = nn.ModuleList(CausalConv3d(w[i], w[i + 1], (1, 3, 3)) for i in range(len(w) - 1))
        self.norm_out = group_norm(w[-1])
        self.conv_out = CausalConv3d(w[-1], 3, (1, 3, 3))

    def forward(self, z):
        taps = []
        h = self.conv_in(z)
        for i, block in enumerate(self.blocks):
            h = block(h)
            taps.append(h)
            if i < len(self.ups):
                h = self.ups[i](_upsample(h))
        return self.conv_out(F.silu(self.norm_out(h))), taps


class PbrDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths[::-1]
        self.conv_in = CausalConv3d(cfg.latent_channels, w[0], (1, 3, 3))
        self.unfold = CausalConv3d(w[0], PBR_FRAMES * w[0], 1)
        self.blocks = nn.ModuleList(ResBlock(2 * w[i], w[i], kt=_kt(cfg, len(w) - 1 - i)) for i in range(len(w)))
        self.ups = nn.ModuleList(CausalConv3d(w[i], w[i + 1], (1, 3, 3)) for i in range(len(w) - 1))
        self.norm_out = group_norm(w[-1])
        self.conv_out = CausalConv3d(w[-1], 3, (1, 3, 3))

    def forward(self, z, taps):
        h = self.unfold(self.conv_in(z))
        b, c, _, hh, ww = h.shape
        # channels -> time: [B, 4C, 1, h, w] -> [B, C, 4, h, w]
        h = h.view(b, PBR_FRAMES, c // PBR_FRAMES, hh, ww).transpose(1, 2)
        for i, block in enumerate(self.blocks):
            h = block(_fuse(h, taps[i]))
            if i < len(self.ups):
                h = self.ups[i](_upsample(h))
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# model


class JointVAE(nn.Module):
    """Frames are ``[B, 5, 3, H, W]``; latents ``[B, Cz, h, w]`` each."""

    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        self.cfg = cfg or VaeConfig()
        torch.manual_seed(self.cfg.seed)
        self.enc_rgb = RgbEncoder(self.cfg)
        self.enc_pbr = PbrEncoder(self.cfg)
        self.dec_rgb = RgbDecoder(self.cfg)
        self.dec_pbr = PbrDecoder(self.cfg)

    @property
    def spatial_factor(self) -> int:
        return self.cfg.spatial_factor

    def encoder_parameters(self):
        return list(self.enc_rgb.parameters()) + list(self.enc_pbr.parameters())

    def decoder_parameters(self):
        return list(self.dec_rgb.parameters()) + list(self.dec_pbr.parameters())

    def _check_frames(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim == 4:
            frames = frames[None]
        s = self.spatial_factor
        if frames.ndim != 5 or frames.shape[1] != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected frames [B, 5, 3, H, W], got {tuple(frames.shape)}")
        if frames.shape[-1] % s or frames.shape[-2] % s:
            raise ValueError(f"resolution {tuple(frames.shape[-2:])} is not a multiple of {s}")
        return frames

    def encode_rgb_stats(self, rgb: torch.Tensor):
        """``rgb`` ``[B, 3, H, W]`` -> (mean, logvar, cached activations)."""
        s = self.spatial_factor
        if rgb.shape[-1] % s or rgb.shape[-2] % s:
            raise ValueError(f"resolution {tuple(rgb.shape[-2:])} is not a multiple of {s}")
        out, taps = self.enc_rgb(rgb.unsqueeze(2))
        mu, logvar = out[:, :, 0].chunk(2, dim=1)
        return mu, logvar.clamp(-30, 20), taps

    def encode_stats(self, frames: torch.Tensor):
        frames = self._check_frames(frames)
        mu_r, lv_r, taps = self.encode_rgb_stats(frames[:, 0])
        pbr = frames[:, 1:].transpose(1, 2)  # [B, 3, 4, H, W]
        mu_p, lv_p = self.enc_pbr(pbr, taps)[:, :, 0].chunk(2, dim=1)
        return (mu_r, lv_r), (mu_p, lv_p.clamp(-30, 20))

    def encode(self, frames: torch.Tensor, sample: bool = False, generator: torch.Generator | None = None) -> LatentPair:
        (mu_r, lv_r), (mu_p, lv_p) = self.encode_stats(frames)
        if sample:
            z_r = mu_r + torch.exp(0.5 * lv_r) * torch.randn(mu_r.shape, generator=generator)
            z_p = mu_p + torch.exp(0.5 * lv_p) * torch.randn(mu_p.shape, generator=generator)
        else:
            z_r, z_p = mu_r, mu_p
        return LatentPair(z_r, z_p, {"mu": (mu_r, mu_p), "logvar": (lv_r, lv_p)})

    def encode_rgb(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.encode_rgb_stats(rgb if rgb.ndim == 4 else rgb[None])[0]

    def _check_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 3:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent must be [B, {self.cfg.latent_channels}, h, w], got {tuple(z.shape)}")
        return z

    def decode_rgb_raw(self, z_rgb: torch.Tensor):
        out, taps = self.dec_rgb(self._check_latent(z_rgb).unsqueeze(2))
        return out[:, :, 0], taps

    def decode_raw(self, z_rgb: torch.Tensor, z_pbr: torch.Tensor) -> torch.Tensor:
        """Unclamped reconstruction ``[B, 5, 3, H, W]``."""
        z_rgb, z_pbr = self._check_latent(z_rgb), self._check_latent(z_pbr)
        if z_rgb.shape != z_pbr.shape:
            raise ValueError(f"latent shapes differ: {tuple(z_rgb.shape)} vs {tuple(z_pbr.shape)}")
        rgb, taps = self.decode_rgb_raw(z_rgb)
        pbr = self.dec_pbr(z_pbr.unsqueeze(2), taps)  # [B, 3, 4, H, W]
        return torch.cat([rgb.unsqueeze(1), pbr.transpose(1, 2)], dim=1)

    def decode_rgb(self, z_rgb: torch.Tensor) -> torch.Tensor:
        """RGB image ``[B, 3, H, W]`` in [0, 1] from the RGB latent alone."""
        return self.decode_rgb_raw(z_rgb)[0].clamp(0, 1)

    def decode_pbr(self, z_rgb: torch.Tensor, z_pbr: torch.Tensor) -> torch.Tensor:
        """PBR frames ``[B, 4, 3, H, W]`` in [0, 1]."""
        return self.decode_raw(z_rgb, z_pbr)[:, 1:].clamp(0, 1)

    def reconstruct(self, frames: torch.Tensor) -> torch.Tensor:
        lat = self.encode(frames)
        return self.decode_raw(lat.z_rgb, lat.z_pbr).clamp(0, 1)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent elements, averaged over the batch."""
    per = 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
    return per.flatten(1).sum(1).mean()


def vae_loss(xhat: torch.Tensor, x: torch.Tensor, lambda1: float = 10.0, lambda2: float = 1.0,
             phi: metrics.FeatureNet | None = None) -> torch.Tensor:
    """``lambda1 * mean|xhat - x| + lambda2 * feature distance`` averaged over frames."""
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(xhat.shape)} vs {tuple(x.shape)}")
    loss = lambda1 * (xhat - x).abs().mean()
    if lambda2:
        phi = phi or metrics.feature_net()
        if phi.convs[0].weight.dtype != x.dtype:
            phi = _phi_cast(phi, x.dtype)
        a = xhat.reshape(-1, *xhat.shape[-3:])
        b = x.reshape(-1, *x.shape[-3:])
        loss = loss + lambda2 * metrics.feature_distance(a, b, phi).mean()
    return loss


_phi_cache: dict = {}


def _phi_cast(phi: metrics.FeatureNet, dtype: torch.dtype) -> metrics.FeatureNet:
    import copy

    key = (id(phi), dtype)
    if key not in _phi_cache:
        _phi_cache[key] = copy.deepcopy(phi).to(dtype)
    return _phi_cache[key]


# ---------------------------------------------------------------------------
# training


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - n % batch if n >= batch else n, batch):
            yield order[s : s + batch]


def train_vae(
    vae: JointVAE,
    frames: torch.Tensor,
    steps: int | None = None,
    lr: float | None = None,
    batch_size: int | None = None,
    beta: float | None = None,
    log_every: int = 100,
    on_step=None,
) -> list[float]:
    """Stage 1: train encoder and decoder on ``frames`` ``[N, 5, 3, H, W]``.

    Returns the per-step total loss.  ``beta`` weights the KL term of both
    latents (0 drops it entirely).
    """
    cfg = vae.cfg
    steps = cfg.steps if steps is None else steps
    beta = cfg.beta_kl if beta is None else beta
    batch_size = min(batch_size or cfg.batch_size, len(frames))
    opt = AdamW(vae, lr=lr or cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(frames), batch_size, rng)
    phi = metrics.feature_net()
    losses = []
    for step in range(steps):
        x = frames[next(batches)]
        lat = vae.encode(x)
        xhat = vae.decode_raw(lat.z_rgb, lat.z_pbr)
        loss = vae_loss(xhat, x, cfg.lambda1, cfg.lambda2, phi)
        if beta:
            for mu, lv in zip(lat.stats["mu"], lat.stats["logvar"]):
                loss = loss + beta * kl_divergence(mu, lv)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"VAE loss became {value} at step {step}")
        opt.step(backward(loss, vae))
        losses.append(value)
        if on_step:
            on_step(step, value)
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f", step, value)
    return losses


def finetune_decoder(
    vae: JointVAE,
    frames: torch.Tensor,
    steps: int | None = None,
    lr: float | None = None,
    batch_size: int | None = None,
    log_every: int = 100,
    on_step=None,
) -> list[float]:
    """Stage 2: freeze the encoder, optimise the decoder with the reconstruction loss."""
    cfg = vae.cfg
    steps = cfg.finetune_steps if steps is None else steps
    for p in vae.encoder_parameters():
        p.requires_grad_(False)
    batch_size = min(batch_size or cfg.batch_size, len(frames))
    opt = AdamW(vae, lr=lr or cfg.lr_finetune)
    rng = np.random.default_rng(cfg.seed + 1)
    batches = _batches(len(frames), batch_size, rng)
    phi = metrics.feature_net()
    losses = []
    for step in range(steps):
        x = frames[next(batches)]
        with torch.no_grad():
            lat = vae.encode(x)
        loss = vae_loss(vae.decode_raw(lat.z_rgb, lat.z_pbr), x, cfg.lambda1, cfg.lambda2, phi)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"decoder fine-tune loss became {value} at step {step}")
        opt.step(backward(loss, vae))
        losses.append(value)
        if on_step:
            on_step(step, value)
        if log_every and step % log_every == 0:
            log.info("decoder step %d loss %.5f", step, value)
    return losses


@torch.no_grad()
def eval_reconstruction(vae: JointVAE, frames: torch.Tensor, batch_size: int = 8) -> dict[str, float]:
    """PSNR per channel (render, basecolor, normal, roughness, metallic) over a set."""
    if len(frames) == 0:
        raise ValueError("empty test set")
    sq = torch.zeros(5, dtype=torch.float64)
    count = 0
    for s in range(0, len(frames), batch_size):
        x = frames[s : s + batch_size]
        xhat = vae.reconstruct(x)
        sq += ((xhat.double() - x.double()) ** 2).mean(dim=(2, 3, 4)).sum(0)
        count += len(x)
    return {name: metrics.psnr_from_mse(float(sq[i] / count)) for i, name in enumerate(metrics.CHANNELS)}


def psnr_report_from_frames(xhat: torch.Tensor, x: torch.Tensor) -> dict[str, float]:
    err = ((xhat.double() - x.double()) ** 2).mean(dim=(0, 2, 3, 4))
    return {name: metrics.psnr_from_mse(float(err[i])) for i, name in enumerate(metrics.CHANNELS)}

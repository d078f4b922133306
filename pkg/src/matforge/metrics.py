"""Image error metrics, a frozen random feature extractor and Fréchet distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PSNR_CAP = 99.0
FRECHET_EPS = 1e-6
CHANNELS = ("render", "basecolor", "normal", "roughness", "metallic")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a, b) -> float:
    _check_shapes(a, b)
    a, b = _as_tensor(a).double(), _as_tensor(b).double()
    return float(((a - b) ** 2).mean())


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report ``PSNR_CAP``."""
    return psnr_from_mse(mse(a, b), peak)


class FeatureNet(nn.Module):
    """Small convolutional feature extractor with seeded random weights.

    Never trained: all parameters are frozen at construction.  ``forward``
    returns one activation per tap, at full, half and quarter resolution.
    """

    def __init__(self, seed: int = 1234, widths=(8, 16, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = (3, *widths)
        self.convs = nn.ModuleList()
        for i in range(len(widths)):
            conv = nn.Conv2d(chans[i], chans[i + 1], 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = chans[i] * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            self.convs.append(conv)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        # centre inputs so the random filters see zero-mean data
        h = x * 2.0 - 1.0
        taps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            taps.append(h)
        return taps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Per-image vector of spatially pooled tap means (dimension 56)."""
        return torch.cat([t.mean(dim=(-2, -1)) for t in self(x)], dim=-1)


_default_net: dict[int, FeatureNet] = {}


def feature_net(seed: int = 1234) -> FeatureNet:
    if seed not in _default_net:
        _default_net[seed] = FeatureNet(seed)
    return _default_net[seed]


def feature_distance(a: torch.Tensor, b: torch.Tensor, net: FeatureNet) -> torch.Tensor:
    """Per-image sum over taps of mean squared feature difference; inputs ``[N, 3, H, W]``."""
    fa, fb = net(a), net(b)
    return sum(((x - y) ** 2).mean(dim=(1, 2, 3)) for x, y in zip(fa, fb))


def to_chw(img) -> torch.Tensor:
    """``C x H x W`` float32 view of an HWC or CHW image."""
    t = _as_tensor(img).float()
    if t.ndim == 3 and t.shape[-1] in (1, 3) and t.shape[0] not in (1, 3):
        t = t.permute(2, 0, 1)
    if t.shape[0] == 1:
        t = t.expand(3, *t.shape[1:])
    return t


def perceptual_dist(a, b, net: FeatureNet | None = None) -> float:
    """Feature-space distance between two images (HWC or CHW, values in [0, 1])."""
    _check_shapes(a, b)
    net = net or feature_net()
    ta, tb = to_chw(a).float()[None], to_chw(b).float()[None]
    with torch.no_grad():
        return float(feature_distance(ta, tb, net)[0])


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric positive semi-definite matrix by eigendecomposition."""
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    # Tr((s1 s2)^1/2) = Tr((r s2 r)^1/2) with r = s1^1/2; r s2 r is symmetric PSD
    r = sqrtm_psd(s1)
    return float(np.trace(sqrtm_psd(r @ s2 @ r)))


def frechet_distance(feats_a, feats_b, eps: float = FRECHET_EPS) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ``[N, D]``.

    Both covariances get ``eps * I`` added so degenerate sets stay finite.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("frechet_distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    eye = np.eye(a.shape[1])
    s_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * eye
    s_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * eye
    diff = mu_a - mu_b
    tr_ab = 0.5 * (_trace_sqrt_product(s_a, s_b) + _trace_sqrt_product(s_b, s_a))
    return max(0.0, float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_ab))


def tag_retrieval_accuracy(query_feats, query_tags, ref_feats, ref_tags) -> float:
    """Fraction of queries whose nearest reference (Euclidean, in feature space) carries the same tag.

    A stand-in for text-image agreement scores: generated renders are matched
    against renders of the training materials.
    """
    q = np.asarray(query_feats, dtype=np.float64)
    r = np.asarray(ref_feats, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise ValueError(f"feature shapes {q.shape} and {r.shape} are incompatible")
    if len(q) != len(query_tags) or len(r) != len(ref_tags) or len(q) == 0 or len(r) == 0:
        raise ValueError("need one tag per feature vector and non-empty sets")
    d = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    nearest = d.argmin(axis=1)
    return float(np.mean([query_tags[i] == ref_tags[j] for i, j in enumerate(nearest)]))


@dataclass
class MetricReport:
    """Per-channel metric values plus sample counts."""

    mse: dict[str, float] = field(default_factory=dict)
    psnr: dict[str, float] = field(default_factory=dict)
    perceptual: dict[str, float] = field(default_factory=dict)
    frechet: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v}
        if any(c <= 0 for c in self.counts.values()):
            raise ValueError("metric sample counts must be positive")
        for section in out.values():
            for k, v in section.items():
                if isinstance(v, float) and not math.isfinite(v):
                    raise ValueError(f"non-finite metric {k}={v}")
        return out

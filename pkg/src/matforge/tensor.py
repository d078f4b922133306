"""Dense tensor primitives, reverse-mode gradients, AdamW and checkpoint I/O.

Tensors are ``torch.Tensor`` values; torch's autograd tape records the
operations and :func:`backward` walks it once per loss.  The helpers here pin
down the contracts the rest of the package relies on: past-only temporal
padding for 3D convolutions, explicit softmax attention, strict gradient
maps that skip frozen parameters, and a sorted, byte-stable checkpoint file.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

Tensor = torch.Tensor

CHECKPOINT_MAGIC = b"MFTC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8"}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphConsumedError(RuntimeError):
    """The loss graph was already differentiated once."""


class MissingGradientError(KeyError):
    """An unfrozen parameter has no gradient in strict mode."""


class NonDeterministicError(RuntimeError):
    """Repeated evaluation of a function gave different values."""


class CheckpointError(ValueError):
    pass


def set_deterministic(flag: bool = True) -> None:
    """Single-threaded, fixed-reduction-order execution."""
    if flag:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(flag)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes {tuple(a.shape)} and {tuple(b.shape)} are incompatible"
        )
    return a @ b


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(x) for x in v)  # type: ignore[return-value]


def conv3d_causal(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1, 1),
) -> Tensor:
    """3D convolution with all temporal padding on the past side.

    ``x`` is ``[C, T, H, W]`` or ``[B, C, T, H, W]``; ``w`` is
    ``[Co, C, kt, kh, kw]``.  Every axis is padded by ``k - 1`` in total, so
    output sizes are ``ceil(size / stride)``.  Time gets ``kt - 1`` zero frames
    in front; space is split as evenly as possible (extra pixel at the end).
    """
    unbatched = x.ndim == 4
    if unbatched:
        x = x.unsqueeze(0)
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d_causal expects 5-D operands, got {tuple(x.shape)} and {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"channel mismatch: input {tuple(x.shape)} has {x.shape[1]} channels, "
            f"kernel {tuple(w.shape)} expects {w.shape[1]}"
        )
    if min(x.shape[2:]) < 1 or min(w.shape[2:]) < 1:
        raise DimensionError(f"zero-size dimension in {tuple(x.shape)} or {tuple(w.shape)}")
    kt, kh, kw = w.shape[2:]
    st = _triple(stride)
    ph, pw = kh - 1, kw - 1
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2, kt - 1, 0)
    y = F.conv3d(F.pad(x, pad), w, bias, stride=st)
    return y[0] if unbatched else y


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    Leading axes (batch, heads) broadcast.  ``key_mask`` is boolean with True
    marking keys that may be attended.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise DimensionError("attention needs at least one token")
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not torch.isfinite(t).all():
            raise ValueError(f"attention input {name} has non-finite values")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def group_norm(num_channels: int, groups: int = 8) -> nn.GroupNorm:
    g = math.gcd(groups, num_channels)
    return nn.GroupNorm(g, num_channels, eps=1e-6, affine=True)


class CausalConv3d(nn.Module):
    """Learned :func:`conv3d_causal` layer."""

    def __init__(self, c_in: int, c_out: int, kernel=(3, 3, 3), stride=(1, 1, 1)):
        super().__init__()
        k = _triple(kernel)
        self.stride = _triple(stride)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d_causal(x, self.weight, self.bias, self.stride)


# ---------------------------------------------------------------------------
# gradients


def named_trainable(model: nn.Module | Mapping[str, Tensor]) -> dict[str, Tensor]:
    items = model.named_parameters() if isinstance(model, nn.Module) else model.items()
    return {n: p for n, p in items if p.requires_grad}


def freeze(params: nn.Module | Iterable[Tensor]) -> None:
    if isinstance(params, nn.Module):
        params = params.parameters()
    for p in params:
        p.requires_grad_(False)


def backward(loss: Tensor, params: nn.Module | Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` for every unfrozen parameter.

    Parameters that do not influence the loss get an exact zero tensor; frozen
    parameters are absent from the result.  A loss can be differentiated once.
    """
    if loss.numel() != 1 or loss.ndim > 1:
        raise DimensionError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if getattr(loss, "_mf_consumed", False):
        raise GraphConsumedError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        raise GraphConsumedError("loss is not connected to any recorded operation")
    trainable = named_trainable(params)
    names = list(trainable)
    try:
        grads = torch.autograd.grad(loss, [trainable[n] for n in names], allow_unused=True)
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise GraphConsumedError(str(exc)) from exc
        raise
    loss._mf_consumed = True  # type: ignore[attr-defined]
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(trainable[n]) if g is None else g
    return out


@contextlib.contextmanager
def swapped_parameters(model: nn.Module, values: Mapping[str, Tensor]):
    """Temporarily replace named parameters of ``model`` with plain tensors."""
    saved = []
    for name, t in values.items():
        owner_name, _, leaf = name.rpartition(".")
        owner = model.get_submodule(owner_name) if owner_name else model
        saved.append((owner, leaf, owner._parameters[leaf]))
        del owner._parameters[leaf]
        setattr(owner, leaf, t)
    try:
        yield model
    finally:
        for owner, leaf, p in reversed(saved):
            delattr(owner, leaf)
            owner._parameters[leaf] = p


def module_function(model: nn.Module, fn: Callable[[nn.Module, torch.dtype], Tensor]):
    """Adapt ``fn(model, dtype) -> loss`` into the ``f(params)`` form of :func:`grad_check`.

    One deep copy of the model is kept per dtype so the oracle can run in f64.
    """
    import copy

    copies: dict[torch.dtype, nn.Module] = {}

    def f(params: Mapping[str, Tensor]) -> Tensor:
        dtype = next(iter(params.values())).dtype
        if dtype not in copies:
            copies[dtype] = copy.deepcopy(model).to(dtype)
        m = copies[dtype]
        with swapped_parameters(m, params):
            return fn(m, dtype)

    return f


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    frozen: Iterable[str] = (),
    max_coords: int | None = None,
    seed: int = 0,
    oracle_dtype: torch.dtype = torch.float64,
) -> float:
    """Largest relative error between backward gradients and central differences.

    ``f(params)`` must return a scalar and build every other operand in the
    dtype of the tensors it receives.  The analytic gradient is taken in the
    params' own dtype; the finite-difference oracle (five-point central
    stencil) evaluates ``f`` on copies cast to ``oracle_dtype``.  With
    ``max_coords`` set, each parameter contributes at most that many
    coordinates, drawn without replacement from a generator seeded with
    ``seed``.  Per coordinate the error is
    ``|a - n| / max(|a|, |n|, 1e-3 * max|n|, 1e-12)`` with the maximum taken
    over every checked coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    frozen = set(frozen)
    leaves = {
        k: v.detach().clone().requires_grad_(k not in frozen) for k, v in params.items()
    }
    analytic = backward(f(leaves), {k: v for k, v in leaves.items() if k not in frozen})

    base = {k: v.detach().to(oracle_dtype).clone() for k, v in params.items()}
    with torch.no_grad():
        f0 = f(base).item()
        if f(base).item() != f0:
            raise NonDeterministicError("f gave different values on repeated evaluation")

    rng = np.random.default_rng(seed)
    pairs = []
    for name, grad in analytic.items():
        flat = base[name].view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * eps
                    vals.append(f(base).item())
                flat[i] = orig
                # five-point stencil, truncation error O(eps^4)
                numeric[j] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        pairs.append((grad.detach().to(torch.float64).reshape(-1).numpy()[idx], numeric))
    # the floor uses the gradient scale of the whole check, so parameters whose
    # true gradient vanishes (e.g. a bias feeding a per-channel norm) compare
    # against that scale rather than against their own rounding noise
    scale = max((float(np.abs(n).max(initial=0.0)) for _, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for a, numeric in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float((np.abs(a - numeric) / denom).max(initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay over a named parameter map.

    Frozen parameters (``requires_grad=False``) are never touched.  In strict
    mode a missing gradient for an unfrozen parameter raises.
    """

    def __init__(
        self,
        params: nn.Module | Mapping[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        strict: bool = True,
    ):
        items = params.named_parameters() if isinstance(params, nn.Module) else params.items()
        self.params = dict(items)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.strict = strict
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, Tensor]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = grads.get(name)
            if g is None:
                if self.strict:
                    raise MissingGradientError(f"no gradient for unfrozen parameter {name!r}")
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if self.weight_decay:
                p.mul_(1 - self.lr * self.weight_decay)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(tensors: Mapping[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _DTYPE_CODES[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.numpy().astype(_NP_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> dict[str, Tensor]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an MFTC checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = np.dtype(_NP_DTYPES[code])
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(dims)
        pos += count * dt.itemsize
        out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="))).to(_CODE_DTYPES[code])
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor]) -> str:
    """Write an MFTC file and return its sha256."""
    data = encode_checkpoint(tensors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes())


def prefixed(state: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(state: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in state.items() if k.startswith(p)}


def tensor_hash(tensors: Mapping[str, Tensor]) -> str:
    return hashlib.sha256(encode_checkpoint(tensors)).hexdigest()

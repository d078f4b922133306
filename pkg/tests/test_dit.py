import copy

import numpy as np
import pytest
import torch

from matforge import tensor as T
from matforge.dit import (
    ConditioningSignal,
    DiT,
    DitConfig,
    LoraLinear,
    LoraStateError,
    SamplerError,
    SupervisionMask,
    TaskKind,
    attach_lora,
    fit_latent_stats,
    lora_targets,
    merge_lora,
    rf_interpolate,
    rf_loss,
    rf_objective,
    sample,
)


def small_cfg(**kw):
    base = dict(latent_channels=4, latent_size=4, width=32, depth=2, heads=2, mlp_ratio=2, seed=0)
    base.update(kw)
    return DitConfig(**base)


def randomize_zero_inits(model: DiT, seed: int = 0) -> DiT:
    """Give the zero-initialised modulation and head layers random weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ("modulation" in name or "mod_out" in name or "head" in name) and not p.any():
                p.copy_(torch.randn(p.shape, generator=g) * 0.1)
    return model


def latents(b=3, seed=0):
    return torch.randn(b, 2, 4, 4, 4, generator=torch.Generator().manual_seed(seed))


# --- interpolation ----------------------------------------------------------


def test_rf_interpolate_examples():
    x0, x1 = torch.zeros(2, 3), torch.full((2, 3), 2.0)
    assert torch.equal(rf_interpolate(x0, x1, 0.0), x0)
    assert torch.equal(rf_interpolate(x0, x1, 1.0), x1)
    assert torch.equal(rf_interpolate(x0, x1, 0.5), torch.ones(2, 3))
    with pytest.raises(ValueError):
        rf_interpolate(x0, x1, 1.5)
    with pytest.raises(ValueError):
        rf_interpolate(x0, torch.zeros(3, 2), 0.5)


def test_rf_interpolate_per_sample_t():
    x0, x1 = torch.zeros(2, 1, 2), torch.ones(2, 1, 2)
    out = rf_interpolate(x0, x1, torch.tensor([0.25, 0.75]))
    assert torch.equal(out[:, 0, 0], torch.tensor([0.25, 0.75]))


# --- model ------------------------------------------------------------------


def test_dit_shapes_and_token_count():
    cfg = small_cfg()
    model = DiT(cfg)
    assert cfg.tokens_per_frame * 2 == 32
    x = latents()
    assert model(x, torch.rand(3), ConditioningSignal.text(["checker red blue"] * 3)).shape == x.shape
    assert model(x, 0.5, ConditioningSignal.from_latent(torch.randn(3, 4, 4, 4))).shape == x.shape
    assert model(x, 0.5, ConditioningSignal.none(3)).shape == x.shape
    with pytest.raises(ValueError):
        model(x[:, :1], 0.5, ConditioningSignal.none(3))


def test_patchify_roundtrip_with_patch_two():
    model = DiT(small_cfg(patch=2))
    z = torch.randn(2, 4, 4, 4)
    tok = model.patchify(z)
    assert tok.shape == (2, 4, 16)
    assert torch.equal(model.unpatchify(tok), z)


def test_zero_initialised_head_outputs_zero():
    model = DiT(small_cfg())
    assert not model(latents(), 0.3, ConditioningSignal.none(3)).any()


def test_text_conditioning_matters_and_padding_ignored():
    model = randomize_zero_inits(DiT(small_cfg()))
    x = latents(1)
    a = model(x, 0.5, ConditioningSignal.text("checker red blue"))
    b = model(x, 0.5, ConditioningSignal.text("green stone bumpy rough"))
    assert not torch.allclose(a, b)
    # padded positions are masked out of cross-attention: changing their embedding is invisible
    with torch.no_grad():
        model.text_embed.weight[0] += 5.0
    assert torch.equal(model(x, 0.5, ConditioningSignal.text("checker red blue")), a)


def test_unknown_caption_rejected():
    from matforge.procgen import UnknownTag

    with pytest.raises(UnknownTag):
        ConditioningSignal.text("velvet sofa")


def test_supervision_mask_requires_one_frame():
    with pytest.raises(ValueError):
        SupervisionMask(False, False)
    assert SupervisionMask(True, False).as_tensor().tolist() == [True, False]


# --- rectified-flow loss --------------------------------------------------------


class Oracle(torch.nn.Module):
    """Stub velocity field returning a fixed tensor."""

    def __init__(self, v):
        super().__init__()
        self.v = v

    def forward(self, x, t, cond):
        return self.v.expand_as(x).clone()


def test_perfect_predictor_zero_loss():
    x0, x1 = latents(seed=1), latents(seed=2)
    loss = rf_loss(Oracle(x0 - x1), x0, ConditioningSignal.none(3), SupervisionMask(), x1=x1, t=torch.rand(3))
    assert loss.item() == 0


def test_zero_model_expected_loss_monte_carlo():
    x0 = latents(1, seed=3) * 0.7
    zero = Oracle(torch.zeros_like(x0))
    g = torch.Generator().manual_seed(4)
    draws = [rf_loss(zero, x0, ConditioningSignal.none(1), SupervisionMask(), generator=g).item() for _ in range(10_000)]
    expected = (x0**2).mean().item() + 1.0
    assert abs(np.mean(draws) - expected) / expected < 0.05


def test_masked_targets_bitwise_invisible():
    torch.manual_seed(0)
    model = randomize_zero_inits(DiT(small_cfg()), seed=1)
    x_t, t = latents(seed=5), torch.rand(3)
    target = latents(seed=6)
    cond = ConditioningSignal.text(["checker red blue", "gold metal plate glossy", "red brick wall rough"])
    mask = torch.tensor([True, False])
    loss_a = rf_objective(model, x_t, t, target, cond, mask)
    grads_a = T.backward(loss_a, model)
    for seed in range(5):
        other = target.clone()
        other[:, 1] = latents(seed=100 + seed)[:, 1] * 1e3
        loss_b = rf_objective(model, x_t, t, other, cond, mask)
        grads_b = T.backward(loss_b, model)
        assert torch.equal(loss_a, loss_b)
        assert all(torch.equal(grads_a[k], grads_b[k]) for k in grads_a)


def test_rf_loss_clamp_keeps_rgb_clean():
    seen = {}

    class Spy(torch.nn.Module):
        def forward(self, x, t, cond):
            seen["x"] = x.clone()
            return torch.zeros_like(x)

    x0 = latents(seed=7)
    rf_loss(Spy(), x0, ConditioningSignal.none(3), torch.tensor([False, True]), generator=torch.Generator().manual_seed(0),
            clamp_rgb=True)
    assert torch.equal(seen["x"][:, 0], x0[:, 0])
    assert not torch.equal(seen["x"][:, 1], x0[:, 1])


def test_rf_loss_rejects_non_finite_velocity():
    bad = Oracle(torch.full((1, 2, 4, 4, 4), float("nan")))
    with pytest.raises(FloatingPointError):
        rf_loss(bad, latents(1), ConditioningSignal.none(1), SupervisionMask())


def test_rf_loss_gradients_finite_differences():
    torch.manual_seed(1)
    model = randomize_zero_inits(DiT(small_cfg(width=8, depth=1, heads=2)), seed=2)
    x0, x1, t = latents(2, seed=8).double(), latents(2, seed=9).double(), torch.tensor([0.3, 0.8], dtype=torch.float64)
    cond = ConditioningSignal.text(["checker red blue", "teal stone bumpy smooth"])

    def fn(m, dt):
        return rf_loss(m, x0.to(dt), cond, torch.tensor([[True, True], [True, False]]), x1=x1.to(dt), t=t.to(dt))

    params = {n: p.detach() for n, p in model.named_parameters()}
    f = T.module_function(model, fn)
    assert T.grad_check(f, params, max_coords=4) < 5e-4
    params64 = {n: p.double() for n, p in params.items()}
    assert T.grad_check(f, params64, max_coords=4, eps=1e-4) < 1e-7


# --- sampler ---------------------------------------------------------------


def sampler_noise(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("steps", [1, 7, 50])
def test_sampler_exact_on_constant_field(steps):
    shape = (2, 2, 4, 4, 4)
    x0 = latents(2, seed=10)
    x1 = sampler_noise(shape, seed=3)
    out = sample(Oracle(x0 - x1), "text2mat", ConditioningSignal.none(2), steps=steps, seed=3, shape=shape)
    assert (out - x0).abs().max().item() <= 1e-6


def test_sampler_affine_field_refinement():
    # v(x, t) = -x: halving dt moves the endpoint by a first-order amount, shrinking with dt
    class Affine(torch.nn.Module):
        def forward(self, x, t, cond):
            return -0.5 * x

    shape = (1, 2, 4, 4, 4)
    ends = [sample(Affine(), "text2mat", ConditioningSignal.none(1), steps=s, seed=0, shape=shape) for s in (50, 100, 200)]
    d1 = (ends[0] - ends[1]).abs().max().item()
    d2 = (ends[1] - ends[2]).abs().max().item()
    assert d2 < d1 and d2 / d1 == pytest.approx(0.5, abs=0.05)
    exact = sampler_noise(shape, 0) * np.exp(-0.5)
    assert (ends[2] - exact).abs().max().item() < 1e-2


def test_sampler_default_steps_and_determinism():
    import inspect

    assert inspect.signature(sample).parameters["steps"].default == 50
    model = randomize_zero_inits(DiT(small_cfg()))
    cond = ConditioningSignal.text("checker red blue")
    a = sample(model, TaskKind.TEXT2MAT, cond, steps=5, seed=11)
    assert torch.equal(a, sample(model, TaskKind.TEXT2MAT, cond, steps=5, seed=11))
    assert not torch.equal(a, sample(model, TaskKind.TEXT2MAT, cond, steps=5, seed=12))


def test_decompose_clamps_rgb_and_responds_to_condition():
    model = randomize_zero_inits(DiT(small_cfg()))
    z = torch.randn(1, 4, 4, 4)
    out = sample(model, "decompose", ConditioningSignal.from_latent(z), steps=4, seed=0, clamp_latent=z)
    assert torch.equal(out[:, 0], z)
    z2 = z + 1.0
    out2 = sample(model, "decompose", ConditioningSignal.from_latent(z2), steps=4, seed=0, clamp_latent=z2)
    assert (out2[:, 1] - out[:, 1]).norm() > 0
    with pytest.raises(ValueError):
        sample(model, "decompose", ConditioningSignal.from_latent(z), steps=4)


def test_sampler_errors():
    with pytest.raises(ValueError):
        sample(Oracle(torch.zeros(1)), "text2mat", ConditioningSignal.none(1), steps=0, shape=(1, 2, 4, 4, 4))
    with pytest.raises(SamplerError):
        sample(Oracle(torch.tensor(float("inf"))), "text2mat", ConditioningSignal.none(1), steps=2, shape=(1, 2, 4, 4, 4))


# --- LoRA -------------------------------------------------------------------


def test_lora_targets_are_projections_and_ffn():
    model = DiT(small_cfg())
    targets = lora_targets(model)
    assert len(targets) == 2 * (4 + 4 + 2)
    leaves = {t.rsplit(".", 1)[-1] for t in targets}
    assert leaves == {"q", "k", "v", "o", "fc1", "fc2"}
    assert not any("norm" in t or "embed" in t or "modulation" in t or "head" in t for t in targets)


def test_lora_zero_init_identity_bitwise():
    base = randomize_zero_inits(DiT(small_cfg()))
    adapted = attach_lora(copy.deepcopy(base), rank=4)
    x, t = latents(), torch.rand(3)
    cond = ConditioningSignal.text(["checker red blue"] * 3)
    assert torch.equal(base(x, t, cond), adapted(x, t, cond))


def test_lora_freezes_base_and_keeps_trainable_prefixes():
    model = attach_lora(DiT(small_cfg()), rank=2, trainable=("latent_embed",))
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert trainable == {n for n in trainable if n.endswith((".A", ".B")) or n.startswith("latent_embed")}
    assert "latent_embed.weight" in trainable
    assert sum(n.endswith(".B") for n in trainable) == len(lora_targets(DiT(small_cfg())))


def test_lora_errors():
    with pytest.raises(KeyError):
        attach_lora(DiT(small_cfg()), targets=["blocks.0.norm1"])
    with pytest.raises(ValueError):
        LoraLinear(torch.nn.Linear(4, 4), rank=0)
    with pytest.raises(LoraStateError):
        merge_lora(DiT(small_cfg()))


def test_lora_merge_small_layer():
    g = torch.Generator().manual_seed(0)
    lin = torch.nn.Linear(8, 8)
    ad = LoraLinear(copy.deepcopy(lin), rank=2, scale=0.7, generator=g)
    with torch.no_grad():
        ad.B.copy_(torch.randn(8, 2, generator=g))
    x = torch.randn(100, 8, generator=g)
    before = ad(x)
    merged = ad.merge()
    assert (merged(x) - before).abs().max().item() <= 1e-5
    with pytest.raises(LoraStateError):
        ad.merge()


def test_lora_merge_zero_b_is_exact():
    lin = torch.nn.Linear(8, 8)
    w = lin.weight.detach().clone()
    LoraLinear(lin, rank=3).merge()
    assert torch.equal(lin.weight, w)


def test_lora_merge_whole_model():
    g = torch.Generator().manual_seed(1)
    model = attach_lora(randomize_zero_inits(DiT(small_cfg())), rank=4, scale=0.5)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.endswith(".B"):
                p.copy_(torch.randn(p.shape, generator=g) * 0.05)
    x, t = latents(4, seed=20), torch.rand(4)
    cond = ConditioningSignal.text(["checker red blue"] * 4)
    before = model(x, t, cond)
    merged = merge_lora(model)
    assert not any(isinstance(m, LoraLinear) for m in merged.modules())
    assert (merged(x, t, cond) - before).abs().max().item() <= 1e-5


# --- normalisation and training ---------------------------------------------


def test_fit_latent_stats_respects_mask():
    model = DiT(small_cfg())
    z = latents(6, seed=21) * 3 + 1
    mask = torch.tensor([[True, True]] * 3 + [[True, False]] * 3)
    z[3:, 1] = 1000.0
    fit_latent_stats(model, z, mask)
    assert model.latent_mean[1].abs().max() < 5
    assert torch.allclose(model.denormalize(model.normalize(z)), z, atol=1e-4)


def test_single_pair_overfit():
    from matforge.pipeline import DitTrainConfig, TaskData, train_dit

    torch.manual_seed(0)
    model = DiT(small_cfg(width=48, depth=2, heads=4, mlp_ratio=4))
    x0 = latents(1, seed=30)
    data = TaskData(TaskKind.TEXT2MAT, x0, torch.ones(1, 2, dtype=torch.bool), ConditioningSignal.text("checker red blue"))
    cfg = DitTrainConfig(steps=1500, batch_size=16, lr=2e-3, warmup=50, seed=0)
    losses = train_dit(model, data, cfg)
    assert np.mean(losses[-100:]) < 0.1 * np.mean(losses[:20])
    # the learned flow carries noise to the single training latent
    out = model.denormalize(sample(model, "text2mat", data.cond, steps=50, seed=5))
    assert (out - x0).pow(2).mean().item() < 0.1 * x0.pow(2).mean().item()


def test_training_is_deterministic():
    from matforge.pipeline import DitTrainConfig, TaskData, train_dit

    x0 = latents(4, seed=31)
    data = TaskData(TaskKind.TEXT2MAT, x0, torch.ones(4, 2, dtype=torch.bool),
                    ConditioningSignal.text(["checker red blue"] * 4))
    hashes = []
    for _ in range(2):
        m = DiT(small_cfg())
        train_dit(m, data, DitTrainConfig(steps=5, batch_size=2, warmup=2))
        hashes.append(T.tensor_hash(m.state_dict()))
    assert hashes[0] == hashes[1]

import numpy as np
import pytest
import torch

from matforge import metrics, procgen, render
from matforge import tensor as T
from matforge import vae as V
from matforge.vae import JointVAE, VaeConfig


def tiny_cfg(**kw):
    base = dict(spatial_factor=4, widths=(4, 8, 8), latent_channels=2, temporal_from_level=1, seed=0)
    base.update(kw)
    return VaeConfig(**base)


def random_frames(n=2, res=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 5, 3, res, res, generator=g)


# --- packing ---------------------------------------------------------------


def test_pack_unpack_roundtrip():
    mat = procgen.gen_material(procgen.random_spec("bricks", 4), 32)
    rgb = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)
    seq = V.pack_sequence(mat, rgb)
    assert seq.frames.shape == (5, 3, 32, 32)
    assert np.array_equal(seq.rgb.permute(1, 2, 0).numpy(), rgb)
    rgb2, mat2 = V.unpack_sequence(seq)
    assert np.array_equal(rgb2, rgb)
    for k in ("basecolor", "normal", "roughness", "metallic"):
        assert np.allclose(getattr(mat2, k), getattr(mat, k), atol=1e-7)


def test_pack_replicates_single_channel_maps():
    z = np.zeros((16, 16, 3), np.float32)
    mat = render.MaterialMaps(z, z + 0.5, np.full((16, 16, 1), 0.3, np.float32), np.zeros((16, 16, 1), np.float32))
    seq = V.pack_sequence(mat, z)
    assert torch.allclose(seq.frames[3, :, 5, 7], torch.tensor([0.3, 0.3, 0.3]))
    with pytest.raises(ValueError):
        V.pack_sequence(mat, np.zeros((8, 8, 3)))


# --- shapes and causality -----------------------------------------------------


@pytest.mark.parametrize("res", [32, 64, 128])
def test_latent_shape_contract_default_model(res):
    vae = JointVAE()
    with torch.no_grad():
        lat = vae.encode(torch.rand(1, 5, 3, res, res))
    assert lat.stacked().shape == (1, 2, vae.cfg.latent_channels, res // 16, res // 16)


def test_shape_errors():
    vae = JointVAE(tiny_cfg())
    with pytest.raises(ValueError):
        vae.encode(torch.rand(1, 4, 3, 16, 16))
    with pytest.raises(ValueError):
        vae.encode(torch.rand(1, 5, 3, 18, 16))
    with pytest.raises(ValueError):
        vae.decode_rgb(torch.rand(1, 3, 4, 4))
    with pytest.raises(ValueError):
        vae.decode_pbr(torch.rand(1, 2, 4, 4), torch.rand(1, 2, 2, 2))


def test_z_rgb_ignores_pbr_frames():
    vae = JointVAE(tiny_cfg())
    x = random_frames()
    with torch.no_grad():
        z0 = vae.encode(x).z_rgb
        for i in range(10):
            y = x.clone()
            y[:, 1 + i % 4] = torch.rand_like(y[:, 1 + i % 4])
            assert torch.equal(vae.encode(y).z_rgb, z0)


def test_rgb_decode_ignores_z_pbr_and_pbr_depends_on_z_rgb():
    vae = JointVAE(tiny_cfg())
    z_rgb = torch.randn(1, 2, 4, 4)
    with torch.no_grad():
        ref = vae.decode_rgb(z_rgb)
        for _ in range(5):
            assert torch.equal(vae.decode_raw(z_rgb, torch.randn(1, 2, 4, 4))[:, 0].clamp(0, 1), ref)
        zp = torch.randn(1, 2, 4, 4)
        a = vae.decode_pbr(z_rgb, zp)
        b = vae.decode_pbr(z_rgb + 1.0, zp)
    assert ref.shape == (1, 3, 16, 16) and a.shape == (1, 4, 3, 16, 16)
    assert 0 <= a.min() and a.max() <= 1
    assert (a - b).norm() > 0


def test_pbr_encoder_sees_all_four_frames():
    vae = JointVAE(tiny_cfg())
    x = random_frames()
    with torch.no_grad():
        z0 = vae.encode(x).z_pbr
        for f in range(1, 5):
            y = x.clone()
            y[:, f] += 0.5
            assert not torch.equal(vae.encode(y).z_pbr, z0), f"frame {f} ignored"


def test_encode_mean_deterministic_sample_stochastic():
    vae = JointVAE(tiny_cfg())
    x = random_frames()
    with torch.no_grad():
        assert torch.equal(vae.encode(x).z_pbr, vae.encode(x).z_pbr)
        g = torch.Generator().manual_seed(1)
        assert not torch.equal(vae.encode(x, sample=True, generator=g).z_pbr, vae.encode(x).z_pbr)


# --- loss -------------------------------------------------------------------


def test_loss_defaults_match_reference_settings():
    cfg = VaeConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lr_finetune, cfg.beta_kl, cfg.spatial_factor) == (10.0, 1.0, 5e-5, 1e-6, 16)


def test_vae_loss_examples():
    x = random_frames(res=8)
    assert V.vae_loss(x, x).item() == 0
    assert abs(V.vae_loss(x + 0.1, x, lambda2=0).item() - 1.0) < 1e-5
    with pytest.raises(ValueError):
        V.vae_loss(x[:, :4], x)


def test_vae_loss_perceptual_term_is_mean_over_frames():
    x = random_frames(n=1, res=8)
    y = x.flip(-1)
    phi = metrics.feature_net()
    per_frame = torch.stack([metrics.feature_distance(y[0, i : i + 1], x[0, i : i + 1], phi)[0] for i in range(5)])
    assert torch.allclose(V.vae_loss(y, x, lambda1=0, lambda2=1), per_frame.mean(), atol=1e-6)


def test_kl_zero_at_prior():
    assert V.kl_divergence(torch.zeros(3, 4), torch.zeros(3, 4)).item() == 0
    assert abs(V.kl_divergence(torch.ones(1, 2), torch.zeros(1, 2)).item() - 1.0) < 1e-7


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 5e-4), (torch.float64, 1e-7)])
def test_vae_loss_gradient_through_tiny_model(dtype, tol):
    torch.manual_seed(0)
    vae = JointVAE(tiny_cfg(widths=(2, 4), spatial_factor=2, latent_channels=2)).to(dtype)
    x = random_frames(n=1, res=4).to(torch.float64)

    def fn(m, dt):
        lat = m.encode(x.to(dt))
        loss = V.vae_loss(m.decode_raw(lat.z_rgb, lat.z_pbr), x.to(dt))
        for mu, lv in zip(lat.stats["mu"], lat.stats["logvar"]):
            loss = loss + 1e-2 * V.kl_divergence(mu, lv)
        return loss

    params = {n: p.detach() for n, p in vae.named_parameters()}
    err = T.grad_check(T.module_function(vae, fn), params, max_coords=3, eps=1e-4)
    assert err < tol


# --- training ---------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_tiny():
    x = random_frames(n=4, res=16, seed=3)
    vae = JointVAE(tiny_cfg())
    losses = V.train_vae(vae, x, steps=60, lr=3e-3, batch_size=4)
    return vae, x, losses


def test_stage1_loss_decreases(trained_tiny):
    _, _, losses = trained_tiny
    assert len(losses) == 60
    assert all(np.isfinite(losses))
    assert losses[49] < losses[0]
    assert np.mean(losses[40:50]) < np.mean(losses[:10])


def test_stage1_beta_zero_is_pure_reconstruction():
    x = random_frames(n=2, res=16, seed=5)
    vae = JointVAE(tiny_cfg())
    with torch.no_grad():
        lat = vae.encode(x)
        expected = V.vae_loss(vae.decode_raw(lat.z_rgb, lat.z_pbr), x).item()
    first = V.train_vae(vae, x, steps=1, beta=0.0, batch_size=2)[0]
    assert first == pytest.approx(expected, rel=1e-6)


def test_stage1_deterministic_checkpoint():
    x = random_frames(n=4, res=16, seed=6)
    hashes = []
    for _ in range(2):
        vae = JointVAE(tiny_cfg())
        V.train_vae(vae, x, steps=5, batch_size=2)
        hashes.append(T.tensor_hash(vae.state_dict()))
    assert hashes[0] == hashes[1]


def test_stage1_nan_aborts():
    x = random_frames(n=2, res=16)
    x[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(V.DivergenceError):
        V.train_vae(JointVAE(tiny_cfg()), x, steps=3, batch_size=2)


def test_stage2_freezes_encoder_and_holds_psnr(trained_tiny):
    import copy

    vae, x, _ = trained_tiny
    vae = copy.deepcopy(vae)
    enc_before = T.tensor_hash({f"{i}": p for i, p in enumerate(vae.encoder_parameters())})
    dec_before = T.tensor_hash({f"{i}": p for i, p in enumerate(vae.decoder_parameters())})
    psnr_before = V.eval_reconstruction(vae, x)
    V.finetune_decoder(vae, x, steps=20, batch_size=4)
    assert T.tensor_hash({f"{i}": p for i, p in enumerate(vae.encoder_parameters())}) == enc_before
    assert T.tensor_hash({f"{i}": p for i, p in enumerate(vae.decoder_parameters())}) != dec_before
    psnr_after = V.eval_reconstruction(vae, x)
    assert min(psnr_after[k] - psnr_before[k] for k in psnr_before) >= -0.1


def test_eval_reconstruction_report():
    x = random_frames(n=2, res=8) * 0.8
    rep = V.psnr_report_from_frames(x + 0.1, x)
    assert list(rep) == ["render", "basecolor", "normal", "roughness", "metallic"]
    assert all(abs(v - 20) < 1e-6 for v in rep.values())
    assert all(v == metrics.PSNR_CAP for v in V.psnr_report_from_frames(x, x).values())
    with pytest.raises(ValueError):
        V.eval_reconstruction(JointVAE(tiny_cfg()), x[:0])


def test_temporal_fold_pads_in_the_past():
    conv = torch.nn.Conv3d(1, 1, (4, 1, 1), stride=(4, 1, 1), bias=False)
    with torch.no_grad():
        conv.weight.copy_(torch.tensor([1.0, 10.0, 100.0, 1000.0]).view(1, 1, 4, 1, 1))
    x = torch.ones(1, 1, 3, 1, 1)
    # three frames are padded to four at the front, so the first tap sees zeros
    assert V.temporal_downsample(x, conv, 4).item() == 1110.0

import numpy as np
import pytest
import torch

from layerflow import vae
from layerflow.bundle import synth_poster
from layerflow.features import RandomFeatureStack
from layerflow.seeding import torch_generator


@pytest.fixture(scope="module")
def small():
    cfg = vae.VaeConfig(image_size=16, width=8)
    return cfg, vae.build_vae(cfg, seed=0)


def images(n=4, size=16, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 4)).astype(np.float32)


def test_config_validation():
    assert vae.VaeConfig(image_size=32).latent_grid == 8
    with pytest.raises(ValueError):
        vae.VaeConfig(image_size=16, latent_grid=5)
    with pytest.raises(ValueError):
        vae.VaeConfig(lambda_kl=-1.0)


def test_encode_shapes_and_mean(small):
    cfg, m = small
    lat = m.encode(images(1)[0])
    assert lat.z_rgb.shape == (4, 4, cfg.channels_rgb)
    assert lat.z_a.shape == (4, 4, cfg.channels_a)
    assert torch.equal(lat.z_rgb, lat.mu_rgb) and torch.equal(lat.z_a, lat.mu_a)
    assert lat.z.shape == (4, 4, cfg.latent_channels)


def test_encode_reparameterization_reproducible(small):
    _, m = small
    x = images(2)
    a = m.encode(x, torch_generator(5, "t"))
    b = m.encode(x, torch_generator(5, "t"))
    assert torch.equal(a.z_rgb, b.z_rgb) and torch.equal(a.z_a, b.z_a)
    recon = a.mu_rgb + torch.exp(0.5 * a.logvar_rgb) * a.eps_rgb
    assert torch.equal(recon, a.z_rgb)


def test_encode_rejects_wrong_size(small):
    _, m = small
    with pytest.raises(ValueError, match="size"):
        m.encode(images(1, size=12))


def test_decode_range_shape_determinism(small):
    cfg, m = small
    g = torch.Generator().manual_seed(0)
    zr = 5 * torch.randn((3, 4, 4, cfg.channels_rgb), generator=g)
    za = 5 * torch.randn((3, 4, 4, cfg.channels_a), generator=g)
    with torch.no_grad():
        out = m.decode((zr, za))
        again = m.decode((zr, za))
    assert out.shape == (3, 16, 16, 4)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(out, again)
    with pytest.raises(ValueError, match="channels"):
        m.decode((za, za))


def test_grid_sized_input_accepted(small):
    _, m = small
    with torch.no_grad():
        out, lat = m(images(1, size=32))
    assert lat.z_rgb.shape[1:3] == (8, 8) and out.shape == (1, 32, 32, 4)


def test_loss_zero_cases():
    cfg = vae.VaeConfig(image_size=16)
    perc = RandomFeatureStack(0)
    x = torch.from_numpy(images(2)).double()
    z = torch.zeros((2, 4, 4, 4), dtype=torch.float64)
    za = torch.zeros((2, 4, 4, 2), dtype=torch.float64)
    lat = vae.reparameterize(z, z, za, za, z, za)
    parts = vae.vae_loss(x, x.clone(), lat, cfg, perc).as_floats()
    assert all(v == 0.0 for v in parts.values())


def test_kl_half_for_unit_mean():
    mu = torch.ones((3, 4, 4, 4), dtype=torch.float64)
    assert float(vae.gaussian_kl(mu, torch.zeros_like(mu))) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_closed_form(rng):
    mu = rng.standard_normal(200)
    lv = rng.standard_normal(200)
    want = np.mean(0.5 * (mu**2 + np.exp(lv) - 1 - lv))
    got = float(vae.gaussian_kl(torch.from_numpy(mu), torch.from_numpy(lv)))
    assert abs(got - want) < 1e-6


def test_patch_term_oracle():
    cfg = vae.VaeConfig(image_size=16)
    x = torch.zeros((1, 16, 16, 4), dtype=torch.float64)
    y = x.clone()
    y[0, :4, :4, 0] = 1.0  # one patch, one channel, mean 1
    n_patches = (16 // 4) ** 2 * 4
    z = torch.zeros((1, 4, 4, 4), dtype=torch.float64)
    za = torch.zeros((1, 4, 4, 2), dtype=torch.float64)
    lat = vae.reparameterize(z, z, za, za, z, za)
    parts = vae.vae_loss(x, y, lat, cfg, RandomFeatureStack(0))
    assert float(parts.patch) == pytest.approx(1 / n_patches)
    assert float(parts.pixel) == pytest.approx(16 / (16 * 16 * 4))


def test_total_is_weighted_sum_and_zero_weight_removes_term():
    g = torch.Generator().manual_seed(1)
    x = torch.rand((2, 16, 16, 4), generator=g, dtype=torch.float64)
    r = torch.rand((2, 16, 16, 4), generator=g, dtype=torch.float64)
    mu = torch.randn((2, 4, 4, 4), generator=g, dtype=torch.float64)
    mua = torch.randn((2, 4, 4, 2), generator=g, dtype=torch.float64)
    lat = vae.reparameterize(mu, mu * 0.1, mua, mua * 0.1, mu * 0, mua * 0)
    perc = RandomFeatureStack(0)
    cfg = vae.VaeConfig(image_size=16, lambda_perc=0.3, lambda_kl=0.01)
    p = vae.vae_loss(x, r, lat, cfg, perc)
    want = p.pixel + p.patch + 0.3 * p.perceptual + 0.01 * (p.kl_rgb + p.kl_a)
    assert abs(float(p.total - want)) < 1e-12
    assert all(v >= 0 for v in p.as_floats().values())
    no_perc = vae.VaeConfig(image_size=16, lambda_perc=0.0, lambda_kl=0.01)
    q = vae.vae_loss(x, r, lat, no_perc, perc)
    assert abs(float(q.total - (p.total - 0.3 * p.perceptual))) < 1e-12


def test_training_lr_zero_and_first_row(small):
    cfg, _ = small
    x = images(4)
    m0 = vae.build_vae(cfg, seed=3)
    before = {k: v.clone() for k, v in m0.state_dict().items()}
    m, curve = vae.train_vae(x, cfg, steps=1, lr=0.0, seed=3, batch_size=4)
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k])
    # row 0 is the untrained loss on the first batch with the first noise draw
    recon, lat = m0(torch.from_numpy(x), torch_generator(3, "vae-noise"))
    want = vae.vae_loss(torch.from_numpy(x), recon, lat, cfg, RandomFeatureStack(cfg.perc_seed)).as_floats()
    for k, v in want.items():
        assert curve[0][k] == pytest.approx(v, rel=1e-6, abs=1e-9)


def test_training_deterministic_and_improves(small):
    cfg, _ = small
    x = np.stack([synth_poster(s, 16).composite for s in range(8)])
    _, c1 = vae.train_vae(x, cfg, steps=60, seed=1, batch_size=8)
    _, c2 = vae.train_vae(x, cfg, steps=60, seed=1, batch_size=8)
    assert c1 == c2
    assert c1[-1]["pixel"] < c1[0]["pixel"]


def test_divergence_aborts_with_step(small):
    cfg, _ = small
    with pytest.raises(vae.TrainingDiverged, match="step 0"):
        vae.train_vae(np.full((2, 16, 16, 4), np.nan, dtype=np.float32), cfg, steps=3)


def test_checkpoint_roundtrip(tmp_path, small):
    cfg, m = small
    vae.save_vae(m, tmp_path / "v.pt")
    back = vae.load_vae(tmp_path / "v.pt")
    assert back.cfg == cfg
    x = images(1)
    with torch.no_grad():
        assert torch.equal(m.encode(x).z, back.encode(x).z)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        vae.load_vae(tmp_path / "bad.pt")


def test_curve_csv(tmp_path):
    rows = [{"step": 0, "pixel": 0.5, "patch": 0.25, "perceptual": 1e-3, "kl_rgb": 0.0, "kl_a": 0.0, "total": 0.75}]
    vae.write_curve(rows, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,pixel,patch,perceptual,kl_rgb,kl_a,total"
    assert lines[1] == "0,0.5,0.25,0.001,0,0,0.75"

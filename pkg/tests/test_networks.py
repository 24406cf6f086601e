"""Network shapes, determinism, clamps, dropout, and gradient flow."""

import numpy as np
import pytest
import torch

from refvae.networks import (
    ArchConfig,
    ConfigError,
    GaussianParams,
    ReferenceModel,
    ShapeError,
    _block_dropout,
    build_model,
    parameter_checksum,
    sample_gaussian,
)


class TestArchConfig:
    def test_defaults(self):
        cfg = ArchConfig()
        assert cfg.image_size == 64
        assert cfg.d_z == 32 and cfg.d_e == 32
        assert cfg.leaky_slope == 0.2
        assert cfg.disc_latent_dropout == 0.25

    def test_too_many_blocks_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(image_size=32, num_blocks=6)

    def test_non_divisible_size_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(image_size=48, num_blocks=5)

    def test_channel_cap(self):
        cfg = ArchConfig(image_size=64, base_channels=64, num_blocks=4,
                         max_channels=128)
        assert max(cfg.channels()) == 128


class TestInitDeterminism:
    def test_same_seed_same_checksum(self, arch16):
        a = build_model(arch16, "srbvae", seed=9)
        b = build_model(arch16, "srbvae", seed=9)
        assert parameter_checksum(a) == parameter_checksum(b)

    def test_different_seed_differs(self, arch16):
        a = build_model(arch16, "srbvae", seed=9)
        b = build_model(arch16, "srbvae", seed=10)
        assert parameter_checksum(a) != parameter_checksum(b)

    def test_e_ref_initialized_to_zero(self, arch16):
        model = build_model(arch16, "rbvae", seed=0)
        assert model.e_ref.shape == (arch16.d_e,)
        assert not model.e_ref.detach().any()

    def test_variant_components(self, arch16):
        vae = ReferenceModel(arch16, "vae")
        assert vae.encoder_e is None and vae.e_ref is None
        assert vae.disc_joint is None
        rb = ReferenceModel(arch16, "rbvae")
        assert rb.encoder_e is not None and rb.disc_joint is None
        srb = ReferenceModel(arch16, "srbvae")
        assert srb.disc_joint is not None and srb.disc_ref is not None
        with pytest.raises(ConfigError):
            ReferenceModel(arch16, "wgan")


class TestEncoders:
    def test_output_widths(self, model16, arch16):
        x = torch.rand(5, 3, 16, 16) * 2 - 1
        q = model16.encode_z(x)
        assert q.mu.shape == (5, arch16.d_z)
        assert q.log_sigma.shape == (5, arch16.d_z)
        qe = model16.encode_e(x)
        assert qe.mu.shape == (5, arch16.d_e)

    def test_default_width_is_32(self):
        cfg = ArchConfig(image_size=16, base_channels=4, num_blocks=2)
        model = build_model(cfg, "rbvae", seed=0)
        x = torch.rand(2, 3, 16, 16) * 2 - 1
        assert model.encode_z(x).mu.shape == (2, 32)
        assert model.encode_e(x).mu.shape == (2, 32)

    def test_duplicate_rows_encode_identically(self, model16):
        x = torch.rand(1, 3, 16, 16) * 2 - 1
        batch = torch.cat([x, x], dim=0)
        q = model16.encode_z(batch)
        np.testing.assert_array_equal(q.mu[0].detach(), q.mu[1].detach())

    def test_log_sigma_clamped(self, model16):
        with torch.no_grad():
            model16.encoder_z.head.bias.fill_(100.0)
        q = model16.encode_z(torch.rand(2, 3, 16, 16))
        assert q.log_sigma.max() <= 7.0
        assert q.log_sigma.min() >= -7.0

    def test_wrong_spatial_size_rejected(self, model16):
        with pytest.raises(ShapeError):
            model16.encode_z(torch.zeros(1, 3, 32, 32))


class TestSampleGaussian:
    def test_sigma_floor_collapses_to_mean(self):
        p = GaussianParams(
            mu=torch.full((4, 8), 1.5), log_sigma=torch.full((4, 8), -7.0)
        )
        draw = sample_gaussian(p, torch.Generator().manual_seed(0))
        assert (draw - p.mu).abs().max() < 1e-2

    def test_monte_carlo_mean(self):
        """Empirical mean within 4 sigma / sqrt(n) of mu."""
        n = 100_000
        mu, sigma = 0.7, 1.3
        p = GaussianParams(
            mu=torch.full((n, 1), mu),
            log_sigma=torch.full((n, 1), float(np.log(sigma))),
        )
        draw = sample_gaussian(p, torch.Generator().manual_seed(1))
        assert abs(float(draw.mean()) - mu) < 4 * sigma / np.sqrt(n)

    def test_same_rng_state_same_sample(self):
        p = GaussianParams(mu=torch.zeros(3, 2), log_sigma=torch.zeros(3, 2))
        a = sample_gaussian(p, torch.Generator().manual_seed(7))
        b = sample_gaussian(p, torch.Generator().manual_seed(7))
        np.testing.assert_array_equal(a, b)

    def test_gradient_flows_through_mu_and_sigma(self):
        mu = torch.zeros(2, 2, requires_grad=True)
        ls = torch.zeros(2, 2, requires_grad=True)
        draw = sample_gaussian(
            GaussianParams(mu, ls), torch.Generator().manual_seed(2)
        )
        g_mu, g_ls = torch.autograd.grad(draw.sum(), [mu, ls])
        assert g_mu.abs().sum() > 0
        assert g_ls.abs().sum() > 0


class TestGenerator:
    def test_output_shape_and_range(self, model16):
        z = torch.randn(4, 4)
        e = torch.randn(4, 4)
        img = model16.generate(z, e)
        assert img.shape == (4, 3, 16, 16)
        assert img.abs().max() < 1.0

    def test_deterministic(self, model16):
        z = torch.randn(2, 4)
        e = torch.randn(2, 4)
        np.testing.assert_array_equal(
            model16.generate(z, e).detach(), model16.generate(z, e).detach()
        )

    def test_dim_mismatch_rejected(self, model16):
        with pytest.raises(ShapeError):
            model16.generate(torch.randn(2, 4), torch.randn(2, 5))


class TestDiscriminators:
    def test_eval_mode_deterministic(self, model16):
        x = torch.rand(3, 3, 16, 16)
        z = torch.randn(3, 4)
        e = torch.randn(3, 4)
        a = model16.disc_joint(x, z, e).detach()
        b = model16.disc_joint(x, z, e).detach()
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3,)

    def test_ref_discriminator_takes_no_e(self, model16):
        x = torch.rand(3, 3, 16, 16)
        z = torch.randn(3, 4)
        out = model16.disc_ref(x, z)
        assert out.shape == (3,)
        with pytest.raises(ShapeError):
            model16.disc_ref(x, z, torch.randn(3, 4))

    def test_block_dropout_rate(self):
        """In training mode each block is zeroed ~25% of the time and the
        survivors are rescaled by 1/0.75."""
        n = 4000
        blocks = [torch.ones(n, 3), torch.ones(n, 2)]
        out = _block_dropout(blocks, 0.25, True, torch.Generator().manual_seed(0))
        for b in out:
            zero_rows = (b == 0).all(dim=1)
            frac = float(zero_rows.float().mean())
            assert abs(frac - 0.25) < 0.03
            survivors = b[~zero_rows]
            np.testing.assert_allclose(survivors.numpy(), 4.0 / 3.0, rtol=1e-6)

    def test_dropout_off_in_eval(self):
        blocks = [torch.ones(10, 3)]
        out = _block_dropout(blocks, 0.25, False, None)
        np.testing.assert_array_equal(out[0], blocks[0])


@pytest.mark.parametrize("size,blocks", [(16, 2), (32, 3), (64, 4)])
def test_shape_contract_across_sizes(size, blocks):
    """Encoders, generator, and discriminators compose at 16/32/64."""
    cfg = ArchConfig(image_size=size, base_channels=4, num_blocks=blocks,
                     d_z=3, d_e=5)
    model = build_model(cfg, "srbvae", seed=1)
    x = torch.rand(2, 3, size, size) * 2 - 1
    q_z, q_e = model.encode_z(x), model.encode_e(x)
    img = model.generate(q_z.mu, q_e.mu)
    assert img.shape == (2, 3, size, size)
    assert model.disc_joint(img, q_z.mu, q_e.mu).shape == (2,)
    assert model.disc_ref(img, q_z.mu).shape == (2,)


@pytest.mark.parametrize("size,blocks", [(16, 2), (32, 3)])
def test_gradient_reaches_every_parameter(size, blocks):
    """A scalar head on random input sends nonzero gradient into every
    parameter tensor of every network (no dead branches)."""
    cfg = ArchConfig(image_size=size, base_channels=4, num_blocks=blocks,
                     d_z=3, d_e=3)
    model = build_model(cfg, "srbvae", seed=2)
    g = torch.Generator().manual_seed(0)
    x = torch.rand((2, 3, size, size), generator=g) * 2 - 1
    z = torch.randn((2, 3), generator=g)
    e = torch.randn((2, 3), generator=g)

    q_z, q_e = model.encode_z(x), model.encode_e(x)
    scalar = (
        q_z.mu.sum() + q_z.log_sigma.sum()
        + q_e.mu.sum() + q_e.log_sigma.sum()
        + model.generate(z, e).sum()
        + model.disc_joint(x, z, e).sum()
        + model.disc_ref(x, z).sum()
        + model.e_ref.sum()
    )
    scalar.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum() > 0, name


def test_param_groups_partition(model16):
    groups = model16.param_groups()
    assert set(groups) == {"theta", "psi_z", "psi_e", "xi", "gamma"}
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids))
    assert len(ids) == len(list(model16.parameters()))
    assert any(p is model16.e_ref for p in groups["theta"])

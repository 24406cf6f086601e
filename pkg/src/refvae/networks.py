"""Network components: two Gaussian encoders, a generator, two joint
discriminators, and the learned reference code.

All modules are convolutional with LeakyReLU nonlinearities; encoders and
discriminators downsample with average pooling, the generator upsamples
with nearest-neighbor interpolation and pixel-wise feature normalization,
ending in tanh.  Channel widths are configurable so the same code runs at
desk scale and at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

LOG_SIGMA_CLAMP = 7.0

VARIANTS = ("vae", "beta_vae", "rbvae", "srbvae")
REFERENCE_VARIANTS = ("rbvae", "srbvae")


class ConfigError(ValueError):
    """Raised for inconsistent architecture or training configuration."""


class ShapeError(ValueError):
    """Raised when an input does not match the configured tensor shapes."""


@dataclass
class ArchConfig:
    image_size: int = 64
    base_channels: int = 32
    num_blocks: int = 4
    d_z: int = 32
    d_e: int = 32
    leaky_slope: float = 0.2
    disc_latent_dropout: float = 0.25
    max_channels: int = 256

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.image_size % (1 << self.num_blocks) != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by "
                f"2**num_blocks = {1 << self.num_blocks}"
            )
        if self.image_size >> self.num_blocks < 1:
            raise ConfigError("num_blocks too large for image_size")

    @property
    def start_size(self) -> int:
        return self.image_size >> self.num_blocks

    def channels(self) -> list[int]:
        return [
            min(self.base_channels << i, self.max_channels)
            for i in range(self.num_blocks + 1)
        ]


@dataclass
class GaussianParams:
    """Per-sample diagonal Gaussian: (N, D) mean and log standard deviation."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(
            self.mu.shape, generator=generator, dtype=self.mu.dtype,
            device=self.mu.device,
        )
        return self.mu + torch.exp(self.log_sigma) * eps


def sample_gaussian(
    p: GaussianParams, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Reparametrized draw mu + exp(log_sigma) * eps, eps ~ N(0, I)."""
    return p.sample(generator)


class PixelNorm(nn.Module):
    """Normalize each spatial feature vector to unit average square."""

    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x**2, dim=1, keepdim=True) + 1e-8)


def _check_image(x: torch.Tensor, size: int):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(
            f"expected image batch (N, 3, {size}, {size}), got {tuple(x.shape)}"
        )


class ConvEncoder(nn.Module):
    """Conv / LeakyReLU / average-pool trunk with a Gaussian head."""

    def __init__(self, cfg: ArchConfig, out_dim: int):
        super().__init__()
        self.cfg = cfg
        self.out_dim = out_dim
        chans = cfg.channels()
        layers = [
            nn.Conv2d(3, chans[0], 3, padding=1),
            nn.LeakyReLU(cfg.leaky_slope),
        ]
        for i in range(cfg.num_blocks):
            layers += [
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                nn.LeakyReLU(cfg.leaky_slope),
                nn.AvgPool2d(2),
            ]
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1] * cfg.start_size**2, 2 * out_dim)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        _check_image(x, self.cfg.image_size)
        h = self.trunk(x)
        out = self.head(h.flatten(1))
        mu, log_sigma = out.chunk(2, dim=1)
        return GaussianParams(
            mu=mu, log_sigma=torch.clamp(log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        )


class ConvGenerator(nn.Module):
    """Dense reshape followed by nearest-neighbor upsampling conv blocks
    with pixel-wise normalization; tanh output in (-1, 1)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = cfg.d_z + cfg.d_e
        chans = cfg.channels()
        self.fc = nn.Linear(self.latent_dim, chans[-1] * cfg.start_size**2)
        layers = []
        for i in range(cfg.num_blocks, 0, -1):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(chans[i], chans[i - 1], 3, padding=1),
                nn.LeakyReLU(cfg.leaky_slope),
                PixelNorm(),
            ]
        layers += [nn.Conv2d(chans[0], 3, 3, padding=1), nn.Tanh()]
        self.blocks = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 2 or latent.shape[1] != self.latent_dim:
            raise ShapeError(
                f"expected latent batch (N, {self.latent_dim}), "
                f"got {tuple(latent.shape)}"
            )
        s0 = self.cfg.start_size
        h = self.fc(latent).view(latent.shape[0], -1, s0, s0)
        return self.blocks(h)


def _block_dropout(
    blocks: list[torch.Tensor],
    p: float,
    train: bool,
    generator: torch.Generator | None,
):
    """Independently zero whole input blocks with probability p (rescaled
    like standard dropout).  Identity when not in training mode."""
    if not train or p <= 0:
        return blocks
    keep = 1.0 - p
    out = []
    for b in blocks:
        mask = (
            torch.rand(
                (b.shape[0], 1), generator=generator, dtype=b.dtype,
                device=b.device,
            )
            < keep
        ).to(b.dtype)
        out.append(b * mask / keep)
    return out


class JointDiscriminator(nn.Module):
    """Unbounded logit over (x, z, e) tuples; estimates a log-density ratio.

    The image passes through an encoder-style trunk; its features and the
    raw latent vectors feed a final fully connected stage.  In training
    mode each input block of that stage is independently dropped.
    """

    def __init__(self, cfg: ArchConfig, use_e: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_e = use_e
        chans = cfg.channels()
        layers = [
            nn.Conv2d(3, chans[0], 3, padding=1),
            nn.LeakyReLU(cfg.leaky_slope),
        ]
        for i in range(cfg.num_blocks):
            layers += [
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                nn.LeakyReLU(cfg.leaky_slope),
                nn.AvgPool2d(2),
            ]
        self.trunk = nn.Sequential(*layers)
        feat_dim = 4 * cfg.base_channels
        hidden = 8 * cfg.base_channels
        self.img_fc = nn.Linear(chans[-1] * cfg.start_size**2, feat_dim)
        latent_dim = cfg.d_z + (cfg.d_e if use_e else 0)
        self.final = nn.Sequential(
            nn.Linear(feat_dim + latent_dim, hidden),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(hidden, 1),
        )
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(
        self,
        x: torch.Tensor,
        z: torch.Tensor,
        e: torch.Tensor | None = None,
        train: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        _check_image(x, self.cfg.image_size)
        if (e is not None) != self.use_e:
            raise ShapeError(
                "this discriminator takes (x, z)" if not self.use_e
                else "this discriminator takes (x, z, e)"
            )
        if z.ndim != 2 or z.shape[1] != self.cfg.d_z or z.shape[0] != x.shape[0]:
            raise ShapeError(f"bad z shape {tuple(z.shape)}")
        feats = self.act(self.img_fc(self.trunk(x).flatten(1)))
        blocks = [feats, z]
        if self.use_e:
            if e.ndim != 2 or e.shape[1] != self.cfg.d_e or e.shape[0] != x.shape[0]:
                raise ShapeError(f"bad e shape {tuple(e.shape)}")
            blocks.append(e)
        blocks = _block_dropout(
            blocks, self.cfg.disc_latent_dropout, train, generator
        )
        return self.final(torch.cat(blocks, dim=1)).squeeze(1)


class ReferenceModel(nn.Module):
    """All trainable pieces for one model variant.

    rbvae/srbvae hold two encoders, a generator, and the learned reference
    code; srbvae adds the two discriminators.  vae/beta_vae hold a single
    encoder over a latent of combined width d_z + d_e so unsupervised
    baselines match total capacity.
    """

    def __init__(self, cfg: ArchConfig, variant: str):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected {VARIANTS}")
        self.cfg = cfg
        self.variant = variant
        self.generator = ConvGenerator(cfg)
        if variant in REFERENCE_VARIANTS:
            self.encoder_z = ConvEncoder(cfg, cfg.d_z)
            self.encoder_e = ConvEncoder(cfg, cfg.d_e)
            self.e_ref = nn.Parameter(torch.zeros(cfg.d_e))
        else:
            self.encoder_z = ConvEncoder(cfg, cfg.d_z + cfg.d_e)
            self.encoder_e = None
            self.e_ref = None
        if variant == "srbvae":
            self.disc_joint = JointDiscriminator(cfg, use_e=True)
            self.disc_ref = JointDiscriminator(cfg, use_e=False)
        else:
            self.disc_joint = None
            self.disc_ref = None

    @property
    def d_z(self) -> int:
        return self.cfg.d_z

    @property
    def d_e(self) -> int:
        return self.cfg.d_e

    # -- forward surfaces ---------------------------------------------------

    def encode_z(self, x) -> GaussianParams:
        return self.encoder_z(x)

    def encode_e(self, x) -> GaussianParams:
        if self.encoder_e is None:
            raise ConfigError(f"variant {self.variant!r} has no e-encoder")
        return self.encoder_e(x)

    def generate(self, z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.cfg.d_z or e.shape[1] != self.cfg.d_e:
            raise ShapeError(
                f"expected z width {self.cfg.d_z} and e width {self.cfg.d_e}, "
                f"got {z.shape[1]} and {e.shape[1]}"
            )
        return self.generator(torch.cat([z, e], dim=1))

    def generate_latent(self, v: torch.Tensor) -> torch.Tensor:
        """Generate from a single combined latent (vae/beta_vae path)."""
        return self.generator(v)

    def e_ref_batch(self, n: int) -> torch.Tensor:
        return self.e_ref.unsqueeze(0).expand(n, -1)

    # -- parameter bookkeeping ----------------------------------------------

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"theta": list(self.generator.parameters())}
        if self.e_ref is not None:
            groups["theta"].append(self.e_ref)
        groups["psi_z"] = list(self.encoder_z.parameters())
        if self.encoder_e is not None:
            groups["psi_e"] = list(self.encoder_e.parameters())
        if self.disc_joint is not None:
            groups["xi"] = list(self.disc_joint.parameters())
            groups["gamma"] = list(self.disc_ref.parameters())
        return groups


def init_params(
    model: nn.Module, generator: torch.Generator, leaky_slope: float = 0.2
) -> nn.Module:
    """Reinitialize all weights from the given generator: fan-in-scaled
    normal for conv/linear weights, zero biases, zero reference code."""
    gain = (2.0 / (1.0 + leaky_slope**2)) ** 0.5
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight.shape[1]
                if isinstance(mod, nn.Conv2d):
                    fan_in *= mod.weight.shape[2] * mod.weight.shape[3]
                std = gain / fan_in**0.5
                mod.weight.copy_(
                    torch.randn(mod.weight.shape, generator=generator) * std
                )
                if mod.bias is not None:
                    mod.bias.zero_()
        if getattr(model, "e_ref", None) is not None:
            model.e_ref.zero_()
    return model


def build_model(cfg: ArchConfig, variant: str, seed: int) -> ReferenceModel:
    """Construct and deterministically initialize a model variant."""
    model = ReferenceModel(cfg, variant)
    g = torch.Generator().manual_seed(seed)
    init_params(model, g, cfg.leaky_slope)
    return model


def parameter_checksum(model: nn.Module) -> str:
    """Order-stable digest of all parameter bytes (determinism checks)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()

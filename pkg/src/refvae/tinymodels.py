"""Miniature float64 models for gradient checking and update-sign audits.

These expose the same protocol as the conv models (encode_z / encode_e /
generate / e_ref_batch / disc_joint / disc_ref / param_groups) but treat
"images" as flat vectors and keep every piece linear with a handful of
scalar parameters, so losses are hand-computable and central differences
are cheap and well conditioned.
"""

from __future__ import annotations

import torch
from torch import nn

from .networks import LOG_SIGMA_CLAMP, GaussianParams


class TinyEncoder(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=torch.float64))
        self.log_sigma = nn.Parameter(torch.zeros(d_out, dtype=torch.float64))

    def forward(self, x) -> GaussianParams:
        mu = x @ self.weight.T
        log_sigma = torch.clamp(
            self.log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP
        ).expand_as(mu)
        return GaussianParams(mu=mu, log_sigma=log_sigma)


class TinyGenerator(nn.Module):
    def __init__(self, d_latent: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_latent, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=torch.float64))

    def forward(self, v):
        return v @ self.weight.T + self.bias


class TinyDiscriminator(nn.Module):
    """Linear score over the concatenated tuple."""

    def __init__(self, d_in: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_in, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, *tensors, train: bool = False, generator=None):
        h = torch.cat(tensors, dim=1)
        return h @ self.weight + self.bias


class TinyModel(nn.Module):
    """Protocol-compatible miniature model (flat vector "images")."""

    def __init__(
        self,
        d_x: int = 1,
        d_z: int = 1,
        d_e: int = 1,
        variant: str = "rbvae",
        seed: int = 0,
    ):
        super().__init__()
        self.variant = variant
        self._d_z = d_z
        self._d_e = d_e
        self.encoder_z = TinyEncoder(d_x, d_z)
        self.encoder_e = TinyEncoder(d_x, d_e)
        self.generator = TinyGenerator(d_z + d_e, d_x)
        self.e_ref = nn.Parameter(torch.zeros(d_e, dtype=torch.float64))
        if variant == "srbvae":
            self.disc_joint = TinyDiscriminator(d_x + d_z + d_e)
            self.disc_ref = TinyDiscriminator(d_x + d_z)
        else:
            self.disc_joint = None
            self.disc_ref = None
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=torch.float64))

    @property
    def d_z(self) -> int:
        return self._d_z

    @property
    def d_e(self) -> int:
        return self._d_e

    def encode_z(self, x) -> GaussianParams:
        return self.encoder_z(x)

    def encode_e(self, x) -> GaussianParams:
        return self.encoder_e(x)

    def generate(self, z, e):
        return self.generator(torch.cat([z, e], dim=1))

    def generate_latent(self, v):
        return self.generator(v)

    def e_ref_batch(self, n: int):
        return self.e_ref.unsqueeze(0).expand(n, -1)

    def param_groups(self):
        groups = {
            "theta": list(self.generator.parameters()) + [self.e_ref],
            "psi_z": list(self.encoder_z.parameters()),
            "psi_e": list(self.encoder_e.parameters()),
        }
        if self.disc_joint is not None:
            groups["xi"] = list(self.disc_joint.parameters())
            groups["gamma"] = list(self.disc_ref.parameters())
        return groups

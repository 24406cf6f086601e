"""Loss terms for all model variants.

Closed-form Gaussian KLs, Laplace image reconstruction, latent Gaussian
reconstruction, the conventional reference-based objective, the adversarial
symmetric objective with its two discriminator objectives, and the explicit
reconstruction terms that stabilize adversarial training.

Every function takes any object exposing the small model protocol
(encode_z / encode_e / generate / e_ref_batch / disc_joint / disc_ref plus
d_z and d_e), so the same losses run on full conv models and on tiny
float64 models used for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .networks import GaussianParams, ShapeError

PART_NAMES = (
    "kl_z_u",
    "kl_e_u",
    "recon_u",
    "kl_z_r",
    "recon_r",
    "adv_u",
    "adv_r",
    "latrec_z_u",
    "latrec_e_u",
    "latrec_z_r",
)


@dataclass
class LossReport:
    """A scalar objective with its named parts and per-part weights.

    Invariant: total == sum(weights[k] * parts[k]) for all parts.
    """

    total: torch.Tensor
    parts: dict[str, torch.Tensor]
    weights: dict[str, float]

    def to_floats(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        for k, v in self.parts.items():
            out[k] = float(v.detach())
        return out

    def check_finite(self):
        for k, v in self.parts.items():
            if not torch.isfinite(v).all():
                raise FloatingPointError(f"non-finite loss term {k!r}: {v}")
        if not torch.isfinite(self.total).all():
            raise FloatingPointError("non-finite total loss")


def merge_reports(*reports: LossReport) -> LossReport:
    total = sum(r.total for r in reports)
    parts, weights = {}, {}
    for r in reports:
        overlap = parts.keys() & r.parts.keys()
        if overlap:
            raise ValueError(f"duplicate loss parts {sorted(overlap)}")
        parts.update(r.parts)
        weights.update(r.weights)
    return LossReport(total=total, parts=parts, weights=weights)


# ---------------------------------------------------------------------------
# Elementary terms
# ---------------------------------------------------------------------------

def kl_diag_gauss_to_std(p: GaussianParams) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over dims, batch mean."""
    var = torch.exp(2.0 * p.log_sigma)
    per_sample = 0.5 * (p.mu**2 + var - 1.0 - 2.0 * p.log_sigma).sum(dim=1)
    return per_sample.mean()


def laplace_recon_nll(
    x: torch.Tensor, x_hat: torch.Tensor, lam: float
) -> torch.Tensor:
    """Laplace negative log-likelihood up to its constant: sum |x - x_hat|
    over pixels divided by the scale, batch mean."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if lam <= 0:
        raise ValueError(f"Laplace scale must be positive, got {lam}")
    per_sample = (x - x_hat).abs().flatten(1).sum(dim=1) / lam
    return per_sample.mean()


def gaussian_latent_nll(v: torch.Tensor, p: GaussianParams) -> torch.Tensor:
    """-log N(v | mu, diag sigma^2), summed over dims, batch mean."""
    if v.shape != p.mu.shape:
        raise ShapeError(f"shape mismatch {tuple(v.shape)} vs {tuple(p.mu.shape)}")
    inv_sigma = torch.exp(-p.log_sigma)
    per_sample = (
        0.5 * ((v - p.mu) * inv_sigma) ** 2
        + p.log_sigma
        + 0.5 * math.log(2.0 * math.pi)
    ).sum(dim=1)
    return per_sample.mean()


def sample_laplace(
    mean: torch.Tensor, scale: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Reparametrized Laplace draw around ``mean`` (noise has no gradient).

    The uniform draw is kept strictly inside (-1/2, 1/2); an exact endpoint
    would map to an infinite deviate.
    """
    u = (
        torch.rand(
            mean.shape, generator=generator, dtype=mean.dtype, device=mean.device
        )
        - 0.5
    )
    u = u.clamp(-0.5 + 1e-6, 0.5 - 1e-6)
    return mean - scale * torch.sign(u) * torch.log1p(-2.0 * u.abs())


def discriminator_objective(
    pos_logits: torch.Tensor, neg_logits: torch.Tensor
) -> torch.Tensor:
    """mean log sigmoid(pos) + mean log(1 - sigmoid(neg)), to be maximized.

    The maximizer's logit at a point equals the log-density ratio
    log(p_pos / p_neg) of the two sampling distributions.
    """
    return -F.softplus(-pos_logits).mean() - F.softplus(neg_logits).mean()


# ---------------------------------------------------------------------------
# Variant objectives
# ---------------------------------------------------------------------------

def vae_batch_loss(
    x: torch.Tensor,
    model,
    beta: float,
    lam: float,
    generator: torch.Generator | None = None,
) -> LossReport:
    """Plain VAE objective with a beta-weighted KL term (beta=1: standard)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    q = model.encode_z(x)
    v = q.sample(generator)
    kl = kl_diag_gauss_to_std(q)
    recon = laplace_recon_nll(x, model.generate_latent(v), lam)
    return LossReport(
        total=beta * kl + recon,
        parts={"kl_z_u": kl, "recon_u": recon},
        weights={"kl_z_u": beta, "recon_u": 1.0},
    )


def rbvae_batch_loss(
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    model,
    lam: float,
    generator: torch.Generator | None = None,
) -> LossReport:
    """Conventional variational objective over an unlabelled batch and a
    reference batch.

    The reference branch reconstructs through the learned reference code,
    so the e-encoder is never evaluated on reference images and receives
    no gradient from that branch.
    """
    q_z_u = model.encode_z(x_u)
    q_e_u = model.encode_e(x_u)
    z_u = q_z_u.sample(generator)
    e_u = q_e_u.sample(generator)
    kl_z_u = kl_diag_gauss_to_std(q_z_u)
    kl_e_u = kl_diag_gauss_to_std(q_e_u)
    recon_u = laplace_recon_nll(x_u, model.generate(z_u, e_u), lam)

    q_z_r = model.encode_z(x_r)
    z_r = q_z_r.sample(generator)
    kl_z_r = kl_diag_gauss_to_std(q_z_r)
    recon_r = laplace_recon_nll(
        x_r, model.generate(z_r, model.e_ref_batch(x_r.shape[0])), lam
    )

    parts = {
        "kl_z_u": kl_z_u,
        "kl_e_u": kl_e_u,
        "recon_u": recon_u,
        "kl_z_r": kl_z_r,
        "recon_r": recon_r,
    }
    weights = {k: 1.0 for k in parts}
    return LossReport(total=sum(parts.values()), parts=parts, weights=weights)


# ---------------------------------------------------------------------------
# Adversarial objective and sample paths
# ---------------------------------------------------------------------------

@dataclass
class SrbPaths:
    """All tuples one adversarial step scores.

    Encoder path: real images with reparametrized encoder samples (graph
    reaches the encoders).  Generator path: prior latents with sampled
    generator outputs (graph reaches the generator and reference code).
    """

    x_u: torch.Tensor
    z_u: torch.Tensor
    e_u: torch.Tensor
    x_r: torch.Tensor
    z_r: torch.Tensor
    x_gen: torch.Tensor
    z_gen: torch.Tensor
    e_gen: torch.Tensor
    x_gen_r: torch.Tensor
    z_gen_r: torch.Tensor


def sample_srbvae_paths(
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    model,
    lam: float,
    generator: torch.Generator | None = None,
) -> SrbPaths:
    m = x_u.shape[0]
    dtype, device = x_u.dtype, x_u.device
    z_u = model.encode_z(x_u).sample(generator)
    e_u = model.encode_e(x_u).sample(generator)
    z_r = model.encode_z(x_r).sample(generator)

    def prior(n, d):
        return torch.randn((n, d), generator=generator, dtype=dtype, device=device)

    z_gen = prior(m, model.d_z)
    e_gen = prior(m, model.d_e)
    x_gen = sample_laplace(model.generate(z_gen, e_gen), lam, generator)
    z_gen_r = prior(x_r.shape[0], model.d_z)
    x_gen_r = sample_laplace(
        model.generate(z_gen_r, model.e_ref_batch(x_r.shape[0])), lam, generator
    )
    return SrbPaths(
        x_u=x_u, z_u=z_u, e_u=e_u, x_r=x_r, z_r=z_r,
        x_gen=x_gen, z_gen=z_gen, e_gen=e_gen,
        x_gen_r=x_gen_r, z_gen_r=z_gen_r,
    )


@dataclass
class SrbLogits:
    joint_enc: torch.Tensor
    joint_gen: torch.Tensor
    ref_enc: torch.Tensor
    ref_gen: torch.Tensor


def srbvae_logits(
    paths: SrbPaths,
    model,
    train: bool = False,
    generator: torch.Generator | None = None,
) -> SrbLogits:
    return SrbLogits(
        joint_enc=model.disc_joint(
            paths.x_u, paths.z_u, paths.e_u, train=train, generator=generator
        ),
        joint_gen=model.disc_joint(
            paths.x_gen, paths.z_gen, paths.e_gen, train=train, generator=generator
        ),
        ref_enc=model.disc_ref(
            paths.x_r, paths.z_r, train=train, generator=generator
        ),
        ref_gen=model.disc_ref(
            paths.x_gen_r, paths.z_gen_r, train=train, generator=generator
        ),
    )


def adversarial_report(logits: SrbLogits) -> LossReport:
    """Model-side adversarial objective from precomputed logits.

    adv_u/adv_r are encoder-path minus generator-path mean scores; both
    discriminators' logits estimate log(encoder-path density /
    generator-path density), so minimizing over the encoders while
    ascending the generator-path terms over the generator descends the
    symmetric KL between the two joints.  Adding a constant to a
    discriminator leaves the value unchanged.
    """
    adv_u = logits.joint_enc.mean() - logits.joint_gen.mean()
    adv_r = logits.ref_enc.mean() - logits.ref_gen.mean()
    parts = {"adv_u": adv_u, "adv_r": adv_r}
    return LossReport(
        total=adv_u + adv_r, parts=parts, weights={k: 1.0 for k in parts}
    )


def srbvae_adversarial_loss(
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    model,
    lam: float = 0.01,
    generator: torch.Generator | None = None,
    train: bool = False,
) -> LossReport:
    """Sample both paths and score them (self-contained op surface)."""
    paths = sample_srbvae_paths(x_u, x_r, model, lam, generator)
    return adversarial_report(srbvae_logits(paths, model, train, generator))


def discriminator_losses(
    logits: SrbLogits,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-discriminator descent losses (negated logistic objectives).

    Encoder-path tuples are the positive class, generator-path tuples the
    negative class, so each maximized logit converges to the log-density
    ratio the model objective needs.
    """
    loss_joint = -discriminator_objective(logits.joint_enc, logits.joint_gen)
    loss_ref = -discriminator_objective(logits.ref_enc, logits.ref_gen)
    return loss_joint, loss_ref


# ---------------------------------------------------------------------------
# Explicit reconstruction terms
# ---------------------------------------------------------------------------

@dataclass
class ReconWeights:
    image_u: float = 1.0
    image_r: float = 1.0
    latent_u: float = 1.0
    latent_r: float = 1.0


def explicit_recon_terms(
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    model,
    lam: float,
    generator: torch.Generator | None = None,
    weights: ReconWeights | None = None,
) -> LossReport:
    """Image and latent reconstruction penalties added to the adversarial
    objective.

    Image terms: reconstruct unlabelled images through both encoders, and
    reference images through the z-encoder plus the reference code.  Latent
    terms: draw prior latents, generate, and require the encoders to
    reconstruct them; the reference branch reconstructs z only, so no
    gradient reaches the e-encoder from it.
    """
    if weights is None:
        weights = ReconWeights()
    q_z_u = model.encode_z(x_u)
    q_e_u = model.encode_e(x_u)
    recon_u = laplace_recon_nll(
        x_u, model.generate(q_z_u.sample(generator), q_e_u.sample(generator)), lam
    )

    q_z_r = model.encode_z(x_r)
    recon_r = laplace_recon_nll(
        x_r,
        model.generate(q_z_r.sample(generator), model.e_ref_batch(x_r.shape[0])),
        lam,
    )

    m = x_u.shape[0]
    dtype, device = x_u.dtype, x_u.device

    def prior(n, d):
        return torch.randn((n, d), generator=generator, dtype=dtype, device=device)

    z_gen = prior(m, model.d_z)
    e_gen = prior(m, model.d_e)
    x_gen = model.generate(z_gen, e_gen)
    latrec_z_u = gaussian_latent_nll(z_gen, model.encode_z(x_gen))
    latrec_e_u = gaussian_latent_nll(e_gen, model.encode_e(x_gen))

    z_gen_r = prior(x_r.shape[0], model.d_z)
    x_gen_r = model.generate(z_gen_r, model.e_ref_batch(x_r.shape[0]))
    latrec_z_r = gaussian_latent_nll(z_gen_r, model.encode_z(x_gen_r))

    parts = {
        "recon_u": recon_u,
        "recon_r": recon_r,
        "latrec_z_u": latrec_z_u,
        "latrec_e_u": latrec_e_u,
        "latrec_z_r": latrec_z_r,
    }
    w = {
        "recon_u": weights.image_u,
        "recon_r": weights.image_r,
        "latrec_z_u": weights.latent_u,
        "latrec_e_u": weights.latent_u,
        "latrec_z_r": weights.latent_r,
    }
    total = sum(w[k] * parts[k] for k in parts)
    return LossReport(total=total, parts=parts, weights=w)

"""Numerical ground truth for the variational identities and gradients.

A tractable linear-Gaussian joint model (every conditional and marginal
density in closed form) lets both sides of each variational identity be
estimated by Monte Carlo and compared: the direct joint KL against its
per-branch decomposition (forward and reverse), and the symmetric KL
against the four-expectation log-density-ratio form.  Dropped additive
constants (data entropies, prior entropies) are computed analytically and
re-added, never estimated.

Also here: the closed-form Gaussian log-density ratio with a logistic
regression fit check, and a central-difference gradient checker used by
the loss tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


# ---------------------------------------------------------------------------
# Diagonal Gaussians
# ---------------------------------------------------------------------------

@dataclass
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if (self.std <= 0).any():
            raise ValueError("std must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        zscore = (x - self.mean) / self.std
        return (
            -0.5 * (zscore**2).sum(axis=-1)
            - np.log(self.std).sum()
            - 0.5 * self.dim * math.log(2.0 * math.pi)
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def entropy(self) -> float:
        return float(
            0.5 * self.dim * (1.0 + math.log(2.0 * math.pi))
            + np.log(self.std).sum()
        )

    def kl_to(self, other: "DiagGaussian") -> float:
        return float(
            _kl_diag(self.mean, self.std, other.mean, other.std)
        )


def _kl_diag(m1, s1, m2, s2) -> np.ndarray:
    """KL between diagonal Gaussians, vectorized over leading axes."""
    return (
        np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2.0 * s2**2) - 0.5
    ).sum(axis=-1)


def analytic_gauss_log_ratio(
    p1: DiagGaussian, p2: DiagGaussian, x: np.ndarray
) -> np.ndarray:
    """Closed-form log N(x|p1) - log N(x|p2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1 and p1.dim == 1:
        x = x.reshape(-1, 1)
    return p1.logpdf(x) - p2.logpdf(x)


# ---------------------------------------------------------------------------
# Toy joint model
# ---------------------------------------------------------------------------

@dataclass
class ToyJointModel:
    """Linear-Gaussian instance of the reference-based generative model.

    Generator: x | z, e ~ N(W [z; e] + b, diag(x_std^2)).  Encoders are
    affine-Gaussian with fixed stds.  Marginals over x (unlabelled and
    reference) are single diagonal Gaussians so their entropies are exact.
    The reference-branch delta components cancel and are handled by
    substituting e_ref.
    """

    gen_w: np.ndarray
    gen_b: np.ndarray
    x_std: np.ndarray
    enc_z_w: np.ndarray
    enc_z_b: np.ndarray
    z_std: np.ndarray
    enc_e_w: np.ndarray
    enc_e_b: np.ndarray
    e_std: np.ndarray
    p_u: DiagGaussian
    p_r: DiagGaussian
    e_ref: np.ndarray

    def __post_init__(self):
        for name in ("gen_w", "gen_b", "x_std", "enc_z_w", "enc_z_b",
                     "z_std", "enc_e_w", "enc_e_b", "e_std", "e_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.d_x = self.gen_b.shape[0]
        self.d_z = self.enc_z_b.shape[0]
        self.d_e = self.enc_e_b.shape[0]
        self.p_z = DiagGaussian(np.zeros(self.d_z), np.ones(self.d_z))
        self.p_e = DiagGaussian(np.zeros(self.d_e), np.ones(self.d_e))

    # generator path
    def gen_mean(self, z: np.ndarray, e: np.ndarray) -> np.ndarray:
        return np.concatenate([z, e], axis=-1) @ self.gen_w.T + self.gen_b

    def log_p_x_given(self, x, z, e) -> np.ndarray:
        return _diag_logpdf(x, self.gen_mean(z, e), self.x_std)

    def sample_x_given(self, z, e, rng) -> np.ndarray:
        mean = self.gen_mean(z, e)
        return mean + self.x_std * rng.standard_normal(mean.shape)

    # encoders
    def q_z_mean(self, x) -> np.ndarray:
        return x @ self.enc_z_w.T + self.enc_z_b

    def q_e_mean(self, x) -> np.ndarray:
        return x @ self.enc_e_w.T + self.enc_e_b

    def log_q_z(self, z, x) -> np.ndarray:
        return _diag_logpdf(z, self.q_z_mean(x), self.z_std)

    def log_q_e(self, e, x) -> np.ndarray:
        return _diag_logpdf(e, self.q_e_mean(x), self.e_std)

    def sample_q_z(self, x, rng) -> np.ndarray:
        mean = self.q_z_mean(x)
        return mean + self.z_std * rng.standard_normal(mean.shape)

    def sample_q_e(self, x, rng) -> np.ndarray:
        mean = self.q_e_mean(x)
        return mean + self.e_std * rng.standard_normal(mean.shape)

    # per-sample closed-form conditional KLs
    def kl_qz_prior(self, x) -> np.ndarray:
        return _kl_diag(self.q_z_mean(x), self.z_std, 0.0, 1.0)

    def kl_qe_prior(self, x) -> np.ndarray:
        return _kl_diag(self.q_e_mean(x), self.e_std, 0.0, 1.0)

    def kl_gen_to(self, z, e, marginal: DiagGaussian) -> np.ndarray:
        return _kl_diag(self.gen_mean(z, e), self.x_std, marginal.mean, marginal.std)

    def e_ref_rows(self, n: int) -> np.ndarray:
        return np.broadcast_to(self.e_ref, (n, self.d_e))

    # analytic log-density ratios (encoder-path joint over generator-path joint)
    def log_ratio_xze(self, x, z, e) -> np.ndarray:
        return (
            self.log_q_z(z, x)
            + self.log_q_e(e, x)
            + self.p_u.logpdf(x)
            - self.log_p_x_given(x, z, e)
            - self.p_z.logpdf(z)
            - self.p_e.logpdf(e)
        )

    def log_ratio_xz(self, x, z) -> np.ndarray:
        e_ref = self.e_ref_rows(x.shape[0])
        return (
            self.log_q_z(z, x)
            + self.p_r.logpdf(x)
            - self.log_p_x_given(x, z, e_ref)
            - self.p_z.logpdf(z)
        )


def _diag_logpdf(x, mean, std) -> np.ndarray:
    zscore = (np.asarray(x, dtype=np.float64) - mean) / std
    d = std.shape[-1] if hasattr(std, "shape") and std.ndim else x.shape[-1]
    return (
        -0.5 * (zscore**2).sum(axis=-1)
        - np.log(std).sum()
        - 0.5 * d * math.log(2.0 * math.pi)
    )


def default_toy_model() -> ToyJointModel:
    """The committed toy model all oracle checks run against."""
    return ToyJointModel(
        gen_w=[[0.9, -0.2, 0.4, 0.1], [0.3, 0.8, -0.3, 0.5]],
        gen_b=[0.1, -0.2],
        x_std=[0.8, 0.7],
        enc_z_w=[[0.5, 0.2], [-0.3, 0.6]],
        enc_z_b=[0.1, 0.0],
        z_std=[0.9, 0.8],
        enc_e_w=[[0.2, -0.4], [0.4, 0.3]],
        enc_e_b=[-0.1, 0.2],
        e_std=[0.7, 1.1],
        p_u=DiagGaussian([0.3, -0.1], [1.2, 1.0]),
        p_r=DiagGaussian([-0.2, 0.4], [0.9, 1.1]),
        e_ref=[0.5, -0.3],
    )


def matched_toy_model() -> ToyJointModel:
    """A toy model where the encoder-path and generator-path joints
    coincide (generator ignores its latents, encoders equal the priors),
    so every KL between them is exactly zero."""
    b = np.array([0.1, -0.2])
    sx = np.array([0.8, 0.7])
    return ToyJointModel(
        gen_w=np.zeros((2, 4)),
        gen_b=b,
        x_std=sx,
        enc_z_w=np.zeros((2, 2)),
        enc_z_b=np.zeros(2),
        z_std=np.ones(2),
        enc_e_w=np.zeros((2, 2)),
        enc_e_b=np.zeros(2),
        e_std=np.ones(2),
        p_u=DiagGaussian(b, sx),
        p_r=DiagGaussian(b, sx),
        e_ref=[0.0, 0.0],
    )


# ---------------------------------------------------------------------------
# Identity reports
# ---------------------------------------------------------------------------

@dataclass
class IdentityReport:
    name: str
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    se_diff: float
    n_samples: int
    constants: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def diff(self) -> float:
        return self.lhs - self.rhs

    def tolerance(self, rel: float = 0.02, n_sigma: float = 3.0) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return max(rel * scale, n_sigma * self.se_diff)

    def passed(self, rel: float = 0.02, n_sigma: float = 3.0) -> bool:
        return abs(self.diff) <= self.tolerance(rel, n_sigma)

    def summary(self) -> str:
        status = "PASS" if self.passed() else "FAIL"
        return (
            f"{status} {self.name}: lhs={self.lhs:.5f} rhs={self.rhs:.5f} "
            f"|diff|={abs(self.diff):.5f} tol={self.tolerance():.5f} "
            f"(n={self.n_samples}, se_diff={self.se_diff:.5f})"
        )


def _report(name, lhs_i, rhs_i, n, paired, constants=None, extras=None):
    lhs_i = np.asarray(lhs_i)
    rhs_i = np.asarray(rhs_i)
    se_lhs = float(lhs_i.std(ddof=1) / math.sqrt(len(lhs_i)))
    se_rhs = float(rhs_i.std(ddof=1) / math.sqrt(len(rhs_i)))
    if paired:
        d = lhs_i - rhs_i
        se_diff = float(d.std(ddof=1) / math.sqrt(len(d)))
    else:
        se_diff = math.hypot(se_lhs, se_rhs)
    return IdentityReport(
        name=name,
        lhs=float(lhs_i.mean()),
        rhs=float(rhs_i.mean()),
        se_lhs=se_lhs,
        se_rhs=se_rhs,
        se_diff=se_diff,
        n_samples=n,
        constants=constants or {},
        extras=extras or {},
    )


def _forward_samples(m: ToyJointModel, n: int, rng: np.random.Generator):
    """Encoder-path draws for both branches (unlabelled and reference)."""
    x_u = m.p_u.sample(rng, n)
    z_u = m.sample_q_z(x_u, rng)
    e_u = m.sample_q_e(x_u, rng)
    x_r = m.p_r.sample(rng, n)
    z_r = m.sample_q_z(x_r, rng)
    return x_u, z_u, e_u, x_r, z_r


def mc_kl_forward_identity(
    m: ToyJointModel,
    n: int = 100_000,
    rng: np.random.Generator | None = None,
    include_constants: bool = True,
) -> IdentityReport:
    """Direct MC estimate of the joint KL (encoder path || generator path)
    against the per-branch decomposition: closed-form latent KLs plus
    reconstruction log-likelihoods, with the halved data entropies
    re-added.  Shared draws keep the comparison tight."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x_u, z_u, e_u, x_r, z_r = _forward_samples(m, n, rng)
    e_ref = m.e_ref_rows(n)

    lhs_i = 0.5 * m.log_ratio_xze(x_u, z_u, e_u) + 0.5 * m.log_ratio_xz(x_r, z_r)

    h_u = m.p_u.entropy()
    h_r = m.p_r.entropy()
    rhs_i = 0.5 * (
        m.kl_qz_prior(x_u)
        + m.kl_qe_prior(x_u)
        - m.log_p_x_given(x_u, z_u, e_u)
    ) + 0.5 * (m.kl_qz_prior(x_r) - m.log_p_x_given(x_r, z_r, e_ref))
    constants = {"H_u": h_u, "H_r": h_r, "added": -0.5 * h_u - 0.5 * h_r}
    if include_constants:
        rhs_i = rhs_i + constants["added"]
    return _report(
        "forward_kl_decomposition", lhs_i, rhs_i, n, paired=True,
        constants=constants,
    )


def _reverse_samples(m: ToyJointModel, n: int, rng: np.random.Generator):
    """Generator-path draws for both branches."""
    z_u = m.p_z.sample(rng, n)
    e_u = m.p_e.sample(rng, n)
    x_u = m.sample_x_given(z_u, e_u, rng)
    z_r = m.p_z.sample(rng, n)
    e_ref = m.e_ref_rows(n)
    x_r = m.sample_x_given(z_r, e_ref, rng)
    return x_u, z_u, e_u, x_r, z_r, e_ref


def mc_kl_reverse_identity(
    m: ToyJointModel,
    n: int = 100_000,
    rng: np.random.Generator | None = None,
    include_constants: bool = True,
) -> IdentityReport:
    """Direct MC estimate of the joint KL (generator path || encoder path)
    against its decomposition: closed-form KLs of the generator output to
    the data marginals plus latent reconstruction log-likelihoods, with
    prior entropies -H(z) - H(e)/2 re-added."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x_u, z_u, e_u, x_r, z_r, e_ref = _reverse_samples(m, n, rng)

    lhs_i = -0.5 * m.log_ratio_xze(x_u, z_u, e_u) - 0.5 * m.log_ratio_xz(x_r, z_r)

    h_z = m.p_z.entropy()
    h_e = m.p_e.entropy()
    rhs_i = 0.5 * (
        m.kl_gen_to(z_u, e_u, m.p_u)
        - m.log_q_z(z_u, x_u)
        - m.log_q_e(e_u, x_u)
    ) + 0.5 * (m.kl_gen_to(z_r, e_ref, m.p_r) - m.log_q_z(z_r, x_r))
    constants = {"H_z": h_z, "H_e": h_e, "added": -h_z - 0.5 * h_e}
    if include_constants:
        rhs_i = rhs_i + constants["added"]
    return _report(
        "reverse_kl_decomposition", lhs_i, rhs_i, n, paired=True,
        constants=constants,
    )


def mc_symmetric_identity(
    m: ToyJointModel,
    n: int = 100_000,
    rng: np.random.Generator | None = None,
) -> IdentityReport:
    """Symmetric KL (sum of direct estimates of both joint KLs) against
    the four-expectation form in the analytic log-density ratios, on
    independent draws.  Both the halved bookkeeping (matching the joint
    with uniform branch prior) and the unhalved sum are reported."""
    rng = rng if rng is not None else np.random.default_rng(0)
    xf_u, zf_u, ef_u, xf_r, zf_r = _forward_samples(m, n, rng)
    xr_u, zr_u, er_u, xr_r, zr_r, _ = _reverse_samples(m, n, rng)
    lhs_i = (
        0.5 * m.log_ratio_xze(xf_u, zf_u, ef_u)
        + 0.5 * m.log_ratio_xz(xf_r, zf_r)
        - 0.5 * m.log_ratio_xze(xr_u, zr_u, er_u)
        - 0.5 * m.log_ratio_xz(xr_r, zr_r)
    )

    xf_u2, zf_u2, ef_u2, xf_r2, zf_r2 = _forward_samples(m, n, rng)
    xr_u2, zr_u2, er_u2, xr_r2, zr_r2, _ = _reverse_samples(m, n, rng)
    rhs_i = 0.5 * (
        m.log_ratio_xze(xf_u2, zf_u2, ef_u2)
        + m.log_ratio_xz(xf_r2, zf_r2)
        - m.log_ratio_xze(xr_u2, zr_u2, er_u2)
        - m.log_ratio_xz(xr_r2, zr_r2)
    )
    report = _report(
        "symmetric_kl_ratio_form", lhs_i, rhs_i, n, paired=False,
        extras={"rhs_without_half": float(2.0 * rhs_i.mean())},
    )
    return report


# ---------------------------------------------------------------------------
# Density-ratio estimation check
# ---------------------------------------------------------------------------

@dataclass
class RatioFitReport:
    mae: float
    n_per_side: int
    grid: np.ndarray
    fitted: np.ndarray
    analytic: np.ndarray
    weights: np.ndarray

    def passed(self, threshold: float = 0.1) -> bool:
        return self.mae < threshold

    def summary(self) -> str:
        status = "PASS" if self.passed() else "FAIL"
        return (
            f"{status} density_ratio_fit: MAE={self.mae:.4f} "
            f"(n={self.n_per_side} per side)"
        )


def fit_logistic_ratio(
    x_pos: np.ndarray, x_neg: np.ndarray, iters: int = 100
) -> np.ndarray:
    """Newton-fit logistic regression with features [1, x, x^2]; the
    resulting logit estimates log(p_pos / p_neg) for 1-D Gaussians."""
    x = np.concatenate([x_pos, x_neg]).astype(np.float64).ravel()
    y = np.concatenate([np.ones(len(x_pos)), np.zeros(len(x_neg))])
    phi = np.column_stack([np.ones_like(x), x, x**2])
    w = np.zeros(3)
    reg = 1e-8
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-phi @ w))
        grad = phi.T @ (y - p) - reg * w
        hess = (phi * (p * (1 - p))[:, None]).T @ phi + reg * np.eye(3)
        step = np.linalg.solve(hess, grad)
        w = w + step
        if np.abs(step).max() < 1e-12:
            break
    return w


def density_ratio_fit_check(
    p1: DiagGaussian,
    p2: DiagGaussian,
    n: int = 10_000,
    rng: np.random.Generator | None = None,
    grid: np.ndarray | None = None,
) -> RatioFitReport:
    """Train a logistic-regression discriminator on samples from two 1-D
    Gaussians and compare its logit with the closed-form log-ratio."""
    if p1.dim != 1 or p2.dim != 1:
        raise ValueError("fit check is defined for 1-D Gaussians")
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = np.linspace(-2.0, 3.0, 101) if grid is None else np.asarray(grid)
    x_pos = p1.sample(rng, n).ravel()
    x_neg = p2.sample(rng, n).ravel()
    w = fit_logistic_ratio(x_pos, x_neg)
    phi = np.column_stack([np.ones_like(grid), grid, grid**2])
    fitted = phi @ w
    analytic = analytic_gauss_log_ratio(p1, p2, grid)
    return RatioFitReport(
        mae=float(np.abs(fitted - analytic).mean()),
        n_per_side=n,
        grid=grid,
        fitted=fitted,
        analytic=analytic,
        weights=w,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_diff_grad_check(
    loss_fn,
    params: list[torch.Tensor],
    eps: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative deviation between autograd and central differences.

    loss_fn must be deterministic under frozen noise and is re-evaluated
    with individual float64 parameter coordinates perturbed by +/- eps.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient checks require float64 parameters")
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for p, a in zip(params, analytic):
        a = torch.zeros_like(p) if a is None else a
        flat = p.detach().view(-1)
        n = flat.numel()
        coords = range(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for idx in coords:
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = orig - eps
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            an = float(a.view(-1)[idx])
            denom = max(abs(an), abs(fd))
            if denom < 1e-10:
                err = abs(an - fd)
            else:
                err = abs(an - fd) / denom
            worst = max(worst, err)
    return worst


def run_identity_suite(
    n: int = 100_000, seed: int = 0
) -> list[IdentityReport]:
    """All three identity checks on the committed toy model."""
    m = default_toy_model()
    return [
        mc_kl_forward_identity(m, n, np.random.default_rng([seed, 1])),
        mc_kl_reverse_identity(m, n, np.random.default_rng([seed, 2])),
        mc_symmetric_identity(m, n, np.random.default_rng([seed, 3])),
    ]

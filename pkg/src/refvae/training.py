"""Training loops, optimizer, and checkpointing.

vae/beta_vae/rbvae descend a single objective with Adam.  srbvae follows
the simultaneous four-gradient adversarial procedure: from one batch pair
it computes gradients for the encoders (psi), the generator plus reference
code (theta), and the two discriminators (xi, gamma), then applies all
updates at once.  The encoders descend the encoder-path discriminator
scores, the generator ascends the generator-path scores, and both
discriminators ascend their logistic objectives; explicit reconstruction
terms fold into the psi and theta gradients.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetPair, to_model_range
from .networks import ArchConfig, ConfigError, ReferenceModel, init_params
from .objectives import (
    PART_NAMES,
    LossReport,
    ReconWeights,
    adversarial_report,
    discriminator_losses,
    explicit_recon_terms,
    merge_reports,
    rbvae_batch_loss,
    sample_srbvae_paths,
    srbvae_logits,
    vae_batch_loss,
)

CHECKPOINT_FORMAT_VERSION = 1

METRIC_COLUMNS = (
    "step",
    "epoch",
    "total",
    *PART_NAMES,
    "disc_joint",
    "disc_ref",
    "acc_joint",
)


class TrainingError(RuntimeError):
    """Raised when a training run cannot continue (e.g. non-finite loss)."""


@dataclass
class TrainConfig:
    variant: str = "srbvae"
    epochs: int = 5
    batch_m: int = 36
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_recon: float = 0.01  # Laplace scale of the image likelihood
    beta: float = 1.0  # KL weight, beta_vae only
    recon_image_u: float = 1.0
    recon_image_r: float = 1.0
    recon_latent_u: float = 1.0
    recon_latent_r: float = 1.0
    seed: int = 0
    audit_structure: bool = False
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    freeze_groups: tuple = ()

    def __post_init__(self):
        from .networks import VARIANTS

        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.batch_m < 1:
            raise ConfigError("batch_m must be >= 1")
        for name in ("learning_rate", "beta1", "beta2", "adam_eps", "lambda_recon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def recon_weights(self) -> ReconWeights:
        return ReconWeights(
            image_u=self.recon_image_u,
            image_r=self.recon_image_r,
            latent_u=self.recon_latent_u,
            latent_r=self.recon_latent_r,
        )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_update(param, grad, m, v, t, lr, beta1=0.5, beta2=0.99, eps=1e-8):
    """One bias-corrected Adam step; returns (new_param, new_m, new_v).

    t is the 1-based step count after this update.
    """
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m_new / (1.0 - beta1**t)
    v_hat = v_new / (1.0 - beta2**t)
    return param - lr * m_hat / (torch.sqrt(v_hat) + eps), m_new, v_new


@dataclass
class GroupMoments:
    m: list
    v: list
    t: int = 0


def _init_moments(groups: dict[str, list]) -> dict[str, GroupMoments]:
    return {
        name: GroupMoments(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )
        for name, params in groups.items()
    }


def _apply_group(params, grads, moments: GroupMoments, cfg: TrainConfig):
    moments.t += 1
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            new_p, moments.m[i], moments.v[i] = adam_update(
                p, g, moments.m[i], moments.v[i], moments.t,
                cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
            )
            p.copy_(new_p)


# ---------------------------------------------------------------------------
# Train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: ReferenceModel
    moments: dict[str, GroupMoments]
    generator: torch.Generator
    step: int = 0
    epoch: int = 0
    metrics: list = field(default_factory=list)


def init_train_state(arch: ArchConfig, cfg: TrainConfig) -> TrainState:
    model = ReferenceModel(arch, cfg.variant)
    g = torch.Generator().manual_seed(cfg.seed)
    init_params(model, g, arch.leaky_slope)
    return TrainState(
        model=model, moments=_init_moments(model.param_groups()), generator=g
    )


def _grads(loss, params, retain=False):
    return torch.autograd.grad(
        loss, params, retain_graph=retain, allow_unused=True
    )


def _assert_no_grad(loss, params, what: str):
    grads = torch.autograd.grad(
        loss, params, retain_graph=True, allow_unused=True
    )
    bad = [i for i, g in enumerate(grads) if g is not None and g.abs().max() > 0]
    if bad:
        raise AssertionError(
            f"{what}: expected exactly zero gradient, got nonzero at "
            f"parameter indices {bad}"
        )


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def train_step_simple(
    x_u: torch.Tensor,
    x_r: torch.Tensor | None,
    state: TrainState,
    cfg: TrainConfig,
) -> LossReport:
    """One Adam descent step for the vae, beta_vae, or rbvae variants."""
    model = state.model
    if cfg.variant == "vae":
        report = vae_batch_loss(x_u, model, 1.0, cfg.lambda_recon, state.generator)
    elif cfg.variant == "beta_vae":
        report = vae_batch_loss(
            x_u, model, cfg.beta, cfg.lambda_recon, state.generator
        )
    elif cfg.variant == "rbvae":
        if x_r is None:
            raise ConfigError("rbvae step needs a reference batch")
        report = rbvae_batch_loss(
            x_u, x_r, model, cfg.lambda_recon, state.generator
        )
    else:
        raise ConfigError(f"train_step_simple cannot run variant {cfg.variant!r}")
    try:
        report.check_finite()
    except FloatingPointError as exc:
        raise TrainingError(f"aborting at step {state.step}: {exc}") from exc

    if cfg.audit_structure and cfg.variant == "rbvae":
        ref_terms = report.parts["kl_z_r"] + report.parts["recon_r"]
        _assert_no_grad(
            ref_terms, list(model.encoder_e.parameters()),
            "rbvae reference branch vs e-encoder",
        )

    groups = model.param_groups()
    all_params = [p for ps in groups.values() for p in ps]
    grads = _grads(report.total, all_params)
    grad_of = dict(zip(map(id, all_params), grads))
    for name, params in groups.items():
        if name in cfg.freeze_groups:
            continue
        _apply_group(params, [grad_of[id(p)] for p in params], state.moments[name], cfg)
    state.step += 1
    return report


def train_step_srbvae(
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    state: TrainState,
    cfg: TrainConfig,
) -> LossReport:
    """One simultaneous adversarial step over a batch pair.

    All four gradients are computed from the same sampled tuples and the
    same pre-update parameters, then applied together.  Discriminator
    objectives never touch theta/psi and vice versa: each group's update
    is taken only with respect to its own parameters.
    """
    model = state.model
    g = state.generator
    paths = sample_srbvae_paths(x_u, x_r, model, cfg.lambda_recon, g)
    logits = srbvae_logits(paths, model, train=True, generator=g)
    adv = adversarial_report(logits)
    recon = explicit_recon_terms(
        x_u, x_r, model, cfg.lambda_recon, g, cfg.recon_weights()
    )
    report = merge_reports(adv, recon)
    loss_d_joint, loss_d_ref = discriminator_losses(logits)
    try:
        report.check_finite()
        for name, val in (("disc_joint", loss_d_joint), ("disc_ref", loss_d_ref)):
            if not torch.isfinite(val):
                raise FloatingPointError(f"non-finite loss term {name!r}")
    except FloatingPointError as exc:
        raise TrainingError(f"aborting at step {state.step}: {exc}") from exc

    enc_score = logits.joint_enc.mean() + logits.ref_enc.mean()
    gen_score = logits.joint_gen.mean() + logits.ref_gen.mean()
    loss_psi = enc_score + recon.total
    loss_theta = -gen_score + recon.total

    if cfg.audit_structure:
        w = cfg.recon_weights()
        ref_branch = (
            logits.ref_enc.mean()
            - logits.ref_gen.mean()
            + w.image_r * recon.parts["recon_r"]
            + w.latent_r * recon.parts["latrec_z_r"]
        )
        _assert_no_grad(
            ref_branch, list(model.encoder_e.parameters()),
            "srbvae reference branch vs e-encoder",
        )

    groups = model.param_groups()
    psi_params = groups["psi_z"] + groups["psi_e"]
    g_psi = _grads(loss_psi, psi_params, retain=True)
    g_theta = _grads(loss_theta, groups["theta"], retain=True)
    g_xi = _grads(loss_d_joint, groups["xi"], retain=True)
    g_gamma = _grads(loss_d_ref, groups["gamma"])

    updates = {
        "psi_z": (groups["psi_z"], g_psi[: len(groups["psi_z"])]),
        "psi_e": (groups["psi_e"], g_psi[len(groups["psi_z"]) :]),
        "theta": (groups["theta"], g_theta),
        "xi": (groups["xi"], g_xi),
        "gamma": (groups["gamma"], g_gamma),
    }
    for name, (params, grads) in updates.items():
        if name in cfg.freeze_groups:
            continue
        _apply_group(params, grads, state.moments[name], cfg)
    state.step += 1

    # diagnostics: discriminator objectives and joint-discriminator accuracy
    with torch.no_grad():
        n_correct = (logits.joint_enc > 0).sum() + (logits.joint_gen <= 0).sum()
        acc = float(n_correct) / (len(logits.joint_enc) + len(logits.joint_gen))
    report.parts["_disc_joint"] = -loss_d_joint.detach()
    report.parts["_disc_ref"] = -loss_d_ref.detach()
    report.weights["_disc_joint"] = 0.0
    report.weights["_disc_ref"] = 0.0
    report.parts["_acc_joint"] = torch.tensor(acc)
    report.weights["_acc_joint"] = 0.0
    return report


def train_step(x_u, x_r, state: TrainState, cfg: TrainConfig) -> LossReport:
    if cfg.variant == "srbvae":
        if x_r is None:
            raise ConfigError("srbvae step needs a reference batch")
        return train_step_srbvae(x_u, x_r, state, cfg)
    return train_step_simple(x_u, x_r, state, cfg)


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------

def _to_batch(images: np.ndarray, idx: np.ndarray) -> torch.Tensor:
    arr = to_model_range(images[idx])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


class _RefSampler:
    """Deterministic reference batches: shuffled passes, reshuffled on
    exhaustion, independent of the unlabelled batch order."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_idx(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return out


def _needs_reference(variant: str) -> bool:
    return variant in ("rbvae", "srbvae")


def train(
    dataset: DatasetPair,
    arch: ArchConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    step_callback=None,
) -> dict:
    """Run the epoch loop and return the final checkpoint payload.

    Shuffling is derived from (seed, epoch), so resuming from an epoch
    checkpoint reproduces the uninterrupted run bit-exactly.
    """
    n_u = len(dataset.unlabelled)
    n_r = len(dataset.reference)
    if n_u < cfg.batch_m:
        raise ConfigError(
            f"unlabelled set ({n_u}) smaller than batch size {cfg.batch_m}"
        )
    if _needs_reference(cfg.variant) and n_r < cfg.batch_m:
        raise ConfigError(
            f"variant {cfg.variant!r} needs a reference set of at least "
            f"batch size {cfg.batch_m}, got {n_r}"
        )

    if resume_from is not None:
        state, arch, cfg_loaded = load_checkpoint(resume_from)
        cfg_loaded.epochs = cfg.epochs
        cfg = cfg_loaded
    else:
        state = init_train_state(arch, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = n_u // cfg.batch_m
    for epoch in range(state.epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n_u)
        ref_sampler = _RefSampler(
            n_r, cfg.batch_m, np.random.default_rng([cfg.seed, epoch, 1])
        ) if _needs_reference(cfg.variant) else None
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_m : (b + 1) * cfg.batch_m]
            x_u = _to_batch(dataset.unlabelled, idx)
            x_r = (
                _to_batch(dataset.reference, ref_sampler.next_idx())
                if ref_sampler is not None
                else None
            )
            report = train_step(x_u, x_r, state, cfg)
            row = {"step": state.step, "epoch": epoch}
            for k, v in report.to_floats().items():
                row[k.lstrip("_")] = v
            state.metrics.append(row)
            if step_callback is not None:
                step_callback(state, row)
        state.epoch = epoch + 1
        if (
            out_dir is not None
            and cfg.checkpoint_every
            and state.epoch % cfg.checkpoint_every == 0
            and state.epoch < cfg.epochs
        ):
            save_checkpoint(
                out_dir / f"ckpt_epoch_{state.epoch:03d}.pt", state, arch, cfg
            )

    payload = checkpoint_payload(state, arch, cfg)
    if out_dir is not None:
        torch.save(payload, out_dir / "ckpt_final.pt")
        write_metrics_csv(out_dir / "metrics.csv", state.metrics)
    return payload


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def checkpoint_payload(state: TrainState, arch: ArchConfig, cfg: TrainConfig) -> dict:
    params = {
        k: v.detach().cpu().numpy().copy()
        for k, v in state.model.state_dict().items()
    }
    moments = {
        name: {
            "m": [t.detach().cpu().numpy().copy() for t in gm.m],
            "v": [t.detach().cpu().numpy().copy() for t in gm.v],
            "t": gm.t,
        }
        for name, gm in state.moments.items()
    }
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": cfg.variant,
        "arch": asdict(arch),
        "train": asdict(cfg),
        "params": params,
        "moments": moments,
        "step": state.step,
        "epoch": state.epoch,
        "torch_rng": state.generator.get_state().numpy().copy(),
        "metrics": list(state.metrics),
    }


def save_checkpoint(path, state: TrainState, arch: ArchConfig, cfg: TrainConfig):
    torch.save(checkpoint_payload(state, arch, cfg), path)


def state_from_payload(payload: dict) -> tuple[TrainState, ArchConfig, TrainConfig]:
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format {payload.get('format_version')!r}"
        )
    arch = ArchConfig(**payload["arch"])
    train_kwargs = dict(payload["train"])
    train_kwargs["freeze_groups"] = tuple(train_kwargs.get("freeze_groups", ()))
    cfg = TrainConfig(**train_kwargs)
    model = ReferenceModel(arch, payload["variant"])
    model.load_state_dict(
        {k: torch.from_numpy(v.copy()) for k, v in payload["params"].items()}
    )
    moments = {
        name: GroupMoments(
            m=[torch.from_numpy(a.copy()) for a in gm["m"]],
            v=[torch.from_numpy(a.copy()) for a in gm["v"]],
            t=gm["t"],
        )
        for name, gm in payload["moments"].items()
    }
    g = torch.Generator()
    g.set_state(torch.from_numpy(payload["torch_rng"].copy()))
    state = TrainState(
        model=model,
        moments=moments,
        generator=g,
        step=payload["step"],
        epoch=payload["epoch"],
        metrics=list(payload["metrics"]),
    )
    return state, arch, cfg


def load_checkpoint(path) -> tuple[TrainState, ArchConfig, TrainConfig]:
    payload = torch.load(path, weights_only=False)
    return state_from_payload(payload)


def load_model(path_or_payload) -> tuple[ReferenceModel, ArchConfig, TrainConfig]:
    """Load just the model (evaluation-side convenience)."""
    if isinstance(path_or_payload, dict):
        state, arch, cfg = state_from_payload(path_or_payload)
    else:
        state, arch, cfg = load_checkpoint(path_or_payload)
    state.model.eval()
    return state.model, arch, cfg


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def write_metrics_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=METRIC_COLUMNS, restval="", extrasaction="ignore"
        )
        writer.writeheader()
        writer.writerows(rows)

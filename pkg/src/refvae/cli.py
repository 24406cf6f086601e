"""Command-line entry point.

Subcommands: synth (build a dataset), train, eval (linear probes),
generate (conditional synthesis grids), transfer (attribute transfer
panels), verify (numerical oracle suite).  Every command persists its
effective configuration beside its outputs and is reproducible from it.

Exit codes: 0 success, 2 configuration error, 3 I/O or data-format error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import evaluation as E
from . import oracles as O
from .networks import ArchConfig, ConfigError
from .objectives import explicit_recon_terms, rbvae_batch_loss, vae_batch_loss
from .tinymodels import TinyModel
from .training import TrainConfig, load_model, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4

GRAD_CHECK_TOL = 1e-3


def _write_effective_config(out_path: Path, command: str, args: argparse.Namespace):
    payload = {
        "command": command,
        "options": {
            k: v for k, v in sorted(vars(args).items()) if k not in ("func",)
        },
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _config_path_for(out) -> Path:
    out = Path(out)
    if out.suffix:
        return out.with_name(out.name + ".config.json")
    return out / "config.json"


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.toy:
        ds = D.make_toy_dataset(args.n, args.size, rng)
    elif args.digits:
        raw = D.synthetic_digits(args.digits, rng)
        ds = D.build_splits(raw, rng, image_size=args.size)
    elif args.mnist_dir:
        mnist = Path(args.mnist_dir)
        images = _find_idx(mnist, "train-images-idx3-ubyte")
        labels = _find_idx(mnist, "train-labels-idx1-ubyte")
        raw = D.load_idx(images, labels)
        ds = D.build_splits(raw, rng, image_size=args.size)
    else:
        raise ConfigError("choose a source: --toy, --digits N, or --mnist-dir DIR")
    manifest = D.save_dataset(ds, args.out, seed=args.seed)
    _write_effective_config(_config_path_for(args.out), "synth", args)
    print(
        f"wrote {manifest['counts']['reference']} reference + "
        f"{manifest['counts']['unlabelled']} unlabelled images "
        f"({ds.image_size}x{ds.image_size}) to {args.out}"
    )
    print(f"manifest hash: {D.manifest_hash(manifest)}")
    return EXIT_OK


def _find_idx(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{directory}: no {stem}[.gz]")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    ds = D.load_dataset(args.data)
    arch = ArchConfig(
        image_size=ds.image_size,
        base_channels=args.base_channels,
        num_blocks=args.num_blocks,
        d_z=args.d_z,
        d_e=args.d_e,
    )
    cfg = TrainConfig(
        variant=args.variant,
        epochs=args.epochs,
        batch_m=args.batch_m,
        learning_rate=args.lr,
        lambda_recon=args.lambda_recon,
        beta=args.beta,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        audit_structure=args.audit_structure,
    )
    out = Path(args.out)
    _write_effective_config(_config_path_for(out), "train", args)

    def progress(state, row):
        if state.step % args.log_every == 0:
            parts = ", ".join(
                f"{k}={row[k]:.3f}" for k in ("total",) if k in row
            )
            print(f"step {state.step} (epoch {row['epoch']}): {parts}")

    train(ds, arch, cfg, out_dir=out, resume_from=args.resume, step_callback=progress)
    print(f"checkpoint: {out / 'ckpt_final.pt'}")
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _, _ = load_model(args.ckpt)
    ds = D.load_dataset(args.data)
    results = {}
    for source in args.features:
        result = E.probe_factor_mae(model, ds, source, seed=args.seed, mode=args.mode)
        results[source] = result
        cells = " ".join(f"{k}={v:.4f}" for k, v in result.per_factor.items())
        print(f"features={source}: {cells} Avg={result.average:.4f}")
    if args.out:
        E.write_probe_csv(args.out, results)
        _write_effective_config(_config_path_for(args.out), "eval", args)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate / transfer
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    model, _, _ = load_model(args.ckpt)
    ds = D.load_dataset(args.data)
    if args.inputs > len(ds.unlabelled):
        raise ConfigError(
            f"asked for {args.inputs} inputs, dataset has {len(ds.unlabelled)}"
        )
    g = torch.Generator().manual_seed(args.seed)
    rows = []
    for i in range(args.inputs):
        x = ds.unlabelled[i]
        variations = E.conditional_generate(model, x, args.samples, g)
        rows.append([x] + list(variations))
    E.save_png(E.make_grid(rows), args.out)
    _write_effective_config(_config_path_for(args.out), "generate", args)
    print(f"wrote {args.inputs}x{args.samples + 1} grid to {args.out}")
    return EXIT_OK


def _load_panel_image(value: str, ds, size: int) -> np.ndarray:
    try:
        idx = int(value)
    except ValueError:
        from PIL import Image

        arr = np.asarray(Image.open(value).convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[0] != size or arr.shape[1] != size:
            raise ConfigError(
                f"{value}: expected {size}x{size} image, got {arr.shape[:2]}"
            )
        return arr
    if ds is None:
        raise ConfigError("integer image indices need --data")
    return ds.unlabelled[idx]


def cmd_transfer(args) -> int:
    model, arch, _ = load_model(args.ckpt)
    ds = D.load_dataset(args.data) if args.data else None
    x_a = _load_panel_image(args.a, ds, arch.image_size)
    x_b = _load_panel_image(args.b, ds, arch.image_size)
    out_img = E.attribute_transfer(model, x_a, x_b)
    E.save_png(E.make_grid([[x_a, x_b, out_img]]), args.out)
    _write_effective_config(_config_path_for(args.out), "transfer", args)
    print(f"wrote A/B/result panel to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _grad_check_cases():
    lam = 0.01
    g = lambda seed: torch.Generator().manual_seed(seed)  # noqa: E731
    gen = torch.Generator().manual_seed(99)
    x_u = torch.randn((3, 2), generator=gen, dtype=torch.float64)
    x_r = torch.randn((3, 2), generator=gen, dtype=torch.float64)

    rb = TinyModel(d_x=2, d_z=1, d_e=1, variant="rbvae", seed=1)
    yield (
        "rbvae_batch_loss",
        lambda: rbvae_batch_loss(x_u, x_r, rb, lam, g(5)).total,
        list(rb.parameters()),
    )
    rb2 = TinyModel(d_x=2, d_z=1, d_e=1, variant="rbvae", seed=2)
    yield (
        "explicit_recon_terms",
        lambda: explicit_recon_terms(x_u, x_r, rb2, lam, g(6)).total,
        list(rb2.parameters()),
    )
    va = TinyModel(d_x=2, d_z=2, d_e=0, variant="rbvae", seed=3)
    yield (
        "vae_batch_loss",
        lambda: vae_batch_loss(x_u, va, 1.0, lam, g(7)).total,
        [p for p in va.parameters() if p.numel()],
    )


def cmd_verify(args) -> int:
    failures = []
    reports = O.run_identity_suite(n=args.n, seed=args.seed)
    for rep in reports:
        print(rep.summary())
        if not rep.passed():
            failures.append(rep.name)

    ratio = O.density_ratio_fit_check(
        O.DiagGaussian([1.0], [1.0]),
        O.DiagGaussian([0.0], [1.0]),
        n=args.ratio_n,
        rng=np.random.default_rng([args.seed, 9]),
    )
    print(ratio.summary())
    if not ratio.passed():
        failures.append("density_ratio_fit")

    for name, loss_fn, params in _grad_check_cases():
        err = O.finite_diff_grad_check(loss_fn, params)
        ok = err < GRAD_CHECK_TOL
        print(
            f"{'PASS' if ok else 'FAIL'} grad_check {name}: "
            f"max relative error {err:.2e} (tol {GRAD_CHECK_TOL:.0e})"
        )
        if not ok:
            failures.append(f"grad_check_{name}")

    if failures:
        print(f"verification FAILED: {', '.join(failures)}")
        return EXIT_VERIFY
    print("all verification checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refvae",
        description="Reference-based variational autoencoders: data synthesis, "
        "training, evaluation, and numerical verification.",
    )
    parser.add_argument(
        "--config",
        help="JSON file of option defaults for the subcommand (flags win)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a dataset directory")
    p.add_argument("--toy", action="store_true", help="procedural bars/boxes corpus")
    p.add_argument("--digits", type=int, default=0,
                   help="N procedural glyph digits through the full pipeline")
    p.add_argument("--mnist-dir", help="directory with IDX train files")
    p.add_argument("--n", type=int, default=100, help="toy reference count")
    p.add_argument("--size", type=int, default=64, help="output image size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="srbvae",
                   choices=["vae", "beta_vae", "rbvae", "srbvae"])
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-m", type=int, default=36)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-recon", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=1.0, help="beta_vae KL weight")
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--num-blocks", type=int, default=4)
    p.add_argument("--d-z", type=int, default=32)
    p.add_argument("--d-e", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--audit-structure", action="store_true")
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="linear-probe evaluation of features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features", action="append", choices=["e", "z", "all"],
                   help="feature source (repeatable); default e")
    p.add_argument("--mode", default="mean", choices=["mean", "sample"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="conditional synthesis grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--inputs", type=int, default=4)
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("transfer", help="attribute transfer panel")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--a", required=True, help="image path or dataset index")
    p.add_argument("--b", required=True, help="image path or dataset index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("verify", help="numerical oracle suite")
    p.add_argument("--n", type=int, default=100_000, help="MC samples per identity")
    p.add_argument("--ratio-n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    parser._subcommands = {name: sp for name, sp in sub.choices.items()}
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # config values become the subcommand's defaults; explicit flags win
        defaults = json.loads(Path(args.config).read_text())
        parser._subcommands[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "features", None) is None and args.command == "eval":
        args.features = ["e"]
    try:
        return args.func(args)
    except (ConfigError, E.ProbeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.IdxFormatError, D.DatasetError, FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

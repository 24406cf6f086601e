"""Feature extraction, linear probes, and qualitative generation tools.

Probes are deliberately low capacity: a ridge regressor (tiny fixed ridge)
for continuous style factors and a multinomial logistic classifier for
class labels, both fit on frozen features.  Qualitative operations use
posterior means throughout so figures are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from sklearn.linear_model import LogisticRegression

from .data import DatasetPair, from_model_range, to_model_range
from .networks import ConfigError

FACTOR_COLUMNS = ("R", "G", "B", "Scale", "Width")

FEATURE_SOURCES = ("e", "z", "all")


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def _image_batch(images01: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(to_model_range(images01)).permute(0, 3, 1, 2).contiguous()


def extract_features(
    model,
    images01: np.ndarray,
    source: str = "e",
    mode: str = "mean",
    generator: torch.Generator | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Encode images to a feature matrix.

    source 'e'/'z' uses the matching encoder; 'all' concatenates z and e
    features (for variants without an e-encoder, 'all' is the single
    combined latent).  mode 'mean' takes posterior means, 'sample' one
    reparametrized draw per image.
    """
    if source not in FEATURE_SOURCES:
        raise ProbeError(f"unknown feature source {source!r}")
    if mode not in ("mean", "sample"):
        raise ProbeError(f"unknown inference mode {mode!r}")
    has_e = getattr(model, "encoder_e", None) is not None
    if source in ("e", "z") and not has_e:
        raise ProbeError(
            f"variant {model.variant!r} has a single combined latent; "
            "use source='all'"
        )
    if mode == "sample" and generator is None:
        generator = torch.Generator().manual_seed(0)

    model.eval()
    feats = []
    with torch.no_grad():
        for i in range(0, len(images01), batch_size):
            x = _image_batch(images01[i : i + batch_size])
            cols = []
            if source in ("z", "all"):
                q = model.encode_z(x)
                cols.append(q.mu if mode == "mean" else q.sample(generator))
            if source in ("e", "all") and has_e:
                q = model.encode_e(x)
                cols.append(q.mu if mode == "mean" else q.sample(generator))
            feats.append(torch.cat(cols, dim=1).numpy())
    return np.concatenate(feats, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    task: str  # "regression" | "classification"
    coef: np.ndarray | None = None  # (D+1, K) ridge solution incl. bias row
    clf: LogisticRegression | None = None
    condition_number: float = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.task == "regression":
            a = np.column_stack(
                [features.astype(np.float64), np.ones(len(features))]
            )
            return a @ self.coef
        return self.clf.predict(features)


def fit_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    task: str = "regression",
    ridge: float = 1e-4,
) -> LinearProbe:
    """Fit a linear readout on frozen features (deterministic solvers)."""
    if len(features) != len(labels):
        raise ProbeError(
            f"{len(features)} feature rows vs {len(labels)} label rows"
        )
    if not np.isfinite(features).all():
        raise ProbeError("features contain non-finite values")
    if task == "regression":
        x = np.column_stack(
            [features.astype(np.float64), np.ones(len(features))]
        )
        y = np.asarray(labels, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        gram = x.T @ x + ridge * np.eye(x.shape[1])
        cond = float(np.linalg.cond(gram))
        if not np.isfinite(cond):
            raise ProbeError(
                f"degenerate design matrix (condition number {cond})"
            )
        coef = np.linalg.solve(gram, x.T @ y)
        return LinearProbe(task=task, coef=coef, condition_number=cond)
    if task == "classification":
        clf = LogisticRegression(C=100.0, max_iter=2000)
        clf.fit(features.astype(np.float64), np.asarray(labels).ravel())
        return LinearProbe(task=task, clf=clf)
    raise ProbeError(f"unknown probe task {task!r}")


@dataclass
class ProbeResult:
    task: str
    per_factor: dict[str, float]
    average: float

    def csv_row(self, source: str) -> dict:
        row = {"features": source, **self.per_factor, "Avg": self.average}
        return row


def evaluate_probe(
    probe: LinearProbe,
    features: np.ndarray,
    labels: np.ndarray,
    factor_names: tuple = FACTOR_COLUMNS,
) -> ProbeResult:
    """Per-factor MAE for regression (width already mapped to [0, 1] in the
    label matrix) or per-class accuracy for classification."""
    pred = probe.predict(features)
    if probe.task == "regression":
        y = np.asarray(labels, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        mae = np.abs(pred - y).mean(axis=0)
        per = {name: float(m) for name, m in zip(factor_names, mae)}
        return ProbeResult(
            task="regression", per_factor=per, average=float(mae.mean())
        )
    y = np.asarray(labels).ravel()
    classes = np.unique(y)
    per = {
        str(c): float((pred[y == c] == c).mean()) for c in classes
    }
    return ProbeResult(
        task="classification",
        per_factor=per,
        average=float((pred == y).mean()),
    )


def split_three(
    n: int, seed: int, fractions: tuple = (0.5, 0.25, 0.25)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint model-training / probe-training / probe-evaluation split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    perm = np.random.default_rng([seed, 3]).permutation(n)
    n0 = int(n * fractions[0])
    n1 = int(n * fractions[1])
    return perm[:n0], perm[n0 : n0 + n1], perm[n0 + n1 :]


def probe_factor_mae(
    model,
    dataset: DatasetPair,
    source: str,
    seed: int = 0,
    mode: str = "mean",
) -> ProbeResult:
    """Three-way split, ridge probe on style factors, MAE on the held-out
    part (the model-training share is left untouched)."""
    _, train_idx, test_idx = split_three(len(dataset.unlabelled), seed)
    targets = dataset.factor_matrix()
    x_train = extract_features(model, dataset.unlabelled[train_idx], source, mode)
    x_test = extract_features(model, dataset.unlabelled[test_idx], source, mode)
    probe = fit_linear_probe(x_train, targets[train_idx], "regression")
    return evaluate_probe(probe, x_test, targets[test_idx])


def write_probe_csv(path, results: dict[str, ProbeResult]):
    """CSV with one row per feature source: R, G, B, Scale, Width, Avg."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["features", *FACTOR_COLUMNS, "Avg"], restval=""
        )
        writer.writeheader()
        for source, result in results.items():
            writer.writerow(result.csv_row(source))


# ---------------------------------------------------------------------------
# Qualitative operations (posterior means throughout)
# ---------------------------------------------------------------------------

def _encode_means(model, x01: np.ndarray):
    x = _image_batch(x01[None] if x01.ndim == 3 else x01)
    mu_z = model.encode_z(x).mu
    mu_e = model.encode_e(x).mu if model.encoder_e is not None else None
    return mu_z, mu_e


def attribute_transfer(model, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """Generate from the target factors of A and the common factors of B."""
    model.eval()
    with torch.no_grad():
        _, mu_e_a = _encode_means(model, x_a)
        mu_z_b, _ = _encode_means(model, x_b)
        if mu_e_a is None:
            raise ConfigError(
                f"variant {model.variant!r} has no e-encoder for transfer"
            )
        out = model.generate(mu_z_b, mu_e_a)
    return from_model_range(out[0].permute(1, 2, 0).numpy())


def reconstruct(model, x: np.ndarray) -> np.ndarray:
    """Posterior-mean reconstruction (identical to self-transfer)."""
    return attribute_transfer(model, x, x)


def conditional_generate(
    model,
    x: np.ndarray,
    n: int,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Keep the common factors of x, draw n target-factor vectors from the
    prior, and generate one image per draw."""
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    model.eval()
    with torch.no_grad():
        mu_z, _ = _encode_means(model, x)
        z = mu_z.expand(n, -1)
        e = torch.randn((n, model.d_e), generator=generator, dtype=mu_z.dtype)
        out = model.generate(z, e)
    return from_model_range(out.permute(0, 2, 3, 1).numpy())


# ---------------------------------------------------------------------------
# Image grids
# ---------------------------------------------------------------------------

def make_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Assemble [0, 1] HWC images into one grid image with white padding."""
    cell_h = max(img.shape[0] for row in rows for img in row)
    cell_w = max(img.shape[1] for row in rows for img in row)
    n_cols = max(len(row) for row in rows)
    grid = np.ones(
        (
            len(rows) * (cell_h + pad) + pad,
            n_cols * (cell_w + pad) + pad,
            3,
        ),
        dtype=np.float32,
    )
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            if img.ndim == 2:
                img = img[:, :, None].repeat(3, axis=2)
            y = pad + r * (cell_h + pad)
            x = pad + c * (cell_w + pad)
            grid[y : y + img.shape[0], x : x + img.shape[1]] = img
    return grid


def save_png(image01: np.ndarray, path):
    arr = (np.clip(image01, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)

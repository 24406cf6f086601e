"""Synthetic colored-digit data pipeline.

Raw grayscale digits are upscaled, reduced to their boundaries, and split
into a reference set (plain white outlines, the set where the target style
factors are constant) and an unlabelled set (outlines with randomized
stroke width, color, and scale).  The style parameters used to synthesize
each unlabelled image are kept as ground-truth labels for evaluation.

A fully procedural toy corpus (bars/boxes) and a procedural glyph-digit
generator are included so the whole pipeline runs without downloads.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_MAGIC_IMAGES = 2051
IDX_MAGIC_LABELS = 2049

DATASET_FORMAT_VERSION = 1


class IdxFormatError(ValueError):
    """Raised for files that are not valid IDX containers."""


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset directories."""


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Read a big-endian IDX file of unsigned bytes into an array.

    Transparently decompresses ``.gz`` files.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4:
            raise IdxFormatError(f"{path}: file too short for an IDX header")
        zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", header)
        if zero1 != 0 or zero2 != 0:
            raise IdxFormatError(f"{path}: bad IDX magic {header.hex()}")
        if dtype_code != 0x08:
            raise IdxFormatError(
                f"{path}: unsupported IDX element type 0x{dtype_code:02x} "
                "(only unsigned byte is supported)"
            )
        dim_bytes = f.read(4 * ndim)
        if len(dim_bytes) < 4 * ndim:
            raise IdxFormatError(f"{path}: truncated IDX dimension header")
        dims = struct.unpack(f">{ndim}I", dim_bytes)
        count = int(np.prod(dims, dtype=np.int64)) if dims else 0
        payload = f.read(count)
        if len(payload) < count:
            raise IdxFormatError(
                f"{path}: truncated IDX payload "
                f"(expected {count} bytes, got {len(payload)})"
            )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


@dataclass
class RawImageSet:
    """Grayscale source digits in [0, 1] with integer class labels."""

    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise DatasetError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)


def load_idx(images_path, labels_path=None) -> RawImageSet:
    """Load an IDX image file (magic 2051) and optional label file (2049)."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IdxFormatError(
            f"{images_path}: expected rank-3 image data (magic {IDX_MAGIC_IMAGES}), "
            f"got rank {images.ndim}"
        )
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError(
                f"{labels_path}: expected rank-1 label data (magic "
                f"{IDX_MAGIC_LABELS}), got rank {labels.ndim}"
            )
        if len(labels) != len(images):
            raise IdxFormatError(
                f"label count {len(labels)} does not match image count {len(images)}"
            )
    else:
        labels = np.zeros(len(images), dtype=np.int64)
    return RawImageSet(images.astype(np.float32) / 255.0, labels)


# ---------------------------------------------------------------------------
# Style factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleFactors:
    """Ground-truth style of one synthesized digit.

    width_k is a dilation kernel size in pixels, scale_s a downscale factor,
    and color_c a per-channel multiplier on the L1 simplex.
    """

    width_k: int
    scale_s: float
    color_c: np.ndarray

    def validate(self):
        if not (1 <= int(self.width_k) <= 10):
            raise ValueError(f"width_k must be in 1..10, got {self.width_k}")
        if not (0.5 <= self.scale_s <= 1.0):
            raise ValueError(f"scale_s must be in [0.5, 1], got {self.scale_s}")
        c = np.asarray(self.color_c, dtype=np.float64)
        if c.shape != (3,):
            raise ValueError(f"color_c must be a 3-vector, got shape {c.shape}")
        if (c < 0).any() or abs(float(c.sum()) - 1.0) > 1e-6:
            raise ValueError(f"color_c must be nonnegative and sum to 1, got {c}")


def sample_style_factors(rng: np.random.Generator) -> StyleFactors:
    """Draw style factors: width uniform on {1..10}, scale uniform on
    [0.5, 1], color an L1-normalized uniform draw from [0, 1]^3."""
    width_k = int(rng.integers(1, 11))
    scale_s = float(rng.uniform(0.5, 1.0))
    raw = rng.uniform(0.0, 1.0, size=3)
    while raw.sum() < 1e-9:  # measure-zero guard
        raw = rng.uniform(0.0, 1.0, size=3)
    color_c = (raw / raw.sum()).astype(np.float64)
    return StyleFactors(width_k=width_k, scale_s=scale_s, color_c=color_c)


# ---------------------------------------------------------------------------
# Image transforms
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array, half-pixel centers."""
    img = np.asarray(img, dtype=np.float32)
    in_h, in_w = img.shape[0], img.shape[1]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    ry0, ry1, fy = axis_coords(out_h, in_h)
    rx0, rx1, fx = axis_coords(out_w, in_w)
    if img.ndim == 3:
        wx, wy = fx[None, :, None], fy[:, None, None]
    else:
        wx, wy = fx[None, :], fy[:, None]
    top = img[ry0][:, rx0] * (1 - wx) + img[ry0][:, rx1] * wx
    bot = img[ry1][:, rx0] * (1 - wx) + img[ry1][:, rx1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def boundary_preprocess(img: np.ndarray, out_size: int = 64) -> np.ndarray:
    """Upscale a [0, 1] grayscale digit and keep only its boundary.

    The image is bilinearly upscaled, binarized at 0.5, and reduced to its
    morphological boundary (binary image minus its 3x3 erosion).  Output
    values are exactly 0 or 1.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    up = bilinear_resize(img, out_size, out_size)
    binary = up >= 0.5
    eroded = ndimage.binary_erosion(binary, structure=np.ones((3, 3), bool))
    return (binary & ~eroded).astype(np.float32)


def apply_style(template: np.ndarray, f: StyleFactors) -> np.ndarray:
    """Render a boundary template with the given style.

    Transform order: dilate by a width_k square kernel, colorize by
    multiplying each channel with color_c, downscale by scale_s and zero-pad
    back (centered) to the original resolution.  Deterministic.
    """
    f.validate()
    template = np.asarray(template, dtype=np.float32)
    if template.ndim != 2:
        raise ValueError(f"expected a 2-D template, got shape {template.shape}")
    size = template.shape[0]

    mask = template > 0.5
    if f.width_k > 1:
        mask = ndimage.binary_dilation(
            mask, structure=np.ones((f.width_k, f.width_k), bool)
        )
    gray = mask.astype(np.float32)
    rgb = gray[:, :, None] * np.asarray(f.color_c, dtype=np.float32)[None, None, :]

    if f.scale_s == 1.0:
        return rgb
    new = max(1, int(np.floor(size * f.scale_s + 0.5)))
    small = bilinear_resize(rgb, new, new)
    out = np.zeros((size, size, 3), dtype=np.float32)
    off = (size - new) // 2
    out[off : off + new, off : off + new] = small
    return out


def transformed_gray(template: np.ndarray, f: StyleFactors) -> np.ndarray:
    """Geometry-only version of apply_style (dilate + downscale, no color)."""
    white = StyleFactors(f.width_k, f.scale_s, np.full(3, 1 / 3))
    return apply_style(template, white)[:, :, 0] * 3.0


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class DatasetPair:
    """Reference set plus styled unlabelled set with ground-truth factors.

    ``templates`` holds the boundary image each unlabelled image was
    rendered from; ``u_source`` indexes into it.  Pixel values are stored
    in [0, 1]; conversion to the model's [-1, 1] range happens at batch
    assembly.
    """

    reference: np.ndarray  # (Nr, S, S, 3) float32
    unlabelled: np.ndarray  # (Nu, S, S, 3) float32
    templates: np.ndarray  # (Nt, S, S) float32
    u_source: np.ndarray  # (Nu,) int64 index into templates
    u_width: np.ndarray  # (Nu,) int64
    u_scale: np.ndarray  # (Nu,) float64
    u_color: np.ndarray  # (Nu, 3) float64
    u_class: np.ndarray | None = None  # (Nu,) int64, optional class labels
    image_size: int = field(default=0)

    def __post_init__(self):
        if self.image_size == 0:
            self.image_size = int(self.reference.shape[1])

    def factor_matrix(self) -> np.ndarray:
        """Per-image targets: columns R, G, B, Scale, Width (width mapped
        from {1..10} to [0, 1])."""
        width01 = (self.u_width.astype(np.float64) - 1.0) / 9.0
        return np.column_stack(
            [self.u_color, self.u_scale.astype(np.float64), width01]
        )

    def style_factors(self, i: int) -> StyleFactors:
        return StyleFactors(
            int(self.u_width[i]), float(self.u_scale[i]), self.u_color[i].copy()
        )


def build_splits(
    raw: RawImageSet, rng: np.random.Generator, image_size: int = 64
) -> DatasetPair:
    """Split raw digits into a reference half and a twice-transformed
    unlabelled set.

    Half of the images (boundary-preprocessed, replicated to 3 channels)
    become the reference set; each remaining image is styled twice with
    independent factors.
    """
    if len(raw) == 0:
        raise DatasetError("raw image set is empty")
    n = len(raw)
    perm = rng.permutation(n)
    ref_idx = perm[: n // 2]
    src_idx = perm[n // 2 :]

    ref = np.empty((len(ref_idx), image_size, image_size, 3), dtype=np.float32)
    for out, i in zip(ref, ref_idx):
        out[:] = boundary_preprocess(raw.images[i], image_size)[:, :, None]

    templates = np.empty((len(src_idx), image_size, image_size), dtype=np.float32)
    for out, i in zip(templates, src_idx):
        out[:] = boundary_preprocess(raw.images[i], image_size)

    n_unl = 2 * len(src_idx)
    unl = np.empty((n_unl, image_size, image_size, 3), dtype=np.float32)
    u_source = np.empty(n_unl, dtype=np.int64)
    u_width = np.empty(n_unl, dtype=np.int64)
    u_scale = np.empty(n_unl, dtype=np.float64)
    u_color = np.empty((n_unl, 3), dtype=np.float64)
    u_class = np.empty(n_unl, dtype=np.int64)
    for j in range(len(src_idx)):
        for rep in range(2):
            k = 2 * j + rep
            f = sample_style_factors(rng)
            unl[k] = apply_style(templates[j], f)
            u_source[k] = j
            u_width[k] = f.width_k
            u_scale[k] = f.scale_s
            u_color[k] = f.color_c
            u_class[k] = raw.labels[src_idx[j]]
    return DatasetPair(
        reference=ref,
        unlabelled=unl,
        templates=templates,
        u_source=u_source,
        u_width=u_width,
        u_scale=u_scale,
        u_color=u_color,
        u_class=u_class,
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# Procedural corpora (no downloads)
# ---------------------------------------------------------------------------

def _toy_template(size: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One white outline shape (0: h-bar, 1: v-bar, 2: box) on a black field."""
    img = np.zeros((size, size), dtype=np.float32)
    kind = int(rng.integers(0, 3))
    m = 2  # margin so strokes survive dilation near the border
    if kind == 0:
        r = int(rng.integers(m, size - m))
        c0, c1 = np.sort(rng.integers(m, size - m, size=2))
        img[r, c0 : c1 + 1] = 1.0
    elif kind == 1:
        c = int(rng.integers(m, size - m))
        r0, r1 = np.sort(rng.integers(m, size - m, size=2))
        img[r0 : r1 + 1, c] = 1.0
    else:
        lo = size // 4
        r0 = int(rng.integers(m, size - m - lo))
        c0 = int(rng.integers(m, size - m - lo))
        r1 = int(rng.integers(r0 + lo, size - m))
        c1 = int(rng.integers(c0 + lo, size - m))
        img[r0, c0 : c1 + 1] = 1.0
        img[r1, c0 : c1 + 1] = 1.0
        img[r0 : r1 + 1, c0] = 1.0
        img[r0 : r1 + 1, c1] = 1.0
    return img, kind


def make_toy_dataset(
    n: int, size: int, rng: np.random.Generator
) -> DatasetPair:
    """Procedural corpus: n white bar/box outlines as reference, 2n styled
    variants of n fresh shapes as unlabelled.  Runs without downloads."""
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    ref = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        shape, _ = _toy_template(size, rng)
        ref[i] = shape[:, :, None]

    templates = np.empty((n, size, size), dtype=np.float32)
    kinds = np.empty(n, dtype=np.int64)
    for i in range(n):
        templates[i], kinds[i] = _toy_template(size, rng)

    unl = np.empty((2 * n, size, size, 3), dtype=np.float32)
    u_source = np.empty(2 * n, dtype=np.int64)
    u_width = np.empty(2 * n, dtype=np.int64)
    u_scale = np.empty(2 * n, dtype=np.float64)
    u_color = np.empty((2 * n, 3), dtype=np.float64)
    u_class = np.empty(2 * n, dtype=np.int64)
    for j in range(n):
        for rep in range(2):
            k = 2 * j + rep
            f = sample_style_factors(rng)
            unl[k] = apply_style(templates[j], f)
            u_source[k] = j
            u_width[k] = f.width_k
            u_scale[k] = f.scale_s
            u_color[k] = f.color_c
            u_class[k] = kinds[j]
    return DatasetPair(
        reference=ref,
        unlabelled=unl,
        templates=templates,
        u_source=u_source,
        u_width=u_width,
        u_scale=u_scale,
        u_color=u_color,
        u_class=u_class,
        image_size=size,
    )


_DIGIT_GLYPHS = [
    " XXX |X   X|X   X|X   X|X   X|X   X| XXX ",
    "  X  | XX  |X X  |  X  |  X  |  X  |XXXXX",
    " XXX |X   X|    X|   X |  X  | X   |XXXXX",
    "XXXX |    X|    X| XXX |    X|    X|XXXX ",
    "X   X|X   X|X   X|XXXXX|    X|    X|    X",
    "XXXXX|X    |XXXX |    X|    X|X   X| XXX ",
    " XXX |X    |X    |XXXX |X   X|X   X| XXX ",
    "XXXXX|    X|   X |  X  | X   | X   | X   ",
    " XXX |X   X|X   X| XXX |X   X|X   X| XXX ",
    " XXX |X   X|X   X| XXXX|    X|    X| XXX ",
]


def _glyph_array(digit: int) -> np.ndarray:
    rows = _DIGIT_GLYPHS[digit].split("|")
    return np.array(
        [[1.0 if ch == "X" else 0.0 for ch in row] for row in rows],
        dtype=np.float32,
    )


def synthetic_digits(n: int, rng: np.random.Generator) -> RawImageSet:
    """Procedural 28x28 glyph digits with random placement and size jitter.

    A download-free stand-in for raw handwritten digits; feeds the same
    boundary/style pipeline via build_splits.
    """
    images = np.empty((n, 28, 28), dtype=np.float32)
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    for i in range(n):
        glyph = _glyph_array(int(labels[i]))
        h = int(rng.integers(14, 23))
        w = int(rng.integers(10, 17))
        patch = bilinear_resize(glyph, h, w)
        canvas = np.zeros((28, 28), dtype=np.float32)
        r0 = int(rng.integers(0, 28 - h + 1))
        c0 = int(rng.integers(0, 28 - w + 1))
        canvas[r0 : r0 + h, c0 : c0 + w] = patch
        images[i] = np.clip(canvas, 0.0, 1.0)
    return RawImageSet(images, labels)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = (
    "reference",
    "unlabelled",
    "templates",
    "u_source",
    "u_width",
    "u_scale",
    "u_color",
    "u_class",
)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: DatasetPair, out_dir, seed=None) -> dict:
    """Write a dataset directory: one .npy per array plus manifest.json.

    The manifest records counts, the synthesis seed, and the content hash
    of every array, so identical synthesis runs produce identical
    manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name in _ARRAY_FIELDS:
        value = getattr(ds, name)
        if value is None:
            continue
        fname = f"{name}.npy"
        np.save(out_dir / fname, value)
        arrays[name] = {"file": fname, "sha256": _sha256_file(out_dir / fname)}
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "dataset_pair",
        "image_size": int(ds.image_size),
        "channels": 3,
        "counts": {
            "reference": int(len(ds.reference)),
            "unlabelled": int(len(ds.unlabelled)),
            "templates": int(len(ds.templates)),
        },
        "seed": seed,
        "arrays": arrays,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    return manifest


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()
    ).hexdigest()


def load_dataset(in_dir) -> DatasetPair:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{in_dir}: no manifest.json (not a dataset directory)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "dataset_pair":
        raise DatasetError(f"{in_dir}: unexpected dataset kind {manifest.get('kind')}")
    kwargs = {}
    for name, entry in manifest["arrays"].items():
        kwargs[name] = np.load(in_dir / entry["file"])
    kwargs.setdefault("u_class", None)
    return DatasetPair(image_size=manifest["image_size"], **kwargs)


# ---------------------------------------------------------------------------
# Pixel range conversion
# ---------------------------------------------------------------------------

def to_model_range(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to the generator's [-1, 1] range."""
    return np.asarray(x, dtype=np.float32) * 2.0 - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)

"""Data model, dataset ingestion, configuration and toy-data synthesis.

Images are held internally as float64 grids normalized to [0, 1] regardless
of on-disk bit depth; loss functions downstream are scale-sensitive, so a
fixed range keeps tolerances meaningful. On disk a sample is a 16-bit
grayscale PNG, an 8-bit {0, 255} mask PNG and an optional ``.meta`` sidecar
(key = value lines) carrying provenance and the perturbation record.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import RngStream
from .validation import check_image, check_mask, check_same_shape

LABELS = ("normal", "nodule")
POSITIVE_LABEL = "nodule"
SPLITS = ("train", "test")
PROVENANCES = ("real", "synthetic")

DATA_DIR_ENV = "AL_FORGE_DATA_DIR"

# 16-bit quantization grid used by save_sample; values on this grid
# round-trip through disk bit-exactly.
_QLEVELS = 65535


def quantize01(pixels: np.ndarray) -> np.ndarray:
    """Snap intensities to the 16-bit storage grid."""
    return np.round(np.asarray(pixels, dtype=np.float64) * _QLEVELS) / _QLEVELS


@dataclass(frozen=True)
class ImageSample:
    """One intensity grid + binary mask + label, with synthesis lineage."""

    id: str
    pixels: np.ndarray
    mask: np.ndarray
    label: str
    provenance: str = "real"
    parent_id: str | None = None
    perturbation: object | None = None

    def __post_init__(self):
        pixels = check_image(self.pixels, "pixels")
        mask = check_mask(self.mask, "mask")
        check_same_shape(pixels, mask, ("pixels", "mask"))
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "synthetic":
            if self.parent_id is None or self.perturbation is None:
                raise DataError(
                    f"synthetic sample {self.id} must carry parent_id and "
                    "perturbation"
                )
        pixels.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_label_of(self, parent: "ImageSample") -> "ImageSample":
        return replace(self, label=parent.label)


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    mask_path: str
    label: str
    split: str

    @property
    def sample_id(self) -> str:
        return Path(self.image_path).stem


@dataclass(frozen=True)
class DatasetManifest:
    """Validated listing of (image, mask, label, split) records."""

    records: tuple[ManifestRecord, ...]
    root: Path

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        counts = {label: 0 for label in LABELS}
        for rec in self.records:
            if split is None or rec.split == split:
                counts[rec.label] += 1
        return counts

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [rec for rec in self.records if rec.split == split]

    def record_by_id(self, sample_id: str) -> ManifestRecord:
        for rec in self.records:
            if rec.sample_id == sample_id:
                return rec
        raise DataError(f"no manifest record with id {sample_id!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """All tunables of one experiment.

    The first block mirrors the published recipe (16 seed images per class,
    200-fold augmentation, top-16 balanced selection, lambda = 10); the
    second block holds desk-scale training knobs whose defaults were chosen
    for 64x64 toy runs and are documented in the README.
    """

    seed: int = 0
    initial_per_class: int = 16
    top_k_per_class: int = 16
    augment_factor: int = 200
    synth_per_image: int = 200
    lambda_l1: float = 10.0
    content_weight: float = 1.0
    t_mc: int = 20
    dropout_rate: float = 0.5
    stop_tolerance: float = 0.005
    stop_patience: int = 2
    image_size: tuple[int, int] = (64, 64)

    # dataset-level augmentation factor for the fully supervised baseline;
    # deliberately a separate field from augment_factor (see README)
    fsl_augment_factor: int = 500
    fsl_finetune_steps: int = 600

    # mask autoencoder
    code_dim: int = 32
    ae_channels: int = 8
    ae_steps: int = 300
    ae_lr: float = 2e-3
    ae_holdout_fraction: float = 0.25
    ae_accuracy_threshold: float = 0.95

    # conditional GAN
    gan_channels: int = 64
    gan_blocks: int = 6
    gan_steps: int = 400
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    gan_pairs_per_image: int = 4
    gan_batch: int | None = None  # None -> effective_batch_size
    z_channels: int = 1

    # perturbation mix: probability each procedure joins a composition
    p_boundary: float = 0.6
    p_remap: float = 0.15
    p_geometric: float = 0.6
    points_per_segment: int = 25
    max_segments: int = 4

    # classifier / segmenter
    feature_channels: int = 24
    backbone_steps: int = 300
    head_steps: int = 150
    head_lr: float = 3e-3
    segmenter_channels: int = 8
    segmenter_steps: int = 300
    learning_rate: float = 1e-3
    het_train_samples: int = 8
    batch_size: int | None = None  # None -> 2 * initial_per_class
    nmi_bins: int = 64

    # generic-backbone pretraining (the external-weights stand-in); shared
    # across experiment seeds like the weights it replaces
    pretext_corpus: int = 3072
    pretext_steps: int = 1000
    pretext_seed: int = 1234

    # loop control
    max_rounds: int = 12
    pool_subsample: int = 0  # 0 -> use the whole pool every round
    torch_threads: int = 1

    def __post_init__(self):
        counts = {
            "initial_per_class": self.initial_per_class,
            "top_k_per_class": self.top_k_per_class,
            "augment_factor": self.augment_factor,
            "t_mc": self.t_mc,
            "stop_patience": self.stop_patience,
            "max_rounds": self.max_rounds,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.synth_per_image < 0:
            raise ConfigError("synth_per_image must be >= 0")
        if self.lambda_l1 <= 0:
            raise ConfigError("lambda_l1 must be > 0")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in (0, 1)")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigError(f"image_size {self.image_size} unsupported")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    @property
    def effective_batch_size(self) -> int:
        # "batch size is the same as the initial number of samples"
        return self.batch_size or 2 * self.initial_per_class

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# ---------------------------------------------------------------------------
# sample serialization


def save_sample(sample: ImageSample, out_dir: Path) -> tuple[Path, Path]:
    """Write image/mask PNGs plus a ``.meta`` sidecar; returns the PNG paths.

    Intensities are quantized to the 16-bit grid, so loading the files back
    reproduces the stored arrays bit-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{sample.id}.png"
    mask_path = out_dir / f"{sample.id}_mask.png"
    img16 = np.round(sample.pixels * _QLEVELS).astype(np.uint16)
    Image.fromarray(img16, mode="I;16").save(img_path)
    Image.fromarray(sample.mask * 255, mode="L").save(mask_path)

    lines = [
        f"id = {sample.id}",
        f"label = {sample.label}",
        f"provenance = {sample.provenance}",
    ]
    if sample.parent_id is not None:
        lines.append(f"parent_id = {sample.parent_id}")
    if sample.perturbation is not None:
        lines.append("[perturbation]")
        lines.append(sample.perturbation.to_kv_block())
    (out_dir / f"{sample.id}.meta").write_text("\n".join(lines) + "\n")
    return img_path, mask_path


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"missing image file {path}")
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}")
    if arr.ndim != 2:
        raise DataError(f"{path} is not single-channel grayscale")
    return arr


def load_image(path: Path) -> np.ndarray:
    """Load a grayscale raster into [0, 1] float64, any of 8/16-bit depth."""
    arr = _read_gray(path)
    maxval = 255 if arr.dtype == np.uint8 else _QLEVELS
    return arr.astype(np.float64) / maxval


def load_mask(path: Path) -> np.ndarray:
    arr = _read_gray(path)
    top = int(arr.max()) if arr.size else 0
    vals = np.unique(arr)
    if top == 0:
        return np.zeros_like(arr, dtype=np.uint8)
    if not np.isin(vals, (0, top)).all():
        raise DataError(f"mask {path} is not strictly binary (values {vals[:8]})")
    return (arr == top).astype(np.uint8)


def load_sample(record: ManifestRecord, root: Path) -> ImageSample:
    root = Path(root)
    pixels = load_image(root / record.image_path)
    mask = load_mask(root / record.mask_path)
    meta = _read_meta(root / record.image_path)
    return ImageSample(
        id=record.sample_id,
        pixels=pixels,
        mask=mask,
        label=record.label,
        provenance=meta.get("provenance", "real"),
        parent_id=meta.get("parent_id"),
        perturbation=meta.get("perturbation"),
    )


def _read_meta(image_path: Path) -> dict:
    meta_path = image_path.with_suffix(".meta")
    if not meta_path.exists():
        return {}
    meta: dict = {}
    text = meta_path.read_text()
    head, _, spec_block = text.partition("[perturbation]")
    for line in head.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    if spec_block.strip():
        from .maskops import PerturbationSpec  # local import avoids a cycle

        meta["perturbation"] = PerturbationSpec.from_kv_block(spec_block)
    return meta


def load_samples(manifest: DatasetManifest, split: str | None = None) -> list[ImageSample]:
    records = manifest.records if split is None else manifest.split_records(split)
    return [load_sample(rec, manifest.root) for rec in records]


# ---------------------------------------------------------------------------
# manifest ingestion

_MANIFEST_HEADER = ["image_path", "mask_path", "label", "split"]


def load_manifest(path: Path) -> DatasetManifest:
    """Parse and validate a comma-separated dataset manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = Path(os.environ.get(DATA_DIR_ENV) or path.parent)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {path} has no records")
        if [h.strip() for h in header] != _MANIFEST_HEADER:
            raise DataError(
                f"manifest {path} header must be "
                f"{','.join(_MANIFEST_HEADER)!r}, got {','.join(header)!r}"
            )
        records = []
        seen_paths: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DataError(f"manifest {path} line {lineno}: expected 4 fields")
            image_path, mask_path, label, split = (cell.strip() for cell in row)
            if label not in LABELS:
                raise DataError(f"manifest line {lineno}: unknown label {label!r}")
            if split not in SPLITS:
                raise DataError(f"manifest line {lineno}: unknown split {split!r}")
            if image_path in seen_paths or mask_path in seen_paths:
                raise DataError(f"manifest line {lineno}: duplicate path")
            seen_paths.update((image_path, mask_path))
            if not (root / image_path).exists():
                raise DataError(
                    f"manifest line {lineno}: image file missing: {image_path}"
                )
            if not (root / mask_path).exists():
                raise DataError(
                    f"manifest line {lineno}: mask file missing for record "
                    f"{Path(image_path).stem!r}: {mask_path}"
                )
            records.append(ManifestRecord(image_path, mask_path, label, split))

    if not records:
        raise DataError(f"manifest {path} has no records")
    return DatasetManifest(records=tuple(records), root=root)


def write_manifest(records, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        for rec in records:
            writer.writerow([rec.image_path, rec.mask_path, rec.label, rec.split])


# ---------------------------------------------------------------------------
# toy dataset

# background body intensity band and dark "lung" band; nodules are small
# bright Gaussian bumps inside the mask, while faint vessel-like bumps
# appear in both classes, so the classes are separated by a contrast
# threshold rather than by bare bump presence
_BODY_BASE = 0.68
_LUNG_BASE = 0.27
_VESSEL_CONTRAST = (0.03, 0.12)
_NODULE_EASY = (0.17, 0.40)
_NODULE_HARD = (0.10, 0.17)
_HARD_NODULE_FRACTION = 0.45
_BUMP_RADIUS = (1.6, 3.0)


def _ellipse_mask(center, axes, angle, yy, xx):
    cy, cx = center
    ay, ax = axes
    cos, sin = np.cos(angle), np.sin(angle)
    u = (yy - cy) * cos + (xx - cx) * sin
    v = -(yy - cy) * sin + (xx - cx) * cos
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def _add_bump(img, mask, contrast, rng, yy, xx):
    from scipy.ndimage import binary_erosion

    radius = rng.uniform(*_BUMP_RADIUS)
    margin = int(np.ceil(radius)) + 2
    allowed = binary_erosion(mask, iterations=margin)
    if not allowed.any():  # tiny blob: place anywhere inside
        allowed = mask
    ys, xs = np.nonzero(allowed)
    pick = rng.integers(len(ys))
    d2 = (yy - ys[pick]) ** 2 + (xx - xs[pick]) ** 2
    return img + contrast * np.exp(-d2 / (2.0 * radius**2))


def _toy_sample(sample_id, label, image_size, rng: np.random.Generator) -> ImageSample:
    from scipy.ndimage import gaussian_filter

    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    grad = 0.06 * (yy / max(h - 1, 1) - 0.5)
    img = _BODY_BASE + grad + rng.normal(0.0, 0.04, size=(h, w))

    center = (
        h * (0.5 + rng.uniform(-0.06, 0.06)),
        w * (0.5 + rng.uniform(-0.06, 0.06)),
    )
    axes = (h * rng.uniform(0.26, 0.36), w * rng.uniform(0.20, 0.30))
    angle = rng.uniform(-0.35, 0.35)
    mask = _ellipse_mask(center, axes, angle, yy, xx)
    img[mask] = _LUNG_BASE + rng.normal(0.0, 0.05, size=int(mask.sum()))

    for _ in range(int(rng.integers(0, 3))):
        img = _add_bump(img, mask, rng.uniform(*_VESSEL_CONTRAST), rng, yy, xx)
    if label == POSITIVE_LABEL:
        band = _NODULE_HARD if rng.random() < _HARD_NODULE_FRACTION else _NODULE_EASY
        img = _add_bump(img, mask, rng.uniform(*band), rng, yy, xx)

    img = gaussian_filter(img, 0.6)
    img = quantize01(np.clip(img, 0.0, 1.0))
    return ImageSample(sample_id, img, mask.astype(np.uint8), label)


def make_toy_dataset(
    out_dir: Path,
    n_per_class: int,
    image_size: tuple[int, int],
    rng: RngStream,
    n_test_per_class: int = 0,
) -> DatasetManifest:
    """Synthesize a desk-scale dataset and write it plus a manifest.

    Dark ellipsoidal "lung" blobs sit on a brighter noisy body; the nodule
    class adds a small bright bump strictly inside the mask. Deterministic
    given ``rng``.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}")

    records = []
    plan = [("train", n_per_class), ("test", n_test_per_class)]
    for split, count in plan:
        for label in LABELS:
            for i in range(count):
                sample_id = f"{split}_{label}_{i:04d}"
                sample = _toy_sample(
                    sample_id,
                    label,
                    image_size,
                    rng.child(f"toy/{sample_id}").generator(),
                )
                img_path, mask_path = save_sample(sample, out_dir / "images")
                records.append(
                    ManifestRecord(
                        str(img_path.relative_to(out_dir)),
                        str(mask_path.relative_to(out_dir)),
                        label,
                        split,
                    )
                )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(records, manifest_path)
    return DatasetManifest(records=tuple(records), root=out_dir)


# ---------------------------------------------------------------------------
# initial split


def split_initial(
    manifest: DatasetManifest, config: ExperimentConfig, rng: RngStream
) -> tuple[list[str], list[str], list[str]]:
    """Pick the initial labeled seed per class; returns (seed, pool, test) ids."""
    train = manifest.split_records("train")
    test_ids = [rec.sample_id for rec in manifest.split_records("test")]

    seed_ids: list[str] = []
    pool_ids: list[str] = []
    gen = rng.child("split_initial").generator()
    for label in LABELS:
        ids = sorted(rec.sample_id for rec in train if rec.label == label)
        if len(ids) < config.initial_per_class:
            raise DataError(
                f"class {label!r} has {len(ids)} train samples, need "
                f">= {config.initial_per_class}"
            )
        chosen = gen.choice(len(ids), size=config.initial_per_class, replace=False)
        chosen_set = {ids[i] for i in chosen}
        seed_ids.extend(sorted(chosen_set))
        pool_ids.extend(i for i in ids if i not in chosen_set)
    return seed_ids, pool_ids, test_ids

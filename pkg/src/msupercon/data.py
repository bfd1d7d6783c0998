"""Samples, manifests, seeded augmentation and the synthetic imbalanced dataset.

On-disk layout written by :func:`generate_synthetic` (one directory per split)::

    <out>/<split>/manifest.csv      sample_id,image,label,slope,altitude,aspect,gain
    <out>/<split>/aux_ranges.csv    file,min,max
    <out>/<split>/images/*.png      8-bit RGB
    <out>/<split>/aux/*.png         16-bit grayscale, rescaled by aux_ranges.csv

Auxiliary cells hold either a relative raster path, a decimal scalar, or nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, ValidationError
from .model import CANONICAL_AUX, aux_statistics

CLASS_NAMES = ("plantation", "grassland/shrubland", "smallholder agriculture", "other")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("sample_id", "image", "label", *CANONICAL_AUX)
RANGES_FILE = "aux_ranges.csv"
_U16_MAX = 65535


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray  # (3, H, W), values in [0, 1]
    aux: dict[str, np.ndarray | float]
    label: int


@dataclass
class ManifestRow:
    sample_id: str
    image: str
    label: int
    aux: dict[str, str] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    path: Path
    split: str
    rows: list[ManifestRow]

    @property
    def root(self) -> Path:
        return self.path.parent


# ------------------------------------------------------------------- dataset


class Dataset:
    """In-memory, read-only collection of decoded samples."""

    def __init__(self, samples: Sequence[Sample], num_classes: int = 4, manifest: DatasetManifest | None = None):
        if not samples:
            raise ValidationError("dataset is empty")
        self.samples = list(samples)
        self.num_classes = num_classes
        self.manifest = manifest
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self._stats: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def aux_available(self) -> tuple[str, ...]:
        """Auxiliaries present for every sample, in canonical order."""
        return tuple(n for n in CANONICAL_AUX if all(n in s.aux for s in self.samples))

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.stack([self.samples[i].image for i in idx])

    def aux_stats(self, name: str) -> np.ndarray:
        """(N, 4) summary statistics of one auxiliary over the whole dataset."""
        if name not in self._stats:
            missing = [s.sample_id for s in self.samples if name not in s.aux]
            if missing:
                raise ConfigError(f"auxiliary {name!r} missing for {len(missing)} samples (first: {missing[0]})")
            self._stats[name] = np.stack([aux_statistics(s.aux[name]) for s in self.samples])
        return self._stats[name]


# ------------------------------------------------------------------- formats


def _write_png_rgb(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path)


def _read_png_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"expected an 8-bit RGB image, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def _encode_u16(raster: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(raster.min()), float(raster.max())
    if hi > lo:
        q = np.round((raster - lo) / (hi - lo) * _U16_MAX)
    else:
        q = np.zeros_like(raster)
    return q.astype(np.uint16), lo, hi


def _write_png_u16(path: Path, raster: np.ndarray) -> tuple[float, float]:
    q, lo, hi = _encode_u16(raster)
    Image.fromarray(q).save(path)
    return lo, hi


def _read_png_u16(path: Path, lo: float, hi: float) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I"):
            raise ValueError(f"expected a 16-bit grayscale raster, got mode {im.mode}")
        q = np.asarray(im, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError("auxiliary raster must be single-channel")
    return lo + q / _U16_MAX * (hi - lo)


def write_manifest(path: Path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow([r.sample_id, r.image, r.label, *(r.aux.get(n, "") for n in CANONICAL_AUX)])


def read_manifest(path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {header}")
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cells)}")
            sid, image, label, *aux = cells
            try:
                label_int = int(label)
            except ValueError:
                raise ValidationError(f"{path}:{lineno} ({sid}): label {label!r} is not an integer") from None
            rows.append(ManifestRow(sid, image, label_int, {n: v for n, v in zip(CANONICAL_AUX, aux) if v != ""}))
    return DatasetManifest(path, split or path.parent.name, rows)


def _read_ranges(root: Path) -> dict[str, tuple[float, float]]:
    path = root / RANGES_FILE
    if not path.is_file():
        return {}
    with open(path, newline="") as fh:
        return {row["file"]: (float(row["min"]), float(row["max"])) for row in csv.DictReader(fh)}


def _parse_scalar(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v


def load_manifest(path, num_classes: int = 4) -> Dataset:
    """Read and validate a manifest; every problem names the offending row."""
    manifest = read_manifest(path)
    root = manifest.root
    ranges = _read_ranges(root)
    seen: set[str] = set()
    samples = []
    for k, row in enumerate(manifest.rows, start=1):
        where = f"{manifest.path} row {k} ({row.sample_id})"
        if not row.sample_id:
            raise ValidationError(f"{where}: empty sample_id")
        if row.sample_id in seen:
            raise ValidationError(f"{where}: duplicate sample_id")
        seen.add(row.sample_id)
        if not 0 <= row.label < num_classes:
            raise ValidationError(f"{where}: label {row.label} outside [0, {num_classes})")
        img_path = root / row.image
        if not img_path.is_file():
            raise ValidationError(f"{where}: image file missing: {img_path}")
        try:
            image = _read_png_rgb(img_path)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            raise ValidationError(f"{where}: cannot decode image {img_path}: {exc}") from exc
        aux: dict[str, np.ndarray | float] = {}
        for name, cell in row.aux.items():
            scalar = _parse_scalar(cell)
            if scalar is not None:
                if not math.isfinite(scalar):
                    raise ValidationError(f"{where}: {name} value {cell!r} is not finite")
                aux[name] = scalar
                continue
            aux_path = root / cell
            if not aux_path.is_file():
                raise ValidationError(f"{where}: {name} raster missing: {aux_path}")
            if cell not in ranges:
                raise ValidationError(f"{where}: {name} raster {cell} has no entry in {RANGES_FILE}")
            try:
                aux[name] = _read_png_u16(aux_path, *ranges[cell])
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                raise ValidationError(f"{where}: cannot decode {name} raster {aux_path}: {exc}") from exc
        samples.append(Sample(row.sample_id, image, aux, row.label))
    if not samples:
        raise ValidationError(f"{manifest.path}: no rows")
    return Dataset(samples, num_classes=num_classes, manifest=manifest)


def resolve_manifest(path, split: str) -> Path:
    """Accept a manifest CSV or a generated dataset root."""
    p = Path(path)
    if p.is_dir():
        p = p / split / "manifest.csv"
    return p


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: Mapping[str, int] = field(default_factory=lambda: {"train": 800, "val": 200, "test": 400})
    class_proportions: tuple[float, ...] = (0.5, 0.2, 0.2, 0.1)
    image_size: int = 64
    aux_size: int = 16
    separation: float = 1.4
    aux_informativeness: float | tuple[float, ...] = 0.8
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        props = np.asarray(self.class_proportions, dtype=float)
        if props.ndim != 1 or props.size < 1 or np.any(props < 0):
            raise ConfigError(f"class_proportions must be non-negative, got {self.class_proportions}")
        if abs(props.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class_proportions must sum to 1, got {props.sum():.6g}")
        object.__setattr__(self, "class_proportions", tuple(float(p) for p in props))
        unknown = set(self.num_samples) - set(SPLITS)
        if unknown:
            raise ConfigError(f"num_samples has unknown splits {sorted(unknown)}")
        if any(int(n) < 1 for n in self.num_samples.values()):
            raise ConfigError("num_samples entries must be positive")
        if self.image_size < 1 or self.aux_size < 1:
            raise ConfigError("image_size and aux_size must be positive")
        if not self.separation > 0:
            raise ConfigError(f"separation must be positive, got {self.separation}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        lam = self.informativeness()
        if np.any(lam < 0) or np.any(lam > 1):
            raise ConfigError(f"aux_informativeness must lie in [0, 1], got {self.aux_informativeness}")

    @property
    def num_classes(self) -> int:
        return len(self.class_proportions)

    def informativeness(self) -> np.ndarray:
        lam = np.asarray(self.aux_informativeness, dtype=float)
        if lam.ndim == 0:
            return np.full(len(CANONICAL_AUX), float(lam))
        if lam.shape != (len(CANONICAL_AUX),):
            raise ConfigError(f"aux_informativeness needs 1 or {len(CANONICAL_AUX)} values")
        return lam


def class_counts(proportions: Sequence[float], n: int) -> np.ndarray:
    """Round proportions*n to integers summing to n (largest remainder)."""
    raw = np.asarray(proportions, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
        for i in order[:short]:
            counts[i] += 1
    return counts


def smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise over the last two axes, rescaled to unit std."""
    raw = rng.standard_normal(shape)
    sig = (0,) * (len(shape) - 2) + (sigma, sigma)
    f = ndimage.gaussian_filter(raw, sigma=sig, mode="wrap")
    axes = (-2, -1)
    f = f - f.mean(axis=axes, keepdims=True)
    return f / np.maximum(f.std(axis=axes, keepdims=True), 1e-12)


@dataclass
class _Prototypes:
    colour: np.ndarray  # (C, 3)
    texture: np.ndarray  # (C, 3, S, S)
    aux: np.ndarray  # (C, 4)


def _prototypes(spec: SyntheticSpec) -> _Prototypes:
    rng = np.random.default_rng([spec.seed, 0])
    c, s = spec.num_classes, spec.image_size
    colour = rng.standard_normal((c, 3))
    texture = smooth_field(rng, (c, 3, s, s), sigma=s / 8)
    aux = rng.standard_normal((c, len(CANONICAL_AUX)))
    return _Prototypes(colour, texture, aux)


# image intensity per unit of latent signal
_IMAGE_GAIN = 0.1


def synthesize_sample(spec: SyntheticSpec, protos: _Prototypes, label: int, rng: np.random.Generator) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    s, a = spec.image_size, spec.aux_size
    signal = protos.colour[label][:, None, None] + 0.5 * protos.texture[label]
    jitter = rng.standard_normal(3)[:, None, None]
    field_noise = smooth_field(rng, (3, s, s), sigma=s / 16)
    pixel_noise = rng.standard_normal((3, s, s))
    latent = spec.separation * signal + spec.noise * (jitter + 0.5 * field_noise + 0.25 * pixel_noise)
    image = np.clip(0.5 + _IMAGE_GAIN * latent, 0.0, 1.0)

    lam = spec.informativeness()
    aux = {}
    for k, name in enumerate(CANONICAL_AUX):
        class_signal = protos.aux[label, k] + spec.noise * 0.5 * smooth_field(rng, (a, a), sigma=a / 8)
        pure_noise = rng.standard_normal() + spec.noise * 0.5 * smooth_field(rng, (a, a), sigma=a / 8)
        aux[name] = lam[k] * class_signal + (1.0 - lam[k]) * pure_noise
    return image, aux


def _split_labels(spec: SyntheticSpec, split: str, n: int) -> np.ndarray:
    counts = class_counts(spec.class_proportions, n)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    order = np.random.default_rng([spec.seed, 1, SPLITS.index(split)]).permutation(n)
    return labels[order]


def generate_synthetic(spec: SyntheticSpec, out) -> dict[str, DatasetManifest]:
    """Write every split of the synthetic dataset under ``out``; a pure function of ``spec``."""
    out = Path(out)
    protos = _prototypes(spec)
    manifests = {}
    for split in SPLITS:
        n = int(spec.num_samples.get(split, 0))
        if n == 0:
            continue
        split_dir = out / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "aux").mkdir(parents=True, exist_ok=True)
        labels = _split_labels(spec, split, n)
        rows, ranges = [], []
        for i, label in enumerate(labels):
            sid = f"{split}-{i:05d}"
            rng = np.random.default_rng([spec.seed, 2, SPLITS.index(split), i])
            image, aux = synthesize_sample(spec, protos, int(label), rng)
            img_rel = f"images/{sid}.png"
            _write_png_rgb(split_dir / img_rel, image)
            cells = {}
            for name, raster in aux.items():
                rel = f"aux/{sid}_{name}.png"
                lo, hi = _write_png_u16(split_dir / rel, raster)
                ranges.append((rel, lo, hi))
                cells[name] = rel
            rows.append(ManifestRow(sid, img_rel, int(label), cells))
        manifest_path = split_dir / "manifest.csv"
        write_manifest(manifest_path, rows)
        with open(split_dir / RANGES_FILE, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("file", "min", "max"))
            for rel, lo, hi in ranges:
                writer.writerow((rel, repr(lo), repr(hi)))
        manifests[split] = DatasetManifest(manifest_path, split, rows)
    return manifests


def nearest_prototype_accuracy(features: np.ndarray, labels: np.ndarray, eval_features: np.ndarray | None = None,
                               eval_labels: np.ndarray | None = None) -> float:
    """Accuracy of assigning rows to the nearest class mean.

    Means are fitted on (features, labels); accuracy is measured on the
    optional held-out pair, else in-sample.
    """
    classes = np.unique(labels)
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    if eval_features is None:
        eval_features, eval_labels = features, labels
    d = ((eval_features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == np.asarray(eval_labels)))


# --------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_p: float = 0.5
    rotate: bool = True
    elastic: bool = True
    elastic_magnitude: float = 2.0  # RMS displacement in pixels
    elastic_radius: float = 8.0  # Gaussian smoothing sigma in pixels

    def __post_init__(self):
        if not 0 <= self.hflip_p <= 1:
            raise ConfigError(f"hflip_p must lie in [0, 1], got {self.hflip_p}")
        if self.elastic_magnitude < 0 or self.elastic_radius <= 0:
            raise ConfigError("elastic_magnitude must be >= 0 and elastic_radius > 0")


def hflip(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[..., ::-1])


def rot90(arr: np.ndarray, k: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(arr, k, axes=(-2, -1)))


def elastic_displacement(rng: np.random.Generator, shape: tuple[int, int], magnitude: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random (dy, dx) fields with RMS ``magnitude`` pixels."""
    out = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma=radius, mode="reflect")
        rms = float(np.sqrt(np.mean(f * f)))
        out.append(f * (magnitude / rms) if rms > 0 else np.zeros(shape))
    return out[0], out[1]


def elastic_transform(arr: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Bilinear resampling of ``arr`` (..., h, w) at pixel + displacement.

    Displacements are given on their own (H, W) grid and are resampled to the
    raster's grid (scaled accordingly) when the sizes differ.
    """
    h, w = arr.shape[-2:]
    big_h, big_w = dy.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    if (h, w) == (big_h, big_w):
        ddy, ddx = dy, dx
    else:
        sy, sx = big_h / h, big_w / w
        pos = np.stack([(yy + 0.5) * sy - 0.5, (xx + 0.5) * sx - 0.5])
        ddy = ndimage.map_coordinates(dy, pos, order=1, mode="nearest") / sy
        ddx = ndimage.map_coordinates(dx, pos, order=1, mode="nearest") / sx
    coords = np.stack([yy + ddy, xx + ddx])
    flat = arr.reshape(-1, h, w)
    out = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in flat])
    return out.reshape(arr.shape)


def augment_arrays(image: np.ndarray, rasters: Mapping[str, np.ndarray], policy: AugmentPolicy, seed) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Apply one random geometric transform jointly to an image and its rasters."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < policy.hflip_p
    k = int(rng.integers(4)) if policy.rotate else 0
    arrays = {"__image__": image, **rasters}
    if flip:
        arrays = {n: hflip(a) for n, a in arrays.items()}
    if k:
        arrays = {n: rot90(a, k) for n, a in arrays.items()}
    if policy.elastic:
        shape = arrays["__image__"].shape[-2:]
        dy, dx = elastic_displacement(rng, shape, policy.elastic_magnitude, policy.elastic_radius)
        arrays = {n: elastic_transform(a, dy, dx) for n, a in arrays.items()}
        arrays["__image__"] = np.clip(arrays["__image__"], 0.0, 1.0)
    image_out = arrays.pop("__image__")
    return image_out, arrays


def augment(sample: Sample, policy: AugmentPolicy, seed) -> Sample:
    """Seeded flip / 90-degree rotation / elastic warp; scalar auxiliaries pass through."""
    rasters = {n: v for n, v in sample.aux.items() if isinstance(v, np.ndarray) and v.ndim == 2}
    image, warped = augment_arrays(sample.image, rasters, policy, seed)
    aux = {n: warped.get(n, v) for n, v in sample.aux.items()}
    return replace(sample, image=image, aux=aux)


# ------------------------------------------------------------------- batching


def batch_iter(dataset, batch_size: int = 16, seed: int = 0, epoch: int = 0, *, contrastive: bool = False) -> list[np.ndarray]:
    """Epoch-seeded shuffled partition of sample indices; the last batch may be short."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < 1:
        raise ConfigError("cannot batch an empty dataset")
    if batch_size < 1 or (contrastive and batch_size < 2):
        raise ConfigError(f"batch_size {batch_size} too small{' for the contrastive stage' if contrastive else ''}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]

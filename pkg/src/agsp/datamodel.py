"""Dataset representation, on-disk ingestion and synthetic data generation.

On-disk layout::

    root/classes.json            ordered list of class names
    root/images/<id>_rgb.png     8-bit RGB
    root/images/<id>_nir.png     8-bit greyscale (optional)
    root/labels/<id>.png         8-bit greyscale, pixel value = class id
    root/valid/<id>.png          0 = invalid, 255 = valid (optional)
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple
    background_id: int = 0

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise DatasetError("taxonomy needs at least 2 classes")
        if any(not isinstance(n, str) or not n for n in names):
            raise DatasetError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise DatasetError("class names must be unique")
        if not 0 <= self.background_id < len(names):
            raise DatasetError("background_id out of range")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @classmethod
    def from_file(cls, path) -> "ClassTaxonomy":
        with open(path) as f:
            names = json.load(f)
        if not isinstance(names, list):
            raise DatasetError(f"{path}: expected a JSON array of class names")
        return cls(tuple(names))


@dataclass
class Sample:
    id: str
    rgb: np.ndarray
    labels: np.ndarray
    nir: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (3, h, w):
            raise DatasetError(f"{self.id}: rgb shape {self.rgb.shape} does not match labels {(h, w)}")
        if self.nir is not None and self.nir.shape != (1, h, w):
            raise DatasetError(f"{self.id}: nir shape {self.nir.shape} does not match labels {(h, w)}")
        if self.valid is not None and self.valid.shape != (h, w):
            raise DatasetError(f"{self.id}: valid shape {self.valid.shape} does not match labels {(h, w)}")

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class DatasetIndex:
    samples: List[str]
    per_class_members: Dict[int, List[str]]
    pixel_counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.pixel_counts)

    def subset(self, ids: Sequence[str], labels: Dict[str, np.ndarray],
               valid: Dict[str, Optional[np.ndarray]]) -> "DatasetIndex":
        return build_index(ids, labels, valid, self.num_classes)


def _scan(labels: np.ndarray, valid: Optional[np.ndarray], num_classes: int) -> np.ndarray:
    vals = labels if valid is None else labels[valid]
    return np.bincount(vals.ravel(), minlength=num_classes)[:num_classes].astype(np.int64)


def build_index(ids: Sequence[str], labels: Dict[str, np.ndarray],
                valid: Dict[str, Optional[np.ndarray]], num_classes: int) -> DatasetIndex:
    counts = np.zeros(num_classes, dtype=np.int64)
    members: Dict[int, List[str]] = {c: [] for c in range(num_classes)}
    for sid in ids:
        per = _scan(labels[sid], valid.get(sid), num_classes)
        counts += per
        for c in np.flatnonzero(per):
            members[int(c)].append(sid)
    return DatasetIndex(list(ids), members, counts)


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                im = im.convert(mode)
            return np.asarray(im)
    except OSError as e:
        raise DatasetError(f"cannot decode {path}: {e}") from e


class Dataset:
    """A dataset directory with a precomputed index and lazy sample access."""

    def __init__(self, root, taxonomy: Optional[ClassTaxonomy] = None, stride: Optional[int] = None):
        self.root = Path(root)
        if taxonomy is None:
            taxonomy = ClassTaxonomy.from_file(self.root / "classes.json")
        self.taxonomy = taxonomy
        self.stride = stride
        img_dir = self.root / "images"
        ids = sorted(p.name[: -len("_rgb.png")] for p in img_dir.glob("*_rgb.png")) if img_dir.is_dir() else []
        self._labels: Dict[str, np.ndarray] = {}
        self._valid: Dict[str, Optional[np.ndarray]] = {}
        for sid in ids:
            self._labels[sid], self._valid[sid] = self._read_masks(sid)
        self.index = build_index(ids, self._labels, self._valid, taxonomy.num_classes)

    def _read_masks(self, sid: str):
        lab_path = self.root / "labels" / f"{sid}.png"
        if not lab_path.exists():
            raise DatasetError(f"missing labels for {self.root / 'images' / (sid + '_rgb.png')}: expected {lab_path}")
        labels = _read_png(lab_path, "L").astype(np.int64)
        if labels.max(initial=0) >= self.taxonomy.num_classes:
            raise DatasetError(
                f"{lab_path}: label out of range (max {labels.max()}, {self.taxonomy.num_classes} classes)")
        h, w = labels.shape
        if self.stride and (h % self.stride or w % self.stride):
            raise DatasetError(f"{lab_path}: size {h}x{w} is not a multiple of stride {self.stride}")
        valid_path = self.root / "valid" / f"{sid}.png"
        valid = None
        if valid_path.exists():
            valid = _read_png(valid_path, "L") > 127
            if valid.shape != labels.shape:
                raise DatasetError(f"{valid_path}: dimension mismatch with labels {labels.shape}")
        return labels, valid

    def __len__(self) -> int:
        return len(self.index.samples)

    @property
    def ids(self) -> List[str]:
        return self.index.samples

    def labels(self, sid: str) -> np.ndarray:
        return self._labels[sid]

    def valid(self, sid: str) -> Optional[np.ndarray]:
        return self._valid[sid]

    def load(self, sid: str) -> Sample:
        if sid not in self._labels:
            raise KeyError(sid)
        rgb_path = self.root / "images" / f"{sid}_rgb.png"
        rgb = _read_png(rgb_path, "RGB")
        labels = self._labels[sid]
        if rgb.shape[:2] != labels.shape:
            raise DatasetError(f"{rgb_path}: dimension mismatch, image {rgb.shape[:2]} vs mask {labels.shape}")
        nir = None
        nir_path = self.root / "images" / f"{sid}_nir.png"
        if nir_path.exists():
            nir = _read_png(nir_path, "L")
            if nir.shape != labels.shape:
                raise DatasetError(f"{nir_path}: dimension mismatch, nir {nir.shape} vs mask {labels.shape}")
            nir = nir[None].astype(np.float64) / 255.0
        return Sample(sid, rgb.transpose(2, 0, 1).astype(np.float64) / 255.0, labels, nir, self._valid[sid])

    def __getitem__(self, sid: str) -> Sample:
        return self.load(sid)

    def subset_index(self, ids: Sequence[str]) -> DatasetIndex:
        return build_index(ids, self._labels, self._valid, self.taxonomy.num_classes)


def load_dataset(root, taxonomy: Optional[ClassTaxonomy] = None, stride: Optional[int] = None) -> Dataset:
    return Dataset(root, taxonomy, stride)


def minmax(v, degenerate: float = 0.5) -> np.ndarray:
    """Min-max normalize ``v`` to [0, 1]; an all-equal vector maps to ``degenerate``."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, degenerate)
    return (v - lo) / (hi - lo)


def compute_dist(index_or_counts) -> np.ndarray:
    counts = getattr(index_or_counts, "pixel_counts", index_or_counts)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size and np.all(counts == counts[0]):
        warnings.warn("all class pixel counts are equal; dist degenerates to 0.5", RuntimeWarning, stacklevel=2)
    return minmax(counts)


def concat_nir(sample: Sample) -> np.ndarray:
    if sample.nir is None:
        raise DatasetError(f"{sample.id}: no NIR channel available; run in RGB-only mode (use_nir=false)")
    return np.concatenate([sample.rgb, sample.nir], axis=0)


def write_stats(index: DatasetIndex, path) -> dict:
    stats = {
        "pixel_counts": [int(c) for c in index.pixel_counts],
        "dist": [float(d) for d in compute_dist(index)] if index.num_classes else [],
        "per_class_members": {str(c): list(m) for c, m in sorted(index.per_class_members.items())},
    }
    with open(path, "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    return stats


def write_sample(root, sample: Sample) -> None:
    root = Path(root)
    for sub in ("images", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rgb = np.round(sample.rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(root / "images" / f"{sample.id}_rgb.png")
    if sample.nir is not None:
        nir = np.round(sample.nir[0] * 255.0).astype(np.uint8)
        Image.fromarray(nir, "L").save(root / "images" / f"{sample.id}_nir.png")
    Image.fromarray(sample.labels.astype(np.uint8), "L").save(root / "labels" / f"{sample.id}.png")
    if sample.valid is not None:
        (root / "valid").mkdir(exist_ok=True)
        Image.fromarray(np.where(sample.valid, 255, 0).astype(np.uint8), "L").save(
            root / "valid" / f"{sample.id}.png")


def write_taxonomy(root, taxonomy: ClassTaxonomy) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "classes.json", "w") as f:
        json.dump(list(taxonomy.names), f)
        f.write("\n")


# ---------------------------------------------------------------------------
# synthetic data

# largest fraction of an image covered by one foreground class
_MAX_AREA = 0.15


def _class_palette(num_classes: int, rng: np.random.Generator):
    """Base colour and NIR level per class; background is an earthy green-brown."""
    colors = np.empty((num_classes, 3))
    colors[0] = (0.45, 0.40, 0.25)
    hues = np.linspace(0.0, 1.0, max(num_classes - 1, 1), endpoint=False)
    for c in range(1, num_classes):
        h = hues[c - 1]
        # simple hue wheel at fixed saturation/value
        k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
        colors[c] = 0.85 - 0.65 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    nir = np.linspace(0.2, 0.85, num_classes)
    nir = nir[rng.permutation(num_classes)]
    return colors, nir


def _place_shape(canvas: np.ndarray, cls: int, area: float, rng: np.random.Generator) -> None:
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    best = None
    for _ in range(20):
        ellipse = bool(rng.integers(2))
        aspect = rng.uniform(0.6, 1.6)
        if ellipse:
            # area of an ellipse with semi-axes a, b is pi*a*b
            b = np.sqrt(area / (np.pi * aspect))
            a = aspect * b
        else:
            b = np.sqrt(area / aspect) / 2.0
            a = aspect * b
        a, b = min(a, size / 2.0), min(b, size / 2.0)
        cy = rng.uniform(b, size - b)
        cx = rng.uniform(a, size - a)
        if ellipse:
            mask = ((yy + 0.5 - cy) / b) ** 2 + ((xx + 0.5 - cx) / a) ** 2 <= 1.0
        else:
            mask = (np.abs(yy + 0.5 - cy) <= b) & (np.abs(xx + 0.5 - cx) <= a)
        overlap = int(np.count_nonzero(mask & (canvas != 0)))
        if best is None or overlap < best[0]:
            best = (overlap, mask)
        if overlap == 0:
            break
    canvas[best[1] & (canvas == 0)] = cls


def generate_synthetic(out, n: int, size: int, class_freqs: Sequence[float], seed: int,
                       stride: int = 4, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Write ``n`` synthetic aerial-like samples to ``out`` and return their pixel counts.

    Each foreground class appears in a fixed number of images chosen so the
    class covers at most ``_MAX_AREA`` of the image it appears in; the
    background takes the remaining pixels. RGB colour and NIR intensity both
    depend on the class, with additive Gaussian noise.
    """
    freqs = np.asarray(class_freqs, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size < 2 or np.any(freqs < 0) or not np.isclose(freqs.sum(), 1.0, atol=1e-6):
        raise DatasetError(f"class_freqs must be >= 2 non-negative values summing to 1, got {list(class_freqs)}")
    if n < 0:
        raise DatasetError("n must be non-negative")
    if size <= 0 or size % stride:
        raise DatasetError(f"size {size} must be a positive multiple of stride {stride}")
    num_classes = freqs.size
    if names is None:
        names = ["background"] + [f"class_{c}" for c in range(1, num_classes)]
    taxonomy = ClassTaxonomy(tuple(names))
    out = Path(out)
    write_taxonomy(out, taxonomy)
    (out / "images").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)

    rng = np.random.default_rng(seed)
    colors, nir_levels = _class_palette(num_classes, rng)
    pixels = size * size
    # which images carry which foreground class, and how much of it
    present = np.zeros((n, num_classes), dtype=bool)
    area = np.zeros(num_classes)
    for c in range(1, num_classes):
        if freqs[c] == 0 or n == 0:
            continue
        m = int(min(n, max(1, round(n * freqs[c] / _MAX_AREA))))
        present[rng.choice(n, size=m, replace=False), c] = True
        area[c] = freqs[c] * n * pixels / m

    counts = np.zeros(num_classes, dtype=np.int64)
    for i in range(n):
        labels = np.zeros((size, size), dtype=np.int64)
        # rare classes are placed first so they lose nothing to overlap
        for c in sorted(np.flatnonzero(present[i]), key=lambda c: freqs[c]):
            _place_shape(labels, int(c), area[c], rng)
        # low-frequency field texture on the background
        shade = rng.uniform(-0.08, 0.08, size=(3, 1, 1))
        rgb = colors[labels].transpose(2, 0, 1) + shade
        rgb = rgb + rng.normal(0.0, 0.05, size=rgb.shape)
        nir = nir_levels[labels][None] + rng.normal(0.0, 0.05, size=(1, size, size))
        sample = Sample(f"{i:05d}", np.clip(rgb, 0.0, 1.0), labels, np.clip(nir, 0.0, 1.0))
        write_sample(out, sample)
        counts += np.bincount(labels.ravel(), minlength=num_classes)
    log.info("wrote %d synthetic samples to %s", n, out)
    return counts

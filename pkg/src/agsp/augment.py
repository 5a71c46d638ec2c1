"""Exactly invertible geometric augmentations and photometric jitter.

Geometric ops act on the last two axes of any array, so the same record can
be applied to images ``[C, H, W]``, masks ``[H, W]`` and feature maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

HFLIP = "hflip"
VFLIP = "vflip"
ROT90 = "rot90"

# ITU-R BT.601 luma weights
_LUMA = (0.299, 0.587, 0.114)


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class GeometricOp:
    kind: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in (HFLIP, VFLIP, ROT90):
            raise AugmentError(f"unknown geometric op {self.kind!r}")
        if self.kind == ROT90:
            if self.k not in (0, 1, 2, 3):
                raise AugmentError(f"rot90 k must be in 0..3, got {self.k}")
        elif self.k != 0:
            raise AugmentError(f"{self.kind} takes no k")

    def inverse(self) -> "GeometricOp":
        if self.kind == ROT90:
            return GeometricOp(ROT90, (4 - self.k) % 4)
        return self

    def to_json(self) -> dict:
        if self.kind == ROT90:
            return {"kind": ROT90, "k": self.k}
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, d: dict) -> "GeometricOp":
        return cls(d["kind"], int(d.get("k", 0)))


@dataclass(frozen=True)
class PhotometricOp:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation) <= 0:
            raise AugmentError("photometric factors must be positive")

    def to_json(self) -> dict:
        return {"b": self.brightness, "c": self.contrast, "s": self.saturation}

    @classmethod
    def from_json(cls, d: dict) -> "PhotometricOp":
        return cls(float(d["b"]), float(d["c"]), float(d["s"]))


@dataclass(frozen=True)
class AugRecord:
    geometric: tuple = ()
    photometric: Optional[PhotometricOp] = None
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "geometric", tuple(self.geometric))

    @property
    def is_identity(self) -> bool:
        return not self.geometric and self.photometric is None

    def to_json(self) -> dict:
        return {
            "geometric": [op.to_json() for op in self.geometric],
            "photometric": None if self.photometric is None else self.photometric.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AugRecord":
        photo = d.get("photometric")
        return cls(
            tuple(GeometricOp.from_json(g) for g in d.get("geometric", [])),
            None if photo is None else PhotometricOp.from_json(photo),
            d.get("seed"),
        )


IDENTITY = AugRecord()


def sample_aug(rng: Union[int, np.random.Generator], p_apply: float = 0.5, strength: float = 0.1) -> AugRecord:
    """Draw a random augmentation record.

    ``rng`` may be an integer seed, in which case it is stored on the record so
    the draw can be replayed.
    """
    if not 0.0 <= p_apply <= 1.0:
        raise AugmentError(f"p_apply must be in [0, 1], got {p_apply}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    ops: List[GeometricOp] = []
    if rng.random() < p_apply:
        ops.append(GeometricOp(HFLIP))
    if rng.random() < p_apply:
        ops.append(GeometricOp(VFLIP))
    if rng.random() < p_apply:
        ops.append(GeometricOp(ROT90, int(rng.integers(4))))
    photo = None
    if rng.random() < p_apply:
        b, c, s = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
        photo = PhotometricOp(float(b), float(c), float(s))
    return AugRecord(tuple(ops), photo, seed)


def _apply_one(x: np.ndarray, op: GeometricOp) -> np.ndarray:
    if op.kind == HFLIP:
        return x[..., ::-1]
    if op.kind == VFLIP:
        return x[..., ::-1, :]
    return np.rot90(x, op.k, axes=(-2, -1))


def _check(x: np.ndarray, ops: Sequence[GeometricOp]) -> None:
    if x.ndim < 2:
        raise AugmentError(f"expected at least 2 dims, got shape {x.shape}")
    if x.shape[-1] != x.shape[-2] and any(op.kind == ROT90 for op in ops):
        raise AugmentError(f"rot90 requires square input, got {x.shape[-2]}x{x.shape[-1]}")


def apply_geometric(x: np.ndarray, ops: Sequence[GeometricOp]) -> np.ndarray:
    """Apply ``ops`` in order; rot90 with k=1 is counter-clockwise."""
    x = np.asarray(x)
    _check(x, ops)
    for op in ops:
        x = _apply_one(x, op)
    return np.ascontiguousarray(x)


def invert_geometric(x: np.ndarray, ops: Sequence[GeometricOp]) -> np.ndarray:
    return apply_geometric(x, [op.inverse() for op in reversed(tuple(ops))])


def _luma(rgb: np.ndarray) -> np.ndarray:
    return _LUMA[0] * rgb[0] + _LUMA[1] * rgb[1] + _LUMA[2] * rgb[2]


def _fsum_mean(v: np.ndarray) -> float:
    # exactly rounded, hence independent of pixel order
    return math.fsum(v.ravel().tolist()) / v.size


def apply_photometric(x: np.ndarray, op: Optional[PhotometricOp]) -> np.ndarray:
    """Brightness, then contrast, then saturation on the first three channels.

    Any further channels (NIR) pass through unchanged. Every step is written as
    ``x*f + ref*(1-f)`` so a factor of exactly 1 leaves the input bit-exact.
    """
    x = np.asarray(x, dtype=np.float64)
    if op is None:
        return x.copy()
    if x.ndim != 3 or x.shape[0] < 3:
        raise AugmentError(f"expected an image [3+, H, W], got {x.shape}")
    out = x.copy()
    rgb = out[:3]
    rgb = np.clip(rgb * op.brightness, 0.0, 1.0)
    mean = _fsum_mean(_luma(rgb))
    rgb = np.clip(rgb * op.contrast + mean * (1.0 - op.contrast), 0.0, 1.0)
    grey = _luma(rgb)
    rgb = np.clip(rgb * op.saturation + grey * (1.0 - op.saturation), 0.0, 1.0)
    out[:3] = rgb
    return out


def apply_full(x: np.ndarray, y: Optional[np.ndarray], rec: AugRecord):
    """Return ``(A(x), A_g(y))``: geometric then photometric on the image, geometric only on the mask."""
    xa = apply_photometric(apply_geometric(x, rec.geometric), rec.photometric)
    ya = None if y is None else apply_geometric(y, rec.geometric)
    return xa, ya

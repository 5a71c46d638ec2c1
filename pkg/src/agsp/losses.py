"""Segmentation cross-entropy, augmentation-invariance feature MSE and their sum."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .augment import AugRecord, apply_full, apply_geometric, invert_geometric

PER_ELEMENT = "per-element"
PER_PIXEL_NORM = "per-pixel-norm"


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    l_seg_orig: float
    l_seg_aug: float
    l_ai: float
    l_tot: float
    valid_pixel_count: int

    def to_json(self) -> dict:
        return asdict(self)


def softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _batched(logits, y, valid):
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    if logits.ndim == 3:
        logits, y = logits[None], y[None]
        valid = None if valid is None else np.asarray(valid)[None]
    if logits.shape[0] != y.shape[0] or logits.shape[2:] != y.shape[1:]:
        raise LossError(f"logits {logits.shape} and labels {y.shape} disagree")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise LossError("label out of range")
    return logits, y, valid


def seg_loss_and_grad(logits, y, valid=None):
    """Mean cross-entropy over valid pixels and its gradient w.r.t. ``logits``."""
    squeeze = np.ndim(logits) == 3
    logits, y, valid = _batched(logits, y, valid)
    mask = np.ones(y.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise LossError("empty loss support: no valid pixels")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, y[:, None], axis=1)[:, 0]
    nll = lse - picked
    loss = float(nll[mask].sum() / count)
    grad = np.exp(z - lse[:, None])
    np.put_along_axis(grad, y[:, None], np.take_along_axis(grad, y[:, None], axis=1) - 1.0, axis=1)
    grad *= mask[:, None] / count
    return loss, (grad[0] if squeeze else grad), count


def seg_loss(logits, y, valid=None) -> float:
    return seg_loss_and_grad(logits, y, valid)[0]


def _records(recs, n):
    if isinstance(recs, AugRecord) or recs is None:
        recs = [recs or AugRecord()] * n
    recs = list(recs)
    if len(recs) != n:
        raise LossError(f"{len(recs)} records for a batch of {n}")
    return recs


def ai_loss_and_grad(f_orig, f_aug, recs, reduction: str = PER_ELEMENT):
    """Feature MSE after undoing each sample's geometric ops on ``f_aug``.

    Returns ``(loss, d_orig, d_aug)``. Photometric ops on the record are ignored.
    """
    f_orig = np.asarray(f_orig, dtype=np.float64)
    f_aug = np.asarray(f_aug, dtype=np.float64)
    if f_orig.shape != f_aug.shape:
        raise LossError(f"feature shapes differ: {f_orig.shape} vs {f_aug.shape}")
    squeeze = f_orig.ndim == 3
    if squeeze:
        f_orig, f_aug = f_orig[None], f_aug[None]
    recs = _records(recs, f_orig.shape[0])
    g = np.stack([invert_geometric(fa, r.geometric) for fa, r in zip(f_aug, recs)])
    diff = f_orig - g
    if reduction == PER_ELEMENT:
        denom = diff.size
    elif reduction == PER_PIXEL_NORM:
        denom = diff.size // diff.shape[1]
    else:
        raise LossError(f"unknown reduction {reduction!r}")
    loss = float((diff * diff).sum() / denom)
    d_orig = 2.0 * diff / denom
    # adjoint of the inverse permutation is the forward permutation
    d_aug = np.stack([apply_geometric(-d, r.geometric) for d, r in zip(d_orig, recs)])
    if squeeze:
        return loss, d_orig[0], d_aug[0]
    return loss, d_orig, d_aug


def ai_loss(f_orig, f_aug, rec, reduction: str = PER_ELEMENT) -> float:
    return ai_loss_and_grad(f_orig, f_aug, rec, reduction)[0]


class TotalLoss(NamedTuple):
    report: LossReport
    grads: dict
    logits: np.ndarray  # original-branch logits


def total_loss(model, x, y, recs: Union[AugRecord, Sequence[AugRecord]], lam: float = 0.75,
               valid=None, stop_gradient: bool = False, reduction: str = PER_ELEMENT,
               with_ai: bool = True) -> TotalLoss:
    """Original + augmented cross-entropy plus ``lam`` times the invariance loss.

    Both branches run through a single batched forward. With ``with_ai`` off the
    invariance term is neither computed nor reported.
    """
    if lam < 0:
        raise LossError("lambda must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    squeeze = x.ndim == 3
    if squeeze:
        x, y = x[None], y[None]
        valid = None if valid is None else np.asarray(valid)[None]
    n = x.shape[0]
    recs = _records(recs, n)
    xa, ya, va = [], [], []
    for i, r in enumerate(recs):
        a, b = apply_full(x[i], y[i], r)
        xa.append(a)
        ya.append(b)
        if valid is not None:
            va.append(apply_geometric(valid[i], r.geometric))
    xa, ya = np.stack(xa), np.stack(ya)
    va = None if valid is None else np.stack(va)

    trace = model.forward(np.concatenate([x, xa]))
    lo, la = trace.logits[:n], trace.logits[n:]
    l_orig, d_lo, count = seg_loss_and_grad(lo, y, valid)
    l_aug, d_la, _ = seg_loss_and_grad(la, ya, va)
    d_feat = None
    l_ai = 0.0
    if with_ai:
        fo, fa = trace.features[:n], trace.features[n:]
        l_ai, d_fo, d_fa = ai_loss_and_grad(fo, fa, recs, reduction)
        if stop_gradient:
            d_fo = np.zeros_like(d_fo)
        d_feat = lam * np.concatenate([d_fo, d_fa])
    grads = model.backward(trace, np.concatenate([d_lo, d_la]), d_feat)
    report = LossReport(l_orig, l_aug, l_ai, l_orig + l_aug + lam * l_ai, count)
    return TotalLoss(report, grads, lo[0] if squeeze else lo)

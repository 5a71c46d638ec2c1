"""Adaptive class-then-image sampling driven by class frequency and network confidence."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from .datamodel import minmax
from .losses import softmax


class SamplerError(ValueError):
    pass


class ConfidenceTracker:
    """Per-class exponential moving average of the mean ground-truth softmax probability."""

    def __init__(self, num_classes: int, alpha: float = 0.968, init: float = 1.0):
        if not 0.0 <= alpha <= 1.0:
            raise SamplerError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.conf = np.full(num_classes, float(init))
        self.t = 0

    def class_means(self, logits, y, valid=None) -> np.ndarray:
        """Mean softmax probability of class c over pixels labelled c (NaN when absent)."""
        logits = np.asarray(logits, dtype=np.float64)
        y = np.asarray(y)
        if logits.ndim == 3:
            logits, y = logits[None], y[None]
            valid = None if valid is None else np.asarray(valid)[None]
        prob = np.take_along_axis(softmax(logits, axis=1), y[:, None], axis=1)[:, 0]
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            prob, y = prob[valid], y[valid]
        k = len(self.conf)
        sums = np.bincount(y.ravel(), weights=prob.ravel(), minlength=k)[:k]
        counts = np.bincount(y.ravel(), minlength=k)[:k]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    def update_means(self, means: np.ndarray) -> None:
        present = ~np.isnan(means)
        self.conf[present] = self.alpha * self.conf[present] + (1.0 - self.alpha) * means[present]
        self.t += 1

    def update(self, logits, y, valid=None) -> np.ndarray:
        """Fold one batch into the EMA; returns the per-class batch means used."""
        means = self.class_means(logits, y, valid)
        self.update_means(means)
        return means


def adaptive_scores(dist, conf, gamma: float = 4.0) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if gamma <= 0:
        raise SamplerError("gamma must be positive")
    raw = (1.0 - dist * conf) ** gamma
    return minmax(raw)


def raw_scores(dist, conf, gamma: float = 4.0) -> np.ndarray:
    return (1.0 - np.asarray(dist, dtype=np.float64) * np.asarray(conf, dtype=np.float64)) ** gamma


def scores_to_probabilities(scores, included, eps_floor: float = 0.01) -> np.ndarray:
    """Additive floor then sum-normalisation over the included classes."""
    included = np.asarray(included, dtype=bool)
    if not included.any():
        raise SamplerError("no class is eligible for sampling (every X_c is empty)")
    w = np.where(included, np.asarray(scores, dtype=np.float64) + eps_floor, 0.0)
    return w / w.sum()


class SamplerState:
    def __init__(self, dist, per_class_members: Dict[int, Sequence[str]], gamma: float = 4.0,
                 alpha: float = 0.968, eps_floor: float = 0.01, include_background: bool = True,
                 background_id: int = 0, seed: int = 0):
        self.dist = np.asarray(dist, dtype=np.float64)
        k = len(self.dist)
        self.tracker = ConfidenceTracker(k, alpha)
        self.gamma = float(gamma)
        self.eps_floor = float(eps_floor)
        if self.eps_floor <= 0:
            raise SamplerError("eps_floor must be positive")
        self.members: List[List[str]] = [list(per_class_members.get(c, [])) for c in range(k)]
        self.include_background = include_background
        self.background_id = background_id
        self.rng = np.random.default_rng(seed)

    @property
    def conf(self) -> np.ndarray:
        return self.tracker.conf

    @property
    def included(self) -> np.ndarray:
        inc = np.array([len(m) > 0 for m in self.members])
        if not self.include_background:
            inc[self.background_id] = False
        return inc

    def scores(self) -> np.ndarray:
        return adaptive_scores(self.dist, self.conf, self.gamma)

    def class_probabilities(self) -> np.ndarray:
        return scores_to_probabilities(self.scores(), self.included, self.eps_floor)

    def sample(self):
        """Draw a class, then a sample id uniformly from the images containing it."""
        cdf = np.cumsum(self.class_probabilities())
        c = min(int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right")), len(cdf) - 1)
        members = self.members[c]
        return c, members[int(self.rng.integers(len(members)))]

    def update_confidence(self, logits, y, valid=None) -> np.ndarray:
        return self.tracker.update(logits, y, valid)

    def state_dict(self) -> dict:
        return {"conf": self.conf.tolist(), "t": self.tracker.t, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, d: dict) -> None:
        self.tracker.conf = np.asarray(d["conf"], dtype=np.float64)
        self.tracker.t = int(d["t"])
        self.rng.bit_generator.state = d["rng"]


def class_probabilities(state: SamplerState) -> np.ndarray:
    return state.class_probabilities()


def sample(state: SamplerState):
    return state.sample()

"""Training loop: sampling, cropping, augmentation, dual-branch loss, SGD, confidence updates."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .augment import ROT90, AugRecord, GeometricOp, apply_geometric, sample_aug
from .datamodel import Dataset, compute_dist, concat_nir, load_dataset
from .losses import PER_ELEMENT, PER_PIXEL_NORM, ai_loss, total_loss
from .metrics import MetricsAccumulator
from .model import Arch, SegModel, expand_input_nir, read_checkpoint, save_checkpoint, save_model
from .sampler import SamplerState

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lambda_ai: float = 0.75
    gamma: float = 4.0
    alpha: float = 0.968
    eps_floor: float = 0.01
    p_apply: float = 0.5
    sigma_p: float = 0.1
    iterations: int = 2000
    batch_size: int = 8
    crop: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    lr_schedule: str = "none"
    poly_power: float = 1.0
    seed: int = 0
    use_nir: bool = False
    use_ai: bool = True
    use_as: bool = True
    ai_stop_gradient: bool = False
    ai_reduction: str = PER_ELEMENT
    eval_every: int = 0
    checkpoint_every: int = 0
    include_background: bool = True
    max_scale: int = 2
    holdout: int = 0
    widths: List[int] = field(default_factory=lambda: [8, 16, 32])
    feature_dim: int = 16
    conf_snapshot_every: int = 50

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        checks = [
            (self.lambda_ai >= 0, "lambda_ai must be >= 0"),
            (self.gamma > 0, "gamma must be > 0"),
            (0.0 <= self.alpha <= 1.0, "alpha must be in [0, 1]"),
            (self.eps_floor > 0, "eps_floor must be > 0"),
            (0.0 <= self.p_apply <= 1.0, "p_apply must be in [0, 1]"),
            (0.0 <= self.sigma_p < 1.0, "sigma_p must be in [0, 1)"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.crop > 0 and self.crop % self.arch(3).stride == 0, "crop must be a positive multiple of the model stride"),
            (self.lr > 0, "lr must be > 0"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.lr_schedule in ("none", "poly"), "lr_schedule must be 'none' or 'poly'"),
            (self.ai_reduction in (PER_ELEMENT, PER_PIXEL_NORM), f"ai_reduction must be {PER_ELEMENT!r} or {PER_PIXEL_NORM!r}"),
            (self.max_scale >= 1, "max_scale must be >= 1"),
            (self.holdout >= 0, "holdout must be >= 0"),
            (self.eval_every >= 0 and self.checkpoint_every >= 0, "eval/checkpoint intervals must be >= 0"),
            (self.conf_snapshot_every >= 1, "conf_snapshot_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def arch(self, num_classes: int) -> Arch:
        return Arch(in_channels=3, widths=tuple(self.widths), feature_dim=self.feature_dim, num_classes=num_classes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


class SGD:
    """SGD with heavy-ball momentum and optional poly decay."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float = 0.9,
                 iterations: int = 1, schedule: str = "none", power: float = 1.0):
        self.lr = lr
        self.momentum = momentum
        self.iterations = iterations
        self.schedule = schedule
        self.power = power
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, t: int) -> float:
        if self.schedule == "poly":
            return self.lr * (1.0 - t / self.iterations) ** self.power
        return self.lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], t: int) -> float:
        lr_t = self.lr_at(t)
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            params[k] -= lr_t * v
        return lr_t


def optimizer_step(params, grads, optimizer: SGD, t: int) -> float:
    return optimizer.step(params, grads, t)


# ---------------------------------------------------------------------------


@dataclass
class Item:
    id: str
    x: np.ndarray
    y: np.ndarray
    valid: Optional[np.ndarray]


def load_items(ds: Dataset, ids, use_nir: bool) -> Dict[str, Item]:
    items = {}
    for sid in ids:
        s = ds.load(sid)
        x = concat_nir(s) if use_nir else s.rgb
        items[sid] = Item(sid, x, s.labels, s.valid)
    return items


def random_crop(item: Item, crop: int, max_scale: int, rng: np.random.Generator):
    """Integer nearest-neighbour upscaling by a random factor, then a random square crop."""
    r = int(rng.integers(1, max_scale + 1))
    x, y, v = item.x, item.y, item.valid
    h, w = y.shape
    if h * r < crop or w * r < crop:
        raise ConfigError(f"sample {item.id} ({h}x{w}) is smaller than crop {crop}")
    i = int(rng.integers(0, h * r - crop + 1))
    j = int(rng.integers(0, w * r - crop + 1))
    # crop in the upscaled frame without materialising the whole upscaled image
    rows = (np.arange(i, i + crop) // r)
    cols = (np.arange(j, j + crop) // r)
    xc = x[:, rows][:, :, cols]
    yc = y[rows][:, cols]
    vc = None if v is None else v[rows][:, cols]
    return xc, yc, vc


@dataclass
class TrainState:
    model: SegModel
    optimizer: SGD
    sampler: SamplerState
    rng: np.random.Generator
    items: Dict[str, Item]
    train_ids: List[str]
    t: int = 0


def _finite_or_none(v):
    return None if not math.isfinite(v) else float(v)


def train_step(state: TrainState, cfg: TrainConfig) -> dict:
    """One optimisation step; returns the metrics-log record."""
    sampler = state.sampler
    classes, ids = [], []
    for _ in range(cfg.batch_size):
        if cfg.use_as:
            c, sid = sampler.sample()
            classes.append(c)
        else:
            sid = state.train_ids[int(sampler.rng.integers(len(state.train_ids)))]
            classes.append(None)
        ids.append(sid)

    xs, ys, vs = [], [], []
    for sid in ids:
        x, y, v = random_crop(state.items[sid], cfg.crop, cfg.max_scale, state.rng)
        xs.append(x)
        ys.append(y)
        vs.append(v)
    recs = [sample_aug(int(state.rng.integers(2**32)), cfg.p_apply, cfg.sigma_p) for _ in ids]
    x, y = np.stack(xs), np.stack(ys)
    valid = None
    if any(v is not None for v in vs):
        valid = np.stack([np.ones(y.shape[1:], bool) if v is None else v for v in vs])

    lam = cfg.lambda_ai if cfg.use_ai else 0.0
    out = total_loss(state.model, x, y, recs, lam, valid, cfg.ai_stop_gradient, cfg.ai_reduction,
                     with_ai=cfg.use_ai)
    rep = out.report
    if not all(math.isfinite(v) for v in (rep.l_seg_orig, rep.l_seg_aug, rep.l_ai, rep.l_tot)):
        raise TrainingDiverged(f"non-finite loss at step {state.t} on batch ids {ids}: {rep.to_json()}")
    lr_t = state.optimizer.step(state.model.params, out.grads, state.t)
    means = sampler.update_confidence(out.logits, y, valid)

    record = {"t": state.t, **{k: v for k, v in rep.to_json().items() if k != "valid_pixel_count"},
              "lr_t": lr_t, "sampled_classes": classes, "sampled_ids": ids,
              "class_means": [_finite_or_none(m) for m in means]}
    if state.t % cfg.conf_snapshot_every == 0:
        record["conf_snapshot"] = sampler.conf.tolist()
    state.t += 1
    return record


# ---------------------------------------------------------------------------
# evaluation


def predict(model: SegModel, xs: np.ndarray, chunk: int = 16) -> np.ndarray:
    model.eval()
    try:
        preds = [model.forward(xs[i:i + chunk]).logits.argmax(axis=1) for i in range(0, len(xs), chunk)]
    finally:
        model.train()
    return np.concatenate(preds) if preds else np.zeros((0,) + xs.shape[2:], dtype=np.int64)


def evaluate(model: SegModel, items: List[Item], num_classes: int) -> MetricsAccumulator:
    acc = MetricsAccumulator(num_classes)
    by_shape: Dict[tuple, List[Item]] = {}
    for it in items:
        by_shape.setdefault(it.y.shape, []).append(it)
    for group in by_shape.values():
        preds = predict(model, np.stack([it.x for it in group]))
        for it, p in zip(group, preds):
            acc.accumulate(p, it.y, it.valid)
    return acc


def eval_report(acc: MetricsAccumulator, names, t: Optional[int] = None) -> dict:
    iou, m = acc.miou()
    out = {"per_class_iou": {n: _finite_or_none(v) for n, v in zip(names, iou)}, "miou": m,
           "pixels": acc.total}
    if t is not None:
        out = {"t": t, **out}
    return out


def invariance_gap(model: SegModel, items: List[Item], seed: int = 0) -> float:
    """Mean feature MSE between each image and its randomly rotated copy (k in 1..3), after un-rotating."""
    rng = np.random.default_rng(seed)
    model.eval()
    try:
        losses = []
        for it in items:
            op = [GeometricOp(ROT90, int(rng.integers(1, 4)))]
            f = model.forward(it.x).features
            fr = model.forward(apply_geometric(it.x, op)).features
            losses.append(ai_loss(f, fr, AugRecord(tuple(op))))
    finally:
        model.train()
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# fit


def split_ids(ids: List[str], holdout: int):
    ids = sorted(ids)
    if holdout >= len(ids) and holdout:
        raise ConfigError(f"holdout {holdout} leaves no training samples out of {len(ids)}")
    if holdout == 0:
        return ids, ids
    return ids[:-holdout], ids[-holdout:]


def build_state(cfg: TrainConfig, ds: Dataset):
    train_ids, eval_ids = split_ids(ds.ids, cfg.holdout)
    if not train_ids:
        raise ConfigError("dataset is empty")
    items = load_items(ds, ds.ids, cfg.use_nir)
    index = ds.subset_index(train_ids)
    dist = compute_dist(index)
    model = SegModel(cfg.arch(ds.taxonomy.num_classes), seed=cfg.seed)
    if cfg.use_nir:
        model = expand_input_nir(model)
    optimizer = SGD(model.params, cfg.lr, cfg.momentum, max(cfg.iterations, 1), cfg.lr_schedule, cfg.poly_power)
    sampler = SamplerState(dist, index.per_class_members, cfg.gamma, cfg.alpha, cfg.eps_floor,
                           cfg.include_background, ds.taxonomy.background_id, seed=[cfg.seed, 1])
    state = TrainState(model, optimizer, sampler, np.random.default_rng([cfg.seed, 2]), items, train_ids)
    return state, [items[i] for i in eval_ids]


def _save_state(state: TrainState, out: Path, best: float) -> None:
    tensors = dict(state.model.params)
    tensors.update({f"momentum/{k}": v for k, v in state.optimizer.velocity.items()})
    save_checkpoint(out / "last.ckpt", state.model.arch, tensors)
    meta = {"t": state.t, "best_miou": best, "sampler": state.sampler.state_dict(),
            "rng": state.rng.bit_generator.state}
    tmp = out / "last_state.json.tmp"
    tmp.write_text(json.dumps(meta, sort_keys=True))
    tmp.replace(out / "last_state.json")


def _load_state(state: TrainState, out: Path) -> float:
    arch, tensors, _ = read_checkpoint(out / "last.ckpt")
    if arch != state.model.arch:
        raise ConfigError(f"checkpoint arch {arch.to_json()} does not match run arch {state.model.arch.to_json()}")
    for k in state.model.params:
        state.model.params[k] = tensors[k].copy()
        state.optimizer.velocity[k] = tensors[f"momentum/{k}"].copy()
    meta = json.loads((out / "last_state.json").read_text())
    state.t = int(meta["t"])
    state.sampler.load_state_dict(meta["sampler"])
    state.rng.bit_generator.state = meta["rng"]
    return meta["best_miou"]


@dataclass
class FitResult:
    out: Path
    best_miou: float
    final: Optional[dict]
    state: TrainState
    eval_items: List[Item]


def fit(cfg: TrainConfig, root, out, resume: bool = False, stop_after: Optional[int] = None) -> FitResult:
    """Train for ``cfg.iterations`` steps, writing logs, eval snapshots and checkpoints to ``out``.

    ``stop_after`` ends the run early once the step counter reaches that value,
    leaving a resumable state behind.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    probe = cfg.arch(2)
    ds = load_dataset(root, stride=probe.stride)
    state, eval_items = build_state(cfg, ds)
    names = ds.taxonomy.names
    log_path = out / "metrics.jsonl"
    best = -1.0
    if resume and (out / "last_state.json").exists():
        best = _load_state(state, out)
        lines = log_path.read_text().splitlines(keepends=True) if log_path.exists() else []
        log_path.write_text("".join(l for l in lines if json.loads(l)["t"] < state.t))
        log.info("resumed from step %d", state.t)
    else:
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        log_path.write_text("")
        save_model(state.model, out / "init.ckpt")

    def run_eval():
        nonlocal best
        acc = evaluate(state.model, eval_items, ds.taxonomy.num_classes)
        rep = eval_report(acc, names, state.t)
        (out / f"eval_{state.t}.json").write_text(json.dumps(rep, indent=2) + "\n")
        if rep["miou"] > best:
            best = rep["miou"]
            save_model(state.model, out / "best.ckpt")
        log.info("step %d: mIoU %.4f", state.t, rep["miou"])
        return rep

    final = None
    with open(log_path, "a") as logf:
        while state.t < cfg.iterations:
            try:
                record = train_step(state, cfg)
            except TrainingDiverged as e:
                (out / "diverged.json").write_text(json.dumps({"step": state.t, "error": str(e)}) + "\n")
                raise
            logf.write(json.dumps(record) + "\n")
            logf.flush()
            if cfg.eval_every and state.t % cfg.eval_every == 0:
                final = run_eval()
            if cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
                _save_state(state, out, best)
            if stop_after is not None and state.t >= stop_after and state.t < cfg.iterations:
                _save_state(state, out, best)
                return FitResult(out, best, final, state, eval_items)
    if cfg.iterations > 0 and not (cfg.eval_every and cfg.iterations % cfg.eval_every == 0):
        final = run_eval()
    save_model(state.model, out / "final.ckpt")
    return FitResult(out, best, final, state, eval_items)

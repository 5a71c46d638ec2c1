"""Command-line entry point: ``agsp <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment, datamodel, metrics, model, sampler, trainer

log = logging.getLogger("agsp")


class UsageError(Exception):
    pass


def _floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def cmd_synth(args) -> int:
    counts = datamodel.generate_synthetic(args.out, args.n, args.size, args.freqs, args.seed)
    print(_dump({"out": str(args.out), "n": args.n, "pixel_counts": counts.tolist()}))
    return 0


def cmd_stats(args) -> int:
    ds = datamodel.load_dataset(args.root)
    stats = datamodel.write_stats(ds.index, args.output)
    print(_dump({"pixel_counts": stats["pixel_counts"], "dist": stats["dist"]}))
    return 0


def cmd_train(args) -> int:
    try:
        cfg = trainer.TrainConfig.load(args.config)
        if args.seed is not None:
            cfg = trainer.TrainConfig.from_json({**cfg.to_json(), "seed": args.seed})
    except trainer.ConfigError as e:
        raise UsageError(f"{args.config}: {e}")
    res = trainer.fit(cfg, args.data, args.out, resume=args.resume)
    print(_dump({"out": str(res.out), "best_miou": res.best_miou, "final": res.final}))
    return 0


def _eval_items(ds, in_channels: int):
    use_nir = in_channels == 4
    return list(trainer.load_items(ds, ds.ids, use_nir).values())


def cmd_eval(args) -> int:
    net = model.load_model(args.checkpoint)
    ds = datamodel.load_dataset(args.data, stride=net.arch.stride)
    if ds.taxonomy.num_classes != net.arch.num_classes:
        raise UsageError(f"dataset has {ds.taxonomy.num_classes} classes, checkpoint {net.arch.num_classes}")
    acc = trainer.evaluate(net, _eval_items(ds, net.arch.in_channels), net.arch.num_classes)
    report = trainer.eval_report(acc, ds.taxonomy.names)
    iou, m = acc.miou()
    table = metrics.format_table(ds.taxonomy.names, iou, m, title=Path(args.checkpoint).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(_dump(report) + "\n")
    (out / "eval.txt").write_text(table + "\n")
    print(table)
    return 0


def _to_png(x: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(x, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8), "RGB").save(path)


def cmd_augment_demo(args) -> int:
    with Image.open(args.image) as im:
        x = np.asarray(im.convert("RGB")).transpose(2, 0, 1).astype(np.float64) / 255.0
    h, w = x.shape[1:]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    x = x[:, top:top + side, left:left + side]
    rec = augment.sample_aug(args.seed, args.p_apply, args.strength)
    xa, _ = augment.apply_full(x, None, rec)
    inverted = augment.invert_geometric(xa, rec.geometric)
    geometric_ok = np.array_equal(augment.invert_geometric(augment.apply_geometric(x, rec.geometric), rec.geometric), x)
    full_ok = np.array_equal(inverted, augment.apply_photometric(x, rec.photometric))
    verdict = "EXACT" if geometric_ok and full_ok else "MISMATCH"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _to_png(x, out / "original.png")
    _to_png(xa, out / "augmented.png")
    _to_png(inverted, out / "inverted.png")
    result = {"record": rec.to_json(), "verdict": verdict}
    (out / "record.json").write_text(_dump(result) + "\n")
    print(_dump(result))
    return 0 if verdict == "EXACT" else 1


def cmd_sampler_audit(args) -> int:
    members = None
    if args.stats:
        with open(args.stats) as f:
            stats = json.load(f)
        dist = np.asarray(stats["dist"], dtype=np.float64)
        members = {int(c): m for c, m in stats.get("per_class_members", {}).items()}
    elif args.dist:
        dist = np.asarray(args.dist)
    else:
        raise UsageError("sampler-audit needs --stats or --dist")
    k = len(dist)
    if members is None:
        # without membership lists every class is assumed drawable
        members = {c: [f"class{c}"] for c in range(k)}
    conf = np.ones(k) if args.conf is None else np.asarray(args.conf)
    if len(conf) != k:
        raise UsageError(f"--conf has {len(conf)} entries, dist has {k}")
    state = sampler.SamplerState(dist, members, args.gamma, 0.968, args.eps,
                                 include_background=not args.no_background, seed=args.seed)
    state.tracker.conf = conf.astype(np.float64)
    p = state.class_probabilities()
    tally = np.zeros(k, dtype=np.int64)
    for _ in range(args.draws):
        tally[state.sample()[0]] += 1
    freq = tally / max(args.draws, 1)
    report = {
        "dist": dist.tolist(),
        "conf": conf.tolist(),
        "s": sampler.raw_scores(dist, conf, args.gamma).tolist(),
        "AS": state.scores().tolist(),
        "p": p.tolist(),
        "draws": args.draws,
        "empirical": freq.tolist(),
        "tv_distance": float(0.5 * np.abs(freq - p).sum()) if args.draws else None,
    }
    print(_dump(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agsp", description="Augmentation-invariance and adaptive-sampling segmentation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path, help="output dataset directory")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side length (multiple of 4)")
    p.add_argument("--freqs", type=_floats, default=[0.90, 0.08, 0.02], help="comma-separated class pixel frequencies")
    p.add_argument("--seed", type=int, default=1, help="generator seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="compute pixel counts, dist and per-class members")
    p.add_argument("root", type=Path, help="dataset directory")
    p.add_argument("-o", "--output", type=Path, default=Path("stats.json"), help="stats JSON path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, type=Path, help="JSON training config")
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path, help="model checkpoint")
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="output directory for eval.json / eval.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-demo", help="augment an image, invert it and check bit-exactness")
    p.add_argument("--image", required=True, type=Path, help="input PNG")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--p-apply", type=float, default=0.5, help="per-transform probability")
    p.add_argument("--strength", type=float, default=0.1, help="colour jitter strength")
    p.set_defaults(func=cmd_augment_demo)

    p = sub.add_parser("sampler-audit", help="analytic vs empirical adaptive sampling distribution")
    p.add_argument("--stats", type=Path, help="stats.json from the stats command")
    p.add_argument("--dist", type=_floats, help="comma-separated dist vector (instead of --stats)")
    p.add_argument("--conf", type=_floats, default=None, help="comma-separated confidence vector (default all 1)")
    p.add_argument("--gamma", type=float, default=4.0, help="relaxation exponent")
    p.add_argument("--eps", type=float, default=0.01, help="probability floor")
    p.add_argument("--draws", type=int, default=100000, help="number of empirical draws")
    p.add_argument("--seed", type=int, default=0, help="sampler seed")
    p.add_argument("--no-background", action="store_true", help="exclude class 0 from sampling")
    p.set_defaults(func=cmd_sampler_audit)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("AGSP_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"agsp {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, FloatingPointError) as e:
        print(f"agsp {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

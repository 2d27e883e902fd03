"""Command-line entry point: ``segkit <command> ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import (CLASS_NAMES, ascii_table, grouped_significance, iou_table_csv,
                      mean_iou, per_subject_report, split_groups)

log = logging.getLogger("segkit")

WINDOW = 5


class CommandError(RuntimeError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_plain))


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _load_split(manifest: str, split: str | None):
    from .data.synth import load_dataset, split_clips
    clips = load_dataset(manifest)
    if split:
        clips = split_clips(clips, split)
    if not clips:
        raise CommandError(f"no clips in split {split!r} of {manifest}")
    return clips


def _load_model(path: str, clips=None):
    from .models import ModelGraph
    m = ModelGraph.load(path)
    if clips is not None:
        top = max(int(c.masks.max()) for c in clips)
        if top >= m.num_classes:
            raise CommandError(f"{path} predicts {m.num_classes} classes but the labels reach "
                               f"class {top}")
    return m


def _whole_windows(clips, preds: dict) -> dict:
    return {k: v[:len(v) - len(v) % WINDOW] for k, v in preds.items()}


def _predictions(model, clips, smooth: bool = False) -> dict:
    from .train import predict_clip
    return _whole_windows(clips, {c.clip_id: predict_clip(model, c, smooth=smooth) for c in clips})


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> dict:
    from .data.synth import SynthConfig, dataset_digest, synth_video_generate, write_dataset
    d = json.loads(Path(args.config).read_text()).get("data", {}) if args.config else {}
    cfg = SynthConfig.from_dict(d)
    over = {k: v for k, v in (("seed", args.seed), ("clips", args.clips),
                              ("frames_per_clip", args.frames)) if v is not None}
    clips = synth_video_generate(cfg, **over)
    manifest = write_dataset(clips, args.out)
    return {"manifest": str(manifest), "clips": len(clips), "digest": dataset_digest(clips)}


def cmd_convert_landmarks(args) -> dict:
    from .data.masks import landmarks_to_mask, read_pts
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = {}
    for p in args.pts:
        mask = landmarks_to_mask(read_pts(p), args.width, args.height)
        dest = out_dir / (Path(p).stem + ".png")
        Image.fromarray(mask, mode="L").save(dest)
        masks[str(dest)] = hashlib.sha256(mask.tobytes()).hexdigest()
    return {"masks": masks}


def cmd_train(args) -> dict:
    from .data.synth import load_dataset
    from .experiment import ExperimentConfig, run_experiment
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    clips = load_dataset(args.manifest)
    run_dir = Path(args.out or cfg.output) / f"seed{cfg.seed}"
    return run_experiment(cfg, clips, run_dir)


def cmd_eval(args) -> dict:
    from .train import evaluate
    clips = _load_split(args.manifest, args.split)
    model = _load_model(args.checkpoint, clips)
    preds = _predictions(model, clips, args.smooth)
    if args.dump_predictions:
        np.savez_compressed(args.dump_predictions, **preds)
    if args.reference:
        # score against a predictions dump instead of the ground truth
        ref = np.load(args.reference)
        clips = [_with_masks(c, ref[c.clip_id]) for c in clips]
    res = evaluate(model, clips, predictions=preds)
    miou, per_class = mean_iou(res.cm)
    rows = [(Path(args.checkpoint).stem, miou, per_class)]
    report = {"checkpoint": args.checkpoint, "split": args.split, "smooth": args.smooth,
              "mIoU": miou, "per_class": dict(zip(CLASS_NAMES, per_class)),
              "background_iou": per_class[0]}
    if args.subjects:
        by_clip = {c.clip_id: c.subject for c in clips}
        pairs = [(by_clip[cid], float(v)) for cid, vals in res.frame_miou.items() for v in vals]
        report["subjects"] = [s.__dict__ for s in per_subject_report(pairs)]
    if args.baseline:
        base = _load_model(args.baseline, clips)
        if base.num_classes != model.num_classes:
            raise CommandError("baseline and model class counts differ")
        bres = evaluate(base, clips, predictions=_predictions(base, clips))
        bmiou, bpc = mean_iou(bres.cm)
        rows.append((Path(args.baseline).stem, bmiou, bpc))
        report["baseline_mIoU"] = bmiou
        report["temporal_profile"] = res.position_miou() - bres.position_miou()
        if args.groups:
            groups = split_groups([c.clip_id for c in clips], args.groups, args.group_seed)
            a, b = res.group_miou(groups), bres.group_miou(groups)
            p, sig = grouped_significance(a, b, args.alpha, args.alternative)
            report["groups"] = {"model": a, "baseline": b, "p_value": p, "significant": sig,
                                "alternative": args.alternative}
    elif args.groups:
        raise CommandError("--groups needs --baseline")
    table = iou_table_csv(rows)
    report["table_csv"] = table
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "iou_table.csv").write_text(table)
        (out / "report.json").write_text(json.dumps(report, indent=2, default=_plain))
    log.info("\n%s", ascii_table(table))
    return report


def _with_masks(clip, masks):
    from .data.synth import Clip
    n = len(masks)
    return Clip(clip.clip_id, clip.subject, clip.split, clip.frames[:n], np.asarray(masks),
                fps=clip.fps)


def cmd_cascade_eval(args) -> dict:
    from .cascade import CascadeBundle, cascade_predictions
    from .train import evaluate
    clips = _load_split(args.manifest, args.split)
    primary = _load_model(args.primary, clips)
    eyes = _load_model(args.eyes) if args.eyes else None
    mouth = _load_model(args.mouth) if args.mouth else None
    bundle = CascadeBundle(primary, eyes, mouth, window=WINDOW)
    base = evaluate(primary, clips, predictions=_predictions(primary, clips))
    integ = evaluate(primary, clips, predictions=cascade_predictions(bundle, clips))
    rows = [("primary", *mean_iou(base.cm)), ("integrated", *mean_iou(integ.cm))]
    table = iou_table_csv(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    log.info("\n%s", ascii_table(table))
    return {"table_csv": table, "notices": bundle.notices,
            "primary_mIoU": rows[0][1], "integrated_mIoU": rows[1][1]}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_registered
    results = run_registered(args.eps, args.tol, args.seed, composite=not args.ops_only)
    failed = [n for n, r in results if not r.ok]
    for n, r in results:
        log.info("%s %s (max rel err %.2e)", "PASS" if r.ok else "FAIL", n, r.max_rel_error)
    out = {"checks": len(results), "failed": failed,
           "max_rel_error": {n: r.max_rel_error for n, r in results}}
    if failed:
        raise CommandError(f"{len(failed)} gradient check(s) failed: {failed}")
    return out


def _read_scores(path: str) -> np.ndarray:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=np.float64)
    return np.asarray([float(v) for v in text.replace(",", " ").split()])


def cmd_stats(args) -> dict:
    a, b = _read_scores(args.a), _read_scores(args.b)
    if a.shape != b.shape:
        raise CommandError(f"score files differ in length: {a.size} vs {b.size}")
    p, sig = grouped_significance(a, b, args.alpha, args.alternative)
    return {"n": int(a.size), "mean_difference": float((a - b).mean()), "p_value": p,
            "significant": sig, "alpha": args.alpha, "alternative": args.alternative}


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segkit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic face-video dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--clips", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-landmarks", help="rasterise 68-point pts files into masks")
    p.add_argument("pts", nargs="+")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_landmarks)

    p = sub.add_parser("train", help="two-step training into a run directory")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--smooth", action="store_true", help="temporal smoothing before argmax")
    p.add_argument("--baseline")
    p.add_argument("--groups", type=int, default=0)
    p.add_argument("--group-seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--alternative", default="two-sided",
                   choices=("two-sided", "greater", "less"))
    p.add_argument("--subjects", action="store_true")
    p.add_argument("--dump-predictions")
    p.add_argument("--reference", help="predictions dump used in place of ground truth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cascade-eval", help="primary-only vs integrated cascade report")
    p.add_argument("--primary", required=True)
    p.add_argument("--eyes")
    p.add_argument("--mouth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cascade_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="paired t-test on two lists of group scores")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--alternative", default="two-sided",
                   choices=("two-sided", "greater", "less"))
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(args.func(args))
    except Exception as e:  # every failure leaves one JSON line on stderr
        print(json.dumps({"error": type(e).__name__, "message": str(e),
                          "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

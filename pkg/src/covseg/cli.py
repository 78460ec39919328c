"""``covseg`` command line: prepare, train, predict, aggregate, evaluate, selftest.

Exit codes: 0 success, 1 check/assertion failure (including NaN aborts),
2 input or usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data, inference, metrics
from .config import ConfigError, RunConfig, dump_config, load_config
from .inference import OrderingError
from .training import NonFiniteError, fit, history_csv
from .unet import ConfigError as NetConfigError
from .unet import UNet
from .weights import WeightFileError, load_weights, model_from_weights, save_weights, transfer_load

log = logging.getLogger("covseg")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _seed_line(seed):
    return f"seed={seed}"


def _require(path, what):
    if not path or not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    _require(args.images, "image directory")
    _require(args.via, "VIA annotation file")
    _require(args.labels, "labels file")
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    with open(args.via, encoding="utf-8") as fh:
        via_text = fh.read()
    records, unsupported = data.build_manifest(args.images, via_text, args.labels, mask_dir=os.path.join(args.out, "masks"))
    for fname, idx, name in unsupported:
        print(f"warning: {fname} region {idx}: unsupported shape {name!r} ignored", file=sys.stderr)
    header = _seed_line(args.seed)
    data.write_manifest(os.path.join(args.out, "manifest.csv"), records, header)
    splits = data.stratified_split(records, tuple(args.ratios), args.prevalence, args.seed)
    split_dir = os.path.join(args.out, "splits")
    os.makedirs(split_dir, exist_ok=True)
    for sp in splits:
        data.write_manifest(os.path.join(split_dir, f"{sp.name}.csv"), sp.records, header)
    print(data.balance_table(splits))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k, None) for k in ("seed", "max_epochs", "train_manifest", "val_manifest")}
    return cfg.with_overrides(**overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _require(cfg.train_manifest, "training manifest")
    _require(cfg.val_manifest, "validation manifest")
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    train_recs = data.read_manifest(cfg.train_manifest)
    val_recs = data.read_manifest(cfg.val_manifest)
    if not train_recs or not val_recs:
        raise InputError("training and validation manifests must be non-empty")
    xtr, ytr = data.load_arrays(train_recs, cfg.input_size)
    xva, yva = data.load_arrays(val_recs, cfg.input_size)
    model = UNet(cfg.unet(), seed=cfg.seed)
    if args.resume:
        _require(args.resume, "resume checkpoint")
        report = transfer_load(model, load_weights(args.resume), strict=True)
        print(f"resumed from {args.resume}: {len(report.loaded)} tensors")
    if args.pretrained:
        _require(args.pretrained, "pretrained weights")
        report = transfer_load(model, load_weights(args.pretrained), strict=False)
        lines = report.lines()
        print("transfer ledger:")
        for ln in lines:
            print(f"  {ln}")
        _write(os.path.join(out, "transfer_report.txt"), "\n".join(lines) + "\n")
    ckpt_dir = os.path.join(out, "checkpoints") if cfg.checkpoint_every else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    result = fit(model, (xtr, ytr), (xva, yva), cfg.train_run(), checkpoint_dir=ckpt_dir)
    save_weights(result.best, os.path.join(out, "best.csegw"))
    save_weights(result.final, os.path.join(out, "final.csegw"))
    _write(os.path.join(out, "history.csv"), history_csv(result.history, _seed_line(cfg.seed)))
    _write(os.path.join(out, "run_config.toml"), dump_config(cfg))
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6g}; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict / aggregate
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    _require(args.checkpoint, "checkpoint")
    _require(args.manifest, "manifest")
    weights = load_weights(args.checkpoint)
    cfg = _run_config(args)
    if args.config and weights.fingerprint != cfg.unet().fingerprint:
        raise InputError(
            f"checkpoint fingerprint {weights.fingerprint} does not match the configured network {cfg.unet().fingerprint}"
        )
    model = model_from_weights(weights).eval()
    size = model.config.input_size
    records = data.read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    prob_dir = os.path.join(args.out, "probs")
    os.makedirs(prob_dir, exist_ok=True)
    overlay_dir = os.path.join(args.out, "overlays")
    if args.overlays:
        os.makedirs(overlay_dir, exist_ok=True)
    threshold = cfg.pixel_threshold if args.pixel_threshold is None else args.pixel_threshold
    min_area = cfg.min_area if args.min_area is None else args.min_area
    min_area = min_area or inference.default_min_area(size, size)
    preds = []
    for r in records:
        img = data.load_slice_image(r.image_path)
        x = data.resize_bilinear(img, size) if img.shape != (size, size) else img
        prob = model.predict(x[None, None])[0, 0]
        p = inference.classify_slice(prob, threshold, min_area, r.scan_id, r.slice_index)
        p.image_path = r.image_path
        p.prob_map = None
        stem = f"{r.scan_id}_{r.slice_index:04d}"
        np.save(os.path.join(prob_dir, f"{stem}.npy"), prob.astype(np.float32))
        if args.overlays:
            inference.save_rgb_png(os.path.join(overlay_dir, f"{stem}.png"), inference.overlay_mask(x, prob > threshold, args.alpha))
        preds.append(p)
    header = _seed_line(cfg.seed)
    _write(os.path.join(args.out, "predictions.csv"), inference.predictions_csv(preds, header))
    trend_dir = os.path.join(args.out, "trends")
    os.makedirs(trend_dir, exist_ok=True)
    for sid, items in inference.group_by_scan(preds).items():
        _write(os.path.join(trend_dir, f"{sid}.csv"), inference.export_trend(items, header))
    print(f"{len(preds)} slice predictions written to {args.out}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    _require(args.predictions, "predictions file")
    preds = inference.read_slice_flags(args.predictions)
    scans = inference.aggregate_predictions(preds, args.K)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "scan_report.csv"), inference.scan_report_csv(scans, f"K={args.K}"))
    n_pos = sum(s.positive for s in scans)
    print(f"{len(scans)} scans, {n_pos} positive (K={args.K})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _read_truth(path, key_cols):
    _require(path, "truth file")
    rows = data.read_csv_rows(path, key_cols + ("label",))
    if not rows:
        raise InputError(f"truth file {path} has no rows")
    truth = {}
    for r in rows:
        truth[tuple(r[c] for c in key_cols)] = r
    return truth


def _label_flag(text):
    t = str(text).strip().lower()
    if t in ("positive", "1", "true"):
        return 1
    if t in ("negative", "0", "false"):
        return 0
    raise InputError(f"unrecognised label {text!r}")


def _check_ids(pred_keys, truth_keys):
    missing = sorted(set(truth_keys) - set(pred_keys))
    extra = sorted(set(pred_keys) - set(truth_keys))
    if missing or extra:
        lines = [f"no prediction for {k}" for k in missing] + [f"no truth for {k}" for k in extra]
        raise InputError("id mismatch between predictions and truth:\n  " + "\n  ".join(lines))


def cmd_evaluate(args) -> int:
    if bool(args.scan_report) == bool(args.slice_preds):
        raise InputError("give exactly one of --scan-report or --slice-preds")
    os.makedirs(args.out, exist_ok=True)
    extra_lines = []
    if args.scan_report:
        truth = _read_truth(args.truth, ("scan_id",))
        _require(args.scan_report, "scan report")
        rows = data.read_csv_rows(args.scan_report, ("scan_id", "verdict"))
        preds = {(r["scan_id"],): _label_flag(r["verdict"]) for r in rows}
        level = "scan"
    else:
        truth = _read_truth(args.truth, ("scan_id", "slice_index"))
        _require(args.slice_preds, "slice predictions")
        rows = data.read_csv_rows(args.slice_preds, ("scan_id", "slice_index", "positive"))
        preds = {(r["scan_id"], r["slice_index"]): _label_flag(r["positive"]) for r in rows}
        level = "slice"
    _check_ids(preds, truth)
    keys = sorted(truth)
    p = np.array([preds[k] for k in keys])
    t = np.array([_label_flag(truth[k]["label"]) for k in keys])
    cm = metrics.confusion(p, t)
    try:
        reports = metrics.evaluation_reports(cm, p, t, seed=args.seed, resamples=args.resamples)
    except metrics.UndefinedMetricError as exc:
        raise InputError(str(exc)) from exc
    if level == "slice" and args.probs_dir:
        pairs = []
        for k in keys:
            mask_path = truth[k].get("mask_path", "")
            if not mask_path or _label_flag(truth[k]["label"]) == 0:
                continue
            prob = np.load(os.path.join(args.probs_dir, f"{k[0]}_{int(k[1]):04d}.npy"))
            true = data.load_mask_png(mask_path)
            if true.shape != prob.shape:
                true = data.resize_nearest(true, *prob.shape)
            pairs.append((prob > args.pixel_threshold, true))
        if pairs:
            d = metrics.mean_dice_over_positives(pairs)
            extra_lines.append(f"mean dice over {len(pairs)} positive slices: {d:.3f}")
            reports.append(metrics.MetricReport("dice", d, d, d, "none", len(pairs)))
    header = f"{_seed_line(args.seed)} level={level} tp={cm.tp} fn={cm.fn} tn={cm.tn} fp={cm.fp}"
    _write(os.path.join(args.out, "metrics.csv"), metrics.report_csv(reports, header))
    text = "\n".join([f"{level}-level evaluation (tp={cm.tp}, fn={cm.fn}, tn={cm.tn}, fp={cm.fp})", metrics.report_text(reports)] + extra_lines)
    _write(os.path.join(args.out, "metrics.txt"), text + "\n")
    print(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covseg", description="CT slice segmentation and scan-level triage")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build manifest, masks and stratified splits")
    p.add_argument("--images", required=True)
    p.add_argument("--via", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--prevalence", type=float, default=0.20)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit the network")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.add_argument("--pretrained")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-slice probability maps and flags")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--pixel-threshold", type=float, dest="pixel_threshold")
    p.add_argument("--min-area", type=int, dest="min_area")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("aggregate", help="scan verdicts from slice flags")
    p.add_argument("--predictions", required=True)
    p.add_argument("--K", type=int, default=inference.DEFAULT_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="sensitivity/specificity/F1 with 95%% CIs")
    p.add_argument("--scan-report", dest="scan_report")
    p.add_argument("--slice-preds", dest="slice_preds")
    p.add_argument("--truth", required=True)
    p.add_argument("--probs-dir", dest="probs_dir")
    p.add_argument("--pixel-threshold", type=float, default=0.5, dest="pixel_threshold")
    p.add_argument("--resamples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="gradient, rasterization, aggregation and metric checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, data.DataError, ConfigError, NetConfigError, OrderingError, WeightFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())

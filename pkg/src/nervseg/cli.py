"""Command-line entry point: ``nervseg {synth,train,crossval,eval,predict,benchmark}``.

Everything a command writes goes under ``--output_dir``::

    runs/         training runs (one directory per fold)
    predictions/  predicted masks, overlays and per-image sidecars
    reports/      metric tables, summaries and figures
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from .metrics import SUMMARY_COLUMNS, dice, f2, fmt, overlay, write_report
from .models import ARCHITECTURES, Architecture, ModelConfig
from .plotting import LABELS

log = logging.getLogger("nervseg.cli")


class CliError(Exception):
    pass


def _load_pairs(path):
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"dataset path not found: {root}")
    pairs, report = data_mod.load_dataset(root, return_report=True)
    if report.skipped:
        print(f"skipped {len(report.skipped)} incomplete id(s): {', '.join(sorted(report.skipped))}")
    if not pairs:
        raise CliError(f"no complete samples under {root}")
    return pairs


def _configs(args):
    from .training import load_config

    try:
        return load_config(args.config, args.override)
    except (ValueError, OSError) as exc:
        raise CliError(str(exc)) from None


def summary_table(rows, title=""):
    """Fixed-width text table; ``rows`` is a list of (label, {metric: str})."""
    headers = ["", *[LABELS[k] for k in SUMMARY_COLUMNS]]
    body = [[label, *[cells.get(k, "") for k in SUMMARY_COLUMNS]] for label, cells in rows]
    widths = [max(len(str(r[i])) for r in [headers, *body]) for i in range(len(headers))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in body)
    return "\n".join(lines)


def _mean_std_cells(summary):
    cells = {}
    for k in SUMMARY_COLUMNS:
        m = summary[k]
        cells[k] = "undefined" if m["mean"] is None else f"{100 * m['mean']:.2f} ± {100 * m['std']:.2f}"
    return cells


def _report_cells(report_summary):
    return {k: fmt(report_summary[k]) for k in SUMMARY_COLUMNS}


def _write_summary_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", *SUMMARY_COLUMNS])
        for label, cells in rows:
            w.writerow([label, *[cells.get(k, "") for k in SUMMARY_COLUMNS]])


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.n < 1:
        raise CliError("--n must be >= 1")
    if args.size < 64:
        raise CliError("--size must be >= 64")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg = data_mod.SynthConfig(empty_fraction=args.empty_fraction)
        ids = data_mod.synth_generate(out, args.n, args.size, args.seed, cfg)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from None
    print(f"wrote {len(ids)} samples to {out}")


def cmd_train(args):
    from .training import train_fold

    mcfg, tcfg = _configs(args)
    pairs = _load_pairs(args.data)
    folds = data_mod.make_folds([p.id for p in pairs], tcfg.k_folds, tcfg.fold_seed)
    if not 0 <= args.fold < len(folds):
        raise CliError(f"--fold must be in [0, {len(folds) - 1}]")
    out = Path(args.output_dir)
    record = train_fold(mcfg, tcfg, folds[args.fold], pairs, out / "runs" / f"fold_{args.fold}")
    rows = [(f"fold {record.fold_id} (epoch {record.best_epoch})", _report_cells(record.best_report.summary))]
    print(summary_table(rows, f"{mcfg.architecture.value}: best validation epoch"))
    (out / "reports").mkdir(parents=True, exist_ok=True)
    _write_summary_csv(out / "reports" / "train_summary.csv", rows)
    print(f"checkpoint: {record.best_checkpoint}")


def cmd_crossval(args):
    from .plotting import plot_crossval_summary
    from .training import cross_validate

    mcfg, tcfg = _configs(args)
    pairs = _load_pairs(args.data)
    out = Path(args.output_dir)
    records, summary = cross_validate(mcfg, tcfg, pairs, out / "runs")
    rows = [(f"fold {r.fold_id}", _report_cells(r.best_report.summary)) for r in records]
    rows.append(("mean ± std (%)", _mean_std_cells(summary)))
    table = summary_table(rows, f"{mcfg.architecture.value}: {len(records)}-fold cross-validation")
    print(table)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "crossval_summary.txt").write_text(table + "\n")
    _write_summary_csv(reports / "crossval_summary.csv", rows)
    (reports / "crossval_summary.json").write_text(json.dumps(
        {"model": mcfg.architecture.value, "folds": len(records), "metrics": summary}, indent=2))
    plot_crossval_summary(summary, reports / "crossval_summary.png", mcfg.architecture.value)


def _load_for_inference(args):
    from .training import resume_model

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    try:
        model, stats, state = resume_model(ckpt, args.architecture)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return model, stats, state


def _prepared_arrays(pairs, stats, size):
    triples = [data_mod.preprocess(p, stats, size) for p in pairs]
    return {
        "jet": np.stack([t[0] for t in triples]),
        "rgb": np.stack([t[1] for t in triples]),
        "mask": np.stack([t[2] for t in triples]).astype(np.float32),
    }


def cmd_eval(args):
    from .training import evaluate_arrays

    model, stats, state = _load_for_inference(args)
    pairs = _load_pairs(args.data)
    threshold = args.dice_threshold if args.dice_threshold is not None else \
        state.get("train_config", {}).get("dice_threshold", 0.5)
    arrays = _prepared_arrays(pairs, stats, model.cfg.image_size)
    report, _ = evaluate_arrays(model, arrays, [p.id for p in pairs], [p.has_nerve for p in pairs], threshold)
    table, summary = write_report(report, Path(args.output_dir) / "reports", "eval")
    print(summary_table([(model.cfg.architecture.value, _report_cells(report.summary))],
                        f"evaluation over {len(pairs)} images (dice threshold {threshold})"))
    print(f"per-image table: {table}\nsummary: {summary}")


def cmd_predict(args):
    from .plotting import plot_overlay_panel
    from .training import predict_probs

    model, stats, _ = _load_for_inference(args)
    pairs = _load_pairs(args.data)
    size = model.cfg.image_size
    arrays = _prepared_arrays(pairs, stats, size)
    probs = predict_probs(model, arrays)
    out = Path(args.output_dir) / "predictions"
    for sub in ("masks", "overlays", "sidecars") + (("panels",) if args.panels else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    stream = "jet" if model.n_inputs == 2 else model.cfg.modality
    for pair, prob, target in zip(pairs, probs, arrays["mask"]):
        pred = (prob[0] >= 0.5).astype(np.uint8)
        truth = target[0].astype(np.uint8)
        src = np.array(Image.fromarray(getattr(pair, stream)).resize((size, size), Image.BILINEAR))
        ov = overlay(pred, truth, src)
        Image.fromarray(pred * 255).save(out / "masks" / f"{pair.id}.png")
        Image.fromarray(ov).save(out / "overlays" / f"{pair.id}.png")
        d = dice(pred, truth)
        if args.panels:
            plot_overlay_panel(src, ov, out / "panels" / f"{pair.id}.png", f"{pair.id}  dice {d:.3f}")
        (out / "sidecars" / f"{pair.id}.json").write_text(json.dumps({
            "id": pair.id, "has_nerve": pair.has_nerve, "dice": d, "f2": f2(pred, truth),
            "predicted_pixels": int(pred.sum()), "true_pixels": int(truth.sum()),
            "architecture": model.cfg.architecture.value,
        }, indent=2))
    print(f"wrote predictions for {len(pairs)} images to {out}")


def cmd_benchmark(args):
    from .plotting import plot_benchmark
    from .training import benchmark

    mcfg, _ = _configs(args)
    archs = [Architecture(a.upper()) for a in args.architectures] if args.architectures else ARCHITECTURES
    cfgs = [ModelConfig(**{**mcfg.to_dict(), "architecture": a}) for a in archs]
    rows = benchmark(cfgs, n_timed=args.n_timed, n_warmup=args.n_warmup)
    lines = [f"{'CNN':<16}{'Inference Time (ms)':>24}{'Number of Parameters':>24}"]
    for r in rows:
        t = f"{r['time_ms_mean']:.2f} ± {r['time_ms_std']:.2f}"
        lines.append(f"{r['architecture']:<16}{t:>24}{r['parameters']:>24,}")
    text = "\n".join(lines)
    print(text)
    reports = Path(args.output_dir) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "benchmark.txt").write_text(text + "\n")
    with open(reports / "benchmark.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    plot_benchmark(rows, reports / "benchmark.png")


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="nervseg", description="Multi-modal nerve segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired-modality dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--empty-fraction", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def config_args(sp):
        sp.add_argument("--config", help="flat YAML config (ModelConfig + TrainConfig keys)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--output_dir", "--output-dir", dest="output_dir", required=True)

    for name, func, helptext in (("train", cmd_train, "train one cross-validation fold"),
                                 ("crossval", cmd_crossval, "k-fold cross-validation")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--data", required=True)
        config_args(sp)
        if name == "train":
            sp.add_argument("--fold", type=int, default=0)
        sp.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "metrics for a checkpoint on a dataset"),
                                 ("predict", cmd_predict, "predicted masks and overlays")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--output_dir", "--output-dir", dest="output_dir", required=True)
        sp.add_argument("--architecture", choices=[a.value for a in ARCHITECTURES],
                        help="fail unless the checkpoint holds this architecture")
        if name == "eval":
            sp.add_argument("--dice-threshold", type=float)
        else:
            sp.add_argument("--panels", action="store_true", help="also render matplotlib side-by-side panels")
        sp.set_defaults(func=func)

    b = sub.add_parser("benchmark", help="parameter counts and inference latency")
    config_args(b)
    b.add_argument("--architectures", nargs="*", metavar="ARCH")
    b.add_argument("--n-timed", type=int, default=100)
    b.add_argument("--n-warmup", type=int, default=10)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "benchmark" and (args.n_timed < 100 or args.n_warmup < 10):
        log.warning("fewer than 100 timed / 10 warm-up passes; timings are indicative only")
    try:
        args.func(args)
    except (CliError, ValueError, ZeroDivisionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Dice/F2 segmentation metrics and dice-threshold detection metrics.

Conventions:
  * probabilities >= 0.5 binarize to foreground;
  * Dice and F2 of two empty masks are 1.0;
  * an image "detects" when its Dice is strictly greater than the threshold;
  * ratios with a zero denominator are ``None`` (written as "undefined").
"""

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THRESHOLD = 0.5
DETECTION_METRICS = ("accuracy", "sensitivity", "specificity", "precision", "balanced_accuracy")
SUMMARY_COLUMNS = DETECTION_METRICS + ("f2", "dice")


class Outcome(str, enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class PixelConfusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(probs, threshold=THRESHOLD):
    return (_as_numpy(probs) >= threshold).astype(np.uint8)


def confusion(pred, target):
    pred = _as_numpy(pred).astype(bool)
    target = _as_numpy(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    return PixelConfusion(tp, fp, fn, pred.size - tp - fp - fn)


def _fscore(c, beta_sq):
    # integer numerator and denominator, so the only rounding is the final division
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        return 1.0
    num = (1 + beta_sq) * c.tp
    return num / (num + beta_sq * c.fn + c.fp)


def dice(pred, target):
    return _fscore(confusion(pred, target), 1)


def f2(pred, target):
    return _fscore(confusion(pred, target), 4)


def detection_classify(has_nerve, dice_value, dice_threshold=THRESHOLD):
    if dice_value > dice_threshold:
        return Outcome.TP if has_nerve else Outcome.TN
    return Outcome.FN if has_nerve else Outcome.FP


@dataclass
class DetectionRecord:
    image_id: str
    has_nerve: bool
    dice: float
    f2: float
    outcome: Outcome


def _ratio(num, den):
    return num / den if den else None


@dataclass
class MetricsReport:
    records: list
    dice_threshold: float
    fold_id: object = None
    model_name: str = ""
    summary: dict = field(default_factory=dict)

    def to_summary_record(self):
        out = {"fold_id": self.fold_id, "model": self.model_name,
               "dice_threshold": self.dice_threshold, "n_images": len(self.records)}
        out.update(self.summary)
        return out


def aggregate(records, dice_threshold=THRESHOLD, fold_id=None, model_name=""):
    """Builds a MetricsReport from per-image DetectionRecords."""
    if not records:
        raise ValueError("aggregate needs at least one record")
    counts = {o: 0 for o in Outcome}
    for r in records:
        counts[r.outcome] += 1
    tp, tn, fp, fn = counts[Outcome.TP], counts[Outcome.TN], counts[Outcome.FP], counts[Outcome.FN]
    n = len(records)
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    summary = {
        "accuracy": sum(r.dice > dice_threshold for r in records) / n,
        "sensitivity": sens,
        "specificity": spec,
        "precision": _ratio(tp, tp + fp),
        "balanced_accuracy": (sens + spec) / 2 if sens is not None and spec is not None else None,
        "f2": float(np.mean([r.f2 for r in records])),
        "dice": float(np.mean([r.dice for r in records])),
        "counts": {o.value: c for o, c in counts.items()},
    }
    return MetricsReport(list(records), dice_threshold, fold_id, model_name, summary)


def evaluate_masks(items, dice_threshold=THRESHOLD, fold_id=None, model_name=""):
    """``items``: iterable of (image_id, has_nerve, pred_mask, true_mask)."""
    records = []
    for image_id, has_nerve, pred, target in items:
        d = dice(pred, target)
        records.append(DetectionRecord(str(image_id), bool(has_nerve), d, f2(pred, target),
                                       detection_classify(has_nerve, d, dice_threshold)))
    return aggregate(records, dice_threshold, fold_id, model_name)


def fmt(value, digits=4):
    return "undefined" if value is None else f"{value:.{digits}f}"


def write_report(report, out_dir, stem="metrics"):
    """Writes ``<stem>_per_image.csv`` and ``<stem>_summary.json``; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f"{stem}_per_image.csv"
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "has_nerve", "dice", "f2", "outcome"])
        for r in report.records:
            w.writerow([r.image_id, int(r.has_nerve), f"{r.dice:.6f}", f"{r.f2:.6f}", r.outcome.value])
    summary = out_dir / f"{stem}_summary.json"
    summary.write_text(json.dumps(report.to_summary_record(), indent=2))
    return table, summary


def read_per_image_table(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# overlay colors: predicted-only (over-segmentation), truth-only (under), both
OVER_COLOR = (0, 0, 255)
UNDER_COLOR = (255, 0, 0)
HIT_COLOR = (255, 255, 255)


def overlay(pred, target, background=None, dim=0.35):
    """RGB uint8 comparison image: blue = over-, red = under-segmentation, white = hit.

    Background pixels show ``background`` (H, W, 3 in [0, 1] or uint8) dimmed,
    or black when none is given.
    """
    pred = _as_numpy(pred).astype(bool).squeeze()
    target = _as_numpy(target).astype(bool).squeeze()
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    h, w = pred.shape
    if background is None:
        img = np.zeros((h, w, 3), dtype=np.uint8)
    else:
        bg = _as_numpy(background).astype(np.float64)
        if bg.max() > 1.0:
            bg = bg / 255.0
        img = np.clip(bg * dim * 255.0, 0, 255).astype(np.uint8)
    img[pred & ~target] = OVER_COLOR
    img[~pred & target] = UNDER_COLOR
    img[pred & target] = HIT_COLOR
    return img


def overlay_classes(pred, target):
    """Per-pixel class labels 0=background, 1=over, 2=under, 3=hit."""
    pred = _as_numpy(pred).astype(bool).squeeze()
    target = _as_numpy(target).astype(bool).squeeze()
    return (pred & ~target) * 1 + (~pred & target) * 2 + (pred & target) * 3

"""SGD training, multi-step LR schedule, k-fold cross-validation, benchmarking.

Config files are flat YAML mappings whose keys are the union of
``ModelConfig`` and ``TrainConfig`` field names (see ``config_schema()``).
A run directory holds::

    config.yaml              model + train config snapshot
    epochs.csv               one row per epoch: lr, losses, validation summary
    checkpoints/best.pt      best-by-selection-metric checkpoint
    reports/                 validation report of the best epoch + figures
    run.log                  log lines of this run
"""

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as data_mod
from .losses import positive_weight, total_loss
from .metrics import SUMMARY_COLUMNS, binarize, dice, evaluate_masks, write_report
from .models import Architecture, ModelConfig, build_model, load_checkpoint, model_inputs, parameter_count, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 8
    lr_initial: float = 0.03
    lr_milestones: tuple = (0.25, 0.75)
    # 1/3 reads "decayed by 1/3" as lr <- lr/3; use 2/3 for the lr <- lr - lr/3 reading
    lr_factor: float = 1.0 / 3.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    dice_threshold: float = 0.5
    augment: bool = True
    selection_metric: str = "f2"
    edge_norm: str = "pixel"
    k_folds: int = 5
    fold_seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)

    def validate(self):
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.lr_initial <= 0:
            errors.append("lr_initial must be > 0")
        ms = self.lr_milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            errors.append(f"lr_milestones must be strictly increasing in (0, 1), got {list(ms)}")
        if not 0 < self.lr_factor < 1:
            errors.append(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must be in [0, 1)")
        if not 0 <= self.dice_threshold <= 1:
            errors.append("dice_threshold must be in [0, 1]")
        if self.selection_metric not in SUMMARY_COLUMNS:
            errors.append(f"selection_metric must be one of {list(SUMMARY_COLUMNS)}")
        if self.edge_norm not in ("pixel", "image"):
            errors.append("edge_norm must be 'pixel' or 'image'")
        if self.k_folds < 2:
            errors.append("k_folds must be >= 2")
        return errors

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


def lr_at(epoch, cfg):
    """Learning rate for ``epoch``; drops by ``lr_factor`` at floor(fraction * epochs)."""
    passed = sum(epoch >= math.floor(m * cfg.epochs) for m in cfg.lr_milestones)
    return cfg.lr_initial * cfg.lr_factor ** passed


# ---------------------------------------------------------------- config files

def config_schema():
    """Flat key -> (section, type) map for config files and overrides."""
    schema = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in dataclasses.fields(cls):
            schema[f.name] = (section, f.type if isinstance(f.type, type) else type(f.default))
    return schema


def _coerce(key, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if typ is tuple:
        if isinstance(value, str):
            value = [v for v in value.strip("[]() ").split(",") if v.strip()]
        return tuple(float(v) for v in value)
    if typ is Architecture:
        try:
            return Architecture(str(value).upper())
        except ValueError:
            raise ValueError(f"{key}: unknown architecture {value!r}") from None
    if typ in (int, float):
        try:
            return typ(value)
        except (TypeError, ValueError):
            raise ValueError(f"{key}: expected {typ.__name__}, got {value!r}") from None
    return typ(value)


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_configs(values):
    """Flat dict -> (ModelConfig, TrainConfig); raises ValueError listing every problem."""
    schema = config_schema()
    errors = [f"unknown key {k!r}" for k in values if k not in schema]
    model_kw, train_kw = {}, {}
    for k, v in values.items():
        if k not in schema:
            continue
        section, typ = schema[k]
        try:
            (model_kw if section == "model" else train_kw)[k] = _coerce(k, v, typ)
        except ValueError as exc:
            errors.append(str(exc))
    if errors:
        raise ValueError("config errors:\n  " + "\n  ".join(errors))
    mcfg, tcfg = ModelConfig(**model_kw), TrainConfig(**train_kw)
    errors = mcfg.validate() + tcfg.validate()
    if errors:
        raise ValueError("config errors:\n  " + "\n  ".join(errors))
    return mcfg, tcfg


def load_config(path=None, overrides=()):
    values = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a flat key-value mapping")
        values.update(raw)
    values.update(parse_overrides(overrides))
    return build_configs(values)


def dump_config(path, mcfg, tcfg):
    merged = {**mcfg.to_dict(), **tcfg.to_dict()}
    Path(path).write_text(yaml.safe_dump(merged, sort_keys=False))


# ---------------------------------------------------------------- data prep

@dataclass
class PreparedFold:
    train: dict      # jet, rgb, mask arrays (N, C, H, W)
    val: dict
    val_ids: list
    val_has_nerve: list
    stats: data_mod.NormalizationStats
    w_p: float


def prepare_fold(pairs, fold, mcfg, tcfg, aug_cfg=None):
    by_id = {p.id: p for p in pairs}
    unknown = [i for i in fold.train_ids + fold.val_ids if i not in by_id]
    if unknown:
        raise ValueError(f"fold {fold.fold_id} references unknown ids: {unknown[:5]}")
    size = mcfg.image_size
    train_scaled = [data_mod.resize_and_scale(by_id[i], size) for i in fold.train_ids]
    w_p = positive_weight(t[2] for t in train_scaled)
    stats = data_mod.compute_stats(train_scaled)

    triples = list(train_scaled)
    if tcfg.augment:
        for sid, (j, r, m) in zip(fold.train_ids, train_scaled):
            rng = data_mod.sample_rng(tcfg.seed, sid)
            triples.extend((a["jet"], a["rgb"], a["mask"]) for a in data_mod.augment(j, r, m, rng, aug_cfg))

    def pack(items):
        return {
            "jet": np.stack([data_mod.standardize(t[0], stats.jet_mean, stats.jet_std) for t in items]),
            "rgb": np.stack([data_mod.standardize(t[1], stats.rgb_mean, stats.rgb_std) for t in items]),
            "mask": np.stack([t[2] for t in items]).astype(np.float32),
        }

    val_scaled = [data_mod.resize_and_scale(by_id[i], size) for i in fold.val_ids]
    return PreparedFold(pack(triples), pack(val_scaled) if val_scaled else None,
                        list(fold.val_ids), [by_id[i].has_nerve for i in fold.val_ids], stats, w_p)


def _to_batch(arrays, idx=None):
    sel = slice(None) if idx is None else idx
    return {k: torch.from_numpy(np.ascontiguousarray(v[sel])) for k, v in arrays.items()}


@torch.no_grad()
def predict_probs(model, arrays, batch_size=8):
    model.eval()
    out = []
    n = len(arrays["mask"]) if "mask" in arrays else len(arrays["jet"])
    for s in range(0, n, batch_size):
        batch = {k: torch.from_numpy(np.ascontiguousarray(v[s:s + batch_size])) for k, v in arrays.items()}
        out.append(torch.sigmoid(model(*model_inputs(model, batch))).numpy())
    return np.concatenate(out)


def evaluate_arrays(model, arrays, ids, has_nerve, dice_threshold=0.5, fold_id=None, batch_size=8):
    probs = predict_probs(model, arrays, batch_size)
    preds = binarize(probs)
    items = [(i, h, p[0], m[0]) for i, h, p, m in zip(ids, has_nerve, preds, arrays["mask"])]
    return evaluate_masks(items, dice_threshold, fold_id, model.cfg.architecture.value), preds


# ---------------------------------------------------------------- training

@dataclass
class RunRecord:
    fold_id: int
    train_ids: list
    val_ids: list
    w_p: float
    epochs: list = field(default_factory=list)        # per-epoch dicts
    val_reports: list = field(default_factory=list)   # MetricsReport per epoch
    best_epoch: int = -1
    best_checkpoint: str = None
    wall_clock: dict = field(default_factory=dict)

    @property
    def best_report(self):
        return self.val_reports[self.best_epoch] if self.val_reports else None

    @property
    def final_train_loss(self):
        return self.epochs[-1]["total"] if self.epochs else None


def _seed_everything(seed, model):
    torch.manual_seed(seed)
    if getattr(model, "dropout_generator", None) is not None:
        model.dropout_generator.manual_seed(seed)


def make_optimizer(model, tcfg):
    return torch.optim.SGD(model.parameters(), lr=tcfg.lr_initial, momentum=tcfg.momentum,
                           weight_decay=tcfg.weight_decay)


def _run_logger(run_dir):
    handler = logging.FileHandler(Path(run_dir) / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("nervseg")
    root.addHandler(handler)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    return handler


def train_fold(mcfg, tcfg, fold, pairs, run_dir=None, aug_cfg=None, prepared=None, render_figures=True):
    """Trains one fold and returns its RunRecord.

    ``run_dir`` (optional) receives the config snapshot, per-epoch table,
    best checkpoint, validation report and run log.
    """
    errors = mcfg.validate() + tcfg.validate()
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    t0 = time.perf_counter()
    handler = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        handler = _run_logger(run_dir)
        dump_config(run_dir / "config.yaml", mcfg, tcfg)
    try:
        prep = prepared or prepare_fold(pairs, fold, mcfg, tcfg, aug_cfg)
        record = RunRecord(fold.fold_id, list(fold.train_ids), list(fold.val_ids), prep.w_p)
        log.info("fold %s: %d train (%d after augmentation), %d val, w_p=%.4f",
                 fold.fold_id, len(fold.train_ids), len(prep.train["mask"]), len(fold.val_ids), prep.w_p)

        model = build_model(mcfg)
        _seed_everything(tcfg.seed, model)
        opt = make_optimizer(model, tcfg)
        order_rng = np.random.default_rng(tcfg.seed)
        n = len(prep.train["mask"])
        best_score = -math.inf
        for epoch in range(tcfg.epochs):
            lr = lr_at(epoch, tcfg)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            sums = {"bce": 0.0, "edge": 0.0, "total": 0.0}
            steps = 0
            perm = order_rng.permutation(n)
            for s in range(0, n, tcfg.batch_size):
                batch = _to_batch(prep.train, np.sort(perm[s:s + tcfg.batch_size]))
                logits = model(*model_inputs(model, batch))
                loss = total_loss(logits, batch["mask"], prep.w_p, edge_norm=tcfg.edge_norm)
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                opt.step()
                for k, v in loss.as_floats().items():
                    sums[k] += v
                steps += 1
            row = {"epoch": epoch, "lr": lr, **{k: v / steps for k, v in sums.items()}}
            if prep.val is not None:
                report, _ = evaluate_arrays(model, prep.val, prep.val_ids, prep.val_has_nerve,
                                            tcfg.dice_threshold, fold.fold_id)
                record.val_reports.append(report)
                row.update({f"val_{k}": report.summary[k] for k in SUMMARY_COLUMNS})
                score = report.summary[tcfg.selection_metric]
                score = -math.inf if score is None else score
                if score > best_score:
                    best_score = score
                    record.best_epoch = epoch
                    if run_dir is not None:
                        path = run_dir / "checkpoints" / "best.pt"
                        save_checkpoint(path, model, {
                            "epoch": epoch, "fold_id": fold.fold_id, "w_p": prep.w_p,
                            "normalization": prep.stats.to_dict(), "train_config": tcfg.to_dict(),
                            "val_summary": report.summary,
                        })
                        record.best_checkpoint = str(path)
            record.epochs.append(row)
            log.info("fold %s epoch %d lr=%.5f loss=%.4f (bce %.4f, edge %.4f)%s", fold.fold_id, epoch, lr,
                     row["total"], row["bce"], row["edge"],
                     f" val_dice={row['val_dice']:.4f} val_f2={row['val_f2']:.4f}" if "val_dice" in row else "")
        record.wall_clock = {"seconds": time.perf_counter() - t0}
        record.model = model
        if run_dir is not None:
            _persist_run(record, run_dir, render_figures)
        return record
    finally:
        if handler is not None:
            logging.getLogger("nervseg").removeHandler(handler)
            handler.close()


def _fmt_cell(v):
    return "undefined" if v is None else v


def _persist_run(record, run_dir, render_figures=True):
    with open(run_dir / "epochs.csv", "w", newline="") as f:
        keys = list(record.epochs[0].keys())
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in record.epochs:
            w.writerow({k: _fmt_cell(row.get(k)) for k in keys})
    meta = {"fold_id": record.fold_id, "w_p": record.w_p, "best_epoch": record.best_epoch,
            "best_checkpoint": record.best_checkpoint, "train_ids": record.train_ids,
            "val_ids": record.val_ids, "wall_clock": record.wall_clock}
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2))
    if record.best_report is not None:
        write_report(record.best_report, run_dir / "reports", "val_best")
    if render_figures:
        from .plotting import plot_learning_curves

        plot_learning_curves(record.epochs, run_dir / "reports" / "learning_curves.png")


def summarize(records):
    """mean and population std (ddof=0) of each best-epoch validation metric across folds."""
    out = {}
    for key in SUMMARY_COLUMNS:
        values = [r.best_report.summary[key] for r in records if r.best_report is not None]
        defined = [v for v in values if v is not None]
        if defined:
            out[key] = {"mean": float(np.mean(defined)), "std": float(np.std(defined)), "n": len(defined)}
        else:
            out[key] = {"mean": None, "std": None, "n": 0}
    return out


def cross_validate(mcfg, tcfg, pairs, out_dir=None, aug_cfg=None, render_figures=True):
    """Runs ``tcfg.k_folds`` folds; returns (records, summary)."""
    if len(pairs) < tcfg.k_folds:
        raise ValueError(f"cross-validation needs at least {tcfg.k_folds} samples, got {len(pairs)}")
    folds = data_mod.make_folds([p.id for p in pairs], tcfg.k_folds, tcfg.fold_seed)
    records = []
    for fold in folds:
        run_dir = None if out_dir is None else Path(out_dir) / f"fold_{fold.fold_id}"
        records.append(train_fold(mcfg, tcfg, fold, pairs, run_dir, aug_cfg, render_figures=render_figures))
    summary = summarize(records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "summary.json").write_text(json.dumps(
            {"model": mcfg.architecture.value, "folds": len(records), "metrics": summary}, indent=2))
        if render_figures:
            from .plotting import plot_crossval_summary

            plot_crossval_summary(summary, out_dir / "summary.png", mcfg.architecture.value)
    return records, summary


# ---------------------------------------------------------------- overfit / benchmark

def overfit_batch(model, batch, steps=300, lr=0.03, momentum=0.9, target_dice=0.95, check_every=10):
    """Trains on one fixed batch until eval-mode mean Dice exceeds ``target_dice``.

    Returns ``(steps_taken, dice_history)``; ``steps_taken`` is None when the
    target was not reached.
    """
    w_p = positive_weight(batch["mask"])
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    history = []
    inputs = model_inputs(model, batch)
    target = batch["mask"]
    for step in range(1, steps + 1):
        model.train()
        loss = total_loss(model(*inputs), target, w_p)
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        opt.step()
        if step % check_every == 0 or step == steps:
            with torch.no_grad():
                model.eval()
                preds = binarize(torch.sigmoid(model(*inputs)))
            d = float(np.mean([dice(p, m) for p, m in zip(preds, target.numpy())]))
            history.append((step, d, loss.total.item()))
            if d > target_dice:
                return step, history
    return None, history


def benchmark(model_cfgs, n_timed=100, n_warmup=10, batch_size=1):
    """Parameter count and eval-mode forward latency (ms) per architecture."""
    rows = []
    for cfg in model_cfgs:
        model = build_model(cfg).eval()
        size = cfg.image_size
        gen = torch.Generator().manual_seed(cfg.seed)
        x = torch.randn(batch_size, cfg.in_channels_per_modality, size, size, generator=gen)
        inputs = (x, x.clone()) if model.n_inputs == 2 else (x,)
        times = []
        with torch.no_grad():
            for _ in range(n_warmup):
                model(*inputs)
            for _ in range(n_timed):
                t = time.perf_counter()
                model(*inputs)
                times.append((time.perf_counter() - t) * 1000.0)
        rows.append({"architecture": cfg.architecture.value, "parameters": parameter_count(model),
                     "time_ms_mean": float(np.mean(times)), "time_ms_std": float(np.std(times)),
                     "n_timed": n_timed, "image_size": size})
    return rows


def resume_model(checkpoint, expected_architecture=None):
    """Loads a checkpoint written by ``train_fold``; returns (model, NormalizationStats, train_state)."""
    model, state = load_checkpoint(checkpoint, expected_architecture)
    if "normalization" not in state:
        raise ValueError(f"{checkpoint} has no normalization stats in its training state")
    return model, data_mod.NormalizationStats.from_dict(state["normalization"]), copy.deepcopy(state)

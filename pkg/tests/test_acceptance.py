"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section at the end
of the pytest run (see conftest.py).
"""

import json
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from nervseg.cli import main as cli_main
from nervseg.data import FoldSplit, augment, hflip, load_dataset, make_folds, rot90, synth_generate, vflip
from nervseg.fusion import CrossModalTransformerBlock, scaled_dot_attention
from nervseg.losses import edge_loss, total_loss, weighted_bce
from nervseg.metrics import Outcome, confusion, detection_classify, dice, f2
from nervseg.models import ARCHITECTURES, Architecture, ModelConfig, build_model, parameter_count
from nervseg.training import TrainConfig, _to_batch, lr_at, overfit_batch, prepare_fold, train_fold

from conftest import autograd_grad, central_diff_grad, record_criterion, rel_error

REFERENCE_COUNTS = {
    Architecture.UNET: 34_527_041,
    Architecture.ATT_UNET: 34_878_573,
    Architecture.XATT_UNET: 37_324_801,
    Architecture.DUAL_UNET: 47_068_289,
    Architecture.COLEARN_UNET: 56_506_497,
    Architecture.DXM_TRANSFUSE: 53_373_057,
}


def test_criterion_01_parameter_counts():
    counts = {a: parameter_count(build_model(ModelConfig(a))) for a in ARCHITECTURES}
    rel = {a: abs(counts[a] - REFERENCE_COUNTS[a]) / REFERENCE_COUNTS[a] for a in ARCHITECTURES}
    order = [Architecture.UNET, Architecture.ATT_UNET, Architecture.XATT_UNET, Architecture.DUAL_UNET,
             Architecture.DXM_TRANSFUSE, Architecture.COLEARN_UNET]
    strictly_ordered = all(counts[a] < counts[b] for a, b in zip(order, order[1:]))
    ok = all(r < 0.10 for r in rel.values()) and strictly_ordered
    worst = max(rel, key=rel.get)
    record_criterion(1, "parameter counts within 10% and strictly ordered", ok,
                     f"worst {worst.value} {100 * rel[worst]:.3f}%, ordered={strictly_ordered}")
    assert ok


def test_criterion_02_gradient_suite():
    g = np.random.default_rng(2)
    errors = []
    # total loss on float64 maps up to 8x8
    for _ in range(30):
        h, w = (int(v) for v in g.integers(2, 9, size=2))
        logits = torch.from_numpy(g.normal(size=(1, 1, h, w)) * 2)
        y = torch.from_numpy((g.random((1, 1, h, w)) > 0.5).astype(float))
        w_p = float(g.uniform(0.5, 5.0))
        f = lambda t: total_loss(t, y, w_p).total  # noqa: E731
        errors.append(rel_error(autograd_grad(f, logits), central_diff_grad(f, logits)))
    # scaled dot-product attention with at most 4 tokens, each of q, k, v
    for _ in range(30):
        tq, tk = (int(v) for v in g.integers(1, 5, size=2))
        d = int(g.integers(1, 6))
        q, k, v = (torch.from_numpy(g.normal(size=s)) for s in ((tq, d), (tk, d), (tk, d)))
        proj = torch.from_numpy(g.normal(size=(tq, d)))
        for which in range(3):
            def f(t, which=which):
                args = [q, k, v]
                args[which] = t
                return (scaled_dot_attention(*args) * proj).sum()

            x = (q, k, v)[which]
            errors.append(rel_error(autograd_grad(f, x), central_diff_grad(f, x)))
    worst = max(errors)
    ok = len(errors) >= 50 and worst < 1e-3
    record_criterion(2, "analytic vs central-difference gradients", ok,
                     f"{len(errors)} cases, max rel error {worst:.2e}")
    assert ok


def _brute(pred, target):
    tp = fp = fn = tn = 0
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    if tp + fp + fn == 0:
        return (tp, fp, fn, tn), 1.0, 1.0
    return (tp, fp, fn, tn), 2 * tp / (2 * tp + fp + fn), 5 * tp / (5 * tp + 4 * fn + fp)


def test_criterion_03_metric_oracle():
    g = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        pred = g.random((8, 8)) < g.random()
        target = g.random((8, 8)) < g.random()
        counts, d, f = _brute(pred, target)
        c = confusion(pred, target)
        if (c.tp, c.fp, c.fn, c.tn) != counts or dice(pred, target) != d or f2(pred, target) != f:
            mismatches += 1
    table = {(True, 0.9): Outcome.TP, (False, 0.9): Outcome.TN,
             (True, 0.1): Outcome.FN, (False, 0.1): Outcome.FP}
    table_ok = all(detection_classify(h, dv, 0.5) is o for (h, dv), o in table.items())
    ok = mismatches == 0 and table_ok
    record_criterion(3, "metrics match brute-force pixel oracle", ok,
                     f"1000 pairs, {mismatches} mismatches, truth table {'ok' if table_ok else 'wrong'}")
    assert ok


def test_criterion_04_loss_spot_values():
    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    zero_logit = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    ln2_err = abs(weighted_bce(zero_logit, one, 1.0).item() - math.log(2))
    ln2x3_err = abs(weighted_bce(zero_logit, one, 3.0).item() - 3 * math.log(2))
    g = np.random.default_rng(4)
    a0 = torch.from_numpy(g.random((1, 1, 8, 8)))
    identical = edge_loss(a0, a0.clone()).item()
    asym = 0.0
    for _ in range(100):
        a = torch.from_numpy((g.random((1, 1, 8, 8)) > 0.5).astype(float))
        b = torch.from_numpy((g.random((1, 1, 8, 8)) > 0.5).astype(float))
        asym = max(asym, abs(edge_loss(a, b).item() - edge_loss(b, a).item()))
    ok = ln2_err < 1e-6 and ln2x3_err < 1e-6 and identical == 0.0 and asym < 1e-9
    record_criterion(4, "loss spot values", ok,
                     f"|bce-ln2|={ln2_err:.1e}, |bce-3ln2|={ln2x3_err:.1e}, edge(a,a)={identical}, "
                     f"max asymmetry {asym:.1e}")
    assert ok


def test_criterion_05_attention_invariants():
    g = np.random.default_rng(5)
    row_err, bound_violation = 0.0, 0.0
    for _ in range(200):
        tq, tk, d, dv = (int(v) for v in g.integers(1, 9, size=4))
        q = torch.from_numpy(g.normal(size=(tq, d)) * 3)
        k = torch.from_numpy(g.normal(size=(tk, d)) * 3)
        v = torch.from_numpy(g.normal(size=(tk, dv)))
        out, w = scaled_dot_attention(q, k, v, return_weights=True)
        row_err = max(row_err, float((w.sum(-1) - 1).abs().max()))
        lo, hi = v.min(0).values, v.max(0).values
        bound_violation = max(bound_violation, float((lo - out).clamp(min=0).max()),
                              float((out - hi).clamp(min=0).max()))
    perm_err = 0.0
    for seed in range(10):
        torch.manual_seed(seed)
        block = CrossModalTransformerBlock(16, heads=4, dropout_p=0.1).eval()
        primary, context = torch.randn(2, 5, 16), torch.randn(2, 7, 16)
        perm = torch.randperm(7)
        with torch.no_grad():
            perm_err = max(perm_err, float((block(primary, context) - block(primary, context[:, perm])).abs().max()))
    ok = row_err <= 1e-6 and bound_violation <= 1e-12 and perm_err <= 1e-6
    record_criterion(5, "attention invariants", ok,
                     f"row-sum err {row_err:.1e}, V-bound violation {bound_violation:.1e}, "
                     f"context-permutation err {perm_err:.1e}")
    assert ok


@pytest.fixture(scope="module")
def overfit_batch_64(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    synth_generate(root, 8, 64, seed=11)
    pairs = load_dataset(root)
    mcfg = ModelConfig(Architecture.UNET, base_width=16, image_size=64)
    prep = prepare_fold(pairs, FoldSplit(0, [p.id for p in pairs], []), mcfg, TrainConfig(augment=False))
    return _to_batch(prep.train)


@pytest.mark.slow
@pytest.mark.parametrize("arch", ARCHITECTURES, ids=lambda a: a.value)
def test_criterion_06_overfit(arch, overfit_batch_64):
    model = build_model(ModelConfig(arch, base_width=16, image_size=64))
    t0 = time.perf_counter()
    steps, history = overfit_batch(model, overfit_batch_64, steps=300, lr=0.03, target_dice=0.95)
    elapsed = time.perf_counter() - t0
    ok = steps is not None and elapsed < 600
    last = history[-1][1]
    record_criterion(6, f"overfit one batch of 8 ({arch.value}, 64x64, width 16)", ok,
                     f"dice {last:.4f} after {history[-1][0]} steps, {elapsed:.0f}s")
    assert ok


def test_criterion_07_schedule():
    cfg = TrainConfig()
    expected = {**{e: 0.03 for e in range(0, 62)}, **{e: 0.01 for e in range(62, 187)},
                **{e: 0.03 / 9 for e in range(187, 250)}}
    default_ok = all(math.isclose(lr_at(e, cfg), lr, rel_tol=1e-12) for e, lr in expected.items())
    g = np.random.default_rng(7)
    property_ok = True
    for _ in range(300):
        epochs = int(g.integers(4, 500))
        fracs = tuple(sorted(set(np.round(g.uniform(0.01, 0.99, size=int(g.integers(1, 5))), 4).tolist())))
        factor = float(g.uniform(0.05, 0.95))
        c = TrainConfig(epochs=epochs, lr_milestones=fracs, lr_factor=factor)
        marks = [math.floor(f * epochs) for f in fracs]
        for e in range(epochs):
            want = 0.03 * factor ** sum(e >= m for m in marks)
            if not math.isclose(lr_at(e, c), want, rel_tol=1e-12):
                property_ok = False
    ok = default_ok and property_ok
    record_criterion(7, "multi-step learning-rate schedule", ok,
                     f"default 0.03/0.01/0.00333 {'ok' if default_ok else 'wrong'}, 300 random configs "
                     f"{'ok' if property_ok else 'wrong'}")
    assert ok


@pytest.mark.slow
def test_criterion_08_pipeline_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--n", "40", "--size", "64", "--seed", "7", "--out", str(data)]) == 0
    overrides = ["--override", "epochs=2", "--override", "base_width=8", "--override", "image_size=64",
                 "--override", "seed=0"]
    summaries = []
    for run in ("a", "b"):
        assert cli_main(["crossval", "--data", str(data), "--output_dir", str(tmp_path / run), *overrides]) == 0
        summaries.append(json.loads((tmp_path / run / "reports" / "crossval_summary.json").read_text()))
    identical = summaries[0] == summaries[1]

    ids = [p.id for p in load_dataset(data)]
    folds = make_folds(ids, 5, 0)
    validated = Counter(i for f in folds for i in f.val_ids)
    partition_ok = (all(not set(f.train_ids) & set(f.val_ids) for f in folds)
                    and set(validated) == set(ids) and set(validated.values()) == {1})
    recorded = [json.loads((tmp_path / "a" / "runs" / f"fold_{i}" / "run.json").read_text())["val_ids"]
                for i in range(5)]
    partition_ok = partition_ok and recorded == [f.val_ids for f in folds]
    ok = identical and partition_ok
    record_criterion(8, "synth + crossval twice gives identical summaries", ok,
                     f"summaries identical={identical}, fold partition ok={partition_ok}")
    assert ok


def test_criterion_09_augmentation_contracts():
    g = np.random.default_rng(9)
    failures = 0
    for i in range(200):
        h = int(g.integers(2, 12)) * 2
        jet = g.random((3, h, h)).astype(np.float32)
        rgb = g.random((3, h, h)).astype(np.float32)
        mask = (g.random((1, h, h)) > 0.6).astype(np.uint8)
        v = augment(jet, rgb, mask, np.random.default_rng(i))
        checks = [
            np.array_equal(v[0]["mask"], vflip(mask)),
            np.array_equal(v[1]["mask"], hflip(mask)),
            np.array_equal(v[2]["mask"], rot90(mask, v[2]["k"])),
            np.array_equal(v[2]["jet"], rot90(jet, v[2]["k"])),
            np.array_equal(v[3]["mask"], mask),
            Counter(v[2]["mask"].ravel().tolist()) == Counter(mask.ravel().tolist()),
        ]
        failures += not all(checks)
    ok = failures == 0
    record_criterion(9, "augmentation mask contracts", ok, f"200 random triples, {failures} failures")
    assert ok


@pytest.mark.slow
def test_criterion_10_multimodal_learning_signal(tmp_path):
    synth_generate(tmp_path, 40, 64, seed=7)
    pairs = load_dataset(tmp_path)
    fold = make_folds([p.id for p in pairs], 5, 0)[0]
    tcfg = TrainConfig(epochs=30, augment=False, seed=0)
    results = {}
    for arch in (Architecture.UNET, Architecture.DXM_TRANSFUSE):
        mcfg = ModelConfig(arch, base_width=16, image_size=64, modality="jet", seed=0)
        record = train_fold(mcfg, tcfg, fold, pairs)
        results[arch] = record.best_report.summary["dice"]
    gap = results[Architecture.DXM_TRANSFUSE] - results[Architecture.UNET]
    ok = gap >= 0.05
    record_criterion(10, "DXM_TRANSFUSE beats jet-only UNET by >= 0.05 validation Dice", ok,
                     f"DXM {results[Architecture.DXM_TRANSFUSE]:.4f} vs UNET {results[Architecture.UNET]:.4f}, "
                     f"gap {gap:+.4f}")
    assert ok

"""Acceptance suite: every criterion asserted at its stated tolerance,
one printed pass/fail line per criterion.

Criteria 5-7 train real models and are marked slow; the whole suite is
still expected to run (and pass) by default.
"""

import csv
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cinetrack.cli import main as cli_main
from cinetrack.core import LandmarkPair, Motion2, Point2
from cinetrack.experiments import (
    ExperimentSpec,
    default_ablation_arms,
    rate_sweep_arms,
    run_ablation,
    run_rate_sweep,
    run_sparsity_analysis,
)
from cinetrack.inference import predict_sequence
from cinetrack.losses import (
    FocalParams,
    compose_backward,
    compose_forward,
    cycle_loss,
    focal_loss,
    render_target_maps,
)
from cinetrack.metrics import (
    STAT_COLUMNS,
    average_lde_px,
    evaluate_dataset,
    summary_flat,
    teichholz_ef,
    write_report,
)
from cinetrack.network import build_model, cross_correlate
from cinetrack.phantom import PhantomConfig, generate_sequence
from cinetrack.trainer import TrainConfig, Trainer, train

from test_losses import naive_focal
from test_metrics import perfect_prediction
from test_network import brute_force_affinity
from test_trainer import group_bytes


def report(criterion: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {criterion:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------- 1


def test_criterion_01_focal_loss_oracle_and_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    fp = FocalParams(radius=3.0)

    worst_val = 0.0
    for _ in range(10):
        pred = rng.uniform(0.02, 0.98, size=(2, 8, 8))
        targets = LandmarkPair(
            Point2(float(rng.integers(0, 8)), float(rng.integers(0, 8))),
            Point2(float(rng.integers(0, 8)), float(rng.integers(0, 8))),
        )
        y = render_target_maps(targets, (8, 8), fp.radius)
        delta = abs(focal_loss(pred, targets, fp) - naive_focal(pred, y, fp.alpha, fp.beta))
        worst_val = max(worst_val, delta)

    worst_rel = 0.0
    h = 1e-4
    for _ in range(20):
        pred = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 8, 8)), dtype=torch.float64, requires_grad=True)
        targets = LandmarkPair(
            Point2(float(rng.integers(0, 8)), float(rng.integers(0, 8))),
            Point2(float(rng.integers(0, 8)), float(rng.integers(0, 8))),
        )
        loss = focal_loss(pred, targets, fp)
        (grad,) = torch.autograd.grad(loss, pred)
        for _ in range(6):
            c, i, j = rng.integers(0, 2), rng.integers(0, 8), rng.integers(0, 8)
            plus = pred.detach().numpy().copy()
            minus = plus.copy()
            plus[c, i, j] += h
            minus[c, i, j] -= h
            fd = (focal_loss(plus, targets, fp) - focal_loss(minus, targets, fp)) / (2 * h)
            denom = max(abs(fd), 1e-8)
            worst_rel = max(worst_rel, abs(float(grad[c, i, j]) - fd) / denom)

    elapsed = time.perf_counter() - t0
    ok = worst_val < 1e-9 and worst_rel < 1e-4 and elapsed < 60
    report(1, ok, f"focal |delta|={worst_val:.2e} (<1e-9), grad rel err={worst_rel:.2e} (<1e-4), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------- 2


def test_criterion_02_cross_correlation_oracle():
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(10):
        c = int(rng.integers(1, 5)) * 2
        template = rng.normal(size=(c, 25, 25))
        search = rng.normal(size=(c, 29, 29))
        aff = cross_correlate(torch.tensor(template), torch.tensor(search)).numpy()
        worst = max(worst, np.abs(aff - brute_force_affinity(template, search)).max())
    report(2, worst < 1e-5, f"affinity vs brute force |delta|={worst:.2e} (<1e-5) on 10 patch pairs")


# ---------------------------------------------------------------- 3


def test_criterion_03_composition_algebra():
    rng = np.random.default_rng(103)
    tol = 1e-12
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        start = LandmarkPair.from_array(rng.uniform(0, 60, (2, 2)))
        motions = [Motion2.from_array(rng.normal(0, 2, (2, 2))) for _ in range(n)]
        fwd = compose_forward(start, motions)
        telescoped = fwd.positions[-1].as_array() - fwd.positions[0].as_array()
        total = np.sum([m.as_array() for m in motions], axis=0)
        worst = max(worst, np.abs(telescoped - total).max())
        back = compose_backward(fwd.end, [m.negated() for m in reversed(motions)])
        worst = max(worst, np.abs(back.end.as_array() - start.as_array()).max())

    truth_start = LandmarkPair(Point2(10.0, 12.0), Point2(30.0, 28.0))
    round_trip_end = LandmarkPair(Point2(10.5, 11.0), Point2(31.0, 28.25))
    manual = sum(
        (a - b) ** 2
        for a, b in zip(
            [10.5, 11.0, 31.0, 28.25],
            [10.0, 12.0, 30.0, 28.0],
        )
    )
    cyc = cycle_loss(round_trip_end, truth_start)
    ok = worst < tol and abs(cyc - manual) < 1e-12
    report(3, ok, f"telescoping/inverse worst dev={worst:.2e} (<1e-12) on 1000 lists; cycle == manual residual")


# ---------------------------------------------------------------- 4


def test_criterion_04_trainer_partition():
    cfg = PhantomConfig(seed=104, k_range=(5, 7))
    seqs = [generate_sequence(cfg, i) for i in range(2)]
    model = build_model(104)
    tr = Trainer(model, TrainConfig(seed=104))

    det_before, trk_before = group_bytes(model.detector), group_bytes(model.tracker)
    tr.step_B(seqs)
    heads_frozen = group_bytes(model.detector) == det_before and group_bytes(model.tracker) == trk_before

    enc_before = group_bytes(model.encoder)
    results = tr.step_C(seqs)
    encoder_frozen = group_bytes(model.encoder) == enc_before
    ok = heads_frozen and encoder_frozen and len(results) == 3
    report(4, ok, f"step_B froze heads={heads_frozen}, step_C froze encoder={encoder_frozen}, inner updates={len(results)} (==3)")


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_05_overfit_eight_sequences():
    budget_s = 15 * 60
    t0 = time.perf_counter()
    cfg = PhantomConfig(seed=5)
    seqs = [generate_sequence(cfg, i) for i in range(8)]
    model = build_model(5)

    def train_lde():
        ed, es = [], []
        for s in seqs:
            p = predict_sequence(s, model)
            ed.append(average_lde_px(p.pair_at(1), s.annotations[1]))
            es.append(average_lde_px(p.pair_at(s.k), s.annotations[s.k]))
        return float(np.mean(ed)), float(np.mean(es))

    def early_stop(trainer, epoch):
        if epoch % 10:
            return False
        ed, es = train_lde()
        return ed <= 2.5 and es <= 2.5

    state = train(seqs, TrainConfig(seed=5, epochs=200, batch_size=4), model=model, on_epoch_end=early_stop)
    ed, es = train_lde()
    elapsed = time.perf_counter() - t0
    ok = ed <= 3.0 and es <= 3.0 and elapsed < budget_s and state.epoch <= 200
    report(5, ok, f"train mean LDE ED={ed:.2f}px ES={es:.2f}px (<=3) after {state.epoch} epochs, {elapsed:.0f}s (<{budget_s}s)")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_06_generalization_and_no_accumulation():
    cfg = PhantomConfig(seed=6)
    train_seqs = [generate_sequence(cfg, i) for i in range(100)]
    test_seqs = {f"{i:04d}": generate_sequence(cfg, i) for i in range(100, 120)}

    model = build_model(6)
    train(train_seqs, TrainConfig(seed=6, epochs=30, batch_size=4), model=model)

    preds = {i: predict_sequence(s, model) for i, s in test_seqs.items()}
    ed = [average_lde_px(p.pair_at(1), test_seqs[i].annotations[1]) for i, p in preds.items()]
    es = [average_lde_px(p.pair_at(test_seqs[i].k), test_seqs[i].annotations[test_seqs[i].k]) for i, p in preds.items()]
    bundle = evaluate_dataset(preds, test_seqs)
    acc = bundle["per_frame"]["accumulation"]
    med_ed, med_es = float(np.median(ed)), float(np.median(es))
    ok = med_ed <= 5.0 and med_es <= 5.0 and acc["ratio"] <= 2.0
    report(
        6,
        ok,
        f"test median LDE ED={med_ed:.2f}px ES={med_es:.2f}px (<=5); "
        f"final-frame mean {acc['final_mean_px']:.2f}px <= 2x mid median {acc['mid_median_px']:.2f}px "
        f"(ratio {acc['ratio']:.2f})",
    )


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_07_ablation_trend(tmp_path):
    t0 = time.perf_counter()
    spec = ExperimentSpec(
        name="ablation",
        seeds=[0, 1, 2, 3, 4],
        outputs=str(tmp_path),
        n_train=16,
        n_test=8,
        train={"epochs": 8},
        grid=default_ablation_arms(),
    )
    summary = run_ablation(spec)
    elapsed = time.perf_counter() - t0
    holds = summary["ordering_holds"]
    ok = holds >= 3 and elapsed < 2 * 3600
    report(7, ok, f"ordering plain > rec >= rec_adv holds in {holds}/5 seeds (>=3), {elapsed:.0f}s (<2h)")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_08_rate_sweep_harness(tmp_path):
    spec = ExperimentSpec(
        name="rate_sweep",
        seeds=[0],
        outputs=str(tmp_path),
        n_train=6,
        n_test=3,
        phantom={"k_range": [5, 12]},
        train={"epochs": 2},
        grid=rate_sweep_arms(),
    )
    summary = run_rate_sweep(spec)
    table = Path(tmp_path) / "rate_sweep" / "rate_sweep.csv"
    with open(table) as f:
        rows = list(csv.DictReader(f))
    rates = sorted({r["rec_rate"] for r in rows})
    ok = table.exists() and rates == ["2", "3", "4", "5"] and set(summary["mean_track_lde_cm_by_rate"]) == {"2", "3", "4", "5"}
    report(8, ok, f"rate sweep table emitted for rates {rates} (paper's reference optimum: 3; no value asserted)")


# ---------------------------------------------------------------- 9


def test_criterion_09_sparsity_analysis_zero_motion():
    cfg = PhantomConfig(seed=109, contraction_fraction=0.0, k_range=(5, 20))
    seqs = [(f"{i:04d}", generate_sequence(cfg, i)) for i in range(16)]
    model = build_model(109)
    with torch.no_grad():
        model.tracker.fc3.weight.zero_()
        model.tracker.fc3.bias.zero_()
    table = run_sparsity_analysis(model, seqs)
    bins_ok = set(table) == {"5-8", "8-12", "12-16", "16-20"}
    zeros_ok = all(
        (row["n"] == 0) or (row["avg_lde_cm_per_sequence"] == 0.0 and row["avg_lde_cm_per_frame"] == 0.0)
        for row in table.values()
    )
    populated = sum(1 for row in table.values() if row["n"] > 0)
    ok = bins_ok and zeros_ok and populated >= 2
    report(9, ok, f"bins {sorted(table)} with zero-motion phantom errors exactly 0 in all {populated} populated bins")


# ---------------------------------------------------------------- 10


def test_criterion_10_ef_math():
    r = teichholz_ef(5.0, 3.0)
    expected = 100.0 * (35.0 / 7.4 - 21.0 / 5.4) / (35.0 / 7.4)
    dev = abs(r.ef - expected)
    equal_ok = teichholz_ef(4.2, 4.2).ef == 0.0
    empty_ok = teichholz_ef(4.2, 0.0).ef == 100.0
    ok = dev < 1e-9 and equal_ok and empty_ok and abs(expected - 17.777) < 5e-3
    report(10, ok, f"EF(5,3)={r.ef:.6f}% (hand value {expected:.6f}, |dev|={dev:.1e}<1e-9); EF(d,d)=0; EF(d,0)=100")


# ---------------------------------------------------------------- 11


def test_criterion_11_reporting(tmp_path):
    cfg = PhantomConfig(seed=111)
    truths = {f"{i:04d}": generate_sequence(cfg, i) for i in range(5)}
    preds = {i: perfect_prediction(s) for i, s in truths.items()}
    bundle = evaluate_dataset(preds, truths)
    write_report(bundle, tmp_path)

    with open(tmp_path / "ed_table.csv") as f:
        ed_header = next(csv.reader(f))
    with open(tmp_path / "es_table.csv") as f:
        es_header = next(csv.reader(f))
    columns_ok = (
        ed_header[2:] == ["mean", "std", "min", "p25", "median", "p75", "p90", "max"]
        and es_header == ed_header
    )
    with open(tmp_path / "ef_table.csv") as f:
        ef_header = next(csv.reader(f))
    ef_ok = ef_header == ["quantity", "mean", "std", "min", "median", "p90"]
    flat = summary_flat(bundle)
    zeros_ok = all(
        flat[k] == 0.0
        for k in flat
        if k.startswith(("ed.", "es.")) or k == "ef.error.mean" or k.startswith("failure.e")
    )
    files_ok = all(
        (tmp_path / name).exists()
        for name in ("ef_scatter.csv", "failure.csv", "ed_table.csv", "es_table.csv", "ef_table.csv")
    )
    ok = columns_ok and ef_ok and zeros_ok and files_ok
    report(11, ok, f"tables carry exactly {list(STAT_COLUMNS)}; EF table mean/std/min/median/p90; perfect preds -> all zeros")


# ---------------------------------------------------------------- 12


@pytest.mark.slow
def test_criterion_12_end_to_end_determinism(tmp_path):
    def run_chain(root: Path) -> dict[str, str]:
        data = root / "data"
        run = root / "run"
        preds = root / "preds"
        rep = root / "report"
        assert cli_main([
            "generate", "--out", str(data), "--n-train", "4", "--n-test", "2",
            "--seed", "12", "--k-min", "4", "--k-max", "7",
        ]) == 0
        assert cli_main([
            "train", "--data", str(data), "--out", str(run),
            "--epochs", "2", "--seed", "12", "--batch-size", "2",
        ]) == 0
        assert cli_main([
            "predict", "--data", str(data), "--split", "test",
            "--checkpoint", str(run / "checkpoints" / "epoch_0002.ckpt"), "--out", str(preds),
        ]) == 0
        assert cli_main([
            "eval", "--data", str(data), "--split", "test",
            "--pred", str(preds), "--out", str(rep),
        ]) == 0
        return {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(rep.glob("*.csv"))
        }

    hashes_a = run_chain(tmp_path / "a")
    hashes_b = run_chain(tmp_path / "b")
    ok = hashes_a == hashes_b and len(hashes_a) >= 4
    report(12, ok, f"two generate->train->eval chains agree on {len(hashes_a)} report CSV hashes")

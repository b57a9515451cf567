"""Scripted desk-scale studies: ablation of the reciprocal/adversarial
parts, one-frame training, annotation-sparsity analysis, and the
reciprocal-rate sweep.

Every experiment is reproducible from (spec, seeds): arms within one
seed share the same generated data bytes, and outputs are plain CSV
plus a JSON summary. Findings are reported as orderings and trends
across seeds, never as absolute error targets.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CineSequence
from .inference import predict_sequence, track_from
from .metrics import average_lde_px, evaluate_dataset
from .network import LandmarkNet, build_model, save_checkpoint
from .phantom import PhantomConfig, generate_dataset, load_split
from .trainer import TrainConfig, train

SPARSITY_BINS = ((5, 8), (8, 12), (12, 16), (16, 20))
RATE_GRID = (2, 3, 4, 5)


@dataclass
class ExperimentSpec:
    """Declarative description of one experiment.

    ``phantom`` and ``train`` override PhantomConfig / TrainConfig
    fields; ``grid`` lists per-arm TrainConfig overrides, each with a
    "name" key. See the README for the JSON schema.
    """

    name: str
    seeds: list[int]
    outputs: str
    n_train: int = 24
    n_test: int = 8
    phantom: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("an experiment needs at least one seed")
        if not self.grid:
            raise ValueError("an experiment grid must not be empty")


def default_ablation_arms() -> list[dict]:
    return [
        {"name": "plain", "enable_rec_loss": False, "enable_adversarial": False},
        {"name": "rec", "enable_rec_loss": True, "enable_adversarial": False},
        {"name": "rec_adv", "enable_rec_loss": True, "enable_adversarial": True},
    ]


def rate_sweep_arms(rates=RATE_GRID) -> list[dict]:
    return [{"name": f"rate{r}", "rec_rate": int(r)} for r in rates]


def load_spec(path) -> ExperimentSpec:
    with open(path) as f:
        raw = json.load(f)
    return ExperimentSpec(**raw)


def save_spec(spec: ExperimentSpec, path):
    with open(path, "w") as f:
        json.dump(asdict(spec), f, indent=1)


def _seed_data_root(spec: ExperimentSpec, seed: int) -> Path:
    return Path(spec.outputs) / spec.name / f"seed_{seed}" / "data"


def ensure_seed_data(spec: ExperimentSpec, seed: int) -> Path:
    """Generate the shared dataset of one seed if absent; arms reuse its bytes."""
    root = _seed_data_root(spec, seed)
    if not (root / "manifest.json").exists():
        cfg = PhantomConfig(**{**spec.phantom, "seed": seed})
        generate_dataset(cfg, spec.n_train, spec.n_test, root)
    return root


def _track_only_es_scores(model: LandmarkNet, test):
    """Mean end-frame deviation of tracking-only rollouts from ground truth."""
    per_seq = []
    for _, seq in test:
        positions = track_from(seq, model, seq.annotations[1])
        lde_cm = average_lde_px(positions[-1], seq.annotations[seq.k]) * seq.pixel_spacing
        per_seq.append((lde_cm, lde_cm / (seq.k - 2)))
    return (
        float(np.mean([v for v, _ in per_seq])),
        float(np.mean([v for _, v in per_seq])),
    )


def _scores_from_bundle(bundle: dict) -> dict:
    scores = {}
    for tag in ("ed", "es"):
        recs = bundle["records"][tag]
        avg_px = [(r.lde_il_px + r.lde_al_px) / 2.0 for r in recs]
        avg_cm = [r.average_lde_cm for r in recs]
        scores[f"{tag}_mean_lde_px"] = float(np.mean(avg_px))
        scores[f"{tag}_median_lde_px"] = float(np.median(avg_px))
        scores[f"{tag}_mean_lde_cm"] = float(np.mean(avg_cm))
        scores[f"{tag}_median_lde_cm"] = float(np.median(avg_cm))
        scores[f"{tag}_mean_le_cm"] = float(np.mean([r.le_cm for r in recs]))
        scores[f"{tag}_median_le_cm"] = float(np.median([r.le_cm for r in recs]))
    pooled = [
        (r.lde_il_px + r.lde_al_px) / 2.0
        for tag in ("ed", "es")
        for r in bundle["records"][tag]
    ]
    scores["pooled_median_lde_px"] = float(np.median(pooled))
    return scores


def run_arm(spec_dict: dict, arm: dict, seed: int) -> dict:
    """Train one (arm, seed) job and evaluate it on the shared test split."""
    import torch

    spec = ExperimentSpec(**spec_dict)
    data_root = ensure_seed_data(spec, seed)
    overrides = {k: v for k, v in arm.items() if k != "name"}
    cfg = TrainConfig(**{**spec.train, **overrides, "seed": seed})

    train_seqs = [s for _, s in load_split(data_root, "train")]
    test = load_split(data_root, "test")

    model = build_model(seed)
    state = train(train_seqs, cfg, model=model)

    arm_dir = Path(spec.outputs) / spec.name / f"seed_{seed}" / arm["name"]
    arm_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, arm_dir / "model.ckpt", epoch=state.epoch)

    preds = {seq_id: predict_sequence(seq, model) for seq_id, seq in test}
    bundle = evaluate_dataset(preds, dict(test))
    scores = _scores_from_bundle(bundle)
    track_mean_cm, track_per_frame_cm = _track_only_es_scores(model, test)
    scores["track_es_mean_lde_cm"] = track_mean_cm
    scores["track_es_mean_lde_cm_per_frame"] = track_per_frame_cm

    row = {"arm": arm["name"], "seed": seed, **scores}
    with open(arm_dir / "scores.json", "w") as f:
        json.dump(row, f, indent=1, sort_keys=True)
    return row


def _safe_run_arm(spec_dict: dict, arm: dict, seed: int) -> dict:
    """One job; a failing arm is marked failed so the others continue."""
    try:
        return run_arm(spec_dict, arm, seed)
    except Exception as exc:  # noqa: BLE001 - jobs are isolated by design
        return {"arm": arm["name"], "seed": seed, "failed": True,
                "error": f"{type(exc).__name__}: {exc}"}


def _worker(job):
    import torch

    torch.set_num_threads(1)
    return _safe_run_arm(*job)


def _execute(jobs: list[tuple], n_jobs: int = 1) -> list[dict]:
    if n_jobs <= 1:
        return [_safe_run_arm(*job) for job in jobs]
    ctx = get_context("spawn")
    with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
        return list(pool.map(_worker, jobs))


def _write_rows_csv(path: Path, rows: list[dict], arm_meta: Optional[dict[str, dict]] = None):
    if not rows:
        raise ValueError("no rows to write")
    meta_keys = sorted({k for m in (arm_meta or {}).values() for k in m})
    score_keys = sorted({k for r in rows for k in r if k not in ("arm", "seed", "failed", "error")})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "seed", "status"] + meta_keys + score_keys)
        for row in rows:
            meta = (arm_meta or {}).get(row["arm"], {})
            status = "failed" if row.get("failed") else "ok"
            writer.writerow(
                [row["arm"], row["seed"], status]
                + [meta.get(k, "") for k in meta_keys]
                + ["" if k not in row else f"{row[k]:.9g}" for k in score_keys]
            )


def _sorted_rows(rows: list[dict], arm_order: list[str]) -> list[dict]:
    rank = {name: i for i, name in enumerate(arm_order)}
    return sorted(rows, key=lambda r: (rank[r["arm"]], r["seed"]))


def run_ablation(spec: ExperimentSpec, jobs: int = 1) -> dict:
    """Train the three arms per seed on paired data and tabulate errors.

    The summary counts, per seed, whether the pooled median deviation
    orders as plain > rec >= rec_adv; the expectation is a trend across
    seeds, not a per-seed guarantee.
    """
    arms = spec.grid
    spec_dict = asdict(spec)
    rows = _execute([(spec_dict, arm, seed) for arm in arms for seed in spec.seeds], jobs)
    rows = _sorted_rows(rows, [a["name"] for a in arms])

    out_dir = Path(spec.outputs) / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)
    arm_meta = {
        a["name"]: {
            "adt": "yes" if a.get("enable_adversarial", True) else "no",
            "recl": "yes" if a.get("enable_rec_loss", True) else "no",
        }
        for a in arms
    }
    _write_rows_csv(out_dir / "ablation.csv", rows, arm_meta)

    by_seed: dict[int, dict[str, float]] = {}
    for row in rows:
        # a failed arm could not localize at all; it orders as worst
        score = float("inf") if row.get("failed") else row["pooled_median_lde_px"]
        by_seed.setdefault(row["seed"], {})[row["arm"]] = score
    ordering = {}
    names = [a["name"] for a in arms]
    if len(names) == 3:
        for seed, vals in by_seed.items():
            ordering[str(seed)] = bool(
                vals[names[0]] > vals[names[1]] >= vals[names[2]]
            )
    summary = {
        "rows": rows,
        "ordering_by_seed": ordering,
        "ordering_holds": sum(ordering.values()),
        "n_seeds": len(spec.seeds),
        "failures": [f"{r['arm']}/seed{r['seed']}" for r in rows if r.get("failed")],
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def run_rate_sweep(spec: ExperimentSpec, jobs: int = 1) -> dict:
    """Full training per reciprocal rate per seed; tabulates per-sequence deviation."""
    arms = spec.grid
    spec_dict = asdict(spec)
    rows = _execute([(spec_dict, arm, seed) for arm in arms for seed in spec.seeds], jobs)
    rows = _sorted_rows(rows, [a["name"] for a in arms])

    out_dir = Path(spec.outputs) / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)
    arm_meta = {a["name"]: {"rec_rate": str(a.get("rec_rate", ""))} for a in arms}
    _write_rows_csv(out_dir / "rate_sweep.csv", rows, arm_meta)

    per_rate = {}
    for arm in arms:
        vals = [r["track_es_mean_lde_cm"] for r in rows if r["arm"] == arm["name"] and not r.get("failed")]
        per_rate[str(arm.get("rec_rate"))] = float(np.mean(vals)) if vals else None
    summary = {
        "rows": rows,
        "mean_track_lde_cm_by_rate": per_rate,
        "failures": [f"{r['arm']}/seed{r['seed']}" for r in rows if r.get("failed")],
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def run_one_frame(spec: ExperimentSpec, jobs: int = 1) -> dict:
    """Train with frame-1 supervision only and tabulate both keyframes.

    The deviation of the unsupervised end frame is expected to sit at or
    above the supervised first frame's (trend across seeds).
    """
    arms = spec.grid
    spec_dict = asdict(spec)
    rows = _execute([(spec_dict, arm, seed) for arm in arms for seed in spec.seeds], jobs)
    rows = _sorted_rows(rows, [a["name"] for a in arms])

    out_dir = Path(spec.outputs) / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "one_frame.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "seed", "frame", "criterion_cm", "mean", "std", "min", "median"])
        for row in rows:
            if row.get("failed"):
                writer.writerow([row["arm"], row["seed"], "failed", "", "", "", "", ""])
                continue
            for tag in ("ed", "es"):
                writer.writerow(
                    [row["arm"], row["seed"], tag, "lde",
                     f"{row[f'{tag}_mean_lde_cm']:.9g}", "", "", f"{row[f'{tag}_median_lde_cm']:.9g}"]
                )
                writer.writerow(
                    [row["arm"], row["seed"], tag, "le",
                     f"{row[f'{tag}_mean_le_cm']:.9g}", "", "", f"{row[f'{tag}_median_le_cm']:.9g}"]
                )

    ok_rows = [r for r in rows if not r.get("failed")]
    es_worse = sum(
        1 for row in ok_rows if row["es_median_lde_cm"] >= row["ed_median_lde_cm"]
    )
    summary = {
        "rows": rows,
        "es_at_or_above_ed": es_worse,
        "n_rows": len(ok_rows),
        "failures": [f"{r['arm']}/seed{r['seed']}" for r in rows if r.get("failed")],
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def run_sparsity_analysis(model: LandmarkNet, labeled_seqs: list[tuple[str, CineSequence]],
                          bins=SPARSITY_BINS) -> dict:
    """Tracking-only rollouts from the ground-truth frame-1 pair, binned by
    the number of in-between frames.

    Bins are half open except the last. Reports the mean end-frame
    deviation per sequence and that value divided by the in-between
    frame count; empty bins are marked n/a (None).
    """
    per_bin: dict[str, list[tuple[float, float]]] = {f"{lo}-{hi}": [] for lo, hi in bins}
    for _, seq in labeled_seqs:
        n_between = seq.k - 2
        label = None
        for i, (lo, hi) in enumerate(bins):
            last = i == len(bins) - 1
            if lo <= n_between < hi or (last and n_between == hi):
                label = f"{lo}-{hi}"
                break
        if label is None:
            continue
        positions = track_from(seq, model, seq.annotations[1])
        lde_cm = average_lde_px(positions[-1], seq.annotations[seq.k]) * seq.pixel_spacing
        per_bin[label].append((lde_cm, lde_cm / n_between))

    table = {}
    for label, values in per_bin.items():
        if not values:
            table[label] = {"n": 0, "avg_lde_cm_per_sequence": None, "avg_lde_cm_per_frame": None}
        else:
            table[label] = {
                "n": len(values),
                "avg_lde_cm_per_sequence": float(np.mean([v for v, _ in values])),
                "avg_lde_cm_per_frame": float(np.mean([v for _, v in values])),
            }
    return table


def write_sparsity_csv(table: dict, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin", "n", "avg_lde_cm_per_sequence", "avg_lde_cm_per_frame"])
        for label, row in table.items():
            writer.writerow([
                label,
                row["n"],
                "n/a" if row["avg_lde_cm_per_sequence"] is None else f"{row['avg_lde_cm_per_sequence']:.9g}",
                "n/a" if row["avg_lde_cm_per_frame"] is None else f"{row['avg_lde_cm_per_frame']:.9g}",
            ])

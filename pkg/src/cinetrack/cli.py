"""Command-line entry point: generate, train, predict, eval, experiment, report.

Runs are laid out under a run directory with data/checkpoints/
predictions/reports/logs subdirectories; the config snapshot is written
before any training step and never overwritten. Every command is
idempotent given identical inputs and seed; the run root can be
relocated with the CINETRACK_RUN_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .core import CinetrackError
from .experiments import (
    ExperimentSpec,
    default_ablation_arms,
    load_spec,
    rate_sweep_arms,
    run_ablation,
    run_one_frame,
    run_rate_sweep,
    run_sparsity_analysis,
    write_sparsity_csv,
)
from .inference import export_prediction, load_prediction, predict_sequence
from .metrics import evaluate_dataset, render_overlay, summary_flat, write_report
from .network import build_model, config_hash, load_model
from .phantom import PhantomConfig, generate_dataset, load_split
from .trainer import TrainConfig, train

RUN_SUBDIRS = ("data", "checkpoints", "predictions", "reports", "logs")
RUN_ROOT_ENV = "CINETRACK_RUN_ROOT"


@dataclass
class RunDirectory:
    """A run's directory tree plus its write-once config snapshot."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def create(self) -> "RunDirectory":
        for sub in RUN_SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    def path(self, sub: str) -> Path:
        return self.root / sub

    def snapshot_config(self, config: dict):
        """Write the config snapshot once; a conflicting rewrite is an error."""
        payload = {"version": __version__, "config": config, "config_hash": config_hash(config)}
        target = self.root / "config.json"
        if target.exists():
            with open(target) as f:
                existing = json.load(f)
            if existing.get("config_hash") != payload["config_hash"]:
                raise CinetrackError(
                    f"{target} already holds a different config snapshot; refusing to overwrite"
                )
            return
        with open(target, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)


def _resolve_out(path_str: str) -> Path:
    path = Path(path_str)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _phantom_config(args) -> PhantomConfig:
    return PhantomConfig(
        image_size=(args.image_size, args.image_size),
        k_range=(args.k_min, args.k_max),
        contraction_fraction=args.contraction,
        speckle_strength=args.speckle,
        pixel_spacing=args.spacing,
        seed=args.seed,
    )


def cmd_generate(args) -> int:
    out = _resolve_out(args.out)
    cfg = _phantom_config(args)
    manifest = generate_dataset(cfg, args.n_train, args.n_test, out)
    print(f"generated {len(manifest.train)} train + {len(manifest.test)} test sequences in {out}")
    return 0


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lr_A": args.lr_a,
        "lr_B": args.lr_b,
        "lr_C": args.lr_c,
        "rec_rate": args.rec_rate,
        "step_C_repeats": args.step_c_repeats,
    }
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    if args.no_rec_loss:
        merged["enable_rec_loss"] = False
    if args.no_adversarial:
        merged["enable_adversarial"] = False
    if args.one_frame:
        merged["one_frame_mode"] = True
    if "loss_weights" in merged:
        merged["loss_weights"] = tuple(merged["loss_weights"])
    return TrainConfig(**merged)


def cmd_train(args) -> int:
    data_root = Path(args.data)
    if not (data_root / "manifest.json").exists():
        print(f"error: no dataset manifest under {data_root}", file=sys.stderr)
        return 2
    cfg = _train_config(args)
    run = RunDirectory(_resolve_out(args.out)).create()
    run.snapshot_config({"command": "train", "data": str(data_root), **cfg.as_dict()})

    train_seqs = [s for _, s in load_split(data_root, "train")]
    model = build_model(cfg.seed)
    state = train(
        train_seqs,
        cfg,
        model=model,
        checkpoint_dir=run.path("checkpoints"),
        log_path=run.path("logs") / "train.jsonl",
    )
    print(f"trained {state.epoch} epochs; checkpoints in {run.path('checkpoints')}")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for seq_id, seq in load_split(args.data, args.split):
        pred = predict_sequence(seq, model, with_cycle=args.with_cycle)
        export_prediction(pred, seq_id, out / f"{seq_id}.json")
        n += 1
    print(f"wrote {n} predictions to {out}")
    return 0


def _load_predictions(pred_dir: Path) -> dict:
    preds = {}
    for path in sorted(Path(pred_dir).glob("*.json")):
        seq_id, pred = load_prediction(path)
        preds[seq_id] = pred
    if not preds:
        raise CinetrackError(f"no prediction JSONs under {pred_dir}")
    return preds


def _check_criteria(criteria_path, flat: dict) -> int:
    with open(criteria_path) as f:
        spec = json.load(f)
    failures = 0
    for check in spec.get("checks", []):
        metric = check["metric"]
        if metric not in flat:
            print(f"criteria FAIL {metric}: metric not found")
            failures += 1
            continue
        value = flat[metric]
        ok = True
        if "max" in check and value > check["max"]:
            ok = False
        if "min" in check and value < check["min"]:
            ok = False
        bounds = ", ".join(f"{b}={check[b]}" for b in ("min", "max") if b in check)
        print(f"criteria {'PASS' if ok else 'FAIL'} {metric}={value:.6g} ({bounds})")
        failures += 0 if ok else 1
    return failures


def cmd_eval(args) -> int:
    truths = dict(load_split(args.data, args.split))
    preds = _load_predictions(Path(args.pred))
    bundle = evaluate_dataset(preds, truths, failure_threshold_cm=args.threshold_cm)
    out = _resolve_out(args.out)
    write_report(bundle, out)
    flat = summary_flat(bundle)
    print(
        f"eval over {bundle['n']} sequences: "
        f"ED median LDE {flat['ed.lde_al_cm.median']:.3g}/{flat['ed.lde_il_cm.median']:.3g} cm (AL/IL), "
        f"ES median LDE {flat['es.lde_al_cm.median']:.3g}/{flat['es.lde_il_cm.median']:.3g} cm"
    )
    if args.criteria:
        failures = _check_criteria(args.criteria, flat)
        return 1 if failures else 0
    return 0


def cmd_report(args) -> int:
    truths = dict(load_split(args.data, args.split))
    preds = _load_predictions(Path(args.pred))
    bundle = evaluate_dataset(preds, truths)
    out = _resolve_out(args.out)
    write_report(bundle, out)
    overlay_dir = out / "overlays"
    ids = sorted(truths)
    if args.max_overlays > 0:
        ids = ids[: args.max_overlays]
    for seq_id in ids:
        render_overlay(truths[seq_id], preds[seq_id], overlay_dir / f"{seq_id}.png")
    print(f"report written to {out} ({len(ids)} overlays)")
    return 0


def cmd_experiment(args) -> int:
    if args.kind == "sparsity":
        if not (args.checkpoint and args.data):
            print("error: sparsity analysis needs --checkpoint and --data", file=sys.stderr)
            return 2
        model, _ = load_model(args.checkpoint)
        seqs = load_split(args.data, args.split)
        table = run_sparsity_analysis(model, seqs)
        out = _resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sparsity_csv(table, out / "sparsity.csv")
        print(json.dumps(table, indent=1))
        return 0

    if args.spec:
        spec = load_spec(args.spec)
    else:
        grid = {
            "ablation": default_ablation_arms(),
            "rate-sweep": rate_sweep_arms(),
            "one-frame": [{"name": "one_frame", "one_frame_mode": True}],
        }[args.kind]
        spec = ExperimentSpec(
            name=args.kind.replace("-", "_"),
            seeds=list(range(args.n_seeds)),
            outputs=str(_resolve_out(args.out)),
            n_train=args.n_train,
            n_test=args.n_test,
            train={"epochs": args.epochs},
            grid=grid,
        )
    runner = {
        "ablation": run_ablation,
        "rate-sweep": run_rate_sweep,
        "one-frame": run_one_frame,
    }[args.kind]
    summary = runner(spec, jobs=args.jobs)
    keys = [k for k in summary if k != "rows"]
    print(json.dumps({k: summary[k] for k in keys}, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cinetrack",
        description="Landmark detection and tracking on sparsely annotated cine sequences",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=8)
    g.add_argument("--n-test", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--k-min", type=int, default=5)
    g.add_argument("--k-max", type=int, default=20)
    g.add_argument("--contraction", type=float, default=0.28)
    g.add_argument("--speckle", type=float, default=0.12)
    g.add_argument("--spacing", type=float, default=0.05)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the three-phase training loop")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags win")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr-a", type=float, default=None)
    t.add_argument("--lr-b", type=float, default=None)
    t.add_argument("--lr-c", type=float, default=None)
    t.add_argument("--rec-rate", type=int, default=None)
    t.add_argument("--step-c-repeats", type=int, default=None)
    t.add_argument("--no-rec-loss", action="store_true")
    t.add_argument("--no-adversarial", action="store_true")
    t.add_argument("--one-frame", action="store_true")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="detect frame 1 and track the rest")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-cycle", action="store_true")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="compute error tables from predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threshold-cm", type=float, default=2.0)
    e.add_argument("--criteria", help="JSON thresholds; exit code 0 iff all pass")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a scripted study")
    x.add_argument("--kind", required=True, choices=["ablation", "rate-sweep", "one-frame", "sparsity"])
    x.add_argument("--spec", help="experiment spec JSON (overrides the built-in default)")
    x.add_argument("--out", default="runs/experiments")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--n-seeds", type=int, default=5)
    x.add_argument("--n-train", type=int, default=24)
    x.add_argument("--n-test", type=int, default=8)
    x.add_argument("--epochs", type=int, default=10)
    x.add_argument("--checkpoint", help="trained model (sparsity analysis)")
    x.add_argument("--data", help="dataset root (sparsity analysis)")
    x.add_argument("--split", default="test", choices=["train", "test"])
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="tables, plots, and prediction overlays")
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test", choices=["train", "test"])
    r.add_argument("--pred", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--max-overlays", type=int, default=12)
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CinetrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

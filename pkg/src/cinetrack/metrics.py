"""Quantitative evaluation: landmark deviation, segment length error,
percentile tables, failure rate, and volume-based ejection fraction.

Errors are reported both in pixels and, via the dataset's pixel
spacing, in centimeters (cm = px * spacing).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import CineSequence, CinetrackError, LandmarkPair
from .inference import Prediction


class EvaluationError(CinetrackError, ValueError):
    """Predictions and ground truth cannot be matched up."""

STAT_COLUMNS = ("mean", "std", "min", "p25", "median", "p75", "p90", "max")
EF_STAT_COLUMNS = ("mean", "std", "min", "median", "p90")
DEFAULT_FAILURE_THRESHOLD_CM = 2.0


@dataclass
class ErrorRecord:
    """Per-sequence, per-keyframe landmark and length errors."""

    seq_id: str
    frame_tag: str  # "ed", "es", or a frame index
    lde_il_px: float
    lde_al_px: float
    le_px: float
    spacing: float

    @property
    def lde_il_cm(self) -> float:
        return self.lde_il_px * self.spacing

    @property
    def lde_al_cm(self) -> float:
        return self.lde_al_px * self.spacing

    @property
    def le_cm(self) -> float:
        return self.le_px * self.spacing

    @property
    def average_lde_cm(self) -> float:
        return (self.lde_il_cm + self.lde_al_cm) / 2.0


@dataclass
class EFRecord:
    """Volumes and ejection fraction derived from the two keyframe diameters."""

    edd: float
    esd: float
    ed_vol: float
    es_vol: float
    ef: float
    ef_error: Optional[float] = None


def lde_px(pred: LandmarkPair, truth: LandmarkPair) -> tuple[float, float]:
    """Per-landmark Euclidean deviation in pixels, (inferolateral, anteroseptal)."""
    return (
        pred.inferolateral.distance_to(truth.inferolateral),
        pred.anteroseptal.distance_to(truth.anteroseptal),
    )


def lde(pred: LandmarkPair, truth: LandmarkPair, spacing: float) -> tuple[float, float]:
    """Per-landmark deviation in cm, (inferolateral, anteroseptal)."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    il, al = lde_px(pred, truth)
    return il * spacing, al * spacing


def average_lde_px(pred: LandmarkPair, truth: LandmarkPair) -> float:
    """Mean of the two landmarks' deviations, used for failure analysis."""
    il, al = lde_px(pred, truth)
    return (il + al) / 2.0


def le(pred: LandmarkPair, truth: LandmarkPair, spacing: float) -> float:
    """Absolute segment-length error in cm; invariant to rigid translation."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return abs(pred.lvid_length() - truth.lvid_length()) * spacing


def stats_table(values) -> dict[str, float]:
    """Mean/std and order statistics of a non-empty error list.

    Percentiles interpolate linearly between closest ranks over the
    ascending-sorted values.
    """
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("cannot build statistics from an empty list")
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "p25": float(np.percentile(arr, 25)),
        "median": float(np.percentile(arr, 50)),
        "p75": float(np.percentile(arr, 75)),
        "p90": float(np.percentile(arr, 90)),
        "max": float(arr.max()),
    }


def failure_rate(records: list[ErrorRecord], threshold_cm: float = DEFAULT_FAILURE_THRESHOLD_CM) -> float:
    """Percent of records whose average landmark deviation exceeds the threshold."""
    if threshold_cm <= 0:
        raise ValueError("threshold must be positive")
    if not records:
        return 0.0
    failed = sum(1 for r in records if r.average_lde_cm > threshold_cm)
    return 100.0 * failed / len(records)


def teichholz_ef(edd: float, esd: float, cubic: bool = False) -> EFRecord:
    """Ejection fraction from the two keyframe diameters (cm).

    Default volumes follow vol(d) = 7 d / (2.4 + d); the ``cubic`` flag
    switches to the classical d^3 numerator for plausibility checks.
    """
    if edd <= 0:
        raise ValueError("edd must be positive")
    if esd < 0:
        raise ValueError("esd must be non-negative")

    def vol(d: float) -> float:
        num = d**3 if cubic else d
        return 7.0 * num / (2.4 + d)

    ed_vol = vol(edd)
    es_vol = vol(esd)
    ef = 100.0 * (ed_vol - es_vol) / ed_vol
    return EFRecord(edd=edd, esd=esd, ed_vol=ed_vol, es_vol=es_vol, ef=ef)


def _keyframe_record(seq_id: str, pred: Prediction, truth: CineSequence,
                     frame: int, tag: str, spacing: float) -> ErrorRecord:
    p = pred.pair_at(frame)
    t = truth.annotations[frame]
    il, al = lde_px(p, t)
    return ErrorRecord(
        seq_id=seq_id,
        frame_tag=tag,
        lde_il_px=il,
        lde_al_px=al,
        le_px=abs(p.lvid_length() - t.lvid_length()),
        spacing=spacing,
    )


def _table_for(records: list[ErrorRecord]) -> dict[str, dict[str, float]]:
    table = {}
    for crit, px_getter, cm_getter in (
        ("lde_al", lambda r: r.lde_al_px, lambda r: r.lde_al_cm),
        ("lde_il", lambda r: r.lde_il_px, lambda r: r.lde_il_cm),
        ("le", lambda r: r.le_px, lambda r: r.le_cm),
    ):
        table[f"{crit}_cm"] = stats_table([cm_getter(r) for r in records])
        table[f"{crit}_px"] = stats_table([px_getter(r) for r in records])
    return table


def per_frame_lde_px(pred: Prediction, truth: CineSequence) -> Optional[list[float]]:
    """Average landmark deviation per frame against hidden truth, if present."""
    if truth.hidden_truth is None:
        return None
    return [
        average_lde_px(pred.pair_at(t), truth.hidden_truth[t - 1])
        for t in range(1, truth.k + 1)
    ]


def evaluate_dataset(preds: dict[str, Prediction], truths: dict[str, CineSequence],
                     spacing: Optional[float] = None,
                     failure_threshold_cm: float = DEFAULT_FAILURE_THRESHOLD_CM) -> dict:
    """Aggregate all evaluation tables for matched prediction/truth ids.

    Emits end-diastolic and end-systolic error tables, the ejection
    fraction table and scatter pairs, failure rates, and, when hidden
    truth exists, per-frame deviation series with an error-accumulation
    summary (final-frame mean vs. the pooled median over in-between
    frames).
    """
    missing = sorted(set(truths) - set(preds))
    extra = sorted(set(preds) - set(truths))
    if missing or extra:
        raise EvaluationError(f"prediction/truth id mismatch: missing={missing} unmatched={extra}")

    records: dict[str, list[ErrorRecord]] = {"ed": [], "es": []}
    ef_rows = []
    per_frame_series: dict[str, list[float]] = {}
    spacings: dict[str, float] = {}

    for seq_id in sorted(truths):
        truth = truths[seq_id]
        pred = preds[seq_id]
        sp = spacing if spacing is not None else truth.pixel_spacing
        spacings[seq_id] = sp
        records["ed"].append(_keyframe_record(seq_id, pred, truth, 1, "ed", sp))
        records["es"].append(_keyframe_record(seq_id, pred, truth, truth.k, "es", sp))

        pred_ef = teichholz_ef(
            max(pred.pair_at(1).lvid_length() * sp, 1e-9),
            pred.pair_at(truth.k).lvid_length() * sp,
        ).ef
        truth_ef = teichholz_ef(
            truth.annotations[1].lvid_length() * sp,
            truth.annotations[truth.k].lvid_length() * sp,
        ).ef
        ef_rows.append({"id": seq_id, "truth_ef": truth_ef, "pred_ef": pred_ef,
                        "ef_error": abs(pred_ef - truth_ef)})

        series = per_frame_lde_px(pred, truth)
        if series is not None:
            per_frame_series[seq_id] = series

    def ef_stats(values):
        arr = np.asarray(values, dtype=float)
        return {
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "min": float(arr.min()),
            "median": float(np.percentile(arr, 50)),
            "p90": float(np.percentile(arr, 90)),
        }

    per_frame = None
    if per_frame_series:
        finals = [s[-1] for s in per_frame_series.values()]
        mids = [v for s in per_frame_series.values() for v in s[1:-1]]
        mid_median = float(np.median(mids)) if mids else float("nan")
        final_mean = float(np.mean(finals))
        ratio = final_mean / mid_median if mids and mid_median > 0 else float("inf")
        per_frame = {
            "series": per_frame_series,
            "accumulation": {
                "final_mean_px": final_mean,
                "mid_median_px": mid_median,
                "ratio": ratio,
            },
        }

    return {
        "n": len(truths),
        "ed": _table_for(records["ed"]),
        "es": _table_for(records["es"]),
        "ef": {
            "prediction": ef_stats([r["pred_ef"] for r in ef_rows]),
            "error": ef_stats([r["ef_error"] for r in ef_rows]),
        },
        "ef_scatter": ef_rows,
        "failure": {
            "threshold_cm": failure_threshold_cm,
            "ed_pct": failure_rate(records["ed"], failure_threshold_cm),
            "es_pct": failure_rate(records["es"], failure_threshold_cm),
        },
        "records": records,
        "per_frame": per_frame,
    }


def summary_flat(bundle: dict) -> dict[str, float]:
    """Flatten a bundle into dotted keys for threshold checks."""
    flat: dict[str, float] = {"n": bundle["n"]}
    for tag in ("ed", "es"):
        for crit, stats in bundle[tag].items():
            for stat, value in stats.items():
                flat[f"{tag}.{crit}.{stat}"] = value
    for quantity, stats in bundle["ef"].items():
        for stat, value in stats.items():
            flat[f"ef.{quantity}.{stat}"] = value
    flat["failure.ed_pct"] = bundle["failure"]["ed_pct"]
    flat["failure.es_pct"] = bundle["failure"]["es_pct"]
    flat["failure.threshold_cm"] = bundle["failure"]["threshold_cm"]
    if bundle.get("per_frame"):
        for key, value in bundle["per_frame"]["accumulation"].items():
            flat[f"per_frame.{key}"] = value
    return flat


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _write_stats_csv(path: Path, table: dict[str, dict[str, float]]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["criterion", "unit"] + list(STAT_COLUMNS))
        for crit in ("lde_al", "lde_il", "le"):
            for unit in ("cm", "px"):
                stats = table[f"{crit}_{unit}"]
                writer.writerow([crit, unit] + [_fmt(stats[c]) for c in STAT_COLUMNS])


def _plot_table(path: Path, table: dict[str, dict[str, float]], title: str):
    fig, ax = plt.subplots(figsize=(8, 2.2))
    ax.axis("off")
    rows = []
    labels = []
    for crit in ("lde_al", "lde_il", "le"):
        stats = table[f"{crit}_cm"]
        labels.append(f"{crit} (cm)")
        rows.append([_fmt(stats[c]) for c in STAT_COLUMNS])
    tbl = ax.table(cellText=rows, rowLabels=labels, colLabels=list(STAT_COLUMNS), loc="center")
    tbl.scale(1.0, 1.3)
    ax.set_title(title)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def write_report(bundle: dict, out_dir) -> list[Path]:
    """Emit the CSV tables and static plots of one evaluation bundle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for tag, title in (("ed", "end-diastolic"), ("es", "end-systolic")):
        csv_path = out_dir / f"{tag}_table.csv"
        _write_stats_csv(csv_path, bundle[tag])
        written.append(csv_path)
        png_path = out_dir / f"{tag}_table.png"
        _plot_table(png_path, bundle[tag], f"Errors at the {title} frame")
        written.append(png_path)

    ef_path = out_dir / "ef_table.csv"
    with open(ef_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["quantity"] + list(EF_STAT_COLUMNS))
        for quantity in ("prediction", "error"):
            stats = bundle["ef"][quantity]
            writer.writerow([f"ef_{quantity}"] + [_fmt(stats[c]) for c in EF_STAT_COLUMNS])
    written.append(ef_path)

    scatter_path = out_dir / "ef_scatter.csv"
    with open(scatter_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "truth_ef", "pred_ef"])
        for row in bundle["ef_scatter"]:
            writer.writerow([row["id"], _fmt(row["truth_ef"]), _fmt(row["pred_ef"])])
    written.append(scatter_path)

    fig, ax = plt.subplots(figsize=(5, 5))
    truth_vals = [r["truth_ef"] for r in bundle["ef_scatter"]]
    pred_vals = [r["pred_ef"] for r in bundle["ef_scatter"]]
    ax.scatter(truth_vals, pred_vals, s=18, alpha=0.8)
    lims = [
        min(truth_vals + pred_vals + [0.0]),
        max(truth_vals + pred_vals + [1.0]),
    ]
    ax.plot(lims, lims, "k--", lw=0.8)
    ax.set_xlabel("ground-truth EF (%)")
    ax.set_ylabel("predicted EF (%)")
    ax.set_title("EF agreement")
    fig.savefig(out_dir / "ef_scatter.png", dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(out_dir / "ef_scatter.png")

    failure_path = out_dir / "failure.csv"
    with open(failure_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "threshold_cm", "failure_pct"])
        writer.writerow(["ed", _fmt(bundle["failure"]["threshold_cm"]), _fmt(bundle["failure"]["ed_pct"])])
        writer.writerow(["es", _fmt(bundle["failure"]["threshold_cm"]), _fmt(bundle["failure"]["es_pct"])])
    written.append(failure_path)

    if bundle.get("per_frame"):
        pf_path = out_dir / "per_frame_lde.csv"
        with open(pf_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "t", "lde_px", "lde_cm"])
            for seq_id in sorted(bundle["per_frame"]["series"]):
                series = bundle["per_frame"]["series"][seq_id]
                sp = bundle["records"]["ed"][0].spacing
                for t, v in enumerate(series, start=1):
                    writer.writerow([seq_id, t, _fmt(v), _fmt(v * sp)])
        written.append(pf_path)

        fig, ax = plt.subplots(figsize=(6, 4))
        for seq_id, series in sorted(bundle["per_frame"]["series"].items()):
            ax.plot(range(1, len(series) + 1), series, alpha=0.35, lw=0.9)
        ax.set_xlabel("frame")
        ax.set_ylabel("average landmark deviation (px)")
        ax.set_title("Per-frame tracking error vs hidden truth")
        fig.savefig(out_dir / "per_frame_lde.png", dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(out_dir / "per_frame_lde.png")

    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary_flat(bundle), f, indent=1, sort_keys=True)
    written.append(summary_path)
    return written


def render_overlay(seq: CineSequence, pred: Prediction, out_path, frames: Optional[tuple[int, ...]] = None):
    """Render predicted vs ground-truth segments on the annotated frames.

    The predicted segment is drawn in orange with yellow landmarks, the
    ground truth in green with red landmarks.
    """
    if frames is None:
        frames = (1, seq.k)
    fig, axes = plt.subplots(1, len(frames), figsize=(4 * len(frames), 4))
    if len(frames) == 1:
        axes = [axes]
    for ax, t in zip(axes, frames):
        ax.imshow(seq.frame(t), cmap="gray", vmin=0, vmax=255)
        truth = seq.annotations.get(t) if t in seq.annotations else (
            seq.hidden_truth[t - 1] if seq.hidden_truth else None
        )
        if truth is not None:
            ax.plot(
                [truth.inferolateral.x, truth.anteroseptal.x],
                [truth.inferolateral.y, truth.anteroseptal.y],
                color="lime", lw=1.6, label="truth",
            )
            ax.scatter(
                [truth.inferolateral.x, truth.anteroseptal.x],
                [truth.inferolateral.y, truth.anteroseptal.y],
                color="red", s=22, zorder=3,
            )
        p = pred.pair_at(t)
        ax.plot(
            [p.inferolateral.x, p.anteroseptal.x],
            [p.inferolateral.y, p.anteroseptal.y],
            color="orange", lw=1.6, label="predicted",
        )
        ax.scatter(
            [p.inferolateral.x, p.anteroseptal.x],
            [p.inferolateral.y, p.anteroseptal.y],
            color="yellow", s=22, zorder=3,
        )
        ax.set_title(f"frame {t}")
        ax.axis("off")
    axes[0].legend(loc="lower right", fontsize=8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110, bbox_inches="tight")
    plt.close(fig)

"""End-to-end prediction: detect the pair in frame 1, track through the rest.

Optionally completes the backward half of the cycle for diagnostics.
All emitted coordinates are image space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import (
    CineSequence,
    CinetrackError,
    FEATURE_STRIDE,
    LandmarkPair,
    Motion2,
    Point2,
    heatmap_argmax,
)
from .losses import TrackRecord, compose_backward
from .network import LandmarkNet, crop_patches

PREDICTION_SCHEMA_VERSION = 1


class DetectionFailedError(CinetrackError):
    """Frame-1 detection produced a degenerate heatmap; no tracking attempted."""


@dataclass
class FramePrediction:
    t: int
    pair: LandmarkPair
    provenance: str  # "detected" or "tracked"
    drift: bool = False


@dataclass
class Prediction:
    """Per-frame landmark pairs with provenance and optional cycle diagnostics."""

    k: int
    pixel_spacing_cm: float
    frames: list[FramePrediction]
    motions: list[Motion2]
    backward: Optional[TrackRecord] = None
    cycle_residual_px: Optional[float] = None

    def pair_at(self, t: int) -> LandmarkPair:
        return self.frames[t - 1].pair


def _clamp_pair(arr: np.ndarray, width: int, height: int) -> tuple[np.ndarray, bool]:
    clamped = np.clip(arr, [0.0, 0.0], [width - 1.0, height - 1.0])
    return clamped, bool(np.any(clamped != arr))


def _track_positions(model: LandmarkNet, feats: torch.Tensor, start: np.ndarray,
                     width: int, height: int):
    """Forward rollout from an image-space start; returns arrays, motions, drift flags.

    If a propagated position leaves the image it is clamped to the
    border and flagged; the emitted motion is the effective (clamped)
    step so positions always satisfy the additive recursion exactly.
    """
    positions = [np.asarray(start, dtype=float)]
    motions: list[Motion2] = []
    drift = [False]
    for i in range(1, feats.shape[0]):
        pp = crop_patches(feats[i - 1], feats[i], positions[-1])
        step = model.tracker(pp).numpy() * FEATURE_STRIDE
        nxt = positions[-1] + step
        nxt, drifted = _clamp_pair(nxt, width, height)
        motions.append(Motion2.from_array(nxt - positions[-1]))
        positions.append(nxt)
        drift.append(drifted)
    return positions, motions, drift


def predict_sequence(seq: CineSequence, model: LandmarkNet, with_cycle: bool = False) -> Prediction:
    """Detect the pair on frame 1, then propagate it through frames 2..k.

    Raises DetectionFailedError when any frame-1 heatmap channel is
    degenerate. With ``with_cycle`` the backward pass k -> 1 is also run
    and the round-trip residual (mean of the two landmarks' Euclidean
    distances, pixels) is reported. Never mutates the model.
    """
    with torch.no_grad():
        feats = model.encode_frames(seq.frames)
        det = model.detector(feats[0:1])[0]
        pair_hm, degenerate = heatmap_argmax(det.numpy())
        if any(degenerate):
            raise DetectionFailedError(
                "detection failed: degenerate heatmap channel(s) "
                f"{[i for i, d in enumerate(degenerate) if d]} on frame 1"
            )
        start = pair_hm.as_array() * FEATURE_STRIDE
        start, start_drift = _clamp_pair(start, seq.width, seq.height)
        positions, motions, drift = _track_positions(model, feats, start, seq.width, seq.height)
        drift[0] = start_drift

        frames = [
            FramePrediction(
                t=i + 1,
                pair=LandmarkPair.from_array(pos),
                provenance="detected" if i == 0 else "tracked",
                drift=drift[i],
            )
            for i, pos in enumerate(positions)
        ]

        backward = None
        residual = None
        if with_cycle:
            bpos = torch.tensor(positions[-1], dtype=torch.float32)
            bmotions: list[Motion2] = []
            for i in range(feats.shape[0] - 1, 0, -1):
                pp = crop_patches(feats[i], feats[i - 1], bpos)
                m = model.tracker(pp) * FEATURE_STRIDE
                bpos = bpos + m
                bmotions.append(Motion2.from_array(m.numpy()))
            backward = compose_backward(frames[-1].pair, bmotions)
            end = backward.end.as_array()
            per_landmark = np.linalg.norm(end - positions[0], axis=1)
            residual = float(per_landmark.mean())

    return Prediction(
        k=seq.k,
        pixel_spacing_cm=seq.pixel_spacing,
        frames=frames,
        motions=motions,
        backward=backward,
        cycle_residual_px=residual,
    )


def track_from(seq: CineSequence, model: LandmarkNet, start: LandmarkPair) -> list[LandmarkPair]:
    """Tracking-only rollout from a given frame-1 pair (no detection).

    Used by the annotation-sparsity analysis, which starts from the
    ground-truth frame-1 location.
    """
    with torch.no_grad():
        feats = model.encode_frames(seq.frames)
        positions, _, _ = _track_positions(model, feats, start.as_array(), seq.width, seq.height)
    return [LandmarkPair.from_array(p) for p in positions]


def _pair_json(pair: LandmarkPair) -> dict:
    return {
        "il": [pair.inferolateral.x, pair.inferolateral.y],
        "al": [pair.anteroseptal.x, pair.anteroseptal.y],
    }


def export_prediction(pred: Prediction, seq_id: str, path) -> None:
    """Write one prediction as versioned JSON (image-space floats)."""
    doc = {
        "version": PREDICTION_SCHEMA_VERSION,
        "id": seq_id,
        "k": pred.k,
        "pixel_spacing_cm": pred.pixel_spacing_cm,
        "frames": [
            {"t": f.t, **_pair_json(f.pair), "provenance": f.provenance, "drift": f.drift}
            for f in pred.frames
        ],
    }
    if pred.cycle_residual_px is not None:
        doc["cycle_residual_px"] = pred.cycle_residual_px
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_prediction(path) -> tuple[str, Prediction]:
    with open(path) as f:
        doc = json.load(f)
    frames = [
        FramePrediction(
            t=int(fr["t"]),
            pair=LandmarkPair(
                Point2(float(fr["il"][0]), float(fr["il"][1])),
                Point2(float(fr["al"][0]), float(fr["al"][1])),
            ),
            provenance=fr["provenance"],
            drift=bool(fr.get("drift", False)),
        )
        for fr in doc["frames"]
    ]
    motions = [
        Motion2.from_array(frames[i + 1].pair.as_array() - frames[i].pair.as_array())
        for i in range(len(frames) - 1)
    ]
    pred = Prediction(
        k=int(doc["k"]),
        pixel_spacing_cm=float(doc["pixel_spacing_cm"]),
        frames=frames,
        motions=motions,
        cycle_residual_px=doc.get("cycle_residual_px"),
    )
    return str(doc["id"]), pred

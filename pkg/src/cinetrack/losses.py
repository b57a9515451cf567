"""Training objectives and the trajectory algebra they consume.

Four terms drive training: a penalty-reduced focal loss on detection
heatmaps, an end-frame motion loss and a forward/backward cycle loss on
tracked trajectories, and a reciprocal loss that scores the detection
heatmap of an unannotated frame against the tracking branch's position
for that frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    Heatmap,
    LandmarkPair,
    Motion2,
    OutOfBoundsError,
    nearest_pixel,
    render_gaussian_target,
)


def _heatmap_values(pred):
    return pred.values if isinstance(pred, Heatmap) else pred

# Heatmap scores are clamped to this band before logs are taken.
SCORE_EPS = 1e-6


@dataclass(frozen=True)
class FocalParams:
    """Exponents and target radius of the penalty-reduced focal loss.

    ``alpha`` scales down easy predictions, ``beta`` softens the penalty
    for negatives near a positive, and ``radius`` (heatmap pixels) sets
    the Gaussian used to build target maps (sigma = radius / 3).
    """

    alpha: float = 2.0
    beta: float = 4.0
    radius: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def render_target_maps(targets: LandmarkPair, shape: tuple[int, int], radius: float) -> np.ndarray:
    """(2, H, W) Gaussian target stack; channel 0 inferolateral, 1 anteroseptal."""
    return np.stack(
        [
            render_gaussian_target(targets.inferolateral, shape, radius),
            render_gaussian_target(targets.anteroseptal, shape, radius),
        ]
    )


def focal_from_maps(pred, target, fp: FocalParams):
    """Penalty-reduced focal loss between a score map and a target map.

    Pixels where the target is exactly 1 use (1-p)^alpha * log(p); all
    others use (1-y)^beta * p^alpha * log(1-p). The summed log-likelihood
    is negated so the result is >= 0 and suitable for minimization.
    Accepts numpy arrays (returns float) or torch tensors (returns a
    0-dim tensor attached to the graph).
    """
    if torch.is_tensor(pred):
        y = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
        p = pred.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
        pos = (1.0 - p) ** fp.alpha * torch.log(p)
        neg = (1.0 - y) ** fp.beta * p ** fp.alpha * torch.log(1.0 - p)
        return -torch.where(y == 1.0, pos, neg).sum()
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    p = np.clip(pred, SCORE_EPS, 1.0 - SCORE_EPS)
    pos = (1.0 - p) ** fp.alpha * np.log(p)
    neg = (1.0 - y) ** fp.beta * p ** fp.alpha * np.log(1.0 - p)
    return float(-np.where(y == 1.0, pos, neg).sum())


def focal_loss(pred, targets: LandmarkPair, fp: FocalParams = FocalParams()):
    """Focal loss of a 2-channel heatmap against landmark centers.

    ``pred`` is a (2, H, W) score map (numpy, torch, or Heatmap);
    ``targets`` are positive centers in heatmap coordinates. Raises
    OutOfBoundsError when a center rounds outside the map.
    """
    values = _heatmap_values(pred)
    target = render_target_maps(targets, values.shape[-2:], fp.radius)
    return focal_from_maps(values, target, fp)


def focal_loss_soft_center(pred: torch.Tensor, centers: torch.Tensor, fp: FocalParams = FocalParams()):
    """Focal loss whose Gaussian target is differentiable in the centers.

    ``centers`` is a (2, 2) tensor of (x, y) per channel. The Gaussian is
    evaluated from the continuous center so gradients reach whatever
    produced it; the single positive pixel is still the rounded center
    (treated as a constant), keeping the positive branch intact.
    """
    if not torch.is_tensor(pred) or not torch.is_tensor(centers):
        raise TypeError("soft-center focal loss operates on torch tensors")
    hh, ww = pred.shape[-2:]
    sigma = fp.radius / 3.0
    ys = torch.arange(hh, dtype=pred.dtype, device=pred.device)
    xs = torch.arange(ww, dtype=pred.dtype, device=pred.device)
    p = pred.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    total = pred.new_zeros(())
    for c in range(2):
        cx, cy = centers[c, 0], centers[c, 1]
        row = int(torch.floor(cy.detach() + 0.5))
        col = int(torch.floor(cx.detach() + 0.5))
        if not (0 <= row < hh and 0 <= col < ww):
            raise OutOfBoundsError(f"soft target center for channel {c} is outside the map")
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        y = torch.exp(-d2 / (2.0 * sigma * sigma))
        pos_mask = torch.zeros_like(y, dtype=torch.bool)
        pos_mask[row, col] = True
        pc = p[c]
        pos = (1.0 - pc) ** fp.alpha * torch.log(pc)
        neg = (1.0 - y) ** fp.beta * pc ** fp.alpha * torch.log(1.0 - pc)
        total = total - torch.where(pos_mask, pos, neg).sum()
    return total


@dataclass
class TrackRecord:
    """Per-frame positions and per-step motions of one tracking pass.

    ``positions`` are in traversal order (frames 1..k forward, k..1
    backward) and satisfy positions[i+1] == positions[i] + motions[i]
    exactly, element-wise.
    """

    positions: list[LandmarkPair]
    motions: list[Motion2]
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        if len(self.positions) != len(self.motions) + 1:
            raise ValueError("a record needs exactly one more position than motions")

    @property
    def end(self) -> LandmarkPair:
        return self.positions[-1]


def compose_forward(start: LandmarkPair, motions: list[Motion2]) -> TrackRecord:
    """Accumulate motions from the frame-1 pair; pure bookkeeping, no network."""
    positions = [start]
    for m in motions:
        positions.append(positions[-1].shifted(m))
    return TrackRecord(positions, list(motions), "forward")


def compose_backward(start: LandmarkPair, motions: list[Motion2]) -> TrackRecord:
    """Accumulate motions from the frame-k pair down to frame 1."""
    positions = [start]
    for m in motions:
        positions.append(positions[-1].shifted(m))
    return TrackRecord(positions, list(motions), "backward")


def _pair_values(p):
    if torch.is_tensor(p):
        return p.reshape(-1)
    if isinstance(p, LandmarkPair):
        return p.as_array().reshape(-1)
    return np.asarray(p, dtype=np.float64).reshape(-1)


def _squared_residual(a, b):
    va, vb = _pair_values(a), _pair_values(b)
    if torch.is_tensor(va) or torch.is_tensor(vb):
        ta = va if torch.is_tensor(va) else torch.as_tensor(va)
        tb = vb if torch.is_tensor(vb) else torch.as_tensor(vb, dtype=ta.dtype, device=ta.device)
        d = ta - tb
        return (d * d).sum()
    d = va - vb
    return float((d * d).sum())


def motion_loss(predicted_end, truth_end):
    """Squared Euclidean norm of the 4-vector residual at the annotated end frame."""
    return _squared_residual(predicted_end, truth_end)


def cycle_loss(forward_backward_end, truth_start):
    """Squared round-trip residual at frame 1 after forward-then-backward tracking.

    Uses the defining residual ||L_1 - L_1*||^2 of the cycle rather than
    the additive shortcut of combining the two motion losses, which is
    not a norm identity and is unbounded below.
    """
    return _squared_residual(forward_backward_end, truth_start)


def targets_within(targets: LandmarkPair, shape: tuple[int, int]) -> bool:
    """True when both centers round to pixels inside an (H, W) map."""
    hh, ww = int(shape[0]), int(shape[1])
    for p in (targets.inferolateral, targets.anteroseptal):
        row, col = nearest_pixel(p)
        if not (0 <= row < hh and 0 <= col < ww):
            return False
    return True


def reciprocal_loss(det_heatmap, tracked: LandmarkPair, fp: FocalParams = FocalParams()):
    """Detection-vs-tracking agreement on an unannotated frame.

    The tracking branch's positions become pseudo-positive centers and
    the detection heatmap is scored with the focal loss against them
    (identical delegation, so the two APIs agree by construction).
    Target rendering carries no gradient. Returns None when a tracked
    center rounds outside the map so callers can skip the frame and
    count it rather than fail.
    """
    values = _heatmap_values(det_heatmap)
    if not targets_within(tracked, values.shape[-2:]):
        return None
    return focal_loss(values, tracked, fp)


def reciprocal_schedule(k: int, rate: int) -> list[int]:
    """Unannotated frames the reciprocal loss evaluates: t in (1, k) with (t-1) % rate == 0."""
    if rate < 1:
        raise ValueError("rate must be >= 1")
    return [t for t in range(2, k) if (t - 1) % rate == 0]

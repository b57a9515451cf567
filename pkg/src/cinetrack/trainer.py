"""Three-phase alternating optimization of the detection/tracking model.

Per mini-batch: phase A fits encoder and both heads to the annotated
frames (focal + motion + cycle); phase B ascends the reciprocal
discrepancy with respect to the encoder only, on unannotated frames;
phase C descends all four losses with respect to the heads only,
repeated several times on the same batch. Sequences have variable
length, so they are processed individually and gradients averaged.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .core import CineSequence, CinetrackError, FEATURE_STRIDE, LandmarkPair, Point2, round_half_up
from .losses import (
    FocalParams,
    focal_loss,
    focal_loss_soft_center,
    motion_loss,
    cycle_loss,
    reciprocal_loss,
    reciprocal_schedule,
)
from .network import LandmarkNet, crop_patches, save_checkpoint, config_hash


class TrainingDiverged(CinetrackError):
    """Loss became non-finite or exceeded the divergence limit."""


@dataclass
class TrainConfig:
    """Hyperparameters of the three-phase loop.

    ``loss_weights`` orders (focal, motion, cycle, reciprocal); all
    default to 1. ``step_C_repeats`` inner updates run on the same
    mini-batch. ``one_frame_mode`` trains from frame-1 supervision only
    (no end-frame focal, no motion loss).
    """

    lr_A: float = 1e-3
    lr_B: float = 1e-4
    lr_C: float = 1e-3
    step_C_repeats: int = 3
    rec_rate: int = 3
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    enable_rec_loss: bool = True
    enable_adversarial: bool = True
    one_frame_mode: bool = False
    rec_grad_to_tracker: bool = False
    divergence_limit: float = 1e6
    focal_radius: float = 10.0
    torch_threads: int = 1  # small tensors: thread sync costs more than it buys

    def __post_init__(self):
        if min(self.lr_A, self.lr_B, self.lr_C) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.step_C_repeats < 1:
            raise ValueError("step_C_repeats must be >= 1")
        if self.rec_rate < 2:
            raise ValueError("rec_rate must be >= 2")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights must have 4 entries (focal, motion, cycle, rec)")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: LandmarkNet
    epoch: int
    history: list[dict]
    rec_skipped_frames: int
    rec_skipped_steps: int


def _to_heatmap_pair(arr) -> LandmarkPair:
    """Image-space (2, 2) array of (x, y) rows to heatmap-space pair."""
    a = np.asarray(arr, dtype=float).reshape(2, 2)
    pts = [Point2(float(round_half_up(x / FEATURE_STRIDE)), float(round_half_up(y / FEATURE_STRIDE))) for x, y in a]
    return LandmarkPair(pts[0], pts[1])


class _SeqTensors:
    """Per-sequence tensors cached once so epochs do no image decoding."""

    def __init__(self, seq: CineSequence):
        self.k = seq.k
        self.frames = torch.from_numpy(seq.frames.astype(np.float32) / 255.0)
        self.gt1 = torch.tensor(seq.annotations[1].as_array(), dtype=torch.float32)
        self.gtk = torch.tensor(seq.annotations[seq.k].as_array(), dtype=torch.float32)
        self.gt1_hm = _to_heatmap_pair(seq.annotations[1].as_array())
        self.gtk_hm = _to_heatmap_pair(seq.annotations[seq.k].as_array())


def _as_seq_tensors(batch) -> list[_SeqTensors]:
    return [s if isinstance(s, _SeqTensors) else _SeqTensors(s) for s in batch]


class Trainer:
    """Owns the model parameters and applies the A/B/C schedule."""

    def __init__(self, model: LandmarkNet, cfg: TrainConfig, log_path=None):
        self.model = model
        self.cfg = cfg
        if cfg.torch_threads:
            torch.set_num_threads(cfg.torch_threads)
        self.fp = FocalParams(radius=cfg.focal_radius)
        groups = model.parameter_groups()
        self.opt_a = torch.optim.Adam(
            groups["encoder"] + groups["detector"] + groups["tracker"], lr=cfg.lr_A
        )
        self.opt_b = torch.optim.Adam(groups["encoder"], lr=cfg.lr_B)
        self.opt_c = torch.optim.Adam(groups["detector"] + groups["tracker"], lr=cfg.lr_C)
        self.rec_skipped_frames = 0
        self.rec_skipped_steps = 0
        self.history: list[dict] = []
        self._log_file = open(log_path, "a") if log_path else None

    def close(self):
        if self._log_file:
            self._log_file.close()
            self._log_file = None

    # ----- rollouts -------------------------------------------------

    def _forward_rollout(self, feats: torch.Tensor, start: torch.Tensor) -> list[torch.Tensor]:
        """Positions for frames 1..k, image space; crop centers are detached."""
        positions = [start]
        for i in range(1, feats.shape[0]):
            pp = crop_patches(feats[i - 1], feats[i], positions[-1])
            m = self.model.tracker(pp) * FEATURE_STRIDE
            positions.append(positions[-1] + m)
        return positions

    def _backward_rollout(self, feats: torch.Tensor, start: torch.Tensor) -> torch.Tensor:
        """Position at frame 1 after tracking back from frame k."""
        pos = start
        for i in range(feats.shape[0] - 1, 0, -1):
            pp = crop_patches(feats[i], feats[i - 1], pos)
            m = self.model.tracker(pp) * FEATURE_STRIDE
            pos = pos + m
        return pos

    # ----- loss assembly --------------------------------------------

    def _annotated_terms(self, st: _SeqTensors, feats: torch.Tensor):
        """Focal/motion/cycle terms for one sequence plus the forward positions."""
        w_f, w_m, w_c, _ = self.cfg.loss_weights
        focal_frames = [0] if self.cfg.one_frame_mode else [0, st.k - 1]
        det = self.model.detector(feats[focal_frames])
        targets = [st.gt1_hm] if self.cfg.one_frame_mode else [st.gt1_hm, st.gtk_hm]
        focal = sum(focal_loss(det[i], tgt, self.fp) for i, tgt in enumerate(targets)) / len(targets)

        positions = self._forward_rollout(feats, st.gt1)
        motion = None
        if not self.cfg.one_frame_mode:
            motion = motion_loss(positions[-1], st.gtk)
        back_end = self._backward_rollout(feats, positions[-1])
        cyc = cycle_loss(back_end, st.gt1)

        total = w_f * focal + w_c * cyc
        if motion is not None:
            total = total + w_m * motion
        terms = {
            "focal": float(focal.detach()),
            "motion": float(motion.detach()) if motion is not None else 0.0,
            "cycle": float(cyc.detach()),
        }
        return total, terms, positions

    def _rec_term(self, det_map: torch.Tensor, pos_image: torch.Tensor):
        """Reciprocal loss of one frame's heatmap against a tracked position.

        Targets are gradient-stopped by default; the soft variant keeps
        the chain into the tracker differentiable. Returns None when the
        tracked center leaves the map.
        """
        if self.cfg.rec_grad_to_tracker:
            centers = pos_image / FEATURE_STRIDE
            hh, ww = det_map.shape[-2:]
            rounded = (centers.detach() + 0.5).floor()
            if not bool(
                ((rounded[:, 0] >= 0) & (rounded[:, 0] < ww) & (rounded[:, 1] >= 0) & (rounded[:, 1] < hh)).all()
            ):
                return None
            return focal_loss_soft_center(det_map, centers, self.fp)
        tracked = _to_heatmap_pair(pos_image.detach().numpy())
        return reciprocal_loss(det_map, tracked, self.fp)

    def _rec_loss(self, st: _SeqTensors, feats: torch.Tensor, positions: list[torch.Tensor]):
        """Mean reciprocal loss over this sequence's scheduled unannotated frames."""
        frames_t = reciprocal_schedule(st.k, self.cfg.rec_rate)
        if not frames_t:
            return None, 0
        det = self.model.detector(feats[[t - 1 for t in frames_t]])
        terms = []
        for i, t in enumerate(frames_t):
            term = self._rec_term(det[i], positions[t - 1])
            if term is None:
                self.rec_skipped_frames += 1
                continue
            terms.append(term)
        if not terms:
            return None, 0
        return sum(terms) / len(terms), len(terms)

    def _check_finite(self, value: float, phase: str, context: dict):
        if not math.isfinite(value):
            self._dump_diagnostics(phase, value, context)
            raise TrainingDiverged(f"non-finite loss in phase {phase}: {value}")
        if abs(value) > self.cfg.divergence_limit:
            self._dump_diagnostics(phase, value, context)
            raise TrainingDiverged(f"loss {value:.3g} exceeded divergence limit in phase {phase}")

    def _dump_diagnostics(self, phase: str, value, context: dict):
        record = {"event": "divergence", "phase": phase, "loss": float(value), **context}
        self.history.append(record)
        if self._log_file:
            self._log_file.write(json.dumps(record) + "\n")
            self._log_file.flush()

    # ----- phases ----------------------------------------------------

    def step_A(self, batch) -> dict:
        """Joint descent of encoder and both heads on the annotated losses."""
        batch = _as_seq_tensors(batch)
        self.model.zero_grad(set_to_none=True)
        total = None
        agg = {"focal": 0.0, "motion": 0.0, "cycle": 0.0}
        for st in batch:
            feats = self.model.encode_frames(st.frames)
            seq_total, terms, _ = self._annotated_terms(st, feats)
            total = seq_total if total is None else total + seq_total
            for key in agg:
                agg[key] += terms[key] / len(batch)
        total = total / len(batch)
        agg["total"] = float(total.detach())
        self._check_finite(agg["total"], "A", agg)
        total.backward()
        self.opt_a.step()
        return agg

    def step_B(self, batch) -> dict:
        """Ascent of the reciprocal discrepancy, encoder parameters only.

        Uses only unannotated frames. A no-op when adversarial training
        or the reciprocal loss is disabled; skipped (with a counter) when
        no sequence in the batch has an eligible frame.
        """
        if not (self.cfg.enable_adversarial and self.cfg.enable_rec_loss):
            return {"rec": 0.0, "skipped": True}
        batch = _as_seq_tensors(batch)
        self.model.zero_grad(set_to_none=True)
        rec_terms = []
        for st in batch:
            feats = self.model.encode_frames(st.frames)
            if self.cfg.rec_grad_to_tracker:
                positions = self._forward_rollout(feats, st.gt1)
            else:
                with torch.no_grad():
                    positions = self._forward_rollout(feats.detach(), st.gt1)
            rec, _ = self._rec_loss(st, feats, positions)
            if rec is not None:
                rec_terms.append(rec)
        if not rec_terms:
            self.rec_skipped_steps += 1
            return {"rec": 0.0, "skipped": True}
        rec = sum(rec_terms) / len(rec_terms)
        stats = {"rec": float(rec.detach()), "skipped": False}
        self._check_finite(stats["rec"], "B", stats)
        (-rec).backward()
        self.opt_b.step()
        return stats

    def step_C(self, batch) -> list[dict]:
        """Descent of all four losses on the heads, encoder frozen.

        Runs ``step_C_repeats`` consecutive updates on the same batch.
        The encoder does not change in this phase, so features are
        computed once without a graph and reused across repeats.
        """
        batch = _as_seq_tensors(batch)
        with torch.no_grad():
            feats_list = [self.model.encode_frames(st.frames) for st in batch]
        results = []
        _, _, _, w_r = self.cfg.loss_weights
        for _ in range(self.cfg.step_C_repeats):
            self.model.zero_grad(set_to_none=True)
            total = None
            agg = {"focal": 0.0, "motion": 0.0, "cycle": 0.0, "rec": 0.0, "rec_frames": 0}
            for st, feats in zip(batch, feats_list):
                seq_total, terms, positions = self._annotated_terms(st, feats)
                if self.cfg.enable_rec_loss:
                    rec, n_rec = self._rec_loss(st, feats, positions)
                    if rec is not None:
                        seq_total = seq_total + w_r * rec
                        agg["rec"] += float(rec.detach()) / len(batch)
                        agg["rec_frames"] += n_rec
                total = seq_total if total is None else total + seq_total
                for key in ("focal", "motion", "cycle"):
                    agg[key] += terms[key] / len(batch)
            total = total / len(batch)
            agg["total"] = float(total.detach())
            self._check_finite(agg["total"], "C", agg)
            total.backward()
            self.opt_c.step()
            results.append(agg)
        return results

    # ----- outer loop -------------------------------------------------

    def train(self, dataset, checkpoint_dir=None, on_epoch_end: Optional[Callable] = None) -> TrainState:
        """Iterate A -> B -> C per mini-batch for the configured epochs.

        Deterministic for a fixed (model seed, cfg.seed): data order,
        updates, and checkpoints reproduce exactly. Writes one
        checkpoint per epoch when ``checkpoint_dir`` is given. The
        optional ``on_epoch_end(trainer, epoch)`` callback stops
        training early when it returns True.
        """
        if not dataset:
            raise ValueError("dataset is empty")
        seqs = _as_seq_tensors(dataset)
        rng = np.random.default_rng(self.cfg.seed)
        cfg_hash = config_hash(self.cfg.as_dict())
        epoch = 0
        step = 0
        for epoch in range(1, self.cfg.epochs + 1):
            order = rng.permutation(len(seqs))
            for b0 in range(0, len(seqs), self.cfg.batch_size):
                batch = [seqs[i] for i in order[b0:b0 + self.cfg.batch_size]]
                for phase, run_phase in (("A", self.step_A), ("B", self.step_B), ("C", self.step_C)):
                    t0 = time.perf_counter()
                    stats = run_phase(batch)
                    if isinstance(stats, list):  # phase C reports its repeats
                        stats = {"repeats": stats, **stats[-1]}
                    record = {
                        "epoch": epoch,
                        "step": step,
                        "phase": phase,
                        "losses": stats,
                        "wall_s": round(time.perf_counter() - t0, 4),
                    }
                    self.history.append(record)
                    if self._log_file:
                        self._log_file.write(json.dumps(record) + "\n")
                        self._log_file.flush()
                step += 1
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                path = Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt"
                save_checkpoint(self.model, path, config_hash=cfg_hash, epoch=epoch)
            if on_epoch_end is not None and on_epoch_end(self, epoch):
                break
        return TrainState(
            model=self.model,
            epoch=epoch,
            history=self.history,
            rec_skipped_frames=self.rec_skipped_frames,
            rec_skipped_steps=self.rec_skipped_steps,
        )


def train(dataset, cfg: TrainConfig, model: LandmarkNet | None = None,
          checkpoint_dir=None, log_path=None, on_epoch_end=None) -> TrainState:
    """Convenience wrapper: build a seeded model and run the full loop."""
    from .network import build_model

    model = model or build_model(cfg.seed)
    trainer = Trainer(model, cfg, log_path=log_path)
    try:
        return trainer.train(dataset, checkpoint_dir=checkpoint_dir, on_epoch_end=on_epoch_end)
    finally:
        trainer.close()

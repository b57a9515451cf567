"""Deterministic synthetic cardiac-cine generator and dataset I/O.

Stands in for clinical data while keeping its annotation protocol:
labels exist only at the end-diastolic frame 1 and end-systolic frame
k. Every generated sequence additionally carries dense hidden truth so
per-frame tracking error is measurable, which the clinical protocol
cannot offer.

On-disk schema per sequence: ``<id>/frames/%04d.png`` (8-bit grayscale,
1-based) and ``<id>/annot.json`` with fields k, pixel_spacing_cm,
annotations ({"1": {"il": [x, y], "al": [x, y]}, "<k>": ...}) and an
optional hidden_truth array. A dataset root holds ``manifest.json``
with disjoint train/test entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import CineSequence, CinetrackError, LandmarkPair, Point2


class PhantomError(CinetrackError):
    """Invalid phantom configuration or ungeneratable geometry."""


class DatasetError(CinetrackError):
    """Base class for on-disk dataset problems."""


class MissingAnnotationError(DatasetError):
    """annot.json is absent or lacks required fields."""


class FrameShapeError(DatasetError):
    """Frames of one sequence disagree in shape."""


class CorruptSequenceError(DatasetError):
    """A frame file is missing or unreadable."""


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs of the synthetic generator; identical configs generate identical bytes."""

    image_size: tuple[int, int] = (64, 64)
    k_range: tuple[int, int] = (5, 20)
    contraction_fraction: float = 0.28
    speckle_strength: float = 0.10
    pixel_spacing: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 64 or w < 64:
            raise PhantomError(f"image_size must be at least 64x64, got {self.image_size}")
        lo, hi = self.k_range
        if not (2 <= lo <= hi):
            raise PhantomError(f"k_range must satisfy 2 <= min <= max, got {self.k_range}")
        if not (0.0 <= self.contraction_fraction < 0.6):
            raise PhantomError(
                f"contraction_fraction must lie in [0, 0.6), got {self.contraction_fraction}"
            )
        if self.speckle_strength < 0:
            raise PhantomError("speckle_strength must be non-negative")
        if self.pixel_spacing <= 0:
            raise PhantomError("pixel_spacing must be positive")


@dataclass
class ManifestEntry:
    id: str
    k: int
    annotated: list[int]


@dataclass
class DatasetManifest:
    train: list[ManifestEntry]
    test: list[ManifestEntry]

    def ids(self, split: str) -> list[str]:
        return [e.id for e in getattr(self, split)]


def _sequence_rng(cfg: PhantomConfig, idx: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, int(idx)])


def generate_sequence(cfg: PhantomConfig, idx: int) -> CineSequence:
    """Render one synthetic cine, a pure function of (cfg, idx).

    An ellipse-walled chamber with a bright wall band contracts from the
    end-diastolic to the end-systolic geometry along a half-cosine time
    profile; the two landmarks ride the opposite walls. Frames carry
    multiplicative log-normal speckle and a mild blur. Frames 1 and k
    are annotated; hidden_truth stores every frame's true pair.
    """
    rng = _sequence_rng(cfg, idx)
    h, w = cfg.image_size
    n_between = int(rng.integers(cfg.k_range[0], cfg.k_range[1] + 1))
    k = n_between + 2

    cx = w / 2.0 + rng.uniform(-0.04, 0.04) * w
    cy = h / 2.0 + rng.uniform(-0.04, 0.04) * h
    theta = rng.uniform(-0.3, 0.3)
    ux, uy = math.sin(theta), math.cos(theta)  # chamber internal dimension axis
    vx, vy = math.cos(theta), -math.sin(theta)  # long axis (perpendicular)

    # the chamber spans most of the frame so each wall's patch content is
    # dominated by structure that moves with its own landmark
    l_ed = rng.uniform(0.50, 0.62) * min(h, w)
    cf = float(np.clip(cfg.contraction_fraction * rng.uniform(0.85, 1.15), 0.0, 0.55))
    if cfg.contraction_fraction == 0.0:
        cf = 0.0
    l_es = l_ed * (1.0 - cf)
    share_il = rng.uniform(0.4, 0.6)  # asymmetric wall excursion
    long_semi = rng.uniform(1.1, 1.3) * l_ed / 2.0

    def pair_at(s: float) -> LandmarkPair:
        shortening = s * (l_ed - l_es)
        ri = l_ed / 2.0 - share_il * shortening
        ra = l_ed / 2.0 - (1.0 - share_il) * shortening
        il = Point2(cx + ux * ri, cy + uy * ri)
        al = Point2(cx - ux * ra, cy - uy * ra)
        return LandmarkPair(il, al)

    margin = 3.0
    for tag, pair in (("end-diastolic", pair_at(0.0)), ("end-systolic", pair_at(1.0))):
        for p in (pair.inferolateral, pair.anteroseptal):
            if not (margin <= p.x <= w - 1 - margin and margin <= p.y <= h - 1 - margin):
                raise PhantomError(
                    f"{tag} landmark ({p.x:.1f}, {p.y:.1f}) leaves the {h}x{w} image "
                    f"(l_ed={l_ed:.1f}, contraction={cf:.2f}, center=({cx:.1f}, {cy:.1f}))"
                )

    bg = rng.uniform(70.0, 95.0)
    slope_x = rng.uniform(-0.05, 0.05)
    slope_y = rng.uniform(-0.05, 0.05)
    pool_depth = rng.uniform(45.0, 60.0)
    wall_gain = rng.uniform(80.0, 110.0)
    wall_width = rng.uniform(0.05, 0.08)
    wall_offset = 0.10
    glow_gain = rng.uniform(55.0, 75.0)
    glow_sigma = 2.2

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = bg + slope_x * (xx - w / 2.0) + slope_y * (yy - h / 2.0)

    frames = np.empty((k, h, w), dtype=np.uint8)
    truth: list[LandmarkPair] = []
    for t in range(k):
        s = 0.5 * (1.0 - math.cos(math.pi * t / (k - 1)))
        pair = pair_at(s)
        truth.append(pair)

        ccx = (pair.inferolateral.x + pair.anteroseptal.x) / 2.0
        ccy = (pair.inferolateral.y + pair.anteroseptal.y) / 2.0
        semi_u = pair.lvid_length() / 2.0
        du = (xx - ccx) * ux + (yy - ccy) * uy
        dv = (xx - ccx) * vx + (yy - ccy) * vy
        r = np.sqrt((du / semi_u) ** 2 + (dv / long_semi) ** 2)

        img = base - pool_depth / (1.0 + np.exp((r - 1.0) / 0.05))
        img = img + wall_gain * np.exp(-((r - 1.0 - wall_offset) ** 2) / (2.0 * wall_width**2))
        for p in (pair.inferolateral, pair.anteroseptal):
            d2 = (xx - p.x) ** 2 + (yy - p.y) ** 2
            img = img + glow_gain * np.exp(-d2 / (2.0 * glow_sigma**2))

        if cfg.speckle_strength > 0:
            img = img * np.exp(rng.normal(0.0, cfg.speckle_strength, size=(h, w)))
        img = gaussian_filter(img, sigma=0.7)
        frames[t] = np.clip(img, 0.0, 255.0).astype(np.uint8)

    return CineSequence(
        frames=frames,
        annotations={1: truth[0], k: truth[-1]},
        pixel_spacing=cfg.pixel_spacing,
        hidden_truth=truth,
    )


def _pair_json(pair: LandmarkPair) -> dict:
    return {
        "il": [pair.inferolateral.x, pair.inferolateral.y],
        "al": [pair.anteroseptal.x, pair.anteroseptal.y],
    }


def _pair_from_json(obj) -> LandmarkPair:
    return LandmarkPair(
        Point2(float(obj["il"][0]), float(obj["il"][1])),
        Point2(float(obj["al"][0]), float(obj["al"][1])),
    )


def save_sequence(seq: CineSequence, seq_dir) -> None:
    """Write one sequence in the on-disk schema (lossless round trip)."""
    seq_dir = Path(seq_dir)
    frames_dir = seq_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t in range(1, seq.k + 1):
        Image.fromarray(seq.frame(t), mode="L").save(frames_dir / f"{t:04d}.png")
    annot = {
        "k": seq.k,
        "pixel_spacing_cm": seq.pixel_spacing,
        "annotations": {str(t): _pair_json(pair) for t, pair in sorted(seq.annotations.items())},
    }
    if seq.hidden_truth is not None:
        annot["hidden_truth"] = [
            [[p.inferolateral.x, p.inferolateral.y], [p.anteroseptal.x, p.anteroseptal.y]]
            for p in seq.hidden_truth
        ]
    with open(seq_dir / "annot.json", "w") as f:
        json.dump(annot, f, indent=1)


def load_sequence(seq_dir) -> CineSequence:
    """Read one sequence; inverse of save_sequence."""
    seq_dir = Path(seq_dir)
    annot_path = seq_dir / "annot.json"
    if not annot_path.exists():
        raise MissingAnnotationError(f"no annot.json in {seq_dir}")
    with open(annot_path) as f:
        annot = json.load(f)
    for key in ("k", "pixel_spacing_cm", "annotations"):
        if key not in annot:
            raise MissingAnnotationError(f"{annot_path} lacks required field '{key}'")
    k = int(annot["k"])

    frames = []
    shape = None
    for t in range(1, k + 1):
        frame_path = seq_dir / "frames" / f"{t:04d}.png"
        if not frame_path.exists():
            raise CorruptSequenceError(f"corrupt sequence: missing frame file {frame_path}")
        try:
            with Image.open(frame_path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
        except OSError as exc:
            raise CorruptSequenceError(f"corrupt sequence: unreadable frame file {frame_path}: {exc}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FrameShapeError(
                f"frame {frame_path} has shape {arr.shape}, expected {shape}"
            )
        frames.append(arr)

    annotations = {int(t): _pair_from_json(obj) for t, obj in annot["annotations"].items()}
    hidden = None
    if "hidden_truth" in annot:
        hidden = [
            LandmarkPair(Point2(float(p[0][0]), float(p[0][1])), Point2(float(p[1][0]), float(p[1][1])))
            for p in annot["hidden_truth"]
        ]
    return CineSequence(
        frames=np.stack(frames),
        annotations=annotations,
        pixel_spacing=float(annot["pixel_spacing_cm"]),
        hidden_truth=hidden,
    )


def generate_dataset(cfg: PhantomConfig, n_train: int, n_test: int, out_dir) -> DatasetManifest:
    """Generate and write a dataset with disjoint train/test ids.

    Sequence ids are zero-padded integers; id i is rendered by
    generate_sequence(cfg, i), so regenerating with the same config
    reproduces every byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: dict[str, list[ManifestEntry]] = {"train": [], "test": []}
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        seq_id = f"{i:04d}"
        seq = generate_sequence(cfg, i)
        save_sequence(seq, out_dir / seq_id)
        entries[split].append(ManifestEntry(id=seq_id, k=seq.k, annotated=[1, seq.k]))
    manifest = DatasetManifest(train=entries["train"], test=entries["test"])
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(
            {
                "version": 1,
                "phantom": asdict(cfg),
                "train": [asdict(e) for e in manifest.train],
                "test": [asdict(e) for e in manifest.test],
            },
            f,
            indent=1,
        )
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    with open(path) as f:
        raw = json.load(f)
    return DatasetManifest(
        train=[ManifestEntry(**e) for e in raw["train"]],
        test=[ManifestEntry(**e) for e in raw["test"]],
    )


def load_split(root, split: str) -> list[tuple[str, CineSequence]]:
    """All (id, sequence) pairs of one split, in manifest order."""
    manifest = load_manifest(root)
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    return [(e.id, load_sequence(Path(root) / e.id)) for e in getattr(manifest, split)]

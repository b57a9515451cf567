"""Shared geometry, domain containers, and heatmap math.

Coordinate convention used everywhere in this package: ``x`` is the
column and ``y`` is the row, with the origin at the top-left pixel
center. Landmark coordinates are image-space floats outside the
network; heatmaps and feature maps live at half the image resolution
(``FEATURE_STRIDE``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

# Cumulative downsampling between image space and feature/heatmap space.
FEATURE_STRIDE = 2

# Gaussian target values below this are clamped to zero so targets stay sparse.
GAUSSIAN_FLOOR = 1e-4


class CinetrackError(Exception):
    """Base class for errors raised by this package."""


class OutOfBoundsError(CinetrackError, ValueError):
    """A coordinate fell outside the map it must index."""


def round_half_up(v: float) -> int:
    """Round to the nearest integer with halves going up (2.5 -> 3)."""
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class Point2:
    """A 2-D point or displacement; x = column, y = row, in pixels."""

    x: float
    y: float

    def shifted(self, dx: float, dy: float) -> "Point2":
        return Point2(self.x + dx, self.y + dy)

    def distance_to(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y)


@dataclass(frozen=True)
class Motion2:
    """Per-landmark 2-D displacements for one tracking step."""

    d_i: Point2
    d_a: Point2

    def as_array(self) -> np.ndarray:
        return np.array([[self.d_i.x, self.d_i.y], [self.d_a.x, self.d_a.y]], dtype=float)

    @staticmethod
    def from_array(a) -> "Motion2":
        a = np.asarray(a, dtype=float).reshape(2, 2)
        return Motion2(Point2(float(a[0, 0]), float(a[0, 1])), Point2(float(a[1, 0]), float(a[1, 1])))

    def negated(self) -> "Motion2":
        return Motion2(Point2(-self.d_i.x, -self.d_i.y), Point2(-self.d_a.x, -self.d_a.y))


@dataclass(frozen=True)
class LandmarkPair:
    """The two wall landmarks bounding the chamber internal dimension.

    Row order in array form is (inferolateral, anteroseptal), columns (x, y).
    """

    inferolateral: Point2
    anteroseptal: Point2

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                [self.inferolateral.x, self.inferolateral.y],
                [self.anteroseptal.x, self.anteroseptal.y],
            ],
            dtype=float,
        )

    @staticmethod
    def from_array(a) -> "LandmarkPair":
        a = np.asarray(a, dtype=float).reshape(2, 2)
        return LandmarkPair(Point2(float(a[0, 0]), float(a[0, 1])), Point2(float(a[1, 0]), float(a[1, 1])))

    def shifted(self, motion: Motion2) -> "LandmarkPair":
        return LandmarkPair(
            self.inferolateral.shifted(motion.d_i.x, motion.d_i.y),
            self.anteroseptal.shifted(motion.d_a.x, motion.d_a.y),
        )

    def within(self, width: float, height: float) -> bool:
        return all(
            0 <= p.x <= width - 1 and 0 <= p.y <= height - 1
            for p in (self.inferolateral, self.anteroseptal)
        )

    def is_finite(self) -> bool:
        return self.inferolateral.is_finite() and self.anteroseptal.is_finite()

    def lvid_length(self) -> float:
        """Length of the segment between the two landmarks, in pixels."""
        return self.inferolateral.distance_to(self.anteroseptal)


@dataclass(eq=False)
class CineSequence:
    """An ordered grayscale cine with sparse annotations at frames 1 and k.

    ``frames`` is a (k, H, W) uint8 array indexed 0..k-1 for frames 1..k.
    ``annotations`` maps frame index (1 and k) to the ground-truth pair.
    ``hidden_truth``, when present, holds the true pair for every frame;
    the synthetic generator fills it so per-frame tracking error is
    measurable even though only two frames are annotated.
    """

    frames: np.ndarray
    annotations: dict[int, LandmarkPair]
    pixel_spacing: float
    hidden_truth: Optional[list[LandmarkPair]] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (k, H, W), got shape {self.frames.shape}")
        if self.k < 3:
            raise ValueError(f"a sequence needs at least 3 frames, got {self.k}")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")
        expected = {1, self.k}
        if set(self.annotations) != expected:
            raise ValueError(f"annotations must be at frames {expected}, got {sorted(self.annotations)}")
        h, w = self.frames.shape[1:]
        for t, pair in self.annotations.items():
            if not pair.within(w, h):
                raise OutOfBoundsError(f"annotation at frame {t} lies outside the {h}x{w} image")
        if self.hidden_truth is not None and len(self.hidden_truth) != self.k:
            raise ValueError("hidden_truth must have one pair per frame")

    @property
    def k(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def frame(self, t: int) -> np.ndarray:
        """Frame by 1-based index t in 1..k."""
        if not 1 <= t <= self.k:
            raise IndexError(f"frame index {t} outside 1..{self.k}")
        return self.frames[t - 1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CineSequence):
            return NotImplemented
        return (
            np.array_equal(self.frames, other.frames)
            and self.annotations == other.annotations
            and self.pixel_spacing == other.pixel_spacing
            and self.hidden_truth == other.hidden_truth
        )


@dataclass
class Heatmap:
    """Two-channel spatial score map; channel 0 is inferolateral, 1 anteroseptal."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise ValueError(f"heatmap must be (2, H, W), got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("heatmap scores must lie in [0, 1]")


def nearest_pixel(center: Point2) -> tuple[int, int]:
    """(row, col) of the pixel nearest a point, halves rounding up."""
    return round_half_up(center.y), round_half_up(center.x)


def render_gaussian_target(center: Point2, shape: tuple[int, int], radius: float) -> np.ndarray:
    """Render a single-channel unnormalized Gaussian target map.

    The pixel nearest ``center`` gets exactly 1.0; every other pixel gets
    exp(-(dx^2 + dy^2) / (2 sigma^2)) with sigma = radius / 3, measured
    from that pixel. Values below ``GAUSSIAN_FLOOR`` are zeroed. The map
    is not normalized to sum to one.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    hh, ww = int(shape[0]), int(shape[1])
    row, col = nearest_pixel(center)
    if not (0 <= row < hh and 0 <= col < ww):
        raise OutOfBoundsError(
            f"target center ({center.x}, {center.y}) falls on pixel (row={row}, col={col}) "
            f"outside a {hh}x{ww} map"
        )
    sigma = radius / 3.0
    dy = np.arange(hh, dtype=np.float64) - row
    dx = np.arange(ww, dtype=np.float64) - col
    g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma * sigma))
    g[g < GAUSSIAN_FLOOR] = 0.0
    g[row, col] = 1.0
    return g


def heatmap_argmax(heatmap) -> tuple[LandmarkPair, tuple[bool, bool]]:
    """Per-channel maximum locations as a pair in heatmap coordinates.

    Ties resolve to the smallest row-major index. A fully degenerate
    channel (all scores equal) yields (0, 0) and sets its flag, so the
    caller can distinguish a confident peak from a flat map. Invariant
    under any strictly monotone per-channel rescaling of the scores.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    if not isinstance(values, np.ndarray):
        values = values.detach().cpu().numpy() if hasattr(values, "detach") else np.asarray(values)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or values.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) heatmap, got shape {values.shape}")
    points = []
    flags = []
    for channel in values:
        degenerate = bool(channel.max() == channel.min())
        if degenerate:
            row, col = 0, 0
        else:
            row, col = np.unravel_index(int(np.argmax(channel)), channel.shape)
        points.append(Point2(float(col), float(row)))
        flags.append(degenerate)
    return LandmarkPair(points[0], points[1]), (flags[0], flags[1])


def map_coords(p: Point2, from_space: str, to_space: str) -> Point2:
    """Convert a point between image and feature/heatmap resolution.

    image -> feature divides both coordinates by the encoder stride and
    rounds to the nearest integer cell (halves up); feature -> image
    multiplies by the stride (center-of-cell convention).
    """
    spaces = {"image", "feature"}
    if from_space not in spaces or to_space not in spaces:
        raise ValueError(f"spaces must be one of {spaces}")
    if from_space == to_space:
        raise ValueError("from_space and to_space must differ")
    if from_space == "image":
        return Point2(
            float(round_half_up(p.x / FEATURE_STRIDE)),
            float(round_half_up(p.y / FEATURE_STRIDE)),
        )
    return Point2(p.x * FEATURE_STRIDE, p.y * FEATURE_STRIDE)


def pair_to_feature_cells(pair: LandmarkPair) -> list[tuple[int, int]]:
    """Integer (row, col) feature cells for both landmarks of an image-space pair."""
    cells = []
    for p in (pair.inferolateral, pair.anteroseptal):
        f = map_coords(p, "image", "feature")
        cells.append((int(f.y), int(f.x)))
    return cells

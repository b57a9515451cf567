"""Trainable components: shared encoder, detection head, tracking head.

The encoder is shared by both heads; its parameters, the detector's,
and the tracker's form three disjoint groups so the trainer can freeze
and update them independently.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import pickle
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import CinetrackError, FEATURE_STRIDE, LandmarkPair, round_half_up

TEMPLATE_SIZE = 25
SEARCH_SIZE = 29
AFFINITY_SIZE = SEARCH_SIZE - TEMPLATE_SIZE + 1  # valid correlation -> 5x5
N_LANDMARKS = 2

ENCODER_CHANNELS = (16, 16, 32, 32, 32, 32)
HEAD_STAGE_CHANNELS = (64, 128)
PRECLASS_CHANNELS = 48
FC_HIDDEN = (64, 32)

CHECKPOINT_VERSION = 1


class ShapeError(CinetrackError, ValueError):
    """An input's spatial size is incompatible with the network geometry."""


class FeatureEncoder(nn.Module):
    """Six 3x3 convolutions, ReLU after each, stride 2 on the third.

    Input is a (B, 1, H, W) batch normalized to [0, 1]; output spatial
    size is exactly half the input.
    """

    def __init__(self, channels=ENCODER_CHANNELS, in_channels: int = 1):
        super().__init__()
        convs = []
        prev = in_channels
        for i, ch in enumerate(channels):
            stride = 2 if i == 2 else 1
            convs.append(nn.Conv2d(prev, ch, kernel_size=3, stride=stride, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.out_channels = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"encoder input must have even H and W, got {tuple(x.shape[-2:])}")
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


class DetectionHead(nn.Module):
    """Contracting/expansive refinement of shared features into a heatmap.

    Six further convolutions with two stride-2, channel-doubling stages,
    then two 2x2 up-convolutions that halve channels and concatenate the
    matching contracting features, a 3x3 convolution to 48 channels, and
    a 1x1 classifier to one channel per landmark. Scores are squashed to
    [0, 1]; output spatial size equals the feature size.
    """

    def __init__(self, in_channels: int = ENCODER_CHANNELS[-1], stage_channels=HEAD_STAGE_CHANNELS,
                 preclass: int = PRECLASS_CHANNELS):
        super().__init__()
        c0 = in_channels
        c1, c2 = stage_channels
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down1b = nn.Conv2d(c1, c1, 3, padding=1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2b = nn.Conv2d(c2, c2, 3, padding=1)
        self.down2c = nn.Conv2d(c2, c2, 3, padding=1)
        self.down2d = nn.Conv2d(c2, c2, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.fuse1 = nn.Conv2d(2 * c1, c1, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(c1, c0, 2, stride=2)
        self.fuse2 = nn.Conv2d(2 * c0, preclass, 3, padding=1)
        self.classify = nn.Conv2d(preclass, N_LANDMARKS, 1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[-1] % 4 or feat.shape[-2] % 4:
            raise ShapeError(f"detection head needs H and W divisible by 4, got {tuple(feat.shape[-2:])}")
        skip0 = feat
        x = F.relu(self.down1(feat))
        skip1 = F.relu(self.down1b(x))
        x = F.relu(self.down2(skip1))
        x = F.relu(self.down2b(x))
        x = F.relu(self.down2c(x))
        x = F.relu(self.down2d(x))
        x = self.up1(x)
        x = F.relu(self.fuse1(torch.cat([x, skip1], dim=1)))
        x = self.up2(x)
        x = F.relu(self.fuse2(torch.cat([x, skip0], dim=1)))
        return torch.sigmoid(self.classify(x))


@dataclass
class PatchPair:
    """Template and search feature crops for one tracking step.

    Channels hold both landmarks' patches concatenated, inferolateral
    first. The template must be strictly smaller than the search region.
    """

    template: torch.Tensor
    search: torch.Tensor

    def __post_init__(self):
        th, tw = self.template.shape[-2:]
        sh, sw = self.search.shape[-2:]
        if not (th < sh and tw < sw):
            raise ShapeError(f"template {th}x{tw} must be strictly smaller than search {sh}x{sw}")


def cross_correlate(template: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Valid sliding dot-product of each landmark's template over its search region.

    Channels split evenly between the two landmarks; the result is a
    (2, 5, 5) affinity map for the standard 25/29 patch sizes.
    """
    c2 = template.shape[0]
    if c2 % N_LANDMARKS:
        raise ShapeError("patch channels must split evenly between the two landmarks")
    weight = template.reshape(N_LANDMARKS, c2 // N_LANDMARKS, *template.shape[-2:])
    return F.conv2d(search.unsqueeze(0), weight, groups=N_LANDMARKS).squeeze(0)


def _crop(feat: torch.Tensor, row: int, col: int, size: int) -> torch.Tensor:
    """(C, size, size) crop of a (C, H, W) map centered at (row, col), zero padded."""
    half = size // 2
    c, h, w = feat.shape
    out = feat.new_zeros((c, size, size))
    r0, c0 = row - half, col - half
    fr0, fc0 = max(r0, 0), max(c0, 0)
    fr1, fc1 = min(r0 + size, h), min(c0 + size, w)
    if fr0 < fr1 and fc0 < fc1:
        out[:, fr0 - r0:fr1 - r0, fc0 - c0:fc1 - c0] = feat[:, fr0:fr1, fc0:fc1]
    return out


def feature_cells(centers) -> list[tuple[int, int]]:
    """Integer (row, col) feature cells for image-space centers.

    Accepts a LandmarkPair or a (2, 2) array/tensor of (x, y) rows.
    Tensor inputs are detached: crop locations are constants for
    differentiation.
    """
    if isinstance(centers, LandmarkPair):
        a = centers.as_array()
    elif torch.is_tensor(centers):
        a = centers.detach().cpu().numpy()
    else:
        a = np.asarray(centers, dtype=float)
    a = a.reshape(2, 2)
    return [
        (round_half_up(y / FEATURE_STRIDE), round_half_up(x / FEATURE_STRIDE))
        for x, y in a
    ]


def crop_patches(feat_prev: torch.Tensor, feat_cur: torch.Tensor, centers_prev) -> PatchPair:
    """Crop the template stack from the previous frame's features and the
    search stack from the current frame's, both centered at the previous
    landmark positions (image space). Crops overrunning the border are
    zero padded, so every center is croppable.
    """
    cells = feature_cells(centers_prev)
    template = torch.cat([_crop(feat_prev, r, c, TEMPLATE_SIZE) for r, c in cells])
    search = torch.cat([_crop(feat_cur, r, c, SEARCH_SIZE) for r, c in cells])
    return PatchPair(template, search)


class TrackingHead(nn.Module):
    """Cross-correlation affinity plus a three-layer regressor.

    The flattened (2, 5, 5) affinity map feeds fully connected layers
    50 -> 64 -> 32 -> 4 producing the two landmark displacements in
    feature units (callers scale by the stride for image space). Raw
    affinities are O(patch numel), so a fixed scale keeps the FC input
    tame.
    """

    def __init__(self, feature_channels: int = ENCODER_CHANNELS[-1], hidden=FC_HIDDEN):
        super().__init__()
        n_in = N_LANDMARKS * AFFINITY_SIZE * AFFINITY_SIZE
        self.fc1 = nn.Linear(n_in, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], 2 * N_LANDMARKS)
        self.affinity_scale = float(feature_channels * TEMPLATE_SIZE * TEMPLATE_SIZE)

    def forward(self, pp: PatchPair) -> torch.Tensor:
        aff = cross_correlate(pp.template, pp.search)
        x = aff.reshape(1, -1) / self.affinity_scale
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x).reshape(N_LANDMARKS, 2)


class LandmarkNet(nn.Module):
    """Encoder, detector, and tracker with a disjoint parameter partition."""

    def __init__(self, encoder: FeatureEncoder | None = None,
                 detector: DetectionHead | None = None,
                 tracker: TrackingHead | None = None):
        super().__init__()
        self.encoder = encoder or FeatureEncoder()
        self.detector = detector or DetectionHead(in_channels=self.encoder.out_channels)
        self.tracker = tracker or TrackingHead(feature_channels=self.encoder.out_channels)
        self._check_partition()

    def _check_partition(self):
        groups = self.parameter_groups()
        ids = [id(p) for group in groups.values() for p in group]
        assert len(ids) == len(set(ids)), "parameter groups overlap"
        assert len(ids) == sum(1 for _ in self.parameters()), "parameter groups miss parameters"

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint, exhaustive handles to the encoder/detector/tracker parameters."""
        return {
            "encoder": list(self.encoder.parameters()),
            "detector": list(self.detector.parameters()),
            "tracker": list(self.tracker.parameters()),
        }

    def encode_frames(self, frames) -> torch.Tensor:
        """Encode a (k, H, W) stack (uint8 or float in [0, 1]) to (k, C, H/2, W/2)."""
        if torch.is_tensor(frames):
            x = frames.to(torch.float32)
        else:
            x = torch.from_numpy(np.ascontiguousarray(frames)).to(torch.float32)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.max() > 1.5:
            x = x / 255.0
        return self.encoder(x.unsqueeze(1))


def parameter_groups(model: LandmarkNet) -> dict[str, list[nn.Parameter]]:
    return model.parameter_groups()


def _init_module(module: nn.Module, gen: torch.Generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = nn.init._calculate_correct_fan(m.weight, "fan_in")
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


HEATMAP_PRIOR = 0.1


def build_model(seed: int = 0) -> LandmarkNet:
    """Construct a LandmarkNet with fan-in scaled init, reproducibly from a seed.

    The heatmap classifier's bias starts at the logit of a small positive
    prior instead of zero: with 2 positive pixels per ~2000, a 0.5 initial
    heatmap puts such violent downward pressure on the logits that the
    sigmoid can saturate beyond recovery before the positives speak up.
    """
    model = LandmarkNet()
    gen = torch.Generator().manual_seed(int(seed))
    _init_module(model, gen)
    with torch.no_grad():
        prior_logit = math.log(HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR))
        model.detector.classify.bias.fill_(prior_logit)
    return model


def config_hash(config) -> str:
    """Stable hash of any JSON-serializable configuration object."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _group_arrays(model: LandmarkNet) -> dict[str, dict[str, np.ndarray]]:
    groups: dict[str, dict[str, np.ndarray]] = {}
    for name, module in (("encoder", model.encoder), ("detector", model.detector), ("tracker", model.tracker)):
        groups[name] = {
            key: value.detach().cpu().numpy().copy()
            for key, value in module.state_dict().items()
        }
    return groups


def save_checkpoint(model: LandmarkNet, path, *, config_hash: str = "", epoch: int = 0, extra=None):
    """Write the three named parameter groups to one file, atomically.

    The payload is a pickled dict of numpy arrays with mandatory
    ``version`` and ``config_hash`` fields; identical models produce
    byte-identical files.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "epoch": int(epoch),
        "groups": _group_arrays(model),
        "extra": extra or {},
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        pickle.dump(payload, f, protocol=4)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if "version" not in payload:
        raise CinetrackError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CinetrackError(f"unsupported checkpoint version {payload['version']}")
    return payload


def load_into(model: LandmarkNet, payload: dict) -> LandmarkNet:
    """Load a checkpoint payload's parameter groups into a model."""
    for name, module in (("encoder", model.encoder), ("detector", model.detector), ("tracker", model.tracker)):
        state = {key: torch.from_numpy(np.array(value)) for key, value in payload["groups"][name].items()}
        module.load_state_dict(state)
    return model


def load_model(path) -> tuple[LandmarkNet, dict]:
    """Build a default-architecture model and fill it from a checkpoint file."""
    payload = load_checkpoint(path)
    model = LandmarkNet()
    load_into(model, payload)
    return model, payload

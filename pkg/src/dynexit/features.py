"""Backbone stages and feature plumbing.

A "video" here is a sequence of per-frame feature vectors.  The backbone is a
stack of per-frame two-layer affine transforms; every stage keeps per-frame
independence so that frames can be dropped and re-packed between stages
without changing the features of the survivors.  Multi-scale aggregation
stacks the per-stage features of the scales computed so far, and window
unfolding cuts the sequence into centered local windows with replicate edge
padding.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, ConfigurationError, DataError

_ACTIVATIONS = {
    "silu": torch.nn.functional.silu,
    "identity": lambda x: x,
}


def resolve_activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigurationError(f"unknown activation '{name}'") from None


@dataclass
class FrameFeatureSequence:
    """Per-frame feature matrix at one backbone depth.

    ``data`` is ``[T_cur, C]``; ``origin_timestamps`` maps each row back to
    its position in the original length-T video and survives compaction.
    """

    data: torch.Tensor
    stage_index: int
    origin_timestamps: np.ndarray

    def __post_init__(self):
        self.origin_timestamps = np.asarray(self.origin_timestamps, dtype=np.int64)
        if self.data.ndim != 2:
            raise ConfigurationError(f"feature data must be 2-d, got shape {tuple(self.data.shape)}")
        if len(self.origin_timestamps) != self.data.shape[0]:
            raise AlignmentError(
                f"{len(self.origin_timestamps)} origin timestamps for {self.data.shape[0]} rows"
            )
        if len(self.origin_timestamps) > 1 and not np.all(np.diff(self.origin_timestamps) > 0):
            raise AlignmentError("origin timestamps must be strictly increasing")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature data contains non-finite entries")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


class BackboneStage(nn.Module):
    """One per-frame backbone stage: affine -> activation -> affine -> activation.

    The stage acts on each frame independently; ``flops_per_frame`` is the
    analytic multiply-accumulate count of the two affine layers (biases and
    the elementwise activation are not counted as MACs).
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: str = "silu"):
        super().__init__()
        self.lin1 = nn.Linear(in_dim, hidden_dim)
        self.lin2 = nn.Linear(hidden_dim, out_dim)
        self.activation_name = activation
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim

    @property
    def flops_per_frame(self) -> int:
        return self.in_dim * self.hidden_dim + self.hidden_dim * self.out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        act = resolve_activation(self.activation_name)
        return act(self.lin2(act(self.lin1(x))))


def run_stage(seq: FrameFeatureSequence, stage: BackboneStage) -> FrameFeatureSequence:
    """Apply one backbone stage to every retained frame.

    Row count and origins are untouched; only the feature content and the
    stage counter change.
    """
    if seq.channels != stage.in_dim:
        raise ConfigurationError(
            f"stage expects {stage.in_dim} input channels, sequence has {seq.channels}"
        )
    with torch.no_grad():
        out = stage(seq.data)
    return FrameFeatureSequence(
        data=out,
        stage_index=seq.stage_index + 1,
        origin_timestamps=seq.origin_timestamps.copy(),
    )


@dataclass
class MultiScaleFeature:
    """Stacked per-stage features, ``[T, scale_count, C]``."""

    data: torch.Tensor
    scale_count: int = field(init=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ConfigurationError(f"multi-scale data must be 3-d, got {tuple(self.data.shape)}")
        self.scale_count = self.data.shape[1]


def aggregate_scales(pooled_stages: list[FrameFeatureSequence], scale_count: int) -> MultiScaleFeature:
    """Stack the features of scales ``1..scale_count`` into ``[T, l, C]``.

    All inputs must cover exactly the same frames in the same order.
    """
    if len(pooled_stages) != scale_count:
        raise ConfigurationError(f"expected {scale_count} stage sequences, got {len(pooled_stages)}")
    ref = pooled_stages[0]
    for seq in pooled_stages[1:]:
        if seq.channels != ref.channels:
            raise AlignmentError("stage sequences disagree on channel count")
        if len(seq) != len(ref) or not np.array_equal(seq.origin_timestamps, ref.origin_timestamps):
            raise AlignmentError("stage sequences disagree on origin timestamps")
    stacked = torch.stack([seq.data for seq in pooled_stages], dim=1)
    return MultiScaleFeature(data=stacked)


@dataclass
class WindowTensor:
    """Centered local windows, ``[T, l, C, t_w]`` with replicate edge padding."""

    data: torch.Tensor
    half_width: int

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigurationError(f"window tensor must be 4-d, got {tuple(self.data.shape)}")
        if self.data.shape[-1] != 2 * self.half_width + 1:
            raise ConfigurationError("window axis length must be 2k+1")

    @property
    def window_len(self) -> int:
        return 2 * self.half_width + 1


def unfold_window_axis(x: torch.Tensor, k: int) -> torch.Tensor:
    """Unfold the leading time axis of ``[T, ...]`` into ``[T, ..., 2k+1]``.

    Window offset ``o`` at timestamp ``t`` reads position ``clamp(t-k+o, 0, T-1)``,
    so edge windows replicate the first/last frame.
    """
    if k < 1:
        raise ConfigurationError("window half-width k must be >= 1")
    T = x.shape[0]
    idx = torch.arange(T).unsqueeze(1) + torch.arange(-k, k + 1).unsqueeze(0)
    idx = idx.clamp_(0, T - 1)
    windows = x[idx]  # [T, t_w, ...]
    return windows.movedim(1, -1)


def unfold_windows(r: MultiScaleFeature, k: int) -> WindowTensor:
    """Cut ``[T, l, C]`` into centered windows ``[T, l, C, 2k+1]``."""
    return WindowTensor(data=unfold_window_axis(r.data, k), half_width=k)


# ---------------------------------------------------------------------------
# Feature file format: raw little-endian float32, row-major [T, C], plus a
# JSON sidecar {"T", "C", "fps", "video_id"} next to it.
# ---------------------------------------------------------------------------


def feature_paths(directory: str, video_id: str) -> tuple[str, str]:
    return os.path.join(directory, f"{video_id}.f32"), os.path.join(directory, f"{video_id}.json")


def write_feature_file(directory: str, video_id: str, data: np.ndarray, fps: float) -> None:
    """Write one video's features atomically (temp file + rename)."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise DataError(f"feature array for {video_id} must be 2-d")
    raw_path, meta_path = feature_paths(directory, video_id)
    os.makedirs(directory, exist_ok=True)
    sidecar = {"T": int(data.shape[0]), "C": int(data.shape[1]), "fps": float(fps), "video_id": video_id}
    for path, payload in ((raw_path, data.tobytes()), (meta_path, json.dumps(sidecar, sort_keys=True).encode())):
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)


def read_feature_file(directory: str, video_id: str) -> tuple[np.ndarray, dict]:
    """Load one video's features and sidecar metadata."""
    raw_path, meta_path = feature_paths(directory, video_id)
    if not os.path.exists(raw_path) or not os.path.exists(meta_path):
        raise DataError(f"missing feature file for video '{video_id}' in {directory}")
    with open(meta_path, "r") as fh:
        meta = json.load(fh)
    data = np.fromfile(raw_path, dtype="<f4")
    expected = meta["T"] * meta["C"]
    if data.size != expected:
        raise DataError(
            f"feature file for '{video_id}' has {data.size} floats, sidecar promises {expected}"
        )
    return data.reshape(meta["T"], meta["C"]).astype(np.float32), meta

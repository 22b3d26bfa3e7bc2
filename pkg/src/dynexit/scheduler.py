"""Dynamic inference: peak estimation, partial exits, padding, and accounting.

The engine walks the backbone depth-first per video.  After each stage it
scores the (repeat-padded) full-length sequence with that depth's detector,
records peaks that fall on genuinely computed frames, drops a radius of
frames around each recorded boundary, and re-packs the survivors for the next
stage.  Backbone compute is charged on survivors only; detector compute is
charged on the full padded length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from .detector import DetectorConfig, ScoreSequence
from .errors import ConfigurationError
from .features import FrameFeatureSequence


def estimate_peaks(p: ScoreSequence | np.ndarray, threshold: float) -> np.ndarray:
    """Strict interior local maxima above ``threshold``.

    Endpoints have only one neighbor and are never eligible; plateaus fail
    the strict comparisons.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("peak threshold must lie in (0, 1)")
    values = p.values if isinstance(p, ScoreSequence) else np.asarray(p, dtype=np.float64)
    if len(values) < 3:
        return np.zeros(0, dtype=np.int64)
    mid = values[1:-1]
    hits = (mid > values[:-2]) & (mid > values[2:]) & (mid > threshold)
    return np.flatnonzero(hits).astype(np.int64) + 1


@dataclass
class ExitMask:
    """Keep/drop flags over origin positions: 0 marks frames that exit."""

    keep: np.ndarray
    detector_index: int

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=np.uint8)
        if not np.isin(self.keep, (0, 1)).all():
            raise ConfigurationError("exit mask entries must be 0 or 1")


def build_exit_mask(boundaries, exit_radius: int, length: int, detector_index: int = 1) -> ExitMask:
    """Drop every frame within ``exit_radius`` of a boundary (intervals clamped)."""
    keep = np.ones(length, dtype=np.uint8)
    for b in boundaries:
        if not 0 <= b < length:
            raise ConfigurationError(f"boundary {b} outside [0, {length})")
        lo = max(0, int(b) - exit_radius)
        hi = min(length - 1, int(b) + exit_radius)
        keep[lo : hi + 1] = 0
    return ExitMask(keep=keep, detector_index=detector_index)


def compact(seq: FrameFeatureSequence, mask: ExitMask) -> FrameFeatureSequence:
    """Drop the rows whose origin position is masked out, preserving order."""
    keep_rows = mask.keep[seq.origin_timestamps].astype(bool)
    return FrameFeatureSequence(
        data=seq.data[torch.from_numpy(np.flatnonzero(keep_rows))],
        stage_index=seq.stage_index,
        origin_timestamps=seq.origin_timestamps[keep_rows],
    )


def pad_to_full(seq: FrameFeatureSequence, length: int) -> tuple[torch.Tensor, dict[int, int]]:
    """Repeat-pad a compacted sequence back to full length.

    Every missing origin position takes the features of the nearest kept
    frame (ties go to the earlier frame).  Returns the padded ``[T, C]``
    tensor and a map from padded position to its source frame.
    """
    if len(seq) == 0:
        raise ConfigurationError("cannot pad an empty sequence; skip the stage instead")
    kept = seq.origin_timestamps
    positions = np.arange(length)
    right = np.searchsorted(kept, positions)
    left = np.clip(right - 1, 0, len(kept) - 1)
    right = np.clip(right, 0, len(kept) - 1)
    dist_left = np.abs(positions - kept[left])
    dist_right = np.abs(kept[right] - positions)
    source_idx = np.where(dist_left <= dist_right, left, right)
    padded = seq.data[torch.from_numpy(source_idx)]
    kept_set = set(int(t) for t in kept)
    provenance = {
        int(pos): int(kept[source_idx[pos]]) for pos in positions if int(pos) not in kept_set
    }
    return padded, provenance


@dataclass
class FlopsLedger:
    """Per-stage multiply-accumulate accounting for one video."""

    backbone_macs: list[int] = field(default_factory=list)
    detector_macs: list[int] = field(default_factory=list)
    frames_processed: list[int] = field(default_factory=list)

    def total(self) -> int:
        return sum(self.backbone_macs) + sum(self.detector_macs)

    def per_stage_totals(self) -> list[int]:
        return [b + d for b, d in zip(self.backbone_macs, self.detector_macs)]


@dataclass
class ExitState:
    """Exit bookkeeping for one video."""

    exit_stage: np.ndarray
    recorded_boundaries: dict[int, list[int]]
    pad_provenance: dict[int, dict[int, int]]
    final_scores: np.ndarray

    def validate(self, num_stages: int) -> None:
        """Raise if the partition / suppression invariants are broken."""
        length = len(self.exit_stage)
        if not np.all((self.exit_stage >= 1) & (self.exit_stage <= num_stages)):
            raise AssertionError("every frame must exit at a stage in [1, L]")
        seen: set[int] = set()
        for stage, bounds in self.recorded_boundaries.items():
            padded_here = self.pad_provenance.get(stage, {})
            for b in bounds:
                if b in padded_here:
                    raise AssertionError(f"boundary {b} recorded at stage {stage} on a padded frame")
                if b in seen:
                    raise AssertionError(f"boundary {b} recorded by two detectors")
                seen.add(b)
        if len(self.final_scores) != length:
            raise AssertionError("final scores must cover every frame")


class InferenceModel(Protocol):
    """What the engine needs from a model (satisfied by MultiExitModel)."""

    num_stages: int

    def apply_stage(self, l: int, x: torch.Tensor) -> torch.Tensor: ...
    def stage_flops_per_frame(self, l: int) -> int: ...
    def detector_flops_per_frame(self, l: int) -> int: ...
    def detector_scores(self, l: int, scale_features: list[torch.Tensor]) -> ScoreSequence: ...


def run_dynamic_inference(
    features: FrameFeatureSequence,
    model: InferenceModel,
    detector_cfgs: list[DetectorConfig],
    validate: bool = False,
) -> tuple[list[int], ExitState, FlopsLedger]:
    """Multi-exit inference over one video.

    Returns the sorted union of recorded boundaries, the per-frame exit
    bookkeeping, and the MAC ledger.
    """
    num_stages = model.num_stages
    if len(detector_cfgs) != num_stages:
        raise ConfigurationError(f"need {num_stages} detector configs, got {len(detector_cfgs)}")
    length = len(features)
    ledger = FlopsLedger()
    exit_stage = np.full(length, num_stages, dtype=np.int64)
    final_scores = np.zeros(length, dtype=np.float64)
    recorded: dict[int, list[int]] = {}
    provenance_by_stage: dict[int, dict[int, int]] = {}
    scale_features: list[torch.Tensor] = []
    kept = features

    for l in range(1, num_stages + 1):
        if len(kept) == 0:
            ledger.backbone_macs.append(0)
            ledger.detector_macs.append(0)
            ledger.frames_processed.append(0)
            recorded[l] = []
            continue
        with torch.no_grad():
            kept = FrameFeatureSequence(
                data=model.apply_stage(l, kept.data),
                stage_index=kept.stage_index + 1,
                origin_timestamps=kept.origin_timestamps,
            )
        ledger.frames_processed.append(len(kept))
        ledger.backbone_macs.append(len(kept) * model.stage_flops_per_frame(l))

        padded, provenance = pad_to_full(kept, length)
        provenance_by_stage[l] = provenance
        scale_features.append(padded)

        scores = model.detector_scores(l, scale_features)
        ledger.detector_macs.append(length * model.detector_flops_per_frame(l))

        cfg = detector_cfgs[l - 1]
        peaks = estimate_peaks(scores, cfg.exit_threshold)
        peaks = [int(b) for b in peaks if int(b) not in provenance]
        recorded[l] = peaks
        for b in peaks:
            final_scores[b] = scores.values[b]

        if l < num_stages:
            mask = build_exit_mask(peaks, cfg.exit_radius, length, detector_index=l)
            exiting = kept.origin_timestamps[mask.keep[kept.origin_timestamps] == 0]
            exit_stage[exiting] = l
            final_scores[exiting] = scores.values[exiting]
            kept = compact(kept, mask)
        else:
            survivors = kept.origin_timestamps
            final_scores[survivors] = scores.values[survivors]

    all_bounds = sorted(b for bounds in recorded.values() for b in bounds)
    state = ExitState(
        exit_stage=exit_stage,
        recorded_boundaries=recorded,
        pad_provenance=provenance_by_stage,
        final_scores=final_scores,
    )
    if validate:
        state.validate(num_stages)
        if len(set(all_bounds)) != len(all_bounds):
            raise AssertionError("recorded boundaries overlap across detectors")
    return all_bounds, state, ledger

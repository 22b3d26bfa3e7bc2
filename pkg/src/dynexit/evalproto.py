"""Boundary detection scoring: relative-distance matching and F1 reports.

A detection matches an annotated boundary when their time gap divided by the
video duration stays below a threshold.  Detections are matched one-to-one
against each human rater separately; per video the rater giving the highest
F1 counts, and corpus scores accumulate those per-video counts over a sweep
of thresholds.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 11))


@dataclass
class AnnotationSet:
    """All raters' boundary timestamps (seconds) for one video."""

    video_id: str
    duration_seconds: float
    fps: float
    raters: list[list[float]]

    def __post_init__(self):
        if self.duration_seconds <= 0:
            raise DataError(f"{self.video_id}: duration must be positive")
        if self.fps <= 0:
            raise DataError(f"{self.video_id}: fps must be positive")
        if not self.raters:
            raise DataError(f"{self.video_id}: need at least one rater")
        self.raters = [sorted(float(t) for t in r) for r in self.raters]
        for r in self.raters:
            if r and (r[0] < 0 or r[-1] > self.duration_seconds):
                raise DataError(f"{self.video_id}: rater timestamps outside [0, duration]")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return 1.0  # no detections, no ground truth: perfect agreement
        return 2 * self.tp / denom


def rel_dis(detected: float, truth: float, duration: float) -> float:
    """Timestamp error normalized by the video duration."""
    if duration <= 0:
        raise DataError("duration must be positive")
    return abs(detected - truth) / duration


def match_boundaries(dets, gts, threshold: float, duration: float) -> MatchResult:
    """Maximum one-to-one matching under the relative-distance constraint.

    Both lists must be sorted.  The greedy in-order scan (each detection
    takes the earliest unmatched compatible ground truth) attains maximum
    cardinality for this interval compatibility structure; the test suite
    checks it against brute-force maximum matching.
    """
    dets = list(dets)
    gts = list(gts)
    tol = threshold * duration
    pairs: list[tuple[int, int]] = []
    j = 0
    for i, det in enumerate(dets):
        while j < len(gts) and gts[j] < det - tol:
            j += 1
        if j < len(gts) and abs(det - gts[j]) <= tol:
            pairs.append((i, j))
            j += 1
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp, matched_pairs=pairs)


def video_f1(dets, annotations: AnnotationSet, threshold: float) -> tuple[MatchResult, int]:
    """Score against every rater and keep the best F1 (ties: lowest index)."""
    dets = sorted(dets)
    best: MatchResult | None = None
    best_rater = 0
    for idx, rater in enumerate(annotations.raters):
        result = match_boundaries(dets, rater, threshold, annotations.duration_seconds)
        if best is None or result.f1 > best.f1:
            best = result
            best_rater = idx
    return best, best_rater


@dataclass
class EvalReport:
    """Corpus metrics per relative-distance threshold plus their mean."""

    thresholds: list[float]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    rater_selections: dict[str, dict[float, int]]

    @property
    def average_f1(self) -> float:
        return float(np.mean(self.f1))

    def f1_at(self, threshold: float) -> float:
        return self.f1[self.thresholds.index(threshold)]

    def to_csv(self, path: str) -> None:
        tmp = path + ".tmp"
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f1"])
            for t, p, r, f in zip(self.thresholds, self.precision, self.recall, self.f1):
                writer.writerow([f"{t:.2f}", f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
            writer.writerow(
                [
                    "avg",
                    f"{float(np.mean(self.precision)):.6f}",
                    f"{float(np.mean(self.recall)):.6f}",
                    f"{self.average_f1:.6f}",
                ]
            )
        os.replace(tmp, path)


def corpus_eval(
    predictions: dict[str, list[float]],
    annotations: dict[str, AnnotationSet],
    thresholds=DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Accumulate best-rater counts of every video at every threshold."""
    missing = sorted(set(predictions) - set(annotations))
    if missing:
        raise DataError(f"predictions without annotations: {missing}")
    thresholds = [float(t) for t in thresholds]
    precisions, recalls, f1s = [], [], []
    selections: dict[str, dict[float, int]] = {vid: {} for vid in predictions}
    for threshold in thresholds:
        tp = fp = fn = 0
        for vid in sorted(predictions):
            result, rater = video_f1(predictions[vid], annotations[vid], threshold)
            selections[vid][threshold] = rater
            tp += result.tp
            fp += result.fp
            fn += result.fn
        precisions.append(tp / (tp + fp) if tp + fp else 0.0)
        recalls.append(tp / (tp + fn) if tp + fn else 0.0)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 1.0)
    return EvalReport(
        thresholds=thresholds,
        precision=precisions,
        recall=recalls,
        f1=f1s,
        rater_selections=selections,
    )


def frame_to_seconds(frame: int, fps: float) -> float:
    """Frame-center convention: frame ``t`` sits at ``(t + 0.5) / fps`` seconds."""
    return (frame + 0.5) / fps


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_predictions(path: str, predictions: dict[str, list[float]]) -> None:
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w") as fh:
        json.dump({k: list(map(float, v)) for k, v in sorted(predictions.items())}, fh,
                  sort_keys=True, indent=1)
    os.replace(tmp, path)


def read_predictions(path: str) -> dict[str, list[float]]:
    if not os.path.exists(path):
        raise DataError(f"prediction file not found: {path}")
    with open(path) as fh:
        return {k: [float(t) for t in v] for k, v in json.load(fh).items()}


def write_annotations(path: str, annotations: dict[str, AnnotationSet]) -> None:
    payload = {
        ann.video_id: {"duration": ann.duration_seconds, "fps": ann.fps, "raters": ann.raters}
        for ann in annotations.values()
    }
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    os.replace(tmp, path)


def read_annotations(path: str) -> dict[str, AnnotationSet]:
    if not os.path.exists(path):
        raise DataError(f"annotation file not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    return {
        vid: AnnotationSet(
            video_id=vid,
            duration_seconds=entry["duration"],
            fps=entry["fps"],
            raters=entry["raters"],
        )
        for vid, entry in raw.items()
    }

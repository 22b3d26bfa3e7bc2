"""Soft labels, weighted multi-detector BCE, and the optimization loop.

Training always runs the full sequence through every active detector;
partial exit is an inference-time mechanism only.  Targets are Gaussian
bumps around annotated boundaries, truncated to the detector window and
merged by element-wise max so overlapping boundaries never push a target
above one.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import AlignmentError, ConfigurationError, NumericFault
from .model import MultiExitModel


@dataclass
class SoftLabelSequence:
    values: np.ndarray
    source_boundaries: list[int]
    sigma: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any((self.values < 0) | (self.values > 1)):
            raise ConfigurationError("soft labels must lie in [0, 1]")


def make_soft_labels(boundaries, length: int, sigma: float, window: int) -> SoftLabelSequence:
    """Peak-normalized Gaussian bump per boundary, truncated to the window.

    Every boundary contributes ``exp(-d^2 / (2 sigma^2))`` up to distance
    ``(window - 1) // 2``; overlaps combine by max so peaks stay exactly 1.
    """
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    boundaries = [int(b) for b in boundaries]
    for b in boundaries:
        if not 0 <= b < length:
            raise ConfigurationError(f"boundary {b} outside [0, {length})")
    radius = (window - 1) // 2
    values = np.zeros(length, dtype=np.float64)
    t = np.arange(length)
    for b in boundaries:
        d = np.abs(t - b)
        bump = np.where(d <= radius, np.exp(-(d.astype(np.float64) ** 2) / (2 * sigma**2)), 0.0)
        values = np.maximum(values, bump)
    return SoftLabelSequence(values=values, source_boundaries=sorted(boundaries), sigma=sigma)


def detector_loss(p: torch.Tensor, y: torch.Tensor, diagnostics: bool = False) -> torch.Tensor:
    """Mean binary cross entropy of probabilities ``p`` against soft targets ``y``."""
    if p.shape != y.shape:
        raise AlignmentError(f"score shape {tuple(p.shape)} vs label shape {tuple(y.shape)}")
    if diagnostics:
        p = p.clamp(1e-7, 1.0 - 1e-7)
    elif not bool(((p > 0) & (p < 1)).all()):
        raise NumericFault("scores escaped the open interval (0, 1)")
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def total_loss(per_detector_losses, alphas) -> torch.Tensor:
    """Weighted sum over detectors; ``None`` losses require weight zero."""
    if len(per_detector_losses) != len(alphas):
        raise ConfigurationError(
            f"{len(per_detector_losses)} losses for {len(alphas)} weights"
        )
    total = None
    for loss, alpha in zip(per_detector_losses, alphas):
        if loss is None:
            if alpha != 0:
                raise ConfigurationError("missing loss for a detector with nonzero weight")
            continue
        term = alpha * loss
        total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("all detector weights are zero")
    return total


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 8
    alphas: tuple[float, ...] = (1.0, 1.0, 1.0)
    sigma: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError("learning rate must be >= 0")
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.alphas and all(a == 0 for a in self.alphas):
            raise ConfigurationError("at least one detector weight must be positive")


@dataclass
class TrainingVideo:
    video_id: str
    features: np.ndarray  # [T, C]
    boundaries: list[int]


def _collate(dataset: list[TrainingVideo], window: int, sigma: float,
             dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = {v.features.shape[0] for v in dataset}
    if len(lengths) != 1:
        raise AlignmentError(f"videos disagree on length: {sorted(lengths)}")
    length = lengths.pop()
    feats = torch.as_tensor(
        np.stack([v.features for v in dataset]).astype(np.float64), dtype=dtype
    )
    labels = torch.as_tensor(
        np.stack([make_soft_labels(v.boundaries, length, sigma, window).values for v in dataset]),
        dtype=dtype,
    )
    return feats, labels


def batch_losses(model: MultiExitModel, feats: torch.Tensor, labels: torch.Tensor,
                 alphas) -> tuple[list[torch.Tensor | None], torch.Tensor]:
    """Forward every active detector and return per-detector and total loss."""
    active = [a > 0 for a in alphas]
    scores = model.training_forward(feats, active)
    losses = [detector_loss(s, labels) if s is not None else None for s in scores]
    return losses, total_loss(losses, alphas)


def backward(model: MultiExitModel, feats: torch.Tensor, labels: torch.Tensor,
             alphas) -> dict[str, torch.Tensor]:
    """Gradients of the weighted loss for every model parameter.

    Parameters that receive no gradient (e.g. exclusive to a zero-weight
    detector) are reported as zero tensors.
    """
    model.zero_grad(set_to_none=True)
    _, loss = batch_losses(model, feats, labels, alphas)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return grads


@dataclass
class LossCurve:
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, per_detector: list[float], total: float) -> None:
        self.rows.append({"epoch": epoch, "per_detector": per_detector, "total": total})

    def to_csv(self, path: str) -> None:
        if not self.rows:
            columns = []
        else:
            columns = [f"loss_det{i + 1}" for i in range(len(self.rows[0]["per_detector"]))]
        tmp = path + ".tmp"
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", *columns, "total"])
            for row in self.rows:
                writer.writerow(
                    [row["epoch"]]
                    + [f"{v:.8f}" for v in row["per_detector"]]
                    + [f"{row['total']:.8f}"]
                )
        os.replace(tmp, path)


def refresh_norm_statistics(model: MultiExitModel, feats: torch.Tensor, alphas,
                            batch_size: int) -> None:
    """Replace momentum-tracked norm statistics with exact dataset statistics.

    Momentum tracking lags the quickly-moving early epochs; one cumulative
    pass in training mode (no parameter updates) pins the inference-time
    affine maps to the statistics of the final weights.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm1d)]
    saved_momentum = [norm.momentum for norm in norms]
    for norm in norms:
        norm.reset_running_stats()
        norm.momentum = None  # cumulative average
    model.train()
    active = [a > 0 for a in alphas]
    with torch.no_grad():
        for start in range(0, feats.shape[0], batch_size):
            model.training_forward(feats[start : start + batch_size], active)
    for norm, momentum in zip(norms, saved_momentum):
        norm.momentum = momentum


def fit(dataset: list[TrainingVideo], model: MultiExitModel, cfg: TrainConfig) -> LossCurve:
    """Adam training over full sequences; deterministic for a fixed seed."""
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    if len(cfg.alphas) != model.num_stages:
        raise ConfigurationError(
            f"{len(cfg.alphas)} loss weights for {model.num_stages} detectors"
        )
    dtype = next(model.parameters()).dtype
    feats, labels = _collate(dataset, model.config.window_len, cfg.sigma, dtype)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    curve = LossCurve()
    n = len(dataset)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(model.num_stages)
        seen = np.zeros(model.num_stages)
        total_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            losses, loss = batch_losses(model, feats[idx], labels[idx], cfg.alphas)
            if not torch.isfinite(loss):
                raise NumericFault(f"training diverged at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for i, term in enumerate(losses):
                if term is not None:
                    sums[i] += float(term.detach())
                    seen[i] += 1
            total_sum += float(loss.detach())
            batches += 1
        per_det = [sums[i] / seen[i] if seen[i] else float("nan") for i in range(model.num_stages)]
        curve.append(epoch, per_det, total_sum / batches)
    if cfg.epochs > 0:
        refresh_norm_statistics(model, feats, cfg.alphas, cfg.batch_size)
    model.eval()
    return curve

"""Assembly of backbone stages and detector heads into one multi-exit model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .detector import BoundaryDetector, DetectorConfig, ScoreSequence
from .errors import ConfigurationError
from .features import BackboneStage, unfold_window_axis


@dataclass
class ModelConfig:
    """Architecture hyperparameters; serialized into checkpoint manifests."""

    stages: int = 3
    in_channels: int = 32
    channels: int = 32
    hidden: tuple[int, ...] = (256, 49152, 49152)
    k: int = 2
    n_blocks: int = 3
    order_sets: tuple[tuple[int, ...], ...] = ((0,), (0, 1), (0, 1, 2))
    pcm_channels: int = 16
    ffn_expansion: int = 2
    se_hidden: int = 16
    cls_hidden: int = 64
    activation: str = "silu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.order_sets = tuple(tuple(int(o) for o in s) for s in self.order_sets)
        if self.stages < 1:
            raise ConfigurationError("need at least one stage")
        if len(self.hidden) != self.stages:
            raise ConfigurationError(f"hidden widths: got {len(self.hidden)} for {self.stages} stages")
        if len(self.order_sets) != self.stages:
            raise ConfigurationError(f"order sets: got {len(self.order_sets)} for {self.stages} stages")
        if self.k < 1:
            raise ConfigurationError("window half-width k must be >= 1")

    @property
    def window_len(self) -> int:
        return 2 * self.k + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def unfold_time_batched(x: torch.Tensor, k: int) -> torch.Tensor:
    """``[B, T, l, C] -> [B, T, l, C, 2k+1]`` with replicate clamping at edges."""
    T = x.shape[1]
    idx = (torch.arange(T).unsqueeze(1) + torch.arange(-k, k + 1).unsqueeze(0)).clamp_(0, T - 1)
    return x[:, idx].movedim(2, -1)


class MultiExitModel(nn.Module):
    """Stack of per-frame backbone stages with one detector per depth."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stages = []
        for l in range(config.stages):
            in_dim = config.in_channels if l == 0 else config.channels
            stages.append(BackboneStage(in_dim, config.hidden[l], config.channels, config.activation))
        self.stages = nn.ModuleList(stages)
        detectors = []
        for l in range(config.stages):
            cfg = DetectorConfig(order_set=config.order_sets[l], n_blocks=config.n_blocks)
            detectors.append(
                BoundaryDetector(
                    scales=l + 1,
                    channels=config.channels,
                    cfg=cfg,
                    pcm_channels=config.pcm_channels,
                    ffn_expansion=config.ffn_expansion,
                    se_hidden=config.se_hidden,
                    cls_hidden=config.cls_hidden,
                    activation=config.activation,
                    detector_index=l + 1,
                )
            )
        self.detectors = nn.ModuleList(detectors)

    # -- structural accessors (1-based stage indices, matching the math) -------

    @property
    def num_stages(self) -> int:
        return self.config.stages

    @property
    def k(self) -> int:
        return self.config.k

    def stage(self, l: int) -> BackboneStage:
        return self.stages[l - 1]

    def detector(self, l: int) -> BoundaryDetector:
        return self.detectors[l - 1]

    def apply_stage(self, l: int, x: torch.Tensor) -> torch.Tensor:
        return self.stage(l)(x)

    def stage_flops_per_frame(self, l: int) -> int:
        return self.stage(l).flops_per_frame

    def detector_flops_per_frame(self, l: int) -> int:
        return self.detector(l).macs_per_frame(self.config.window_len)

    def static_macs_per_frame(self) -> int:
        """Cost of pushing one frame through every stage and every detector."""
        total = 0
        for l in range(1, self.num_stages + 1):
            total += self.stage_flops_per_frame(l) + self.detector_flops_per_frame(l)
        return total

    # -- forward paths ----------------------------------------------------------

    def detector_scores(self, l: int, scale_features: list[torch.Tensor]) -> ScoreSequence:
        """Score detector ``l`` from full-length per-stage features ``[T, C]`` each."""
        if len(scale_features) != l:
            raise ConfigurationError(f"detector {l} needs {l} scale tensors, got {len(scale_features)}")
        r = torch.stack(scale_features, dim=1)  # [T, l, C]
        windows = unfold_window_axis(r, self.config.k)
        return self.detector(l).score_sequence(windows)

    def training_forward(self, batch: torch.Tensor,
                         active: list[bool] | None = None) -> list[torch.Tensor | None]:
        """Full-sequence forward of every detector (no partial exit).

        ``batch`` is ``[B, T, C]``; returns per-detector score tensors
        ``[B, T]`` that carry gradients.  Detectors flagged inactive are
        skipped entirely and reported as ``None``.
        """
        if active is None:
            active = [True] * self.num_stages
        b, t, _ = batch.shape
        scores: list[torch.Tensor | None] = []
        stage_outputs = []
        h = batch.reshape(b * t, -1)
        for l in range(1, self.num_stages + 1):
            h = self.apply_stage(l, h)
            stage_outputs.append(h.reshape(b, t, -1))
            if not active[l - 1]:
                scores.append(None)
                continue
            r = torch.stack(stage_outputs, dim=2)  # [B, T, l, C]
            windows = unfold_time_batched(r, self.config.k)
            scores.append(self.detector(l).scores(windows, strict=False))
        return scores

    def static_score_sequences(self, features: torch.Tensor) -> list[ScoreSequence]:
        """No-grad full-depth scores of every detector for one video ``[T, C]``."""
        with torch.no_grad():
            scores = self.training_forward(features.unsqueeze(0))
        return [
            ScoreSequence(values=s.squeeze(0).double().cpu().numpy(), detector_index=l + 1)
            for l, s in enumerate(scores)
        ]


def deterministic_init(model: nn.Module, seed: int) -> None:
    """Seeded re-initialization that does not depend on torch's global RNG.

    Linear/conv weights get fan-in scaled uniform draws from a private
    generator, biases start at zero, and norm layers start as the identity
    with fresh running statistics.
    """
    gen = torch.Generator().manual_seed(seed)
    for _, module in model.named_modules():
        if isinstance(module, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            with torch.no_grad():
                fan_in = int(np.prod(module.weight.shape[1:]))
                bound = math.sqrt(3.0 / fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm1d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.running_mean.zero_()
                module.running_var.fill_(1.0)
                module.num_batches_tracked.zero_()


def build_model(config: ModelConfig, seed: int = 0) -> MultiExitModel:
    model = MultiExitModel(config)
    deterministic_init(model, seed)
    return model

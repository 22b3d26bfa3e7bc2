"""Multi-order difference boundary detector.

One detector head turns windowed multi-scale features ``[T, l, C, t_w]`` into
per-timestamp boundary probabilities.  It has two branches:

* a difference encoder of ``n_blocks`` residual blocks whose token mixer sums
  depthwise-convolved zeroth/first/second temporal differences of the window,
  blocks joined by stride-1 max pooling along the window axis;
* a contrast branch that turns per-window cosine self-similarity maps into a
  compact descriptor through a small 2-layer conv encoder.

The branches are re-weighted by cross squeeze-excitation gates and fed to an
MLP classifier with a sigmoid output.

Tensors are handled batched as ``[B, T, scales, C, t_w]``; the scale and
channel axes are folded into a single channel axis wherever a torch conv
needs a flat channel layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, NumericFault
from .features import resolve_activation

ZERO_NORM_EPS = 1e-12
SCORE_EPS = 1e-7


@dataclass
class DetectorConfig:
    """Static configuration of one detector head.

    ``order_set`` picks which difference orders the mixer sums; the zeroth
    order is always required.  ``exit_threshold`` and ``exit_radius`` belong
    to the inference scheduler but live here because they are per-detector.
    """

    order_set: tuple[int, ...] = (0, 1, 2)
    n_blocks: int = 3
    exit_threshold: float = 0.5
    exit_radius: int = 4
    loss_weight: float = 1.0

    def __post_init__(self):
        orders = tuple(sorted(set(int(o) for o in self.order_set)))
        if not orders:
            raise ConfigurationError("order_set must be non-empty")
        if 0 not in orders:
            raise ConfigurationError("order_set must contain the zeroth order")
        if not set(orders) <= {0, 1, 2}:
            raise ConfigurationError(f"order_set must be a subset of {{0,1,2}}, got {orders}")
        self.order_set = orders
        if self.n_blocks < 1:
            raise ConfigurationError("n_blocks must be >= 1")
        if not 0.0 < self.exit_threshold < 1.0:
            raise ConfigurationError("exit_threshold must lie in (0, 1)")
        if self.exit_radius < 0:
            raise ConfigurationError("exit_radius must be >= 0")
        if self.loss_weight < 0:
            raise ConfigurationError("loss_weight must be >= 0")


@dataclass
class ScoreSequence:
    """Per-timestamp boundary probabilities of one detector on one video."""

    values: "object"  # numpy array, length T, entries strictly inside (0, 1)
    detector_index: int = field(default=1)

    def __post_init__(self):
        import numpy as np

        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("score sequence must be 1-d")
        if not np.all((self.values > 0.0) & (self.values < 1.0)):
            raise NumericFault(f"detector {self.detector_index}: scores escaped (0, 1)")

    def __len__(self) -> int:
        return len(self.values)


def temporal_difference(x: torch.Tensor) -> torch.Tensor:
    """First-order difference along the trailing window axis.

    Output keeps the window length by zero-padding the front slot, so the
    change is aligned with the later of the two frames it compares.
    """
    if x.shape[-1] < 2:
        raise ConfigurationError("temporal difference needs a window of length >= 2")
    diff = x[..., 1:] - x[..., :-1]
    return F.pad(diff, (1, 0))


def _fold_channels(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    """[B, T, S, C, W] (or [T, S, C, W]) -> [N, S*C, W] plus original shape."""
    shape = tuple(x.shape)
    if x.ndim == 4:
        x = x.unsqueeze(0)
    b, t, s, c, w = x.shape
    return x.reshape(b * t, s * c, w), shape


def _unfold_channels(x: torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
    if len(shape) == 4:
        t, s, c, w = shape
        return x.reshape(t, s, c, w)
    b, t, s, c, w = shape
    return x.reshape(b, t, s, c, w)


def _replicate_pad_w(x: torch.Tensor, pad: int) -> torch.Tensor:
    return F.pad(x, (pad, pad), mode="replicate")


def window_max_pool(x: torch.Tensor) -> torch.Tensor:
    """Stride-1 kernel-3 max pooling along the window axis, replicate padded."""
    flat, shape = _fold_channels(x)
    pooled = F.max_pool1d(_replicate_pad_w(flat, 1), kernel_size=3, stride=1)
    return _unfold_channels(pooled, shape)


class DiffMixer(nn.Module):
    """The mixer ``g``: depthwise temporal conv, activation, batch norm.

    The conv runs along the window axis with kernel 3 and replicate
    same-padding; normalization is per folded channel with running statistics
    so that inference reduces to a per-channel affine map.
    """

    def __init__(self, channels: int, activation: str = "silu", kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigurationError("depthwise kernel length must be odd")
        self.conv = nn.Conv1d(channels, channels, kernel_size, groups=channels, bias=False)
        self.norm = nn.BatchNorm1d(channels, momentum=0.1)
        self.activation_name = activation
        self.channels = channels
        self.kernel_size = kernel_size

    def set_passthrough(self) -> None:
        """Configure g as the identity map (for linear test configurations)."""
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, 0, self.kernel_size // 2] = 1.0
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()
            self.norm.running_mean.zero_()
            self.norm.running_var.fill_(1.0)
            self.norm.eps = 0.0
        self.activation_name = "identity"
        self.norm.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat, shape = _fold_channels(x)
        act = resolve_activation(self.activation_name)
        out = self.norm(act(self.conv(_replicate_pad_w(flat, self.kernel_size // 2))))
        return _unfold_channels(out, shape)


class MultiOrderMixer(nn.Module):
    """Sum of per-order mixed difference terms.

    Term 0 is ``g0(x)``, term 1 is ``g1(dx)``, term 2 is ``g2(d g1(dx))``
    where ``d`` is :func:`temporal_difference`.  Each term has its own mixer
    parameters; orders absent from ``order_set`` contribute nothing, but the
    inner first-order mixer is still instantiated when order 2 is requested.
    """

    def __init__(self, channels: int, order_set: tuple[int, ...], activation: str = "silu"):
        super().__init__()
        self.order_set = tuple(sorted(set(order_set)))
        if 0 not in self.order_set:
            raise ConfigurationError("order_set must contain the zeroth order")
        self.g0 = DiffMixer(channels, activation)
        needs_g1 = 1 in self.order_set or 2 in self.order_set
        self.g1 = DiffMixer(channels, activation) if needs_g1 else None
        self.g2 = DiffMixer(channels, activation) if 2 in self.order_set else None

    def set_passthrough(self) -> None:
        for mixer in (self.g0, self.g1, self.g2):
            if mixer is not None:
                mixer.set_passthrough()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.g0(x)
        if self.g1 is not None:
            first = self.g1(temporal_difference(x))
            if 1 in self.order_set:
                out = out + first
            if self.g2 is not None:
                out = out + self.g2(temporal_difference(first))
        return out

    def mixer_applications(self) -> int:
        n = 1
        if self.g1 is not None:
            n += 1
        if self.g2 is not None:
            n += 1
        return n


class ConvFFN(nn.Module):
    """Pointwise expand, depthwise temporal conv, pointwise project."""

    def __init__(self, channels: int, expansion: int = 2, activation: str = "silu"):
        super().__init__()
        inner = channels * expansion
        self.pw1 = nn.Conv1d(channels, inner, 1)
        self.dw = nn.Conv1d(inner, inner, 3, groups=inner)
        self.pw2 = nn.Conv1d(inner, channels, 1)
        self.activation_name = activation
        self.channels = channels
        self.inner = inner

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat, shape = _fold_channels(x)
        act = resolve_activation(self.activation_name)
        h = act(self.pw1(flat))
        h = act(self.dw(_replicate_pad_w(h, 1)))
        return _unfold_channels(self.pw2(h), shape)


class EncoderBlock(nn.Module):
    """One residual block: multi-order mix + residual, ConvFFN + residual."""

    def __init__(self, channels: int, order_set: tuple[int, ...], expansion: int, activation: str):
        super().__init__()
        self.mix = MultiOrderMixer(channels, order_set, activation)
        self.ffn = ConvFFN(channels, expansion, activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x + self.mix(x)
        return h + self.ffn(h)


class DiffEncoder(nn.Module):
    """Stack of encoder blocks; outputs of all blocks concatenated on scales.

    Blocks are chained through stride-1 max pooling along the window axis so
    deeper blocks see gradually merged neighborhoods; the concatenated output
    has ``n_blocks * scales`` entries on the scale axis.
    """

    def __init__(self, scales: int, channels: int, cfg: DetectorConfig,
                 expansion: int = 2, activation: str = "silu"):
        super().__init__()
        folded = scales * channels
        self.blocks = nn.ModuleList(
            EncoderBlock(folded, cfg.order_set, expansion, activation) for _ in range(cfg.n_blocks)
        )
        self.scales = scales
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = window_max_pool(h)
            h = block(h)
            outputs.append(h)
        return torch.cat(outputs, dim=-3)


def pairwise_similarity(d: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between window offsets: ``[..., C, W] -> [..., W, W]``.

    Offsets whose feature vector norm falls below ``1e-12`` get similarity 0
    against everything, including themselves.
    """
    norms = d.norm(dim=-2, keepdim=True)
    unit = d / norms.clamp_min(ZERO_NORM_EPS)
    sim = unit.transpose(-2, -1) @ unit
    ok = (norms.squeeze(-2) >= ZERO_NORM_EPS).to(d.dtype)
    return sim * ok.unsqueeze(-1) * ok.unsqueeze(-2)


class ContrastEncoder(nn.Module):
    """Refine per-timestamp similarity maps into a flat descriptor.

    Two 3x3 convs over each ``t_w x t_w`` map followed by global averaging;
    every timestamp is processed independently.
    """

    def __init__(self, in_maps: int, channels: int = 16, activation: str = "silu"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_maps, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.activation_name = activation
        self.in_maps = in_maps
        self.channels = channels

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        shape = tuple(s.shape)
        if s.ndim == 4:
            s = s.unsqueeze(0)
        b, t, maps, w, _ = s.shape
        act = resolve_activation(self.activation_name)
        h = act(self.conv1(s.reshape(b * t, maps, w, w)))
        h = act(self.conv2(h))
        out = h.mean(dim=(2, 3)).reshape(b, t, self.channels)
        return out.squeeze(0) if len(shape) == 4 else out


class CrossGate(nn.Module):
    """Cross squeeze-excitation: each branch gates the other's channels.

    The per-timestamp vector itself is the squeeze descriptor; each gate is a
    two-layer MLP with a sigmoid output.  Output is ``concat(a * gate_from_b,
    b * gate_from_a)``.
    """

    def __init__(self, dim_a: int, dim_b: int, hidden: int = 16, activation: str = "silu"):
        super().__init__()
        self.gate_from_a = nn.Sequential(nn.Linear(dim_a, hidden), nn.SiLU(), nn.Linear(hidden, dim_b))
        self.gate_from_b = nn.Sequential(nn.Linear(dim_b, hidden), nn.SiLU(), nn.Linear(hidden, dim_a))
        self.dim_a = dim_a
        self.dim_b = dim_b
        self.hidden = hidden

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        scale_a = torch.sigmoid(self.gate_from_b(b))
        scale_b = torch.sigmoid(self.gate_from_a(a))
        return torch.cat([a * scale_a, b * scale_b], dim=-1)


class BoundaryDetector(nn.Module):
    """One complete detector head attached at a given backbone depth."""

    def __init__(self, scales: int, channels: int, cfg: DetectorConfig,
                 pcm_channels: int = 16, ffn_expansion: int = 2,
                 se_hidden: int = 16, cls_hidden: int = 64,
                 activation: str = "silu", detector_index: int = 1):
        super().__init__()
        self.cfg = cfg
        self.encoder = DiffEncoder(scales, channels, cfg, ffn_expansion, activation)
        self.contrast = ContrastEncoder(cfg.n_blocks * scales, pcm_channels, activation)
        self.fuse = CrossGate(channels, pcm_channels, se_hidden, activation)
        self.classifier = nn.Sequential(
            nn.Linear(channels + pcm_channels, cls_hidden), nn.SiLU(), nn.Linear(cls_hidden, 1)
        )
        self.scales = scales
        self.channels = channels
        self.pcm_channels = pcm_channels
        self.cls_hidden = cls_hidden
        self.detector_index = detector_index

    def _check(self, x: torch.Tensor, where: str, strict: bool) -> None:
        if strict and not torch.isfinite(x).all():
            raise NumericFault(f"detector {self.detector_index}: non-finite values after {where}")

    def forward(self, windows: torch.Tensor, strict: bool = False) -> torch.Tensor:
        """Window tensor ``[B, T, S, C, W]`` (or unbatched) to logits ``[B, T]``."""
        unbatched = windows.ndim == 4
        if unbatched:
            windows = windows.unsqueeze(0)
        d = self.encoder(windows)
        self._check(d, "difference encoder", strict)
        sim = pairwise_similarity(d)
        self._check(sim, "similarity maps", strict)
        contrast = self.contrast(sim)
        self._check(contrast, "contrast encoder", strict)
        summary = d.mean(dim=(2, 4))
        fused = self.fuse(summary, contrast)
        self._check(fused, "cross-gate fusion", strict)
        logits = self.classifier(fused).squeeze(-1)
        self._check(logits, "classifier", strict)
        return logits if not unbatched else logits.squeeze(0)

    def scores(self, windows: torch.Tensor, strict: bool = True) -> torch.Tensor:
        """Sigmoid probabilities, nudged inside the open interval (0, 1)."""
        return torch.sigmoid(self.forward(windows, strict=strict)).clamp(SCORE_EPS, 1.0 - SCORE_EPS)

    def score_sequence(self, windows: torch.Tensor, strict: bool = True) -> ScoreSequence:
        with torch.no_grad():
            values = self.scores(windows, strict=strict)
        return ScoreSequence(values=values.detach().cpu().numpy(), detector_index=self.detector_index)

    # -- analytic multiply-accumulate accounting -------------------------------

    def macs_per_frame(self, window_len: int) -> int:
        """MAC count for one timestamp (conv/linear multiplies only).

        Counted: depthwise and pointwise convs in the encoder, the cosine
        dot products and norms, the contrast convs, the gate MLPs and the
        classifier.  Activations, batch norm and pooling are not MACs.
        """
        w = window_len
        folded = self.scales * self.channels
        block = self.encoder.blocks[0]
        g_apps = block.mix.mixer_applications()
        mix = g_apps * 3 * folded * w
        inner = block.ffn.inner
        ffn = folded * inner * w + 3 * inner * w + inner * folded * w
        encoder = len(self.encoder.blocks) * (mix + ffn)
        maps = self.contrast.in_maps
        sim = maps * self.channels * w * (w + 1)  # dot products + norms
        pcm = self.contrast.channels * maps * 9 * w * w + self.contrast.channels ** 2 * 9 * w * w
        gates = (self.channels * self.fuse.hidden + self.fuse.hidden * self.pcm_channels
                 + self.pcm_channels * self.fuse.hidden + self.fuse.hidden * self.channels)
        cls_in = self.channels + self.pcm_channels
        classifier = cls_in * self.cls_hidden + self.cls_hidden
        return encoder + sim + pcm + gates + classifier

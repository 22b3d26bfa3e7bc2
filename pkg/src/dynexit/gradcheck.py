"""Central-finite-difference verification of the analytic gradients.

Runs on a miniature double-precision model so truncation and roundoff stay
far below the tolerance.  Parameters are grouped into named blocks (stage,
mixer, conv-FFN, contrast encoder, cross gate, classifier) and each block
passes or fails as a unit; a corruption hook exists so the harness itself
can be negatively tested.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ModelConfig, MultiExitModel, build_model
from .training import TrainingVideo, _collate, batch_losses

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-5
ABS_FLOOR = 5e-8


def miniature_config() -> ModelConfig:
    """Tiny architecture used by the gradient-check command (T=12, C=4, t_w=5)."""
    return ModelConfig(
        stages=3,
        in_channels=4,
        channels=4,
        hidden=(8, 8, 8),
        k=2,
        n_blocks=3,
        order_sets=((0,), (0, 1), (0, 1, 2)),
        pcm_channels=16,
        ffn_expansion=2,
        se_hidden=8,
        cls_hidden=16,
    )


def parameter_block(name: str) -> str:
    """Map a parameter name onto its architectural block."""
    parts = name.split(".")
    if parts[0] == "stages":
        return f"stage{int(parts[1]) + 1}"
    if parts[0] == "detectors":
        det = f"det{int(parts[1]) + 1}"
        section = parts[2]
        if section == "encoder":
            return f"{det}.{'mixer' if parts[5] == 'mix' else 'conv_ffn'}"
        if section == "contrast":
            return f"{det}.pcm"
        if section == "fuse":
            return f"{det}.cross_gate"
        if section == "classifier":
            return f"{det}.classifier"
    return name


@dataclass
class BlockResult:
    block: str
    checked: int = 0
    max_rel_err: float = 0.0
    worst_param: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= DEFAULT_TOL


@dataclass
class GradCheckReport:
    blocks: dict[str, BlockResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks.values())

    def failures(self) -> list[str]:
        return sorted(name for name, b in self.blocks.items() if not b.passed)

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.blocks):
            b = self.blocks[name]
            status = "pass" if b.passed else "FAIL"
            out.append(
                f"{status}  {name:24s} coords={b.checked:4d} max_rel_err={b.max_rel_err:.3e}"
            )
        return out


def _relative_error(analytic: float, numeric: float) -> float:
    gap = abs(analytic - numeric)
    if gap <= ABS_FLOOR:
        return 0.0
    return gap / max(abs(analytic), abs(numeric), ABS_FLOOR)


def run_gradient_check(
    model: MultiExitModel | None = None,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    max_coords_per_tensor: int = 48,
    corrupt_block: str | None = None,
) -> GradCheckReport:
    """Compare autograd parameter gradients with central differences.

    ``corrupt_block`` deliberately scales the analytic gradients of one block
    before comparison; the report must then flag exactly that block.
    """
    if model is None:
        model = build_model(miniature_config(), seed=seed).double()
    model = model.double()
    rng = np.random.default_rng(seed)
    cfg = model.config
    t_len = 12
    dataset = [
        TrainingVideo(
            video_id=f"g{i}",
            features=rng.normal(0, 1, size=(t_len, cfg.in_channels)),
            boundaries=[int(rng.integers(2, t_len - 2))],
        )
        for i in range(2)
    ]
    feats, labels = _collate(dataset, cfg.window_len, sigma=1.0, dtype=torch.float64)
    alphas = tuple(1.0 for _ in range(model.num_stages))

    saved_state = copy.deepcopy(model.state_dict())
    model.train()

    def loss_value() -> float:
        with torch.no_grad():
            losses, loss = batch_losses(model, feats, labels, alphas)
        return float(loss)

    model.zero_grad(set_to_none=True)
    _, loss = batch_losses(model, feats, labels, alphas)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    if corrupt_block is not None:
        hit = False
        for name in grads:
            if parameter_block(name) == corrupt_block:
                grads[name] = grads[name] * 2.0 + 1.0
                hit = True
        if not hit:
            raise ValueError(f"no parameters in block '{corrupt_block}'")

    report = GradCheckReport()
    params = dict(model.named_parameters())
    for name in sorted(params):
        p = params[name]
        block = report.blocks.setdefault(parameter_block(name), BlockResult(parameter_block(name)))
        numel = p.numel()
        if numel <= max_coords_per_tensor:
            coords = np.arange(numel)
        else:
            coords = rng.choice(numel, size=max_coords_per_tensor, replace=False)
        flat = p.data.view(-1)
        for c in coords:
            c = int(c)
            original = flat[c].item()
            flat[c] = original + step
            f_plus = loss_value()
            flat[c] = original - step
            f_minus = loss_value()
            flat[c] = original
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = float(grads[name].view(-1)[c])
            rel = _relative_error(analytic, numeric)
            block.checked += 1
            if rel > block.max_rel_err:
                block.max_rel_err = rel
                block.worst_param = name
    model.load_state_dict(saved_state)
    model.eval()
    return report

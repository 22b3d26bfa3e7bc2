"""Synthetic per-frame feature corpora with two boundary families.

Every channel of a video is a C1 piecewise-cubic trajectory built from a
curvature profile on a knot grid (curvature varies linearly between knots).
The two families differ in what happens at an annotated boundary:

* ``step``: the trajectory value jumps (all channels, random signs) on an
  otherwise very quiet background, so zeroth-order statistics expose the
  boundary;
* ``smooth``: value and slope stay continuous while the curvature jumps, so
  only second-order temporal differences reveal the boundary.  A lively
  curvature background plus channel-sparse "distractor" humps keeps raw
  values uninformative.

Drift control re-targets value and slope at every boundary by solving for a
low-frequency curvature correction inside each segment, which keeps
trajectories bounded and makes the post-boundary recovery smooth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError
from .evalproto import AnnotationSet, frame_to_seconds, write_annotations
from .features import write_feature_file


@dataclass
class SyntheticSpec:
    n_videos: int = 50
    T: int = 100
    C: int = 32
    boundaries_per_video: int = 3
    step_fraction: float = 0.5  # fraction of videos drawn from the step family
    noise_sigma: float = 0.02
    seed: int = 0
    min_separation: int = 20
    end_margin: int = 8
    fps: float = 10.0
    n_raters: int = 3
    rater_jitter_sigma: float = 1.0
    knot_spacing: int = 4
    step_jump: tuple[float, float] = (0.5, 1.0)
    curvature_jump: tuple[float, float] = (0.12, 0.22)
    step_background_curvature: float = 0.004
    smooth_background_curvature: float = 0.02
    slope_scale: float = 0.05
    value_scale: float = 1.0
    distractor_rate: float = 0.08
    distractor_peak: tuple[float, float] = (0.06, 0.18)
    distractor_channel_fraction: float = 0.25
    id_prefix: str = "vid"

    def __post_init__(self):
        if self.T < 2 * self.end_margin + 2:
            raise DataError("video too short for the end margins")
        if self.boundaries_per_video < 0:
            raise DataError("boundary count must be >= 0")
        span = (self.T - 1 - self.end_margin) - self.end_margin
        need = max(0, self.boundaries_per_video - 1) * self.min_separation
        if self.boundaries_per_video and span < need:
            raise DataError(
                f"cannot place {self.boundaries_per_video} boundaries with separation "
                f">= {self.min_separation} in {span} frames"
            )
        if self.end_margin < self.knot_spacing:
            raise DataError("end margin must cover at least one knot spacing")
        if self.min_separation < 2 * self.knot_spacing:
            raise DataError("separation must cover the side-limit windows")
        if not 0 <= self.step_fraction <= 1:
            raise DataError("step_fraction must lie in [0, 1]")
        if self.n_raters < 1:
            raise DataError("need at least one rater")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoRecord:
    video_id: str
    family: str
    features: np.ndarray  # [T, C] float64, pre-quantization
    boundaries: list[int]
    rater_seconds: list[list[float]]
    fps: float

    @property
    def duration(self) -> float:
        return self.features.shape[0] / self.fps

    def annotation(self) -> AnnotationSet:
        return AnnotationSet(
            video_id=self.video_id,
            duration_seconds=self.duration,
            fps=self.fps,
            raters=self.rater_seconds,
        )


def _boundary_positions(rng: np.random.Generator, spec: SyntheticSpec) -> list[int]:
    n = spec.boundaries_per_video
    if n == 0:
        return []
    lo = spec.end_margin
    hi = spec.T - 1 - spec.end_margin
    slack = (hi - lo) - (n - 1) * spec.min_separation
    offsets = np.sort(rng.uniform(0.0, slack + 1.0, size=n))
    pos = lo + np.floor(offsets).astype(int) + np.arange(n) * spec.min_separation
    return [int(p) for p in np.clip(pos, lo, hi)]


def _segment_knots(s: int, e: int, spacing: int, anchor_start: bool, anchor_end: bool) -> list[int]:
    """Knot grid for one segment; anchored ends guarantee a full-width knot
    interval adjacent to the anchored breakpoint."""
    gap = e - s
    if gap <= spacing:
        return [s, e]
    if anchor_start and anchor_end:
        half = gap // 2
        left = list(range(s, s + (half // spacing) * spacing + 1, spacing))
        right = list(range(e, e - ((gap - half) // spacing) * spacing - 1, -spacing))
        return sorted(set(left + right))
    if anchor_end:
        return sorted(set([s] + list(range(e, s, -spacing))))
    return sorted(set(list(range(s, e, spacing)) + [e]))


def _propagate(h: np.ndarray, mu_left: np.ndarray, mu_right: np.ndarray, v0, m0):
    """Exit value/slope of a piecewise-linear-curvature run (linear in mu)."""
    v, m = v0, m0
    for i in range(len(h)):
        hi = float(h[i])
        v = v + m * hi + hi * hi * (mu_left[i] / 3.0 + mu_right[i] / 6.0)
        m = m + hi * (mu_left[i] + mu_right[i]) / 2.0
    return v, m


def _control_segment(h: np.ndarray, mu_out: np.ndarray, mu_in: np.ndarray,
                     v0: np.ndarray, m0: np.ndarray,
                     v_target: np.ndarray, m_target: np.ndarray) -> np.ndarray:
    """Correction added at the segment's interior knots so the segment exits
    at the requested value/slope.  Returns the per-knot correction [K+1, C]
    (zero at both ends)."""
    n_knots = len(h) + 1
    correction = np.zeros((n_knots, v0.shape[0]))
    n_interior = n_knots - 2
    if n_interior < 1:
        return correction
    x = np.cumsum(np.concatenate([[0.0], h]))
    x = x / x[-1]
    bases = [np.sin(np.pi * x)]
    if n_interior >= 2:
        bases.append(np.sin(2 * np.pi * x))
    for basis in bases:
        basis[0] = 0.0
        basis[-1] = 0.0
    v_end, m_end = _propagate(h, mu_out[:-1], mu_in[1:], v0, m0)
    residual = np.stack([v_target - v_end, m_target - m_end])  # [2, C]
    responses = []
    for basis in bases:
        dv, dm = _propagate(h, basis[:-1], basis[1:], 0.0, 0.0)
        responses.append((dv, dm))
    if len(bases) == 1:
        dv, dm = responses[0]
        coef = (residual[1] / dm)[None, :] if abs(dm) > 1e-9 else np.zeros((1, v0.shape[0]))
    else:
        a = np.array([[responses[0][0], responses[1][0]], [responses[0][1], responses[1][1]]])
        try:
            coef = np.linalg.solve(a, residual)
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(a, residual, rcond=None)[0]
    for basis, c in zip(bases, coef):
        correction += basis[:, None] * c[None, :]
    return correction


def _synthesize_video(rng: np.random.Generator, spec: SyntheticSpec,
                      video_id: str, family: str) -> VideoRecord:
    T, C = spec.T, spec.C
    boundaries = _boundary_positions(rng, spec)
    bset = set(boundaries)
    breakpoints = [0] + boundaries + [T - 1]

    knots: list[int] = []
    segment_slices: list[tuple[int, int]] = []
    for i in range(len(breakpoints) - 1):
        s, e = breakpoints[i], breakpoints[i + 1]
        seg = _segment_knots(s, e, spec.knot_spacing, s in bset, e in bset)
        start_idx = len(knots) - 1 if knots else 0
        if knots:
            seg = seg[1:]  # shared breakpoint knot
        knots.extend(seg)
        segment_slices.append((start_idx, len(knots) - 1))
    knot_arr = np.asarray(knots)
    n_k = len(knots)

    # background curvature: mean-reverting walk over knots
    sigma_mu = (
        spec.step_background_curvature if family == "step" else spec.smooth_background_curvature
    )
    mu = np.zeros((n_k, C))
    mu[0] = rng.normal(0.0, sigma_mu, C)
    for j in range(1, n_k):
        mu[j] = 0.85 * mu[j - 1] + rng.normal(0.0, 0.55 * sigma_mu, C)
    mu_in = mu.copy()
    mu_out = mu.copy()

    if family == "smooth":
        # channel-sparse curvature humps: lively but continuous background
        for j in range(1, n_k - 1):
            if knots[j] in bset or rng.random() >= spec.distractor_rate:
                continue
            peak = rng.uniform(*spec.distractor_peak)
            chan = rng.random(C) < spec.distractor_channel_fraction
            signs = rng.choice((-1.0, 1.0), size=C) * chan
            for off, weight in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                idx = j + off
                if 0 <= idx < n_k:
                    mu_in[idx] += weight * peak * signs
                    mu_out[idx] += weight * peak * signs
        # the family signature: a clean curvature jump at every boundary
        for b in boundaries:
            j = int(np.searchsorted(knot_arr, b))
            jump = rng.uniform(*spec.curvature_jump, size=C) * rng.choice((-1.0, 1.0), size=C)
            mu_out[j] += jump

    v = rng.uniform(-spec.value_scale, spec.value_scale, C)
    m = rng.uniform(-spec.slope_scale, spec.slope_scale, C)
    f = np.zeros((T, C))
    for j0, j1 in segment_slices:
        h = np.diff(knot_arr[j0 : j1 + 1]).astype(np.float64)
        v_target = rng.uniform(-spec.value_scale, spec.value_scale, C)
        m_target = rng.uniform(-spec.slope_scale, spec.slope_scale, C)
        local_out = mu_out[j0 : j1 + 1]
        local_in = mu_in[j0 : j1 + 1]
        correction = _control_segment(h, local_out, local_in, v, m, v_target, m_target)
        local_out = local_out + correction
        local_in = local_in + correction
        mu_out[j0 : j1 + 1] = local_out
        mu_in[j0 : j1 + 1] = local_in
        for i in range(len(h)):
            hi = float(h[i])
            a_l = local_out[i]
            a_r = local_in[i + 1]
            u = np.arange(int(hi))[:, None].astype(np.float64)
            t0 = knots[j0 + i]
            f[t0 : t0 + int(hi)] = (
                v[None, :] + m[None, :] * u + a_l[None, :] * u**2 / 2.0
                + (a_r - a_l)[None, :] * u**3 / (6.0 * hi)
            )
            v = v + m * hi + hi * hi * (a_l / 3.0 + a_r / 6.0)
            m = m + hi * (a_l + a_r) / 2.0
    f[T - 1] = v

    if family == "step":
        for b in boundaries:
            delta = rng.uniform(*spec.step_jump, size=C) * rng.choice((-1.0, 1.0), size=C)
            f[b:] += delta

    if spec.noise_sigma > 0:
        f = f + rng.normal(0.0, spec.noise_sigma, size=f.shape)

    duration = T / spec.fps
    exact = [frame_to_seconds(b, spec.fps) for b in boundaries]
    raters = [list(exact)]
    for _ in range(spec.n_raters - 1):
        jitter = rng.normal(0.0, spec.rater_jitter_sigma, size=len(boundaries)) / spec.fps
        raters.append(sorted(float(np.clip(t + dj, 0.0, duration)) for t, dj in zip(exact, jitter)))

    return VideoRecord(
        video_id=video_id,
        family=family,
        features=f,
        boundaries=boundaries,
        rater_seconds=raters,
        fps=spec.fps,
    )


def synthesize_corpus(spec: SyntheticSpec) -> list[VideoRecord]:
    """Deterministic in-memory corpus for the given spec."""
    master = np.random.default_rng(spec.seed)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_videos)
    records = []
    for i in range(spec.n_videos):
        family = "step" if master.random() < spec.step_fraction else "smooth"
        rng = np.random.default_rng(children[i])
        records.append(_synthesize_video(rng, spec, f"{spec.id_prefix}{i:04d}", family))
    return records


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> list[VideoRecord]:
    """Write feature files, annotations, and family metadata under ``out_dir``."""
    records = synthesize_corpus(spec)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for rec in records:
        write_feature_file(feat_dir, rec.video_id, rec.features.astype(np.float32), spec.fps)
    write_annotations(os.path.join(out_dir, "annotations.json"),
                      {rec.video_id: rec.annotation() for rec in records})
    meta = {
        "spec": spec.to_dict(),
        "families": {rec.video_id: rec.family for rec in records},
        "boundaries": {rec.video_id: rec.boundaries for rec in records},
    }
    tmp = os.path.join(out_dir, "meta.json")
    with open(tmp + ".tmp", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    os.replace(tmp + ".tmp", tmp)
    return records


# ---------------------------------------------------------------------------
# Measurement oracles used to validate the construction
# ---------------------------------------------------------------------------


def measure_step_contrast(features: np.ndarray, boundaries: list[int]) -> float:
    """min over boundaries of ||f(b) - f(b-1)|| over the mean non-boundary step norm."""
    diffs = np.linalg.norm(np.diff(features, axis=0), axis=1)  # diffs[t] = ||f(t+1) - f(t)||
    boundary_idx = [b - 1 for b in boundaries]
    inside = np.setdiff1d(np.arange(len(diffs)), boundary_idx)
    baseline = float(np.mean(diffs[inside]))
    return min(float(diffs[i]) / baseline for i in boundary_idx)


def _side_fit(features: np.ndarray, b: int, spacing: int, side: str) -> np.ndarray:
    """Exact cubic fit of one side window; rows are [f, f', f''] at the boundary."""
    if side == "left":
        u = np.arange(-spacing, 1, dtype=np.float64)
        window = features[b - spacing : b + 1]
    else:
        u = np.arange(0, spacing + 1, dtype=np.float64)
        window = features[b : b + spacing + 1]
    design = np.stack([np.ones_like(u), u, u**2, u**3], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, window, rcond=None)
    return np.stack([coeffs[0], coeffs[1], 2.0 * coeffs[2]])


def measure_smooth_gaps(features: np.ndarray, boundaries: list[int], spacing: int) -> list[dict]:
    """Side-limit gaps of value, slope and curvature at every boundary.

    Valid on noise-free smooth-family videos, where each side window lies in
    a single cubic piece and the fit is exact.
    """
    out = []
    for b in boundaries:
        left = _side_fit(features, b, spacing, "left")
        right = _side_fit(features, b, spacing, "right")
        gaps = np.abs(right - left)
        out.append(
            {
                "value_gap": float(gaps[0].max()),
                "slope_gap": float(gaps[1].max()),
                "curvature_jump_min": float(gaps[2].min()),
                "curvature_jump_max": float(gaps[2].max()),
            }
        )
    return out

"""Peak estimation, exit masks, compaction, padding, and the full engine."""

import numpy as np
import pytest
import torch

from dynexit.detector import DetectorConfig, ScoreSequence
from dynexit.errors import ConfigurationError
from dynexit.features import FrameFeatureSequence
from dynexit.scheduler import (
    build_exit_mask,
    compact,
    estimate_peaks,
    pad_to_full,
    run_dynamic_inference,
)


def brute_force_peaks(values, threshold):
    return [
        t
        for t in range(1, len(values) - 1)
        if values[t] > values[t - 1] and values[t] > values[t + 1] and values[t] > threshold
    ]


class TestEstimatePeaks:
    def test_single_interior_peak(self):
        assert estimate_peaks(np.array([0.1, 0.8, 0.2]), 0.5).tolist() == [1]

    def test_plateau_fails_strict_comparison(self):
        assert estimate_peaks(np.array([0.2, 0.7, 0.7, 0.2]), 0.5).tolist() == []

    def test_endpoints_ineligible(self):
        assert estimate_peaks(np.array([0.9, 0.1, 0.9]), 0.5).tolist() == []

    def test_matches_brute_force_scan(self, rng):
        for _ in range(200):
            values = rng.random(50)
            threshold = float(rng.uniform(0.05, 0.95))
            got = estimate_peaks(values, threshold).tolist()
            assert got == brute_force_peaks(values, threshold)

    def test_threshold_validation(self):
        with pytest.raises(ConfigurationError):
            estimate_peaks(np.array([0.1, 0.2, 0.1]), 1.5)


class TestExitMask:
    def test_interval_around_boundary(self):
        mask = build_exit_mask([10], 2, 20)
        assert mask.keep[8:13].sum() == 0
        assert mask.keep.sum() == 15

    def test_no_boundaries_keep_everything(self):
        assert build_exit_mask([], 3, 10).keep.sum() == 10

    def test_left_clamped_interval(self):
        mask = build_exit_mask([1], 3, 20)
        assert mask.keep[:5].sum() == 0
        assert mask.keep[5:].sum() == 15

    def test_zeros_form_union_of_intervals(self, rng):
        for _ in range(50):
            t = 40
            bounds = sorted(rng.choice(t, size=3, replace=False).tolist())
            radius = int(rng.integers(0, 6))
            mask = build_exit_mask(bounds, radius, t)
            expected = np.ones(t, dtype=np.uint8)
            for b in bounds:
                expected[max(0, b - radius) : min(t - 1, b + radius) + 1] = 0
            np.testing.assert_array_equal(mask.keep, expected)


def seq_of(rows, origins=None):
    rows = torch.as_tensor(rows, dtype=torch.float32)
    origins = np.arange(rows.shape[0]) if origins is None else np.asarray(origins)
    return FrameFeatureSequence(data=rows, stage_index=1, origin_timestamps=origins)


class TestCompactAndPad:
    def test_all_ones_mask_is_identity(self):
        seq = seq_of(torch.randn(5, 2))
        out = compact(seq, build_exit_mask([], 0, 5))
        torch.testing.assert_close(out.data, seq.data)

    def test_selected_rows_with_origins(self):
        seq = seq_of([[0.0], [1.0], [2.0]])
        mask = build_exit_mask([1], 0, 3)
        out = compact(seq, mask)
        assert out.origin_timestamps.tolist() == [0, 2]
        assert out.data.flatten().tolist() == [0.0, 2.0]

    def test_all_zero_mask_empties_the_sequence(self):
        seq = seq_of(torch.randn(3, 2))
        out = compact(seq, build_exit_mask([1], 5, 3))
        assert len(out) == 0

    def test_pad_identity_when_nothing_exited(self):
        seq = seq_of(torch.randn(6, 3))
        padded, prov = pad_to_full(seq, 6)
        torch.testing.assert_close(padded, seq.data)
        assert prov == {}

    def test_pad_nearest_with_left_tie(self):
        seq = seq_of([[0.0], [4.0]], origins=[0, 4])
        padded, prov = pad_to_full(seq, 5)
        assert padded.flatten().tolist() == [0.0, 0.0, 0.0, 4.0, 4.0]
        assert prov == {1: 0, 2: 0, 3: 4}

    def test_pad_front_gap(self):
        seq = seq_of([[2.0], [3.0]], origins=[2, 3])
        padded, prov = pad_to_full(seq, 4)
        assert padded.flatten().tolist() == [2.0, 2.0, 2.0, 3.0]
        assert prov == {0: 2, 1: 2}

    def test_pad_empty_sequence_rejected(self):
        seq = seq_of(torch.randn(2, 2))
        empty = compact(seq, build_exit_mask([0], 5, 2))
        with pytest.raises(ConfigurationError):
            pad_to_full(empty, 2)


class ScriptedModel:
    """Inference-engine test double with fixed per-detector score tables."""

    def __init__(self, scores, stage_flops=100, det_flops=10):
        self.scores = [np.asarray(s, dtype=np.float64) for s in scores]
        self.num_stages = len(scores)
        self._stage_flops = (
            stage_flops if isinstance(stage_flops, (list, tuple)) else [stage_flops] * self.num_stages
        )
        self._det_flops = (
            det_flops if isinstance(det_flops, (list, tuple)) else [det_flops] * self.num_stages
        )

    def apply_stage(self, l, x):
        return x + 1.0

    def stage_flops_per_frame(self, l):
        return self._stage_flops[l - 1]

    def detector_flops_per_frame(self, l):
        return self._det_flops[l - 1]

    def detector_scores(self, l, scale_features):
        assert len(scale_features) == l
        return ScoreSequence(values=self.scores[l - 1], detector_index=l)


def flat_scores(length, peaks, height=0.9, base=0.1):
    values = np.full(length, base)
    for p in peaks:
        values[p] = height
    return values


def cfgs(num, threshold=0.5, radius=2):
    thresholds = threshold if isinstance(threshold, (list, tuple)) else [threshold] * num
    radii = radius if isinstance(radius, (list, tuple)) else [radius] * num
    return [
        DetectorConfig(order_set=(0,), exit_threshold=thresholds[i], exit_radius=radii[i])
        for i in range(num)
    ]


def features(length, channels=2):
    return seq_of(torch.zeros(length, channels))


class TestDynamicInference:
    def test_exit_disabled_limit(self):
        """Near-one thresholds and zero radii reduce to the deepest detector."""
        t = 30
        model = ScriptedModel(
            [flat_scores(t, [5]), flat_scores(t, [14]), flat_scores(t, [5, 22])]
        )
        bounds, state, ledger = run_dynamic_inference(
            features(t),
            model,
            cfgs(3, threshold=[1 - 1e-9, 1 - 1e-9, 0.5], radius=0),
            validate=True,
        )
        assert bounds == [5, 22]
        assert ledger.frames_processed == [t, t, t]
        assert np.all(state.exit_stage == 3)

    def test_single_stage_is_static_inference(self):
        t = 20
        model = ScriptedModel([flat_scores(t, [7, 13])])
        bounds, state, ledger = run_dynamic_inference(features(t), model, cfgs(1), validate=True)
        assert bounds == [7, 13]
        assert ledger.frames_processed == [t]

    def test_hand_counted_ledger_after_one_exit(self):
        """Detector 1 fires at frame 10 with radius 2: stage 2 sees T-5 frames."""
        t = 40
        stage_flops = [11, 13, 17]
        model = ScriptedModel(
            [flat_scores(t, [10]), flat_scores(t, []), flat_scores(t, [])],
            stage_flops=stage_flops,
            det_flops=[3, 5, 7],
        )
        bounds, state, ledger = run_dynamic_inference(features(t), model, cfgs(3, radius=2),
                                                      validate=True)
        assert bounds == [10]
        assert ledger.frames_processed == [t, t - 5, t - 5]
        assert ledger.backbone_macs[1] == (t - 5) * stage_flops[1]
        assert ledger.detector_macs == [t * 3, t * 5, t * 7]
        assert np.all(state.exit_stage[8:13] == 1)
        assert np.all(state.exit_stage[:8] == 3) and np.all(state.exit_stage[13:] == 3)

    def test_partition_every_frame_exits_once(self, rng):
        t = 50
        for _ in range(10):
            tables = [np.clip(rng.random(t), 0.01, 0.99) for _ in range(3)]
            model = ScriptedModel(tables)
            _, state, ledger = run_dynamic_inference(
                features(t), model, cfgs(3, threshold=0.7, radius=3), validate=True
            )
            counts = np.bincount(state.exit_stage, minlength=4)[1:]
            assert counts.sum() == t

    def test_padded_position_suppression(self):
        """A deeper peak landing on an exited (padded) frame is discarded."""
        t = 30
        model = ScriptedModel([flat_scores(t, [10]), flat_scores(t, [11, 20]), flat_scores(t, [])])
        bounds, state, _ = run_dynamic_inference(features(t), model, cfgs(3, radius=2),
                                                 validate=True)
        # frame 11 sits inside detector 1's exit interval [8, 12] -> padded at stage 2
        assert bounds == [10, 20]
        assert state.recorded_boundaries[2] == [20]

    def test_monotone_compute_in_exit_radius(self):
        """For fixed score tables, larger radii never process more frames."""
        t = 60
        tables = [flat_scores(t, [15, 45]), flat_scores(t, [30]), flat_scores(t, [])]
        previous = None
        for radius in (0, 1, 2, 4, 8):
            model = ScriptedModel(tables)
            _, _, ledger = run_dynamic_inference(features(t), model, cfgs(3, radius=radius))
            processed = ledger.frames_processed
            if previous is not None:
                assert all(a <= b for a, b in zip(processed[1:], previous[1:]))
            previous = processed

    def test_all_frames_exited_skips_later_stages(self):
        t = 10
        model = ScriptedModel([flat_scores(t, [3, 7]), flat_scores(t, []), flat_scores(t, [])])
        bounds, state, ledger = run_dynamic_inference(features(t), model, cfgs(3, radius=5),
                                                      validate=True)
        assert bounds == [3, 7]
        assert ledger.frames_processed == [t, 0, 0]
        assert ledger.detector_macs[1] == 0 and ledger.detector_macs[2] == 0
        assert np.all(state.exit_stage == 1)

    def test_frozen_scores_follow_exit_stage(self):
        t = 20
        d1 = flat_scores(t, [10], height=0.8)
        d2 = np.full(t, 0.3)
        d3 = np.full(t, 0.2)
        model = ScriptedModel([d1, d2, d3])
        _, state, _ = run_dynamic_inference(features(t), model, cfgs(3, radius=1), validate=True)
        np.testing.assert_allclose(state.final_scores[9:12], d1[9:12])
        np.testing.assert_allclose(state.final_scores[:9], 0.2)

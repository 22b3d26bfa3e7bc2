"""Difference mixer, encoder blocks, similarity maps, gating, and the head."""

import numpy as np
import pytest
import torch

import dynexit.detector as detector_mod
from dynexit.detector import (
    BoundaryDetector,
    ContrastEncoder,
    CrossGate,
    DetectorConfig,
    DiffEncoder,
    DiffMixer,
    MultiOrderMixer,
    pairwise_similarity,
    temporal_difference,
    window_max_pool,
)
from dynexit.errors import ConfigurationError, NumericFault


def window(values, dtype=torch.float32):
    """1-timestamp, 1-scale, 1-channel window tensor from a flat list."""
    return torch.as_tensor(values, dtype=dtype).reshape(1, 1, 1, -1)


class TestTemporalDifference:
    def test_finite_difference_definition(self):
        out = temporal_difference(window([1.0, 3.0, 6.0]))
        assert out.flatten().tolist() == [0.0, 2.0, 3.0]

    def test_constant_window_vanishes(self):
        out = temporal_difference(window([4.2, 4.2, 4.2]))
        assert out.abs().max() == 0.0

    def test_second_application(self):
        out = temporal_difference(temporal_difference(window([1.0, 3.0, 6.0])))
        assert out.flatten().tolist() == [0.0, 2.0, 1.0]

    def test_short_window_rejected(self):
        with pytest.raises(ConfigurationError):
            temporal_difference(window([1.0]))


class TestDiffMixer:
    def test_passthrough_is_identity(self, rng):
        mixer = DiffMixer(channels=6)
        mixer.set_passthrough()
        x = torch.as_tensor(rng.normal(size=(2, 5, 2, 3, 7)), dtype=torch.float32)
        torch.testing.assert_close(mixer(x), x)

    def test_zero_input_with_norm_shift(self):
        mixer = DiffMixer(channels=4)
        mixer.set_passthrough()
        with torch.no_grad():
            mixer.norm.bias.fill_(0.25)
        x = torch.zeros(1, 3, 2, 2, 5)
        torch.testing.assert_close(mixer(x), torch.full_like(x, 0.25))

    def test_convolution_flip_symmetry(self, rng):
        """Reversing the window axis and the kernel reverses the output."""
        fwd = DiffMixer(channels=4)
        rev = DiffMixer(channels=4)
        with torch.no_grad():
            fwd.conv.weight.copy_(torch.as_tensor(rng.normal(size=(4, 1, 3)), dtype=torch.float32))
            rev.conv.weight.copy_(fwd.conv.weight.flip(-1))
            for m in (fwd, rev):
                m.norm.running_mean.copy_(torch.as_tensor(rng.normal(size=4), dtype=torch.float32))
                m.norm.running_var.fill_(1.3)
            rev.norm.running_mean.copy_(fwd.norm.running_mean)
        fwd.eval()
        rev.eval()
        x = torch.as_tensor(rng.normal(size=(1, 4, 1, 4, 9)), dtype=torch.float32)
        torch.testing.assert_close(rev(x.flip(-1)), fwd(x).flip(-1), rtol=1e-5, atol=1e-6)


class TestMultiOrderMixer:
    def hand_case(self, orders):
        mixer = MultiOrderMixer(channels=1, order_set=orders)
        mixer.set_passthrough()
        return mixer(window([1.0, 3.0, 6.0])).flatten().tolist()

    def test_zeroth_order_only(self):
        assert self.hand_case((0,)) == [1.0, 3.0, 6.0]

    def test_all_orders_hand_evaluation(self):
        assert self.hand_case((0, 1, 2)) == [1.0, 7.0, 10.0]

    def test_partial_sums(self):
        assert self.hand_case((0, 1)) == [1.0, 5.0, 9.0]
        assert self.hand_case((0, 2)) == [1.0, 5.0, 7.0]

    def test_constant_window_reduces_to_identity(self):
        mixer = MultiOrderMixer(channels=1, order_set=(0, 1, 2))
        mixer.set_passthrough()
        x = window([2.5, 2.5, 2.5, 2.5])
        torch.testing.assert_close(mixer(x), x)

    def test_additivity_of_order_terms(self, rng):
        """With passthrough mixers the full sum equals the three terms added."""
        x = torch.as_tensor(rng.normal(size=(1, 2, 1, 2, 5)), dtype=torch.float32)
        full = MultiOrderMixer(channels=2, order_set=(0, 1, 2))
        full.set_passthrough()
        d1 = temporal_difference(x)
        expected = x + d1 + temporal_difference(d1)
        torch.testing.assert_close(full(x), expected)

    def test_order_set_needs_zero(self):
        with pytest.raises(ConfigurationError):
            MultiOrderMixer(channels=1, order_set=(1, 2))


class TestEncoder:
    def test_scale_axis_concatenation(self):
        cfg = DetectorConfig(order_set=(0, 1, 2), n_blocks=3)
        enc = DiffEncoder(scales=3, channels=4, cfg=cfg)
        out = enc(torch.randn(1, 6, 3, 4, 5))
        assert out.shape == (1, 6, 9, 4, 5)

    def test_single_block_has_no_pooling(self, rng):
        cfg = DetectorConfig(order_set=(0,), n_blocks=1)
        enc = DiffEncoder(scales=1, channels=3, cfg=cfg)
        x = torch.as_tensor(rng.normal(size=(1, 4, 1, 3, 5)), dtype=torch.float32)
        enc.eval()
        block_only = x + enc.blocks[0].mix(x)
        block_only = block_only + enc.blocks[0].ffn(block_only)
        torch.testing.assert_close(enc(x), block_only)

    def test_max_pool_hand_case(self):
        pooled = window_max_pool(window([1.0, 5.0, 2.0, 0.0]))
        assert pooled.flatten().tolist() == [5.0, 5.0, 5.0, 2.0]


class TestPairwiseSimilarity:
    def test_identical_vectors(self):
        d = torch.ones(1, 1, 1, 4, 3)
        sim = pairwise_similarity(d)
        torch.testing.assert_close(sim, torch.ones(1, 1, 1, 3, 3))

    def test_orthogonal_and_opposite(self):
        d = torch.tensor([[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]]).reshape(1, 1, 1, 2, 3)
        sim = pairwise_similarity(d)[0, 0, 0]
        assert sim[0, 1].item() == pytest.approx(0.0)
        assert sim[0, 2].item() == pytest.approx(-1.0)

    def test_zero_vector_convention(self):
        d = torch.tensor([[1.0, 0.0], [1.0, 0.0]]).reshape(1, 1, 1, 2, 2)
        sim = pairwise_similarity(d)[0, 0, 0]
        assert sim[1, 1].item() == 0.0
        assert sim[0, 1].item() == 0.0

    def test_symmetry_diagonal_range(self, rng):
        d = torch.as_tensor(rng.normal(size=(2, 3, 4, 6, 7)), dtype=torch.float32)
        sim = pairwise_similarity(d)
        torch.testing.assert_close(sim, sim.transpose(-2, -1), rtol=0, atol=0)
        diag = sim.diagonal(dim1=-2, dim2=-1)
        assert (diag - 1.0).abs().max() < 1e-5
        assert sim.min() >= -1.0 - 1e-6 and sim.max() <= 1.0 + 1e-6


class TestContrastEncoder:
    def test_zero_stack_zero_biases(self):
        enc = ContrastEncoder(in_maps=3, channels=8)
        with torch.no_grad():
            enc.conv1.bias.zero_()
            enc.conv2.bias.zero_()
        out = enc(torch.zeros(1, 5, 3, 4, 4))
        assert out.abs().max() == 0.0

    def test_constant_stack_is_constant_over_time(self):
        enc = ContrastEncoder(in_maps=2, channels=4)
        out = enc(torch.full((1, 6, 2, 5, 5), 0.3))
        torch.testing.assert_close(out, out[:, :1].expand_as(out))

    def test_timestamp_permutation_equivariance(self, rng):
        enc = ContrastEncoder(in_maps=2, channels=4)
        s = torch.as_tensor(rng.normal(size=(1, 8, 2, 5, 5)), dtype=torch.float32)
        perm = torch.as_tensor(rng.permutation(8))
        torch.testing.assert_close(enc(s[:, perm]), enc(s)[:, perm])


class TestCrossGate:
    def test_neutral_gates_halve_both_branches(self, rng):
        gate = CrossGate(dim_a=5, dim_b=3)
        with torch.no_grad():
            for seq in (gate.gate_from_a, gate.gate_from_b):
                for layer in seq:
                    if hasattr(layer, "weight"):
                        layer.weight.zero_()
                        layer.bias.zero_()
        a = torch.as_tensor(rng.normal(size=(1, 4, 5)), dtype=torch.float32)
        b = torch.as_tensor(rng.normal(size=(1, 4, 3)), dtype=torch.float32)
        out = gate(a, b)
        torch.testing.assert_close(out[..., :5], 0.5 * a)
        torch.testing.assert_close(out[..., 5:], 0.5 * b)

    def test_zero_branch_stays_zero(self, rng):
        gate = CrossGate(dim_a=4, dim_b=4)
        a = torch.as_tensor(rng.normal(size=(1, 3, 4)), dtype=torch.float32)
        out = gate(a, torch.zeros(1, 3, 4))
        assert out[..., 4:].abs().max() == 0.0

    def test_outputs_bounded_by_inputs(self, rng):
        gate = CrossGate(dim_a=6, dim_b=2)
        a = torch.as_tensor(rng.normal(size=(2, 10, 6)), dtype=torch.float32)
        b = torch.as_tensor(rng.normal(size=(2, 10, 2)), dtype=torch.float32)
        out = gate(a, b)
        bound = max(a.abs().max().item(), b.abs().max().item())
        assert out.abs().max().item() <= bound


def small_detector(order_set=(0, 1, 2), scales=1, channels=3, n_blocks=2):
    cfg = DetectorConfig(order_set=order_set, n_blocks=n_blocks)
    return BoundaryDetector(scales=scales, channels=channels, cfg=cfg,
                            pcm_channels=4, se_hidden=4, cls_hidden=8)


class TestBoundaryDetector:
    def test_scores_live_in_open_interval(self, rng):
        det = small_detector().eval()
        w = torch.as_tensor(rng.normal(size=(12, 1, 3, 5)), dtype=torch.float32)
        seq = det.score_sequence(w)
        assert len(seq) == 12
        assert np.all((seq.values > 0) & (seq.values < 1))

    def test_determinism(self, rng):
        det = small_detector().eval()
        w = torch.as_tensor(rng.normal(size=(9, 1, 3, 5)), dtype=torch.float32)
        a = det.score_sequence(w).values
        b = det.score_sequence(w.clone()).values
        np.testing.assert_array_equal(a, b)

    def test_nan_input_raises_with_detector_index(self):
        det = small_detector().eval()
        det.detector_index = 2
        w = torch.full((4, 1, 3, 5), float("nan"))
        with pytest.raises(NumericFault, match="detector 2"):
            det.forward(w, strict=True)

    def test_zero_order_detector_never_touches_difference_paths(self, rng, monkeypatch):
        """Order-{0} heads are structurally blind to the higher-order terms."""
        det = small_detector(order_set=(0,)).eval()
        for block in det.encoder.blocks:
            assert block.mix.g1 is None and block.mix.g2 is None
        w = torch.as_tensor(rng.normal(size=(6, 1, 3, 5)), dtype=torch.float32)
        before = det.score_sequence(w).values

        def bomb(x):
            raise AssertionError("difference path evaluated")

        monkeypatch.setattr(detector_mod, "temporal_difference", bomb)
        after = det.score_sequence(w).values
        np.testing.assert_array_equal(before, after)

    def test_norm_inference_is_affine(self, rng):
        """Frozen statistics reduce the mixer norm to a per-channel affine map."""
        mixer = DiffMixer(channels=3)
        with torch.no_grad():
            mixer.norm.running_mean.copy_(torch.tensor([0.1, -0.2, 0.3]))
            mixer.norm.running_var.copy_(torch.tensor([1.5, 0.7, 2.0]))
            mixer.norm.weight.copy_(torch.tensor([2.0, 1.0, 0.5]))
            mixer.norm.bias.copy_(torch.tensor([0.0, 0.1, -0.1]))
        mixer.eval()
        x = torch.as_tensor(rng.normal(size=(1, 2, 1, 3, 5)), dtype=torch.float32)
        pre = torch.nn.functional.silu(
            mixer.conv(torch.nn.functional.pad(x.reshape(2, 3, 5), (1, 1), mode="replicate"))
        )
        mean = mixer.norm.running_mean.view(1, 3, 1)
        var = mixer.norm.running_var.view(1, 3, 1)
        gamma = mixer.norm.weight.view(1, 3, 1)
        beta = mixer.norm.bias.view(1, 3, 1)
        expected = (pre - mean) / torch.sqrt(var + mixer.norm.eps) * gamma + beta
        torch.testing.assert_close(mixer(x).reshape(2, 3, 5), expected, rtol=1e-5, atol=1e-6)

    def test_time_reversal_with_symmetric_parameters(self, rng):
        """Symmetrized kernels make interior scores reverse with the video."""
        det = small_detector(order_set=(0,), scales=1, channels=3, n_blocks=2).double().eval()
        with torch.no_grad():
            for block in det.encoder.blocks:
                w = block.mix.g0.conv.weight
                w.copy_((w + w.flip(-1)) / 2)
                block.mix.g0.norm.eps = 0.0
                dw = block.ffn.dw.weight
                dw.copy_((dw + dw.flip(-1)) / 2)
            for conv in (det.contrast.conv1, det.contrast.conv2):
                conv.weight.copy_((conv.weight + conv.weight.flip(-1).flip(-2)) / 2)
        T, k = 30, 2
        feats = torch.as_tensor(rng.normal(size=(T, 1, 3)), dtype=torch.float64)
        from dynexit.features import unfold_window_axis

        fwd = det.score_sequence(unfold_window_axis(feats, k)).values
        rev = det.score_sequence(unfold_window_axis(feats.flip(0), k)).values
        interior = slice(k, T - k)
        np.testing.assert_allclose(rev[::-1][interior], fwd[interior], atol=1e-10)

    def test_macs_hand_count(self):
        """Spell the per-frame MAC formula out for one small configuration."""
        det = small_detector(order_set=(0,), scales=1, channels=2, n_blocks=1)
        w = 3
        mix = 1 * 3 * 2 * w                # one depthwise mixer application
        ffn = 2 * 4 * w + 3 * 4 * w + 4 * 2 * w
        sim = 1 * 2 * w * (w + 1)          # dot products plus norms
        pcm = 4 * 1 * 9 * w * w + 4 * 4 * 9 * w * w
        gates = 2 * 4 + 4 * 4 + 4 * 4 + 4 * 2
        cls = (2 + 4) * 8 + 8
        assert det.macs_per_frame(w) == mix + ffn + sim + pcm + gates + cls

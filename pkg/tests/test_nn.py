from __future__ import annotations

import numpy as np
import pytest

from moskit.errors import ConfigError, DomainError, TrainingError
from moskit.nn import (
    AdamState,
    Affine,
    Blstm,
    GradCheckReport,
    ParamTensor,
    SequenceBatch,
    adam_step,
    affine_forward,
    blstm_forward,
    grad_check,
    masked_mean_pool,
)


class TestAffine:
    def test_identity(self):
        y = affine_forward([1.0, 2.0], np.eye(2), [0.0, 0.0])
        assert np.array_equal(y, [1.0, 2.0])

    def test_zero_input_returns_bias(self, rng):
        w = rng.normal(size=(2, 2))
        y = affine_forward([0.0, 0.0], w, [3.0, -1.0])
        assert np.array_equal(y, [3.0, -1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            affine_forward([1.0, 2.0, 3.0], np.eye(2), [0.0, 0.0])
        with pytest.raises(ConfigError):
            affine_forward([1.0, 2.0], np.eye(2), [0.0, 0.0, 0.0])

    def test_gradients_match_finite_differences(self, rng):
        layer = Affine("aff", 3, 2, rng)
        x = rng.normal(size=(4, 3))
        coef = rng.normal(size=(4, 2))

        def loss_fn():
            y = layer.forward(x)
            layer.backward(coef)
            return float((coef * y).sum())

        report = grad_check(loss_fn, layer.params, h=1e-5)
        assert report.max_rel_err < 1e-6


class TestSequenceBatch:
    def test_masked_slots_zeroed(self):
        data = np.full((1, 3, 2), 9.0)
        mask = np.array([[True, True, False]])
        sb = SequenceBatch(data, mask)
        assert np.array_equal(sb.data[0, 2], [0.0, 0.0])

    def test_all_masked_row_rejected(self):
        with pytest.raises(DomainError):
            SequenceBatch(np.zeros((1, 3, 2)), np.zeros((1, 3), dtype=bool))

    def test_from_sequences_pads_right(self):
        sb = SequenceBatch.from_sequences([np.ones((2, 3)), np.ones((4, 3))])
        assert sb.data.shape == (2, 4, 3)
        assert sb.mask.tolist() == [[True, True, False, False], [True] * 4]


class TestMaskedMeanPool:
    def test_all_real(self):
        sb = SequenceBatch(np.array([[[1.0, 3.0], [3.0, 5.0]]]), np.ones((1, 2), bool))
        assert np.array_equal(masked_mean_pool(sb), [[2.0, 4.0]])

    def test_mask_excludes_frames(self):
        sb = SequenceBatch(
            np.array([[[7.0, 7.0], [0.0, 0.0]]]), np.array([[True, False]])
        )
        assert np.array_equal(masked_mean_pool(sb), [[7.0, 7.0]])

    def test_matches_naive_loop(self, rng):
        data = rng.normal(size=(10, 8, 4))
        mask = rng.random((10, 8)) < 0.7
        mask[:, 0] = True
        sb = SequenceBatch(data, mask)
        pooled = masked_mean_pool(sb)
        for b in range(10):
            total = np.zeros(4)
            count = 0
            for t in range(8):
                if mask[b, t]:
                    total += data[b, t]
                    count += 1
            assert np.max(np.abs(pooled[b] - total / count)) < 1e-12

    def test_invariant_to_masked_values(self, rng):
        mask = np.array([[True, False, True]])
        a = rng.normal(size=(1, 3, 2))
        b = a.copy()
        b[0, 1] = 1e6  # garbage in the padded slot
        pa = masked_mean_pool(SequenceBatch(a, mask))
        pb = masked_mean_pool(SequenceBatch(b, mask))
        assert np.array_equal(pa, pb)


class TestBlstm:
    def _zeroed(self, blstm: Blstm) -> Blstm:
        for p in blstm.params:
            p.value[...] = 0.0
        return blstm

    def test_zero_weights_fixed_point(self, rng):
        blstm = self._zeroed(Blstm("b", 4, 3, rng))
        sb = SequenceBatch(np.zeros((2, 5, 4)), np.ones((2, 5), bool))
        outputs, final = blstm_forward(sb, blstm)
        assert np.all(outputs == 0.0)
        assert np.all(final == 0.0)

    def test_shape_contract(self, rng):
        blstm = Blstm("b", 4, 3, rng)
        sb = SequenceBatch(rng.normal(size=(1, 5, 4)), np.ones((1, 5), bool))
        outputs, final = blstm_forward(sb, blstm)
        assert outputs[0].shape == (5, 6)
        assert final[0].shape == (6,)

    def test_direction_symmetry(self, rng):
        blstm = Blstm("b", 3, 4, rng)
        # backward cell shares the forward cell's weights
        blstm.bw.w.value[...] = blstm.fw.w.value
        blstm.bw.u.value[...] = blstm.fw.u.value
        blstm.bw.b.value[...] = blstm.fw.b.value
        x = rng.normal(size=(1, 6, 3))
        full = np.ones((1, 6), bool)
        out_fwd, _ = blstm_forward(SequenceBatch(x, full), blstm)
        out_rev, _ = blstm_forward(SequenceBatch(x[:, ::-1], full), blstm)
        h = blstm.hidden
        backward_track = out_fwd[0, :, h:]
        forward_track_reversed = out_rev[0, ::-1, :h]
        assert np.max(np.abs(backward_track - forward_track_reversed)) < 1e-12

    def test_final_hidden_at_boundary_frames(self, rng):
        blstm = Blstm("b", 3, 2, rng)
        sb = SequenceBatch.from_sequences(
            [rng.normal(size=(5, 3)), rng.normal(size=(2, 3))]
        )
        outputs, final = blstm_forward(sb, blstm)
        h = blstm.hidden
        lengths = sb.mask.sum(axis=1)
        for b in range(2):
            last = lengths[b] - 1
            assert np.array_equal(final[b, :h], outputs[b, last, :h])
            assert np.array_equal(final[b, h:], outputs[b, 0, h:])

    def test_masked_frames_do_not_update_state(self, rng):
        blstm = Blstm("b", 3, 2, rng)
        short = rng.normal(size=(3, 3))
        alone = SequenceBatch.from_sequences([short])
        padded = SequenceBatch(
            np.concatenate([short[None], rng.normal(size=(1, 2, 3))], axis=1),
            np.array([[True, True, True, False, False]]),
        )
        out_a, fin_a = blstm_forward(alone, blstm)
        out_b, fin_b = blstm_forward(padded, blstm)
        assert np.array_equal(out_a[0], out_b[0, :3])
        assert np.all(out_b[0, 3:] == 0.0)
        assert np.array_equal(fin_a[0], fin_b[0])

    def test_empty_sequence_rejected(self, rng):
        with pytest.raises(DomainError):
            SequenceBatch(np.zeros((1, 0, 3)), np.zeros((1, 0), bool))

    def test_forward_deterministic(self, rng):
        blstm = Blstm("b", 3, 2, rng)
        sb = SequenceBatch(rng.normal(size=(2, 4, 3)), np.ones((2, 4), bool))
        o1, f1 = blstm_forward(sb, blstm)
        o2, f2 = blstm_forward(sb, blstm)
        assert np.array_equal(o1, o2) and np.array_equal(f1, f2)


class TestAdam:
    def test_zero_grad_is_identity(self):
        p = ParamTensor("w", [1.0, -2.0, 3.0])
        state = AdamState(lr=0.1)
        before = p.value.copy()
        adam_step([p], state)
        assert np.array_equal(p.value, before)
        assert state.step == 1

    @pytest.mark.parametrize("g", [2.0, -0.5])
    def test_first_step_magnitude_is_lr(self, g):
        p = ParamTensor("w", [0.0])
        p.grad[...] = g
        state = AdamState(lr=0.1, eps=1e-12)
        adam_step([p], state)
        assert abs(p.value[0] - (-0.1 * np.sign(g))) < 1e-9

    def test_converges_on_scalar_quadratic(self):
        p = ParamTensor("w", [0.0])
        state = AdamState(lr=0.1)
        for _ in range(100):
            p.zero_grad()
            p.grad[...] = 2.0 * (p.value - 3.0)
            adam_step([p], state)
        assert abs(p.value[0] - 3.0) < 0.05

    def test_nonfinite_gradient_names_parameter(self):
        p = ParamTensor("head.pq.W", [1.0])
        p.grad[...] = np.nan
        with pytest.raises(TrainingError, match="head.pq.W"):
            adam_step([p], AdamState())


class TestGradCheck:
    def test_affine_tanh_fragment(self, rng):
        layer = Affine("f", 3, 2, rng)
        x = rng.normal(size=(5, 3))

        def loss_fn():
            act = np.tanh(layer.forward(x))
            layer.backward(1.0 - act * act)
            return float(act.sum())

        report = grad_check(loss_fn, layer.params, h=1e-5)
        assert report.max_rel_err < 1e-6

    def test_blstm_head_end_to_end(self, rng):
        blstm = Blstm("b", 3, 2, rng)
        sb = SequenceBatch.from_sequences(
            [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))]
        )
        c_out = rng.normal(size=(2, 4, 4))
        c_fin = rng.normal(size=(2, 4))

        def loss_fn():
            outputs, final = blstm.forward(sb)
            blstm.backward(c_out * sb.mask[:, :, None], c_fin)
            return float((outputs * c_out).sum() + (final * c_fin).sum())

        report = grad_check(loss_fn, blstm.params, h=1e-5)
        assert report.max_rel_err < 1e-4

    def test_zero_parameter_fragment(self):
        report = grad_check(lambda: 0.0, [])
        assert report == GradCheckReport(per_param={}, max_rel_err=0.0)

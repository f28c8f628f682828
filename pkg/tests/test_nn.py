import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocap import nn


def rng():
    return nn.rng_from_seed(0)


class TestSoftmax:
    def test_symmetry(self):
        out = nn.softmax(np.array([0.0, 0.0])).data
        assert np.allclose(out, [0.5, 0.5])

    def test_hand_value(self):
        out = nn.softmax(np.array([0.0, math.log(3.0)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance_no_overflow(self):
        out = nn.softmax(np.array([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert np.allclose(out, [0.5, 0.5])

    @given(st.integers(1, 64), st.floats(-1e3, 1e3), st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one(self, n, scale, seed):
        x = nn.rng_from_seed(seed).normal(0.0, 1.0, n) + scale
        out = nn.softmax(x).data
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) < 1e-12


class TestAttention:
    def test_identical_keys_average_values(self):
        q = nn.Tensor(rng().normal(0, 1, (3, 8)))
        k = nn.Tensor(np.tile(rng().normal(0, 1, (1, 8)), (5, 1)))
        v = nn.Tensor(rng().normal(0, 1, (5, 8)))
        out = nn.multi_head_attention(q, k, v, n_heads=1).data
        assert np.allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)

    def test_single_token_passthrough(self):
        q = nn.Tensor(rng().normal(0, 1, (1, 4)))
        v = nn.Tensor(rng().normal(0, 1, (1, 4)))
        out = nn.multi_head_attention(q, q, v, n_heads=1).data
        assert np.allclose(out, v.data, atol=1e-12)

    def test_causal_position_zero_independent_of_future(self):
        r = rng()
        x1 = r.normal(0, 1, (2, 8))
        x2 = x1.copy()
        x2[1] += 3.0  # perturb the future token only
        mask = nn.causal_mask(2, np.float64)
        outs = []
        for x in (x1, x2):
            t = nn.Tensor(x)
            outs.append(nn.multi_head_attention(t, t, t, 2, mask=mask).data)
        assert np.array_equal(outs[0][0], outs[1][0])
        assert not np.array_equal(outs[0][1], outs[1][1])

    def test_dimension_mismatch(self):
        with pytest.raises(nn.DimensionMismatch):
            nn.MultiHeadAttention(6, 4, rng())


class TestRmsNorm:
    def test_forward_formula(self):
        x = rng().normal(0, 2, (3, 8))
        gain = np.linspace(0.5, 1.5, 8)
        out = nn.rms_norm(nn.Tensor(x), nn.Tensor(gain)).data
        expected = x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6) * gain
        assert np.allclose(out, expected, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = nn.Tensor(np.zeros((3, 4)))
        loss = nn.cross_entropy(logits, np.array([0, 1, 2]))
        assert abs(float(loss.data) - math.log(4.0)) < 1e-12

    def test_margin_monotone(self):
        losses = []
        for margin in (0.0, 1.0, 4.0, 16.0):
            logits = np.zeros((1, 5))
            logits[0, 2] = margin
            losses.append(float(nn.cross_entropy(
                nn.Tensor(logits), np.array([2])).data))
        assert losses == sorted(losses, reverse=True)
        assert losses[-1] < 1e-6

    def test_ignore_mask_means_over_remaining(self):
        r = rng()
        logits = nn.Tensor(r.normal(0, 1, (4, 6)))
        targets = np.array([0, 1, 2, 3])
        mask = np.array([False, True, False, True])  # True = excluded
        loss = float(nn.cross_entropy(logits, targets, ignore_mask=mask).data)
        per_pos = []
        for i in (0, 2):
            row = logits.data[i]
            per_pos.append(-(row[targets[i]]
                             - math.log(np.exp(row - row.max()).sum())
                             - row.max()))
        assert abs(loss - np.mean(per_pos)) < 1e-12

    def test_empty_target_set(self):
        logits = nn.Tensor(np.zeros((2, 3)))
        with pytest.raises(nn.EmptyTargetSet):
            nn.cross_entropy(logits, np.array([0, 1]),
                             ignore_mask=np.array([True, True]))


class TestAdamW:
    def test_hand_value_no_decay(self):
        p = nn.parameter(np.array([1.0]))
        p.grad = np.array([1.0], dtype=np.float32)
        nn.AdamW({"p": p}, lr=0.1, weight_decay=0.0, clip_norm=None).step()
        assert abs(float(p.data[0]) - 0.9) < 1e-6

    def test_hand_value_with_decay(self):
        p = nn.parameter(np.array([1.0]))
        p.grad = np.array([1.0], dtype=np.float32)
        nn.AdamW({"p": p}, lr=0.1, weight_decay=0.1, clip_norm=None).step()
        assert abs(float(p.data[0]) - 0.89) < 1e-6

    def test_zero_grad_zero_decay_leaves_parameter(self):
        p = nn.parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2, dtype=np.float32)
        nn.AdamW({"p": p}, lr=0.1, weight_decay=0.0, clip_norm=None).step()
        assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))

    def test_zero_lr_bit_identical(self):
        p = nn.parameter(np.array([0.5, 0.25]))
        before = p.data.copy()
        p.grad = np.array([1.0, -1.0], dtype=np.float32)
        nn.AdamW({"p": p}, lr=0.0, weight_decay=0.0, clip_norm=None).step()
        assert np.array_equal(p.data, before)

    def test_global_norm_clip(self):
        # grad norm 30 clipped to 1.0: effective grad scaled by 1/30, but the
        # adaptive step normalizes scale away at step 1, so compare against
        # an unclipped run with pre-scaled gradients instead
        p1 = nn.parameter(np.array([1.0]))
        p1.grad = np.array([30.0], dtype=np.float32)
        nn.AdamW({"p": p1}, lr=0.1, clip_norm=1.0).step()
        p2 = nn.parameter(np.array([1.0]))
        p2.grad = np.array([1.0], dtype=np.float32)
        nn.AdamW({"p": p2}, lr=0.1, clip_norm=None).step()
        assert np.allclose(p1.data, p2.data, atol=1e-7)

    def test_step_lr_override(self):
        p = nn.parameter(np.array([1.0]))
        p.grad = np.array([1.0], dtype=np.float32)
        opt = nn.AdamW({"p": p}, lr=99.0, weight_decay=0.0, clip_norm=None)
        opt.step(lr=0.1)
        assert abs(float(p.data[0]) - 0.9) < 1e-6


class TestBackwardOps:
    def test_broadcast_add_backward(self):
        a = nn.Tensor(np.ones((3, 1)), requires_grad=True)
        b = nn.Tensor(np.ones((1, 4)), requires_grad=True)
        nn.tsum((a + b) * 2.0).backward()
        assert np.array_equal(a.grad, np.full((3, 1), 8.0))
        assert np.array_equal(b.grad, np.full((1, 4), 6.0))

    def test_embedding_accumulates_repeated_ids(self):
        table = nn.Tensor(np.zeros((4, 2)), requires_grad=True)
        out = nn.embedding(table, np.array([1, 1, 3]))
        nn.tsum(out).backward()
        assert np.array_equal(table.grad[1], [2.0, 2.0])
        assert np.array_equal(table.grad[3], [1.0, 1.0])
        assert np.array_equal(table.grad[0], [0.0, 0.0])

    def test_getitem_scatter(self):
        t = nn.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        nn.tsum(t[1:, :2]).backward()
        expected = np.zeros((3, 4))
        expected[1:, :2] = 1.0
        assert np.array_equal(t.grad, expected)

    def test_batched_matmul_grad_check(self):
        r = rng()
        a = nn.Tensor(r.normal(0, 1, (2, 3, 4)), requires_grad=True)
        b = nn.Tensor(r.normal(0, 1, (4, 5)), requires_grad=True)
        err = nn.grad_check(lambda: nn.tsum(nn.matmul(a, b) * nn.matmul(a, b)),
                            [a, b], h=1e-5)
        assert err < 1e-7

    def test_gelu_grad_check(self):
        x = nn.Tensor(rng().normal(0, 2, (4, 3)), requires_grad=True)
        err = nn.grad_check(lambda: nn.tsum(nn.gelu(x) * nn.gelu(x)), [x],
                            h=1e-5)
        assert err < 1e-6


class TestGradCheck:
    def test_polynomial_exactness(self):
        w = nn.Tensor(np.array(3.0), requires_grad=True)
        err = nn.grad_check(lambda: w * w, [w], h=1e-4)
        assert err < 1e-8

    def test_tiny_attention_model_all_entries(self):
        r = nn.rng_from_seed(2)
        blocks = [nn.TransformerBlock(8, 2, 2, r, dtype=np.float64)
                  for _ in range(2)]
        x = nn.Tensor(r.normal(0, 1, (3, 8)), requires_grad=True)
        params = {"x": x}
        for i, b in enumerate(blocks):
            params.update(b.named_parameters(prefix=f"b{i}."))

        def f():
            h = x
            for b in blocks:
                h = b(h)
            return nn.tsum(h * h)

        err = nn.grad_check(f, params, h=(1e-5, 1e-4, 1e-3))
        assert err < 1e-4

    def test_corrupted_backward_detected(self):
        w = nn.Tensor(np.array([3.0]), requires_grad=True)

        def doubled_square(t):
            out = nn.Tensor(t.data * t.data, requires_grad=True, parents=(t,))

            def backward():
                t._accum(out.grad * 4.0 * t.data)  # wrong: claims d/dw = 4w

            out._backward = backward
            return out

        err = nn.grad_check(lambda: nn.tsum(doubled_square(w)), [w], h=1e-5)
        assert abs(err - 0.5) < 1e-3

    def test_nonfinite_objective_raises(self):
        w = nn.Tensor(np.array(np.inf), requires_grad=True)
        with pytest.raises(nn.NonFiniteValue):
            nn.grad_check(lambda: w * w, [w])


class TestModule:
    def test_named_parameters_nested_dotted(self):
        r = rng()
        block = nn.TransformerBlock(8, 2, 2, r)
        names = set(block.named_parameters())
        assert "attn.q.weight" in names
        assert "ffn.up.bias" in names
        assert "attn_gain" in names

    def test_linear_from_weights(self):
        w = np.eye(3, dtype=np.float32)
        layer = nn.Linear.from_weights(w, np.zeros(3, dtype=np.float32))
        x = nn.Tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
        assert np.array_equal(layer(x).data, x.data)

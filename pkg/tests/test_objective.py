import math

import numpy as np
import pytest

from mmft import diffcore as dc
from mmft.objective import (
    AnswerScores,
    init_head_params,
    joint_head,
    predict,
    score_answers,
    stream_head,
    total_loss,
)


@pytest.fixture
def params():
    return init_head_params(8, ("q", "v", "s", "joint"), seed=0)


def zero_heads(params):
    for p in params.values():
        p.value = np.zeros_like(p.value)


class TestHeads:
    def test_zero_everything_gives_uniform(self, params):
        zero_heads(params)
        fused = dc.constant(np.zeros((2, 5, 8)))
        logits = joint_head(params, fused)
        np.testing.assert_array_equal(logits.value, 0.0)
        probs = dc.softmax(logits).value
        np.testing.assert_allclose(probs, 0.2)

    def test_matches_dot_product_loop_oracle(self, params):
        rng = np.random.default_rng(1)
        fused = rng.normal(size=(3, 5, 8))
        logits = joint_head(params, dc.constant(fused)).value
        w = params["head.joint.w"].value
        b = params["head.joint.b"].value
        for i in range(3):
            flat = fused[i].ravel()
            for j in range(5):
                expected = sum(flat[k] * w[k, j] for k in range(40)) + b[j]
                assert abs(logits[i, j] - expected) < 1e-10

    def test_identical_encodings_make_answers_indistinguishable(self, params):
        rng = np.random.default_rng(2)
        row = rng.normal(size=8)
        enc = np.tile(row, (1, 5, 1))
        logits = stream_head(params, "q", dc.constant(enc)).value[0]
        w = params["head.q.w"].value.reshape(5, 8, 5)
        expected = np.einsum("d,adc->c", row, w)
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_wrong_count_rejected(self, params):
        with pytest.raises(dc.DimensionError):
            joint_head(params, dc.constant(np.zeros((1, 4, 8))))

    def test_mixed_streams_rejected(self, params):
        class Enc:
            def __init__(self, stream):
                self.stream = stream
                self.node = dc.constant(np.zeros(8))

        vectors = [Enc("Q")] * 4 + [Enc("V")]
        with pytest.raises(ValueError, match="mixed"):
            score_answers(params, "q", vectors, "Q")

    def test_block_permuted_weights_permute_logits(self, params):
        rng = np.random.default_rng(3)
        fused = rng.normal(size=(1, 5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        base = joint_head(params, dc.constant(fused)).value[0]

        w = params["head.joint.w"].value.reshape(5, 8, 5)
        b = params["head.joint.b"].value
        permuted_params = init_head_params(8, ("joint",), seed=0)
        permuted_params["head.joint.w"].value = w[perm][:, :, perm].reshape(40, 5)
        permuted_params["head.joint.b"].value = b[perm]
        permuted_logits = joint_head(permuted_params, dc.constant(fused[:, perm])).value[0]
        np.testing.assert_allclose(permuted_logits, base[perm], atol=1e-12)


class TestTotalLoss:
    def test_uniform_heads_give_four_log_five(self, params):
        zero_heads(params)
        logits = {s: dc.constant(np.zeros((2, 5))) for s in ("q", "v", "s")}
        joint = dc.constant(np.zeros((2, 5)))
        bundle, node = total_loss(logits, joint, [1, 3])
        assert abs(bundle.l_total - 4 * math.log(5)) < 1e-12
        assert abs(float(node.value) - 4 * math.log(5)) < 1e-12

    def test_single_loss_keeps_only_joint(self):
        logits = {s: dc.constant(np.zeros((1, 5))) for s in ("q", "v", "s")}
        bundle, node = total_loss(logits, dc.constant(np.zeros((1, 5))), [0],
                                  single_loss=True)
        assert bundle.l_q == bundle.l_vid == bundle.l_sub == 0.0
        assert abs(bundle.l_total - math.log(5)) < 1e-12

    def test_sum_identity_exact(self):
        rng = np.random.default_rng(4)
        logits = {s: dc.constant(rng.normal(size=(3, 5))) for s in ("q", "v", "s")}
        bundle, _ = total_loss(logits, dc.constant(rng.normal(size=(3, 5))), [0, 1, 2])
        assert bundle.l_total == bundle.l_q + bundle.l_vid + bundle.l_sub + bundle.l_joint
        assert all(t >= 0 for t in (bundle.l_q, bundle.l_vid, bundle.l_sub, bundle.l_joint))

    def test_label_out_of_range(self):
        logits = {s: dc.constant(np.zeros((1, 5))) for s in ("q", "v", "s")}
        with pytest.raises(IndexError):
            total_loss(logits, dc.constant(np.zeros((1, 5))), [5])

    def test_single_loss_zeroes_stream_gradients(self, params):
        rng = np.random.default_rng(5)
        enc = {s: dc.Node(rng.normal(size=(2, 5, 8)), requires_grad=True)
               for s in ("q", "v", "s")}
        fused = dc.Node(rng.normal(size=(2, 5, 8)), requires_grad=True)
        stream_logits = {s: stream_head(params, s, enc[s]) for s in enc}
        _, node = total_loss(stream_logits, joint_head(params, fused), [0, 1],
                             single_loss=True)
        dc.backward(node)
        for s in ("q", "v", "s"):
            assert params[f"head.{s}.w"].grad is None
        assert params["head.joint.w"].grad is not None
        assert np.abs(fused.grad).max() > 0

    def test_gradient_matches_finite_differences(self, params):
        rng = np.random.default_rng(6)
        enc_values = {s: rng.normal(size=(2, 5, 8)) for s in ("q", "v", "s")}
        fused_value = rng.normal(size=(2, 5, 8))
        labels = [2, 4]

        def forward():
            stream_logits = {
                s: stream_head(params, s, dc.constant(enc_values[s])) for s in enc_values
            }
            joint = joint_head(params, dc.constant(fused_value))
            return total_loss(stream_logits, joint, labels)[1]

        dc.backward(forward())
        from conftest import relative_error

        for name in ("head.q.w", "head.joint.w", "head.v.b"):
            p = params[name]
            analytic = p.grad.copy()
            flat = p.value.ravel()
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-5
                fp = float(forward().value)
                flat[i] = orig - 1e-5
                fm = float(forward().value)
                flat[i] = orig
                fd[i] = (fp - fm) / 2e-5
            assert relative_error(analytic.ravel(), fd) < 1e-4
            p.node.grad = None


class TestPredict:
    def test_last_wins(self):
        assert predict(np.array([0.0, 0, 0, 0, 1])) == 4

    def test_tie_breaks_low(self):
        assert predict(np.zeros(5)) == 0

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            logits = rng.normal(size=5)
            shift = rng.normal() * 10
            assert predict(logits) == predict(logits + shift)

    def test_positive_rescale_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            logits = rng.normal(size=5)
            assert predict(logits) == predict(logits * rng.uniform(0.1, 10))

    def test_batched(self):
        logits = np.array([[0, 1, 0, 0, 0], [0, 0, 0, 0, 2.0]])
        np.testing.assert_array_equal(predict(logits), [1, 4])

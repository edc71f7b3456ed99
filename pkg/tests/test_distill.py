import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planting.distill import DistillLoss, combined_loss, kl_term
from planting.gradcore import GradTape, Tensor, softmax_cross_entropy

from oracles import central_difference, cross_entropy_mp, kl_mp, relative_error


def _logits(seed, shape=(4, 10), scale=2.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


class TestKL:
    def test_identical_is_zero(self):
        z = _logits(0)
        assert kl_term(z, Tensor(z)).item() == 0.0

    def test_two_class_example(self):
        # pT = (0.75, 0.25), pS = (0.5, 0.5)
        v = kl_term(np.array([[math.log(3), 0.0]]), Tensor(np.zeros((1, 2)))).item()
        assert v == pytest.approx(0.13081203594113697, abs=1e-14)

    def test_matches_mp_oracle(self):
        t, s = _logits(1), _logits(2)
        assert abs(kl_term(t, Tensor(s)).item() - kl_mp(t, s)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_term(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))

    def test_perturbation_is_positive(self):
        z = _logits(3)
        assert kl_term(z, Tensor(z + 1e-3 * _logits(4))).item() > 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        t, s = rng.normal(scale=5, size=(3, 6)), rng.normal(scale=5, size=(3, 6))
        assert kl_term(t, Tensor(s)).item() >= 0.0

    def test_literal_form_is_negative_cross_entropy(self):
        t, s = _logits(5), _logits(6)
        # sum_i pT_i log pS_i = -(H(pT) + KL) ; check via the oracle identity
        pt = np.exp(t - t.max(1, keepdims=True))
        pt /= pt.sum(1, keepdims=True)
        entropy = -(pt * np.log(pt)).sum(1).mean()
        literal = kl_term(t, Tensor(s), form="literal").item()
        assert literal == pytest.approx(-(entropy + kl_mp(t, s)), abs=1e-12)


class TestCombined:
    def test_lambda_one_is_cross_entropy(self):
        s, t = _logits(7), _logits(8)
        y = np.array([0, 3, 9, 1])
        assert combined_loss(Tensor(s), t, y, 1.0).item() == softmax_cross_entropy(Tensor(s), y).item()

    def test_lambda_zero_is_kl(self):
        s, t = _logits(9), _logits(10)
        y = np.array([2, 2, 5, 7])
        assert combined_loss(Tensor(s), t, y, 0.0).item() == kl_term(t, Tensor(s)).item()

    def test_half_is_mean_of_oracles(self):
        s, t = _logits(11), _logits(12)
        y = np.array([4, 0, 8, 6])
        expected = 0.5 * cross_entropy_mp(s, y) + 0.5 * kl_mp(t, s)
        assert abs(combined_loss(Tensor(s), t, y, 0.5).item() - expected) < 1e-12

    def test_lambda_out_of_range(self):
        with pytest.raises(ValueError):
            combined_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), np.array([0]), 1.5)
        with pytest.raises(ValueError):
            DistillLoss(-0.1)

    def test_teacher_required_below_one(self):
        with pytest.raises(ValueError, match="teacher"):
            combined_loss(Tensor(np.zeros((1, 2))), None, np.array([0]), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1))
    def test_affine_in_lambda(self, seed, lam):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        y = rng.integers(0, 5, size=3)
        v1 = combined_loss(Tensor(s), t, y, 1.0).item()
        v0 = combined_loss(Tensor(s), t, y, 0.0).item()
        assert abs(combined_loss(Tensor(s), t, y, lam).item() - (lam * v1 + (1 - lam) * v0)) < 1e-12

    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
    @pytest.mark.parametrize("form", ["standard", "literal"])
    def test_gradient_matches_finite_differences(self, lam, form):
        s = Tensor(_logits(13, (3, 6)), requires_grad=True)
        t = Tensor(_logits(14, (3, 6)), requires_grad=True)
        y = np.array([1, 5, 0])
        with GradTape() as tape:
            loss = combined_loss(s, t, y, lam, form)
        tape.backward(loss)
        fd = central_difference(lambda: combined_loss(s, t, y, lam, form).item(), s.value)
        for i, v in fd.items():
            assert relative_error(s.grad.reshape(-1)[i], v) < 1e-4
        # the teacher is a constant: nothing flows back into it
        assert t.grad is None

    def test_callable_wrapper(self):
        loss = DistillLoss(0.0)
        assert loss.needs_teacher
        z = _logits(15)
        assert loss(Tensor(z), z, np.zeros(4, dtype=int)).item() == 0.0

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pgn import tensor as T
from pgn.losses import (
    AdversarialBatch, DEFAULT_LAMBDA, adversarial_losses, adversarial_losses_from_scores,
    combined_generator_loss, generator_adversarial_loss, mse_loss,
)
from pgn.models import DiscriminatorModel, GeneratorModel, discriminator_score, generator_predict
from pgn.optim import OptimizerState, optimizer_step, rmsprop, sgd_momentum, zero_grads
from pgn.tensor import DimensionError, Tensor, check_gradients


class TestMSE:
    def test_identical(self, rng):
        x = rng.random((2, 1, 4, 4))
        assert mse_loss(Tensor(x), x).item() == 0.0

    def test_constant_offset(self):
        pred = np.full((1, 30, 30), 0.6)
        assert mse_loss(Tensor(pred), np.full((1, 30, 30), 0.5)).item() == pytest.approx(9.0)

    def test_loop_oracle(self, rng):
        p, q = rng.random((3, 1, 5, 4)), rng.random((3, 1, 5, 4))
        total = 0.0
        for b in range(3):
            for i in range(5):
                for j in range(4):
                    total += (p[b, 0, i, j] - q[b, 0, i, j]) ** 2
        assert mse_loss(Tensor(p), q).item() == pytest.approx(total / 3, rel=1e-12)

    @given(arrays(np.float64, (2, 1, 3, 3), elements=st.floats(0, 1)),
           arrays(np.float64, (2, 1, 3, 3), elements=st.floats(0, 1)))
    @settings(max_examples=50, deadline=None)
    def test_non_negative_zero_iff_equal(self, a, b):
        v = mse_loss(Tensor(a), b).item()
        assert v >= 0
        assert (v == 0) == np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))


def loop_losses(d_real, d_fake):
    n = len(d_real)
    l_d = -sum(math.log(r) + math.log(1 - f) for r, f in zip(d_real, d_fake)) / (2 * n)
    l_g = -sum(math.log(f) for f in d_fake) / n
    return l_d, l_g


class TestAdversarial:
    def test_half_everywhere(self):
        half = Tensor(np.full(4, 0.5))
        out = adversarial_losses_from_scores(half, half)
        assert out.discriminator.item() == pytest.approx(math.log(2))
        assert out.generator.item() == pytest.approx(math.log(2))
        assert not out.saturated

    def test_perfect_discriminator(self):
        out = adversarial_losses_from_scores(Tensor(np.array([1 - 1e-12])), Tensor(np.array([1e-12])))
        assert out.discriminator.item() < 1e-6
        assert out.saturated

    def test_clamp_keeps_losses_finite(self):
        out = adversarial_losses_from_scores(Tensor(np.array([0.0])), Tensor(np.array([1.0])))
        assert np.isfinite(out.discriminator.item()) and out.saturated
        assert out.discriminator.item() == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_loop_oracle(self, rng):
        r, f = rng.uniform(0.05, 0.95, 2), rng.uniform(0.05, 0.95, 2)
        out = adversarial_losses_from_scores(Tensor(r), Tensor(f))
        l_d, l_g = loop_losses(r, f)
        assert out.discriminator.item() == pytest.approx(l_d, rel=1e-12)
        assert out.generator.item() == pytest.approx(l_g, rel=1e-12)
        assert generator_adversarial_loss(Tensor(f)).item() == pytest.approx(l_g, rel=1e-12)

    @given(arrays(np.float64, 5, elements=st.floats(1e-6, 1 - 1e-6)),
           arrays(np.float64, 5, elements=st.floats(1e-6, 1 - 1e-6)))
    @settings(max_examples=50, deadline=None)
    def test_l_d_non_negative(self, r, f):
        assert adversarial_losses_from_scores(Tensor(r), Tensor(f)).discriminator.item() >= 0

    def test_batch_oracle(self, tiny, rng):
        gen = GeneratorModel.create(tiny, 0, np.float64)
        disc = DiscriminatorModel.create(tiny, 1, np.float64)
        seq = rng.random((2, 3) + tiny.frame_shape)
        target = rng.random((2,) + tiny.frame_shape)
        fake = generator_predict(gen, seq)
        out = adversarial_losses(AdversarialBatch(seq, target, fake), disc)
        r = discriminator_score(disc, seq, target).data
        f = discriminator_score(disc, seq, fake).data
        l_d, l_g = loop_losses(r, f)
        assert out.discriminator.item() == pytest.approx(l_d, rel=1e-12)
        assert out.generator.item() == pytest.approx(l_g, rel=1e-12)

    def test_batch_lengths_checked(self, tiny, rng):
        with pytest.raises(DimensionError):
            AdversarialBatch(rng.random((2, 3, 1, 8, 8)), rng.random((1, 1, 8, 8)), Tensor(rng.random((2, 1, 8, 8))))

    def test_score_shapes_checked(self):
        with pytest.raises(DimensionError):
            adversarial_losses_from_scores(Tensor(np.ones(2) / 2), Tensor(np.ones(3) / 2))

    def test_gradient_isolation(self, tiny, rng):
        """Generated frames enter L_D as constants, and D is frozen while L_G is differentiated."""
        gen = GeneratorModel.create(tiny, 0, np.float64)
        disc = DiscriminatorModel.create(tiny, 1, np.float64)
        seq = rng.random((2, 3) + tiny.frame_shape)
        target = rng.random((2,) + tiny.frame_shape)
        fake = Tensor(generator_predict(gen, seq).data)
        with T.Graph() as g:
            out = adversarial_losses(AdversarialBatch(seq, target, fake), disc)
        g.backward(out.discriminator)
        assert all(p.grad is None for p in gen.params.values())
        assert any(p.grad is not None and np.any(p.grad) for p in disc.params.values())
        zero_grads(disc.params)
        with T.frozen(disc.params):
            with T.Graph() as g:
                l_g = generator_adversarial_loss(discriminator_score(disc, seq, generator_predict(gen, seq)))
            g.backward(l_g)
        assert all(p.grad is None for p in disc.params.values())
        assert any(p.grad is not None and np.any(p.grad) for p in gen.params.values())


class TestCombined:
    def test_arithmetic(self):
        out = combined_generator_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)))
        assert DEFAULT_LAMBDA == 0.0002
        assert out.item() == pytest.approx(1.0004, abs=1e-12)

    def test_zero_lambda_is_mse(self):
        mse = Tensor(np.array(3.0))
        assert combined_generator_loss(mse, Tensor(np.array(5.0)), 0.0) is mse

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            combined_generator_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0)), -0.1)

    def test_gradient_is_linear(self, rng):
        x0 = rng.normal(size=4)
        target = rng.normal(size=(1, 2, 2))
        lam = 0.3

        def parts(x):
            pred = T.reshape(x, (1, 2, 2))
            mse = mse_loss(pred, target)
            al = generator_adversarial_loss(T.logistic(T.reshape(T.tsum(x), (1,))))
            return mse, al

        grads = []
        for pick in (lambda m, a: m, lambda m, a: a, lambda m, a: combined_generator_loss(m, a, lam)):
            x = Tensor(x0.copy(), requires_grad=True)
            with T.Graph() as g:
                g.backward(pick(*parts(x)))
            grads.append(x.grad)
        np.testing.assert_allclose(grads[2], grads[0] + lam * grads[1], atol=1e-6)
        x = Tensor(x0.copy(), requires_grad=True)
        assert check_gradients(lambda: combined_generator_loss(*parts(x), lam), {"x": x}).max_rel_error < 1e-6


def param(v):
    return {"w": Tensor(np.array([v], dtype=np.float64), requires_grad=True)}


class TestOptimizers:
    def test_rmsprop_zero_gradient(self):
        p, st_ = param(2.0), rmsprop()
        optimizer_step(p, st_, {"w": np.zeros(1)})
        assert p["w"].data[0] == 2.0

    def test_sgd_zero_gradient_decays_velocity(self):
        p, st_ = param(2.0), sgd_momentum(0.1, 0.5)
        st_.slots["w"] = np.array([0.4])
        optimizer_step(p, st_, {"w": np.zeros(1)})
        assert st_.slots["w"][0] == pytest.approx(0.2)
        assert p["w"].data[0] == pytest.approx(2.2)

    def test_rmsprop_first_step(self):
        p, st_ = param(1.0), rmsprop(0.001, 0.9, 1e-8)
        optimizer_step(p, st_, {"w": np.array([-3.0])})
        expect = 1.0 + 0.001 * 3.0 / math.sqrt(0.1 * 9.0 + 1e-8)
        assert p["w"].data[0] == pytest.approx(expect, rel=1e-14)
        assert p["w"].data[0] == pytest.approx(1.0 + 0.001 / math.sqrt(0.1), rel=1e-6)

    def test_rmsprop_three_steps(self):
        lr, rho, eps = 0.01, 0.9, 1e-8
        p, st_ = param(0.5), rmsprop(lr, rho, eps)
        theta, a = 0.5, 0.0
        for g in (1.0, -2.0, 0.5):
            a = rho * a + (1 - rho) * g * g
            theta -= lr * g / math.sqrt(a + eps)
            optimizer_step(p, st_, {"w": np.array([g])})
        assert p["w"].data[0] == pytest.approx(theta, rel=1e-14)
        assert st_.slots["w"][0] == pytest.approx(a, rel=1e-14)
        assert st_.steps == 3

    def test_sgd_three_steps(self):
        lr, mu = 0.01, 0.5
        p, st_ = param(0.5), sgd_momentum(lr, mu)
        theta, v = 0.5, 0.0
        for g in (1.0, -2.0, 0.5):
            v = mu * v - lr * g
            theta += v
            optimizer_step(p, st_, {"w": np.array([g])})
        assert p["w"].data[0] == pytest.approx(theta, rel=1e-14)

    def test_uses_grad_attribute_and_skips_missing(self):
        params = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        params["a"].grad = np.ones(2)
        optimizer_step(params, sgd_momentum(0.1))
        assert np.allclose(params["a"].data, 0.9) and np.all(params["b"].data == 1)
        assert "b" not in sgd_momentum().slots

    def test_slot_shapes_mirror_params(self, rng):
        params = {"W": Tensor(rng.normal(size=(3, 4)), requires_grad=True)}
        st_ = rmsprop()
        optimizer_step(params, st_, {"W": rng.normal(size=(3, 4))})
        assert st_.slots["W"].shape == (3, 4)
        with pytest.raises(ValueError):
            optimizer_step(params, st_, {"W": np.zeros(3)})

    def test_deterministic(self, rng):
        g = rng.normal(size=5)
        runs = []
        for _ in range(2):
            params = {"w": Tensor(np.zeros(5), requires_grad=True)}
            st_ = rmsprop()
            for _ in range(4):
                optimizer_step(params, st_, {"w": g})
            runs.append(params["w"].data.copy())
        assert np.array_equal(*runs)

    def test_state_round_trip(self):
        st_ = sgd_momentum(0.02, 0.7)
        st_.slots["w"] = np.array([1.0])
        back = OptimizerState.from_hyper(st_.hyper(), st_.slots)
        assert back.hyper() == st_.hyper() and back.slots["w"][0] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            OptimizerState("adam", 0.1)

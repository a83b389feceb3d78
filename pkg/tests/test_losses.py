import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudoanomaly.losses import (
    LossBreakdown,
    LossError,
    LossWeights,
    adversarial_loss,
    anomaly_loss,
    contextual_adversarial_loss,
    contextual_loss,
    discriminator_loss,
    final_loss,
    latent_loss,
    normality_loss,
)

t = lambda *v: torch.tensor(v, dtype=torch.float64)


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_adv, w.lambda_con, w.lambda_adcon, w.lambda_lat) == (1, 50, 15, 5)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_con=-1)


class TestAdversarial:
    def test_perfect_prediction(self):
        assert float(adversarial_loss(t(1.0), 1)) == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        assert float(adversarial_loss(t(0.5), 1)) == pytest.approx(0.6931, abs=1e-4)

    def test_batch_average(self):
        assert float(adversarial_loss(t(0.9, 0.1), 1)) == pytest.approx(1.2040, abs=1e-4)

    def test_target_zero(self):
        assert float(adversarial_loss(t(0.1), 0)) == pytest.approx(-math.log(0.9))

    def test_empty(self):
        with pytest.raises(LossError):
            adversarial_loss(torch.empty(0), 1)


class TestContextual:
    def test_identity(self):
        x = torch.randn(3, 1, 4, 4)
        assert float(contextual_loss(x, x)) == 0.0

    def test_value(self):
        assert float(contextual_loss(t(1.0, -1.0), t(0.0, 0.0))) == 1.0

    def test_homogeneity(self):
        x, y = torch.randn(10, dtype=torch.float64), torch.randn(10, dtype=torch.float64)
        assert float(contextual_loss(-3 * x, -3 * y)) == pytest.approx(3 * float(contextual_loss(x, y)))

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            contextual_loss(torch.zeros(2), torch.zeros(3))


class TestLatent:
    def test_identity(self):
        assert float(latent_loss(t(1.0, 2.0), t(1.0, 2.0))) == 0.0

    def test_value(self):
        assert float(latent_loss(t(1.0, 0.0), t(0.0, 0.0))) == 0.5

    def test_symmetry(self):
        a, b = torch.randn(5, 8), torch.randn(5, 8)
        assert float(latent_loss(a, b)) == float(latent_loss(b, a))


class TestContextualAdversarial:
    def test_identity_is_max(self):
        x = torch.randn(2, 3)
        assert float(contextual_adversarial_loss(x, x)) == 0.0

    def test_value(self):
        assert float(contextual_adversarial_loss(t(0.5, -0.5), t(0.0, 0.0))) == -0.5

    def test_never_positive(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(1000):
            a, b = torch.randn(6, generator=g), torch.randn(6, generator=g)
            assert float(contextual_adversarial_loss(a, b)) <= 0.0


class TestComposites:
    def test_normality_zero(self):
        assert normality_loss(0, 0, 0, 0) == 0

    def test_normality_worked(self):
        assert normality_loss(0.6931, 0.1, -0.2, 0.05) == pytest.approx(2.9431)

    def test_normality_zero_weights(self):
        assert normality_loss(3.0, 2.0, -1.0, 4.0, LossWeights(0, 0, 0, 0)) == 0

    def test_normality_without_adcon_is_three_term_objective(self):
        w = LossWeights(lambda_adcon=0)
        assert normality_loss(0.7, 0.2, -0.9, 0.1, w) == 0.7 + 50 * 0.2 + 5 * 0.1

    def test_anomaly_worked(self):
        assert anomaly_loss(1.0, -2.0, 0.5, eps=0.0) == pytest.approx(18.5)

    def test_anomaly_limit(self):
        assert anomaly_loss(1e12, -1e12, 1e12) < 1e-10

    def test_anomaly_guard(self):
        v = anomaly_loss(1.0, -1.0, 0.0, eps=1e-8)
        assert math.isfinite(v) and v == pytest.approx(5 / 1e-8, rel=1e-6)

    def test_anomaly_without_adcon(self):
        assert anomaly_loss(1.0, None, 0.5, eps=0.0) == pytest.approx(11.0)

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100), st.floats(1.001, 10),
        st.sampled_from([0, 1, 2]),
    )
    def test_anomaly_monotone(self, a, b, c, factor, which):
        base = [a, -b, c]
        bigger = list(base)
        bigger[which] *= factor
        assert anomaly_loss(*bigger) < anomaly_loss(*base)

    def test_final(self):
        assert final_loss(2.0, None) == 2.0
        assert final_loss(None, 18.5) == 18.5
        assert final_loss(2.0, 18.5) == 20.5
        with pytest.raises(LossError):
            final_loss(None, None)

    def test_discriminator(self):
        assert float(discriminator_loss(t(1.0), t(0.0))) == pytest.approx(0.0, abs=1e-6)
        assert float(discriminator_loss(t(0.5), t(0.5))) == pytest.approx(1.3863, abs=1e-4)
        assert float(discriminator_loss(y_true_anomaly=t(0.5))) == pytest.approx(0.6931, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nonnegative_terms(seed):
    rng = np.random.default_rng(seed)
    a, b = torch.from_numpy(rng.normal(size=(3, 7))), torch.from_numpy(rng.normal(size=(3, 7)))
    assert float(contextual_loss(a, b)) >= 0
    assert float(latent_loss(a, b)) >= 0
    assert float(contextual_adversarial_loss(a, b)) <= 0


def test_breakdown_mean():
    m = LossBreakdown.mean([LossBreakdown(l_con=1.0, n_normal=3), LossBreakdown(l_con=3.0, n_normal=4)])
    assert m.l_con == 2.0 and m.n_normal == 7

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from redo.objectives import (
    LossWeights,
    discriminator_hinge_loss,
    generator_adversarial_loss,
    generator_total_loss,
    information_conservation_loss,
    lambda_z_value,
)

from helpers import assert_grads_close, central_differences

scores = st.floats(min_value=-10, max_value=10, allow_nan=False)


class TestDiscriminatorHinge:
    def test_saturated_scores_give_zero(self):
        assert float(discriminator_hinge_loss(2.0, -2.0)) == 0.0

    def test_zero_scores(self):
        assert float(discriminator_hinge_loss(0.0, 0.0)) == pytest.approx(2.0)

    def test_margin_boundary(self):
        assert float(discriminator_hinge_loss(1.0, -1.0)) == 0.0

    def test_batch_averaging(self):
        real = torch.tensor([2.0, 0.0])   # hinge terms 0, 1
        fake = torch.tensor([-2.0, 0.0])  # hinge terms 0, 1
        assert float(discriminator_hinge_loss(real, fake)) == pytest.approx(1.0)

    @settings(max_examples=250, deadline=None)
    @given(scores, scores, st.floats(min_value=1e-3, max_value=2))
    def test_monotonic_in_scores(self, r, f, eps):
        base = float(discriminator_hinge_loss(r, f))
        assert float(discriminator_hinge_loss(r + eps, f)) <= base + 1e-9
        assert float(discriminator_hinge_loss(r, f + eps)) >= base - 1e-9

    @settings(max_examples=250, deadline=None)
    @given(scores, scores)
    def test_nonnegative_iff_outside_margins(self, r, f):
        loss = float(discriminator_hinge_loss(r, f))
        if r >= 1 and f <= -1:
            assert loss == 0.0
        else:
            assert loss > 0.0


class TestGeneratorAdversarial:
    @pytest.mark.parametrize("score,expected", [(3.0, -3.0), (0.0, 0.0), (-1.5, 1.5)])
    def test_sign_flip(self, score, expected):
        assert float(generator_adversarial_loss(score)) == pytest.approx(expected)


class TestInformationConservation:
    def test_identity_is_zero(self):
        z = torch.randn(8)
        assert float(information_conservation_loss(z, z)) == 0.0

    def test_unit_distance(self):
        assert float(information_conservation_loss(
            torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0]))) == pytest.approx(1.0)

    def test_three_dims(self):
        assert float(information_conservation_loss(
            torch.tensor([1.0, 2.0, 3.0]),
            torch.tensor([1.0, 2.0, 2.0]))) == pytest.approx(1.0)

    def test_batch_mean(self):
        z_hat = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        z = torch.zeros(2, 2)
        assert float(information_conservation_loss(z_hat, z)) == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            information_conservation_loss(torch.zeros(3), torch.zeros(4))

    def test_symmetric(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(6, generator=gen)
        b = torch.randn(6, generator=gen)
        assert float(information_conservation_loss(a, b)) == pytest.approx(
            float(information_conservation_loss(b, a)))

    def test_gradient_identity(self):
        gen = torch.Generator().manual_seed(1)
        z_hat = torch.randn(5, generator=gen, dtype=torch.float64).requires_grad_(True)
        z = torch.randn(5, generator=gen, dtype=torch.float64)
        loss = information_conservation_loss(z_hat, z)
        (grad,) = torch.autograd.grad(loss, z_hat)
        assert torch.allclose(grad, 2 * (z_hat.detach() - z), atol=1e-12)
        numeric = central_differences(
            lambda v: information_conservation_loss(v, z), z_hat.detach())
        assert_grads_close(grad, numeric, what="info_loss")


class TestLambdaZ:
    def test_paper_values_exact(self):
        assert lambda_z_value(2, 32, "default") == 0.078125
        assert lambda_z_value(2, 32, "lfw") == 0.234375

    def test_three_region_digit_preset(self):
        assert lambda_z_value(3, 16, "default") == pytest.approx(5 / 48)

    def test_product_identity(self):
        assert lambda_z_value(2, 32, "default") * 2 * 32 == 5.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            lambda_z_value(0, 32)
        with pytest.raises(ValueError):
            lambda_z_value(2, 32, "flowers")

    def test_auto_weights(self):
        assert LossWeights.auto(2, 32).lambda_z == 0.078125
        with pytest.raises(ValueError):
            LossWeights(lambda_z=-0.1)


class TestGeneratorTotal:
    def test_zero_info_term(self):
        z = torch.randn(4)
        w = LossWeights(lambda_z=0.1)
        assert float(generator_total_loss(1.0, z, z, w)) == pytest.approx(-1.0)

    def test_weighted_sum(self):
        w = LossWeights(lambda_z=0.1)
        z_hat = torch.tensor([2.0, 0.0])
        z = torch.tensor([0.0, 0.0])
        assert float(generator_total_loss(0.0, z_hat, z, w)) == pytest.approx(0.4)

    def test_disabled_constraint(self):
        w = LossWeights(lambda_z=0.0)
        z_hat = torch.randn(3)
        z = torch.randn(3)
        assert float(generator_total_loss(-2.5, z_hat, z, w)) == pytest.approx(2.5)

    def test_hinge_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        # keep scores away from the hinge kinks at +-1
        r = (torch.rand(4, generator=gen, dtype=torch.float64) * 3 + 1.1)
        f = -(torch.rand(4, generator=gen, dtype=torch.float64) * 3 + 1.1)
        for sign in (1, -1):
            rv = (sign * r).requires_grad_(True)
            fv = (sign * f).detach().requires_grad_(True)
            loss = discriminator_hinge_loss(rv, fv)
            gr, gf = torch.autograd.grad(loss, [rv, fv])
            assert_grads_close(gr, central_differences(
                lambda v: discriminator_hinge_loss(v, fv.detach()), rv.detach()),
                what="hinge/real")
            assert_grads_close(gf, central_differences(
                lambda v: discriminator_hinge_loss(rv.detach(), v), fv.detach()),
                what="hinge/fake")

    def test_adversarial_gradient(self):
        s = torch.randn(6, dtype=torch.float64).requires_grad_(True)
        (g,) = torch.autograd.grad(generator_adversarial_loss(s), s)
        numeric = central_differences(lambda v: generator_adversarial_loss(v),
                                      s.detach())
        assert_grads_close(g, numeric, what="gen_adv")

import math

import numpy as np
import pytest
import torch

from voldiff import diffusion
from voldiff.errors import ContractViolationError, NumericError, ParameterError, ShapeError


class TestLinearSchedule:
    def test_midpoint_matches_closed_form(self):
        sched = diffusion.make_linear_schedule(1000, 1e-4, 0.02)
        # independent closed form: beta_t = start + (t-1) * (end - start) / (T-1)
        expected = 1e-4 + 499 * (0.02 - 1e-4) / 999
        assert sched.beta_at(500) == pytest.approx(expected, abs=1e-12)
        assert round(sched.beta_at(500), 6) == 0.010040

    def test_single_step(self):
        sched = diffusion.make_linear_schedule(1, 0.5, 0.5)
        assert sched.beta.tolist() == [0.5]
        assert sched.alpha_bar.tolist() == [0.5]

    def test_two_step_product(self):
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        assert sched.alpha_bar.tolist() == [0.5, 0.25]

    def test_alpha_bar_ratio_identity(self):
        sched = diffusion.make_linear_schedule(1000, 1e-4, 0.02)
        ratios = sched.alpha_bar[1:] / sched.alpha_bar[:-1]
        assert np.max(np.abs(ratios - sched.alpha[1:])) < 1e-12
        assert sched.alpha_bar_before(1) == 1.0

    def test_alpha_bar_strictly_decreasing(self):
        sched = diffusion.make_linear_schedule(1000, 1e-4, 0.02)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all((sched.beta > 0) & (sched.beta < 1))
        assert np.all(np.diff(sched.beta) >= 0)

    def test_sigma_is_sqrt_beta(self):
        sched = diffusion.make_linear_schedule(100, 1e-3, 0.1)
        assert np.allclose(sched.sigma**2, sched.beta, atol=1e-15)

    @pytest.mark.parametrize(
        "T,start,end",
        [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 1e-4), (10, 1e-4, 1.0), (10, float("nan"), 0.02)],
    )
    def test_rejects_bad_parameters(self, T, start, end):
        with pytest.raises(ParameterError):
            diffusion.make_linear_schedule(T, start, end)


class TestSubsample:
    def test_keeps_last_step_and_reindexes(self):
        sched = diffusion.make_linear_schedule(1000, 1e-4, 0.02)
        sub, tmap = diffusion.subsample_schedule(sched, 10)
        assert sub.T == 100
        assert tmap[-1] == 1000 and tmap[0] == 10
        assert np.allclose(sub.alpha_bar, sched.alpha_bar[tmap - 1])
        # re-derived betas reproduce the abar ratios
        assert np.allclose(np.cumprod(sub.alpha), sub.alpha_bar)

    def test_stride_one_is_identity(self):
        sched = diffusion.make_linear_schedule(50, 1e-3, 0.01)
        sub, tmap = diffusion.subsample_schedule(sched, 1)
        assert sub is sched
        assert tmap.tolist() == list(range(1, 51))


class TestForwardSample:
    def test_zero_noise_scales_x0(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        x0 = torch.full((4, 4, 4), 3.0)
        out = diffusion.forward_sample(x0, 5, torch.zeros_like(x0), sched)
        assert torch.allclose(out, math.sqrt(sched.alpha_bar_at(5)) * x0)

    def test_hand_algebra_case(self):
        # abar = 0.25 at t=2 of the constant-beta schedule 0.5
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        x0 = torch.full((3, 3, 3), 2.0)
        eps = torch.ones_like(x0)
        out = diffusion.forward_sample(x0, 2, eps, sched)
        assert out.flatten()[0].item() == pytest.approx(1.0 + math.sqrt(0.75), abs=1e-6)

    def test_monte_carlo_moments(self):
        sched = diffusion.make_linear_schedule(1000, 1e-4, 0.02)
        n = 100_000
        gen = torch.Generator().manual_seed(99)
        x0 = torch.ones(n, dtype=torch.float64)
        t = 400
        eps = torch.randn(n, generator=gen, dtype=torch.float64)
        samples = diffusion.forward_sample(x0, t, eps, sched)
        abar = sched.alpha_bar_at(t)
        var = 1.0 - abar
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2.0 / (n - 1))
        assert abs(samples.mean().item() - math.sqrt(abar)) < 4 * se_mean
        assert abs(samples.var().item() - var) < 4 * se_var

    def test_shape_mismatch(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        with pytest.raises(ShapeError):
            diffusion.forward_sample(torch.zeros(2, 2, 2), 1, torch.zeros(3, 3, 3), sched)


class TestForwardStep:
    def test_degenerate_noise_limit(self):
        sched = diffusion.make_linear_schedule(1, 1e-12, 1e-12)
        x = torch.full((8, 8, 8), 2.0)
        out = diffusion.forward_step(x, 1, sched, torch.Generator().manual_seed(0))
        assert torch.max(torch.abs(out - x)).item() < 1e-5

    def test_determinism(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        x = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(3))
        a = diffusion.forward_step(x, 4, sched, torch.Generator().manual_seed(7))
        b = diffusion.forward_step(x, 4, sched, torch.Generator().manual_seed(7))
        assert torch.equal(a, b)

    def test_composition_matches_marginal(self):
        # iterate the per-step chain on 1e5 scalar voxels and compare moments
        # with the closed-form marginal
        sched = diffusion.make_linear_schedule(100, 1e-3, 0.05)
        n = 100_000
        t_star = 60
        gen = torch.Generator().manual_seed(11)
        x = torch.ones(n, dtype=torch.float64)
        for t in range(1, t_star + 1):
            x = diffusion.forward_step(x, t, sched, gen)
        abar = sched.alpha_bar_at(t_star)
        var = 1.0 - abar
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2.0 / (n - 1))
        assert abs(x.mean().item() - math.sqrt(abar)) < 4 * se_mean
        assert abs(x.var().item() - var) < 4 * se_var


class TestReverseStep:
    def test_hand_algebra_value(self):
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        x_t = torch.full((2, 2, 2), 1.0)
        eps = torch.full((2, 2, 2), 0.5)
        out = diffusion.reverse_step(x_t, eps, 2, sched, None)
        # independent hand algebra: (1 - 0.5/sqrt(0.75) * 0.5) / sqrt(0.5)
        expected = (1.0 - 0.5 / math.sqrt(0.75) * 0.5) / math.sqrt(0.5)
        assert out.flatten()[0].item() == pytest.approx(expected, abs=1e-5)
        assert out.flatten()[0].item() == pytest.approx(1.00596, abs=1e-5)

    def test_zero_z_gives_posterior_mean(self):
        sched = diffusion.make_linear_schedule(5, 0.1, 0.3)
        x_t = torch.randn(3, 3, 3, generator=torch.Generator().manual_seed(0))
        eps = torch.randn(3, 3, 3, generator=torch.Generator().manual_seed(1))
        no_z = diffusion.reverse_step(x_t, eps, 3, sched, None)
        zero_z = diffusion.reverse_step(x_t, eps, 3, sched, torch.zeros_like(x_t))
        assert torch.equal(no_z, zero_z)

    def test_noise_rejected_at_final_step(self):
        sched = diffusion.make_linear_schedule(5, 0.1, 0.3)
        x = torch.zeros(2, 2, 2)
        with pytest.raises(ContractViolationError):
            diffusion.reverse_step(x, x, 1, sched, torch.ones_like(x))

    def test_round_trip_through_predict_x0(self):
        sched = diffusion.make_linear_schedule(50, 1e-3, 0.02)
        gen = torch.Generator().manual_seed(5)
        x0 = torch.randn(4, 4, 4, generator=gen)
        eps = torch.randn(4, 4, 4, generator=gen)
        x_t = diffusion.forward_sample(x0, 30, eps, sched)
        recovered = diffusion.predict_x0(x_t, eps, 30, sched)
        assert torch.max(torch.abs(recovered - x0)).item() < 1e-6


class TestPredictX0:
    def test_zero_eps(self):
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        x_t = torch.ones(2, 2, 2)
        out = diffusion.predict_x0(x_t, torch.zeros_like(x_t), 2, sched)
        assert torch.allclose(out, torch.full_like(x_t, 2.0))

    def test_exact_cancellation(self):
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        x_t = torch.full((2, 2, 2), 1.5)
        abar = sched.alpha_bar_at(2)
        eps = x_t / math.sqrt(1.0 - abar)
        out = diffusion.predict_x0(x_t, eps, 2, sched)
        assert torch.max(torch.abs(out)).item() < 1e-6

    def test_range_check(self):
        sched = diffusion.make_linear_schedule(5, 0.1, 0.3)
        with pytest.raises(ParameterError):
            diffusion.predict_x0(torch.zeros(2, 2, 2), torch.zeros(2, 2, 2), 6, sched)


class TestPosteriorMean:
    def test_matches_reverse_step_algebra(self):
        # the posterior mean evaluated at predict_x0 equals the reverse update mean
        sched = diffusion.make_linear_schedule(20, 1e-3, 0.05)
        gen = torch.Generator().manual_seed(2)
        x_t = torch.randn(3, 3, 3, generator=gen, dtype=torch.float64)
        eps = torch.randn(3, 3, 3, generator=gen, dtype=torch.float64)
        t = 12
        x0h = diffusion.predict_x0(x_t, eps, t, sched)
        mean_a = diffusion.posterior_mean(x0h, x_t, t, sched)
        mean_b = diffusion.reverse_step(x_t, eps, t, sched, None)
        assert torch.max(torch.abs(mean_a - mean_b)).item() < 1e-12


class TestTrainingLoss:
    def test_exact_prediction_gives_zero(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        gen = torch.Generator().manual_seed(4)
        x0 = torch.randn(2, 1, 4, 4, 4, generator=gen)
        eps = torch.randn(2, 1, 4, 4, 4, generator=gen)
        loss = diffusion.eps_matching_loss(lambda x, t: eps, x0, 5, eps, sched)
        assert loss.item() == 0.0

    def test_constant_offset_gives_squared_delta(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        gen = torch.Generator().manual_seed(4)
        x0 = torch.randn(2, 1, 4, 4, 4, generator=gen)
        eps = torch.randn(2, 1, 4, 4, 4, generator=gen)
        delta = 0.3
        loss = diffusion.eps_matching_loss(lambda x, t: eps + delta, x0, 5, eps, sched)
        assert loss.item() == pytest.approx(delta**2, rel=1e-5)

    def test_batched_timesteps_match_scalar_calls(self):
        sched = diffusion.make_linear_schedule(10, 0.1, 0.2)
        gen = torch.Generator().manual_seed(4)
        x0 = torch.randn(3, 1, 4, 4, 4, generator=gen, dtype=torch.float64)
        eps = torch.randn(3, 1, 4, 4, 4, generator=gen, dtype=torch.float64)
        t = torch.tensor([2, 5, 9])
        batched = diffusion.forward_sample_batch(x0, t, eps, sched)
        for i, ti in enumerate(t.tolist()):
            single = diffusion.forward_sample(x0[i], ti, eps[i], sched)
            assert torch.allclose(batched[i], single, atol=1e-12)


class TestSample:
    def test_zero_network_variance_recursion(self):
        # net == 0: var recursion var <- var/alpha + sigma^2, no noise at final step
        sched = diffusion.make_linear_schedule(2, 0.5, 0.5)
        n = 100_000
        gen = torch.Generator().manual_seed(17)
        out = diffusion.sample(lambda x, t: torch.zeros_like(x), (n,), sched, gen)
        # independent closed form: ((1/0.5 + 0.5)) / 0.5 = 5.0
        var = 1.0
        for t in (2, 1):
            var = var / sched.alpha_at(t)
            if t > 1:
                var += sched.sigma_at(t) ** 2
        assert var == pytest.approx(5.0)
        assert out.var().item() == pytest.approx(5.0, rel=0.02)

    def test_output_shape_and_determinism(self, toy_net):
        sched = diffusion.make_linear_schedule(4, 0.1, 0.2)
        a = diffusion.sample(toy_net, (1, 1, 8, 8, 8), sched, torch.Generator().manual_seed(3))
        b = diffusion.sample(toy_net, (1, 1, 8, 8, 8), sched, torch.Generator().manual_seed(3))
        assert a.shape == (1, 1, 8, 8, 8)
        assert torch.equal(a, b)

    def test_non_finite_prediction_raises(self):
        sched = diffusion.make_linear_schedule(4, 0.1, 0.2)
        with pytest.raises(NumericError):
            diffusion.sample(
                lambda x, t: torch.full_like(x, float("nan")),
                (2, 2),
                sched,
                torch.Generator().manual_seed(0),
            )

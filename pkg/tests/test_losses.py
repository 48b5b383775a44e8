import math

import pytest
import torch

from styleguard.errors import ConfigError, ContractError
from styleguard.losses import (
    LossToggles,
    LossWeights,
    denoise_loss,
    dreambooth_loss,
    style_loss,
    styleguard_loss,
    upscale_loss,
)
from styleguard.models import RandomConvEncoder
from styleguard.schedule import build_schedule

from conftest import LinearDenoiser, OracleDenoiser, ZeroDenoiser, rand_images
from test_models import relative_grad_error


def replay_draws(seed, shape, T, n_models=1, with_pre=False):
    """Replicate the documented draw protocol: model idx, t, eps [, pre]."""
    gen = torch.Generator().manual_seed(seed)
    idx = int(torch.randint(0, n_models, (1,), generator=gen).item())
    t = int(torch.randint(1, T + 1, (1,), generator=gen).item())
    eps = torch.randn(shape, generator=gen)
    pre = torch.randn(shape, generator=gen) if with_pre else None
    return idx, t, eps, pre


class TestDreamboothLoss:
    def test_perfect_denoiser_gives_zero(self, sched_small):
        x_inst = rand_images(2, 8, 1)
        x_prior = rand_images(2, 8, 2)
        # replicate both (t, eps) draws so the oracle model can play them back
        gen = torch.Generator().manual_seed(7)
        t1 = int(torch.randint(1, 11, (1,), generator=gen).item())
        eps1 = torch.randn(x_inst.shape, generator=gen)
        t2 = int(torch.randint(1, 11, (1,), generator=gen).item())
        eps2 = torch.randn(x_prior.shape, generator=gen)
        model = OracleDenoiser()
        model.playback = [eps1, eps2]
        loss = dreambooth_loss(
            model, x_inst, x_prior, 1, 2, sched_small, LossWeights(),
            torch.Generator().manual_seed(7),
        )
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_zero_prior_weight_equals_instance_term(self, sched_small):
        x_inst = rand_images(2, 8, 1)
        x_prior = rand_images(2, 8, 2)
        model = LinearDenoiser(0.3, 0.05)
        w0 = LossWeights(prior_weight=0.0)
        loss = dreambooth_loss(model, x_inst, x_prior, 1, 2, sched_small, w0,
                               torch.Generator().manual_seed(3))
        # independent arithmetic on the replicated draw
        gen = torch.Generator().manual_seed(3)
        t = int(torch.randint(1, 11, (1,), generator=gen).item())
        eps = torch.randn(x_inst.shape, generator=gen)
        ab = sched_small.alpha_bar_at(t)
        x_t = math.sqrt(ab) * x_inst + math.sqrt(1 - ab) * eps
        pred = 0.3 * x_t + 0.05
        expected = float(((eps - pred) ** 2).mean())
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_hand_computed_with_prior(self, sched_small):
        x_inst = rand_images(1, 2, 4)
        x_prior = rand_images(1, 2, 5)
        model = LinearDenoiser(0.5, 0.1)
        weights = LossWeights(prior_weight=2.0)
        loss = dreambooth_loss(model, x_inst, x_prior, 1, 2, sched_small, weights,
                               torch.Generator().manual_seed(11))
        gen = torch.Generator().manual_seed(11)
        expected = 0.0
        for batch, w in ((x_inst, 1.0), (x_prior, 2.0)):
            t = int(torch.randint(1, 11, (1,), generator=gen).item())
            eps = torch.randn(batch.shape, generator=gen)
            ab = sched_small.alpha_bar_at(t)
            pred = 0.5 * (math.sqrt(ab) * batch + math.sqrt(1 - ab) * eps) + 0.1
            expected += w * float(((eps - pred) ** 2).mean())
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_identical_tokens_rejected(self, sched_small):
        x = rand_images(1, 4, 0)
        with pytest.raises(ContractError):
            dreambooth_loss(LinearDenoiser(), x, x, 1, 1, sched_small, LossWeights(),
                            torch.Generator().manual_seed(0))

    def test_nonnegative(self, sched_small):
        for seed in range(5):
            loss = dreambooth_loss(
                LinearDenoiser(0.8, -0.2), rand_images(2, 4, seed), rand_images(2, 4, seed + 50),
                1, 2, sched_small, LossWeights(), torch.Generator().manual_seed(seed),
            )
            assert float(loss) >= 0.0


class TestDenoiseLoss:
    def test_perfect_denoiser_gives_zero(self, sched_small):
        x = rand_images(2, 8, 3)
        _, _, eps, _ = replay_draws(5, x.shape, 10)
        model = OracleDenoiser()
        model.playback = [eps]
        loss = denoise_loss([model], x, 1, sched_small, torch.Generator().manual_seed(5))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_zero_predictor_is_minus_mean_square_eps(self, sched_small):
        x = rand_images(2, 8, 4)
        _, _, eps, _ = replay_draws(9, x.shape, 10)
        loss = denoise_loss([ZeroDenoiser()], x, 1, sched_small,
                            torch.Generator().manual_seed(9))
        assert float(loss) == pytest.approx(-float((eps**2).mean()), abs=1e-6)

    def test_hand_computed_linear(self, sched_small):
        x = rand_images(1, 4, 6)
        _, t, eps, _ = replay_draws(21, x.shape, 10)
        ab = sched_small.alpha_bar_at(t)
        pred = 0.5 * (math.sqrt(ab) * x + math.sqrt(1 - ab) * eps) + 0.1
        expected = -float(((eps - pred) ** 2).mean())
        loss = denoise_loss([LinearDenoiser(0.5, 0.1)], x, 1, sched_small,
                            torch.Generator().manual_seed(21))
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_never_positive(self, sched_small):
        for seed in range(10):
            loss = denoise_loss([LinearDenoiser(0.7, 0.3)], rand_images(1, 4, seed), 0,
                                sched_small, torch.Generator().manual_seed(seed))
            assert float(loss) <= 0.0

    def test_bitwise_repeatable(self, sched_small):
        x = rand_images(2, 8, 8)
        model = LinearDenoiser(0.4, 0.2)
        a = denoise_loss([model], x, 1, sched_small, torch.Generator().manual_seed(13))
        b = denoise_loss([model], x, 1, sched_small, torch.Generator().manual_seed(13))
        assert torch.equal(a, b)

    def test_empty_ensemble_rejected(self, sched_small):
        with pytest.raises(ContractError):
            denoise_loss([], rand_images(1, 4, 0), 0, sched_small,
                         torch.Generator().manual_seed(0))


class TestUpscaleLoss:
    def test_delta_zero_collapses_to_denoise(self, sched_small):
        x = rand_images(2, 8, 10)
        model = LinearDenoiser(0.6, -0.1)
        up = upscale_loss([model], x, 0.0, 1, sched_small, torch.Generator().manual_seed(17))
        dn = denoise_loss([model], x, 1, sched_small, torch.Generator().manual_seed(17))
        assert torch.equal(up, dn)

    def test_perfect_purifier_gives_zero(self, sched_small):
        x = rand_images(1, 8, 11)
        _, _, eps, _ = replay_draws(19, x.shape, 10)
        model = OracleDenoiser()
        model.playback = [eps]
        loss = upscale_loss([model], x, 0.0, 1, sched_small, torch.Generator().manual_seed(19))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_with_pre_noise(self, sched_small):
        x = rand_images(1, 4, 12)
        delta = 0.1
        _, t, eps, pre = replay_draws(23, x.shape, 10, with_pre=True)
        ab = sched_small.alpha_bar_at(t)
        x_noisy = x + delta * pre
        pred = 0.5 * (math.sqrt(ab) * x_noisy + math.sqrt(1 - ab) * eps) + 0.1
        expected = -float(((eps - pred) ** 2).mean())
        loss = upscale_loss([LinearDenoiser(0.5, 0.1)], x, delta, 1, sched_small,
                            torch.Generator().manual_seed(23))
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_negative_delta_rejected(self, sched_small):
        with pytest.raises(ContractError):
            upscale_loss([LinearDenoiser()], rand_images(1, 4, 0), -0.1, 1, sched_small,
                         torch.Generator().manual_seed(0))


class IdentityEncoder(torch.nn.Module):
    out_channels = 1

    def encode(self, x):
        return x

    forward = encode


class TestStyleLoss:
    def test_all_equal_gives_zero(self, encoders):
        x = rand_images(3, 16, 14)
        assert float(style_loss(encoders, x, x, x)) == pytest.approx(0.0, abs=1e-10)

    def test_hand_computed_single_channel(self):
        # stats: p -> mu 1, sigma 2; t -> mu 0, sigma 1; c -> mu 3, sigma 3
        x_p = torch.tensor([[[[-1.0, 3.0]]]])
        x_t = torch.tensor([[[[-1.0, 1.0]]]])
        x_c = torch.tensor([[[[0.0, 6.0]]]])
        loss = style_loss([IdentityEncoder()], x_p, x_t, x_c)
        assert float(loss) == pytest.approx((1 + 1) - (4 + 1), abs=1e-6)

    def test_antisymmetric_under_target_clean_swap(self, encoders):
        x_p = rand_images(3, 16, 15)
        x_t = rand_images(3, 16, 16)
        x_c = rand_images(3, 16, 17)
        a = style_loss(encoders, x_p, x_t, x_c)
        b = style_loss(encoders, x_p, x_c, x_t)
        assert torch.equal(a, -b)

    def test_mismatched_batch_rejected(self, encoders):
        with pytest.raises(ContractError):
            style_loss(encoders, rand_images(3, 16, 0), rand_images(2, 16, 1),
                       rand_images(3, 16, 2))

    def test_empty_encoder_list_rejected(self):
        with pytest.raises(ContractError):
            style_loss([], rand_images(1, 8, 0), rand_images(1, 8, 1), rand_images(1, 8, 2))


class TestCombination:
    def test_arithmetic(self):
        w = LossWeights(upscale_weight=1.0, style_weight=10.0)
        total = styleguard_loss(-2.0, -1.0, 0.5, w, LossToggles())
        assert float(total) == pytest.approx(2.0)

    def test_style_disabled(self):
        w = LossWeights()
        total = styleguard_loss(-2.0, -1.0, None, w, LossToggles(style=False))
        assert float(total) == pytest.approx(-3.0)

    def test_zero_weights_reduce_to_denoise(self):
        w = LossWeights(upscale_weight=0.0, style_weight=0.0)
        total = styleguard_loss(-2.5, -1.0, 0.5, w, LossToggles())
        assert float(total) == pytest.approx(-2.5)

    def test_all_disabled_rejected(self):
        with pytest.raises(ConfigError):
            styleguard_loss(None, None, None, LossWeights(),
                            LossToggles(False, False, False))


class TestGradients:
    """Autodiff vs central finite differences, frozen rng, float64."""

    @pytest.fixture()
    def setup(self):
        return build_schedule(10), LinearDenoiser(0.5, 0.1, dtype=torch.float64)

    def test_denoise_gradient(self, setup):
        sched, model = setup

        def fn(x):
            return denoise_loss([model], x, 1, sched, torch.Generator().manual_seed(31))

        x = rand_images(1, 8, 31, dtype=torch.float64)
        assert relative_grad_error(fn, x) < 1e-3

    def test_upscale_gradient(self, setup):
        sched, model = setup

        def fn(x):
            return upscale_loss([model], x, 0.1, 1, sched, torch.Generator().manual_seed(33))

        x = rand_images(1, 8, 33, dtype=torch.float64)
        assert relative_grad_error(fn, x) < 1e-3

    def test_dreambooth_gradient(self, setup):
        sched, model = setup
        x_prior = rand_images(1, 8, 35, dtype=torch.float64)

        def fn(x):
            return dreambooth_loss(model, x, x_prior, 1, 2, sched, LossWeights(),
                                   torch.Generator().manual_seed(35))

        x = rand_images(1, 8, 36, dtype=torch.float64)
        assert relative_grad_error(fn, x) < 1e-3

    def test_style_gradient_through_conv_encoder(self):
        enc = RandomConvEncoder(seed=5, dtype=torch.float64)
        x_t = rand_images(1, 8, 37, dtype=torch.float64)
        x_c = rand_images(1, 8, 38, dtype=torch.float64)

        def fn(x):
            return style_loss([enc], x, x_t, x_c)

        x = rand_images(1, 8, 39, dtype=torch.float64)
        assert relative_grad_error(fn, x) < 1e-3

import copy
import dataclasses
import math

import pytest
import torch

from styleguard.data import synthetic_style_images
from styleguard.errors import ConfigError
from styleguard.losses import EnsembleSpec, LossToggles, LossWeights
from styleguard.models import DenoiserModel, PixelEncoder, RandomConvEncoder
from styleguard.protect import (
    ProtectionConfig,
    ProtectionRunError,
    lookahead_finetune,
    run_styleguard,
    update_surrogate,
)
from styleguard.schedule import build_schedule, forward_diffuse
from styleguard.transforms import TransformSpec

from conftest import LinearDenoiser, rand_images


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


@pytest.fixture(scope="module")
def sched16():
    return build_schedule(20)


@pytest.fixture(scope="module")
def mini_corpus():
    parts = [synthetic_style_images(k, 4, 16, palette_seed=5) for k in ("stripes", "blobs")]
    return torch.cat(parts)


def pretrain(model, corpus, sched, steps=250, seed=3):
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    g = gen(seed)
    for _ in range(steps):
        idx = torch.randint(0, corpus.shape[0], (8,), generator=g)
        x0 = corpus[idx]
        t = int(torch.randint(1, sched.T + 1, (1,), generator=g).item())
        eps = torch.randn(x0.shape, generator=g)
        loss = ((eps - model.predict_noise(forward_diffuse(x0, t, eps, sched), t, 0)) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return model


@pytest.fixture(scope="module")
def mini_zoo(sched16, mini_corpus):
    """Small pretrained ensemble for fast orchestration tests.

    The attacker model shares the surrogates' architecture and training
    recipe but not their weights, mirroring the threat model of an
    adversary fine-tuning a different pretrained release.
    """
    surrogates = [
        pretrain(DenoiserModel(hidden=16, vocab_size=4, seed=s), mini_corpus, sched16, seed=s)
        for s in (1, 2)
    ]
    purifier = pretrain(
        DenoiserModel(hidden=12, n_blocks=2, vocab_size=4, seed=3), mini_corpus, sched16, seed=3
    )
    attacker = pretrain(
        DenoiserModel(hidden=16, vocab_size=4, seed=44), mini_corpus, sched16, seed=44
    )
    encoders = [PixelEncoder(), RandomConvEncoder(seed=4)]
    return surrogates, purifier, attacker, encoders


def fresh_ensembles(mini_zoo):
    surrogates, purifier, _, encoders = mini_zoo
    return EnsembleSpec(
        surrogates=[copy.deepcopy(m) for m in surrogates],
        purifiers=[copy.deepcopy(purifier)],
        encoders=encoders,
    )


def small_config(**overrides):
    defaults = dict(
        n_iters=2,
        finetune_steps=2,
        pgd_steps=2,
        step_size=0.005,
        budget=8.0 / 255.0,
        surrogate_lr=1e-3,
        transform_pool=(TransformSpec("identity"),),
        n_prior_images=2,
        seed=0,
    )
    defaults.update(overrides)
    return ProtectionConfig(**defaults)


class TestFinetuneOps:
    def test_zero_lr_copy_is_identical(self, sched16):
        model = DenoiserModel(hidden=8, vocab_size=4, seed=6)
        x = rand_images(2, 16, 0)
        x_prior = rand_images(2, 16, 1)
        copy_model = lookahead_finetune(model, x, 2, 0.0, (1, 2), sched16, gen(), x_prior,
                                        LossWeights())
        for p1, p2 in zip(model.parameters(), copy_model.parameters()):
            assert torch.equal(p1, p2)

    def test_input_model_untouched(self, sched16):
        model = DenoiserModel(hidden=8, vocab_size=4, seed=7)
        before = copy.deepcopy(model.state_dict())
        lookahead_finetune(model, rand_images(2, 16, 2), 3, 0.01, (1, 2), sched16, gen(),
                           rand_images(2, 16, 3), LossWeights())
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_single_step_moves_by_lr_times_hand_gradient(self, sched16):
        # scalar-parameter predictor eps_hat = a*x_t + b: both gradients
        # are computable by hand from the replicated (t, eps) draw
        model = LinearDenoiser(0.5, 0.1)
        x = rand_images(1, 8, 4)
        x_prior = rand_images(1, 8, 5)
        beta_lr = 0.01
        out = lookahead_finetune(model, x, 1, beta_lr, (1, 2), sched16, gen(11), x_prior,
                                 LossWeights(prior_weight=0.0))
        g = gen(11)
        t = int(torch.randint(1, 21, (1,), generator=g).item())
        eps = torch.randn(x.shape, generator=g)
        ab = sched16.alpha_bar_at(t)
        x_t = math.sqrt(ab) * x + math.sqrt(1 - ab) * eps
        resid = eps - (0.5 * x_t + 0.1)
        grad_a = float((-2 * resid * x_t).mean())
        grad_b = float((-2 * resid).mean())
        assert float(out.a) == pytest.approx(0.5 - beta_lr * grad_a, abs=1e-6)
        assert float(out.b) == pytest.approx(0.1 - beta_lr * grad_b, abs=1e-6)

    def test_update_surrogate_matches_lookahead(self, sched16):
        x = rand_images(2, 16, 6)
        x_prior = rand_images(2, 16, 7)
        m1 = DenoiserModel(hidden=8, vocab_size=4, seed=8)
        m2 = copy.deepcopy(m1)
        ahead = lookahead_finetune(m1, x, 2, 0.01, (1, 2), sched16, gen(5), x_prior, LossWeights())
        update_surrogate(m2, x, 2, 0.01, (1, 2), sched16, gen(5), x_prior, LossWeights())
        for p1, p2 in zip(ahead.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_update_zero_lr_is_noop(self, sched16):
        model = DenoiserModel(hidden=8, vocab_size=4, seed=9)
        before = copy.deepcopy(model.state_dict())
        update_surrogate(model, rand_images(1, 16, 8), 2, 0.0, (1, 2), sched16, gen(),
                         rand_images(1, 16, 9), LossWeights())
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())

    def test_convex_descent_on_bias_parameter(self, sched16):
        # b starts far from the noise mean; each quadratic step must pull
        # the frozen-draw loss down
        from styleguard.losses import dreambooth_loss

        model = LinearDenoiser(0.0, 5.0)
        x = rand_images(1, 8, 10)
        x_prior = rand_images(1, 8, 11)
        w = LossWeights(prior_weight=0.0)
        before = float(dreambooth_loss(model, x, x_prior, 1, 2, sched16, w, gen(77)))
        update_surrogate(model, x, 3, 0.05, (1, 2), sched16, gen(78), x_prior, w)
        after = float(dreambooth_loss(model, x, x_prior, 1, 2, sched16, w, gen(77)))
        assert after < before


class TestRunStyleguard:
    def test_zero_budget_returns_clean_exactly(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 3, 16, 0)
        xt = synthetic_style_images("blobs", 3, 16, 1)
        cfg = small_config(budget=0.0, toggles=LossToggles(denoise=True, upscale=False, style=False))
        art = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        assert torch.equal(art.x_protected, xc.double())

    def test_frozen_seed_bitwise_identical(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 3, 16, 0)
        xt = synthetic_style_images("blobs", 3, 16, 1)
        cfg = small_config(seed=5)
        a = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        b = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        assert torch.equal(a.x_protected, b.x_protected)
        assert a.loss_trace == b.loss_trace

    def test_clean_batch_never_mutated(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 3, 16, 0)
        xt = synthetic_style_images("blobs", 3, 16, 1)
        pristine = xc.clone()
        run_styleguard(small_config(), xc, xt, fresh_ensembles(mini_zoo), sched16)
        assert torch.equal(xc, pristine)

    def test_budget_and_range_invariants(self, mini_zoo, sched16):
        xc = synthetic_style_images("checker", 4, 16, 2)
        xt = synthetic_style_images("gradient", 4, 16, 3)
        cfg = small_config(n_iters=3, pgd_steps=3)
        art = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        dev = float((art.x_protected - xc.double()).abs().max())
        assert dev <= cfg.budget + 1e-9
        assert float(art.x_protected.min()) >= 0.0
        assert float(art.x_protected.max()) <= 1.0

    def test_trace_has_one_finite_row_per_iteration(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 2, 16, 4)
        xt = synthetic_style_images("blobs", 2, 16, 5)
        cfg = small_config(n_iters=4)
        art = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        assert len(art.loss_trace) == cfg.n_iters
        for row in art.loss_trace:
            for key in ("denoise", "upscale", "style", "total"):
                assert row[key] is not None and math.isfinite(row[key])

    def test_missing_ensemble_for_enabled_term_rejected(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 2, 16, 6)
        xt = synthetic_style_images("blobs", 2, 16, 7)
        ens = fresh_ensembles(mini_zoo)
        ens.encoders = []
        with pytest.raises(ConfigError):
            run_styleguard(small_config(), xc, xt, ens, sched16)

    def test_abort_attaches_partial_artifacts(self, mini_zoo, sched16):
        # an absurd surrogate learning rate blows parameters up to inf,
        # which must surface as an aborted run carrying partial artifacts
        xc = synthetic_style_images("stripes", 2, 16, 8)
        xt = synthetic_style_images("blobs", 2, 16, 9)
        cfg = small_config(n_iters=4, surrogate_lr=1e9)
        with pytest.raises(ProtectionRunError) as excinfo:
            run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        artifacts = excinfo.value.artifacts
        assert artifacts.complete is False
        assert artifacts.x_protected.shape == xc.shape

    def test_protected_images_harder_to_learn_than_clean(self, mini_zoo, sched16):
        # oracle: run the mimicry pipeline both ways with matched seeds
        # (fine-tune the pretrained attacker base on each image set) and
        # compare the fitted models' mean denoising error
        _, _, attacker, _ = mini_zoo
        xc = synthetic_style_images("stripes", 4, 16, 10)
        xt = synthetic_style_images("blobs", 4, 16, 11)
        cfg = small_config(n_iters=5, finetune_steps=2, pgd_steps=6, seed=1)
        art = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        x_prot = art.x_protected.float()

        def residual_after_training(x_train):
            model = copy.deepcopy(attacker)
            opt = torch.optim.Adam(model.parameters(), lr=2e-3)
            g = gen(55)
            for _ in range(150):
                t = int(torch.randint(1, sched16.T + 1, (1,), generator=g).item())
                eps = torch.randn(x_train.shape, generator=g)
                pred = model.predict_noise(forward_diffuse(x_train, t, eps, sched16), t, 1)
                loss = ((eps - pred) ** 2).mean()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            g_eval = gen(66)
            total = 0.0
            with torch.no_grad():
                for _ in range(40):
                    t = int(torch.randint(1, sched16.T + 1, (1,), generator=g_eval).item())
                    eps = torch.randn(x_train.shape, generator=g_eval)
                    pred = model.predict_noise(forward_diffuse(x_train, t, eps, sched16), t, 1)
                    total += float(((eps - pred) ** 2).mean())
            return total / 40

        assert residual_after_training(x_prot) > residual_after_training(xc)


class TestProtectionConfig:
    def test_invalid_counts_rejected(self):
        with pytest.raises(ConfigError):
            small_config(n_iters=0)
        with pytest.raises(ConfigError):
            small_config(pgd_steps=0)
        with pytest.raises(ConfigError):
            small_config(step_size=0.0)

    def test_echo_is_serializable(self):
        import json

        echo = small_config().echo()
        assert json.loads(json.dumps(echo)) == echo

    def test_checkpoints_saved_when_requested(self, mini_zoo, sched16):
        xc = synthetic_style_images("stripes", 2, 16, 12)
        xt = synthetic_style_images("blobs", 2, 16, 13)
        cfg = small_config(save_checkpoints=True)
        art = run_styleguard(cfg, xc, xt, fresh_ensembles(mini_zoo), sched16)
        assert art.surrogate_checkpoints is not None
        assert len(art.surrogate_checkpoints) == 2

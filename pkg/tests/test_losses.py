"""Loss terms against closed forms and elementwise oracles; discriminator
shape contracts; cadence accounting in the combined loss."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scenesynth.losses import (
    Discriminator,
    DiscriminatorConfig,
    IdentityExtractor,
    LossWeights,
    RandomConvExtractor,
    d_adv_loss,
    g_adv_loss,
    kl_loss,
    merge_nonsquare,
    path_length_penalty,
    perceptual_loss,
    r1_penalty,
    split_nonsquare,
    total_loss,
)


class TestDiscriminator:
    def test_batch_of_scores(self):
        disc = Discriminator(DiscriminatorConfig(input_res=16, max_channels=16, base_channels=8))
        scores = disc(torch.randn(5, 3, 16, 16))
        assert scores.shape == (5,)

    def test_zero_weights_give_bias(self):
        disc = Discriminator(
            DiscriminatorConfig(input_res=8, max_channels=8, base_channels=4, minibatch_stddev=False)
        )
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
            disc.out.bias.fill_(0.25)
        scores = disc(torch.randn(3, 3, 8, 8))
        assert torch.allclose(scores, torch.full((3,), 0.25))

    def test_rejects_wrong_resolution(self):
        disc = Discriminator(DiscriminatorConfig(input_res=16, max_channels=8))
        with pytest.raises(ValueError):
            disc(torch.randn(1, 3, 8, 8))


class TestSplitNonsquare:
    def test_wide_split(self):
        img = torch.randn(2, 3, 8, 16)
        halves = split_nonsquare(img)
        assert halves.shape == (4, 3, 8, 8)
        assert torch.equal(halves[:2], img[..., :, :8])
        assert torch.equal(halves[2:], img[..., :, 8:])

    def test_round_trip_bit_exact(self):
        img = torch.randn(3, 3, 4, 8)
        assert torch.equal(merge_nonsquare(split_nonsquare(img)), img)

    def test_toy_8x4(self):
        img = torch.arange(32, dtype=torch.float32).reshape(1, 1, 4, 8)
        halves = split_nonsquare(img)
        assert torch.equal(halves[0], img[0, :, :, :4])
        assert torch.equal(halves[1], img[0, :, :, 4:])

    def test_rejects_bad_aspect(self):
        with pytest.raises(ValueError):
            split_nonsquare(torch.randn(1, 3, 8, 12))


class TestAdversarialLosses:
    def test_g_at_zero_scores(self):
        scores = torch.zeros(4, dtype=torch.float64)
        assert g_adv_loss(scores).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_g_limit_large_scores(self):
        scores = torch.full((4,), 40.0, dtype=torch.float64)
        assert g_adv_loss(scores).item() == pytest.approx(0.0, abs=1e-9)

    def test_d_at_zero_scores(self):
        zeros = torch.zeros(4, dtype=torch.float64)
        val = d_adv_loss(zeros, zeros).item()
        assert val == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_d_limits(self):
        val = d_adv_loss(
            torch.full((2,), 50.0, dtype=torch.float64),
            torch.full((2,), -50.0, dtype=torch.float64),
        ).item()
        assert val == pytest.approx(0.0, abs=1e-9)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        real = rng.normal(size=7)
        fake = rng.normal(size=7)
        expected_g = np.mean(np.logaddexp(0.0, -fake))
        expected_d = np.mean(np.logaddexp(0.0, -real)) + np.mean(np.logaddexp(0.0, fake))
        assert g_adv_loss(torch.tensor(fake)).item() == pytest.approx(expected_g, rel=1e-9)
        assert d_adv_loss(torch.tensor(real), torch.tensor(fake)).item() == pytest.approx(
            expected_d, rel=1e-9
        )

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_convexity_in_scores(self, seed):
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.normal(size=5) * 3)
        b = torch.tensor(rng.normal(size=5) * 3)
        mid = (a + b) / 2
        assert g_adv_loss(mid) <= (g_adv_loss(a) + g_adv_loss(b)) / 2 + 1e-9
        ra = torch.tensor(rng.normal(size=5))
        assert d_adv_loss(ra, mid) <= (d_adv_loss(ra, a) + d_adv_loss(ra, b)) / 2 + 1e-9


class TestR1:
    def test_linear_discriminator_closed_form(self):
        w = torch.tensor([0.3, -1.1, 2.0, 0.7], dtype=torch.float64)
        x = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
        penalty = r1_penalty(x, lambda t: t @ w, weight=10.0)
        assert penalty.item() == pytest.approx(5.0 * float(w.pow(2).sum()), abs=1e-9)

    def test_two_dim_example(self):
        w = torch.tensor([1.0, 2.0], dtype=torch.float64)
        x = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
        penalty = r1_penalty(x, lambda t: t @ w, weight=10.0)
        assert penalty.item() == pytest.approx(25.0, abs=1e-9)

    def test_constant_discriminator_zero(self):
        x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        penalty = r1_penalty(x, lambda t: (t * 0.0).sum(dim=1) + 5.0, weight=10.0)
        assert penalty.item() == pytest.approx(0.0, abs=1e-12)

    def test_requires_grad_tracking(self):
        with pytest.raises(ValueError):
            r1_penalty(torch.randn(2, 3), lambda t: t.sum(dim=1))


class TestPathLength:
    def test_matched_target_zero_penalty(self):
        torch.manual_seed(0)
        m = torch.randn(12, 4)
        w = torch.randn(3, 4, requires_grad=True)
        images = (w @ m.t()).reshape(3, 3, 2, 2)
        gen = torch.Generator().manual_seed(5)
        # compute |J^T y| once, then re-run with that exact target
        _, lengths_target = path_length_penalty(w, images, torch.zeros(()), decay=0.0, generator=gen)
        gen = torch.Generator().manual_seed(5)
        penalty, _ = path_length_penalty(w, images, lengths_target, decay=1.0, generator=gen)
        # per-sample lengths differ; penalty equals their variance around the mean
        spread = penalty.item()
        gen = torch.Generator().manual_seed(5)
        penalty2, _ = path_length_penalty(w, images, lengths_target, decay=1.0, generator=gen)
        assert penalty.item() == pytest.approx(penalty2.item(), abs=1e-12)
        assert spread >= 0.0

    def test_single_sample_matched_target_is_zero(self):
        m = torch.randn(6, 4)
        w = torch.randn(1, 4, requires_grad=True)
        images = (w @ m.t()).reshape(1, 3, 2, 1)
        gen = torch.Generator().manual_seed(7)
        _, target = path_length_penalty(w, images, torch.zeros(()), decay=0.0, generator=gen)
        gen = torch.Generator().manual_seed(7)
        penalty, new_target = path_length_penalty(w, images, target, decay=1.0, generator=gen)
        assert penalty.item() == pytest.approx(0.0, abs=1e-10)
        assert new_target.item() == pytest.approx(target.item(), abs=1e-12)

    def test_batch_permutation_invariant(self):
        # permuting the batch (and its per-sample noise) leaves the penalty
        # unchanged: the expectation is symmetric in the samples
        torch.manual_seed(1)
        m = torch.randn(8, 4)
        w = torch.randn(4, 4)
        perm = torch.tensor([2, 0, 3, 1])

        w_leaf = w.clone().requires_grad_(True)
        images = (w_leaf @ m.t()).reshape(4, 2, 2, 2)
        y = torch.randn(images.shape) / math.sqrt(4.0)
        (grad,) = torch.autograd.grad((images * y).sum(), w_leaf, create_graph=False)
        lengths = grad.pow(2).sum(dim=1).sqrt()
        a = 0.9 * 0.5 + 0.1 * lengths.mean()
        penalty = 2.0 * (lengths - a).pow(2).mean()

        w_leaf2 = w[perm].clone().requires_grad_(True)
        images2 = (w_leaf2 @ m.t()).reshape(4, 2, 2, 2)
        (grad2,) = torch.autograd.grad((images2 * y[perm]).sum(), w_leaf2, create_graph=False)
        lengths2 = grad2.pow(2).sum(dim=1).sqrt()
        a2 = 0.9 * 0.5 + 0.1 * lengths2.mean()
        penalty2 = 2.0 * (lengths2 - a2).pow(2).mean()
        assert penalty.item() == pytest.approx(penalty2.item(), rel=1e-6)

    def test_jacobian_norm_matches_finite_difference(self):
        # toy 2-pixel linear generator: |J^T y| computable by perturbing w
        torch.manual_seed(2)
        m = torch.randn(2, 3, dtype=torch.float64)
        w = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)
        images = (w @ m.t()).reshape(1, 1, 2, 1)
        y = torch.randn(1, 1, 2, 1, dtype=torch.float64) / math.sqrt(2.0)
        (grad,) = torch.autograd.grad((images * y).sum(), w)
        analytic = grad.norm().item()
        eps = 1e-6
        fd = []
        for i in range(3):
            wp = w.detach().clone()
            wp[0, i] += eps
            wm = w.detach().clone()
            wm[0, i] -= eps
            fp = ((wp @ m.t()).reshape(1, 1, 2, 1) * y).sum().item()
            fm = ((wm @ m.t()).reshape(1, 1, 2, 1) * y).sum().item()
            fd.append((fp - fm) / (2 * eps))
        fd_norm = float(np.linalg.norm(fd))
        assert analytic == pytest.approx(fd_norm, rel=1e-3)

    def test_ema_update_rule(self):
        m = torch.randn(4, 2)
        w = torch.randn(2, 2, requires_grad=True)
        images = (w @ m.t()).reshape(2, 1, 2, 2)
        gen = torch.Generator().manual_seed(9)
        _, t1 = path_length_penalty(w, images, torch.tensor(2.0), decay=0.99, generator=gen)
        gen = torch.Generator().manual_seed(9)
        y = torch.randn(images.shape, generator=gen) / 2.0
        (grad,) = torch.autograd.grad((images * y).sum(), w)
        lengths = grad.pow(2).sum(dim=1).sqrt()
        expected = 2.0 + 0.01 * (lengths.mean().item() - 2.0)
        assert t1.item() == pytest.approx(expected, rel=1e-6)


class TestKL:
    def test_standard_normal_is_zero(self):
        assert kl_loss(torch.zeros(3, 4), torch.zeros(3, 4)).item() == 0.0

    def test_unit_mean_single_dim(self):
        assert kl_loss(torch.ones(1, 1), torch.zeros(1, 1)).item() == pytest.approx(0.5, abs=1e-9)

    def test_closed_form_oracle(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(size=(4, 6))
        logvar = rng.normal(size=(4, 6)) * 0.5
        expected = np.mean(
            -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)
        )
        got = kl_loss(torch.tensor(mu), torch.tensor(logvar)).item()
        assert got == pytest.approx(expected, rel=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        mu = torch.tensor(rng.normal(size=(2, 5)) * 2)
        logvar = torch.tensor(rng.normal(size=(2, 5)) * 2)
        assert kl_loss(mu, logvar).item() >= 0.0

    def test_zero_only_at_standard_normal(self):
        assert kl_loss(torch.full((1, 3), 1e-3), torch.zeros(1, 3)).item() > 0.0
        assert kl_loss(torch.zeros(1, 3), torch.full((1, 3), 1e-3)).item() > 0.0


class TestPerceptual:
    def test_identical_images_zero(self):
        img = torch.randn(2, 3, 8, 8)
        assert perceptual_loss(img, img.clone(), RandomConvExtractor(seed=0)).item() == 0.0

    def test_identity_extractor_is_mean_l1(self):
        a = torch.randn(2, 3, 8, 8)
        b = torch.randn(2, 3, 8, 8)
        got = perceptual_loss(a, b, IdentityExtractor()).item()
        assert got == pytest.approx((a - b).abs().mean().item(), rel=1e-6)

    def test_two_layer_oracle(self):
        class TwoLayer:
            def extract(self, images):
                return [images * 2.0, images.pow(2)]

        a = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        b = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        expected = (2 * a - 2 * b).abs().mean() + (a.pow(2) - b.pow(2)).abs().mean()
        got = perceptual_loss(a, b, TwoLayer())
        assert got.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_extractor_is_deterministic_and_frozen(self):
        e1 = RandomConvExtractor(seed=42)
        e2 = RandomConvExtractor(seed=42)
        for p1, p2 in zip(e1.parameters(), e2.parameters()):
            assert torch.equal(p1, p2)
            assert not p1.requires_grad

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            perceptual_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 8, 8), IdentityExtractor())


class TestTotalLoss:
    def test_paper_weights(self):
        w = LossWeights()
        assert w.lambda_kl == 0.01
        assert w.lambda_perceptual == 1.0
        assert w.pathlen_weight == 2.0
        assert w.r1_weight == 10.0
        assert (w.pathlen_every, w.r1_every, w.perceptual_every) == (4, 16, 4)

    def test_off_schedule_r1_dropped(self):
        w = LossWeights()
        parts = {"d_adv": torch.tensor(1.0), "r1": torch.tensor(3.0)}
        total, applied = total_loss(parts, w, iteration=15)
        assert "r1" not in applied
        assert total.item() == pytest.approx(1.0)

    def test_on_schedule_r1_compensated(self):
        w = LossWeights()
        parts = {"d_adv": torch.tensor(1.0), "r1": torch.tensor(3.0)}
        total, applied = total_loss(parts, w, iteration=16)
        assert applied["r1"].item() == pytest.approx(48.0)  # 16x compensation
        assert total.item() == pytest.approx(49.0)

    def test_generator_composition(self):
        w = LossWeights()
        parts = {
            "g_adv": torch.tensor(2.0),
            "kl": torch.tensor(10.0),
            "perceptual": torch.tensor(0.5),
            "path_length": torch.tensor(1.0),
        }
        total, applied = total_loss(parts, w, iteration=4)
        assert applied["kl"].item() == pytest.approx(0.1)
        assert applied["perceptual"].item() == pytest.approx(2.0)  # 1.0 * 4x
        assert applied["path_length"].item() == pytest.approx(4.0)
        assert total.item() == pytest.approx(2.0 + 0.1 + 2.0 + 4.0)

    def test_all_zero_parts(self):
        w = LossWeights()
        parts = {"g_adv": torch.tensor(0.0), "kl": torch.tensor(0.0)}
        total, _ = total_loss(parts, w, iteration=1)
        assert total.item() == 0.0

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_kl=0.0)
        with pytest.raises(ValueError):
            LossWeights(r1_every=0)

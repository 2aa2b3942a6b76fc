import math

import pytest
import torch

from mmdiff.diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_GUIDANCE_SCALE,
    DEFAULT_SAMPLE_STEPS,
    DEFAULT_T,
    GuidanceParams,
    build_schedule,
    cfg_combine,
    corrupt,
    select_condition,
    training_loss,
)


class TestSchedule:
    def test_defaults(self):
        assert DEFAULT_T == 1000
        assert DEFAULT_BETA_START == 8.5e-4
        assert DEFAULT_BETA_END == 0.012
        assert DEFAULT_GUIDANCE_SCALE == 8.0
        assert DEFAULT_SAMPLE_STEPS == 50

    def test_default_schedule_shape(self):
        sched = build_schedule()
        assert sched.T == 1000
        assert sched.betas.dtype == torch.float64
        assert math.isclose(float(sched.betas[0]), 8.5e-4, rel_tol=1e-12)
        assert math.isclose(float(sched.betas[-1]), 0.012, rel_tol=1e-12)
        assert (sched.betas[1:] > sched.betas[:-1]).all()
        assert (sched.alpha_bars[1:] < sched.alpha_bars[:-1]).all()

    def test_terminal_is_near_gaussian(self):
        sched = build_schedule()
        assert float(sched.alpha_bars[-1]) < 0.01
        assert sched.near_gaussian_terminal

    def test_scaled_linear_is_linear_in_sqrt_beta(self):
        sched = build_schedule(T=5, beta_start=0.01, beta_end=0.04)
        roots = sched.betas.sqrt()
        gaps = roots[1:] - roots[:-1]
        assert torch.allclose(gaps, gaps[0].expand_as(gaps))

    def test_plain_linear_is_linear_in_beta(self):
        sched = build_schedule(T=5, kind="linear", beta_start=0.01, beta_end=0.04)
        gaps = sched.betas[1:] - sched.betas[:-1]
        assert torch.allclose(gaps, gaps[0].expand_as(gaps))

    def test_single_step_schedule(self):
        sched = build_schedule(T=1, beta_start=0.3, beta_end=0.3)
        assert float(sched.alpha_bars[0]) == pytest.approx(0.7, rel=1e-12)

    def test_alpha_bar_lookup(self):
        sched = build_schedule(T=10)
        assert float(sched.alpha_bar(0)) == 1.0
        assert float(sched.alpha_bar(10)) == float(sched.alpha_bars[-1])
        batched = sched.alpha_bar(torch.tensor([0, 3, 10]))
        assert batched.shape == (3,)
        with pytest.raises(ValueError):
            sched.alpha_bar(11)
        with pytest.raises(ValueError):
            sched.alpha_bar(-1)

    def test_snr_decreasing(self):
        sched = build_schedule()
        snr = sched.snr(torch.arange(1, 1001))
        assert (snr[1:] < snr[:-1]).all()

    def test_validation(self):
        with pytest.raises(ValueError):
            build_schedule(T=0)
        with pytest.raises(ValueError):
            build_schedule(beta_start=0.02, beta_end=0.01)
        with pytest.raises(ValueError):
            build_schedule(kind="cosine")
        with pytest.raises(ValueError):
            build_schedule(beta_start=0.0)
        with pytest.raises(ValueError):
            build_schedule(beta_end=1.0)


class TestCorrupt:
    def test_matches_closed_form(self):
        sched = build_schedule(T=20)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(4, 3, 8, 8, generator=gen)
        eps = torch.randn(4, 3, 8, 8, generator=gen)
        t = 7
        ab = float(sched.alpha_bars[t - 1])
        want = math.sqrt(ab) * x + math.sqrt(1 - ab) * eps
        assert torch.allclose(corrupt(x, eps, t, sched), want, atol=1e-6)

    def test_t_zero_is_identity(self):
        sched = build_schedule(T=20)
        x = torch.randn(2, 3)
        assert torch.allclose(corrupt(x, torch.randn(2, 3), 0, sched), x)

    def test_per_sample_timesteps(self):
        sched = build_schedule(T=20)
        x = torch.ones(3, 2)
        eps = torch.zeros(3, 2)
        out = corrupt(x, eps, torch.tensor([0, 5, 20]), sched)
        ab = sched.alpha_bar(torch.tensor([0, 5, 20])).sqrt().float()
        assert torch.allclose(out, ab[:, None].expand(3, 2))

    def test_linears_in_noise(self):
        sched = build_schedule(T=20)
        x = torch.randn(2, 4)
        e1, e2 = torch.randn(2, 4), torch.randn(2, 4)
        mixed = corrupt(x, (e1 + e2) / 2, 9, sched)
        avg = (corrupt(x, e1, 9, sched) + corrupt(x, e2, 9, sched)) / 2
        assert torch.allclose(mixed, avg, atol=1e-6)

    def test_shape_mismatch(self):
        sched = build_schedule(T=10)
        with pytest.raises(ValueError):
            corrupt(torch.ones(2, 3), torch.ones(2, 4), 1, sched)
        with pytest.raises(ValueError):
            corrupt(torch.ones(2, 3), torch.ones(2, 3), torch.tensor([1, 2, 3]), sched)

    def test_marginal_statistics(self):
        # x_t should be N(sqrt(ab) x, (1-ab) I) over many noise draws
        sched = build_schedule(T=100)
        gen = torch.Generator().manual_seed(5)
        x = torch.tensor([[2.0, -1.0]])
        n = 20000
        t = 40
        eps = torch.randn(n, 2, generator=gen)
        out = corrupt(x.expand(n, 2), eps, t, sched)
        ab = float(sched.alpha_bar(t))
        se = math.sqrt((1 - ab) / n)
        assert (out.mean(0) - math.sqrt(ab) * x[0]).abs().max() < 4 * se
        var_se = (1 - ab) * math.sqrt(2 / (n - 1))
        assert (out.var(0) - (1 - ab)).abs().max() < 4 * var_se


class TestGuidance:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            GuidanceParams(scale=-1.0)
        with pytest.raises(ValueError):
            GuidanceParams(steps=0)
        with pytest.raises(ValueError):
            GuidanceParams(sampler="euler")

    def test_defaults(self):
        p = GuidanceParams()
        assert p.scale == 8.0
        assert p.steps == 50
        assert p.sampler == "pseudo_numerical"

    def test_combine_is_affine(self):
        gen = torch.Generator().manual_seed(1)
        eu = torch.randn(2, 3, generator=gen)
        ec = torch.randn(2, 3, generator=gen)
        for w in (0.5, 2.0, 8.0):
            assert torch.allclose(cfg_combine(eu, ec, w), eu + w * (ec - eu))

    def test_combine_endpoints_exact(self):
        eu, ec = torch.randn(2, 2), torch.randn(2, 2)
        assert cfg_combine(eu, ec, 0.0) is eu
        assert cfg_combine(eu, ec, 1.0) is ec

    def test_combine_validation(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.ones(2), torch.ones(3), 1.0)
        with pytest.raises(ValueError):
            cfg_combine(torch.ones(2), torch.ones(2), -0.5)


class TestConditionMixture:
    def test_rate_matches_probability(self):
        gen = torch.Generator().manual_seed(0)
        img, txt = object(), object()
        n = 10_000
        hits = sum(select_condition((img, txt), 0.2, gen) is img for _ in range(n))
        sigma = math.sqrt(0.2 * 0.8 / n)
        assert abs(hits / n - 0.2) < 3 * sigma

    def test_degenerate_probabilities(self):
        gen = torch.Generator().manual_seed(0)
        img, txt = object(), object()
        assert all(select_condition((img, txt), 1.0, gen) is img for _ in range(50))
        assert all(select_condition((img, txt), 0.0, gen) is txt for _ in range(50))

    def test_probability_validation(self):
        with pytest.raises(ValueError):
            select_condition((1, 2), 1.5, torch.Generator())

    def test_reproducible_under_seed(self):
        picks1 = [select_condition((0, 1), 0.5, torch.Generator().manual_seed(s)) for s in range(20)]
        picks2 = [select_condition((0, 1), 0.5, torch.Generator().manual_seed(s)) for s in range(20)]
        assert picks1 == picks2


class TestTrainingLoss:
    sched = build_schedule(T=50)

    def test_perfect_denoiser_gives_exact_zero(self):
        gen = torch.Generator().manual_seed(0)
        images = torch.randn(8, 3, 8, 8, generator=gen)
        noise = torch.randn(8, 3, 8, 8, generator=gen)

        loss = training_loss(
            lambda xt, c, t: noise, images, None, self.sched,
            torch.Generator().manual_seed(1), noise=noise,
        )
        assert float(loss) == 0.0

    def test_offset_denoiser_gives_exact_delta_squared(self):
        delta = 0.3
        gen = torch.Generator().manual_seed(0)
        images = torch.randn(8, 3, 8, 8, generator=gen)
        noise = torch.randn(8, 3, 8, 8, generator=gen)
        loss = training_loss(
            lambda xt, c, t: noise[: xt.shape[0]] + delta, images, None, self.sched,
            torch.Generator().manual_seed(1), noise=noise,
        )
        assert float(loss) == pytest.approx(delta**2, rel=1e-5)

    def test_zero_denoiser_expects_unit_loss(self):
        n = 4096
        gen = torch.Generator().manual_seed(2)
        images = torch.zeros(n, 8)
        loss = training_loss(
            lambda xt, c, t: torch.zeros_like(xt), images, None, self.sched,
            gen,
        )
        # loss = mean(eps^2); eps standard normal, so 3 sigma of the mean
        sigma = math.sqrt(2 / (n * 8))
        assert abs(float(loss) - 1.0) < 3 * sigma

    def test_dropout_routes_to_null_condition(self):
        seen = []

        def spy(xt, c, t):
            seen.append(c)
            return torch.zeros_like(xt)

        images = torch.randn(6, 4)
        conds = torch.randn(6, 3, 5)
        null = torch.randn(1, 5)
        training_loss(
            spy, images, conds, self.sched, torch.Generator().manual_seed(0),
            dropout=1.0, null_condition=null,
        )
        assert len(seen) == 1
        assert seen[0].shape == (6, 1, 5)
        assert torch.equal(seen[0][0], null)

    def test_dropout_zero_keeps_conditions(self):
        seen = []

        def spy(xt, c, t):
            seen.append(c)
            return torch.zeros_like(xt)

        images = torch.randn(4, 4)
        conds = torch.randn(4, 3, 5)
        training_loss(spy, images, conds, self.sched, torch.Generator().manual_seed(0))
        assert len(seen) == 1
        assert torch.equal(seen[0], conds)

    def test_dropout_splits_batch_and_weights_by_count(self):
        # with noise and timesteps pinned, the only generator draw left is the
        # dropout mask, so a same-seeded rand() predicts the split sizes
        gen = torch.Generator().manual_seed(3)
        images = torch.randn(64, 4, generator=gen)
        noise = torch.randn(64, 4, generator=gen)
        conds = torch.randn(64, 2, 3)
        null = torch.zeros(1, 3)
        expected_mask = torch.rand(64, generator=torch.Generator().manual_seed(4)) < 0.4
        seen_sizes = []

        def spy(xt, c, t):
            seen_sizes.append(xt.shape[0])
            return torch.zeros_like(xt)

        timesteps = torch.full((64,), 10, dtype=torch.long)
        loss = training_loss(
            spy, images, conds, self.sched, torch.Generator().manual_seed(4),
            dropout=0.4, null_condition=null, noise=noise, timesteps=timesteps,
        )
        n_dropped = int(expected_mask.sum())
        assert sorted(seen_sizes) == sorted([64 - n_dropped, n_dropped])
        # both buckets predicted zero, so the loss is the full-batch mean of eps^2
        assert float(loss) == pytest.approx(float((noise**2).mean()), rel=1e-5)

    def test_dropout_without_null_rejected(self):
        with pytest.raises(ValueError, match="null"):
            training_loss(
                lambda xt, c, t: xt, torch.randn(8, 4), torch.randn(8, 2, 3),
                self.sched, torch.Generator().manual_seed(0), dropout=0.9,
            )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            training_loss(
                lambda xt, c, t: xt, torch.zeros(0, 4), None,
                self.sched, torch.Generator(),
            )

    def test_bad_denoiser_shape_rejected(self):
        with pytest.raises(ValueError, match="denoiser returned"):
            training_loss(
                lambda xt, c, t: xt[..., :2], torch.randn(4, 6), None,
                self.sched, torch.Generator().manual_seed(0),
            )

    def test_timesteps_sampled_in_closed_range(self):
        seen = []

        def spy(xt, c, t):
            seen.append(t)
            return torch.zeros_like(xt)

        sched = build_schedule(T=5)
        for s in range(40):
            training_loss(spy, torch.randn(8, 2), None, sched,
                          torch.Generator().manual_seed(s))
        all_t = torch.cat(seen)
        assert int(all_t.min()) >= 1
        assert int(all_t.max()) <= 5
        assert set(all_t.tolist()) == {1, 2, 3, 4, 5}

"""Schedule, guidance algebra, and DDIM sampler tests."""

import numpy as np
import pytest

from idsprite.diffusion import (
    GuidanceBranches,
    GuidanceWeights,
    NoiseSchedule,
    combine_guidance,
    ddim_sample,
    ddim_timesteps,
    q_sample,
)
from idsprite.rng import Rng
from idsprite.tensor import DomainError, NumericError, ShapeError, Tensor


def rand(shape, seed, tag="x"):
    return Tensor(Rng(seed).child(tag).normal(shape))


class TestSchedule:
    def test_alpha_bar_strictly_decreasing(self):
        s = NoiseSchedule()
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == pytest.approx(1.0, abs=2e-4)
        assert s.alpha_bars[-1] < 1e-4

    def test_betas_linear_endpoints(self):
        s = NoiseSchedule()
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(2e-2)
        assert len(s.betas) == 1000
        steps = np.diff(s.betas)
        np.testing.assert_allclose(steps, steps[0], rtol=1e-9)


class TestQSample:
    def test_t0_close_to_x0(self):
        s = NoiseSchedule()
        x0 = rand((2, 1, 8, 8), 0)
        n = rand((2, 1, 8, 8), 0, "n")
        out = q_sample(s, x0, 0, n)
        # ab_0 = 1 - 1e-4, so the pull toward noise is of order 1e-2
        assert float(np.abs(out.data - x0.data).max()) < 0.05

    def test_zero_noise_pure_scale(self):
        s = NoiseSchedule()
        x0 = rand((2, 1, 4, 4), 1)
        zero = Tensor(np.zeros_like(x0.data))
        out = q_sample(s, x0, 600, zero)
        c = np.sqrt(s.alpha_bars[600]).astype(np.float32)
        np.testing.assert_array_equal(out.data, c * x0.data)

    def test_t_out_of_range(self):
        s = NoiseSchedule()
        x0 = rand((1, 1, 2, 2), 2)
        for t in (-1, 1000, 5000):
            with pytest.raises(DomainError):
                q_sample(s, x0, t, x0)

    def test_shape_mismatch(self):
        s = NoiseSchedule()
        with pytest.raises(ShapeError):
            q_sample(s, rand((1, 1, 4, 4), 3), 0, rand((1, 1, 2, 2), 3))

    def test_per_sample_timesteps(self):
        s = NoiseSchedule()
        x0 = rand((3, 1, 4, 4), 4)
        n = rand((3, 1, 4, 4), 4, "n")
        t = np.array([0, 500, 999])
        out = q_sample(s, x0, t, n)
        for i, ti in enumerate(t):
            row = q_sample(s, Tensor(x0.data[i:i + 1]), int(ti), Tensor(n.data[i:i + 1]))
            np.testing.assert_array_equal(out.data[i], row.data[0])

    def test_variance_matches_closed_form(self):
        # Monte-Carlo oracle: x0 ~ N(0, sig2), eps ~ N(0,1) => var = ab*sig2 + (1-ab)
        s = NoiseSchedule()
        t = 400
        sig2 = 2.5
        rng = Rng(99)
        x0 = Tensor(rng.child("x0").normal((10000, 4)) * np.sqrt(sig2, dtype=np.float32))
        eps = Tensor(rng.child("eps").normal((10000, 4)))
        out = q_sample(s, x0, t, eps)
        want = s.alpha_bars[t] * sig2 + (1.0 - s.alpha_bars[t])
        got = float(out.data.var())
        assert abs(got - want) / want < 0.05


class TestCombineGuidance:
    def test_unit_weights_bit_exact(self):
        for seed in range(20):
            br = GuidanceBranches(y_none=rand((2, 3), seed, "n"), y_text=rand((2, 3), seed, "t"),
                                  y_text_ref=rand((2, 3), seed, "tr"))
            w = GuidanceWeights(lambda_text=1.0, lambda_ref=1.0)
            out = combine_guidance(br, w)
            assert out is br.y_text_ref

    def test_zero_ref_weight_is_text_cfg(self):
        for seed in range(20):
            yn, yt = rand((4,), seed, "n"), rand((4,), seed, "t")
            br = GuidanceBranches(y_none=yn, y_text=yt, y_text_ref=rand((4,), seed, "tr"))
            out = combine_guidance(br, GuidanceWeights(lambda_text=7.5, lambda_ref=0.0))
            want = yn.data + np.float32(7.5) * (yt.data - yn.data)
            np.testing.assert_allclose(out.data, want, rtol=1e-6)

    def test_scalar_example(self):
        br = GuidanceBranches(y_none=Tensor(np.float32(0.0)), y_text=Tensor(np.float32(1.0)),
                              y_text_ref=Tensor(np.float32(1.0)))
        out = combine_guidance(br, GuidanceWeights(lambda_text=7.5, lambda_ref=2.0))
        assert out.item() == pytest.approx(7.5)

    def test_affine_in_branches(self):
        # scaling every branch by c scales the result by c
        for seed in range(100):
            shape = (3, 2)
            yn, yt, ytr = (rand(shape, seed, tag) for tag in ("n", "t", "tr"))
            w = GuidanceWeights(lambda_text=3.5, lambda_ref=1.75)
            base = combine_guidance(GuidanceBranches(y_none=yn, y_text=yt, y_text_ref=ytr), w)
            c = np.float32(Rng(seed).child("c").uniform(-2.0, 2.0))
            scaled = combine_guidance(
                GuidanceBranches(y_none=Tensor(c * yn.data), y_text=Tensor(c * yt.data),
                                 y_text_ref=Tensor(c * ytr.data)), w)
            np.testing.assert_allclose(scaled.data, c * base.data, rtol=1e-5, atol=1e-5)

    def test_ref_anchored(self):
        yr, ytr = rand((4,), 0, "r"), rand((4,), 0, "tr")
        w = GuidanceWeights(lambda_text=4.0, mode="ref_anchored")
        out = combine_guidance(GuidanceBranches(y_ref=yr, y_text_ref=ytr), w)
        want = yr.data + np.float32(4.0) * (ytr.data - yr.data)
        np.testing.assert_allclose(out.data, want, rtol=1e-6)
        unit = combine_guidance(GuidanceBranches(y_ref=yr, y_text_ref=ytr),
                                GuidanceWeights(lambda_text=1.0, mode="ref_anchored"))
        assert unit is ytr

    def test_missing_branch(self):
        with pytest.raises(ValueError, match="missing"):
            combine_guidance(GuidanceBranches(y_none=rand((2,), 0)), GuidanceWeights())
        with pytest.raises(ValueError, match="missing"):
            combine_guidance(GuidanceBranches(y_text_ref=rand((2,), 0)),
                             GuidanceWeights(mode="ref_anchored"))

    def test_shape_disagreement(self):
        br = GuidanceBranches(y_none=rand((2,), 0), y_text=rand((3,), 0),
                              y_text_ref=rand((2,), 0))
        with pytest.raises(ShapeError):
            combine_guidance(br, GuidanceWeights())

    def test_bad_mode_and_lambda_feat(self):
        with pytest.raises(ValueError):
            GuidanceWeights(mode="four_branch")
        with pytest.raises(ValueError):
            GuidanceWeights(lambda_feat=1.5)


class _OracleNet:
    """Analytic denoiser that knows the planted x0: returns the exact noise
    consistent with the current x_t."""

    def __init__(self, x0, schedule):
        self.x0 = x0
        self.schedule = schedule
        self.calls = []

    def __call__(self, x, t, text=None, cache=None, lambda_feat=None):
        self.calls.append((t, text is not None, cache is not None))
        ab = self.schedule.alpha_bars[t]
        eps = (x.data.astype(np.float64) - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)
        return Tensor(eps.astype(np.float32))


class TestDdim:
    def test_timestep_striding(self):
        taus = ddim_timesteps(1000, 50)
        assert len(taus) == 50 and taus[0] == 999 and taus[-1] == 19
        assert all(a - b == 20 for a, b in zip(taus, taus[1:]))
        with pytest.raises(ValueError):
            ddim_timesteps(1000, 33)

    def test_oracle_recovers_planted_image(self):
        sched = NoiseSchedule()
        x0 = Rng(7).child("x0").uniform(0.05, 0.95, (1, 1, 8, 8)).astype(np.float64)
        net = _OracleNet(x0, sched)
        out = ddim_sample(net, sched, (1, 1, 8, 8), None, None,
                          GuidanceWeights(lambda_text=1.0, lambda_ref=1.0), seed=3,
                          steps=1000)
        assert float(np.abs(out.data - x0).max()) < 1e-4

    def test_deterministic(self):
        sched = NoiseSchedule()
        x0 = Rng(8).child("x0").uniform(0.2, 0.8, (1, 1, 4, 4)).astype(np.float64)
        kw = dict(text=None, cache=None, w=GuidanceWeights(lambda_text=1.0, lambda_ref=1.0),
                  seed=11, steps=50)
        a = ddim_sample(_OracleNet(x0, sched), sched, (1, 1, 4, 4), **kw)
        b = ddim_sample(_OracleNet(x0, sched), sched, (1, 1, 4, 4), **kw)
        np.testing.assert_array_equal(a.data, b.data)
        c = ddim_sample(_OracleNet(x0, sched), sched, (1, 1, 4, 4), **{**kw, "seed": 12})
        assert np.any(c.data != a.data)

    def test_three_branch_runs_three_calls_per_step(self):
        sched = NoiseSchedule()
        x0 = np.full((1, 1, 2, 2), 0.5)
        net = _OracleNet(x0, sched)
        ddim_sample(net, sched, (1, 1, 2, 2), ("a", "face"), "CACHE",
                    GuidanceWeights(), seed=0, steps=10)
        assert len(net.calls) == 30
        per_step = net.calls[:3]
        assert per_step == [(999, False, False), (999, True, False), (999, True, True)]

    def test_ref_anchored_runs_two_calls_per_step(self):
        sched = NoiseSchedule()
        net = _OracleNet(np.full((1, 1, 2, 2), 0.5), sched)
        ddim_sample(net, sched, (1, 1, 2, 2), ("a", "face"), "CACHE",
                    GuidanceWeights(mode="ref_anchored"), seed=0, steps=10)
        assert len(net.calls) == 20
        assert net.calls[:2] == [(999, False, True), (999, True, True)]

    def test_cache_provider_called_per_timestep(self):
        sched = NoiseSchedule()
        seen = []

        def provider(t):
            seen.append(t)
            return "CACHE"

        net = _OracleNet(np.full((1, 1, 2, 2), 0.5), sched)
        ddim_sample(net, sched, (1, 1, 2, 2), None, provider, GuidanceWeights(),
                    seed=0, steps=5)
        assert seen == ddim_timesteps(1000, 5)

    def test_output_clipped_to_unit_interval(self):
        sched = NoiseSchedule()
        x0 = np.full((1, 1, 2, 2), 3.0)  # oracle wants to leave [0,1]
        out = ddim_sample(_OracleNet(x0, sched), sched, (1, 1, 2, 2), None, None,
                          GuidanceWeights(lambda_text=1.0, lambda_ref=1.0), seed=1, steps=10)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_nonfinite_reports_step(self):
        sched = NoiseSchedule()

        class Bad:
            def __call__(self, x, t, **kw):
                val = np.nan if t < 900 else 0.0
                return Tensor(np.full(x.shape, val, np.float32))

        with pytest.raises(NumericError, match=r"step \d+"):
            ddim_sample(Bad(), sched, (1, 1, 2, 2), None, None,
                        GuidanceWeights(lambda_text=1.0, lambda_ref=1.0), seed=0, steps=10)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from videdit.diffusion import (LatentState, Trajectory, add_noise, cfg_combine, ddim_invert,
                               ddim_invert_step, ddim_sample, ddim_step, make_schedule)

# Cumulative product for scaled_linear(0.00085, 0.012), T=1000, computed with
# mpmath at 40 digits, independent of numpy.
ALPHA_BAR_T_SCALED_LINEAR = 0.004660098513077240403897666365925197809147


def two_step_schedule():
    s = make_schedule(T=2, beta_start=0.1, beta_end=0.2, kind="linear", sampler_S=2)
    return s


class TestSchedule:
    def test_two_step_products(self):
        s = two_step_schedule()
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)

    def test_constant_schedule(self):
        s = make_schedule(T=1000, beta_start=0.01, beta_end=0.01, kind="linear", sampler_S=50)
        assert np.all(s.betas == 0.01)

    def test_scaled_linear_final_alpha_bar(self):
        s = make_schedule(1000, 0.00085, 0.012, "scaled_linear", 50)
        assert s.alpha_bars[-1] == pytest.approx(ALPHA_BAR_T_SCALED_LINEAR, rel=1e-12)

    def test_invariants(self):
        s = make_schedule()
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
        np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-14)
        assert len(s.sampler_steps) == 50
        assert s.sampler_steps[0] == 1000 and s.sampler_steps[-1] == 20
        assert all(a > b for a, b in zip(s.sampler_steps, s.sampler_steps[1:]))
        assert s.alpha_bar(0) == 1.0

    @pytest.mark.parametrize("kwargs", [
        dict(T=0), dict(beta_start=0.0), dict(beta_start=0.02, beta_end=0.01),
        dict(beta_end=1.0), dict(sampler_S=0), dict(T=10, sampler_S=11), dict(kind="cosine"),
    ])
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            make_schedule(**kwargs)


class TestAddNoise:
    def test_zero_noise(self):
        s = make_schedule()
        x0 = torch.full((2, 4, 3, 3), 0.7, dtype=torch.float64)
        out = add_noise(x0, torch.zeros_like(x0), 500, s)
        assert torch.allclose(out, math.sqrt(s.alpha_bar(500)) * x0, atol=0, rtol=1e-15)

    def test_zero_signal(self):
        s = make_schedule()
        e = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        out = add_noise(torch.zeros_like(e), e, 10, s)
        assert torch.allclose(out, math.sqrt(1 - s.alpha_bar(10)) * e, rtol=1e-15, atol=0)

    def test_hand_value(self):
        s = two_step_schedule()
        out = add_noise(torch.ones(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64), 2, s)
        assert out.item() == pytest.approx(1.377678399636775, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            add_noise(torch.zeros(2), torch.zeros(3), 1, make_schedule())


class TestCfg:
    def test_w_one_is_cond_exactly(self):
        u, c = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
        assert torch.equal(cfg_combine(u, c, 1.0), c)
        assert torch.equal(cfg_combine(u, c, 0.0), u)

    def test_guidance_value(self):
        assert cfg_combine(torch.zeros(1), torch.ones(1), 7.5).item() == 7.5

    @given(st.floats(-20, 20), st.floats(-5, 5), st.floats(-5, 5))
    def test_affine_in_w(self, w, u, c):
        u_t, c_t = torch.tensor([u], dtype=torch.float64), torch.tensor([c], dtype=torch.float64)
        assert cfg_combine(u_t, c_t, w).item() == pytest.approx(u + w * (c - u), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


class TestDDIMStep:
    def test_noise_free_ray(self):
        s = make_schedule()
        c = torch.full((3,), 0.3, dtype=torch.float64)
        z = math.sqrt(s.alpha_bar(600)) * c
        out = ddim_step(z, torch.zeros_like(z), 600, 400, s)
        assert torch.allclose(out, math.sqrt(s.alpha_bar(400)) * c, rtol=1e-14, atol=0)

    def test_hand_value_and_inverse(self):
        s = two_step_schedule()  # alpha_bar(2)=0.72, alpha_bar(1)=0.9
        z = torch.tensor([0.8485], dtype=torch.float64)
        out = ddim_step(z, torch.zeros_like(z), 2, 1, s)
        assert out.item() == pytest.approx(0.9486518394542858, abs=1e-12)
        back = ddim_invert_step(out, torch.zeros_like(out), 1, 2, s)
        assert back.item() == pytest.approx(0.8485, abs=1e-12)

    def test_final_step_returns_pred_x0(self):
        s = make_schedule()
        x0 = torch.randn(4, dtype=torch.float64)
        eps = torch.randn(4, dtype=torch.float64)
        zt = add_noise(x0, eps, 20, s)
        assert torch.allclose(ddim_step(zt, eps, 20, 0, s), x0, atol=1e-12)

    def test_rejects_wrong_order(self):
        s = make_schedule()
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1), torch.zeros(1), 10, 20, s)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_round_trip(self, seed):
        s = make_schedule()
        g = torch.Generator().manual_seed(seed)
        i = int(torch.randint(0, 50, (1,), generator=g))
        t, tp = s.sampler_steps[i], s.prev_timestep(i)
        z = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        e = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
        assert (ddim_step(ddim_invert_step(z, e, tp, t, s), e, t, tp, s) - z).abs().max() <= 1e-10
        assert (ddim_invert_step(ddim_step(z, e, t, tp, s), e, tp, t, s) - z).abs().max() <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
    def test_pred_x0_recovers_data(self, t, seed):
        s = make_schedule()
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(8, generator=g, dtype=torch.float64)
        eps = torch.randn(8, generator=g, dtype=torch.float64)
        zt = add_noise(x0, eps, t, s)
        pred = (zt - math.sqrt(1 - s.alpha_bar(t)) * eps) / math.sqrt(s.alpha_bar(t))
        assert (pred - x0).abs().max() <= 1e-10 * max(1.0, 1 / math.sqrt(s.alpha_bar(t)))


class ZeroModel:
    def __init__(self):
        self.calls = 0

    def __call__(self, z, t, text, hooks=None):
        self.calls += 1
        return torch.zeros_like(z)


class LinearModel:
    """Smooth deterministic eps model: a fixed linear map of z plus a t-dependent shift."""

    def __init__(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.a = 0.05 * torch.randn(1, 4, 1, 1, generator=g, dtype=torch.float64)

    def __call__(self, z, t, text, hooks=None):
        return self.a * z + 1e-4 * t


class TestSamplerAndInversion:
    def test_zero_model_inversion_is_noise_free_ray(self):
        s = make_schedule()
        x0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        traj = ddim_invert(ZeroModel(), x0, None, s)
        assert len(traj) == 51
        assert traj.timesteps() == [0] + list(reversed(s.sampler_steps))
        for state in traj.states:
            assert torch.allclose(state.z, math.sqrt(s.alpha_bar(state.t)) * x0, rtol=1e-12, atol=1e-14)

    def test_single_step_sampler(self):
        s = make_schedule(sampler_S=1)
        m = ZeroModel()
        traj = ddim_sample(m, torch.randn(1, 4, 2, 2, dtype=torch.float64), "c", "n", 7.5, s)
        assert m.calls == 2
        assert len(traj) == 2

    def test_blender_with_zero_mask_keeps_reference(self):
        s = make_schedule(sampler_S=10)
        ref = ddim_sample(LinearModel(), torch.randn(1, 4, 2, 2, dtype=torch.float64), "c", "n", 1.0, s)
        z_T = ref.states[0].z

        def blender(i, z):
            return ref.states[i + 1].z * 1.0 + z * 0.0

        other = ddim_sample(LinearModel(seed=5), z_T, "c", "n", 1.0, s, blender=blender)
        assert torch.equal(other.final, ref.final)

    def test_fixed_point_inversion_round_trip(self):
        s = make_schedule()
        x0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        m = LinearModel()
        inv = ddim_invert(m, x0, None, s, fixed_point_iters=20)
        rec = ddim_sample(m, inv.final, None, None, 1.0, s).final
        assert (rec - x0).pow(2).mean().sqrt() < 1e-6

    def test_trajectory_timesteps_increase(self):
        s = make_schedule(sampler_S=10)
        traj = ddim_invert(LinearModel(), torch.randn(1, 4, 2, 2, dtype=torch.float64), None, s)
        ts = traj.timesteps()
        assert all(a < b for a, b in zip(ts, ts[1:]))

    def test_sampler_is_deterministic(self):
        s = make_schedule(sampler_S=10)
        z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        a = ddim_sample(LinearModel(), z, None, None, 3.0, s)
        b = ddim_sample(LinearModel(), z, None, None, 3.0, s)
        for x, y in zip(a.states, b.states):
            assert torch.equal(x.z, y.z)

    def test_nonfinite_aborts_with_step(self):
        from videdit.errors import NumericalError

        def bad(z, t, text, hooks=None):
            return torch.full_like(z, float("nan"))

        with pytest.raises(NumericalError, match="step 0"):
            ddim_sample(bad, torch.zeros(1, 4, 2, 2, dtype=torch.float64), None, None, 1.0, make_schedule())

    def test_trajectory_arrays(self):
        traj = Trajectory([LatentState(torch.zeros(1), 0, 10), LatentState(torch.ones(1), 1, 0)])
        arrays = traj.to_arrays()
        assert set(arrays) == {"z_0", "z_1", "timesteps"}

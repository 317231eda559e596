import math

import numpy as np
import pytest
import torch

from rewardedit.diffusion import (
    NoiseSchedule,
    compose_masked,
    ddim_step,
    forward_diffuse,
    make_schedule,
    predict_x0,
    sample_edit,
    sampling_timesteps,
)

# frozen values computed directly from the closed-form schedule definitions
LINEAR_AB_END_20 = 4.318574906034135e-05
LINEAR_AB_15_OF_20 = 0.0034414065856249506
COSINE_AB_END_8 = 3.7471954773866814e-05


def custom_sched(alpha_bar):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return NoiseSchedule(T=len(ab) - 1, alpha_bar=ab)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 8, 20, 50])
def test_schedule_invariants(kind, T):
    s = make_schedule(T, kind)
    assert s.alpha_bar.shape == (T + 1,)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] > 0
    assert np.all(s.alpha_bar <= 1.0)


def test_minimal_linear_schedule():
    s = make_schedule(1, "linear")
    assert s.alpha_bar[0] == 1.0
    assert 0.0 < s.alpha_bar[1] < 1.0


def test_frozen_schedule_values():
    lin = make_schedule(20, "linear")
    assert lin.alpha_bar[20] == pytest.approx(LINEAR_AB_END_20, rel=1e-12)
    assert lin.alpha_bar[15] == pytest.approx(LINEAR_AB_15_OF_20, rel=1e-12)
    cos = make_schedule(8, "cosine")
    assert cos.alpha_bar[8] == pytest.approx(COSINE_AB_END_8, rel=1e-12)


def test_schedule_shares_noise_curve_across_T():
    # u = t/T indexes the same curve, so phase-2 grids subsample phase-1
    a = make_schedule(20, "linear")
    b = make_schedule(8, "linear")
    assert a.alpha_bar[15] == pytest.approx(b.alpha_bar[6], rel=1e-12)


def test_schedule_validation_errors():
    with pytest.raises(ValueError):
        make_schedule(0, "linear")
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5]))  # wrong length
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, alpha_bar=np.array([0.9, 0.5, 0.2]))  # ab[0] != 1
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, 0.5]))  # not strict
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.5, 0.0]))  # terminal zero


def test_snr_strictly_decreasing():
    for kind in ("linear", "cosine"):
        s = make_schedule(20, kind)
        assert np.all(np.diff(s.snr()) < 0)


def test_forward_diffuse_identity_at_zero():
    s = make_schedule(10, "linear")
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    assert torch.equal(forward_diffuse(x0, 0, eps, s), x0)


def test_forward_diffuse_closed_form():
    s = custom_sched([1.0, 0.25])
    x0 = torch.full((3, 4, 4), 2.0, dtype=torch.float64)
    eps = torch.zeros(3, 4, 4, dtype=torch.float64)
    out = forward_diffuse(x0, 1, eps, s)
    assert torch.allclose(out, torch.ones_like(out))


def test_forward_diffuse_pure_noise_limit():
    s = custom_sched([1.0, 1e-12])
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    assert torch.allclose(forward_diffuse(x0, 1, eps, s), eps, atol=1e-5)


def test_forward_diffuse_errors():
    s = make_schedule(5, "linear")
    x = torch.zeros(3, 4, 4)
    with pytest.raises(ValueError):
        forward_diffuse(x, 6, torch.zeros_like(x), s)
    with pytest.raises(ValueError):
        forward_diffuse(x, -1, torch.zeros_like(x), s)
    with pytest.raises(ValueError):
        forward_diffuse(x, 1, torch.zeros(3, 4, 5), s)


def test_predict_x0_closed_forms():
    s = custom_sched([1.0, 0.25])
    x_t = torch.full((1, 2, 2), 1.0, dtype=torch.float64)
    eps = torch.ones_like(x_t)
    expected = (1.0 - math.sqrt(0.75)) / 0.5  # 0.2679491924311228
    assert predict_x0(x_t, eps, 1, s).allclose(torch.full_like(x_t, expected), rtol=1e-12)
    out = predict_x0(torch.full_like(x_t, 0.5), torch.zeros_like(x_t), 1, s)
    assert out.allclose(torch.ones_like(x_t), rtol=1e-12)


def test_predict_x0_rejects_t0():
    s = make_schedule(5, "linear")
    x = torch.zeros(3, 4, 4)
    with pytest.raises(ValueError):
        predict_x0(x, x, 0, s)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_round_trip_identity(kind):
    s = make_schedule(20, kind)
    g = torch.Generator().manual_seed(7)
    for _ in range(5):
        x0 = torch.rand(3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
        eps = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
        for t in range(1, s.T + 1):
            rec = predict_x0(forward_diffuse(x0, t, eps, s), eps, t, s)
            assert torch.max(torch.abs(rec - x0)) < 1e-6


def test_ddim_step_full_jump_equals_prediction():
    s = custom_sched([1.0, 0.5, 0.25])
    g = torch.Generator().manual_seed(3)
    x_t = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    jump = ddim_step(x_t, eps, 2, 0, s)
    assert torch.allclose(jump, predict_x0(x_t, eps, 2, s), rtol=1e-12)


def test_ddim_step_frozen_value():
    s = custom_sched([1.0, 0.5, 0.25])
    x_t = torch.full((1, 2, 2), 1.0, dtype=torch.float64)
    eps = torch.ones_like(x_t)
    out = ddim_step(x_t, eps, 2, 1, s)
    assert out.allclose(torch.full_like(x_t, 0.8965754721680537), rtol=1e-12)


def test_ddim_true_noise_is_deterministic_forward_map():
    s = make_schedule(12, "linear")
    g = torch.Generator().manual_seed(9)
    x0 = torch.rand(3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    x_cur = forward_diffuse(x0, s.T, eps, s)
    for t in range(s.T, 0, -1):
        assert torch.max(torch.abs(predict_x0(x_cur, eps, t, s) - x0)) < 1e-5
        x_cur = ddim_step(x_cur, eps, t, t - 1, s)
        expected = forward_diffuse(x0, t - 1, eps, s)
        assert torch.max(torch.abs(x_cur - expected)) < 1e-6
    assert torch.max(torch.abs(x_cur - x0)) < 1e-6


def test_ddim_step_errors():
    s = make_schedule(5, "linear")
    x = torch.zeros(3, 4, 4)
    with pytest.raises(ValueError):
        ddim_step(x, x, 2, 2, s)
    with pytest.raises(ValueError):
        ddim_step(x, x, 2, 3, s)


def test_compose_masked_identity_and_replacement():
    g = torch.Generator().manual_seed(11)
    x = torch.randn(3, 8, 8, generator=g)
    y = torch.randn(3, 8, 8, generator=g)
    zeros = torch.zeros(1, 8, 8)
    ones = torch.ones(1, 8, 8)
    assert torch.equal(compose_masked(x, zeros, y), x)
    assert torch.equal(compose_masked(x, ones, y), y)


def test_compose_masked_partition_bit_exact():
    g = torch.Generator().manual_seed(12)
    x = torch.randn(3, 8, 8, generator=g)
    y = torch.randn(3, 8, 8, generator=g)
    m = torch.zeros(1, 8, 8)
    m[:, :, :4] = 1.0
    out = compose_masked(x, m, y)
    assert torch.equal(out[:, :, :4], y[:, :, :4])
    assert torch.equal(out[:, :, 4:], x[:, :, 4:])


def test_compose_masked_idempotent_in_unmasked_region():
    g = torch.Generator().manual_seed(13)
    x = torch.randn(3, 8, 8, generator=g)
    y = torch.randn(3, 8, 8, generator=g)
    m = (torch.rand(1, 8, 8, generator=g) > 0.5).float()
    once = compose_masked(x, m, y)
    twice = compose_masked(x, m, once)
    assert torch.equal(once, twice)


def test_compose_masked_shape_error():
    x = torch.zeros(3, 8, 8)
    with pytest.raises(ValueError):
        compose_masked(x, torch.zeros(1, 8, 8), torch.zeros(3, 8, 4))
    with pytest.raises(ValueError):
        compose_masked(x, torch.zeros(1, 4, 4), torch.zeros_like(x))


def test_sampling_timesteps():
    s = make_schedule(8, "linear")
    assert sampling_timesteps(s, 8) == [8, 7, 6, 5, 4, 3, 2, 1, 0]
    with pytest.raises(ValueError):
        sampling_timesteps(s, 9)
    with pytest.raises(ValueError):
        sampling_timesteps(s, 0)


class CountingStub(torch.nn.Module):
    """Predicts zero noise; counts evaluations."""

    def __init__(self):
        super().__init__()
        self.calls = 0

    def forward(self, x_t, x_masked, m, c, t_norm):
        self.calls += 1
        return torch.zeros_like(x_t)


def test_sample_edit_preserves_unmasked_bit_exact_and_counts_evals():
    s = make_schedule(8, "linear")
    gen = CountingStub()
    g = torch.Generator().manual_seed(5)
    x = torch.rand(2, 3, 8, 8, generator=g) * 2 - 1
    m = torch.zeros(2, 1, 8, 8)
    m[:, :, 2:6, 2:6] = 1.0
    c = torch.zeros(2, 32)
    y = sample_edit(gen, x, m, c, s, generator=torch.Generator().manual_seed(0))
    assert gen.calls == s.T
    keep = m.expand_as(x) == 0
    assert torch.equal(y[keep], x[keep])
    y2 = sample_edit(gen, x, m, c, s, generator=torch.Generator().manual_seed(0))
    assert torch.equal(y, y2)

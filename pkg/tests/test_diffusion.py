import math
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from musemask.diffusion import (
    SamplerSpec,
    cfg_combine,
    ddim_step,
    eps_loss,
    heldout_eps_loss,
    initial_noise,
    make_schedule,
    q_sample,
    sample_loop,
    timestep_sequence,
    training_step,
)
from musemask.errors import ConfigError, TrainingError
from musemask.optim import make_optimizer


def test_schedule_small_example():
    s = make_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024])
    assert s.alpha_bar_at(0) == 1.0


def test_single_step_schedule():
    s = make_schedule(1, 0.02, 0.02)
    np.testing.assert_allclose(s.alpha_bar, [0.98])


def test_default_schedule_matches_direct_product():
    s = make_schedule()
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999)
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] > 0.9
    assert np.all((s.beta > 0) & (s.beta < 1))


def test_schedule_validation():
    for args in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)]:
        with pytest.raises(ConfigError):
            make_schedule(*args)


def test_q_sample_examples():
    s = make_schedule(4, 0.1, 0.4)
    s.alpha_bar[:] = 0.25
    out = q_sample(torch.tensor([2.0]), torch.tensor([2]), torch.tensor([1.0]), s)
    assert float(out) == pytest.approx(1.0 + np.sqrt(0.75), abs=1e-6)
    z0 = torch.randn(3, 2)
    np.testing.assert_allclose(q_sample(z0, torch.tensor([1, 2, 3]), torch.zeros(3, 2), s).numpy(), 0.5 * z0.numpy(), rtol=1e-6)
    with pytest.raises(ValueError):
        q_sample(z0, torch.tensor([0, 1, 2]), torch.zeros(3, 2), s)
    with pytest.raises(ValueError):
        q_sample(z0, torch.tensor([1, 1, 5]), torch.zeros(3, 2), s)


def test_q_sample_moments_within_three_sigma():
    s = make_schedule()
    n, t, z0 = 100_000, 400, 1.5
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(n, generator=gen, dtype=torch.float64)
    z = q_sample(torch.full((n,), z0, dtype=torch.float64), torch.full((n,), t), eps, s).numpy()
    ab = s.alpha_bar_at(t)
    mean, var = np.sqrt(ab) * z0, 1.0 - ab
    assert abs(z.mean() - mean) <= 3 * np.sqrt(var / n)
    # standard error of the sample variance for a Gaussian
    assert abs(z.var(ddof=1) - var) <= 3 * var * np.sqrt(2.0 / (n - 1))


def test_eps_loss_examples(rng):
    a = torch.randn(4, 3)
    assert float(eps_loss(a, a)) == 0.0
    assert float(eps_loss(a, a + 1)) == pytest.approx(1.0)
    x, y = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    naive = sum((x[i, j] - y[i, j]) ** 2 for i in range(5) for j in range(7)) / 35
    assert float(eps_loss(torch.tensor(x), torch.tensor(y))) == pytest.approx(naive, rel=1e-12)


@given(st.floats(-5, 5))
def test_cfg_combine_formula(scale):
    gen = torch.Generator().manual_seed(1)
    u, c = torch.randn(3, 4, generator=gen), torch.randn(3, 4, generator=gen)
    torch.testing.assert_close(cfg_combine(u, c, scale), u + scale * (c - u))


def test_cfg_combine_endpoints():
    u, c = torch.randn(5), torch.randn(5)
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    torch.testing.assert_close(cfg_combine(u, c, 1.0), c)


def test_ddim_perfect_eps_recovers_z0():
    s = make_schedule()
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(8, 4, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    for t in (1, 10, 500, 1000):
        tt = torch.full((8,), t)
        z_t = q_sample(z0, tt, eps, s)
        assert (ddim_step(z_t, eps, tt, torch.zeros(8, dtype=torch.long), s) - z0).abs().max() <= 1e-5
    with pytest.raises(ValueError):
        ddim_step(z0, eps, 5, 5, s)


def test_ddim_chain_matches_closed_form_for_constant_eps():
    # with a model that always returns the true eps, every step stays on the
    # closed-form trajectory sqrt(ab_t) z0 + sqrt(1 - ab_t) eps
    s = make_schedule(50, 1e-3, 0.2)
    z0 = torch.tensor([0.7, -1.2], dtype=torch.float64)
    eps = torch.tensor([0.3, 0.9], dtype=torch.float64)
    z = q_sample(z0, 50, eps, s)
    for t in range(50, 0, -1):
        z = ddim_step(z, eps, t, t - 1, s)
        expected = np.sqrt(s.alpha_bar_at(t - 1)) * z0 + np.sqrt(1 - s.alpha_bar_at(t - 1)) * eps
        torch.testing.assert_close(z, expected, rtol=0, atol=1e-10)


def test_timestep_sequence():
    assert timestep_sequence(1000, 4) == [1000, 750, 500, 250]
    assert timestep_sequence(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ConfigError):
        timestep_sequence(10, 11)


def test_sampler_spec_validation():
    with pytest.raises(ConfigError):
        SamplerSpec(steps=0)
    with pytest.raises(ConfigError):
        SamplerSpec(eta=0.5)
    with pytest.raises(ConfigError):
        SamplerSpec(guidance_scale=-1)


def toy_model(z, t, cond):
    return 0.1 * z + cond * (t.double()[:, None] / 1000)


def test_sampler_is_deterministic_per_seed():
    s = make_schedule()
    cond = torch.ones(3, 2, dtype=torch.float64)
    spec = SamplerSpec(steps=10, guidance_scale=2.0, seed=5)
    z = torch.randn(3, 2, dtype=torch.float64)
    a = sample_loop(toy_model, cond, spec, s, (3, 2), uncond=torch.zeros_like(cond), z_init=z)
    b = sample_loop(toy_model, cond, spec, s, (3, 2), uncond=torch.zeros_like(cond), z_init=z)
    assert torch.equal(a, b)
    c = sample_loop(lambda z, t, c: toy_model(z.float(), t, c.float()), cond, spec, s, (3, 2), seeds=[1, 2, 3])
    d = sample_loop(lambda z, t, c: toy_model(z.float(), t, c.float()), cond, spec, s, (3, 2), seeds=[1, 2, 3])
    assert torch.equal(c, d)


def test_per_sample_noise_is_batch_independent():
    a = initial_noise((3, 4), [7, 8, 9])
    b = initial_noise((1, 4), [8])
    assert torch.equal(a[1], b[0])


def test_full_length_sampler_equals_explicit_chain():
    s = make_schedule(20, 1e-3, 0.1)
    cond = torch.ones(2, 3, dtype=torch.float64)
    z_init = torch.randn(2, 3, dtype=torch.float64)
    out = sample_loop(toy_model, cond, SamplerSpec(steps=20, guidance_scale=0.0), s, (2, 3), uncond=cond, z_init=z_init)
    z = z_init.clone()
    for t in range(20, 0, -1):
        z = ddim_step(z, toy_model(z, torch.full((2,), t), cond), t, t - 1, s)
    torch.testing.assert_close(out, z, rtol=0, atol=0)


def test_guidance_zero_ignores_conditional_branch():
    s = make_schedule()
    calls = []

    def model(z, t, cond):
        calls.append(cond)
        return torch.zeros_like(z)

    z = torch.randn(2, 3)
    sample_loop(model, "cond", SamplerSpec(steps=5, guidance_scale=0.0), s, (2, 3), uncond="uncond", z_init=z)
    assert set(calls) == {"uncond"}
    calls.clear()
    sample_loop(model, "cond", SamplerSpec(steps=5, guidance_scale=3.0), s, (2, 3), uncond="uncond", z_init=z)
    assert set(calls) == {"uncond", "cond"}


class Memorizer(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Linear(4, 128), torch.nn.SiLU(), torch.nn.Linear(128, 128), torch.nn.SiLU(), torch.nn.Linear(128, 2)
        )

    def forward(self, z, t, cond):
        tt = t.float()[:, None] / 1000
        return self.net(torch.cat([z, tt, tt.sqrt()], dim=1))


def test_training_step_lr_zero_changes_nothing():
    s = make_schedule()
    torch.manual_seed(0)
    m = Memorizer()
    before = [p.clone() for p in m.parameters()]
    opt, sched = make_optimizer(m.parameters(), lr=0.0, warmup=0, weight_decay=0.0)
    loss = training_step(m, torch.randn(4, 2), None, s, opt, sched, torch.Generator().manual_seed(0), 1)
    assert np.isfinite(loss)
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_training_step_rejects_non_finite():
    s = make_schedule()
    m = Memorizer()
    opt, sched = make_optimizer(m.parameters(), lr=1e-3, warmup=0)
    with pytest.raises(TrainingError, match="step 7"):
        training_step(lambda z, t, c: z * float("nan"), torch.randn(2, 2), None, s, opt, sched, None, 7)


def test_single_sample_memorization():
    s = make_schedule()
    torch.manual_seed(0)
    m = Memorizer()
    opt, sched = make_optimizer(m.parameters(), lr=3e-3, warmup=50, weight_decay=0.0)
    gen = torch.Generator().manual_seed(0)
    z0 = torch.tensor([[0.5, -0.5]]).repeat(64, 1)
    losses = [training_step(m, z0, None, s, opt, sched, gen, i) for i in range(2000)]
    assert np.mean(losses[-100:]) < 0.05


def test_heldout_eps_loss_is_seeded():
    s = make_schedule()
    m = Memorizer()
    z0 = torch.randn(10, 2)
    a = heldout_eps_loss(m, z0, lambda idx: None, s, seed=3, batch=4)
    b = heldout_eps_loss(m, z0, lambda idx: None, s, seed=3, batch=10)
    assert a == pytest.approx(b, rel=1e-6)


def test_ddim_clip_bounds_estimate_and_keeps_in_range_inversion():
    s = make_schedule()
    gen = torch.Generator().manual_seed(3)
    z0 = torch.rand(4, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    tt = torch.full((4,), 700)
    z_t = q_sample(z0, tt, eps, s)
    back = ddim_step(z_t, eps, tt, torch.zeros(4, dtype=torch.long), s, clip=1.0)
    assert (back - z0).abs().max() <= 1e-5
    wild = ddim_step(z_t, eps + 5.0, tt, torch.zeros(4, dtype=torch.long), s, clip=1.0)
    assert wild.abs().max() <= 1.0 + 1e-12
    unclipped = ddim_step(z_t, eps + 5.0, tt, torch.zeros(4, dtype=torch.long), s)
    assert unclipped.abs().max() > 1.0
    mid = ddim_step(z_t, eps + 5.0, 700, 300, s, clip=1.0)
    ab = s.alpha_bar_at(300)
    assert (mid - (math.sqrt(ab) * wild + math.sqrt(1 - ab) * (z_t - math.sqrt(s.alpha_bar_at(700)) * wild)
                   / math.sqrt(1 - s.alpha_bar_at(700)))).abs().max() <= 1e-9

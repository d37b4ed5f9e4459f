import math

import pytest
import torch

from lvdm.backbone import Denoiser, DenoiserConfig
from lvdm.codec import LatentTensor
from lvdm.diffusion import (
    NoiseSchedule,
    TrainBatch,
    TrainStepConfig,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    eps_from_v,
    make_schedule,
    q_sample,
    sample,
    sample_batch,
    training_step,
    v_target,
    x0_from_v,
)


# ---------------------------------------------------------------- schedule


def test_schedule_basic_invariants():
    s = make_schedule()
    assert s.gammas.shape == (1001,)
    assert s.gammas[0] == 1.0
    assert (s.gammas[1:] < s.gammas[:-1]).all()


def test_terminal_gamma_against_product_oracle():
    # independent accumulation in plain python floats
    s = make_schedule(zero_terminal_snr=False)
    prod = 1.0
    for i in range(1000):
        beta = 1e-4 + (0.02 - 1e-4) * i / 999
        prod *= 1.0 - beta
    assert abs(float(s.gammas[-1]) - prod) < 1e-9
    assert prod > 0
    assert abs(prod - 4.04e-5) < 1e-7  # headline terminal value of the linear schedule


def test_zero_terminal_snr_rescale():
    raw = make_schedule(zero_terminal_snr=False)
    rs = make_schedule(zero_terminal_snr=True)
    assert float(raw.gammas[-1]) > 0
    assert float(rs.gammas[-1]) == 0.0
    # the first step's signal level is preserved by the rescale
    assert abs(math.sqrt(float(rs.gammas[1])) - math.sqrt(float(raw.gammas[1]))) < 1e-12
    assert rs.gammas[0] == 1.0
    assert (rs.gammas[1:] < rs.gammas[:-1]).all()


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(steps=0)
    with pytest.raises(ValueError):
        make_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        make_schedule(beta_end=1.5)


def test_coeffs_range_check():
    s = make_schedule()
    with pytest.raises(ValueError):
        s.coeffs(torch.tensor([1001]), torch.zeros(1, 2))
    with pytest.raises(ValueError):
        s.coeffs(torch.tensor([-1]), torch.zeros(1, 2))


# ---------------------------------------------------------------- forward process


def test_q_sample_statistics():
    torch.manual_seed(0)
    s = make_schedule()
    x0 = torch.full((20000,), 2.0)
    g = torch.Generator().manual_seed(1)
    eps = torch.randn(x0.shape, generator=g)
    t = torch.full((20000,), 500, dtype=torch.long)
    xt = q_sample(x0, t, eps, s)
    gam = float(s.gammas[500])
    assert abs(xt.mean().item() - 2.0 * math.sqrt(gam)) < 0.02
    assert abs(xt.var().item() - (1 - gam)) < 0.02


def test_q_sample_endpoints():
    s = make_schedule(zero_terminal_snr=True)
    x0 = torch.randn(4, 3)
    eps = torch.randn(4, 3)
    t0 = torch.zeros(4, dtype=torch.long)
    tN = torch.full((4,), 1000, dtype=torch.long)
    assert torch.allclose(q_sample(x0, t0, eps, s), x0)
    assert torch.allclose(q_sample(x0, tN, eps, s), eps)  # gamma == 0 exactly


# ---------------------------------------------------------------- v algebra


def test_v_roundtrip_large_sample():
    torch.manual_seed(2)
    s = make_schedule(zero_terminal_snr=True)
    n = 100_000
    x0 = torch.randn(n)
    eps = torch.randn(n)
    t = torch.randint(0, 1001, (n,))
    v = v_target(x0, eps, t, s)
    x0r = x0_from_v(q_sample(x0, t, eps, s), v, t, s)
    epsr = eps_from_v(q_sample(x0, t, eps, s), v, t, s)
    assert (x0r - x0).abs().max() < 1e-5
    assert (epsr - eps).abs().max() < 1e-5


def test_v_endpoint_identities():
    s = make_schedule(zero_terminal_snr=True)
    x0 = torch.randn(8)
    eps = torch.randn(8)
    t0 = torch.zeros(8, dtype=torch.long)
    tN = torch.full((8,), 1000, dtype=torch.long)
    # gamma=1: v is pure noise; gamma=0: v is negated data
    assert torch.allclose(v_target(x0, eps, t0, s), eps, atol=1e-6)
    assert torch.allclose(v_target(x0, eps, tN, s), -x0, atol=1e-6)


# ---------------------------------------------------------------- DDIM


def test_ddim_timesteps_properties():
    s = make_schedule()
    for n in (2, 10, 50):
        ts = ddim_timesteps(s, n)
        assert len(ts) == n + 1
        assert ts[0] == 1000 and ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))


def test_ddim_step_ordering_error():
    s = make_schedule()
    x = torch.randn(1, 4)
    v = torch.randn(1, 4)
    with pytest.raises(ValueError):
        ddim_step(x, v, 10, 10, s)
    with pytest.raises(ValueError):
        ddim_step(x, v, 10, 500, s)


def test_ddim_step_t_prev_zero_returns_x0_hat():
    torch.manual_seed(3)
    s = make_schedule(zero_terminal_snr=True)
    x0 = torch.randn(2, 4)
    eps = torch.randn(2, 4)
    t = torch.full((2,), 600, dtype=torch.long)
    xt = q_sample(x0, t, eps, s)
    v = v_target(x0, eps, t, s)
    out = ddim_step(xt, v, 600, 0, s)
    assert torch.allclose(out, x0, atol=1e-5)


class TrueVOracle:
    """Knows the one-point dataset; always emits the exact v for that point."""

    def __init__(self, x0, sched):
        self.x0 = x0
        self.sched = sched

    def __call__(self, xt, t):
        gam = self.sched.gammas[t].to(xt.dtype)
        while gam.ndim < xt.ndim:
            gam = gam.unsqueeze(-1)
        sq, sq1 = gam.sqrt(), (1 - gam).sqrt()
        eps = (xt - sq * self.x0) / sq1.clamp_min(1e-8)
        return sq * eps - sq1 * self.x0


def test_ddim_recovers_one_point_dataset():
    torch.manual_seed(4)
    s = make_schedule(zero_terminal_snr=True)
    x0 = torch.randn(1, 6)
    oracle = TrueVOracle(x0, s)
    for n in (2, 10, 50):
        xt = torch.randn(1, 6, generator=torch.Generator().manual_seed(7))
        ts = ddim_timesteps(s, n)
        for a, b in zip(ts, ts[1:]):
            v = oracle(xt, torch.tensor([a]))
            xt = ddim_step(xt, v, a, b, s)
        assert (xt - x0).abs().max() < 1e-3


# ---------------------------------------------------------------- guidance


def test_cfg_combine_algebra():
    cond = torch.randn(3, 4)
    uncond = torch.randn(3, 4)
    assert torch.allclose(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.allclose(cfg_combine(cond, uncond, 0.0), uncond)
    w = 2.5
    assert torch.allclose(cfg_combine(cond, uncond, w), uncond + w * (cond - uncond))


# ---------------------------------------------------------------- training step


def tiny_model(**kw):
    base = dict(d_model=32, num_blocks=2, num_heads=2, t_len=3, h_p=4, w_p=4, st_window=(2, 2))
    base.update(kw)
    return Denoiser(DenoiserConfig(**base))


def make_batch(n=2, t_len=3):
    torch.manual_seed(5)
    return TrainBatch(
        latents=torch.randn(n, t_len, 4, 4, 8),
        class_ids=torch.randint(0, 8, (n,)),
        kind="video",
        normalized=True,
    )


def test_training_step_requires_normalized():
    model = tiny_model()
    s = make_schedule()
    batch = make_batch()
    object.__setattr__(batch, "normalized", False) if hasattr(batch, "__dataclass_fields__") else None
    bad = TrainBatch(batch.latents, batch.class_ids, kind="video", normalized=False)
    with pytest.raises(ValueError):
        training_step(bad, model, s, TrainStepConfig(), torch.Generator().manual_seed(0))


def test_training_step_selfcond_counters():
    model = tiny_model()
    s = make_schedule()
    for p_sc, fwd in ((0.0, 1), (1.0, 2)):
        stats = {}
        loss = training_step(
            make_batch(), model, s, TrainStepConfig(p_sc=p_sc, p_fp=0.0, cond_drop_prob=0.0),
            torch.Generator().manual_seed(1), stats=stats,
        )
        assert loss.ndim == 0
        assert stats["forwards"] == fwd
        assert stats.get("sc_steps", 0) == int(p_sc == 1.0)


def test_training_step_stopgrad_first_pass():
    # the first (estimate-producing) pass must contribute zero gradient
    model = tiny_model()
    s = make_schedule()
    batch = make_batch()
    cfg = TrainStepConfig(p_sc=1.0, p_fp=0.0, cond_drop_prob=0.0)

    calls = []
    orig = model.forward

    def spy(*a, **kw):
        out = orig(*a, **kw)
        calls.append(out)
        return out

    model.forward = spy
    loss = training_step(batch, model, s, cfg, torch.Generator().manual_seed(2))
    assert len(calls) == 2
    assert not calls[0].requires_grad  # ran under no_grad
    assert calls[1].requires_grad
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.parameters())


def test_training_step_fp_counter():
    model = tiny_model()
    s = make_schedule()
    stats = {}
    training_step(
        make_batch(), model, s, TrainStepConfig(p_sc=0.0, p_fp=1.0, cond_drop_prob=0.0),
        torch.Generator().manual_seed(3), stats=stats,
    )
    assert stats["fp_steps"] == 1
    stats2 = {}
    training_step(
        make_batch(n=2), model, s,
        TrainStepConfig(p_sc=0.0, p_fp=0.0, cond_drop_prob=0.0),
        torch.Generator().manual_seed(4), stats=stats2,
    )
    assert stats2.get("fp_steps", 0) == 0


def test_training_step_image_stack_no_fp():
    model = tiny_model()
    s = make_schedule()
    batch = TrainBatch(
        latents=torch.randn(2, 3, 4, 4, 8),
        class_ids=torch.tensor([1, 1]),
        kind="image_stack",
        normalized=True,
    )
    stats = {}
    loss = training_step(
        batch, model, s, TrainStepConfig(p_sc=0.0, p_fp=1.0, cond_drop_prob=0.0),
        torch.Generator().manual_seed(5), stats=stats,
    )
    assert stats.get("fp_steps", 0) == 0  # frame prediction is a video-only task
    assert torch.isfinite(loss)


def test_training_step_deterministic_given_generator():
    model = tiny_model()
    s = make_schedule()
    cfg = TrainStepConfig()
    l1 = training_step(make_batch(), model, s, cfg, torch.Generator().manual_seed(9))
    l2 = training_step(make_batch(), model, s, cfg, torch.Generator().manual_seed(9))
    assert l1.item() == l2.item()


# ---------------------------------------------------------------- sampling


def test_sample_batch_shapes_and_determinism():
    torch.manual_seed(6)
    model = tiny_model()
    s = make_schedule(zero_terminal_snr=True)
    ids = torch.tensor([0, 3])
    g1 = torch.Generator().manual_seed(11)
    g2 = torch.Generator().manual_seed(11)
    z1 = sample_batch(model, s, (2, 3, 4, 4, 8), class_ids=ids, num_steps=5, generator=g1, trained_cond_drop=0.1)
    z2 = sample_batch(model, s, (2, 3, 4, 4, 8), class_ids=ids, num_steps=5, generator=g2, trained_cond_drop=0.1)
    assert z1.shape == (2, 3, 4, 4, 8)
    assert torch.equal(z1, z2)


def test_sample_batch_guidance_warns_without_cond_drop():
    model = tiny_model()
    s = make_schedule(zero_terminal_snr=True)
    with pytest.warns(UserWarning):
        sample_batch(
            model, s, (1, 3, 4, 4, 8), class_ids=torch.tensor([0]),
            num_steps=2, guidance_w=2.0, generator=torch.Generator().manual_seed(0),
            trained_cond_drop=0.0,
        )


def test_sample_single_wrapper():
    from lvdm.backbone import ConditioningBundle

    model = tiny_model()
    s = make_schedule(zero_terminal_snr=True)
    bundle = ConditioningBundle(t=0, class_id=2)
    out = sample(model, bundle, s, (3, 4, 4, 8), num_steps=3, rng_seed=5, trained_cond_drop=0.1)
    assert isinstance(out, LatentTensor)
    assert out.normalized
    assert out.data.shape == (3, 4, 4, 8)

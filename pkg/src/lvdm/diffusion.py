"""Diffusion machinery: schedules, v-parameterization, training step, DDIM, CFG.

Throughout, gamma(t) is the cumulative signal fraction of the forward process
x_t = sqrt(gamma) x0 + sqrt(1-gamma) eps, tabulated at integer t in [0, steps]
with gamma(0) = 1. The prediction target is

    v = sqrt(gamma) eps - sqrt(1-gamma) x0,

the rotation of (x0, eps) orthogonal to x_t, so x0 and eps are recovered by

    x0 = sqrt(gamma) x_t - sqrt(1-gamma) v
    eps = sqrt(1-gamma) x_t + sqrt(gamma) v

for every t including the exact endpoints gamma in {0, 1}. Schedule tables are
built and held in float64; values are cast to the data dtype at use sites.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .codec import VIDEO, LatentTensor


@dataclass
class NoiseSchedule:
    num_steps: int
    betas: torch.Tensor              # (steps,) float64, betas[i] applies at t=i+1
    gammas: torch.Tensor             # (steps+1,) float64, gammas[0] == 1
    zero_terminal_snr: bool
    sqrt_gamma: torch.Tensor         # (steps+1,) float64
    sqrt_one_minus_gamma: torch.Tensor
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.gammas.shape[0] != self.num_steps + 1:
            raise ValueError("gamma table must have steps+1 entries (t = 0 .. steps)")
        if float(self.gammas[0]) != 1.0:
            raise ValueError("gamma before any noise must be exactly 1")
        if not torch.all(self.gammas[1:] < self.gammas[:-1]):
            raise ValueError("gamma must be strictly decreasing")
        if self.zero_terminal_snr and float(self.gammas[-1]) != 0.0:
            raise ValueError("zero_terminal_snr schedule must end at gamma == 0 exactly")

    def coeffs(self, t, ref: torch.Tensor):
        """(sqrt_gamma[t], sqrt_1m_gamma[t]) shaped to broadcast against ref."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.num_steps).any():
            raise ValueError(f"timestep out of range 0..{self.num_steps}")
        shape = t.shape + (1,) * (ref.ndim - t.ndim)
        a = self.sqrt_gamma[t].to(ref.dtype).to(ref.device).reshape(shape)
        s = self.sqrt_one_minus_gamma[t].to(ref.dtype).to(ref.device).reshape(shape)
        return a, s


def make_schedule(
    kind: str = "linear",
    steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    zero_terminal_snr: bool = False,
) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if steps < 2:
        raise ValueError(f"need at least 2 steps, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    gammas = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    sqrt_gamma = gammas.sqrt()
    if zero_terminal_snr:
        # shift-and-scale sqrt(gamma) over t = 1..steps so the final entry is
        # exactly zero while the first noisy step keeps its value; t=0 stays 1
        s = sqrt_gamma[1:].clone()
        s = (s - s[-1]) * (s[0] / (s[0] - s[-1]))
        s[-1] = 0.0
        sqrt_gamma = torch.cat([sqrt_gamma[:1], s])
        gammas = sqrt_gamma**2
    return NoiseSchedule(
        num_steps=steps,
        betas=betas,
        gammas=gammas,
        zero_terminal_snr=zero_terminal_snr,
        sqrt_gamma=sqrt_gamma,
        sqrt_one_minus_gamma=(1.0 - gammas).sqrt(),
        kind=kind,
        beta_start=beta_start,
        beta_end=beta_end,
    )


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} differs from data {tuple(x0.shape)}")
    a, s = sched.coeffs(t, x0)
    return a * x0 + s * eps


def v_target(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    a, s = sched.coeffs(t, x0)
    return a * eps - s * x0


def x0_from_v(x_t: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    a, s = sched.coeffs(t, x_t)
    return a * x_t - s * v


def eps_from_v(x_t: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    a, s = sched.coeffs(t, x_t)
    return s * x_t + a * v


def ddim_step(x_t: torch.Tensor, v_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic update t -> t_prev via the model's x0/eps estimates."""
    if t_prev >= t:
        raise ValueError(f"ddim step must go backward in time, got {t} -> {t_prev}")
    x0_hat = x0_from_v(x_t, v_pred, t, sched)
    eps_hat = eps_from_v(x_t, v_pred, t, sched)
    a, s = sched.coeffs(t_prev, x_t)
    return a * x0_hat + s * eps_hat


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if v_cond.shape != v_uncond.shape:
        raise ValueError("guidance branches must have the same shape")
    return v_uncond + w * (v_cond - v_uncond)


@dataclass
class TrainStepConfig:
    p_sc: float = 0.9            # probability of the two-pass self-conditioned step
    cond_drop_prob: float = 0.1  # per-sample null-condition swap for CFG training
    p_fp: float = 0.0            # probability of frame-prediction conditioning (video only)

    def __post_init__(self):
        for name in ("p_sc", "cond_drop_prob", "p_fp"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass
class TrainBatch:
    latents: torch.Tensor            # (B, F, h, w, c), already normalized
    class_ids: torch.Tensor          # (B,) long
    kind: str = VIDEO
    normalized: bool = True


def training_step(
    batch: TrainBatch,
    model,
    sched: NoiseSchedule,
    cfg: TrainStepConfig,
    generator: torch.Generator,
    stats: Optional[dict] = None,
):
    """One objective evaluation; returns the scalar loss (caller backprops).

    Self-conditioning: with probability p_sc the model first predicts v with
    zeroed self-cond channels, the implied x0 estimate is detached, and the
    loss forward conditions on it. stats, when given, accumulates forward/path
    counters for instrumentation.
    """
    if not batch.normalized:
        raise ValueError("training latents must be normalized")
    x0 = batch.latents
    b = x0.shape[0]
    t = torch.randint(1, sched.num_steps + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    target = v_target(x0, eps, t, sched)

    null_mask = torch.rand(b, generator=generator) < cfg.cond_drop_prob

    fp = None
    if batch.kind == VIDEO and cfg.p_fp > 0 and float(torch.rand((), generator=generator)) < cfg.p_fp:
        from .tasks import build_fp_conditioning

        n_frames = 1 + int(torch.randint(0, 2, (), generator=generator))
        fp = build_fp_conditioning(x_t, x0[:, :n_frames], n_frames)
        # a null-conditioned sample drops its frame context as well
        fp = fp * (~null_mask).to(fp.dtype).reshape(b, 1, 1, 1, 1)
        if stats is not None:
            stats["fp_steps"] = stats.get("fp_steps", 0) + 1

    def run(self_cond):
        if stats is not None:
            stats["forwards"] = stats.get("forwards", 0) + 1
        return model(
            x_t, t, batch.class_ids, kind=batch.kind,
            self_cond=self_cond, fp=fp, null_mask=null_mask,
        )

    self_cond = None
    if cfg.p_sc > 0 and float(torch.rand((), generator=generator)) < cfg.p_sc:
        with torch.no_grad():
            v_first = run(None)
            self_cond = x0_from_v(x_t, v_first, t, sched)
        if stats is not None:
            stats["sc_steps"] = stats.get("sc_steps", 0) + 1
    v_pred = run(self_cond)
    return ((v_pred - target) ** 2).mean()


def ddim_timesteps(sched: NoiseSchedule, num_steps: int) -> list[int]:
    """Uniform stride from the final training step down to 0, inclusive."""
    if not 1 <= num_steps <= sched.num_steps:
        raise ValueError(f"num_steps must be in 1..{sched.num_steps}")
    ts = np.linspace(sched.num_steps, 0, num_steps + 1)
    ts = np.round(ts).astype(int).tolist()
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError("timestep subsequence is not strictly decreasing")
    return ts


def sample_batch(
    model,
    sched: NoiseSchedule,
    shape: tuple,
    class_ids: Optional[torch.Tensor] = None,
    kind: str = VIDEO,
    num_steps: int = 50,
    guidance_w: float = 1.0,
    generator: Optional[torch.Generator] = None,
    self_cond_at_inference: bool = True,
    fp: Optional[torch.Tensor] = None,
    lr_cond: Optional[torch.Tensor] = None,
    t_sr: Optional[torch.Tensor] = None,
    trained_cond_drop: Optional[float] = None,
) -> torch.Tensor:
    """DDIM sampling loop over a batch; shape = (B, F, h, w, c).

    The unconditional guidance branch nulls the class embedding and zeroes
    frame-prediction channels; low-res conditioning (when present) is the task
    input and is kept on both branches.
    """
    if guidance_w != 1.0 and trained_cond_drop == 0.0:
        warnings.warn("guidance requested but the model never saw null conditions in training")
    if sched.zero_terminal_snr:
        assert float(sched.gammas[sched.num_steps]) == 0.0
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    x = torch.randn(shape, generator=generator)
    b = shape[0]
    self_cond = None
    steps = ddim_timesteps(sched, num_steps)
    for t_cur, t_next in zip(steps[:-1], steps[1:]):
        t_vec = torch.full((b,), t_cur, dtype=torch.long)
        with torch.no_grad():
            v = model(
                x, t_vec, class_ids, kind=kind,
                self_cond=self_cond, fp=fp, lr_cond=lr_cond, t_sr=t_sr,
            )
            if guidance_w != 1.0:
                v_uncond = model(
                    x, t_vec, None, kind=kind,
                    self_cond=self_cond, fp=None, lr_cond=lr_cond, t_sr=t_sr,
                )
                v = cfg_combine(v, v_uncond, guidance_w)
        if self_cond_at_inference:
            self_cond = x0_from_v(x, v, t_cur, sched)
        x = ddim_step(x, v, t_cur, t_next, sched)
    return x


def sample(
    model,
    bundle,
    sched: NoiseSchedule,
    shape: tuple,
    num_steps: int = 50,
    guidance_w: float = 1.0,
    rng_seed: int = 0,
    self_cond_at_inference: bool = True,
    kind: str = VIDEO,
    trained_cond_drop: Optional[float] = None,
) -> LatentTensor:
    """Single-sample front end over sample_batch; shape = (F, h, w, c)."""
    generator = torch.Generator().manual_seed(rng_seed)
    class_ids = None
    if bundle.class_id is not None and not bundle.cfg_null:
        class_ids = torch.tensor([bundle.class_id], dtype=torch.long)
    t_sr = None
    if bundle.t_sr is not None:
        t_sr = torch.tensor([bundle.t_sr], dtype=torch.long)
    out = sample_batch(
        model,
        sched,
        (1, *shape),
        class_ids=class_ids,
        kind=kind,
        num_steps=num_steps,
        guidance_w=guidance_w,
        generator=generator,
        self_cond_at_inference=self_cond_at_inference,
        fp=None if bundle.fp is None else bundle.fp.unsqueeze(0),
        lr_cond=None if bundle.lr_cond is None else bundle.lr_cond.unsqueeze(0),
        t_sr=t_sr,
        trained_cond_drop=trained_cond_drop,
    )
    return LatentTensor(out[0], kind=kind, normalized=True)

"""Task-level conditioning on top of the diffusion core.

Frame-prediction conditioning turns the base model into an image-to-video or
video-continuation model; chaining it autoregressively gives long videos. The
super-resolution stage conditions a second denoiser on the depth-to-space
upsampled, noise-augmented output of the base stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from einops import rearrange

from .backbone import Denoiser, DenoiserConfig
from .codec import Codec, LatentStats, LatentTensor, VideoTensor, denormalize_latents, normalize_latents
from .diffusion import NoiseSchedule, q_sample, sample_batch
from .patchify import interpolate_position_embeddings

__all__ = [
    "FramePredMask",
    "build_fp_conditioning",
    "autoregressive_generate",
    "depth_to_space",
    "space_to_depth",
    "noise_augment",
    "SuperResStage",
    "superres_sample",
    "superres_training_step",
    "interpolate_position_embeddings",
    "finetune_aspect_ratio",
]


@dataclass
class FramePredMask:
    """Binary mask marking which leading latent frames are given as context."""

    num_cond_latent_frames: int
    mask: torch.Tensor  # (t_len, h, w, 1)

    def __post_init__(self):
        if self.num_cond_latent_frames not in (1, 2):
            raise ValueError(f"conditioning frame count must be 1 or 2, got {self.num_cond_latent_frames}")
        n = self.num_cond_latent_frames
        if not torch.all(self.mask[:n] == 1) or not torch.all(self.mask[n:] == 0):
            raise ValueError("mask must be 1 exactly on the conditioning frames and 0 elsewhere")


def make_fp_mask(t_len: int, h: int, w: int, n_frames: int) -> FramePredMask:
    if n_frames > t_len:
        raise ValueError(f"cannot condition on {n_frames} frames of a {t_len}-frame latent")
    mask = torch.zeros(t_len, h, w, 1)
    mask[:n_frames] = 1.0
    return FramePredMask(num_cond_latent_frames=n_frames, mask=mask)


def build_fp_conditioning(z_t: torch.Tensor, past_latents: Optional[torch.Tensor], n_frames: int) -> torch.Tensor:
    """Channel-concat of (mask * clean past latents, mask), shaped like z_t plus one channel.

    z_t supplies the target shape; the context channels hold the clean past
    latents on the first n_frames frames and zeros elsewhere. n_frames == 0
    gives the all-zero conditioning used for unconditional generation.
    """
    batched = z_t.ndim == 5
    if not batched:
        z_t = z_t.unsqueeze(0)
        if past_latents is not None and past_latents.ndim == 4:
            past_latents = past_latents.unsqueeze(0)
    b, t_len, h, w, c = z_t.shape
    if n_frames not in (0, 1, 2):
        raise ValueError(f"conditioning frame count must be 0, 1 or 2, got {n_frames}")
    if n_frames > t_len:
        raise ValueError(f"{n_frames} conditioning frames exceed latent length {t_len}")
    ctx = z_t.new_zeros(b, t_len, h, w, c)
    mask = z_t.new_zeros(b, t_len, h, w, 1)
    if n_frames > 0:
        if past_latents is None:
            raise ValueError("past latents required when n_frames > 0")
        if past_latents.shape[1] != n_frames:
            raise ValueError(
                f"past latents cover {past_latents.shape[1]} frames, expected {n_frames}"
            )
        ctx[:, :n_frames] = past_latents
        mask[:, :n_frames] = 1.0
    c_fp = torch.cat([ctx, mask], dim=-1)
    return c_fp if batched else c_fp[0]


def autoregressive_generate(
    model: Denoiser,
    codec: Codec,
    stats: LatentStats,
    sched: NoiseSchedule,
    chunks: int,
    class_id: Optional[int] = None,
    num_steps: int = 50,
    guidance_w: float = 1.0,
    generator: Optional[torch.Generator] = None,
    self_cond_at_inference: bool = True,
):
    """Sample a long video chunk by chunk.

    The first chunk is a plain sample; every later chunk re-encodes the last
    1 + f_t decoded pixel frames of the previous chunk into 2 latent frames
    and conditions on them, keeping those overlap frames from the conditioning
    rather than regenerating them. Returns (latent chunks, stitched pixels).
    """
    if chunks < 1:
        raise ValueError("need at least one chunk")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    cfg = model.cfg
    f_t = codec.cfg.temporal_factor
    shape = (1, cfg.t_len, cfg.h_p * cfg.patch_size, cfg.w_p * cfg.patch_size, cfg.latent_channels)
    class_ids = None
    if class_id is not None:
        class_ids = torch.tensor([class_id], dtype=torch.long)

    latent_chunks: list[LatentTensor] = []
    pixel_parts: list[torch.Tensor] = []
    overlap = 1 + f_t
    past = None
    prev_pixels = None
    for i in range(chunks):
        if i == 0:
            fp = build_fp_conditioning(torch.zeros(shape), None, 0)
        else:
            tail = VideoTensor(prev_pixels[-overlap:])
            past_l = normalize_latents(codec.encode(tail), stats)
            if past_l.latent_frames != 2:
                raise ValueError(
                    f"codec turned {overlap} pixel frames into "
                    f"{past_l.latent_frames} latent frames, expected 2"
                )
            past = past_l.data.unsqueeze(0)
            fp = build_fp_conditioning(torch.zeros(shape), past, 2)
        z = sample_batch(
            model, sched, shape,
            class_ids=class_ids,
            num_steps=num_steps,
            guidance_w=guidance_w,
            generator=generator,
            self_cond_at_inference=self_cond_at_inference,
            fp=fp,
        )
        if past is not None:
            # the overlap frames are given, not regenerated
            z = torch.cat([past, z[:, 2:]], dim=1)
        zl = LatentTensor(z[0], normalized=True)
        latent_chunks.append(zl)
        pixels = codec.decode(denormalize_latents(zl, stats)).data
        pixel_parts.append(pixels if i == 0 else pixels[overlap:])
        prev_pixels = pixels
    return latent_chunks, VideoTensor(torch.cat(pixel_parts, dim=0))


def depth_to_space(z_lr: torch.Tensor, scale: int, pre_projection: Optional[nn.Linear] = None) -> torch.Tensor:
    """Move channel blocks into a scale x scale spatial neighborhood.

    Works on (..., h, w, c); the optional pre-projection widens channels first
    so the rearrangement lands on the desired output width.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    x = pre_projection(z_lr) if pre_projection is not None else z_lr
    c = x.shape[-1]
    if c % (scale * scale):
        raise ValueError(f"{c} channels not divisible by scale^2 = {scale * scale}")
    return rearrange(x, "... h w (c s1 s2) -> ... (h s1) (w s2) c", s1=scale, s2=scale)


def space_to_depth(x: torch.Tensor, scale: int) -> torch.Tensor:
    if x.shape[-3] % scale or x.shape[-2] % scale:
        raise ValueError(f"spatial dims {tuple(x.shape[-3:-1])} not divisible by scale {scale}")
    return rearrange(x, "... (h s1) (w s2) c -> ... h w (c s1 s2)", s1=scale, s2=scale)


def noise_augment(z_lr: torch.Tensor, t_max_noise: int, sched: NoiseSchedule, generator: torch.Generator):
    """Corrupt the conditioning latent at a uniformly drawn level t_sr <= t_max_noise."""
    if not 0 <= t_max_noise <= sched.num_steps:
        raise ValueError(f"t_max_noise must be in 0..{sched.num_steps}, got {t_max_noise}")
    n = z_lr.shape[0] if z_lr.ndim == 5 else 1
    t_sr = torch.randint(0, t_max_noise + 1, (n,), generator=generator)
    eps = torch.randn(z_lr.shape, generator=generator, dtype=z_lr.dtype)
    t_use = t_sr if z_lr.ndim == 5 else t_sr[0]
    return q_sample(z_lr, t_use, eps, sched), t_sr


class SuperResStage(nn.Module):
    """2x latent upsampler: denoiser conditioned on the upsampled low-res latent."""

    def __init__(self, model_cfg: DenoiserConfig, scale: int = 2, t_max_noise: int = 100):
        super().__init__()
        if not model_cfg.lr_cond or not model_cfg.t_sr_cond:
            raise ValueError("super-resolution model config needs lr_cond and t_sr_cond enabled")
        self.scale = scale
        self.t_max_noise = t_max_noise
        self.model = Denoiser(model_cfg)
        c = model_cfg.latent_channels
        self.pre_proj = nn.Linear(c, c * scale * scale)

    def upsample(self, z_lr: torch.Tensor) -> torch.Tensor:
        return depth_to_space(z_lr, self.scale, self.pre_proj)


def superres_training_step(
    z_hr: torch.Tensor,
    z_lr: torch.Tensor,
    class_ids: torch.Tensor,
    stage: SuperResStage,
    sched: NoiseSchedule,
    generator: torch.Generator,
    p_sc: float = 0.9,
    cond_drop_prob: float = 0.0,
):
    """v-objective for the upsampler; conditioning is the augmented low-res latent."""
    from .diffusion import v_target, x0_from_v

    lr_up, t_sr = noise_augment(stage.upsample(z_lr), stage.t_max_noise, sched, generator)
    b = z_hr.shape[0]
    t = torch.randint(1, sched.num_steps + 1, (b,), generator=generator)
    eps = torch.randn(z_hr.shape, generator=generator, dtype=z_hr.dtype)
    x_t = q_sample(z_hr, t, eps, sched)
    target = v_target(z_hr, eps, t, sched)
    null_mask = torch.rand(b, generator=generator) < cond_drop_prob

    self_cond = None
    if p_sc > 0 and float(torch.rand((), generator=generator)) < p_sc:
        with torch.no_grad():
            v1 = stage.model(x_t, t, class_ids, self_cond=None, lr_cond=lr_up, t_sr=t_sr, null_mask=null_mask)
            self_cond = x0_from_v(x_t, v1, t, sched)
    v_pred = stage.model(x_t, t, class_ids, self_cond=self_cond, lr_cond=lr_up, t_sr=t_sr, null_mask=null_mask)
    return ((v_pred - target) ** 2).mean()


def superres_sample(
    stage: SuperResStage,
    z_lr: torch.Tensor,
    sched: NoiseSchedule,
    class_ids: Optional[torch.Tensor] = None,
    num_steps: int = 50,
    guidance_w: float = 1.0,
    generator: Optional[torch.Generator] = None,
    inference_t_sr: Optional[int] = None,
    self_cond_at_inference: bool = True,
) -> torch.Tensor:
    """Sample the high-res latent conditioned on a base-stage latent.

    z_lr: (B, F, h, w, c) normalized. At inference the augmentation level is a
    fixed small t_sr (10% of the training ceiling unless overridden).
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    cfg = stage.model.cfg
    up = stage.upsample(z_lr)
    b, f, h, w, c = up.shape
    if (h, w) != (cfg.h_p * cfg.patch_size, cfg.w_p * cfg.patch_size):
        raise ValueError(
            f"upsampled conditioning is {h}x{w} but the stage model expects "
            f"{cfg.h_p * cfg.patch_size}x{cfg.w_p * cfg.patch_size}"
        )
    if inference_t_sr is None:
        inference_t_sr = int(round(0.1 * stage.t_max_noise))
    if inference_t_sr > 0:
        eps = torch.randn(up.shape, generator=generator, dtype=up.dtype)
        up = q_sample(up, inference_t_sr, eps, sched)
    t_sr = torch.full((b,), inference_t_sr, dtype=torch.long)
    with torch.no_grad():
        up = up.detach()
        return sample_batch(
            stage.model, sched, (b, f, h, w, c),
            class_ids=class_ids,
            num_steps=num_steps,
            guidance_w=guidance_w,
            generator=generator,
            self_cond_at_inference=self_cond_at_inference,
            lr_cond=up,
            t_sr=t_sr,
        )


def finetune_aspect_ratio(model: Denoiser, new_grid: tuple[int, int]) -> Denoiser:
    """Swap the spatial position table for a bilinearly resized one, in place."""
    resized = interpolate_position_embeddings(model.pos.space.detach(), new_grid)
    model.pos.space = nn.Parameter(resized)
    return model

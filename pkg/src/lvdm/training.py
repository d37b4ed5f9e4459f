"""Two-phase training harness: codec reconstruction, then latent diffusion.

Determinism contract: every step draws from a generator seeded by
(run seed, phase, step), so a resumed run replays the exact same batch and
noise draws as an uninterrupted one, and a NaN abort can name the seed that
reproduces the bad step.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import torch

from .backbone import Denoiser, DenoiserConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codec, CodecConfig, LatentStats, fit_latent_stats
from .data import NUM_CLASSES, ToyDataset
from .diffusion import NoiseSchedule, TrainBatch, TrainStepConfig, make_schedule, training_step
from . import reporting

CODEC_PHASE = "codec"
DENOISER_PHASE = "denoiser"
_PHASE_SALT = {CODEC_PHASE: 0x1000000, DENOISER_PHASE: 0x2000000, "superres": 0x3000000}


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 2e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    ema_decay: float = 0.0           # 0 disables
    p_sc: float = 0.9
    p_fp: float = 0.3
    cond_drop_prob: float = 0.1
    image_batch_ratio: float = 0.25  # fraction of image-stack batches
    image_stack_len: int = 5
    codec_steps: int = 700
    codec_lr: float = 2e-3
    codec_batch_size: int = 3
    log_every: int = 25
    checkpoint_every: int = 0        # 0 = final only
    seed: int = 0

    def __post_init__(self):
        for name in ("warmup_frac", "p_sc", "p_fp", "cond_drop_prob", "image_batch_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def step_seed(seed: int, phase: str, step: int) -> int:
    return (seed * 1_000_003 + _PHASE_SALT[phase] + step) & 0x7FFFFFFF


def cosine_lr(base_lr: float, step: int, total: int, warmup_frac: float) -> float:
    warmup = max(1, int(total * warmup_frac))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def derive_model_config(dataset: ToyDataset, codec_cfg: CodecConfig, **overrides) -> DenoiserConfig:
    # Patch size 2 quarters the token count; that is what makes CPU training viable.
    spec = dataset.spec
    patch = overrides.get("patch_size", 2)
    h_p = spec.height // codec_cfg.spatial_factor // patch
    w_p = spec.width // codec_cfg.spatial_factor // patch
    base = dict(
        latent_channels=codec_cfg.latent_channels,
        patch_size=patch,
        t_len=1 + (spec.frames - 1) // codec_cfg.temporal_factor,
        h_p=h_p,
        w_p=w_p,
        st_window=(max(1, h_p // 2), max(1, w_p // 2)),
        num_classes=NUM_CLASSES,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_path: str
    csv_path: str
    curve_path: str
    codec_initial_loss: float
    codec_final_loss: float
    initial_loss: float
    final_loss: float
    image_batches: int
    video_batches: int


def _nan_abort(out_dir: str, phase: str, step: int, seed: int, loss) -> None:
    path = os.path.join(out_dir, "nan_dump.txt")
    with open(path, "w") as f:
        f.write(f"phase = {phase}\nstep = {step}\nstep_seed = {seed}\nloss = {loss}\n")
    raise RuntimeError(f"non-finite loss at {phase} step {step} (step seed {seed}); see {path}")


def _mean(xs) -> float:
    return sum(xs) / max(1, len(xs))


class LatentCache:
    """Dataset encoded once, normalized, ready for batch assembly."""

    def __init__(self, codec: Codec, dataset: ToyDataset, stats: LatentStats):
        self.stats = stats
        with torch.no_grad():
            vids = torch.stack([r.pixels for r in dataset.videos])
            self.video_latents = (codec.encode_batch(vids) - stats.mean) / stats.std
            self.video_labels = torch.tensor([r.class_id for r in dataset.videos], dtype=torch.long)
            imgs = torch.stack([r.pixels for r in dataset.images])  # (N, 1, H, W, 3)
            self.image_latents = ((codec.encode_batch(imgs) - stats.mean) / stats.std).squeeze(1)
            self.image_labels = torch.tensor([r.class_id for r in dataset.images], dtype=torch.long)
        self.by_class = {
            int(c): (self.image_labels == c).nonzero().flatten().tolist()
            for c in self.image_labels.unique()
        }
        self.image_classes = sorted(self.by_class)   # only classes with records

    def video_batch(self, batch_size: int, generator: torch.Generator) -> TrainBatch:
        idx = torch.randint(self.video_latents.shape[0], (batch_size,), generator=generator)
        return TrainBatch(self.video_latents[idx], self.video_labels[idx], kind="video")

    def image_batch(self, batch_size: int, stack_len: int, generator: torch.Generator) -> TrainBatch:
        if not self.image_classes:
            raise ValueError("no image records in the dataset")
        stacks, labels = [], []
        for _ in range(batch_size):
            c = self.image_classes[int(torch.randint(len(self.image_classes), (), generator=generator))]
            pool = self.by_class[c]
            picks = torch.randint(len(pool), (stack_len,), generator=generator)
            stacks.append(self.image_latents[[pool[int(p)] for p in picks]])
            labels.append(c)
        return TrainBatch(
            torch.stack(stacks), torch.tensor(labels, dtype=torch.long), kind="image_stack"
        )


def train_codec(codec: Codec, dataset: ToyDataset, cfg: TrainConfig, log_rows: list, out_dir: str):
    opt = torch.optim.AdamW(
        codec.parameters(), lr=cfg.codec_lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    losses = []
    n_videos = len(dataset.videos)
    n_images = len(dataset.images)
    for step in range(cfg.codec_steps):
        seed = step_seed(cfg.seed, CODEC_PHASE, step)
        g = torch.Generator().manual_seed(seed)
        for group in opt.param_groups:
            group["lr"] = cosine_lr(cfg.codec_lr, step, cfg.codec_steps, cfg.warmup_frac)
        use_images = float(torch.rand((), generator=g)) < cfg.image_batch_ratio
        if use_images and n_images:
            idx = torch.randint(n_images, (cfg.codec_batch_size,), generator=g)
            pixels = torch.stack([dataset.images[int(i)].pixels for i in idx])
        else:
            idx = torch.randint(n_videos, (cfg.codec_batch_size,), generator=g)
            pixels = torch.stack([dataset.videos[int(i)].pixels for i in idx])
        recon = codec.decode_batch(codec.encode_batch(pixels), clamp=False)
        loss = ((recon - pixels) ** 2).mean()
        if not torch.isfinite(loss):
            _nan_abort(out_dir, CODEC_PHASE, step, seed, loss.item())
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(codec.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if step % cfg.log_every == 0 or step == cfg.codec_steps - 1:
            log_rows.append([CODEC_PHASE, step, f"{loss.item():.6f}", f"{opt.param_groups[0]['lr']:.2e}"])
    return losses


def train(
    config: TrainConfig,
    dataset: ToyDataset,
    out_dir: str,
    codec_cfg: Optional[CodecConfig] = None,
    model_cfg: Optional[DenoiserConfig] = None,
    sched: Optional[NoiseSchedule] = None,
    resume: Optional[str] = None,
) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    if config.image_batch_ratio > 0 and not dataset.images:
        raise ValueError("image_batch_ratio > 0 needs image records in the dataset")
    if config.image_batch_ratio < 1 and not dataset.videos:
        raise ValueError("image_batch_ratio < 1 needs video records in the dataset")
    torch.manual_seed(config.seed)

    if resume:
        bundle = load_checkpoint(resume)
        codec, model, sched = bundle.codec, bundle.model, bundle.sched
        stats = bundle.stats
        start_step = bundle.step
    else:
        codec_cfg = codec_cfg or CodecConfig()
        codec = Codec(codec_cfg)
        model_cfg = model_cfg or derive_model_config(dataset, codec_cfg)
        model = Denoiser(model_cfg)
        sched = sched or make_schedule(zero_terminal_snr=True)
        stats = None
        start_step = 0

    log_rows: list = []
    csv_path = os.path.join(out_dir, "train_log.csv")
    curve_path = os.path.join(out_dir, "loss_curve.png")

    codec_losses = [0.0]
    if not resume:
        codec_losses = train_codec(codec, dataset, config, log_rows, out_dir)
        with torch.no_grad():
            sample_latents = [
                codec.encode_batch(r.pixels.unsqueeze(0))[0] for r in dataset.videos
            ] + [codec.encode_batch(r.pixels.unsqueeze(0))[0] for r in dataset.images]
        stats = fit_latent_stats(sample_latents)

    cache = LatentCache(codec, dataset, stats)

    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    if resume:
        bundle.load_optimizer(opt)
    step_cfg = TrainStepConfig(
        p_sc=config.p_sc, cond_drop_prob=config.cond_drop_prob, p_fp=config.p_fp
    )
    ema = None
    if config.ema_decay > 0:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    counters = {"image_batches": 0, "video_batches": 0}
    losses = []
    ckpt_path = os.path.join(out_dir, "checkpoint")

    for step in range(start_step, config.steps):
        seed = step_seed(config.seed, DENOISER_PHASE, step)
        g = torch.Generator().manual_seed(seed)
        for group in opt.param_groups:
            group["lr"] = cosine_lr(config.lr, step, config.steps, config.warmup_frac)
        use_images = float(torch.rand((), generator=g)) < config.image_batch_ratio
        if use_images:
            batch = cache.image_batch(config.batch_size, config.image_stack_len, g)
            counters["image_batches"] += 1
        else:
            batch = cache.video_batch(config.batch_size, g)
            counters["video_batches"] += 1
        assert batch.kind in ("video", "image_stack")  # batches are never mixed
        loss = training_step(batch, model, sched, step_cfg, g)
        if not torch.isfinite(loss):
            _nan_abort(out_dir, DENOISER_PHASE, step, seed, loss.item())
        opt.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    ema[k].mul_(config.ema_decay).add_(v, alpha=1 - config.ema_decay)
        losses.append(loss.item())
        if step % config.log_every == 0 or step == config.steps - 1:
            log_rows.append(
                [DENOISER_PHASE, step, f"{loss.item():.6f}", f"{opt.param_groups[0]['lr']:.2e}"]
            )
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(
                ckpt_path, codec, model, sched, stats,
                step=step + 1, optimizer=opt, train_config=config, ema=ema,
            )

    save_checkpoint(
        ckpt_path, codec, model, sched, stats,
        step=config.steps, optimizer=opt, train_config=config, ema=ema,
    )
    reporting.write_csv(csv_path, log_rows, header=["phase", "step", "loss", "lr"])
    reporting.plot_loss_curve(csv_path, curve_path)

    k = max(1, min(50, len(losses) // 10))
    return TrainResult(
        out_dir=out_dir,
        checkpoint_path=ckpt_path,
        csv_path=csv_path,
        curve_path=curve_path,
        codec_initial_loss=_mean(codec_losses[:k]),
        codec_final_loss=_mean(codec_losses[-k:]),
        initial_loss=_mean(losses[:k]),
        final_loss=_mean(losses[-k:]),
        image_batches=counters["image_batches"],
        video_batches=counters["video_batches"],
    )


def train_superres(
    stage,
    z_hr: torch.Tensor,
    z_lr: torch.Tensor,
    class_ids: torch.Tensor,
    sched: NoiseSchedule,
    steps: int = 800,
    lr: float = 2e-3,
    batch_size: int = 4,
    seed: int = 0,
    p_sc: float = 0.9,
    log_rows: Optional[list] = None,
) -> list:
    """Fit the 2x stage on paired (low-res, high-res) normalized latents."""
    from .tasks import superres_training_step

    opt = torch.optim.AdamW(stage.parameters(), lr=lr, weight_decay=0.01)
    n = z_hr.shape[0]
    losses = []
    for step in range(steps):
        g = torch.Generator().manual_seed(step_seed(seed, "superres", step))
        for group in opt.param_groups:
            group["lr"] = cosine_lr(lr, step, steps, 0.05)
        idx = torch.randint(n, (min(batch_size, n),), generator=g)
        loss = superres_training_step(z_hr[idx], z_lr[idx], class_ids[idx], stage, sched, g, p_sc=p_sc)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite super-resolution loss at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(stage.parameters(), 1.0)
        opt.step()
        losses.append(loss.item())
        if log_rows is not None and step % 25 == 0:
            log_rows.append(["superres", step, f"{loss.item():.6f}", f"{opt.param_groups[0]['lr']:.2e}"])
    return losses

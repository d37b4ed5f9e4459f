"""Command line front end.

Subcommands: gen-data, train, sample, encode, decode, gradcheck, paramcount,
superres. Configuration comes from an optional flat text file (--config) plus
repeatable --set section.field=value overrides; --seed controls all
randomness of the invocation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import reporting
from .backbone import Denoiser, DenoiserConfig, param_count, vit_g_like_config
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codec, CodecConfig, LatentTensor, VideoTensor, denormalize_latents, normalize_latents
from .configfile import apply_overrides, load_config
from .data import (
    NUM_CLASSES,
    ToyDatasetSpec,
    class_caption,
    generate_toy_dataset,
    load_dataset,
    save_dataset,
)
from .diffusion import make_schedule, sample_batch
from .gradcheck import grad_check
from .tasks import SuperResStage, autoregressive_generate, build_fp_conditioning, superres_sample
from .training import TrainConfig, derive_model_config, train, train_superres

MODES = ("t2v", "i2v", "predict", "superres", "long")


def _load_merged_config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    return apply_overrides(cfg, getattr(args, "set", None))


def _config_hash(configs: dict) -> str:
    return hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()[:12]


def _read_frames(path) -> torch.Tensor:
    """A PNG file, a directory of frame PNGs, or an .npz with 'pixels'."""
    from PIL import Image

    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".png"))
        frames_only = [n for n in names if n.startswith("frame_")]
        names = frames_only or names    # sample dirs also hold contact sheets
        if not names:
            raise FileNotFoundError(f"no .png frames in {path}")
        frames = [np.asarray(Image.open(os.path.join(path, n)).convert("RGB")) for n in names]
        arr = np.stack(frames)
    elif path.endswith(".npz"):
        arr = np.load(path)["pixels"]
        if arr.dtype != np.uint8:
            return torch.from_numpy(arr.astype(np.float32))
    else:
        arr = np.asarray(Image.open(path).convert("RGB"))[None]
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


def cmd_gen_data(args) -> int:
    cfg = _load_merged_config(args)
    spec_kwargs = cfg.get("data", {})
    if args.seed is not None:
        spec_kwargs["seed"] = args.seed
    spec = ToyDatasetSpec(**spec_kwargs)
    dataset = generate_toy_dataset(spec)
    save_dataset(dataset, args.out)
    preview = args.preview or (os.path.splitext(args.out)[0] + "_preview.png")
    reporting.dataset_preview(dataset, preview)
    rows = [
        [i, r.class_id, class_caption(r.class_id), r.kind]
        for i, r in enumerate(dataset.videos + dataset.images)
    ]
    index_path = os.path.splitext(args.out)[0] + "_index.csv"
    reporting.write_csv(index_path, rows, header=["record", "class_id", "caption", "kind"])
    print(f"wrote {len(dataset.videos)} clips + {len(dataset.images)} stills to {args.out}")
    print(f"preview: {preview}\nindex: {index_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_merged_config(args)
    dataset = load_dataset(args.data)
    train_cfg = TrainConfig(**cfg.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    codec_cfg = CodecConfig(**cfg.get("codec", {}))
    sched = make_schedule(**{"zero_terminal_snr": True, **cfg.get("schedule", {})})
    model_cfg = None
    if not args.resume:
        model_cfg = derive_model_config(dataset, codec_cfg, **cfg.get("backbone", {}))
    result = train(
        train_cfg, dataset, args.out,
        codec_cfg=codec_cfg, model_cfg=model_cfg, sched=sched, resume=args.resume,
    )
    print(
        f"codec loss {result.codec_initial_loss:.4f} -> {result.codec_final_loss:.4f}; "
        f"denoiser loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.csv_path}\ncurve: {result.curve_path}")
    return 0


def _encode_context(codec, stats, frames: torch.Tensor, want_latent_frames: int) -> torch.Tensor:
    ctx = normalize_latents(codec.encode(VideoTensor(frames)), stats)
    if ctx.latent_frames < want_latent_frames:
        raise ValueError(
            f"context video gives {ctx.latent_frames} latent frames, need {want_latent_frames}"
        )
    return ctx.data[:want_latent_frames]


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model, codec, sched, stats = bundle.model, bundle.codec, bundle.sched, bundle.stats
    mcfg = model.cfg
    trained_drop = bundle.configs.get("train", {}).get("cond_drop_prob")
    shape = (
        args.num, mcfg.t_len,
        mcfg.h_p * mcfg.patch_size, mcfg.w_p * mcfg.patch_size, mcfg.latent_channels,
    )
    generator = torch.Generator().manual_seed(args.seed or 0)
    class_ids = None
    if args.class_id is not None:
        if not 0 <= args.class_id < mcfg.num_classes:
            raise ValueError(f"class id must be in 0..{mcfg.num_classes - 1}")
        class_ids = torch.full((args.num,), args.class_id, dtype=torch.long)

    meta = {
        "mode": args.mode,
        "seed": args.seed or 0,
        "guidance": args.guidance,
        "ddim_steps": args.steps,
        "class_id": args.class_id if args.class_id is not None else "none",
        "caption": class_caption(args.class_id) if args.class_id is not None else "unconditional",
        "config_sha256": _config_hash(bundle.configs),
    }

    if args.mode == "long":
        latents, video = autoregressive_generate(
            model, codec, stats, sched,
            chunks=args.chunks, class_id=args.class_id,
            num_steps=args.steps, guidance_w=args.guidance, generator=generator,
        )
        meta["chunks"] = args.chunks
        _export_pixels(video, args.out, meta)
        print(f"wrote {video.frames}-frame long video ({args.chunks} chunks) to {args.out}")
        return 0

    fp = None
    if args.mode in ("i2v", "predict"):
        if not args.init:
            raise ValueError(f"--init is required for mode {args.mode}")
        frames = _read_frames(args.init)
        f_t = codec.cfg.temporal_factor
        if args.mode == "i2v":
            ctx = _encode_context(codec, stats, frames[:1], 1)
            n_frames = 1
        else:
            need = 1 + f_t
            if frames.shape[0] < need:
                raise ValueError(f"prediction mode needs at least {need} context frames")
            ctx = _encode_context(codec, stats, frames[-need:], 2)
            n_frames = 2
        zeros = torch.zeros(shape)
        fp = build_fp_conditioning(zeros, ctx.unsqueeze(0).expand(args.num, -1, -1, -1, -1), n_frames)

    latents = sample_batch(
        model, sched, shape,
        class_ids=class_ids,
        num_steps=args.steps,
        guidance_w=args.guidance,
        generator=generator,
        fp=fp,
        trained_cond_drop=trained_drop,
    )

    if args.mode == "superres":
        if bundle.superres is None:
            raise ValueError("checkpoint has no super-resolution stage; run `lvdm superres` first")
        latents = superres_sample(
            bundle.superres, latents, sched,
            class_ids=class_ids, num_steps=args.steps,
            guidance_w=args.guidance, generator=generator,
        )

    items = [LatentTensor(latents[i], normalized=True) for i in range(latents.shape[0])]
    paths = reporting.export_samples(items, codec, stats, args.out, meta)
    print(f"wrote {len(items)} sample(s), {len(paths)} files under {args.out}")
    return 0


def _export_pixels(video: VideoTensor, out_dir, meta) -> list:
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    arr = reporting.to_uint8(video.data)
    paths = []
    for i in range(arr.shape[0]):
        p = os.path.join(out_dir, f"frame_{i:04d}.png")
        Image.fromarray(arr[i]).save(p)
        paths.append(p)
    entries = {"frames": arr.shape[0], "height": arr.shape[1], "width": arr.shape[2], "fps": 8}
    entries.update(meta)
    reporting.write_manifest(os.path.join(out_dir, "manifest.txt"), entries)
    reporting.contact_sheet(video.data, os.path.join(out_dir, "contact_sheet.png"))
    return paths


def cmd_encode(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    frames = _read_frames(args.frames)
    latent = bundle.codec.encode(VideoTensor(frames))
    np.savez(args.out, latent=latent.data.numpy(), kind=latent.kind)
    print(f"encoded {frames.shape[0]} frames -> latent {tuple(latent.data.shape)} at {args.out}")
    return 0


def cmd_decode(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    blob = np.load(args.latent, allow_pickle=False)
    z = LatentTensor(torch.from_numpy(blob["latent"]).float())
    video = bundle.codec.decode(z)
    _export_pixels(video, args.out, {"source": os.path.basename(args.latent)})
    print(f"decoded latent {tuple(z.data.shape)} -> {video.frames} frames under {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    torch.manual_seed(args.seed or 0)
    cfg = DenoiserConfig(
        d_model=32, num_blocks=args.blocks, num_heads=2, latent_channels=4,
        t_len=3, h_p=4, w_p=4, st_window=(2, 2), num_classes=4,
    )
    model = Denoiser(cfg).double()
    x0 = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64)
    t = torch.tensor([500])
    labels = torch.tensor([1])
    target = torch.randn_like(x0)

    def loss_fn():
        return ((model(x0, t, labels) - target) ** 2).mean()

    report = grad_check(
        loss_fn, dict(model.named_parameters()),
        eps=args.eps, num_coords=args.coords,
        generator=torch.Generator().manual_seed(args.seed or 0),
    )
    print(report)
    if report.worst:
        name, idx, analytic, numeric = report.worst
        print(f"worst: {name}[{idx}] analytic {analytic:.6e} vs numeric {numeric:.6e}")
    return 0 if report.frac_within >= 0.95 else 1


def cmd_paramcount(args) -> int:
    if args.preset == "vit-g-like":
        cfg = vit_g_like_config(adaln_mode=args.adaln, rank=args.r)
    elif args.preset == "desk":
        cfg = DenoiserConfig(adaln_mode=args.adaln, adaln_rank=args.r)
    else:
        raise ValueError(f"unknown preset {args.preset!r}")
    census = param_count(cfg)
    print(census)
    return 0


def cmd_superres(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    codec, model, sched, stats = bundle.codec, bundle.model, bundle.sched, bundle.stats
    dataset = load_dataset(args.data)
    mcfg = model.cfg
    sr_cfg = DenoiserConfig(
        d_model=mcfg.d_model, num_blocks=mcfg.num_blocks, num_heads=mcfg.num_heads,
        patch_size=mcfg.patch_size, latent_channels=mcfg.latent_channels,
        t_len=mcfg.t_len, h_p=2 * mcfg.h_p, w_p=2 * mcfg.w_p,
        st_window=mcfg.st_window, num_classes=mcfg.num_classes,
        lr_cond=True, t_sr_cond=True,
    )
    stage = SuperResStage(sr_cfg, scale=2, t_max_noise=args.t_max_noise)

    clips = torch.stack([r.pixels for r in dataset.videos[: args.clips]])
    hr = clips.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    with torch.no_grad():
        z_lr = (codec.encode_batch(clips) - stats.mean) / stats.std
        z_hr = (codec.encode_batch(hr) - stats.mean) / stats.std
    labels = torch.tensor([dataset.videos[i].class_id for i in range(len(dataset.videos[: args.clips]))])

    log_rows: list = []
    losses = train_superres(
        stage, z_hr, z_lr, labels, sched,
        steps=args.steps, seed=args.seed or 0, log_rows=log_rows,
    )
    out = args.out or args.checkpoint
    save_checkpoint(
        out, codec, model, sched, stats,
        step=bundle.step, train_config=None, superres=stage,
    )
    csv_path = os.path.join(out, "superres_log.csv")
    reporting.write_csv(csv_path, log_rows, header=["phase", "step", "loss", "lr"])
    reporting.plot_loss_curve(csv_path, os.path.join(out, "superres_curve.png"))
    print(f"superres loss {losses[0]:.4f} -> {sum(losses[-25:]) / 25:.4f}; stage saved to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvdm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat text config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("gen-data", help="write the deterministic toy dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output .npz path")
    sp.add_argument("--preview", help="preview figure path")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train codec then denoiser")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=MODES, default="t2v")
    sp.add_argument("--num", type=int, default=1)
    sp.add_argument("--class-id", type=int, default=None)
    sp.add_argument("--guidance", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--chunks", type=int, default=2, help="chunks for --mode long")
    sp.add_argument("--init", help="context frames for i2v/predict")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("encode", help="pixels -> latent")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--frames", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="latent -> pixels")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--latent", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(sp)
    sp.add_argument("--blocks", type=int, default=2)
    sp.add_argument("--coords", type=int, default=200)
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("paramcount", help="parameter census from config alone")
    common(sp)
    sp.add_argument("--preset", default="desk", choices=("desk", "vit-g-like"))
    sp.add_argument("--adaln", default="lora", choices=("lora", "separate"))
    sp.add_argument("--r", type=int, default=2)
    sp.set_defaults(func=cmd_paramcount)

    sp = sub.add_parser("superres", help="fit and attach a 2x upsampler stage")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="output checkpoint dir (default: in place)")
    sp.add_argument("--steps", type=int, default=800)
    sp.add_argument("--clips", type=int, default=8)
    sp.add_argument("--t-max-noise", type=int, default=100)
    sp.set_defaults(func=cmd_superres)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, PermissionError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

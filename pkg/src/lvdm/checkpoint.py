"""Checkpoint persistence.

A checkpoint is a directory holding a JSON manifest (configs, tensor table,
counters) and one raw little-endian float32 blob containing every tensor
back to back. The manifest alone determines all shapes, so loading never
needs the code that produced the file to guess anything.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from typing import Optional

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
FORMAT_VERSION = 1


def write_blob(path: str, tensors: dict, configs: dict, extra: Optional[dict] = None) -> None:
    os.makedirs(path, exist_ok=True)
    table = {}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype != torch.float32:
            raise ValueError(f"checkpoint tensors must be float32, {name} is {t.dtype}")
        arr = t.numpy().astype("<f4")
        table[name] = {"shape": list(t.shape), "dtype": "float32", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "configs": configs,
        "tensors": table,
        "extra": extra or {},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        for chunk in chunks:
            f.write(chunk)


def read_blob(path: str):
    with open(os.path.join(path, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unknown checkpoint format version {manifest.get('format_version')}")
    raw = open(os.path.join(path, BLOB_NAME), "rb").read()
    tensors = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=meta["offset"])
        tensors[name] = torch.from_numpy(arr.copy()).reshape(shape)
    return tensors, manifest["configs"], manifest["extra"]


def _prefixed(state_dict: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in state_dict.items()}


def _unprefixed(tensors: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def save_checkpoint(
    path: str,
    codec,
    model,
    sched,
    stats,
    step: int = 0,
    optimizer=None,
    train_config=None,
    superres=None,
    ema: Optional[dict] = None,
) -> None:
    from .diffusion import NoiseSchedule  # noqa: F401  (shapes only)

    tensors = {}
    tensors.update(_prefixed(codec.state_dict(), "codec"))
    tensors.update(_prefixed(model.state_dict(), "model"))
    if superres is not None:
        tensors.update(_prefixed(superres.state_dict(), "superres"))
    tensors["stats.mean"] = stats.mean
    tensors["stats.std"] = stats.std
    extra = {"step": step}
    if ema:
        tensors.update(_prefixed(ema, "ema"))
        extra["has_ema"] = True
    if optimizer is not None:
        opt_sd = optimizer.state_dict()
        for idx, st in opt_sd["state"].items():
            for key, val in st.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"opt.{idx}.{key}"] = val.float()
                else:
                    extra.setdefault("opt_scalars", {})[f"{idx}.{key}"] = val
        extra["opt_param_groups"] = opt_sd["param_groups"]
    configs = {
        "codec": asdict(codec.cfg),
        "backbone": asdict(model.cfg),
        "schedule": {
            "kind": sched.kind,
            "steps": sched.num_steps,
            "beta_start": sched.beta_start,
            "beta_end": sched.beta_end,
            "zero_terminal_snr": sched.zero_terminal_snr,
        },
    }
    if superres is not None:
        configs["superres"] = {
            "scale": superres.scale,
            "t_max_noise": superres.t_max_noise,
            "model": asdict(superres.model.cfg),
        }
    if train_config is not None:
        configs["train"] = asdict(train_config)
    write_blob(path, tensors, configs, extra)


class CheckpointBundle:
    def __init__(self, codec, model, sched, stats, step, configs, extra, tensors, superres=None):
        self.codec = codec
        self.model = model
        self.sched = sched
        self.stats = stats
        self.step = step
        self.configs = configs
        self.extra = extra
        self.tensors = tensors
        self.superres = superres

    def load_optimizer(self, optimizer) -> None:
        """Restore moment tensors into a freshly constructed optimizer."""
        state = {}
        for name, t in self.tensors.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
        for flat, val in self.extra.get("opt_scalars", {}).items():
            idx, key = flat.split(".", 1)
            state.setdefault(int(idx), {})[key] = val
        groups = [dict(g) for g in self.extra["opt_param_groups"]]
        for g in groups:
            if isinstance(g.get("betas"), list):    # JSON has no tuples
                g["betas"] = tuple(g["betas"])
        optimizer.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path: str) -> CheckpointBundle:
    from .backbone import Denoiser, DenoiserConfig
    from .codec import Codec, CodecConfig, LatentStats
    from .diffusion import make_schedule
    from .tasks import SuperResStage

    tensors, configs, extra = read_blob(path)
    codec = Codec(CodecConfig(**{**configs["codec"]}))
    codec.load_state_dict(_unprefixed(tensors, "codec"))
    model = Denoiser(DenoiserConfig(**configs["backbone"]))
    model.load_state_dict(_unprefixed(tensors, "model"))
    sched = make_schedule(**configs["schedule"])
    stats = LatentStats(mean=tensors["stats.mean"], std=tensors["stats.std"])
    superres = None
    if "superres" in configs:
        sr_cfg = configs["superres"]
        superres = SuperResStage(
            DenoiserConfig(**sr_cfg["model"]), scale=sr_cfg["scale"], t_max_noise=sr_cfg["t_max_noise"]
        )
        superres.load_state_dict(_unprefixed(tensors, "superres"))
    return CheckpointBundle(
        codec, model, sched, stats, extra.get("step", 0), configs, extra, tensors, superres
    )

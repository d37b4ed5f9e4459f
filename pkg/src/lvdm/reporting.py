"""File outputs: delimited logs, rendered figures, frame exports, manifests.

Every report path pairs machine-readable text (CSV or key=value manifests)
with a rendered figure next to it, so a run directory is inspectable both by
scripts and by eye.
"""

from __future__ import annotations

import csv
import hashlib
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from .codec import VideoTensor


def write_csv(path, rows, header) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]


def plot_loss_curve(csv_path, out_path, smooth: int = 25) -> str:
    """Render the training log as loss-vs-step, one line per phase."""
    header, rows = read_csv(csv_path)
    col = {name: i for i, name in enumerate(header)}
    fig, ax = plt.subplots(figsize=(7, 4))
    phases = sorted({r[col["phase"]] for r in rows})
    for phase in phases:
        steps = [int(r[col["step"]]) for r in rows if r[col["phase"]] == phase]
        losses = [float(r[col["loss"]]) for r in rows if r[col["phase"]] == phase]
        ax.plot(steps, losses, alpha=0.3, label=f"{phase}")
        if len(losses) > smooth:
            kernel = np.ones(smooth) / smooth
            ax.plot(
                steps[smooth - 1:], np.convolve(losses, kernel, mode="valid"),
                label=f"{phase} ({smooth}-step mean)",
            )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    """[-1, 1] float frames to uint8, shape preserved."""
    x = ((frames.detach().cpu().numpy() + 1.0) * 127.5).round()
    return np.clip(x, 0, 255).astype(np.uint8)


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as f:
        for key in sorted(entries):
            f.write(f"{key} = {entries[key]}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def contact_sheet(frames: torch.Tensor, out_path, cols: int = 0, title: str = "") -> str:
    """One figure tiling every frame of a clip (or one row per sampled clip)."""
    arr = to_uint8(frames)
    n = arr.shape[0]
    if cols <= 0:
        cols = min(n, 9)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(arr[i])
            ax.set_title(str(i), fontsize=6)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def export_samples(latents, codec, stats, out_dir, meta: dict | None = None) -> list:
    """Decode latents and write one PNG per frame plus manifest and sheet.

    latents: normalized LatentTensor or list of them. Returns written paths.
    """
    from .codec import LatentTensor, denormalize_latents

    if isinstance(latents, LatentTensor):
        latents = [latents]
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for si, z in enumerate(latents):
        clip_dir = os.path.join(out_dir, f"sample_{si:03d}") if len(latents) > 1 else out_dir
        os.makedirs(clip_dir, exist_ok=True)
        if z.normalized:
            z = denormalize_latents(z, stats)
        video = codec.decode(z)
        arr = to_uint8(video.data)
        sha = hashlib.sha256()
        for fi in range(arr.shape[0]):
            p = os.path.join(clip_dir, f"frame_{fi:04d}.png")
            try:
                Image.fromarray(arr[fi]).save(p)
            except OSError as e:
                raise OSError(f"failed writing frame to {p}: {e}") from e
            sha.update(arr[fi].tobytes())
            written.append(p)
        entries = {
            "frames": arr.shape[0],
            "height": arr.shape[1],
            "width": arr.shape[2],
            "fps": 8,
            "pixels_sha256": sha.hexdigest(),
        }
        entries.update(meta or {})
        manifest_path = os.path.join(clip_dir, "manifest.txt")
        write_manifest(manifest_path, entries)
        written.append(manifest_path)
        written.append(contact_sheet(video.data, os.path.join(clip_dir, "contact_sheet.png")))
    return written


def dataset_preview(dataset, out_path, max_clips: int = 8) -> str:
    """First frame of a few clips, labeled by caption."""
    from .data import class_caption

    n = min(max_clips, len(dataset.videos))
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 2.0), squeeze=False)
    for i in range(n):
        rec = dataset.videos[i]
        axes[0][i].imshow(to_uint8(rec.pixels[0]))
        axes[0][i].set_title(class_caption(rec.class_id), fontsize=5)
        axes[0][i].axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path

"""Causal 3D convolutional tokenizer: a shared latent space for images and videos.

The encoder maps a clip of 1+T frames to 1 + T/f_t latent frames with H/f_s x W/f_s
spatial cells; the first frame is always encoded independently of the rest, so a
single image is just a one-frame video. All temporal convolutions pad only on the
past side, which is what makes that guarantee structural rather than learned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

PIXEL_CHANNELS = 3
STD_FLOOR = 1e-6

VIDEO = "video"
IMAGE_STACK = "image_stack"


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class CodecConfig:
    """Shape plan for the tokenizer.

    spatial_factor / temporal_factor are the compression ratios f_s and f_t.
    The codec has len(channel_multipliers) stages; the first log2(f_s) stages
    end in a spatial downsample and the first log2(f_t) of those also halve
    time. Trailing extra multipliers are plain residual stages at the bottleneck.
    """

    spatial_factor: int = 4
    temporal_factor: int = 2
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    latent_channels: int = 8

    def __post_init__(self):
        if not _is_power_of_two(self.spatial_factor):
            raise ValueError(f"spatial_factor must be a power of two, got {self.spatial_factor}")
        if not _is_power_of_two(self.temporal_factor):
            raise ValueError(f"temporal_factor must be a power of two, got {self.temporal_factor}")
        if self.latent_channels not in (4, 8, 16, 32):
            raise ValueError(f"latent_channels must be one of 4, 8, 16, 32, got {self.latent_channels}")
        self.channel_multipliers = tuple(self.channel_multipliers)
        if len(self.channel_multipliers) < self.num_spatial_levels:
            raise ValueError(
                f"need at least {self.num_spatial_levels} channel multipliers for "
                f"spatial_factor {self.spatial_factor}, got {self.channel_multipliers}"
            )
        if self.num_temporal_levels > self.num_spatial_levels:
            raise ValueError("temporal_factor cannot exceed spatial_factor under this stage plan")

    @property
    def num_spatial_levels(self) -> int:
        return int(round(math.log2(self.spatial_factor)))

    @property
    def num_temporal_levels(self) -> int:
        return int(round(math.log2(self.temporal_factor)))

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)


@dataclass
class VideoTensor:
    """A pixel-space clip, shape (frames, H, W, 3), values in [-1, 1].

    frames == 1 is a still image.
    """

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != PIXEL_CHANNELS:
            raise ValueError(f"expected (frames, H, W, 3) video data, got shape {tuple(self.data.shape)}")
        if self.frames < 1:
            raise ValueError("a video needs at least one frame")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class LatentTensor:
    """Codec output, shape (latent_frames, h, w, c), real-valued and quantization-free.

    kind records whether the latent frames form one video or a stack of
    independently encoded images; normalized tracks whether dataset statistics
    have been applied.
    """

    data: torch.Tensor
    kind: str = VIDEO
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected (latent_frames, h, w, c) latent data, got shape {tuple(self.data.shape)}")
        if self.kind not in (VIDEO, IMAGE_STACK):
            raise ValueError(f"kind must be '{VIDEO}' or '{IMAGE_STACK}', got {self.kind!r}")

    @property
    def latent_frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def validate_video_shape(frames: int, height: int, width: int, cfg: CodecConfig) -> None:
    """Divisibility contract for encoding; errors name the offending axis."""
    if (frames - 1) % cfg.temporal_factor != 0:
        raise ValueError(
            f"frames axis: (frames-1)={frames - 1} not divisible by temporal factor {cfg.temporal_factor}"
        )
    if height % cfg.spatial_factor != 0:
        raise ValueError(f"height axis: {height} not divisible by spatial factor {cfg.spatial_factor}")
    if width % cfg.spatial_factor != 0:
        raise ValueError(f"width axis: {width} not divisible by spatial factor {cfg.spatial_factor}")


def causal_conv3d(x: torch.Tensor, weight: torch.Tensor, bias, stride=(1, 1, 1)) -> torch.Tensor:
    """3D convolution whose temporal receptive field covers only the past.

    x: (B, C_in, T, H, W). Temporal padding is k_t - 1 zero frames on the left
    and none on the right; spatial padding is symmetric 'same'. Spatial kernel
    sizes must be odd.
    """
    out_ch, in_ch, k_t, k_h, k_w = weight.shape
    if min(k_t, k_h, k_w) < 1:
        raise ValueError(f"non-positive kernel size in {(k_t, k_h, k_w)}")
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise ValueError(f"spatial kernel sizes must be odd, got {(k_h, k_w)}")
    if x.shape[1] != in_ch:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {in_ch}")
    pad_h, pad_w = k_h // 2, k_w // 2
    x = F.pad(x, (pad_w, pad_w, pad_h, pad_h, k_t - 1, 0))
    return F.conv3d(x, weight, bias, stride=stride)


class CausalConv3d(nn.Module):
    """Conv3d with past-only temporal padding. Carries the kernel/stride spec."""

    def __init__(self, in_channels, out_channels, kernel=(3, 3, 3), stride=(1, 1, 1)):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        if min(self.kernel) < 1:
            raise ValueError(f"non-positive kernel size in {self.kernel}")
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        return causal_conv3d(x, self.weight, self.bias, self.stride)


class FrameGroupNorm(nn.Module):
    """GroupNorm with statistics per frame, so no information crosses time."""

    def __init__(self, channels, groups=8):
        super().__init__()
        self.groups = min(groups, channels)
        while channels % self.groups != 0:
            self.groups -= 1
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        # (B, C, T, H, W) -> per-frame 2D group norm
        b, c, t, h, w = x.shape
        y = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        y = F.group_norm(y, self.groups, self.weight, self.bias, eps=1e-6)
        return y.reshape(b, t, c, h, w).permute(0, 2, 1, 3, 4)


class ResBlock3d(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.norm1 = FrameGroupNorm(in_channels)
        self.conv1 = CausalConv3d(in_channels, out_channels)
        self.norm2 = FrameGroupNorm(out_channels)
        self.conv2 = CausalConv3d(out_channels, out_channels)
        self.skip = (
            CausalConv3d(in_channels, out_channels, kernel=(1, 1, 1))
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialDownsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = CausalConv3d(channels, channels, kernel=(3, 3, 3), stride=(1, 2, 2))

    def forward(self, x):
        return self.conv(x)


class TemporalDownsample(nn.Module):
    """Stride-2 causal conv over time; left padding exempts the first frame,
    so 1+T frames become 1+T/2."""

    def __init__(self, channels):
        super().__init__()
        self.conv = CausalConv3d(channels, channels, kernel=(3, 1, 1), stride=(2, 1, 1))

    def forward(self, x):
        return self.conv(x)


class SpatialUpsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = CausalConv3d(channels, channels, kernel=(1, 3, 3))

    def forward(self, x):
        x = x.repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
        return self.conv(x)


class TemporalUpsample(nn.Module):
    """Causal 2x in time: frame 0 stays single, every later frame doubles,
    then a causal conv smooths. 1+t frames become 1+2t."""

    def __init__(self, channels):
        super().__init__()
        self.conv = CausalConv3d(channels, channels, kernel=(3, 1, 1))

    def forward(self, x):
        first, rest = x[:, :, :1], x[:, :, 1:]
        x = torch.cat([first, rest.repeat_interleave(2, dim=2)], dim=2)
        return self.conv(x)


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = cfg.stage_widths
        layers: list[nn.Module] = [CausalConv3d(PIXEL_CHANNELS, widths[0])]
        prev = widths[0]
        for i, w in enumerate(widths):
            layers.append(ResBlock3d(prev, w))
            if i < cfg.num_spatial_levels:
                layers.append(SpatialDownsample(w))
            if i < cfg.num_temporal_levels:
                layers.append(TemporalDownsample(w))
            prev = w
        layers.append(ResBlock3d(prev, prev))
        layers.append(FrameGroupNorm(prev))
        layers.append(nn.SiLU())
        layers.append(CausalConv3d(prev, cfg.latent_channels))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = cfg.stage_widths
        layers: list[nn.Module] = [
            CausalConv3d(cfg.latent_channels, widths[-1]),
            ResBlock3d(widths[-1], widths[-1]),
        ]
        for i in reversed(range(len(widths))):
            w = widths[i]
            if i < cfg.num_temporal_levels:
                layers.append(TemporalUpsample(w))
            if i < cfg.num_spatial_levels:
                layers.append(SpatialUpsample(w))
            out_w = widths[i - 1] if i > 0 else widths[0]
            layers.append(ResBlock3d(w, out_w))
        layers.append(FrameGroupNorm(widths[0]))
        layers.append(nn.SiLU())
        layers.append(CausalConv3d(widths[0], PIXEL_CHANNELS))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Codec(nn.Module):
    """Encoder/decoder pair over the shared image-video latent space.

    Weights are immutable after construction as far as encode/decode are
    concerned; training mutates them under a single writer.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    # -- batched raw paths (channels-last in/out), used by training ---------

    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, frames, H, W, 3) -> (B, latent_frames, h, w, c)."""
        if x.ndim != 5 or x.shape[-1] != PIXEL_CHANNELS:
            raise ValueError(f"expected (B, frames, H, W, 3), got {tuple(x.shape)}")
        validate_video_shape(x.shape[1], x.shape[2], x.shape[3], self.cfg)
        z = self.encoder(x.permute(0, 4, 1, 2, 3))
        return z.permute(0, 2, 3, 4, 1)

    def decode_batch(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """(B, latent_frames, h, w, c) -> (B, frames, H, W, 3)."""
        if z.ndim != 5 or z.shape[-1] != self.cfg.latent_channels:
            raise ValueError(
                f"latent channel axis: expected {self.cfg.latent_channels} channels, got {tuple(z.shape)}"
            )
        x = self.decoder(z.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
        return x.clamp(-1.0, 1.0) if clamp else x

    # -- spec-level single-clip operations -----------------------------------

    def encode(self, video: VideoTensor) -> LatentTensor:
        with torch.no_grad():
            z = self.encode_batch(video.data.unsqueeze(0))[0]
        return LatentTensor(z, kind=VIDEO)

    def decode(self, latent: LatentTensor) -> VideoTensor:
        with torch.no_grad():
            x = self.decode_batch(latent.data.unsqueeze(0))[0]
        return VideoTensor(x)

    def encode_images(self, frames: torch.Tensor) -> LatentTensor:
        """Encode (N, H, W, 3) independent images into a stack of N latent frames."""
        if frames.ndim != 4 or frames.shape[-1] != PIXEL_CHANNELS:
            raise ValueError(f"expected (N, H, W, 3) image batch, got {tuple(frames.shape)}")
        with torch.no_grad():
            z = self.encode_batch(frames.unsqueeze(1))  # each image is a 1-frame video
        return LatentTensor(z.squeeze(1), kind=IMAGE_STACK)


@dataclass
class LatentStats:
    """Dataset-level per-channel mean/std used to whiten latents."""

    mean: torch.Tensor
    std: torch.Tensor

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def fit_latent_stats(samples: Sequence) -> LatentStats:
    """Per-channel statistics over a (>= 2 element) sample of latents.

    Accepts LatentTensor objects or raw (..., c) tensors. The std is floored
    at STD_FLOOR so degenerate channels never divide by ~0.
    """
    tensors = [s.data if isinstance(s, LatentTensor) else s for s in samples]
    if len(tensors) == 0:
        raise ValueError("cannot fit latent stats on an empty sample set")
    if len(tensors) < 2:
        raise ValueError(f"need at least 2 samples to fit latent stats, got {len(tensors)}")
    c = tensors[0].shape[-1]
    flat = torch.cat([t.reshape(-1, c) for t in tensors], dim=0)
    mean = flat.mean(dim=0)
    std = flat.std(dim=0).clamp_min(STD_FLOOR)
    return LatentStats(mean=mean, std=std)


def _check_stats(z: LatentTensor, stats: LatentStats) -> None:
    if z.channels != stats.channels:
        raise ValueError(f"stats fitted for {stats.channels} channels, latent has {z.channels}")


def normalize_latents(z: LatentTensor, stats: LatentStats) -> LatentTensor:
    _check_stats(z, stats)
    if z.normalized:
        raise ValueError("latent is already normalized")
    return LatentTensor((z.data - stats.mean) / stats.std, kind=z.kind, normalized=True)


def denormalize_latents(z: LatentTensor, stats: LatentStats) -> LatentTensor:
    _check_stats(z, stats)
    if not z.normalized:
        raise ValueError("latent is not normalized")
    return LatentTensor(z.data * stats.std + stats.mean, kind=z.kind, normalized=False)

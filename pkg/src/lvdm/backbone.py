"""Windowed-attention transformer denoiser.

Blocks alternate between two non-overlapping window layouts over the token
grid: spatial windows covering one latent frame each, and spatiotemporal
windows spanning the full temporal extent over a spatial sub-tile. Image
stacks ride through the spatiotemporal layers under an identity attention
mask, so the same weights serve images and video. Conditioning enters three
ways: AdaLN modulation (timestep + class, low-rank shared across layers),
cross-attention over conditioning tokens in spatial blocks, and extra input
channels handled upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .codec import IMAGE_STACK, VIDEO, LatentTensor
from .patchify import PositionTables, TokenGrid, patchify_batch, unpatchify_batch

SPATIAL = "spatial"
SPATIOTEMPORAL = "spatiotemporal"
FULL = "full"


@dataclass
class WindowConfig:
    kind: str
    extent: tuple[int, int, int]  # (w_t, w_h, w_w) in grid cells

    def __post_init__(self):
        if self.kind not in (SPATIAL, SPATIOTEMPORAL, FULL):
            raise ValueError(f"unknown window kind {self.kind!r}")
        self.extent = tuple(int(e) for e in self.extent)
        if min(self.extent) < 1:
            raise ValueError(f"window extents must be positive, got {self.extent}")

    def validate_for_grid(self, t_len: int, h_p: int, w_p: int) -> None:
        w_t, w_h, w_w = self.extent
        if self.kind == SPATIAL:
            if w_t != 1 or (w_h, w_w) != (h_p, w_p):
                raise ValueError(
                    f"spatial window must be 1x{h_p}x{w_p} for this grid, got {self.extent}"
                )
        elif self.kind == SPATIOTEMPORAL:
            if w_t != t_len:
                raise ValueError(f"spatiotemporal window must span all {t_len} frames, got w_t={w_t}")
        elif self.kind == FULL:
            if self.extent != (t_len, h_p, w_p):
                raise ValueError(f"full window must equal the grid, got {self.extent}")
        if t_len % w_t or h_p % w_h or w_p % w_w:
            raise ValueError(
                f"window extent {self.extent} does not divide grid {(t_len, h_p, w_p)}"
            )


def partition_batch(x: torch.Tensor, extent: tuple[int, int, int]) -> torch.Tensor:
    """(B, T, H, W, C) -> (B*num_windows, window_len, C), windows in raster order."""
    w_t, w_h, w_w = extent
    return rearrange(
        x, "b (nt wt) (nh wh) (nw ww) c -> (b nt nh nw) (wt wh ww) c", wt=w_t, wh=w_h, ww=w_w
    )


def reverse_batch(windows: torch.Tensor, extent: tuple[int, int, int], dims) -> torch.Tensor:
    """Inverse of partition_batch; dims = (B, T, H, W)."""
    b, t, h, w = dims
    w_t, w_h, w_w = extent
    expected = b * (t // w_t) * (h // w_h) * (w // w_w)
    if windows.shape[0] != expected:
        raise ValueError(f"window count {windows.shape[0]} does not match grid (expected {expected})")
    return rearrange(
        windows,
        "(b nt nh nw) (wt wh ww) c -> b (nt wt) (nh wh) (nw ww) c",
        b=b, nt=t // w_t, nh=h // w_h, nw=w // w_w, wt=w_t, wh=w_h, ww=w_w,
    )


def window_partition(g: TokenGrid, win: WindowConfig) -> torch.Tensor:
    """Split a grid into non-overlapping windows, (num_windows, window_len, d)."""
    win.validate_for_grid(g.t_len, g.h_p, g.w_p)
    vol = g.as_volume().unsqueeze(0)
    return partition_batch(vol, win.extent)


def window_reverse(windows: torch.Tensor, win: WindowConfig, grid_shape: tuple[int, int, int]) -> TokenGrid:
    t_len, h_p, w_p = grid_shape
    vol = reverse_batch(windows, win.extent, (1, t_len, h_p, w_p))[0]
    return TokenGrid(t_len, h_p, w_p, vol.reshape(-1, vol.shape[-1]))


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    relpos_bias: Optional[torch.Tensor] = None,
    qk_norm: bool = False,
    num_heads: int = 1,
    temperature=None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention on (..., len, dim) tensors.

    mask is boolean with True = may attend, broadcastable to (len_q, len_k);
    a row with no admissible key is an error, not NaN. relpos_bias is additive,
    broadcastable to (heads, len_q, len_k). With qk_norm, q and k are
    L2-normalized per head and the dot product is scaled by a per-head
    temperature (default sqrt(d_head)) instead of 1/sqrt(d_head).
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError("q, k, v must share their trailing width")
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    d_head = d // num_heads

    def split(x):
        return x.reshape(*x.shape[:-1], num_heads, d_head).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    if qk_norm:
        qh = F.normalize(qh, dim=-1)
        kh = F.normalize(kh, dim=-1)
        if temperature is None:
            temperature = math.sqrt(d_head)
        if isinstance(temperature, torch.Tensor):
            temperature = temperature.reshape(-1, 1, 1)
        logits = (qh @ kh.transpose(-2, -1)) * temperature
    else:
        logits = (qh @ kh.transpose(-2, -1)) / math.sqrt(d_head)
    if relpos_bias is not None:
        logits = logits + relpos_bias
    if mask is not None:
        if mask.dtype != torch.bool:
            raise ValueError("attention mask must be boolean")
        if not mask.any(dim=-1).all():
            raise ValueError("attention mask leaves a query row with no admissible key")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = logits.softmax(dim=-1)
    out = weights @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d)


class RelativePositionBias3d(nn.Module):
    """Learned bias over clipped (dt, dh, dw) offsets inside a window.

    One instance per window kind, shared by every block of that kind. Offsets
    from windows larger than the table (aspect-ratio changes) are clipped to
    the table edge rather than erroring.
    """

    def __init__(self, extent: tuple[int, int, int], num_heads: int):
        super().__init__()
        self.extent = tuple(extent)
        self.num_heads = num_heads
        b_t, b_h, b_w = self.extent
        vol = (2 * b_t - 1) * (2 * b_h - 1) * (2 * b_w - 1)
        self.table = nn.Parameter(torch.empty(vol, num_heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        self._index_cache: dict[tuple[int, int, int], torch.Tensor] = {}

    def _indices(self, extent: tuple[int, int, int]) -> torch.Tensor:
        if extent in self._index_cache:
            return self._index_cache[extent]
        b_t, b_h, b_w = self.extent
        coords = torch.stack(
            torch.meshgrid(
                torch.arange(extent[0]), torch.arange(extent[1]), torch.arange(extent[2]),
                indexing="ij",
            ),
            dim=-1,
        ).reshape(-1, 3)
        delta = coords[:, None, :] - coords[None, :, :]  # (L, L, 3)
        bounds = torch.tensor([b_t - 1, b_h - 1, b_w - 1])
        delta = delta.clamp(min=-bounds, max=bounds) + bounds
        idx = (delta[..., 0] * (2 * b_h - 1) + delta[..., 1]) * (2 * b_w - 1) + delta[..., 2]
        self._index_cache[extent] = idx
        return idx

    def bias_for(self, extent: tuple[int, int, int]) -> torch.Tensor:
        idx = self._indices(tuple(extent))
        bias = self.table[idx.reshape(-1)].reshape(*idx.shape, self.num_heads)
        return bias.permute(2, 0, 1)  # (heads, L, L)


class AdaLnLoraState(nn.Module):
    """Per-layer modulation parameters from one shared map plus low-rank deltas.

    Layer 1 is the shared map's output directly; layer i > 1 adds
    up_i(down_i(cond)). mode='separate' gives every layer its own full map
    instead (the expensive baseline the census quantifies). All output-side
    weights start at zero so every block begins as an identity map.
    """

    def __init__(self, d_model: int, num_layers: int, rank: int = 2, mode: str = "lora"):
        super().__init__()
        if mode not in ("lora", "separate"):
            raise ValueError(f"adaln mode must be 'lora' or 'separate', got {mode!r}")
        if rank < 0:
            raise ValueError("rank must be >= 0")
        self.d_model = d_model
        self.num_layers = num_layers
        self.rank = rank
        self.mode = mode
        if mode == "separate":
            self.per_layer = nn.ModuleList(
                [nn.Linear(d_model, 6 * d_model) for _ in range(num_layers)]
            )
            for lin in self.per_layer:
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        else:
            self.shared = nn.Linear(d_model, 6 * d_model)
            nn.init.zeros_(self.shared.weight)
            nn.init.zeros_(self.shared.bias)
            self.down = nn.ModuleList()
            self.up = nn.ModuleList()
            if rank > 0:
                for _ in range(num_layers - 1):
                    down = nn.Linear(d_model, rank, bias=False)
                    up = nn.Linear(rank, 6 * d_model, bias=False)
                    nn.init.zeros_(up.weight)
                    self.down.append(down)
                    self.up.append(up)

    def params(self, cond: torch.Tensor, layer_i: int):
        """cond: (B, d_model); layer_i is 1-based. Returns (g1, b1, a1, g2, b2, a2)."""
        if not 1 <= layer_i <= self.num_layers:
            raise ValueError(f"layer index {layer_i} out of range 1..{self.num_layers}")
        if self.mode == "separate":
            out = self.per_layer[layer_i - 1](F.silu(cond))
        else:
            out = self.shared(F.silu(cond))
            if layer_i > 1 and self.rank > 0:
                out = out + self.up[layer_i - 2](self.down[layer_i - 2](cond))
        return out.chunk(6, dim=-1)


def adaln_params(cond: torch.Tensor, state: AdaLnLoraState, layer_i: int):
    return state.params(cond, layer_i)


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return x * (1 + gamma.unsqueeze(-2)) + beta.unsqueeze(-2)


def _neutral_mods(x: torch.Tensor):
    z = x.new_zeros(x.shape[0], x.shape[-1])
    o = x.new_ones(x.shape[0], x.shape[-1])
    return (z, z, o, z, z, o)


class CrossAttention(nn.Module):
    """Window tokens attend to themselves concatenated with conditioning tokens."""

    def __init__(self, d_model: int, num_heads: int, qk_norm: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.qk_norm = qk_norm
        self.q = nn.Linear(d_model, d_model)
        self.kv = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        if qk_norm:
            self.temperature = nn.Parameter(
                torch.full((num_heads,), math.sqrt(d_model / num_heads))
            )
        else:
            self.temperature = None

    def forward(self, windows: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """windows: (num_windows_total, wl, d); cond already tiled to match dim 0."""
        if cond.shape[1] == 0:
            raise ValueError("cross-attention needs at least one conditioning token")
        q = self.q(windows)
        kv = self.kv(torch.cat([windows, cond], dim=1))
        k, v = kv.chunk(2, dim=-1)
        out = attention(
            q, k, v, qk_norm=self.qk_norm, num_heads=self.num_heads, temperature=self.temperature
        )
        return self.out(out)


def cross_attention(g: TokenGrid, cond: torch.Tensor, win: WindowConfig, module: CrossAttention) -> TokenGrid:
    """Single-grid mode of CrossAttention: keys/values are window tokens + cond.

    Returns the attended output itself; the caller owns the residual.
    """
    win.validate_for_grid(g.t_len, g.h_p, g.w_p)
    windows = window_partition(g, win)
    if cond.ndim != 2:
        raise ValueError(f"conditioning tokens must be (count, d), got {tuple(cond.shape)}")
    tiled = cond.unsqueeze(0).expand(windows.shape[0], -1, -1)
    out = module(windows, tiled)
    vol = reverse_batch(out, win.extent, (1, g.t_len, g.h_p, g.w_p))[0]
    return g.with_tokens(vol.reshape(-1, g.d_model))


class TransformerBlock(nn.Module):
    """Pre-norm block: windowed self-attention, optional cross-attention, MLP.

    Modulation (g1, b1, a1, g2, b2, a2) comes from the AdaLN state owned by
    the parent model; with zero-initialized modulation the block is identity.
    """

    def __init__(
        self,
        d_model: int,
        num_heads: int,
        window_kind: str,
        st_window: tuple[int, int] = (4, 4),
        qk_norm: bool = True,
        cross: bool = True,
    ):
        super().__init__()
        if window_kind not in (SPATIAL, SPATIOTEMPORAL):
            raise ValueError(f"block window kind must be spatial or spatiotemporal, got {window_kind!r}")
        self.window_kind = window_kind
        self.st_window = tuple(st_window)
        self.num_heads = num_heads
        self.qk_norm = qk_norm
        self.ln1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        if qk_norm:
            self.temperature = nn.Parameter(torch.full((num_heads,), math.sqrt(d_model / num_heads)))
        else:
            self.temperature = None
        self.cross_attn = CrossAttention(d_model, num_heads, qk_norm) if cross else None
        self.ln_cross = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6) if cross else None
        self.ln2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(approximate="tanh"),
            nn.Linear(4 * d_model, d_model),
        )

    def window_extent(self, grid: tuple[int, int, int]) -> tuple[int, int, int]:
        t_len, h_p, w_p = grid
        if self.window_kind == SPATIAL:
            return (1, h_p, w_p)
        return (t_len, *self.st_window)

    def self_attention(self, x: torch.Tensor, grid, kind: str, relpos=None) -> torch.Tensor:
        """x: (B, L, d) tokens in raster order over grid."""
        b = x.shape[0]
        t_len, h_p, w_p = grid
        extent = self.window_extent(grid)
        WindowConfig(self.window_kind, extent).validate_for_grid(t_len, h_p, w_p)
        qkv = self.qkv(x).reshape(b, t_len, h_p, w_p, -1)
        windows = partition_batch(qkv, extent)
        q, k, v = windows.chunk(3, dim=-1)
        mask = None
        if self.window_kind == SPATIOTEMPORAL and kind == IMAGE_STACK:
            mask = torch.eye(q.shape[1], dtype=torch.bool, device=q.device)
        bias = relpos.bias_for(extent) if relpos is not None else None
        out = attention(
            q, k, v,
            mask=mask,
            relpos_bias=bias,
            qk_norm=self.qk_norm,
            num_heads=self.num_heads,
            temperature=self.temperature,
        )
        out = self.attn_out(out)
        vol = reverse_batch(out, extent, (b, t_len, h_p, w_p))
        return vol.reshape(b, t_len * h_p * w_p, -1)

    def forward(self, x, grid, kind, mods, relpos=None, cond_tokens=None):
        g1, b1, a1, g2, b2, a2 = mods
        h = self.self_attention(modulate(self.ln1(x), g1, b1), grid, kind, relpos)
        x = x + a1.unsqueeze(1) * h
        if self.cross_attn is not None and cond_tokens is not None:
            b = x.shape[0]
            t_len, h_p, w_p = grid
            extent = (1, h_p, w_p) if self.window_kind == SPATIAL else (t_len, *self.st_window)
            windows = partition_batch(self.ln_cross(x).reshape(b, t_len, h_p, w_p, -1), extent)
            per_sample = windows.shape[0] // b
            tiled = cond_tokens.repeat_interleave(per_sample, dim=0)
            out = self.cross_attn(windows, tiled)
            x = x + reverse_batch(out, extent, (b, t_len, h_p, w_p)).reshape(b, -1, x.shape[-1])
        h = self.mlp(modulate(self.ln2(x), g2, b2))
        return x + a2.unsqueeze(1) * h


def spatiotemporal_layer(
    g: TokenGrid,
    kind_flag: str,
    block: TransformerBlock,
    relpos: Optional[RelativePositionBias3d] = None,
    mods=None,
    cond_tokens: Optional[torch.Tensor] = None,
) -> TokenGrid:
    """Run one block over a single grid; kind_flag switches the image identity mask."""
    x = g.tokens.unsqueeze(0)
    if mods is None:
        mods = _neutral_mods(x)
    cond = cond_tokens.unsqueeze(0) if cond_tokens is not None else None
    out = block(x, (g.t_len, g.h_p, g.w_p), kind_flag, mods, relpos=relpos, cond_tokens=cond)
    return g.with_tokens(out[0])


def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs.to(t.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(emb.shape[0], 1)], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model)
        )
        self.d_model = d_model

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.d_model)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


@dataclass
class DenoiserConfig:
    d_model: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    patch_size: int = 1
    latent_channels: int = 8
    t_len: int = 5          # token-grid frames the model is built for
    h_p: int = 8
    w_p: int = 8
    st_window: tuple[int, int] = (4, 4)
    qk_norm: bool = True
    adaln_mode: str = "lora"
    adaln_rank: int = 2
    joint_mode: bool = True  # cross-attention only in spatial blocks
    num_classes: int = 8
    self_cond: bool = True
    fp_cond: bool = True
    lr_cond: bool = False    # low-res conditioning channels (upsampler stage)
    t_sr_cond: bool = False  # extra noise-level embedding (upsampler stage)
    max_timesteps: int = 1000

    def __post_init__(self):
        if self.num_blocks % 2 or self.num_blocks < 2:
            raise ValueError(f"num_blocks must be even and >= 2, got {self.num_blocks}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        self.st_window = tuple(self.st_window)
        if self.h_p % self.st_window[0] or self.w_p % self.st_window[1]:
            raise ValueError(
                f"spatiotemporal window {self.st_window} does not divide grid {(self.h_p, self.w_p)}"
            )

    @property
    def in_channels(self) -> int:
        c = self.latent_channels
        total = c
        if self.self_cond:
            total += c
        if self.fp_cond:
            total += c + 1
        if self.lr_cond:
            total += c
        return total

    @property
    def null_class(self) -> int:
        return self.num_classes


@dataclass
class ConditioningBundle:
    """Raw conditioning signals; the model owns the tables that embed them."""

    t: int
    class_id: Optional[int] = None
    cfg_null: bool = False
    self_cond: Optional[torch.Tensor] = None   # latent-shaped x0 estimate
    fp: Optional[torch.Tensor] = None          # (frames, h, w, c+1) masked past + mask
    lr_cond: Optional[torch.Tensor] = None     # upsampled low-res latent
    t_sr: Optional[int] = None


class Denoiser(nn.Module):
    """v-prediction transformer over patchified latents."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        p = cfg.patch_size
        self.patch_proj = nn.Linear(p * p * cfg.in_channels, d)
        self.pos = PositionTables(cfg.h_p, cfg.w_p, cfg.t_len, d)
        self.t_embed = TimestepEmbedder(d)
        self.t_sr_embed = TimestepEmbedder(d) if cfg.t_sr_cond else None
        self.class_table = nn.Embedding(cfg.num_classes + 1, d)
        nn.init.normal_(self.class_table.weight, std=0.02)
        self.adaln = AdaLnLoraState(d, cfg.num_blocks, cfg.adaln_rank, cfg.adaln_mode)
        self.relpos_sw = RelativePositionBias3d((1, cfg.h_p, cfg.w_p), cfg.num_heads)
        self.relpos_st = RelativePositionBias3d((cfg.t_len, *cfg.st_window), cfg.num_heads)
        blocks = []
        for i in range(cfg.num_blocks):
            kind = SPATIAL if i % 2 == 0 else SPATIOTEMPORAL
            cross = True if not cfg.joint_mode else kind == SPATIAL
            blocks.append(
                TransformerBlock(
                    d, cfg.num_heads, kind,
                    st_window=cfg.st_window, qk_norm=cfg.qk_norm, cross=cross,
                )
            )
        self.blocks = nn.ModuleList(blocks)
        self.ln_f = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.head = nn.Linear(d, p * p * cfg.latent_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _relpos(self, block: TransformerBlock) -> RelativePositionBias3d:
        return self.relpos_sw if block.window_kind == SPATIAL else self.relpos_st

    def assemble_input(self, z_t, self_cond=None, fp=None, lr_cond=None) -> torch.Tensor:
        """Concatenate conditioning channels, substituting zeros where absent."""
        cfg = self.cfg
        c = cfg.latent_channels
        if z_t.shape[-1] != c:
            raise ValueError(f"latent channel axis: expected {c}, got {z_t.shape[-1]}")
        parts = [z_t]
        if cfg.self_cond:
            parts.append(torch.zeros_like(z_t) if self_cond is None else self_cond)
        if cfg.fp_cond:
            if fp is None:
                fp = z_t.new_zeros(*z_t.shape[:-1], c + 1)
            elif fp.shape[-1] != c + 1:
                raise ValueError(f"frame-prediction channels must be c+1={c + 1}, got {fp.shape[-1]}")
            parts.append(fp)
        if cfg.lr_cond:
            parts.append(torch.zeros_like(z_t) if lr_cond is None else lr_cond)
        x = torch.cat(parts, dim=-1)
        if x.shape[-1] != cfg.in_channels:
            raise ValueError(f"assembled {x.shape[-1]} channels, model expects {cfg.in_channels}")
        return x

    def condition(self, t, class_ids, null_mask=None, t_sr=None):
        """Returns (adaln cond vector (B, d), cross tokens (B, 1, d))."""
        cfg = self.cfg
        if class_ids is None:
            class_ids = torch.full((t.shape[0],), cfg.null_class, dtype=torch.long, device=t.device)
        else:
            class_ids = class_ids.long()
        if null_mask is not None:
            class_ids = torch.where(
                null_mask, torch.full_like(class_ids, cfg.null_class), class_ids
            )
        c_emb = self.class_table(class_ids)
        cond = self.t_embed(t) + c_emb
        if self.t_sr_embed is not None:
            if t_sr is None:
                t_sr = torch.zeros_like(t)
            cond = cond + self.t_sr_embed(t_sr)
        return cond, c_emb.unsqueeze(1)

    def forward(
        self,
        z_t: torch.Tensor,               # (B, F, h, w, c)
        t: torch.Tensor,                 # (B,) integer timesteps
        class_ids: Optional[torch.Tensor] = None,
        kind: str = VIDEO,
        self_cond: Optional[torch.Tensor] = None,
        fp: Optional[torch.Tensor] = None,
        lr_cond: Optional[torch.Tensor] = None,
        t_sr: Optional[torch.Tensor] = None,
        null_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        cfg = self.cfg
        x = self.assemble_input(z_t, self_cond, fp, lr_cond)
        b, f, h, w, _ = x.shape
        p = cfg.patch_size
        grid = (f, h // p, w // p)
        tokens = patchify_batch(x, p, self.patch_proj)
        tokens = self.pos.apply_batch(tokens, grid, kind)
        cond, cross_tokens = self.condition(t, class_ids, null_mask, t_sr)
        for i, block in enumerate(self.blocks):
            mods = self.adaln.params(cond, i + 1)
            tokens = block(
                tokens, grid, kind, mods,
                relpos=self._relpos(block), cond_tokens=cross_tokens,
            )
        return unpatchify_batch(self.ln_f(tokens), grid, p, self.head)


def denoiser_forward(z_t: LatentTensor, bundle: ConditioningBundle, model: Denoiser) -> LatentTensor:
    """Single-sample forward from a conditioning bundle."""
    dev = z_t.data.device
    t = torch.tensor([bundle.t], dtype=torch.long, device=dev)
    class_ids = None
    if bundle.class_id is not None:
        class_ids = torch.tensor([bundle.class_id], dtype=torch.long, device=dev)
    null_mask = torch.tensor([bundle.cfg_null], device=dev)
    t_sr = None
    if bundle.t_sr is not None:
        t_sr = torch.tensor([bundle.t_sr], dtype=torch.long, device=dev)
    out = model(
        z_t.data.unsqueeze(0),
        t,
        class_ids,
        kind=z_t.kind,
        self_cond=None if bundle.self_cond is None else bundle.self_cond.unsqueeze(0),
        fp=None if bundle.fp is None else bundle.fp.unsqueeze(0),
        lr_cond=None if bundle.lr_cond is None else bundle.lr_cond.unsqueeze(0),
        t_sr=t_sr,
        null_mask=null_mask,
    )
    return LatentTensor(out[0], kind=z_t.kind)


@dataclass
class ParamCensus:
    total: int
    adaln_share: int
    mode: str

    def __str__(self):
        return (
            f"total {self.total:,} params; adaln[{self.mode}] share {self.adaln_share:,} "
            f"({self.adaln_share / 1e6:.2f}M)"
        )


def param_count(cfg: DenoiserConfig) -> ParamCensus:
    """Closed-form parameter census; matches the instantiated model exactly."""
    d = cfg.d_model
    n = cfg.num_blocks
    heads = cfg.num_heads
    p = cfg.patch_size
    linear = lambda i, o, bias=True: i * o + (o if bias else 0)

    total = linear(p * p * cfg.in_channels, d)                       # patch projection
    total += cfg.h_p * cfg.w_p * d + cfg.t_len * d                    # position tables
    total += 2 * linear(d, d)                                         # timestep embedder
    if cfg.t_sr_cond:
        total += 2 * linear(d, d)
    total += (cfg.num_classes + 1) * d                                # class table
    total += (2 * cfg.h_p - 1) * (2 * cfg.w_p - 1) * heads            # spatial bias table
    total += (
        (2 * cfg.t_len - 1) * (2 * cfg.st_window[0] - 1) * (2 * cfg.st_window[1] - 1) * heads
    )                                                                 # spatiotemporal bias table
    num_cross = n // 2 if cfg.joint_mode else n
    per_block = linear(d, 3 * d) + linear(d, d)                       # qkv + out
    per_block += linear(d, 4 * d) + linear(4 * d, d)                  # mlp
    if cfg.qk_norm:
        per_block += heads
    cross_block = linear(d, d) + linear(d, 2 * d) + linear(d, d)
    if cfg.qk_norm:
        cross_block += heads
    total += n * per_block + num_cross * cross_block
    if cfg.adaln_mode == "separate":
        adaln_share = n * linear(d, 6 * d)
    else:
        adaln_share = linear(d, 6 * d)
        if cfg.adaln_rank > 0:
            adaln_share += (n - 1) * (
                linear(d, cfg.adaln_rank, bias=False) + linear(cfg.adaln_rank, 6 * d, bias=False)
            )
    total += adaln_share
    total += linear(d, p * p * cfg.latent_channels)                   # output head
    return ParamCensus(total=total, adaln_share=adaln_share, mode=cfg.adaln_mode)


def vit_g_like_config(adaln_mode: str = "separate", rank: int = 2) -> DenoiserConfig:
    """Reference-scale config used by the census: d=1408, 40 blocks, heads 16."""
    return DenoiserConfig(
        d_model=1408,
        num_blocks=40,
        num_heads=16,
        patch_size=1,
        latent_channels=8,
        t_len=5,
        h_p=16,
        w_p=16,
        st_window=(8, 8),
        adaln_mode=adaln_mode,
        adaln_rank=rank,
        num_classes=1000,
    )

"""Latent-to-token plumbing for the denoiser.

Each latent frame is patchified independently (no temporal mixing), giving a
(t_len, h_p, w_p) grid of d_model tokens in frame-major raster order. Position
information enters additively as a learned spatial table plus a learned
temporal table; stacks of independent images all share the temporal embedding
of the first latent frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .codec import IMAGE_STACK, VIDEO, LatentTensor


@dataclass
class TokenGrid:
    """Tokens laid out as (t_len, h_p, w_p), stored flat in raster order."""

    t_len: int
    h_p: int
    w_p: int
    tokens: torch.Tensor  # (t_len * h_p * w_p, d_model)
    patch_size: int = 1
    kind: str = VIDEO

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (count, d_model), got {tuple(self.tokens.shape)}")
        expect = self.t_len * self.h_p * self.w_p
        if self.tokens.shape[0] != expect:
            raise ValueError(
                f"token count {self.tokens.shape[0]} inconsistent with grid "
                f"{self.t_len}x{self.h_p}x{self.w_p} = {expect}"
            )
        if self.kind not in (VIDEO, IMAGE_STACK):
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]

    def as_volume(self) -> torch.Tensor:
        return self.tokens.reshape(self.t_len, self.h_p, self.w_p, self.d_model)

    def with_tokens(self, tokens: torch.Tensor) -> "TokenGrid":
        return TokenGrid(self.t_len, self.h_p, self.w_p, tokens, self.patch_size, self.kind)


def patchify_batch(x: torch.Tensor, p: int, proj: nn.Linear) -> torch.Tensor:
    """(B, T, h, w, C) -> (B, T*(h/p)*(w/p), d_model). Frames stay separate."""
    if x.shape[2] % p != 0 or x.shape[3] % p != 0:
        raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by patch size {p}")
    flat = rearrange(x, "b t (hp p1) (wp p2) c -> b (t hp wp) (p1 p2 c)", p1=p, p2=p)
    if flat.shape[-1] != proj.in_features:
        raise ValueError(
            f"patch projection expects {proj.in_features} features, got {flat.shape[-1]} "
            f"(patch {p}x{p}, {x.shape[-1]} channels)"
        )
    return proj(flat)


def unpatchify_batch(tokens: torch.Tensor, grid: tuple[int, int, int], p: int, proj_out: nn.Linear) -> torch.Tensor:
    """(B, L, d_model) -> (B, T, h, w, C) given the (T, h_p, w_p) grid."""
    t_len, h_p, w_p = grid
    if tokens.shape[1] != t_len * h_p * w_p:
        raise ValueError(
            f"token count {tokens.shape[1]} inconsistent with grid {t_len}x{h_p}x{w_p}"
        )
    flat = proj_out(tokens)
    if flat.shape[-1] % (p * p) != 0:
        raise ValueError(f"projection width {flat.shape[-1]} not divisible by patch area {p * p}")
    return rearrange(
        flat, "b (t hp wp) (p1 p2 c) -> b t (hp p1) (wp p2) c", t=t_len, hp=h_p, wp=w_p, p1=p, p2=p
    )


def patchify(z: LatentTensor, p: int, proj: nn.Linear) -> TokenGrid:
    tokens = patchify_batch(z.data.unsqueeze(0), p, proj)[0]
    return TokenGrid(
        t_len=z.data.shape[0],
        h_p=z.data.shape[1] // p,
        w_p=z.data.shape[2] // p,
        tokens=tokens,
        patch_size=p,
        kind=z.kind,
    )


def unpatchify(g: TokenGrid, proj_out: nn.Linear) -> LatentTensor:
    vol = unpatchify_batch(g.tokens.unsqueeze(0), (g.t_len, g.h_p, g.w_p), g.patch_size, proj_out)[0]
    return LatentTensor(vol, kind=g.kind)


def add_position_embeddings(g: TokenGrid, space_table: torch.Tensor, time_table: torch.Tensor) -> TokenGrid:
    """token(tau, i, j) += space[i, j] + time[tau]; image stacks all use time[0]."""
    if space_table.ndim != 3 or space_table.shape[0] != g.h_p or space_table.shape[1] != g.w_p:
        raise ValueError(
            f"space table {tuple(space_table.shape[:2])} does not match grid {(g.h_p, g.w_p)}"
        )
    if time_table.ndim != 2 or time_table.shape[0] < g.t_len:
        raise ValueError(
            f"time table of length {time_table.shape[0]} too small for t_len {g.t_len}"
        )
    vol = g.as_volume()
    if g.kind == IMAGE_STACK:
        time = time_table[0].expand(g.t_len, -1)
    else:
        time = time_table[: g.t_len]
    vol = vol + space_table.unsqueeze(0) + time[:, None, None, :]
    return g.with_tokens(vol.reshape(-1, g.d_model))


def interpolate_position_embeddings(space_table: torch.Tensor, new_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize an (h, w, d) spatial table to (h', w', d).

    Corners align, so a same-size request is the identity and corner vectors
    survive any resize.
    """
    h_new, w_new = new_hw
    if h_new < 1 or w_new < 1:
        raise ValueError(f"target grid must be at least 1x1, got {new_hw}")
    h, w, d = space_table.shape
    if (h, w) == (h_new, w_new):
        return space_table
    grid = space_table.permute(2, 0, 1).unsqueeze(0)  # (1, d, h, w)
    resized = F.interpolate(grid, size=(h_new, w_new), mode="bilinear", align_corners=True)
    return resized.squeeze(0).permute(1, 2, 0).contiguous()


class PositionTables(nn.Module):
    """Learned additive position state for the token grid."""

    def __init__(self, h_p: int, w_p: int, t_max: int, d_model: int):
        super().__init__()
        self.space = nn.Parameter(torch.empty(h_p, w_p, d_model))
        self.time = nn.Parameter(torch.empty(t_max, d_model))
        nn.init.normal_(self.space, std=0.02)
        nn.init.normal_(self.time, std=0.02)

    def apply_batch(self, x: torch.Tensor, grid: tuple[int, int, int], kind: str) -> torch.Tensor:
        """x: (B, L, d) in raster order over grid (t_len, h_p, w_p)."""
        t_len, h_p, w_p = grid
        if self.space.shape[0] != h_p or self.space.shape[1] != w_p:
            raise ValueError(
                f"space table {tuple(self.space.shape[:2])} does not match grid {(h_p, w_p)}"
            )
        if self.time.shape[0] < t_len:
            raise ValueError(f"time table of length {self.time.shape[0]} too small for t_len {t_len}")
        if kind == IMAGE_STACK:
            time = self.time[0].expand(t_len, -1)
        else:
            time = self.time[:t_len]
        pos = (self.space.unsqueeze(0) + time[:, None, None, :]).reshape(1, -1, x.shape[-1])
        return x + pos

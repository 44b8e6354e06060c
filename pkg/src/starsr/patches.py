"""Token codec: 3D patch unfolding of feature maps, the exact inverse fold,
sinusoidal 3D positional encoding, and pixel-shuffle upsampling.

All operations are compositions of reshape/transpose/matmul tensor ops, so
they are differentiable and the fold/unfold and shuffle/unshuffle pairs are
bit-exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Geometry needed to fold a token sequence back into maps."""
    t: int
    h: int
    w: int
    patch: tuple  # (p_t, p_h, p_w)
    channels: int

    @property
    def n(self) -> int:
        return self.t * self.h * self.w

    @property
    def token_dim(self) -> int:
        pt, ph, pw = self.patch
        return self.channels * pt * ph * pw


@dataclass
class TokenSequence:
    """(N, D) tokens plus the grid geometry; `projected` records whether D is
    the raw patch dim or the model width."""
    tokens: Tensor
    grid: PatchGrid
    projected: bool = False


def unfold3d(x: Tensor, patch: tuple) -> TokenSequence:
    """Split (T, C, H, W) into non-overlapping 3D patches, one token each.

    Token order is row-major over (t, h, w) patch indices; each token is the
    flattened (C, p_t, p_h, p_w) patch.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"unfold3d: need (T, C, H, W), got {x.shape}")
    T, C, H, W = x.shape
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ShapeError(f"unfold3d: extents {(T, H, W)} not divisible by patch {patch}")
    gt, gh, gw = T // pt, H // ph, W // pw
    r = tn.reshape(x, (gt, pt, C, gh, ph, gw, pw))
    r = tn.transpose(r, (0, 3, 5, 2, 1, 4, 6))  # (gt, gh, gw, C, pt, ph, pw)
    tokens = tn.reshape(r, (gt * gh * gw, C * pt * ph * pw))
    return TokenSequence(tokens, PatchGrid(gt, gh, gw, (pt, ph, pw), C))


def fold3d(seq: TokenSequence) -> Tensor:
    """Exact inverse of unfold3d."""
    g = seq.grid
    pt, ph, pw = g.patch
    if seq.tokens.shape != (g.n, g.token_dim):
        raise ShapeError(f"fold3d: tokens {seq.tokens.shape} do not match grid "
                         f"({g.n}, {g.token_dim})")
    r = tn.reshape(seq.tokens, (g.t, g.h, g.w, g.channels, pt, ph, pw))
    r = tn.transpose(r, (0, 4, 3, 1, 5, 2, 6))  # (gt, pt, C, gh, ph, gw, pw)
    return tn.reshape(r, (g.t * pt, g.channels, g.h * ph, g.w * pw))


def unfold3d_batch(x: Tensor, patch: tuple) -> tuple[Tensor, PatchGrid]:
    """(B, T, C, H, W) -> (B, N, C*p_t*p_h*p_w) with the shared grid."""
    if x.data.ndim != 5:
        raise ShapeError(f"unfold3d_batch: need (B, T, C, H, W), got {x.shape}")
    B, T, C, H, W = x.shape
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ShapeError(f"unfold3d_batch: extents not divisible by patch {patch}")
    gt, gh, gw = T // pt, H // ph, W // pw
    r = tn.reshape(x, (B, gt, pt, C, gh, ph, gw, pw))
    r = tn.transpose(r, (0, 1, 4, 6, 3, 2, 5, 7))
    tokens = tn.reshape(r, (B, gt * gh * gw, C * pt * ph * pw))
    return tokens, PatchGrid(gt, gh, gw, (pt, ph, pw), C)


def fold3d_batch(tokens: Tensor, grid: PatchGrid) -> Tensor:
    B = tokens.shape[0]
    g = grid
    pt, ph, pw = g.patch
    r = tn.reshape(tokens, (B, g.t, g.h, g.w, g.channels, pt, ph, pw))
    r = tn.transpose(r, (0, 1, 5, 4, 2, 6, 3, 7))
    return tn.reshape(r, (B, g.t * pt, g.channels, g.h * ph, g.w * pw))


# -- positional encoding ------------------------------------------------------

def sinusoidal_pe(length: int, d_pe: int, dtype=np.float32) -> np.ndarray:
    """pe[pos, 2i] = sin(pos / 10000^(2i/d_pe)), pe[pos, 2i+1] = cos(same)."""
    if d_pe % 2:
        raise ShapeError(f"sinusoidal_pe: d_pe must be even, got {d_pe}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_pe, 2, dtype=np.float64)[None, :]
    arg = pos / np.power(10000.0, i2 / d_pe)
    pe = np.empty((length, d_pe), dtype=np.float64)
    pe[:, 0::2] = np.sin(arg)
    pe[:, 1::2] = np.cos(arg)
    return pe.astype(dtype)


def pe_concat_table(grid: PatchGrid, d_pe: int, dtype=np.float32) -> np.ndarray:
    """Constant (N, 3*d_pe) table: concat(PE_t(t), PE_w(w), PE_h(h)) per token,
    in token row-major (t, h, w) order."""
    pet = sinusoidal_pe(grid.t, d_pe, dtype)
    peh = sinusoidal_pe(grid.h, d_pe, dtype)
    pew = sinusoidal_pe(grid.w, d_pe, dtype)
    rows = np.empty((grid.n, 3 * d_pe), dtype=dtype)
    i = 0
    for t in range(grid.t):
        for h in range(grid.h):
            for w in range(grid.w):
                rows[i] = np.concatenate([pet[t], pew[w], peh[h]])
                i += 1
    return rows


class PositionalTable:
    """Learnable projection of the concatenated per-axis encodings to model
    width; the resulting (N, D) table is added to projected tokens."""

    def __init__(self, grid: PatchGrid, d_pe: int, width: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.grid = grid
        self.d_pe = d_pe
        self.width = width
        self.concat = Tensor(pe_concat_table(grid, d_pe, dtype))
        scale = 1.0 / np.sqrt(3 * d_pe)
        self.w_pos = tn.parameter(
            rng.normal(0.0, scale, (3 * d_pe, width)), dtype=dtype)

    def table(self) -> Tensor:
        return tn.matmul(self.concat, self.w_pos)

    def params(self) -> list[Tensor]:
        return [self.w_pos]


def encode_positions(tokens: Tensor, table: PositionalTable) -> Tensor:
    """tokens + PE_3D; tokens must already be at model width."""
    if tokens.data.ndim == 2:
        if tokens.shape != (table.grid.n, table.width):
            raise ShapeError(f"encode_positions: tokens {tokens.shape} vs table "
                             f"({table.grid.n}, {table.width})")
        return tn.add(tokens, table.table())
    if tokens.data.ndim == 3:
        B, N, D = tokens.shape
        if (N, D) != (table.grid.n, table.width):
            raise ShapeError(f"encode_positions: tokens {tokens.shape} vs table "
                             f"({table.grid.n}, {table.width})")
        flat = tn.reshape(tokens, (B * N, D))
        pe = table.table()
        tiled = tn.concat([pe] * B, axis=0)
        return tn.reshape(tn.add(flat, tiled), (B, N, D))
    raise ShapeError(f"encode_positions: need (N, D) or (B, N, D), got {tokens.shape}")


# -- pixel shuffle -------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r^2, H, W) -> (B, C, r*H, r*W) with channel-major sub-pixel order:
    out[b, c, r*h+dy, r*w+dx] = in[b, c*r^2 + dy*r + dx, h, w]."""
    if x.data.ndim != 4:
        raise ShapeError(f"pixel_shuffle: need 4-d input, got {x.shape}")
    B, C2, H, W = x.shape
    if C2 % (r * r):
        raise ShapeError(f"pixel_shuffle: {C2} channels not divisible by r^2={r * r}")
    C = C2 // (r * r)
    s = tn.reshape(x, (B, C, r, r, H, W))
    s = tn.transpose(s, (0, 1, 4, 2, 5, 3))  # (B, C, H, dy, W, dx)
    return tn.reshape(s, (B, C, r * H, r * W))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of pixel_shuffle with the same ordering."""
    if x.data.ndim != 4:
        raise ShapeError(f"pixel_unshuffle: need 4-d input, got {x.shape}")
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError(f"pixel_unshuffle: extents {(Hr, Wr)} not divisible by {r}")
    H, W = Hr // r, Wr // r
    s = tn.reshape(x, (B, C, H, r, W, r))
    s = tn.transpose(s, (0, 1, 3, 5, 2, 4))  # (B, C, dy, dx, H, W)
    return tn.reshape(s, (B, C * r * r, H, W))

"""Linear spatial-temporal attention with a shifted-and-clipped leaky
feature map.

The similarity between a query and a key is phi(q) . phi(k) with phi >= 0,
so attention can be computed two ways:

  naive   O(N^2): materialize all pairwise similarities, normalize per query;
  linear  O(N):   accumulate the global key statistics kv = sum phi(K_j)^T V_j
                  and ksum = sum phi(K_j)^T once, then reuse them for every
                  query.

The two are the same sum in a different association order, so the naive form
doubles as the verification oracle for the linear one. Both share the same
epsilon in the denominator (phi can be exactly zero on its clipped branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .patches import PatchGrid
from .tensor import ShapeError, Tensor, wrap_op

EPS = 1e-6

DELTA = 1.0  # fixed offset of the feature map


def sc_leaky_relu(x: Tensor, alpha: Tensor, delta: float = DELTA) -> Tensor:
    """Shifted and clipped leaky map:

        x + delta        if x > 0
        alpha*x + delta  if -1/alpha <= x <= 0
        0                if x < -1/alpha

    Backward slopes are 1 / alpha / 0 per branch (x = 0 counts as the middle
    branch); d/d alpha accumulates x over the middle branch only.
    """
    if alpha.data.size != 1:
        raise ShapeError(f"sc_leaky_relu: alpha must be scalar, got {alpha.shape}")
    a = float(alpha.data.reshape(()))
    if a <= 0:
        raise ValueError(f"sc_leaky_relu: truncation rate must be positive, got {a}")
    xd = x.data
    one = x.dtype.type(1)
    pos = xd > 0
    mid = ~pos & (xd >= -1.0 / a)
    out = np.where(pos, xd + x.dtype.type(delta),
                   np.where(mid, x.dtype.type(a) * xd + x.dtype.type(delta),
                            x.dtype.type(0)))

    def bwd(g):
        dx = g * np.where(pos, one, np.where(mid, x.dtype.type(a), x.dtype.type(0)))
        dalpha = np.asarray((g * xd * mid).sum(), dtype=alpha.dtype).reshape(alpha.shape)
        return dx, dalpha

    return wrap_op(out.astype(x.dtype, copy=False), [x, alpha], bwd)


class SCLeakyReLU:
    """Feature map with a learnable positive truncation rate.

    alpha is kept positive by learning log(alpha); the exposed parameter is
    the log, initialized at log(0.01).
    """

    def __init__(self, alpha_init: float = 0.01, dtype=np.float32):
        self.log_alpha = tn.parameter(np.log(alpha_init), dtype=dtype)

    def alpha(self) -> Tensor:
        return tn.exp(self.log_alpha)

    def __call__(self, x: Tensor) -> Tensor:
        return sc_leaky_relu(x, self.alpha())

    def params(self) -> list[Tensor]:
        return [self.log_alpha]


def phi_relu(x: Tensor) -> Tensor:
    return tn.relu(x)


def phi_elu1(x: Tensor) -> Tensor:
    # elu(x) + 1: x + 1 above zero, exp(x) at or below zero
    return tn.add(tn.relu(x), tn.exp(tn.mul(tn.relu(tn.mul(x, -1.0)), -1.0)))


def make_phi(kind: str, dtype=np.float32):
    """Returns (callable, params). Only the scleaky map has parameters."""
    if kind == "scleaky":
        phi = SCLeakyReLU(dtype=dtype)
        return phi, phi.params()
    if kind == "relu":
        return phi_relu, []
    if kind == "elu1":
        return phi_elu1, []
    raise ValueError(f"unknown feature map {kind!r}; use scleaky|relu|elu1")


# -- the two attention formulations -------------------------------------------


@dataclass
class GlobalStats:
    """Key-side accumulations shared by every query."""
    kv: Tensor    # (D_h, D_h) = sum_j phi(K_j)^T V_j
    ksum: Tensor  # (D_h,)     = sum_j phi(K_j)


def global_stats(pk: Tensor, v: Tensor) -> GlobalStats:
    return GlobalStats(kv=tn.matmul(tn.transpose(pk, (1, 0)), v),
                       ksum=tn.reduce_sum(pk, axes=(0,)))


def attention_weights_naive(q: Tensor, k: Tensor, phi, eps: float = EPS) -> Tensor:
    """(N, N) row-normalized similarity matrix of the naive formulation."""
    sim = tn.matmul(phi(q), tn.transpose(phi(k), (1, 0)))
    denom = tn.add(tn.reduce_sum(sim, axes=(1,)), eps)
    recip = tn.div(tn.ones((sim.shape[0],), dtype=sim.dtype), denom)
    return tn.scale_rows(sim, recip)


def attention_naive(q: Tensor, k: Tensor, v: Tensor, phi,
                    eps: float = EPS) -> Tensor:
    """O(N^2) reference: exact per-query normalized weighted sum."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention_naive: q{q.shape} k{k.shape} v{v.shape}")
    return tn.matmul(attention_weights_naive(q, k, phi, eps), v)


def attention_linear(q: Tensor, k: Tensor, v: Tensor, phi,
                     eps: float = EPS) -> Tensor:
    """O(N) formulation reusing GlobalStats across all queries."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention_linear: q{q.shape} k{k.shape} v{v.shape}")
    pq = phi(q)
    stats = global_stats(phi(k), v)
    num = tn.matmul(pq, stats.kv)
    den = tn.matmul(pq, tn.reshape(stats.ksum, (stats.ksum.shape[0], 1)))
    den = tn.add(tn.reshape(den, (den.shape[0],)), eps)
    recip = tn.div(tn.ones((num.shape[0],), dtype=num.dtype), den)
    return tn.scale_rows(num, recip)


def attention_linear_stacked(pq: Tensor, pk: Tensor, v: Tensor,
                             eps: float = EPS) -> Tensor:
    """Linear attention over stacked (S, N, D_h) tensors (S = batch*heads);
    feature maps are applied by the caller."""
    S, N, Dh = pq.shape
    kv = tn.bmm(tn.transpose(pk, (0, 2, 1)), v)          # (S, Dh, Dh)
    ksum = tn.reduce_sum(pk, axes=(1,))                  # (S, Dh)
    num = tn.bmm(pq, kv)                                 # (S, N, Dh)
    den = tn.bmm(pq, tn.reshape(ksum, (S, Dh, 1)))       # (S, N, 1)
    den = tn.add(tn.reshape(den, (S * N,)), eps)
    recip = tn.div(tn.ones((S * N,), dtype=num.dtype), den)
    out = tn.scale_rows(tn.reshape(num, (S * N, Dh)), recip)
    return tn.reshape(out, (S, N, Dh))


# -- multi-scale token groups ---------------------------------------------------


def identity_depthwise_kernel(channels: int, k: int, dtype=np.float32) -> np.ndarray:
    w = np.zeros((channels, 1, k, k), dtype=dtype)
    w[:, 0, k // 2, k // 2] = 1.0
    return w


def tokens_to_grid_maps(tokens: Tensor, grid: PatchGrid) -> Tensor:
    """(B, N, D) -> (B*T_p, D, H_p, W_p): one D-channel pixel per token."""
    B, N, D = tokens.shape
    if N != grid.n:
        raise ShapeError(f"tokens_to_grid_maps: {N} tokens vs grid {grid.n}")
    r = tn.reshape(tokens, (B, grid.t, grid.h, grid.w, D))
    r = tn.transpose(r, (0, 1, 4, 2, 3))
    return tn.reshape(r, (B * grid.t, D, grid.h, grid.w))


def grid_maps_to_tokens(maps: Tensor, grid: PatchGrid, batch: int) -> Tensor:
    D = maps.shape[1]
    r = tn.reshape(maps, (batch, grid.t, D, grid.h, grid.w))
    r = tn.transpose(r, (0, 1, 3, 4, 2))
    return tn.reshape(r, (batch, grid.n, D))


def multiscale_groups(tokens: Tensor, grid: PatchGrid, k3: Tensor,
                      k5: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Three parallel token groups: the original tokens plus versions passed
    through 3x3 and 5x5 depthwise convolutions on the per-frame token grid."""
    squeeze = tokens.data.ndim == 2
    if squeeze:
        tokens = tn.reshape(tokens, (1,) + tokens.shape)
    B = tokens.shape[0]
    maps = tokens_to_grid_maps(tokens, grid)
    g3 = grid_maps_to_tokens(tn.conv2d(maps, k3, groups=maps.shape[1]), grid, B)
    g5 = grid_maps_to_tokens(tn.conv2d(maps, k5, groups=maps.shape[1]), grid, B)
    if squeeze:
        n, d = grid.n, tokens.shape[2]
        return (tn.reshape(tokens, (n, d)), tn.reshape(g3, (n, d)),
                tn.reshape(g5, (n, d)))
    return tokens, g3, g5


def split_heads_over_groups(heads: int) -> tuple[int, int, int]:
    """Closest-to-even split of heads over (identity, 3x3, 5x5) groups."""
    base, rem = divmod(heads, 3)
    return tuple(base + (1 if i < rem else 0) for i in range(3))


# -- transformer block ------------------------------------------------------------


def _split_to_heads(x: Tensor, batch: int, n: int, heads: int, dh: int) -> Tensor:
    r = tn.reshape(x, (batch, n, heads, dh))
    r = tn.transpose(r, (0, 2, 1, 3))
    return tn.reshape(r, (batch * heads, n, dh))


def _merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    s, n, dh = x.shape
    r = tn.reshape(x, (batch, heads, n, dh))
    r = tn.transpose(r, (0, 2, 1, 3))
    return tn.reshape(r, (batch, n, heads * dh))


class TransformerBlock:
    """Pre-norm block: LN -> multi-head linear attention over three token
    groups (heads split closest-to-even) -> residual -> LN -> 2-layer MLP
    with slope-0.1 leaky activation -> residual."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 phi_kind: str = "scleaky", mlp_ratio: int = 4,
                 dtype=np.float32):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.group_heads = split_heads_over_groups(heads)
        self.phi, self.phi_params = make_phi(phi_kind, dtype=dtype)

        def lin(fan_in, fan_out):
            return tn.parameter(rng.normal(0.0, fan_in ** -0.5, (fan_in, fan_out)),
                                dtype=dtype)

        self.wq = [lin(width, hg * self.head_dim) if hg else None
                   for hg in self.group_heads]
        self.wk = [lin(width, hg * self.head_dim) if hg else None
                   for hg in self.group_heads]
        self.wv = [lin(width, hg * self.head_dim) if hg else None
                   for hg in self.group_heads]
        self.wo = lin(width, width)
        hidden = mlp_ratio * width
        self.w1 = lin(width, hidden)
        self.b1 = tn.parameter(np.zeros(hidden), dtype=dtype)
        self.w2 = lin(hidden, width)
        self.b2 = tn.parameter(np.zeros(width), dtype=dtype)
        self.ln1_g = tn.parameter(np.ones(width), dtype=dtype)
        self.ln1_b = tn.parameter(np.zeros(width), dtype=dtype)
        self.ln2_g = tn.parameter(np.ones(width), dtype=dtype)
        self.ln2_b = tn.parameter(np.zeros(width), dtype=dtype)
        self.k3 = tn.parameter(identity_depthwise_kernel(width, 3), dtype=dtype)
        self.k5 = tn.parameter(identity_depthwise_kernel(width, 5), dtype=dtype)

    def params(self) -> list[Tensor]:
        out = list(self.phi_params)
        for ws in (self.wq, self.wk, self.wv):
            out.extend(w for w in ws if w is not None)
        out += [self.wo, self.w1, self.b1, self.w2, self.b2,
                self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b, self.k3, self.k5]
        return out

    def __call__(self, tokens: Tensor, grid: PatchGrid) -> Tensor:
        squeeze = tokens.data.ndim == 2
        if squeeze:
            tokens = tn.reshape(tokens, (1,) + tokens.shape)
        B, N, D = tokens.shape
        if D != self.width:
            raise ShapeError(f"block width {self.width} vs tokens {D}")

        flat = tn.reshape(tokens, (B * N, D))
        normed = tn.reshape(tn.layer_norm(flat, self.ln1_g, self.ln1_b), (B, N, D))
        groups = multiscale_groups(normed, grid, self.k3, self.k5)

        head_outs = []
        for gi, hg in enumerate(self.group_heads):
            if hg == 0:
                continue
            src = tn.reshape(groups[gi], (B * N, D))
            q = _split_to_heads(tn.matmul(src, self.wq[gi]), B, N, hg, self.head_dim)
            k = _split_to_heads(tn.matmul(src, self.wk[gi]), B, N, hg, self.head_dim)
            v = _split_to_heads(tn.matmul(src, self.wv[gi]), B, N, hg, self.head_dim)
            out = attention_linear_stacked(self.phi(q), self.phi(k), v)
            head_outs.append(_merge_heads(out, B, hg))
        attn = tn.concat(head_outs, axis=2) if len(head_outs) > 1 else head_outs[0]
        attn = tn.reshape(tn.matmul(tn.reshape(attn, (B * N, D)), self.wo), (B, N, D))
        x = tn.add(tokens, attn)

        flat = tn.reshape(x, (B * N, D))
        normed = tn.layer_norm(flat, self.ln2_g, self.ln2_b)
        h = tn.leaky_relu(tn.add_rowvec(tn.matmul(normed, self.w1), self.b1), 0.1)
        m = tn.add_rowvec(tn.matmul(h, self.w2), self.b2)
        out = tn.add(x, tn.reshape(m, (B, N, D)))
        return tn.reshape(out, (N, D)) if squeeze else out

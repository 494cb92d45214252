"""Invariant point attention with a token-level key/value/distance cache.

Attention logits combine a scalar query-key term with a negative-weighted
squared-distance kernel between per-token 3D points. Points are produced in
each residue's local frame and mapped to global coordinates by that frame;
value points are read back into the query's local frame, which makes the
layer output invariant to any global rigid motion of the frames.

The cache stores per-token keys, values, global points and the summed
point-distance matrix. Stale tokens (latent displacement below threshold)
reuse cached state; only the rows/columns of active tokens are recomputed,
which is the 2aL - a^2 pairwise accounting the counters track.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import CacheInvalid, ShapeMismatch

FLOAT_BYTES = 8  # package-wide float64 tensors


@dataclass
class IPAConfig:
    n_heads: int = 4
    d_head: int = 16
    n_query_points: int = 4
    n_value_points: int = 4
    epsilon_cache: float = 0.05  # default latent-displacement threshold

    def __post_init__(self):
        if min(self.n_heads, self.d_head, self.n_query_points, self.n_value_points) <= 0:
            raise ShapeMismatch("IPA dimensions must be positive")
        if self.epsilon_cache < 0:
            raise ShapeMismatch("epsilon_cache must be >= 0")


@dataclass
class ActivityMask:
    """Binary per-token activity vector and its active fraction."""

    bits: torch.Tensor  # bool, (L,)
    rho: float

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())


def compute_mask(z_curr: torch.Tensor, z_prev: torch.Tensor | None, eps: float) -> ActivityMask:
    """Active iff the token's latent moved more than eps since the previous
    step; with no previous latents every token is active (first step)."""
    if z_prev is None:
        bits = torch.ones(z_curr.shape[0], dtype=torch.bool)
        return ActivityMask(bits=bits, rho=1.0)
    if z_curr.shape != z_prev.shape:
        raise ShapeMismatch(f"latent shapes differ: {tuple(z_curr.shape)} vs {tuple(z_prev.shape)}")
    disp = torch.linalg.vector_norm(z_curr - z_prev, dim=-1)
    bits = disp > eps
    return ActivityMask(bits=bits, rho=float(bits.sum()) / bits.numel())


@dataclass
class OpCounter:
    """Recomputation accounting for one attention call."""

    pair_updates: int
    projection_ops: int
    full_pair_budget: int
    bytes_touched: int


def count_report(counter: OpCounter, mask: ActivityMask) -> dict:
    """Pair-update bookkeeping against the 2*a*L - a^2 partial-update count."""
    L = int(math.isqrt(counter.full_pair_budget))
    a = mask.active_count
    return {
        "rho": mask.rho,
        "pair_updates": counter.pair_updates,
        "theoretical": 2 * a * L - a * a,
    }


@dataclass
class IPACache:
    """Cached per-layer attention state owned by a single trajectory."""

    keys: torch.Tensor  # (L, H, d_head)
    values: torch.Tensor  # (L, H, d_head)
    points: torch.Tensor  # (L, H, Pq, 3), global coordinates
    value_points: torch.Tensor  # (L, H, Pv, 3), global coordinates
    dist: torch.Tensor  # (L, L) summed squared point distances
    prev_latents: torch.Tensor  # (L, d) layer input at cache time
    prev_output: torch.Tensor  # (L, d)
    valid: bool = True

    def check(self) -> None:
        if not self.valid:
            raise CacheInvalid("cache marked invalid")
        if torch.abs(self.dist - self.dist.T).max() > 1e-9:
            raise CacheInvalid("cached distance matrix is not symmetric")


class IPALayer(nn.Module):
    """One invariant point attention layer (float64)."""

    def __init__(self, d_model: int, cfg: IPAConfig):
        super().__init__()
        self.cfg = cfg
        self.d_model = d_model
        H, dh, Pq, Pv = cfg.n_heads, cfg.d_head, cfg.n_query_points, cfg.n_value_points
        self.to_q = nn.Linear(d_model, H * dh, bias=False)
        self.to_k = nn.Linear(d_model, H * dh, bias=False)
        self.to_v = nn.Linear(d_model, H * dh, bias=False)
        # one point projection shared by the query and key side keeps the
        # cached distance matrix symmetric
        self.to_points = nn.Linear(d_model, H * Pq * 3, bias=False)
        self.to_value_points = nn.Linear(d_model, H * Pv * 3, bias=False)
        self.head_weight = nn.Parameter(torch.zeros(H))  # softplus-ed distance weight
        self.out = nn.Linear(H * dh + H * Pv * 3, d_model)
        # scale of the distance kernel; set to 0 to fall back to plain MHSA
        self.register_buffer("point_weight_scale", torch.tensor(1.0))
        self.double()

    # -- projections ---------------------------------------------------------

    def _scalar_qkv(self, h):
        H, dh = self.cfg.n_heads, self.cfg.d_head
        shape = h.shape[:-1] + (H, dh)
        return (
            self.to_q(h).reshape(shape),
            self.to_k(h).reshape(shape),
            self.to_v(h).reshape(shape),
        )

    def _global_points(self, h, rot, trans):
        """Local point projections mapped through each residue's frame."""
        H, Pq, Pv = self.cfg.n_heads, self.cfg.n_query_points, self.cfg.n_value_points
        pts = self.to_points(h).reshape(h.shape[:-1] + (H, Pq, 3))
        vpts = self.to_value_points(h).reshape(h.shape[:-1] + (H, Pv, 3))
        pts_g = torch.einsum("...ij,...hpj->...hpi", rot, pts) + trans[..., None, None, :]
        vpts_g = torch.einsum("...ij,...hpj->...hpi", rot, vpts) + trans[..., None, None, :]
        return pts_g, vpts_g

    @staticmethod
    def _pair_dist(points_a, points_b):
        """Summed squared distances over heads and points: (..., La, Lb)."""
        diff = points_a.unsqueeze(-4) - points_b.unsqueeze(-5)  # (..., La, Lb, H, P, 3)
        return diff.square().sum(dim=(-3, -2, -1))

    def _attend(self, q, k, v, vpts_g, dist, rot, trans):
        """Softmax attention from scalar and distance logits, output in local frames."""
        H, dh, Pq, Pv = self.cfg.n_heads, self.cfg.d_head, self.cfg.n_query_points, self.cfg.n_value_points
        coef = torch.nn.functional.softplus(self.head_weight) * self.point_weight_scale
        coef = coef / (2.0 * H * Pq)
        logits = torch.einsum("...ihd,...jhd->...hij", q, k) / math.sqrt(dh)
        logits = logits - coef[:, None, None] * dist.unsqueeze(-3)
        attn = torch.softmax(logits, dim=-1)
        o = torch.einsum("...hij,...jhd->...ihd", attn, v)
        y = torch.einsum("...hij,...jhpc->...ihpc", attn, vpts_g)
        y_local = torch.einsum("...ji,...hpj->...hpi", rot, y - trans[..., None, None, :])
        L = q.shape[-3]
        flat = torch.cat(
            [o.reshape(*o.shape[:-2], H * dh), y_local.reshape(*y_local.shape[:-3], H * Pv * 3)],
            dim=-1,
        )
        return self.out(flat)

    # -- full path ------------------------------------------------------------

    def forward(self, h, rot, trans):
        """Plain full attention; works batched or unbatched."""
        q, k, v = self._scalar_qkv(h)
        pts_g, vpts_g = self._global_points(h, rot, trans)
        dist = self._pair_dist(pts_g, pts_g)
        return self._attend(q, k, v, vpts_g, dist, rot, trans)

    def _bytes_full(self, L: int) -> int:
        H, dh, Pq, Pv = self.cfg.n_heads, self.cfg.d_head, self.cfg.n_query_points, self.cfg.n_value_points
        scalars = 3 * L * H * dh + L * H * (Pq + Pv) * 3 + L * L
        return scalars * FLOAT_BYTES

    def _bytes_partial(self, L: int, a: int) -> int:
        H, dh, Pq, Pv = self.cfg.n_heads, self.cfg.d_head, self.cfg.n_query_points, self.cfg.n_value_points
        scalars = L * H * dh + 2 * a * H * dh + a * H * (Pq + Pv) * 3 + (2 * a * L - a * a)
        return scalars * FLOAT_BYTES


def ipa_full(layer: IPALayer, latents, rot, trans):
    """Full recompute returning (output, fresh cache, counter). Unbatched."""
    if latents.dim() != 2:
        raise ShapeMismatch("ipa_full expects (L, d) latents")
    L = latents.shape[0]
    with torch.no_grad():
        q, k, v = layer._scalar_qkv(latents)
        pts_g, vpts_g = layer._global_points(latents, rot, trans)
        dist = layer._pair_dist(pts_g, pts_g)
        out = layer._attend(q, k, v, vpts_g, dist, rot, trans)
    cache = IPACache(
        keys=k,
        values=v,
        points=pts_g,
        value_points=vpts_g,
        dist=dist,
        prev_latents=latents.clone(),
        prev_output=out.clone(),
    )
    counter = OpCounter(
        pair_updates=L * L,
        projection_ops=L,
        full_pair_budget=L * L,
        bytes_touched=layer._bytes_full(L),
    )
    return out, cache, counter


def ipa_cached(layer: IPALayer, latents, rot, trans, mask: ActivityMask, cache: IPACache | None):
    """Partial recompute: active tokens refresh K/V/points and their distance
    rows/columns, stale tokens keep cached state; queries and the softmax are
    always recomputed from the merged state for every row.

    With an all-active mask this is exactly the full path (and seeds the cache).
    """
    if latents.dim() != 2:
        raise ShapeMismatch("ipa_cached expects (L, d) latents")
    L = latents.shape[0]
    if bool(mask.bits.all()):
        return ipa_full(layer, latents, rot, trans)
    if cache is None:
        raise CacheInvalid("partial mask requires a previously seeded cache")
    cache.check()
    if cache.keys.shape[0] != L:
        raise CacheInvalid("cache length does not match latents")

    active = torch.nonzero(mask.bits, as_tuple=False).squeeze(-1)
    a = int(active.numel())

    with torch.no_grad():
        keys = cache.keys.clone()
        values = cache.values.clone()
        points = cache.points.clone()
        value_points = cache.value_points.clone()
        dist = cache.dist.clone()

        if a > 0:
            h_act = latents[active]
            H, dh = layer.cfg.n_heads, layer.cfg.d_head
            keys[active] = layer.to_k(h_act).reshape(a, H, dh)
            values[active] = layer.to_v(h_act).reshape(a, H, dh)
            pts_a, vpts_a = layer._global_points(h_act, rot[active], trans[active])
            points[active] = pts_a
            value_points[active] = vpts_a
            rows = layer._pair_dist(pts_a, points)  # (a, L)
            dist[active] = rows
            dist[:, active] = rows.T

        q = layer.to_q(latents).reshape(L, layer.cfg.n_heads, layer.cfg.d_head)
        out = layer._attend(q, keys, values, value_points, dist, rot, trans)

    new_cache = IPACache(
        keys=keys,
        values=values,
        points=points,
        value_points=value_points,
        dist=dist,
        prev_latents=latents.clone(),
        prev_output=out.clone(),
    )
    counter = OpCounter(
        pair_updates=2 * a * L - a * a,
        projection_ops=a,
        full_pair_budget=L * L,
        bytes_touched=layer._bytes_partial(L, a),
    )
    return out, new_cache, counter

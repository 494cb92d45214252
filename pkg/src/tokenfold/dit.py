"""Latent diffusion transformer with adaptive layer norm conditioning.

Blocks are multi-head self-attention plus pointwise feed-forward, each
modulated by a scale/shift produced from the summed timestep and class
embeddings. Optional invariant point attention blocks sit after the
transformer stack; during sampling their key/value/distance state can be
partially reused through the token cache (see ipa.py).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, ShapeMismatch
from .ipa import ActivityMask, IPAConfig, IPALayer, OpCounter, ipa_cached, ipa_full

LN_VAR_FLOOR = 1e-5


@dataclass
class DiTConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_classes: int = 3
    T: int = 200
    dropout_prob_condition: float = 0.1
    latent_dim: int = 128
    max_len: int = 512
    n_ipa_layers: int = 1
    use_positional: bool = True
    ipa: IPAConfig = field(default_factory=IPAConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff, self.T, self.latent_dim) <= 0:
            raise ConfigError("all DiT dimensions must be positive")

    @property
    def null_class(self) -> int:
        return self.n_classes


def timestep_embedding(t, T: int, dim: int) -> torch.Tensor:
    """Sinusoidal features of the raw step index (pre-MLP)."""
    t = torch.as_tensor(t, dtype=torch.float64)
    scalar = t.dim() == 0
    t = torch.atleast_1d(t)
    if torch.any(t < 0) or torch.any(t >= T):
        raise ConfigError(f"step outside [0, {T})")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb[0] if scalar else emb


def adaln(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-row layer norm with a variance floor, then scale/shift modulation."""
    if gamma.shape[-1] != h.shape[-1] or beta.shape[-1] != h.shape[-1]:
        raise ShapeMismatch("modulation vectors must match the feature width")
    mean = h.mean(dim=-1, keepdim=True)
    var = h.var(dim=-1, unbiased=False, keepdim=True)
    normed = (h - mean) / torch.sqrt(var + LN_VAR_FLOOR)
    return gamma * normed + beta


class Modulation(nn.Module):
    """Conditioning vector -> (gamma, beta) pairs, zero-initialized so every
    site starts as identity-modulated layer norm (gamma = 1, beta = 0)."""

    def __init__(self, d_model: int, n_sites: int):
        super().__init__()
        self.n_sites = n_sites
        self.proj = nn.Linear(d_model, 2 * n_sites * d_model)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cond):
        raw = self.proj(torch.nn.functional.silu(cond))
        chunks = raw.chunk(2 * self.n_sites, dim=-1)
        return [(1.0 + chunks[2 * i], chunks[2 * i + 1]) for i in range(self.n_sites)]


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        shape = x.shape[:-1] + (self.n_heads, 3 * self.d_head)
        q, k, v = self.qkv(x).reshape(shape).chunk(3, dim=-1)
        logits = torch.einsum("...ihd,...jhd->...hij", q, k) / math.sqrt(self.d_head)
        attn = torch.softmax(logits, dim=-1)
        o = torch.einsum("...hij,...jhd->...ihd", attn, v)
        return self.proj(o.reshape(x.shape))


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )
        self.modulation = Modulation(cfg.d_model, n_sites=2)

    def forward(self, x, cond):
        (g1, b1), (g2, b2) = self.modulation(cond)
        g1, b1, g2, b2 = (m.unsqueeze(-2) for m in (g1, b1, g2, b2))
        x = x + self.attn(adaln(x, g1, b1))
        x = x + self.ffn(adaln(x, g2, b2))
        return x


class DiT(nn.Module):
    """Noise predictor eps(x_t, t, c) over per-residue latent sequences."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, cfg.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.d_model))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_model),
            nn.SiLU(),
            nn.Linear(cfg.d_model, cfg.d_model),
        )
        # class table has a dedicated trailing null row for guidance training
        self.class_emb = nn.Embedding(cfg.n_classes + 1, cfg.d_model)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.n_layers))
        self.ipa_norms = nn.ModuleList(nn.LayerNorm(cfg.d_model) for _ in range(cfg.n_ipa_layers))
        self.ipa_layers = nn.ModuleList(
            IPALayer(cfg.d_model, cfg.ipa) for _ in range(cfg.n_ipa_layers)
        )
        self.final_modulation = Modulation(cfg.d_model, n_sites=1)
        self.out_proj = nn.Linear(cfg.d_model, cfg.latent_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        self.double()

    def conditioning(self, t, c) -> torch.Tensor:
        """Summed timestep and class embedding, shape (..., d_model)."""
        cfg = self.cfg
        temb = self.time_mlp(timestep_embedding(t, cfg.T, cfg.d_model))
        if c is None:
            c = torch.full(temb.shape[:-1], cfg.null_class, dtype=torch.long)
        else:
            c = torch.as_tensor(c, dtype=torch.long)
            if torch.any(c < 0) or torch.any(c > cfg.null_class):
                raise ConfigError(f"class label outside [0, {cfg.null_class}]")
        return temb + self.class_emb(c)

    def forward(self, x, t, c=None, frames=None, cache_ctx=None, mask: ActivityMask | None = None):
        """Predict the injected noise.

        x: (L, latent_dim) or (B, L, latent_dim). frames: (rot, trans) tensors
        matching x's leading shape; required when the model has IPA layers.
        cache_ctx: per-layer IPACache dict (unbatched sampling only); updated
        in place. Returns eps_hat, or (eps_hat, counters) when cache_ctx is
        given.
        """
        cfg = self.cfg
        if x.shape[-1] != cfg.latent_dim:
            raise ShapeMismatch(f"latent width {x.shape[-1]} != {cfg.latent_dim}")
        L = x.shape[-2]
        if L > cfg.max_len:
            raise ConfigError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        cond = self.conditioning(t, c)

        h = self.in_proj(x)
        if cfg.use_positional:
            h = h + self.pos_emb[:L]
        for block in self.blocks:
            h = block(h, cond)

        counters: list[OpCounter] = []
        if cfg.n_ipa_layers > 0:
            if frames is None:
                raise ConfigError("model has IPA layers but no frames were given")
            rot, trans = frames
            for i, (norm, layer) in enumerate(zip(self.ipa_norms, self.ipa_layers)):
                hn = norm(h)
                if cache_ctx is not None:
                    out, cache, counter = ipa_cached(
                        layer, hn, rot, trans,
                        mask if mask is not None else compute_all_active(L),
                        cache_ctx.get(i),
                    )
                    cache_ctx[i] = cache
                    counters.append(counter)
                else:
                    out = layer(hn, rot, trans)
                h = h + out

        ((g, b),) = self.final_modulation(cond)
        h = adaln(h, g.unsqueeze(-2), b.unsqueeze(-2))
        eps_hat = self.out_proj(h)
        if cache_ctx is not None:
            return eps_hat, counters
        return eps_hat


def compute_all_active(L: int) -> ActivityMask:
    return ActivityMask(bits=torch.ones(L, dtype=torch.bool), rho=1.0)


def cfg_predict(model: DiT, x_t, t, c, w: float, frames=None, cache_cond=None, cache_null=None, mask=None):
    """Classifier-free guidance: (1+w) * conditional - w * null-conditional.

    Returns (eps_hat, counters). With c None or w == 0 only one forward runs.
    """
    if w < 0:
        raise ConfigError("guidance scale must be >= 0")
    counters: list[OpCounter] = []

    def run(label, ctx):
        if ctx is not None:
            out, cnt = model(x_t, t, label, frames=frames, cache_ctx=ctx, mask=mask)
            counters.extend(cnt)
            return out
        return model(x_t, t, label, frames=frames)

    if c is None:
        return run(None, cache_cond), counters
    cond = run(c, cache_cond)
    if w == 0:
        return cond, counters
    null = run(None, cache_null)
    return (1.0 + w) * cond - w * null, counters


def training_loss(model: DiT, batch, sched, generator: torch.Generator | None = None, train: bool = True):
    """Mean squared error between injected and predicted noise.

    batch: dict with x0 (B, L, d), t (B,), c (B,) long with null_class for
    unconditioned samples, eps (B, L, d), frames (rot (B, L, 3, 3),
    trans (B, L, 3)). During training each label independently drops to the
    null class with probability cfg.dropout_prob_condition.
    """
    x0, t, c, eps = batch["x0"], batch["t"], batch["c"], batch["eps"]
    if x0.shape != eps.shape:
        raise ShapeMismatch("x0 and eps shapes differ")
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float64)[t]
    x_t = torch.sqrt(ab)[:, None, None] * x0 + torch.sqrt(1.0 - ab)[:, None, None] * eps
    if train and model.cfg.dropout_prob_condition > 0:
        drop = torch.rand(c.shape, generator=generator, dtype=torch.float64)
        c = torch.where(drop < model.cfg.dropout_prob_condition, model.cfg.null_class, c)
    eps_hat = model(x_t, t, c, frames=batch.get("frames"))
    return torch.mean((eps - eps_hat) ** 2)


def loss_gradients(model: DiT, batch, sched, generator: torch.Generator | None = None, train: bool = False):
    """Gradient of the training loss for every parameter, as a name -> tensor
    dict. Parameters not touched by the graph get zero gradients."""
    model.zero_grad(set_to_none=True)
    loss = training_loss(model, batch, sched, generator=generator, train=train)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    model.zero_grad(set_to_none=True)
    return grads, float(loss.detach())


def train_dit(
    model: DiT,
    batches,
    sched,
    lr: float = 1e-4,
    warmup_steps: int = 100,
    seed: int = 0,
    log=None,
):
    """Adam training over an iterable of batches with linear warmup.

    Deterministic per seed for a fixed batch order. Returns the per-step loss
    history."""
    generator = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for step, batch in enumerate(batches):
        scale = min(1.0, (step + 1) / max(warmup_steps, 1))
        for group in opt.param_groups:
            group["lr"] = lr * scale
        opt.zero_grad(set_to_none=True)
        loss = training_loss(model, batch, sched, generator=generator, train=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log is not None:
            log.write(f"step {step} loss {history[-1]:.6f} lr {lr * scale:.3g}\n")
    return history

"""Reverse-diffusion sampling in latent space with the attention token cache.

One trajectory is strictly sequential; the per-layer attention caches are
private to it. The activity mask for a step is computed from the displacement
between the two previous latent iterates (the mask is known before the step
runs); the first step is fully active. After the loop the final latents are
quantized to tokens and decoded to a backbone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .decoder import (
    PairDecoder,
    assemble_frames,
    canonical_reference,
    predict_relative_transforms,
    recentered,
)
from .diffusion import NoiseSchedule
from .dit import DiT, cfg_predict, compute_all_active
from .errors import ConfigError, ShapeMismatch
from .geometry import BackboneFrames
from .ipa import ActivityMask, compute_mask
from .tokenizer import Codebook, embed


@dataclass
class SamplerConfig:
    length: int
    seed: int
    T: int = 200
    guidance_w: float = 1.0
    eps_cache: float = 0.05
    gate_mode: str = "per-token"  # or "global"
    gate_start_fraction: float = 0.3
    rho_gate: float = 0.05  # active-fraction gate used by the global mode
    class_label: int | None = None
    frame_refresh: int = 10  # decode fresh frames for IPA every this many steps
    use_cache: bool = True
    ddim: bool = False
    clip_x0: bool = True  # clamp implied x0 to the codebook embedding range
    snapshot_every: int = 0  # ring-buffer latent snapshots, 0 disables

    def __post_init__(self):
        if not 0.0 <= self.gate_start_fraction <= 1.0:
            raise ConfigError("gate_start_fraction must lie in [0, 1]")
        if self.gate_mode not in ("per-token", "global"):
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")
        if self.eps_cache < 0:
            raise ConfigError("eps_cache must be >= 0")


@dataclass
class StepRecord:
    t: int
    rho: float
    pair_updates: int
    projection_ops: int
    bytes_touched: int
    wall_ns: int
    frames_refreshed: bool


@dataclass
class Trajectory:
    steps: list[StepRecord] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    z0: np.ndarray | None = None
    tokens: np.ndarray | None = None
    frames: BackboneFrames | None = None

    def rho_series(self) -> np.ndarray:
        return np.array([s.rho for s in self.steps])

    def total_pair_updates(self) -> int:
        return sum(s.pair_updates for s in self.steps)

    def total_wall_ns(self) -> int:
        return sum(s.wall_ns for s in self.steps)


def _implied_x0(x_next, eps_hat, ab: float, clamp=None):
    """Clean-sample estimate implied by the noise prediction, optionally
    clamped to per-dimension data bounds (keeps small models from drifting
    off the data manifold at high noise levels where 1/sqrt(alpha_bar) is
    enormous)."""
    x0_hat = (x_next - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if clamp is not None:
        lo, hi = clamp
        x0_hat = torch.clamp(x0_hat, lo, hi)
    return x0_hat


def reverse_step(x_next: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule, noise=None, clamp=None):
    """Ancestral DDPM update: posterior mean plus (for t > 0) posterior noise.

    The mean is written in x0-parameterized form; without clamping it is
    algebraically identical to the direct eps-parameterized update.
    """
    if x_next.shape != eps_hat.shape:
        raise ShapeMismatch("latents and predicted noise must have matching shapes")
    if not 0 <= t < sched.T:
        raise ConfigError(f"step {t} outside [0, {sched.T})")
    beta = sched.beta[t]
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1] if t > 0 else 1.0
    x0_hat = _implied_x0(x_next, eps_hat, ab, clamp)
    coef0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    coeft = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    mean = coef0 * x0_hat + coeft * x_next
    if t > 0 and noise is not None:
        mean = mean + np.sqrt(sched.posterior_variance(t)) * noise
    return mean


def ddim_step(x_next: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule, clamp=None):
    """Deterministic DDIM update (eta = 0)."""
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1] if t > 0 else 1.0
    x0_hat = _implied_x0(x_next, eps_hat, ab_t, clamp)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def quantize_latent(z0, cb: Codebook) -> np.ndarray:
    """Nearest embedding row per residue, ties broken by lowest index."""
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim != 2 or z0.shape[1] != cb.d:
        raise ShapeMismatch(f"latents must be (L, {cb.d}), got {z0.shape}")
    d2 = np.sum((z0[:, None, :] - cb.embeddings[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def frames_to_tensors(frames: BackboneFrames):
    return (
        torch.as_tensor(frames.rotations.copy(), dtype=torch.float64),
        torch.as_tensor(frames.translations.copy(), dtype=torch.float64),
    )


def _decode_structure(latents: torch.Tensor, decoder: PairDecoder) -> BackboneFrames:
    deltas = predict_relative_transforms(latents.numpy(), decoder)
    return assemble_frames(deltas, canonical_reference())


def sample(config: SamplerConfig, models, sched: NoiseSchedule):
    """Run the reverse diffusion loop and decode the final structure.

    models must expose .codebook, .decoder and .dit. Returns
    (Trajectory, BackboneFrames); the frames are recentered on the Calpha
    centroid. Deterministic per config.seed in serial mode.
    """
    cb: Codebook = models.codebook
    decoder: PairDecoder = models.decoder
    dit: DiT = models.dit
    if cb is None or decoder is None or dit is None:
        raise ConfigError("sampler needs loaded codebook, decoder and DiT models")
    if sched.T != config.T:
        raise ConfigError(f"schedule T={sched.T} does not match config T={config.T}")
    L, d = config.length, cb.d
    if dit.cfg.latent_dim != d:
        raise ConfigError("DiT latent width does not match the codebook")
    c = None
    if config.class_label is not None:
        if not 0 <= config.class_label < dit.cfg.n_classes:
            raise ConfigError(f"class {config.class_label} outside [0, {dit.cfg.n_classes})")
        c = torch.tensor(config.class_label, dtype=torch.long)

    clamp = None
    if config.clip_x0:
        clamp = (
            torch.as_tensor(cb.embeddings.min(axis=0)),
            torch.as_tensor(cb.embeddings.max(axis=0)),
        )

    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(L, d, generator=gen, dtype=torch.float64)
    z_prev: torch.Tensor | None = None  # latents one step before z

    caches = {"cond": {}, "null": {}}
    traj = Trajectory()
    frames_t = None
    prev_rho = 1.0
    gate_cutoff = config.gate_start_fraction * config.T

    with torch.no_grad():
        for step_index, t in enumerate(range(config.T - 1, -1, -1)):
            t0 = time.perf_counter_ns()
            refreshed = step_index % max(config.frame_refresh, 1) == 0
            if refreshed:
                frames_t = frames_to_tensors(_decode_structure(z, decoder))
                caches = {"cond": {}, "null": {}}

            if z_prev is None or refreshed or not config.use_cache:
                mask = compute_all_active(L)
            else:
                mask = compute_mask(z, z_prev, config.eps_cache)

            if not config.use_cache:
                eps_hat, counters = cfg_predict(dit, z, t, c, config.guidance_w, frames=frames_t)
            elif config.gate_mode == "per-token":
                eps_hat, counters = cfg_predict(
                    dit, z, t, c, config.guidance_w, frames=frames_t,
                    cache_cond=caches["cond"], cache_null=caches["null"], mask=mask,
                )
            else:  # global gate: cache only when converged and late in sampling
                if prev_rho < config.rho_gate and t < gate_cutoff and step_index > 0:
                    out, counters = dit(z, t, c, frames=frames_t, cache_ctx=caches["cond"], mask=mask)
                    eps_hat = out
                else:
                    full = compute_all_active(L)
                    eps_hat, counters = cfg_predict(
                        dit, z, t, c, config.guidance_w, frames=frames_t,
                        cache_cond=caches["cond"], cache_null=caches["null"], mask=full,
                    )
                    mask = full

            noise = torch.randn(L, d, generator=gen, dtype=torch.float64) if (t > 0 and not config.ddim) else None
            if config.ddim:
                z_new = ddim_step(z, eps_hat, t, sched, clamp=clamp)
            else:
                z_new = reverse_step(z, eps_hat, t, sched, noise=noise, clamp=clamp)

            traj.steps.append(
                StepRecord(
                    t=t,
                    rho=mask.rho,
                    pair_updates=sum(cn.pair_updates for cn in counters),
                    projection_ops=sum(cn.projection_ops for cn in counters),
                    bytes_touched=sum(cn.bytes_touched for cn in counters),
                    wall_ns=time.perf_counter_ns() - t0,
                    frames_refreshed=refreshed,
                )
            )
            if config.snapshot_every and step_index % config.snapshot_every == 0:
                traj.snapshots.append(z.numpy().copy())
                if len(traj.snapshots) > 32:
                    traj.snapshots.pop(0)

            prev_rho = mask.rho
            z_prev = z
            z = z_new

    traj.z0 = z.numpy().copy()
    traj.tokens = quantize_latent(traj.z0, cb)
    clean_latents = torch.as_tensor(embed(traj.tokens, cb))
    structure = recentered(_decode_structure(clean_latents, decoder))
    traj.frames = structure
    return traj, structure

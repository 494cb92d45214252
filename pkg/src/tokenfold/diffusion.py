"""Noise schedules, Euclidean forward noising, and the isotropic Gaussian on SO(3).

The rotation-noise density is the truncated heat-kernel series

    f(omega; sigma) = sum_l (2l+1) exp(-l(l+1) sigma^2) sin((l+1/2) omega) / sin(omega/2)

which is a density relative to the uniform Haar marginal (1 - cos omega) / pi.
Sampling uses a precomputed inverse-CDF table over an omega grid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .geometry import Rotation


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients, indexed t = 0..T-1 (t=0 cleanest)."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=float))
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ShapeMismatch("beta/alpha_bar must both have length T")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ConfigError("beta entries must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        prod = np.cumprod(1.0 - self.beta)
        if np.abs(prod - self.alpha_bar).max() > 1e-12:
            raise ConfigError("alpha_bar inconsistent with cumulative product of (1 - beta)")
        if self.alpha_bar[0] <= 0.99:
            raise ConfigError("alpha_bar[0] must exceed 0.99")

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at t = 0."""
        if t == 0:
            return 0.0
        return float(self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a noise schedule. Supported kinds: "linear" (linear beta ramp)
    and "cosine" (cosine alpha_bar, the default)."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=float)
        f = np.cos((steps / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f[1:] / f[0]
        alphas = alpha_bar / np.concatenate([[1.0], alpha_bar[:-1]])
        beta = np.clip(1.0 - alphas, 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def cosine_alpha_bar(T: int) -> np.ndarray:
    """Closed-form cosine alpha_bar used as an independent cross-check."""
    s = 0.008
    t = np.arange(1, T + 1, dtype=float)
    f0 = np.cos(s / (1.0 + s) * np.pi / 2.0) ** 2
    return np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2 / f0


def forward_noise_latent(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and eps {eps.shape} differ")
    if not 0 <= t < sched.T:
        raise ConfigError(f"step {t} outside [0, {sched.T})")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_noise_translation(t0, t: int, sched: NoiseSchedule, noise):
    """Variance-preserving forward noising of a single 3-vector."""
    t0 = np.asarray(t0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if t0.shape != (3,) or noise.shape != (3,):
        raise ShapeMismatch("translation and noise must be 3-vectors")
    return forward_noise_latent(t0, t, noise, sched)


# --- isotropic Gaussian on SO(3) -------------------------------------------

L_MAX_MIN = 10
L_MAX_CAP = 5000
TAIL_TOL = 1e-12


def igso3_lmax(sigma: float, tail_tol: float = TAIL_TOL) -> int:
    """Smallest truncation order whose next term is below tail_tol.

    Term l is bounded by (2l+1)^2 exp(-l(l+1) sigma^2)."""
    l = L_MAX_MIN
    while l < L_MAX_CAP:
        bound = (2 * l + 1) ** 2 * np.exp(-l * (l + 1) * sigma * sigma)
        if bound < tail_tol:
            return l
        l += 1
    return L_MAX_CAP


def igso3_density(omega, sigma: float, l_max: int):
    """Heat-kernel series density relative to the uniform SO(3) marginal.

    Below omega = 1e-6 the sin ratio is replaced by its (2l+1) limit.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if l_max < 1:
        raise ConfigError("l_max must be >= 1")
    omega = np.asarray(omega, dtype=float)
    scalar = omega.ndim == 0
    omega = np.atleast_1d(omega)
    if np.any(omega < 0) or np.any(omega > np.pi):
        raise ConfigError("omega must lie in [0, pi]")
    ls = np.arange(l_max + 1, dtype=float)
    weights = (2 * ls + 1) * np.exp(-ls * (ls + 1) * sigma * sigma)
    out = np.empty_like(omega)
    small = omega < 1e-6
    if np.any(small):
        out[small] = np.sum((2 * ls + 1) * weights)
    if np.any(~small):
        w = omega[~small]
        ratio = np.sin(np.outer(w, ls + 0.5)) / np.sin(w / 2.0)[:, None]
        out[~small] = ratio @ weights
    return float(out[0]) if scalar else out


def igso3_expected_omega(sigma: float, l_max: int, n_grid: int = 4096) -> float:
    """Mean rotation angle under the distribution (trapezoid on a fine grid)."""
    omega = np.linspace(1e-9, np.pi, n_grid)
    pdf = igso3_density(omega, sigma, l_max) * (1.0 - np.cos(omega)) / np.pi
    return float(np.trapezoid(omega * pdf, omega) / np.trapezoid(pdf, omega))


@dataclass(frozen=True)
class IGSO3Table:
    """Inverse-CDF table of the rotation-angle marginal over a sigma grid."""

    sigma_grid: np.ndarray
    omega_grid: np.ndarray
    cdf: np.ndarray  # (n_sigma, n_omega)
    l_max: int
    clamped_negative: int = 0  # density grid points clipped to zero (truncation noise)

    def __post_init__(self):
        object.__setattr__(self, "sigma_grid", np.asarray(self.sigma_grid, dtype=float))
        object.__setattr__(self, "omega_grid", np.asarray(self.omega_grid, dtype=float))
        object.__setattr__(self, "cdf", np.asarray(self.cdf, dtype=float))
        if self.cdf.shape != (self.sigma_grid.size, self.omega_grid.size):
            raise ShapeMismatch("cdf shape must be (n_sigma, n_omega)")
        if np.any(np.diff(self.cdf, axis=1) < 0):
            raise ConfigError("each CDF row must be nondecreasing")
        if np.abs(self.cdf[:, -1] - 1.0).max() > 1e-6:
            raise ConfigError("CDF rows must end at 1")

    def cache_key(self) -> str:
        h = hashlib.sha256()
        h.update(self.sigma_grid.tobytes())
        h.update(np.int64(self.l_max).tobytes())
        h.update(np.int64(self.omega_grid.size).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        np.savez(
            path,
            version=1,
            sigma_grid=self.sigma_grid,
            omega_grid=self.omega_grid,
            cdf=self.cdf,
            l_max=self.l_max,
            clamped_negative=self.clamped_negative,
            key=self.cache_key(),
        )

    @classmethod
    def load(cls, path) -> "IGSO3Table":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != 1:
                raise ConfigError(f"unsupported IGSO3 table version {z['version']}")
            return cls(
                sigma_grid=z["sigma_grid"],
                omega_grid=z["omega_grid"],
                cdf=z["cdf"],
                l_max=int(z["l_max"]),
                clamped_negative=int(z["clamped_negative"]),
            )


def build_igso3_table(sigma_grid, omega_resolution: int = 4096, l_max: int | None = None) -> IGSO3Table:
    """Tabulate the CDF of the angle marginal f(omega) (1-cos omega)/pi per sigma.

    l_max defaults to the adaptive truncation at the smallest sigma. Tiny
    negative density values from series truncation are clamped to zero and
    counted in the returned table.
    """
    sigma_grid = np.sort(np.asarray(sigma_grid, dtype=float))
    if sigma_grid.size == 0 or omega_resolution < 2:
        raise ConfigError("need a nonempty sigma grid and >= 2 omega points")
    if l_max is None:
        l_max = igso3_lmax(float(sigma_grid[0]))
    omega_grid = np.linspace(0.0, np.pi, omega_resolution)
    cdf = np.empty((sigma_grid.size, omega_resolution))
    clamped = 0
    for i, sigma in enumerate(sigma_grid):
        pdf = igso3_density(omega_grid, float(sigma), l_max) * (1.0 - np.cos(omega_grid)) / np.pi
        neg = pdf < 0
        clamped += int(neg.sum())
        pdf = np.where(neg, 0.0, pdf)
        c = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) / 2.0 * np.diff(omega_grid))])
        cdf[i] = c / c[-1]
    return IGSO3Table(
        sigma_grid=sigma_grid,
        omega_grid=omega_grid,
        cdf=cdf,
        l_max=int(l_max),
        clamped_negative=clamped,
    )


def igso3_sample_omega(sigma: float, table: IGSO3Table, rng: np.random.Generator, size=None):
    """Inverse-CDF draw of the rotation angle, linear in both u and sigma."""
    s = table.sigma_grid
    if not (s[0] - 1e-12 <= sigma <= s[-1] + 1e-12):
        raise ConfigError(f"sigma {sigma} outside table range [{s[0]}, {s[-1]}]")
    j = int(np.clip(np.searchsorted(s, sigma), 1, s.size - 1)) if s.size > 1 else 0
    if s.size == 1:
        row = table.cdf[0]
    else:
        w = (sigma - s[j - 1]) / (s[j] - s[j - 1])
        row = (1.0 - w) * table.cdf[j - 1] + w * table.cdf[j]
    u = rng.random(size=size)
    return np.interp(u, row, table.omega_grid)


def igso3_sample(sigma: float, table: IGSO3Table, rng: np.random.Generator) -> Rotation:
    """Draw a rotation: angle by inverse CDF, axis uniform on the sphere."""
    omega = float(igso3_sample_omega(sigma, table, rng))
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    return Rotation.from_axis_angle(axis, omega)

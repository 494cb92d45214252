"""SE(3)-invariant featurization and the structural codebook.

Every feature is a function of relative quantities only (neighbor distances,
relative rotations R_i^T R_j, displacements in the residue's own frame), so
the feature matrix -- and therefore the token sequence -- is unchanged by any
global rigid motion of the input chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .geometry import BackboneFrames

CODEBOOK_VERSION = 1

DIST_SENTINEL = -1.0  # out-of-chain neighbor distance marker


def feature_dim(w: int) -> int:
    # 2w neighbor distances + 4 flattened relative rotations + 2 local displacements
    return 2 * w + 36 + 6


def featurize(frames: BackboneFrames, w: int = 2, pool_k: int = 1) -> np.ndarray:
    """Per-residue invariant features, shape (L, F) with F = 2w + 42.

    Layout per row: neighbor Calpha distances for offsets -w..-1, +1..+w
    (sentinel -1 past the chain ends), the 9 entries of R_i^T R_j for
    j = i-2, i-1, i+1, i+2 (sentinel zeros), and R_i^T (t_j - t_i) for
    j = i-1, i+1 (sentinel zeros).

    pool_k > 1 mean-pools rows over non-overlapping windows of k residues.
    """
    if w < 1:
        raise ConfigError("window w must be >= 1")
    L = len(frames)
    rots = frames.rotations
    trans = frames.translations

    cols = []
    for off in [*range(-w, 0), *range(1, w + 1)]:
        d = np.full(L, DIST_SENTINEL)
        lo, hi = max(0, -off), min(L, L - off)
        d[lo:hi] = np.linalg.norm(trans[lo + off : hi + off] - trans[lo:hi], axis=1)
        cols.append(d[:, None])
    for off in (-2, -1, 1, 2):
        rr = np.zeros((L, 9))
        lo, hi = max(0, -off), min(L, L - off)
        rel = np.einsum("lji,ljk->lik", rots[lo:hi], rots[lo + off : hi + off])
        rr[lo:hi] = rel.reshape(hi - lo, 9)
        cols.append(rr)
    for off in (-1, 1):
        dp = np.zeros((L, 3))
        lo, hi = max(0, -off), min(L, L - off)
        delta = trans[lo + off : hi + off] - trans[lo:hi]
        dp[lo:hi] = np.einsum("lji,lj->li", rots[lo:hi], delta)
        cols.append(dp)
    feats = np.concatenate(cols, axis=1)

    if pool_k > 1:
        pad = (-L) % pool_k
        if pad:
            feats = np.concatenate([feats, np.repeat(feats[-1:], pad, axis=0)])
        feats = feats.reshape(-1, pool_k, feats.shape[1]).mean(axis=1)
    return feats


@dataclass(frozen=True)
class Codebook:
    """K quantization centroids in scaled feature space plus latent embeddings."""

    centroids: np.ndarray  # (K, F), in standardized feature space
    embeddings: np.ndarray  # (K, d)
    scaler_mean: np.ndarray  # (F,)
    scaler_scale: np.ndarray  # (F,)
    w: int

    def __post_init__(self):
        for name in ("centroids", "embeddings", "scaler_mean", "scaler_scale"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.centroids.ndim != 2 or self.embeddings.shape[0] != self.centroids.shape[0]:
            raise ShapeMismatch("centroids and embeddings must have matching K")
        if self.centroids.shape[1] != feature_dim(self.w):
            raise ShapeMismatch("centroid width does not match the feature window")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigError("non-finite embeddings")
        diff = self.centroids[:, None, :] - self.centroids[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 1e-9:
            raise ConfigError("duplicate centroids in codebook")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def scale(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.scaler_mean) / self.scaler_scale

    def with_embeddings(self, embeddings: np.ndarray) -> "Codebook":
        """Copy with replaced embedding matrix (decoder fine-tuning writes back)."""
        return Codebook(
            centroids=self.centroids,
            embeddings=embeddings,
            scaler_mean=self.scaler_mean,
            scaler_scale=self.scaler_scale,
            w=self.w,
        )

    def save(self, path) -> None:
        np.savez(
            path,
            version=CODEBOOK_VERSION,
            w=self.w,
            centroids=self.centroids,
            embeddings=self.embeddings,
            scaler_mean=self.scaler_mean,
            scaler_scale=self.scaler_scale,
        )

    @classmethod
    def load(cls, path) -> "Codebook":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CODEBOOK_VERSION:
                raise ConfigError(f"unsupported codebook version {z['version']}")
            return cls(
                centroids=z["centroids"],
                embeddings=z["embeddings"],
                scaler_mean=z["scaler_mean"],
                scaler_scale=z["scaler_scale"],
                w=int(z["w"]),
            )


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(x.shape[0], 1.0 / x.shape[0])
        centers[i] = x[rng.choice(x.shape[0], p=p)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; fine for assignment (exact ties only matter in tokenize)
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)
    return np.argmin(d2, axis=1)


def fit_codebook(
    corpus_features: list[np.ndarray],
    K: int,
    seed: int,
    d: int = 128,
    w: int = 2,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> Codebook:
    """k-means (k-means++ init, Lloyd iterations) on standardized features.

    Dead centroids are re-seeded to the points farthest from their assigned
    centroid, so the final book has no unused entries on the fitting corpus.
    Embeddings start as a fixed random semi-orthogonal projection of the
    centroids into d dimensions; decoder training fine-tunes them later.
    """
    x = np.concatenate([np.asarray(f, dtype=float) for f in corpus_features], axis=0)
    if x.shape[0] < 10 * K:
        raise ConfigError(f"need at least {10 * K} residues to fit K={K}, got {x.shape[0]}")
    if x.shape[1] != feature_dim(w):
        raise ShapeMismatch("corpus feature width does not match window w")

    mean = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), 1e-6)
    xs = (x - mean) / scale

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(xs, K, rng)
    for _ in range(max_iter):
        labels = _assign(xs, centers)
        new_centers = np.empty_like(centers)
        counts = np.bincount(labels, minlength=K)
        for k in range(K):
            if counts[k] > 0:
                new_centers[k] = xs[labels == k].mean(axis=0)
        if np.any(counts == 0):
            # re-seed dead centroids at the worst-represented points
            resid = np.sum((xs - centers[labels]) ** 2, axis=1)
            far = np.argsort(resid)[::-1]
            for j, k in enumerate(np.nonzero(counts == 0)[0]):
                new_centers[k] = xs[far[j]]
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol and np.all(counts > 0):
            break

    # nudge exact duplicates apart (degenerate corpora only)
    for k in range(1, K):
        while np.min(np.sum((centers[:k] - centers[k]) ** 2, axis=1)) <= 1e-18:
            centers[k] = centers[k] + rng.normal(scale=1e-6, size=centers.shape[1])

    m = max(d, centers.shape[1])
    q, _ = np.linalg.qr(np.random.default_rng(seed + 1).normal(size=(m, m)))
    proj = q[:d, : centers.shape[1]]
    embeddings = centers @ proj.T

    return Codebook(
        centroids=centers,
        embeddings=embeddings,
        scaler_mean=mean,
        scaler_scale=scale,
        w=w,
    )


def quantization_error(corpus_features: list[np.ndarray], cb: Codebook) -> float:
    """Total squared distance of scaled corpus features to nearest centroids."""
    x = cb.scale(np.concatenate([np.asarray(f) for f in corpus_features], axis=0))
    labels = _assign(x, cb.centroids)
    return float(np.sum((x - cb.centroids[labels]) ** 2))


def nearest_centroid(scaled: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Argmin over centroids with exact tie-break to the lowest index."""
    d2 = np.sum((scaled[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def tokenize(frames: BackboneFrames, cb: Codebook, pool_k: int = 1) -> np.ndarray:
    """Token i = index of the nearest centroid to residue i's scaled features."""
    feats = featurize(frames, w=cb.w, pool_k=pool_k)
    return nearest_centroid(cb.scale(feats), cb.centroids)


def boundary_margin(frames: BackboneFrames, cb: Codebook, pool_k: int = 1) -> np.ndarray:
    """Per-residue gap between nearest and second-nearest centroid distance.

    The exact-invariance property is only claimed for residues whose margin
    exceeds a small threshold (float noise can flip the argmin exactly at a
    quantization boundary)."""
    feats = cb.scale(featurize(frames, w=cb.w, pool_k=pool_k))
    d2 = np.sum((feats[:, None, :] - cb.centroids[None, :, :]) ** 2, axis=2)
    part = np.partition(np.sqrt(d2), 1, axis=1)
    return part[:, 1] - part[:, 0]


def embed(tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    """Look up embedding rows for a token sequence; shape (L, d)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ShapeMismatch("token sequence must be 1-D")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cb.K):
        raise ConfigError("token id outside [0, K)")
    return cb.embeddings[tokens]


def tokens_to_text(tokens: np.ndarray) -> str:
    return " ".join(str(int(t)) for t in tokens)


def tokens_from_text(text: str) -> np.ndarray:
    return np.array([int(t) for t in text.split()], dtype=np.int64)

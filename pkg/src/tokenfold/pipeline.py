"""End-to-end orchestration: corpus -> codebook -> decoder -> DiT -> bundle."""

from __future__ import annotations

import numpy as np
import torch

from .config import RunConfig
from .container import ModelBundle
from .decoder import PairDecoder, train_decoder
from .diffusion import NoiseSchedule, make_schedule
from .dit import DiT, train_dit
from .errors import ConfigError
from .geometry import BackboneFrames
from .sampler import frames_to_tensors
from .synthetic import SyntheticFoldSpec, generate_synthetic_corpus
from .tokenizer import Codebook, featurize, fit_codebook, tokenize


def make_corpus(cfg: RunConfig) -> list[tuple[BackboneFrames, int]]:
    specs = []
    for class_id, count in enumerate(cfg.corpus.n_per_class):
        specs += [
            SyntheticFoldSpec.for_class(class_id, cfg.corpus.length, jitter=cfg.corpus.jitter)
        ] * count
    return generate_synthetic_corpus(specs, seed=cfg.seed + cfg.corpus.seed_offset)


def build_codebook(cfg: RunConfig, corpus=None) -> Codebook:
    corpus = corpus if corpus is not None else make_corpus(cfg)
    feats = [featurize(frames, w=cfg.tokenizer.w, pool_k=cfg.tokenizer.pool_k) for frames, _ in corpus]
    return fit_codebook(feats, K=cfg.tokenizer.K, seed=cfg.seed, d=cfg.tokenizer.d, w=cfg.tokenizer.w)


def fit_decoder(cfg: RunConfig, cb: Codebook, corpus=None, log=None):
    corpus = corpus if corpus is not None else make_corpus(cfg)
    pairs = [(tokenize(frames, cb, pool_k=cfg.tokenizer.pool_k), frames) for frames, _ in corpus]
    return train_decoder(
        pairs,
        cb,
        steps=cfg.train.decoder_steps,
        lr=cfg.train.decoder_lr,
        seed=cfg.seed,
        log=log,
    )


def dit_batches(
    cfg: RunConfig,
    cb: Codebook,
    corpus,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
):
    """Deterministic batch stream for DiT training. All chains share one
    length, so frames and latents batch directly."""
    lengths = {len(frames) for frames, _ in corpus}
    if len(lengths) != 1:
        raise ConfigError("DiT training expects a single chain length per corpus")
    tokens = [tokenize(frames, cb, pool_k=cfg.tokenizer.pool_k) for frames, _ in corpus]
    latents = torch.as_tensor(np.stack([cb.embeddings[t] for t in tokens]))
    rots = torch.as_tensor(np.stack([frames.rotations for frames, _ in corpus]))
    trans = torch.as_tensor(np.stack([frames.translations for frames, _ in corpus]))
    labels = torch.as_tensor(np.array([c for _, c in corpus]), dtype=torch.long)

    gen = torch.Generator().manual_seed(seed)
    B = cfg.train.batch_size
    for _ in range(steps):
        idx = torch.randint(len(corpus), (B,), generator=gen)
        t = torch.randint(sched.T, (B,), generator=gen)
        eps = torch.randn(B, latents.shape[1], latents.shape[2], generator=gen, dtype=torch.float64)
        yield {
            "x0": latents[idx],
            "t": t,
            "c": labels[idx],
            "eps": eps,
            "frames": (rots[idx], trans[idx]),
        }


def train_models(cfg: RunConfig, log=None) -> tuple[ModelBundle, NoiseSchedule]:
    """Full desk-scale training chain; deterministic per cfg.seed."""
    corpus = make_corpus(cfg)
    cb = build_codebook(cfg, corpus)
    decoder, cb, _ = fit_decoder(cfg, cb, corpus, log=log)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    torch.manual_seed(cfg.seed)
    dit = DiT(cfg.dit)
    batches = dit_batches(cfg, cb, corpus, sched, cfg.train.dit_steps, seed=cfg.seed + 1)
    train_dit(
        dit,
        batches,
        sched,
        lr=cfg.train.lr,
        warmup_steps=cfg.train.warmup_steps,
        seed=cfg.seed + 2,
        log=log,
    )
    return ModelBundle(codebook=cb, decoder=decoder, dit=dit), sched

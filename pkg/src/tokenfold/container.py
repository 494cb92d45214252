"""Versioned on-disk container for the co-trained models."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .decoder import PairDecoder
from .dit import DiT, DiTConfig
from .errors import ConfigError
from .ipa import IPAConfig
from .tokenizer import Codebook

CONTAINER_VERSION = 1


@dataclass
class ModelBundle:
    codebook: Codebook
    decoder: PairDecoder
    dit: DiT

    @property
    def dit_config(self) -> DiTConfig:
        return self.dit.cfg


def save_bundle(path, bundle: ModelBundle) -> None:
    cfg = asdict(bundle.dit_config)
    torch.save(
        {
            "version": CONTAINER_VERSION,
            "codebook": {
                "centroids": bundle.codebook.centroids,
                "embeddings": bundle.codebook.embeddings,
                "scaler_mean": bundle.codebook.scaler_mean,
                "scaler_scale": bundle.codebook.scaler_scale,
                "w": bundle.codebook.w,
            },
            "decoder_hidden": bundle.decoder.net[0].out_features,
            "decoder_state": bundle.decoder.state_dict(),
            "dit_config": cfg,
            "dit_state": bundle.dit.state_dict(),
        },
        path,
    )


def load_bundle(path) -> ModelBundle:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CONTAINER_VERSION:
        raise ConfigError(f"unsupported container version {blob.get('version')}")
    cbd = blob["codebook"]
    codebook = Codebook(
        centroids=cbd["centroids"],
        embeddings=cbd["embeddings"],
        scaler_mean=cbd["scaler_mean"],
        scaler_scale=cbd["scaler_scale"],
        w=int(cbd["w"]),
    )
    decoder = PairDecoder(codebook.d, hidden=int(blob["decoder_hidden"]))
    decoder.load_state_dict(blob["decoder_state"])
    cfg_dict = dict(blob["dit_config"])
    cfg_dict["ipa"] = IPAConfig(**cfg_dict["ipa"])
    dit = DiT(DiTConfig(**cfg_dict))
    dit.load_state_dict(blob["dit_state"])
    return ModelBundle(codebook=codebook, decoder=decoder, dit=dit)

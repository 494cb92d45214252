"""Geometric viability metrics for generated backbones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants
from .geometry import AtomicBackbone, BackboneFrames, atoms_from_frames

CLASH_CUTOFF = 3.0  # angstrom, non-adjacent Calpha pairs
BOND_TARGET = 3.8
BOND_TOL = 0.4
BOND_FRACTION = 0.9


@dataclass(frozen=True)
class MetricsReport:
    ca_dist_mean: float
    ca_dist_min: float
    ca_dist_max: float
    clash_count: int
    radius_of_gyration: float
    bond_fraction_ok: float
    valid: bool


def clash_count(ca: np.ndarray) -> int:
    diff = ca[:, None, :] - ca[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    i, j = np.triu_indices(ca.shape[0], k=2)
    return int(np.sum(dist[i, j] < CLASH_CUTOFF))


def evaluate_backbone(bb: AtomicBackbone) -> MetricsReport:
    d = bb.ca_distances()
    frac_ok = float(np.mean(np.abs(d - BOND_TARGET) <= BOND_TOL))
    clashes = clash_count(bb.ca)
    centered = bb.ca - bb.ca.mean(axis=0)
    rg = float(np.sqrt(np.mean(np.sum(centered * centered, axis=1))))
    return MetricsReport(
        ca_dist_mean=float(d.mean()),
        ca_dist_min=float(d.min()),
        ca_dist_max=float(d.max()),
        clash_count=clashes,
        radius_of_gyration=rg,
        bond_fraction_ok=frac_ok,
        valid=bool(frac_ok >= BOND_FRACTION and clashes == 0),
    )


def evaluate_frames(frames: BackboneFrames) -> MetricsReport:
    return evaluate_backbone(atoms_from_frames(frames))

"""Synthetic fold corpus: ideal-dihedral chains with class labels.

Chains are grown atom by atom from bond lengths/angles and phi/psi torsions
(natural extension of reference frames, the standard internal-to-cartesian
construction), then optionally jittered with Gaussian coordinate noise.
Class 0 is a single helix, class 1 a single strand, class 2 alternating
helix/strand segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants
from .errors import ConfigError
from .geometry import AtomicBackbone, BackboneFrames, frames_from_atoms

# textbook ideal dihedrals (degrees); validated by measuring built chains
HELIX_PHI, HELIX_PSI = -57.0, -47.0
STRAND_PHI, STRAND_PSI = -119.0, 113.0

CLASS_NAMES = {0: "helix", 1: "sheet", 2: "mixed"}


@dataclass(frozen=True)
class SyntheticFoldSpec:
    class_id: int
    length: int
    segments: tuple[tuple[str, int], ...]  # (kind, run length); must tile [1, L]
    jitter: float = 0.0

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ConfigError(f"unknown class id {self.class_id}")
        if sum(n for _, n in self.segments) != self.length:
            raise ConfigError("segments must tile the chain exactly")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")

    @classmethod
    def for_class(cls, class_id: int, length: int, jitter: float = 0.0) -> "SyntheticFoldSpec":
        if class_id == 0:
            segments = (("helix", length),)
        elif class_id == 1:
            segments = (("strand", length),)
        else:
            segments, remaining, kind = [], length, "helix"
            while remaining > 0:
                run = min(12, remaining)
                segments.append((kind, run))
                kind = "strand" if kind == "helix" else "helix"
                remaining -= run
            segments = tuple(segments)
        return cls(class_id=class_id, length=length, segments=segments, jitter=jitter)


def _place_atom(a, b, c, bond, angle_deg, torsion_deg):
    """Position of atom d given chain a-b-c, |cd| = bond, angle(b,c,d) and
    torsion(a,b,c,d)."""
    angle = np.radians(angle_deg)
    torsion = np.radians(torsion_deg)
    bc = c - b
    bc /= np.linalg.norm(bc)
    ab = b - a
    n = np.cross(ab, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d_local = np.array(
        [
            -bond * np.cos(angle),
            bond * np.sin(angle) * np.cos(torsion),
            bond * np.sin(angle) * np.sin(torsion),
        ]
    )
    return c + d_local[0] * bc + d_local[1] * m + d_local[2] * n


def build_chain(phi: np.ndarray, psi: np.ndarray) -> AtomicBackbone:
    """Backbone atoms for given per-residue torsions (omega fixed trans)."""
    L = phi.shape[0]
    if L < 2 or psi.shape != phi.shape:
        raise ConfigError("need matching phi/psi for at least 2 residues")
    n = np.empty((L, 3))
    ca = np.empty((L, 3))
    c = np.empty((L, 3))
    n[0] = np.array([0.0, 0.0, 0.0])
    ca[0] = np.array([constants.BOND_N_CA, 0.0, 0.0])
    c[0] = _place_atom(
        np.array([0.0, 1.0, 0.0]), n[0], ca[0],
        constants.BOND_CA_C, constants.ANGLE_N_CA_C, phi[0],
    )
    for i in range(L - 1):
        n[i + 1] = _place_atom(n[i], ca[i], c[i], constants.BOND_C_N, constants.ANGLE_CA_C_N, psi[i])
        ca[i + 1] = _place_atom(ca[i], c[i], n[i + 1], constants.BOND_N_CA, constants.ANGLE_C_N_CA, constants.OMEGA_TRANS)
        c[i + 1] = _place_atom(c[i], n[i + 1], ca[i + 1], constants.BOND_CA_C, constants.ANGLE_N_CA_C, phi[i + 1])
    return AtomicBackbone(n=n, ca=ca, c=c)


def build_fold(spec: SyntheticFoldSpec, rng: np.random.Generator | None = None) -> AtomicBackbone:
    phi = np.empty(spec.length)
    psi = np.empty(spec.length)
    pos = 0
    for kind, run in spec.segments:
        if kind == "helix":
            phi[pos : pos + run] = HELIX_PHI
            psi[pos : pos + run] = HELIX_PSI
        elif kind == "strand":
            phi[pos : pos + run] = STRAND_PHI
            psi[pos : pos + run] = STRAND_PSI
        else:
            raise ConfigError(f"unknown segment kind {kind!r}")
        pos += run
    bb = build_chain(phi, psi)
    if spec.jitter > 0:
        if rng is None:
            raise ConfigError("jitter > 0 needs a random generator")
        bb = AtomicBackbone(
            n=bb.n + rng.normal(scale=spec.jitter, size=bb.n.shape),
            ca=bb.ca + rng.normal(scale=spec.jitter, size=bb.ca.shape),
            c=bb.c + rng.normal(scale=spec.jitter, size=bb.c.shape),
        )
    return bb


def generate_synthetic_corpus(
    specs: list[SyntheticFoldSpec], seed: int
) -> list[tuple[BackboneFrames, int]]:
    """Deterministic per seed: list of (frames, class_id) pairs."""
    rng = np.random.default_rng(seed)
    out = []
    for spec in specs:
        bb = build_fold(spec, rng)
        out.append((frames_from_atoms(bb), spec.class_id))
    return out

"""Exact SE(3)/SO(3) arithmetic and backbone frame construction.

Rotations are stored as 3x3 matrices so that composition, inversion and the
relative-frame identities used throughout the invariance tests are directly
checkable. Quaternions only appear as a construction convenience and inside
the decoder's prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants
from .errors import DegenerateGeometry, ShapeMismatch

# Orthogonality drift handling: silently re-project via polar decomposition
# above ORTHO_FIX, refuse the matrix entirely above ORTHO_FAIL.
ORTHO_FIX = 1e-7
ORTHO_FAIL = 1e-3

_EYE3 = np.eye(3)


def _orthogonality_error(m: np.ndarray) -> float:
    return float(np.abs(m.T @ m - _EYE3).max())


def _polar_project(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        r = u @ vt
    return r


class Rotation:
    """A proper rotation (element of SO(3)) stored as a 3x3 matrix."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=float)
        if m.shape != (3, 3):
            raise ShapeMismatch(f"rotation matrix must be 3x3, got {m.shape}")
        err = _orthogonality_error(m)
        if err > ORTHO_FAIL:
            raise DegenerateGeometry(f"matrix is not orthogonal (error {err:.3g})")
        if err > ORTHO_FIX:
            m = _polar_project(m)
        if np.linalg.det(m) < 0:
            raise DegenerateGeometry("matrix has determinant -1 (improper rotation)")
        m.setflags(write=False)
        self.m = m

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(_EYE3)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise DegenerateGeometry("zero rotation axis")
        x, y, z = axis / n
        k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        m = _EYE3 + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
        return cls(m)

    @classmethod
    def from_quaternion(cls, q) -> "Rotation":
        """Unit-quaternion (w, x, y, z) to matrix; q is normalized first."""
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ShapeMismatch(f"quaternion must have 4 entries, got {q.shape}")
        n = np.linalg.norm(q)
        if n == 0:
            raise DegenerateGeometry("zero quaternion")
        w, x, y, z = q / n
        m = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(m)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Uniform (Haar) random rotation via a normalized Gaussian quaternion."""
        return cls.from_quaternion(rng.normal(size=4))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.m.T

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with nonnegative w."""
        m = self.m
        t = np.trace(m)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        else:
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        if q[0] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def inverse(self) -> "Rotation":
        return Rotation(self.m.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.m @ other.m)

    def __repr__(self):
        return f"Rotation({self.m.tolist()})"


class RigidFrame:
    """A rigid motion (R, t): x -> R x + t."""

    __slots__ = ("rot", "trans")

    def __init__(self, rot: Rotation, trans):
        trans = np.array(trans, dtype=float)
        if trans.shape != (3,):
            raise ShapeMismatch(f"translation must be a 3-vector, got {trans.shape}")
        if not np.all(np.isfinite(trans)):
            raise DegenerateGeometry("non-finite translation")
        trans.setflags(write=False)
        self.rot = rot
        self.trans = trans

    @classmethod
    def identity(cls) -> "RigidFrame":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, trans_scale: float = 10.0) -> "RigidFrame":
        return cls(Rotation.random(rng), rng.normal(scale=trans_scale, size=3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rot.m.T + self.trans

    def __repr__(self):
        return f"RigidFrame(rot={self.rot!r}, trans={self.trans.tolist()})"


def compose(a: RigidFrame, b: RigidFrame) -> RigidFrame:
    """(a o b)(x) = a(b(x))."""
    return RigidFrame(a.rot @ b.rot, a.rot.m @ b.trans + a.trans)


def invert(f: RigidFrame) -> RigidFrame:
    rinv = f.rot.inverse()
    return RigidFrame(rinv, -(rinv.m @ f.trans))


def relative_frame(a: RigidFrame, b: RigidFrame) -> RigidFrame:
    """a^{-1} o b, i.e. the transform satisfying compose(a, rel) == b."""
    return compose(invert(a), b)


def rotation_angle(r: Rotation) -> float:
    """Rotation angle in [0, pi], arccos of the clamped trace formula."""
    c = (np.trace(r.m) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


class BackboneFrames:
    """An ordered chain of per-residue rigid frames, stored as arrays."""

    __slots__ = ("rotations", "translations")

    def __init__(self, rotations, translations):
        rotations = np.array(rotations, dtype=float)
        translations = np.array(translations, dtype=float)
        if rotations.ndim != 3 or rotations.shape[1:] != (3, 3):
            raise ShapeMismatch(f"rotations must be (L, 3, 3), got {rotations.shape}")
        if translations.shape != (rotations.shape[0], 3):
            raise ShapeMismatch(
                f"translations {translations.shape} do not match rotations {rotations.shape}"
            )
        if rotations.shape[0] < 2:
            raise ShapeMismatch("a backbone needs at least 2 residues")
        errs = np.abs(np.einsum("lji,ljk->lik", rotations, rotations) - _EYE3).max(axis=(1, 2))
        if errs.max() > ORTHO_FAIL:
            raise DegenerateGeometry(f"frame rotation drifted from SO(3) (error {errs.max():.3g})")
        if errs.max() > ORTHO_FIX:
            for i in np.nonzero(errs > ORTHO_FIX)[0]:
                rotations[i] = _polar_project(rotations[i])
        if np.any(np.linalg.det(rotations) < 0):
            raise DegenerateGeometry("improper rotation in backbone frames")
        if not np.all(np.isfinite(translations)):
            raise DegenerateGeometry("non-finite translation in backbone frames")
        rotations.setflags(write=False)
        translations.setflags(write=False)
        self.rotations = rotations
        self.translations = translations

    @classmethod
    def from_frames(cls, frames) -> "BackboneFrames":
        return cls(
            np.stack([f.rot.m for f in frames]),
            np.stack([f.trans for f in frames]),
        )

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def __getitem__(self, i: int) -> RigidFrame:
        return RigidFrame(Rotation(self.rotations[i]), self.translations[i])

    def transformed(self, g: RigidFrame) -> "BackboneFrames":
        """Left-compose every frame with the global motion g."""
        return BackboneFrames(
            np.einsum("ij,ljk->lik", g.rot.m, self.rotations),
            self.translations @ g.rot.m.T + g.trans,
        )


@dataclass(frozen=True)
class AtomicBackbone:
    """Per-residue N, Calpha, C coordinates, each an (L, 3) array in angstrom."""

    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for name in ("n", "ca", "c"):
            a = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, a)
        if not (self.n.shape == self.ca.shape == self.c.shape) or self.n.ndim != 2 or self.n.shape[1] != 3:
            raise ShapeMismatch("n/ca/c must all be (L, 3)")

    def __len__(self) -> int:
        return self.ca.shape[0]

    def ca_distances(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.ca, axis=0), axis=1)

    def geometry_ok(self) -> bool:
        """Diagnostic flag: all consecutive Calpha distances chemically plausible."""
        d = self.ca_distances()
        return bool(np.all((d > constants.CA_CA_MIN) & (d < constants.CA_CA_MAX)))

    def transformed(self, g: RigidFrame) -> "AtomicBackbone":
        return AtomicBackbone(g.apply(self.n), g.apply(self.ca), g.apply(self.c))


def frames_from_atoms(bb: AtomicBackbone) -> BackboneFrames:
    """Gram-Schmidt frame per residue: x axis along CA->C, N fixing the xy-plane.

    The translation is the Calpha position. Raises DegenerateGeometry when a
    residue's three atoms are collinear or coincident.
    """
    v1 = bb.c - bb.ca
    v2 = bb.n - bb.ca
    n1 = np.linalg.norm(v1, axis=1)
    if np.any(n1 < 1e-8):
        raise DegenerateGeometry("coincident CA/C atoms")
    e1 = v1 / n1[:, None]
    u2 = v2 - (np.sum(v2 * e1, axis=1))[:, None] * e1
    n2 = np.linalg.norm(u2, axis=1)
    if np.any(n2 < 1e-8):
        raise DegenerateGeometry("collinear N/CA/C atoms")
    e2 = u2 / n2[:, None]
    e3 = np.cross(e1, e2)
    rotations = np.stack([e1, e2, e3], axis=2)  # columns are the local axes
    return BackboneFrames(rotations, bb.ca.copy())


def atoms_from_frames(frames: BackboneFrames) -> AtomicBackbone:
    """Place idealized local N/CA/C offsets in every frame (inverse of
    frames_from_atoms up to bond-geometry idealization)."""
    r = frames.rotations
    t = frames.translations
    return AtomicBackbone(
        n=t + r @ constants.IDEAL_N_LOCAL,
        ca=t + r @ constants.IDEAL_CA_LOCAL,
        c=t + r @ constants.IDEAL_C_LOCAL,
    )


def aligned_rmsd(x, y) -> tuple[float, RigidFrame]:
    """Minimal RMSD between point sets after optimal rigid superposition.

    Returns (rmsd, g) where g is the rigid motion with g(x) optimally aligned
    onto y (Kabsch algorithm, reflections excluded).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ShapeMismatch(f"point sets must be matching (N, 3), got {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise ShapeMismatch("need at least 3 points for alignment")
    xc = x.mean(axis=0)
    yc = y.mean(axis=0)
    h = (x - xc).T @ (y - yc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rot = Rotation(vt.T @ corr @ u.T)
    g = RigidFrame(rot, yc - rot.m @ xc)
    delta = g.apply(x) - y
    rmsd = float(np.sqrt(np.mean(np.sum(delta * delta, axis=1))))
    return rmsd, g

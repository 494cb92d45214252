"""Idealized backbone geometry constants.

Version history:
    v1 -- initial values. Bond lengths/angles are standard idealized peptide
    geometry (Engh-Huber style rounding). The local atom offsets are expressed
    in the per-residue frame convention used by ``geometry.frames_from_atoms``:
    Calpha at the origin, C on the +x axis, N in the xy-plane with positive y.
"""

import math

import numpy as np

GEOMETRY_CONSTANTS_VERSION = 1

# Bond lengths (angstrom) and the N-CA-C bond angle (degrees).
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
ANGLE_N_CA_C = 111.2
ANGLE_CA_C_N = 116.2
ANGLE_C_N_CA = 121.7
OMEGA_TRANS = 180.0

_theta = math.radians(ANGLE_N_CA_C)

# Local offsets of the three backbone atoms in the residue frame.
IDEAL_CA_LOCAL = np.zeros(3)
IDEAL_C_LOCAL = np.array([BOND_CA_C, 0.0, 0.0])
IDEAL_N_LOCAL = np.array([BOND_N_CA * math.cos(_theta), BOND_N_CA * math.sin(_theta), 0.0])

# Consecutive Calpha-Calpha distance window treated as chemically plausible.
CA_CA_MIN = 2.0
CA_CA_MAX = 4.5
CA_CA_IDEAL = 3.8

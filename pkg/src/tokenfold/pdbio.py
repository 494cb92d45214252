"""Minimal fixed-column PDB reading and writing for N/CA/C backbones."""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ParseError
from .geometry import AtomicBackbone

BACKBONE_ATOMS = ("N", "CA", "C")


def parse_pdb(text: str) -> dict[str, AtomicBackbone]:
    """Extract per-chain N/CA/C coordinates from ATOM records.

    Fixed columns: record name 1-6, atom name 13-16, altloc 17, chain 22,
    residue number 23-26, x/y/z 31-38/39-46/47-54. Altlocs other than
    blank/'A' are skipped; residues missing any backbone atom are dropped
    (the count is available via parse_pdb_report).
    """
    chains, _ = parse_pdb_report(text)
    return chains


def parse_pdb_report(text: str) -> tuple[dict[str, AtomicBackbone], int]:
    residues: dict[str, dict] = {}
    order: dict[str, list] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        name = line[12:16].strip()
        if name not in BACKBONE_ATOMS:
            continue
        altloc = line[16:17]
        if altloc not in (" ", "", "A"):
            continue
        chain = line[21:22]
        try:
            resseq = int(line[22:26])
            icode = line[26:27]
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad ATOM record: {exc}", line_number=lineno) from exc
        key = (resseq, icode)
        res = residues.setdefault(chain, {})
        if key not in res:
            res[key] = {}
            order.setdefault(chain, []).append(key)
        res[key].setdefault(name, np.array(xyz))

    chains: dict[str, AtomicBackbone] = {}
    dropped = 0
    for chain, res in residues.items():
        n, ca, c = [], [], []
        for key in order[chain]:
            atoms = res[key]
            if all(a in atoms for a in BACKBONE_ATOMS):
                n.append(atoms["N"])
                ca.append(atoms["CA"])
                c.append(atoms["C"])
            else:
                dropped += 1
        if n:
            chains[chain] = AtomicBackbone(n=np.array(n), ca=np.array(ca), c=np.array(c))
    return chains, dropped


def write_pdb(bb: AtomicBackbone, chain_id: str = "A") -> str:
    """Fixed-column ATOM records (%8.3f coordinates) plus a TER record."""
    if np.any(np.abs([bb.n, bb.ca, bb.c]) >= 10000.0):
        raise FormatError("coordinate magnitude >= 10000 cannot be formatted")
    lines = []
    serial = 1
    for i in range(len(bb)):
        for name, coords in (("N", bb.n), ("CA", bb.ca), ("C", bb.c)):
            x, y, z = coords[i]
            lines.append(
                f"ATOM  {serial:5d}  {name:<3s} GLY {chain_id}{i + 1:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          "
                f"{name[0]:>2s}"
            )
            serial += 1
    if lines:
        lines.append(f"TER   {serial:5d}      GLY {chain_id}{len(bb):4d}")
    return "\n".join(lines) + ("\n" if lines else "")

"""Molecular graphs, rotatable-bond torsion quadruplets, and file ingestion.

Molecule documents are JSON with fields `atoms`, `bonds` and optional
`torsions`; conformation ensembles are multi-frame XYZ. All types are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

BOND_ORDERS = ("single", "double", "triple", "aromatic")
HYBRIDIZATIONS = ("sp", "sp2", "sp3", "other")

# symbols indexed by atomic number; index 0 unused
ELEMENTS = (
    "", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn",
)


class MoleculeParseError(ValueError):
    """A molecule or conformation file failed to parse or validate."""


@dataclass(frozen=True)
class Atom:
    element: str
    atomic_number: int
    degree: int
    hybridization: str

    def __post_init__(self):
        if self.atomic_number < 1:
            raise MoleculeParseError(f"atomic_number must be >= 1, got {self.atomic_number}")
        if self.degree < 0:
            raise MoleculeParseError(f"degree must be >= 0, got {self.degree}")
        if self.hybridization not in HYBRIDIZATIONS:
            raise MoleculeParseError(f"unknown hybridization {self.hybridization!r}")
        if self.atomic_number >= len(ELEMENTS) or ELEMENTS[self.atomic_number] != self.element:
            raise MoleculeParseError(
                f"element {self.element!r} inconsistent with atomic_number {self.atomic_number}"
            )


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: str

    def __post_init__(self):
        if self.i == self.j:
            raise MoleculeParseError(f"bond endpoints equal: {self.i}")
        if self.order not in BOND_ORDERS:
            raise MoleculeParseError(f"unknown bond order {self.order!r}")

    @property
    def pair(self) -> frozenset:
        return frozenset((self.i, self.j))


@dataclass(frozen=True)
class TorsionSpec:
    """Dihedral quadruplet (a, b, c, d) about rotatable bond (b, c).

    moving_side is the connected component of c once the bond is removed;
    rotating the torsion moves exactly these atoms.
    """

    a: int
    b: int
    c: int
    d: int
    moving_side: frozenset


@dataclass(frozen=True, eq=False)
class MoleculeGraph:
    atoms: tuple
    bonds: tuple
    torsions: tuple
    name: str = "molecule"

    def __eq__(self, other):
        if not isinstance(other, MoleculeGraph):
            return NotImplemented
        return (
            self.atoms == other.atoms
            and self.bonds == other.bonds
            and self.torsions == other.torsions
        )

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_torsions(self) -> int:
        return len(self.torsions)

    @cached_property
    def adjacency(self) -> tuple:
        nbrs = [[] for _ in self.atoms]
        for b in self.bonds:
            nbrs[b.i].append(b.j)
            nbrs[b.j].append(b.i)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def bond_order_map(self) -> dict:
        return {b.pair: b.order for b in self.bonds}

    @property
    def elements(self) -> tuple:
        return tuple(a.element for a in self.atoms)


def _component_from(start: int, n_atoms: int, adjacency, skip_edge: frozenset) -> frozenset:
    """Vertices reachable from start with one edge removed."""
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for u in adjacency[v]:
            if frozenset((v, u)) == skip_edge or u in seen:
                continue
            seen.add(u)
            stack.append(u)
    return frozenset(seen)


def _validate_graph(atoms, bonds, name: str) -> None:
    n = len(atoms)
    seen_pairs = set()
    for k, b in enumerate(bonds):
        if not (0 <= b.i < n and 0 <= b.j < n):
            raise MoleculeParseError(f"{name}: bond {k} references atom outside 0..{n - 1}")
        if b.pair in seen_pairs:
            raise MoleculeParseError(f"{name}: duplicate bond between {b.i} and {b.j}")
        seen_pairs.add(b.pair)
    adjacency = [[] for _ in range(n)]
    for b in bonds:
        adjacency[b.i].append(b.j)
        adjacency[b.j].append(b.i)
    if n and len(_component_from(0, n, adjacency, frozenset())) != n:
        raise MoleculeParseError(f"{name}: molecular graph is not connected")


def _build_torsion(b: int, c: int, graph_adjacency, n_atoms: int, name: str,
                   a: int | None = None, d: int | None = None) -> TorsionSpec:
    moving = _component_from(c, n_atoms, graph_adjacency, frozenset((b, c)))
    if b in moving:
        raise MoleculeParseError(f"{name}: bond in cycle: ({b}, {c}) is not rotatable")
    if a is None:
        a = min(x for x in graph_adjacency[b] if x != c)
    if d is None:
        d = min(x for x in graph_adjacency[c] if x != b)
    if a not in graph_adjacency[b] or a in (c, d):
        raise MoleculeParseError(f"{name}: torsion reference atom a={a} invalid for bond ({b},{c})")
    if d not in graph_adjacency[c] or d in (a, b):
        raise MoleculeParseError(f"{name}: torsion reference atom d={d} invalid for bond ({b},{c})")
    return TorsionSpec(a=a, b=b, c=c, d=d, moving_side=moving)


def detect_torsions(atoms, bonds, name: str = "molecule") -> list:
    """One torsion per acyclic bond whose endpoints both have degree >= 2.

    Reference atoms are the lowest-index neighbors, which makes the result
    deterministic; any other choice only shifts measured angles by a
    constant.
    """
    n = len(atoms)
    adjacency = [[] for _ in range(n)]
    for b in bonds:
        adjacency[b.i].append(b.j)
        adjacency[b.j].append(b.i)
    specs = []
    for bond in bonds:
        b, c = bond.i, bond.j
        if len(adjacency[b]) < 2 or len(adjacency[c]) < 2:
            continue
        moving = _component_from(c, n, adjacency, frozenset((b, c)))
        if b in moving:
            continue  # ring bond
        specs.append(_build_torsion(b, c, adjacency, n, name))
    return specs


def _parse_atom(entry: dict, idx: int, name: str) -> Atom:
    try:
        return Atom(
            element=entry["element"],
            atomic_number=int(entry["atomic_number"]),
            degree=int(entry["degree"]),
            hybridization=entry["hybridization"],
        )
    except KeyError as e:
        raise MoleculeParseError(f"{name}: atom {idx} missing field {e.args[0]!r}") from e
    except MoleculeParseError as e:
        raise MoleculeParseError(f"{name}: atom {idx}: {e}") from e


def load_molecule(path) -> MoleculeGraph:
    """Load a molecule document, validating or deriving its torsion list."""
    path = Path(path)
    name = path.stem
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MoleculeParseError(f"{path}: line {e.lineno} col {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict) or "atoms" not in doc or "bonds" not in doc:
        raise MoleculeParseError(f"{path}: expected object with 'atoms' and 'bonds'")
    atoms = tuple(_parse_atom(a, i, name) for i, a in enumerate(doc["atoms"]))
    bonds = []
    for k, entry in enumerate(doc["bonds"]):
        try:
            bonds.append(Bond(i=int(entry["i"]), j=int(entry["j"]), order=entry["order"]))
        except KeyError as e:
            raise MoleculeParseError(f"{name}: bond {k} missing field {e.args[0]!r}") from e
        except MoleculeParseError as e:
            raise MoleculeParseError(f"{name}: bond {k}: {e}") from e
    bonds = tuple(bonds)
    _validate_graph(atoms, bonds, name)

    adjacency = [[] for _ in atoms]
    for b in bonds:
        adjacency[b.i].append(b.j)
        adjacency[b.j].append(b.i)
    pairs = {b.pair for b in bonds}
    if "torsions" in doc:
        torsions = []
        for k, entry in enumerate(doc["torsions"]):
            try:
                a, b, c, d = (int(entry[key]) for key in ("a", "b", "c", "d"))
            except KeyError as e:
                raise MoleculeParseError(f"{name}: torsion {k} missing field {e.args[0]!r}") from e
            if frozenset((b, c)) not in pairs:
                raise MoleculeParseError(f"{name}: torsion {k}: ({b},{c}) is not a bond")
            torsions.append(_build_torsion(b, c, adjacency, len(atoms), name, a=a, d=d))
    else:
        torsions = detect_torsions(atoms, bonds, name)
    return MoleculeGraph(atoms=atoms, bonds=bonds, torsions=tuple(torsions), name=name)


def save_molecule(graph: MoleculeGraph, path) -> None:
    doc = {
        "atoms": [
            {
                "element": a.element,
                "atomic_number": a.atomic_number,
                "degree": a.degree,
                "hybridization": a.hybridization,
            }
            for a in graph.atoms
        ],
        "bonds": [{"i": b.i, "j": b.j, "order": b.order} for b in graph.bonds],
        "torsions": [{"a": t.a, "b": t.b, "c": t.c, "d": t.d} for t in graph.torsions],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_conformations(path, graph: MoleculeGraph) -> list:
    """Read a multi-frame XYZ ensemble; frames must match the graph's atoms.

    Returns Conformation objects in file order, with `energy` populated from
    any `energy=<float>` token on a comment line.
    """
    from .geometry import Conformation

    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise MoleculeParseError(f"{path}: empty conformation file")
    frames = []
    pos = 0
    frame_idx = 0
    n_expected = graph.n_atoms
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            count = int(lines[pos].strip())
        except ValueError:
            raise MoleculeParseError(
                f"{path}: frame {frame_idx}: expected atom count, got {lines[pos]!r}"
            ) from None
        if count != n_expected:
            raise MoleculeParseError(
                f"{path}: frame {frame_idx}: atom count {count} != {n_expected}"
            )
        if pos + 1 + count >= len(lines) + 1 and pos + 1 + count > len(lines):
            raise MoleculeParseError(f"{path}: frame {frame_idx}: truncated")
        comment = lines[pos + 1] if pos + 1 < len(lines) else ""
        energy = None
        for tok in comment.split():
            if tok.startswith("energy="):
                energy = float(tok[len("energy="):])
        coords = np.empty((count, 3))
        for k in range(count):
            if pos + 2 + k >= len(lines):
                raise MoleculeParseError(f"{path}: frame {frame_idx}: truncated at atom {k}")
            parts = lines[pos + 2 + k].split()
            if len(parts) < 4:
                raise MoleculeParseError(
                    f"{path}: frame {frame_idx}: malformed atom line {k}: {lines[pos + 2 + k]!r}"
                )
            if parts[0] != graph.atoms[k].element:
                raise MoleculeParseError(
                    f"{path}: frame {frame_idx}: element mismatch at index {k}: "
                    f"{parts[0]!r} != {graph.atoms[k].element!r}"
                )
            coords[k] = [float(x) for x in parts[1:4]]
        frames.append(Conformation(coords=coords, graph_ref=graph.name, energy=energy))
        pos += 2 + count
        frame_idx += 1
    return frames


def save_conformations(confs, graph: MoleculeGraph, path) -> None:
    """Write frames as multi-frame XYZ with 10-decimal coordinates."""
    out = []
    for conf in confs:
        out.append(str(graph.n_atoms))
        out.append("" if conf.energy is None else f"energy={conf.energy!r}")
        for el, xyz in zip(graph.elements, conf.coords):
            out.append(f"{el} {xyz[0]:.10f} {xyz[1]:.10f} {xyz[2]:.10f}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")

"""Dihedral measurement, torsion application, and the torsional metric tensor.

Sign convention: the dihedral of quadruplet (a, b, c, d) is the atan2 angle
of the d-side perpendicular in the frame spanned by the a-side perpendicular
and the bond axis (c - b), mapped into [0, 2pi). A right-handed rotation of
the moving side about the axis (c - b) anchored at c increases the angle.
The convention is locked by golden tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .molio import MoleculeGraph
from .torus import TWO_PI, wrap

COLLINEAR_TOL = 1e-9
MIN_ATOM_SEPARATION = 1e-6


class GeometryError(ValueError):
    pass


class DegenerateDihedralError(GeometryError):
    """Three collinear atoms make the dihedral undefined."""


@dataclass(frozen=True)
class Conformation:
    """Cartesian coordinates in Angstrom for one molecular geometry."""

    coords: np.ndarray
    graph_ref: str = "molecule"
    energy: float | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise GeometryError(f"coords must be (n, 3), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise GeometryError("non-finite coordinates")
        if coords.shape[0] > 1:
            diff = coords[:, None, :] - coords[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            np.fill_diagonal(d2, np.inf)
            if d2.min() < MIN_ATOM_SEPARATION**2:
                i, j = np.unravel_index(int(d2.argmin()), d2.shape)
                raise GeometryError(f"atoms {i} and {j} closer than {MIN_ATOM_SEPARATION} A")

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class LocalStructure:
    """A reference conformation fixing all bond lengths and bond angles."""

    reference: Conformation


@dataclass(frozen=True)
class TorusPoint:
    """A point on the m-torus; components wrapped into [0, 2pi)."""

    phi: np.ndarray

    def __post_init__(self):
        phi = wrap(np.atleast_1d(np.asarray(self.phi, dtype=float)))
        object.__setattr__(self, "phi", phi)

    @property
    def m(self) -> int:
        return self.phi.shape[0]


def dihedral(coords: np.ndarray, a: int, b: int, c: int, d: int) -> float:
    """Signed dihedral of the quadruplet, in [0, 2pi)."""
    b0 = coords[a] - coords[b]
    b1 = coords[c] - coords[b]
    b2 = coords[d] - coords[c]
    nb1 = np.linalg.norm(b1)
    if nb1 < COLLINEAR_TOL:
        raise DegenerateDihedralError(f"bond ({b},{c}) has near-zero length")
    b1 = b1 / nb1
    v = b0 - np.dot(b0, b1) * b1
    w = b2 - np.dot(b2, b1) * b1
    if np.linalg.norm(v) < COLLINEAR_TOL * max(1.0, np.linalg.norm(b0)):
        raise DegenerateDihedralError(f"atoms {a},{b},{c} are collinear")
    if np.linalg.norm(w) < COLLINEAR_TOL * max(1.0, np.linalg.norm(b2)):
        raise DegenerateDihedralError(f"atoms {b},{c},{d} are collinear")
    x = np.dot(v, w)
    y = np.dot(np.cross(b1, v), w)
    return float(np.mod(math.atan2(y, x), TWO_PI))


def measure_torsions(conf: Conformation, graph: MoleculeGraph) -> TorusPoint:
    """Measure all rotatable-bond dihedrals of the conformation."""
    if conf.n_atoms != graph.n_atoms:
        raise GeometryError(f"conformation has {conf.n_atoms} atoms, graph {graph.n_atoms}")
    phi = np.array([dihedral(conf.coords, t.a, t.b, t.c, t.d) for t in graph.torsions])
    return TorusPoint(phi=phi)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotate_torsions(conf: Conformation, graph: MoleculeGraph, deltas: np.ndarray) -> Conformation:
    """Rotate each moving side by its delta about the bond axis (relative update)."""
    coords = conf.coords.copy()
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    for t, delta in zip(graph.torsions, deltas):
        if abs(delta) < 1e-15:
            continue
        axis = coords[t.c] - coords[t.b]
        norm = np.linalg.norm(axis)
        if norm < COLLINEAR_TOL:
            raise GeometryError(f"degenerate bond ({t.b},{t.c})")
        rot = rotation_about_axis(axis / norm, float(delta))
        idx = sorted(t.moving_side)
        coords[idx] = (coords[idx] - coords[t.c]) @ rot.T + coords[t.c]
    return Conformation(coords=coords, graph_ref=conf.graph_ref)


def set_torsions(local: LocalStructure, target: TorusPoint, graph: MoleculeGraph) -> Conformation:
    """Place the local structure at the requested torsion angles.

    Bond lengths and angles of the reference are preserved; only moving-side
    atoms move relative to the fixed side of each rotatable bond.
    """
    if target.m != graph.n_torsions:
        raise GeometryError(f"target has {target.m} angles, graph has {graph.n_torsions}")
    current = measure_torsions(local.reference, graph)
    deltas = np.mod(target.phi - current.phi, TWO_PI)
    return rotate_torsions(local.reference, graph, deltas)


def batch_dihedral(coords: np.ndarray, a: int, b: int, c: int, d: int) -> np.ndarray:
    """Vectorized dihedral over a (B, n, 3) coordinate batch."""
    b0 = coords[:, a] - coords[:, b]
    b1 = coords[:, c] - coords[:, b]
    b2 = coords[:, d] - coords[:, c]
    nb1 = np.linalg.norm(b1, axis=-1, keepdims=True)
    if nb1.min() < COLLINEAR_TOL:
        raise DegenerateDihedralError(f"bond ({b},{c}) has near-zero length")
    b1 = b1 / nb1
    v = b0 - np.sum(b0 * b1, axis=-1, keepdims=True) * b1
    w = b2 - np.sum(b2 * b1, axis=-1, keepdims=True) * b1
    nv = np.linalg.norm(v, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    if nv.min() < COLLINEAR_TOL or nw.min() < COLLINEAR_TOL:
        raise DegenerateDihedralError(f"collinear atoms in quadruplet ({a},{b},{c},{d})")
    x = np.sum(v * w, axis=-1)
    y = np.sum(np.cross(b1, v) * w, axis=-1)
    return np.mod(np.arctan2(y, x), TWO_PI)


def batch_measure_torsions(coords: np.ndarray, graph: MoleculeGraph) -> np.ndarray:
    """All torsions for a (B, n, 3) batch; returns (B, m)."""
    if graph.n_torsions == 0:
        return np.zeros((coords.shape[0], 0))
    return np.stack(
        [batch_dihedral(coords, t.a, t.b, t.c, t.d) for t in graph.torsions], axis=-1
    )


def _batch_rotation_matrices(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues matrices for unit axes (B, 3) and angles (B,)."""
    B = axes.shape[0]
    k = np.zeros((B, 3, 3))
    k[:, 0, 1] = -axes[:, 2]
    k[:, 0, 2] = axes[:, 1]
    k[:, 1, 0] = axes[:, 2]
    k[:, 1, 2] = -axes[:, 0]
    k[:, 2, 0] = -axes[:, 1]
    k[:, 2, 1] = axes[:, 0]
    sin = np.sin(angles)[:, None, None]
    cos = np.cos(angles)[:, None, None]
    return np.eye(3)[None] + sin * k + (1.0 - cos) * (k @ k)


def batch_set_torsions(ref_coords: np.ndarray, phis: np.ndarray,
                       graph: MoleculeGraph) -> np.ndarray:
    """Vectorized set_torsions: (B, m) targets onto one or B reference frames.

    ref_coords is (n, 3) for a shared local structure or (B, n, 3) for
    per-row references. Returns (B, n, 3). Matches set_torsions exactly.
    """
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    B = phis.shape[0]
    if ref_coords.ndim == 2:
        coords = np.broadcast_to(ref_coords, (B,) + ref_coords.shape).copy()
    else:
        coords = ref_coords.copy()
    if phis.shape[1] != graph.n_torsions:
        raise GeometryError(f"targets have {phis.shape[1]} angles, graph has {graph.n_torsions}")
    current = batch_measure_torsions(coords, graph)
    deltas = np.mod(phis - current, TWO_PI)
    for i, t in enumerate(graph.torsions):
        axis = coords[:, t.c] - coords[:, t.b]
        norm = np.linalg.norm(axis, axis=-1, keepdims=True)
        if norm.min() < COLLINEAR_TOL:
            raise GeometryError(f"degenerate bond ({t.b},{t.c})")
        rot = _batch_rotation_matrices(axis / norm, deltas[:, i])
        idx = sorted(t.moving_side)
        anchor = coords[:, t.c][:, None, :]
        coords[:, idx] = np.einsum("bij,bkj->bki", rot, coords[:, idx] - anchor) + anchor
    return coords


def metric_tensor(conf: Conformation, graph: MoleculeGraph):
    """Gram matrix g of coordinate derivatives d(coords)/d(phi_i) and det(g).

    The per-atom derivative is u x (x - x_c) on the moving side and zero on
    the fixed side, with u the unit axis from b to c (matching the rotation
    convention; validated against finite differences).
    """
    m = graph.n_torsions
    if m == 0:
        return np.zeros((0, 0)), 1.0
    coords = conf.coords
    n = conf.n_atoms
    jac = np.zeros((m, n, 3))
    for i, t in enumerate(graph.torsions):
        axis = coords[t.c] - coords[t.b]
        norm = np.linalg.norm(axis)
        if norm < COLLINEAR_TOL:
            raise GeometryError(f"degenerate bond ({t.b},{t.c})")
        u = axis / norm
        idx = sorted(t.moving_side)
        jac[i, idx] = np.cross(u[None, :], coords[idx] - coords[t.c])
    g = np.einsum("ink,jnk->ij", jac, jac)
    return g, float(np.linalg.det(g))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation matrix (QR of a Gaussian matrix, det fixed to +1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q

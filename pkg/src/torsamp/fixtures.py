"""Desk-scale fixture generation: toy chain molecules with analytic torsion
potentials and synthetic conformation ensembles playing the role of MD data.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .energy import AnalyticTorsionPotential
from .geometry import Conformation
from .molio import Atom, Bond, MoleculeGraph, detect_torsions, save_conformations, save_molecule
from .torus import TWO_PI

BOND_LENGTH = 1.54  # C-C, Angstrom
BOND_ANGLE = math.radians(109.47)


def chain_molecule(n_atoms: int, name: str) -> MoleculeGraph:
    """Unbranched all-carbon sp3 chain; n_atoms - 3 rotatable torsions."""
    atoms = tuple(
        Atom(element="C", atomic_number=6, degree=(1 if i in (0, n_atoms - 1) else 2),
             hybridization="sp3")
        for i in range(n_atoms)
    )
    bonds = tuple(Bond(i=i, j=i + 1, order="single") for i in range(n_atoms - 1))
    torsions = tuple(detect_torsions(atoms, bonds, name))
    return MoleculeGraph(atoms=atoms, bonds=bonds, torsions=torsions, name=name)


def chain_reference(graph: MoleculeGraph) -> Conformation:
    """Planar zig-zag geometry with tetrahedral angles."""
    n = graph.n_atoms
    beta = (math.pi - BOND_ANGLE) / 2.0
    coords = np.zeros((n, 3))
    for i in range(1, n):
        step = np.array([math.cos(beta), math.sin(beta) * (-1) ** i, 0.0])
        coords[i] = coords[i - 1] + BOND_LENGTH * step
    return Conformation(coords=coords, graph_ref=graph.name)


# The planar reference is achiral, so the policy architecture forces the
# sampled marginal to satisfy p(-phi) = p(phi) (as physical energies do);
# fixture potentials must share that symmetry: phases restricted to {0, pi}.

def toy1_potential() -> AnalyticTorsionPotential:
    """E(phi) = 1 + cos(2 phi): two wells at pi/2 and 3pi/2."""
    return AnalyticTorsionPotential(terms=(((1.0, 2, 0.0),),))


def toy2_potential() -> AnalyticTorsionPotential:
    """Coupled two-torsion landscape, multimodal in both angles."""
    return AnalyticTorsionPotential(
        terms=(((1.0, 2, 0.0),), ((0.8, 3, math.pi),)),
        couplings=((0, 1, 0.6, 0.0),),
    )


def boltzmann_torsion_samples(potential: AnalyticTorsionPotential, kT: float,
                              n_samples: int, rng: np.random.Generator,
                              grid_side: int = 2048) -> np.ndarray:
    """Inverse-CDF / categorical sampling from exp(-E/kT) on a fine grid."""
    m = potential.m
    if m == 1:
        centers = (np.arange(grid_side) + 0.5) * TWO_PI / grid_side
        logp = -potential.energy_at_batch(centers[:, None]) / kT
        p = np.exp(logp - logp.max())
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        cells = np.searchsorted(cdf, rng.uniform(size=n_samples))
        jitter = rng.uniform(-0.5, 0.5, size=n_samples) * TWO_PI / grid_side
        return np.mod(centers[cells] + jitter, TWO_PI)[:, None]
    if m == 2:
        side = min(grid_side, 512)
        ax = (np.arange(side) + 0.5) * TWO_PI / side
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        logp = -potential.energy_at_batch(pts) / kT
        p = np.exp(logp - logp.max())
        p /= p.sum()
        cells = rng.choice(len(pts), size=n_samples, p=p)
        jitter = rng.uniform(-0.5, 0.5, size=(n_samples, 2)) * TWO_PI / side
        return np.mod(pts[cells] + jitter, TWO_PI)
    raise ValueError("fixture sampling supports 1 or 2 torsions")


def jitter_bond_lengths(graph: MoleculeGraph, conf: Conformation, sigma: float,
                        rng: np.random.Generator) -> Conformation:
    """Perturb every bond length by Gaussian noise, keeping all angles fixed.

    Each bond's far subtree is translated along the bond direction, so only
    that one length changes.
    """
    coords = conf.coords.copy()
    adjacency = graph.adjacency
    # BFS tree from atom 0
    order = []
    seen = {0}
    queue = [0]
    while queue:
        v = queue.pop(0)
        for u in adjacency[v]:
            if u not in seen:
                seen.add(u)
                order.append((v, u))
                queue.append(u)

    def _subtree(root, parent):
        out = {root}
        stack = [root]
        while stack:
            v = stack.pop()
            for u in adjacency[v]:
                if u != parent and u not in out:
                    out.add(u)
                    stack.append(u)
        return sorted(out)

    for parent, child in order:
        u = coords[child] - coords[parent]
        u /= np.linalg.norm(u)
        delta = rng.normal(0.0, sigma)
        idx = _subtree(child, parent)
        coords[idx] += delta * u
    return Conformation(coords=coords, graph_ref=conf.graph_ref)


def synthetic_ensemble(graph: MoleculeGraph, reference: Conformation,
                       potential: AnalyticTorsionPotential, kT: float,
                       n_frames: int, sigma: float, rng: np.random.Generator) -> list:
    """Boltzmann-distributed torsions on bond-length-jittered local structures."""
    from .geometry import LocalStructure, TorusPoint, set_torsions

    phis = boltzmann_torsion_samples(potential, kT, n_frames, rng)
    frames = []
    for phi in phis:
        jittered = jitter_bond_lengths(graph, reference, sigma, rng)
        conf = set_torsions(LocalStructure(jittered), TorusPoint(phi), graph)
        energy = potential.energy_at(phi)
        frames.append(Conformation(coords=conf.coords, graph_ref=graph.name, energy=energy))
    return frames


TOYS = {
    "toy1": (4, toy1_potential),
    "toy2": (5, toy2_potential),
}


def make_fixtures(out_dir, which=("toy1", "toy2"), n_frames: int = 500,
                  sigma: float = 0.02, kT: float = 1.0,
                  seed: int = 0) -> list:
    """Emit molecule, potential, reference and synthetic-ensemble files.

    Layout per toy: <out>/<name>/{molecule.json, potential.json,
    reference.xyz, md.xyz}. Returns the condition directories.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    dirs = []
    for name in which:
        if name not in TOYS:
            raise ValueError(f"unknown fixture {name!r}; choose from {sorted(TOYS)}")
        n_atoms, pot_fn = TOYS[name]
        cdir = out_dir / name
        cdir.mkdir(parents=True, exist_ok=True)
        graph = chain_molecule(n_atoms, name)
        ref = chain_reference(graph)
        potential = pot_fn()
        save_molecule(graph, cdir / "molecule.json")
        potential.save(cdir / "potential.json")
        save_conformations([ref], graph, cdir / "reference.xyz")
        frames = synthetic_ensemble(graph, ref, potential, kT, n_frames, sigma, rng)
        save_conformations(frames, graph, cdir / "md.xyz")
        dirs.append(cdir)
    return dirs

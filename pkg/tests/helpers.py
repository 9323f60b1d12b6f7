"""Shared test utilities: finite differences, toy graphs, rigid motions."""

from __future__ import annotations

import math

import numpy as np
import torch

from torsamp.fixtures import chain_molecule, chain_reference
from torsamp.geometry import Conformation, LocalStructure
from torsamp.molio import Atom, Bond, MoleculeGraph, detect_torsions


def finite_diff_store_grads(loss_fn, store, h: float = 1e-6) -> dict:
    """Central-difference gradients of loss_fn() w.r.t. every store parameter."""
    grads = {}
    for name, p in store.params.items():
        g = np.zeros(p.shape)
        flat = p.detach().numpy().reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            with torch.no_grad():
                p.view(-1)[k] = orig + h
                up = float(loss_fn())
                p.view(-1)[k] = orig - h
                down = float(loss_fn())
                p.view(-1)[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_rel_error(analytic: dict, numeric: dict) -> float:
    """Max |a - n| / max(1, |a|, |n|) over all parameter entries."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def make_chain(n_atoms: int, name: str = "chain"):
    graph = chain_molecule(n_atoms, name)
    ref = chain_reference(graph)
    return graph, LocalStructure(reference=ref)


def random_tree_graph(n_atoms: int, rng: np.random.Generator) -> MoleculeGraph:
    """Random labeled tree on carbon atoms (always connected, acyclic)."""
    bonds = []
    degree = [0] * n_atoms
    for v in range(1, n_atoms):
        u = int(rng.integers(0, v))
        bonds.append(Bond(i=u, j=v, order="single"))
        degree[u] += 1
        degree[v] += 1
    atoms = tuple(
        Atom(element="C", atomic_number=6, degree=degree[i], hybridization="sp3")
        for i in range(n_atoms)
    )
    bonds = tuple(bonds)
    torsions = tuple(detect_torsions(atoms, bonds, "tree"))
    return MoleculeGraph(atoms=atoms, bonds=bonds, torsions=torsions, name="tree")


def random_embedding(graph: MoleculeGraph, rng: np.random.Generator) -> Conformation:
    """Generic non-degenerate 3D embedding of a tree graph."""
    n = graph.n_atoms
    coords = np.zeros((n, 3))
    placed = {0}
    adjacency = graph.adjacency
    queue = [0]
    while queue:
        v = queue.pop(0)
        for u in adjacency[v]:
            if u in placed:
                continue
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            coords[u] = coords[v] + (1.3 + 0.4 * rng.uniform()) * direction
            placed.add(u)
            queue.append(u)
    return Conformation(coords=coords, graph_ref=graph.name)


def mirror_matrix() -> np.ndarray:
    return np.diag([1.0, 1.0, -1.0])

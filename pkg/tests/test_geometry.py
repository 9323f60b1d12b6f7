import math

import numpy as np
import pytest

from torsamp.geometry import (
    Conformation,
    DegenerateDihedralError,
    GeometryError,
    LocalStructure,
    TorusPoint,
    dihedral,
    measure_torsions,
    metric_tensor,
    random_rotation,
    rotate_torsions,
    set_torsions,
)
from torsamp.molio import Atom, Bond, MoleculeGraph, detect_torsions
from torsamp.torus import TWO_PI, wrapped_delta

from helpers import make_chain, random_embedding, random_tree_graph


def quad_coords(d):
    return np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], d])


def test_dihedral_planar_cis():
    assert dihedral(quad_coords([1.0, 1.0, 0.0]), 0, 1, 2, 3) == pytest.approx(0.0, abs=1e-12)


def test_dihedral_planar_trans():
    assert dihedral(quad_coords([-1.0, 1.0, 0.0]), 0, 1, 2, 3) == pytest.approx(math.pi, abs=1e-12)


def test_dihedral_sign_convention_golden():
    # locks the engine's sign convention: this quadruplet measures 3pi/2
    assert dihedral(quad_coords([0.0, 1.0, 1.0]), 0, 1, 2, 3) == pytest.approx(
        3 * math.pi / 2, abs=1e-12
    )


def test_dihedral_degenerate_collinear():
    coords = np.array([[2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    with pytest.raises(DegenerateDihedralError):
        dihedral(coords, 0, 1, 2, 3)


def test_set_torsions_identity(toy1_condition):
    cond = toy1_condition
    target = measure_torsions(cond.local.reference, cond.graph)
    conf = set_torsions(cond.local, target, cond.graph)
    drift = np.abs(conf.coords - cond.local.reference.coords).max()
    assert drift < 1e-12


def test_set_torsions_pi_mirror(toy1_condition):
    cond = toy1_condition
    ref = cond.local.reference
    phi0 = measure_torsions(ref, cond.graph).phi[0]
    target = TorusPoint(np.array([phi0 + math.pi]))
    conf = set_torsions(cond.local, target, cond.graph)
    # d lands mirrored through the plane containing the b-c axis and a
    got = measure_torsions(conf, cond.graph).phi[0]
    assert abs(wrapped_delta(got, phi0 + math.pi)) < 1e-9
    # fixed-side atoms do not move
    np.testing.assert_allclose(conf.coords[:2], ref.coords[:2], atol=1e-12)


def test_set_measure_roundtrip_1000(rng):
    graph, local = make_chain(5)
    for _ in range(1000):
        target = TorusPoint(rng.uniform(0.0, TWO_PI, size=2))
        conf = set_torsions(local, target, graph)
        got = measure_torsions(conf, graph)
        assert np.abs(wrapped_delta(got.phi, target.phi)).max() < 1e-9


def test_set_torsions_preserves_local_structure(rng):
    graph, local = make_chain(6)
    ref = local.reference.coords

    def bond_lengths(c):
        return np.array([np.linalg.norm(c[b.i] - c[b.j]) for b in graph.bonds])

    def bond_angles(c):
        out = []
        for i, nbrs in enumerate(graph.adjacency):
            for x in range(len(nbrs)):
                for y in range(x + 1, len(nbrs)):
                    v1 = c[nbrs[x]] - c[i]
                    v2 = c[nbrs[y]] - c[i]
                    out.append(np.dot(v1, v2) / (np.linalg.norm(v1) * np.linalg.norm(v2)))
        return np.array(out)

    for _ in range(25):
        conf = set_torsions(local, TorusPoint(rng.uniform(0, TWO_PI, size=3)), graph)
        np.testing.assert_allclose(bond_lengths(conf.coords), bond_lengths(ref), rtol=1e-9)
        np.testing.assert_allclose(bond_angles(conf.coords), bond_angles(ref), rtol=1e-9)


def test_se3_invariance_of_measurement(rng):
    graph, local = make_chain(5)
    conf = set_torsions(local, TorusPoint(rng.uniform(0, TWO_PI, size=2)), graph)
    base = measure_torsions(conf, graph).phi
    for _ in range(20):
        rot = random_rotation(rng)
        shift = rng.normal(size=3) * 5
        moved = Conformation(coords=conf.coords @ rot.T + shift, graph_ref=conf.graph_ref)
        got = measure_torsions(moved, graph).phi
        assert np.abs(wrapped_delta(got, base)).max() < 1e-9


def test_reference_atom_swap_is_constant_offset(rng):
    # branched molecule: b has two non-c neighbors, swapping a shifts phi by a constant
    atoms = tuple(Atom(element="C", atomic_number=6, degree=d, hybridization="sp3")
                  for d in (1, 3, 2, 1, 1))
    bonds = (Bond(i=0, j=1, order="single"), Bond(i=1, j=2, order="single"),
             Bond(i=2, j=3, order="single"), Bond(i=1, j=4, order="single"))
    torsions = tuple(detect_torsions(atoms, bonds))
    graph = MoleculeGraph(atoms=atoms, bonds=bonds, torsions=torsions, name="branched")
    spec = next(t for t in graph.torsions if (t.b, t.c) == (1, 2))
    alt = type(spec)(a=4, b=spec.b, c=spec.c, d=spec.d, moving_side=spec.moving_side)
    local = LocalStructure(reference=random_embedding(graph, rng))
    offsets = []
    for _ in range(100):
        target = TorusPoint(rng.uniform(0, TWO_PI, size=graph.n_torsions))
        conf = set_torsions(local, target, graph)
        phi_a = dihedral(conf.coords, spec.a, spec.b, spec.c, spec.d)
        phi_alt = dihedral(conf.coords, alt.a, alt.b, alt.c, alt.d)
        offsets.append(wrapped_delta(phi_alt, phi_a))
    assert np.std(offsets) < 1e-9


def test_rotation_group_action(rng):
    graph, local = make_chain(5)
    conf = local.reference
    for _ in range(50):
        d1 = rng.uniform(-math.pi, math.pi, size=2)
        d2 = rng.uniform(-math.pi, math.pi, size=2)
        seq = rotate_torsions(rotate_torsions(conf, graph, d1), graph, d2)
        once = rotate_torsions(conf, graph, d1 + d2)
        np.testing.assert_allclose(seq.coords, once.coords, atol=1e-9)


def test_metric_single_moving_atom():
    # one torsion, bond axis z through origin, single moving atom at radius 1
    atoms = tuple(Atom(element="C", atomic_number=6, degree=d, hybridization="sp3")
                  for d in (1, 2, 2, 1))
    bonds = tuple(Bond(i=k, j=k + 1, order="single") for k in range(3))
    graph = MoleculeGraph(atoms=atoms, bonds=bonds,
                          torsions=tuple(detect_torsions(atoms, bonds)), name="zaxis")
    coords = np.array([
        [1.0, 0.0, -1.0],   # a (off-axis so the dihedral is defined)
        [0.0, 0.0, -1.0],   # b on the axis
        [0.0, 0.0, 0.0],    # c at the origin
        [1.0, 0.0, 0.0],    # d: the only moving atom once c is on the axis
    ])
    g, det = metric_tensor(Conformation(coords=coords), graph)
    # moving side is {c, d}; c sits on the axis and contributes nothing
    assert g.shape == (1, 1)
    assert g[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert det == pytest.approx(1.0, abs=1e-9)


def test_metric_zero_torsions():
    atoms = (Atom(element="C", atomic_number=6, degree=1, hybridization="sp3"),
             Atom(element="C", atomic_number=6, degree=1, hybridization="sp3"))
    bonds = (Bond(i=0, j=1, order="single"),)
    graph = MoleculeGraph(atoms=atoms, bonds=bonds, torsions=(), name="dimer")
    coords = np.array([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]])
    g, det = metric_tensor(Conformation(coords=coords), graph)
    assert g.shape == (0, 0)
    assert det == 1.0


def fd_jacobian_gram(local, graph, phi, h=1e-6):
    """Finite-difference oracle: Gram matrix of d(coords)/d(phi_i)."""
    m = len(phi)
    jac = []
    for i in range(m):
        up = phi.copy()
        up[i] += h
        down = phi.copy()
        down[i] -= h
        cu = set_torsions(local, TorusPoint(up), graph).coords
        cd = set_torsions(local, TorusPoint(down), graph).coords
        jac.append((cu - cd) / (2 * h))
    g = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            g[i, j] = np.sum(jac[i] * jac[j])
    return g


def test_metric_matches_finite_differences(rng):
    graph, local = make_chain(5)
    for _ in range(20):
        phi = rng.uniform(0, TWO_PI, size=2)
        conf = set_torsions(local, TorusPoint(phi), graph)
        g, _ = metric_tensor(conf, graph)
        g_fd = fd_jacobian_gram(local, graph, phi)
        assert np.abs(g - g_fd).max() / max(1.0, np.abs(g_fd).max()) < 1e-6


def test_metric_analytic_matches_fd_jacobian_directly(rng):
    # the per-atom analytic derivative itself (not just the Gram) matches FD
    graph, local = make_chain(5)
    phi = rng.uniform(0, TWO_PI, size=2)
    conf = set_torsions(local, TorusPoint(phi), graph)
    h = 1e-6
    for i, t in enumerate(graph.torsions):
        up = phi.copy(); up[i] += h
        down = phi.copy(); down[i] -= h
        fd = (set_torsions(local, TorusPoint(up), graph).coords
              - set_torsions(local, TorusPoint(down), graph).coords) / (2 * h)
        axis = conf.coords[t.c] - conf.coords[t.b]
        axis /= np.linalg.norm(axis)
        analytic = np.zeros_like(fd)
        for l in sorted(t.moving_side):
            analytic[l] = np.cross(axis, conf.coords[l] - conf.coords[t.c])
        assert np.abs(analytic - fd).max() < 1e-6


def test_metric_disjoint_torsions_nearly_diagonal(rng):
    # bonds oriented so the two moving sides are the opposite chain ends
    atoms = tuple(Atom(element="C", atomic_number=6, degree=(1 if i in (0, 6) else 2),
                       hybridization="sp3") for i in range(7))
    bonds = (Bond(i=1, j=0, order="single"), Bond(i=2, j=1, order="single"),
             Bond(i=2, j=3, order="single"), Bond(i=3, j=4, order="single"),
             Bond(i=4, j=5, order="single"), Bond(i=5, j=6, order="single"))
    torsions = [t for t in detect_torsions(atoms, bonds) if (t.b, t.c) in ((2, 1), (4, 5))]
    graph = MoleculeGraph(atoms=atoms, bonds=bonds, torsions=tuple(torsions), name="ends")
    assert {t.moving_side for t in graph.torsions} == {frozenset({0, 1}), frozenset({5, 6})}
    coords = np.zeros((7, 3))
    for i in range(1, 7):
        direction = np.array([1.0, 0.35 * (-1) ** i, 0.1 * (i % 3)])
        coords[i] = coords[i - 1] + 1.5 * direction / np.linalg.norm(direction)
    conf = Conformation(coords=coords)
    g, det = metric_tensor(conf, graph)
    assert abs(g[0, 1]) < 1e-9 * max(g[0, 0], g[1, 1])  # disjoint sides: exactly zero overlap
    assert det == pytest.approx(g[0, 0] * g[1, 1], rel=1e-9)
    local = LocalStructure(reference=conf)
    phi = measure_torsions(conf, graph).phi
    g_fd = fd_jacobian_gram(local, graph, phi)
    assert np.abs(g - g_fd).max() / np.abs(g_fd).max() < 1e-6


def test_batch_kernels_match_scalar(rng):
    from torsamp.geometry import batch_measure_torsions, batch_set_torsions

    graph, local = make_chain(5)
    phis = rng.uniform(0, TWO_PI, size=(40, 2))
    batch = batch_set_torsions(local.reference.coords, phis, graph)
    for k, phi in enumerate(phis):
        single = set_torsions(local, TorusPoint(phi), graph)
        np.testing.assert_allclose(batch[k], single.coords, atol=1e-12)
    measured = batch_measure_torsions(batch, graph)
    for k in range(len(phis)):
        single = measure_torsions(Conformation(coords=batch[k]), graph)
        np.testing.assert_allclose(measured[k], single.phi, atol=1e-12)


def test_batch_set_torsions_per_row_references(rng):
    from torsamp.geometry import batch_measure_torsions, batch_set_torsions

    graph, local = make_chain(5)
    refs = np.stack([
        rotate_torsions(local.reference, graph, rng.uniform(-1, 1, size=2)).coords
        for _ in range(8)
    ])
    phis = rng.uniform(0, TWO_PI, size=(8, 2))
    out = batch_set_torsions(refs, phis, graph)
    got = batch_measure_torsions(out, graph)
    assert np.abs(wrapped_delta(got, phis)).max() < 1e-9


def test_conformation_validation():
    with pytest.raises(GeometryError, match="closer"):
        Conformation(coords=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1e-8]]))
    with pytest.raises(GeometryError, match="finite"):
        Conformation(coords=np.array([[0.0, 0.0, np.nan], [1.0, 0.0, 0.0]]))

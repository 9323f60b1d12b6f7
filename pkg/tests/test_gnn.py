import math

import numpy as np
import pytest
import torch

from torsamp.geometry import TorusPoint, random_rotation, set_torsions
from torsamp.gnn import MoleculeFeatures, TorqueGNN, TorqueGNNConfig
from torsamp.molio import TorsionSpec, MoleculeGraph
from torsamp.torus import TWO_PI, vm_mixture_logpdf_t

from helpers import finite_diff_store_grads, make_chain, max_rel_error, mirror_matrix


@pytest.fixture(scope="module")
def net():
    return TorqueGNN(TorqueGNNConfig(), np.random.default_rng(0))


@pytest.fixture(scope="module")
def chain5():
    graph, local = make_chain(5)
    return graph, local, MoleculeFeatures(graph)


def _coords(local, graph, phi):
    return set_torsions(local, TorusPoint(np.asarray(phi)), graph).coords


def _as_batch(coords):
    return torch.as_tensor(np.asarray(coords), dtype=torch.float64).unsqueeze(0)


def test_embeddings_se3_invariant(net, chain5, rng):
    graph, local, feats = chain5
    coords = _coords(local, graph, [1.0, 2.5])
    t = torch.tensor([2.0])
    with torch.no_grad():
        h0 = net.encode(_as_batch(coords), feats, t)
        for _ in range(20):
            rot = random_rotation(rng)
            shift = rng.normal(size=3) * 4.0
            h1 = net.encode(_as_batch(coords @ rot.T + shift), feats, t)
            assert float((h0 - h1).abs().max()) < 1e-9


def test_symmetric_atoms_same_embedding(net):
    graph, local = make_chain(4)
    feats = MoleculeFeatures(graph)
    # the planar zig-zag reference is symmetric under end-for-end exchange
    h = net.encode(_as_batch(local.reference.coords), feats, torch.tensor([1.0]))[0]
    assert float((h[0] - h[3]).abs().max()) < 1e-9
    assert float((h[1] - h[2]).abs().max()) < 1e-9


def test_embedding_sensitivity_to_geometry(net, chain5):
    graph, local, feats = chain5
    coords = _coords(local, graph, [1.0, 2.5])
    t = torch.tensor([2.0])
    h0 = net.encode(_as_batch(coords), feats, t)
    moved = coords.copy()
    moved[0] += np.array([0.1, 0.0, 0.0])
    h1 = net.encode(_as_batch(moved), feats, t)
    assert float((h0 - h1).abs().max()) > 0.0


def test_pseudo_scalars_flip_under_mirror(net, chain5, rng):
    graph, local, feats = chain5
    t = torch.tensor([3.0])
    for _ in range(20):
        coords = _coords(local, graph, rng.uniform(0, TWO_PI, size=2))
        s = net.pseudo_scalars(_as_batch(coords), feats, t)
        s_mirror = net.pseudo_scalars(_as_batch(coords @ mirror_matrix().T), feats, t)
        assert float((s + s_mirror).abs().max()) < 1e-9


def test_mixture_params_mirror_equivariance(net, chain5, rng):
    graph, local, feats = chain5
    t = torch.tensor([3.0])
    for _ in range(20):
        coords = _coords(local, graph, rng.uniform(0, TWO_PI, size=2))
        w0, mu0, k0 = net.mixture_params_t(_as_batch(coords), feats, t)
        w1, mu1, k1 = net.mixture_params_t(_as_batch(coords @ mirror_matrix().T), feats, t)
        assert float((w0 - w1).abs().max()) < 1e-9
        assert float((k0 - k1).abs().max()) < 1e-9
        # mu negates on the circle
        delta = torch.remainder(mu0 + mu1, TWO_PI)
        delta = torch.minimum(delta, TWO_PI - delta)
        assert float(delta.abs().max()) < 1e-9


def test_planar_conformation_zero_pseudo_scalars(net):
    graph, local = make_chain(4)
    feats = MoleculeFeatures(graph)
    # the planar reference is its own mirror image through its plane
    s = net.pseudo_scalars(_as_batch(local.reference.coords), feats, torch.tensor([1.0]))
    assert float(s.abs().max()) < 1e-9


def test_zero_pseudo_scalars_give_uniform_policy(net):
    graph, local = make_chain(4)
    feats = MoleculeFeatures(graph)
    with torch.no_grad():
        w, mu, kappa = net.mixture_params_t(
            _as_batch(local.reference.coords), feats, torch.tensor([1.0])
        )
    K = net.config.n_components
    np.testing.assert_allclose(w[0].numpy(), np.full((1, K), 1.0 / K), atol=1e-12)
    np.testing.assert_allclose(mu[0].numpy(), 0.0, atol=1e-12)
    np.testing.assert_allclose(kappa[0].numpy(), 0.0, atol=1e-12)


def test_directed_edge_antisymmetry(net, chain5, rng):
    graph, local, feats = chain5
    t = torch.tensor([2.0])
    coords = _coords(local, graph, rng.uniform(0, TWO_PI, size=2))
    s_fwd = net.pseudo_scalars(_as_batch(coords), feats, t)
    s_rev = net.pseudo_scalars(_as_batch(coords), feats, t, reverse=True)
    assert float((s_fwd + s_rev).abs().max()) < 1e-12
    # so the readout satisfies o_ij = -o_ji
    o_f = torch.sin(s_fwd @ net.store["head.inner.W"].T) @ net.store["head.outer.W"].T
    o_r = torch.sin(s_rev @ net.store["head.inner.W"].T) @ net.store["head.outer.W"].T
    assert float((o_f + o_r).abs().max()) < 1e-12


def test_permutation_invariance(net, rng):
    graph, local = make_chain(5)
    perm = np.array([4, 2, 0, 1, 3])  # new index of each old atom
    atoms_new = [None] * 5
    for old, new in enumerate(perm):
        atoms_new[new] = graph.atoms[old]
    from torsamp.molio import Bond

    bonds_new = tuple(
        Bond(i=int(perm[b.i]), j=int(perm[b.j]), order=b.order) for b in graph.bonds
    )
    torsions_new = tuple(
        TorsionSpec(a=int(perm[t.a]), b=int(perm[t.b]), c=int(perm[t.c]), d=int(perm[t.d]),
                    moving_side=frozenset(int(perm[x]) for x in t.moving_side))
        for t in graph.torsions
    )
    graph_new = MoleculeGraph(atoms=tuple(atoms_new), bonds=bonds_new,
                              torsions=torsions_new, name="permuted")
    feats_old = MoleculeFeatures(graph)
    feats_new = MoleculeFeatures(graph_new)
    coords = _coords(local, graph, rng.uniform(0, TWO_PI, size=2))
    coords_new = np.empty_like(coords)
    coords_new[perm] = coords
    t = torch.tensor([2.0])
    w0, mu0, k0 = net.mixture_params_t(_as_batch(coords), feats_old, t)
    w1, mu1, k1 = net.mixture_params_t(_as_batch(coords_new), feats_new, t)
    assert float((w0 - w1).abs().max()) < 1e-9
    assert float((mu0 - mu1).abs().max()) < 1e-9
    assert float((k0 - k1).abs().max()) < 1e-9


def test_kappa_respects_ceiling(rng):
    config = TorqueGNNConfig(kappa_max=500.0)
    net = TorqueGNN(config, np.random.default_rng(3))
    with torch.no_grad():
        net.store["head.outer.W"].mul_(1e4)  # blow up the readout
    graph, local = make_chain(5)
    feats = MoleculeFeatures(graph)
    coords = _coords(local, graph, rng.uniform(0, TWO_PI, size=2))
    _, _, kappa = net.mixture_params_t(_as_batch(coords), feats, torch.tensor([2.0]))
    assert float(kappa.max()) <= 500.0


def test_end_to_end_gradient_check(chain5):
    graph, local, feats = chain5
    rng = np.random.default_rng(11)
    config = TorqueGNNConfig(layers=1, hidden_dim=6, force_channels=3, n_components=2,
                             rbf_count=4, equiv_hidden=5, step_embed_dim=4)
    small = TorqueGNN(config, rng)
    coords = _as_batch(_coords(local, graph, rng.uniform(0, TWO_PI, size=2)))
    x = torch.as_tensor(rng.uniform(0, TWO_PI, size=(1, 2)), dtype=torch.float64)
    t = torch.tensor([3.0])

    def loss_fn():
        w, mu, kappa = small.mixture_params_t(coords, feats, t)
        return vm_mixture_logpdf_t(x, w, mu, kappa).sum()

    small.store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = small.store.gradient_arrays()
    numeric = finite_diff_store_grads(loss_fn, small.store)
    assert max_rel_error(analytic, numeric) < 1e-4

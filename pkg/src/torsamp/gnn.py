"""Policy network: invariant message passing, force-generated bond torques,
and a sign-equivariant readout to von Mises mixture parameters.

The backbone sees only interatomic distances and graph features, so atom
embeddings are invariant under all rigid motions and reflections. Per
rotatable bond, pairwise force amplitudes produce net force vectors whose
torques about the bond axis are projected to pseudo-scalars s: invariant
under rotation/translation, sign-flipping under reflection. The odd readout
o = W1 sin(W2 s) then yields reflection-equivariant mixture locations and
invariant weights and concentrations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import ParamStore, gelu
from .molio import BOND_ORDERS, HYBRIDIZATIONS, MoleculeGraph
from .torus import TWO_PI, DEFAULT_KAPPA_MAX, MixtureParams

ELEMENT_VOCAB = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
MAX_Z_ONEHOT = 35
MAX_DEGREE_ONEHOT = 5
N_EDGE_CLASSES = len(BOND_ORDERS) + 1  # + explicit non-bonded class
MIN_PAIR_DISTANCE = 1e-6

WEIGHT_MAPS = ("softmax_square", "square_norm", "softmax_raw")


@dataclass
class TorqueGNNConfig:
    layers: int = 3
    hidden_dim: int = 64
    force_channels: int = 8
    n_components: int = 4
    rbf_count: int = 16
    rbf_max: float = 8.0
    step_embed_dim: int = 8
    equiv_hidden: int = 64
    kappa_max: float = DEFAULT_KAPPA_MAX
    weight_map: str = "softmax_square"

    def __post_init__(self):
        for name in ("layers", "hidden_dim", "force_channels", "n_components",
                     "rbf_count", "step_embed_dim", "equiv_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_map not in WEIGHT_MAPS:
            raise ValueError(f"weight_map must be one of {WEIGHT_MAPS}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "TorqueGNNConfig":
        return TorqueGNNConfig(**d)


def atom_feature_dim() -> int:
    return (len(ELEMENT_VOCAB) + 1) + (MAX_Z_ONEHOT + 1) + (MAX_DEGREE_ONEHOT + 2) + len(HYBRIDIZATIONS)


class MoleculeFeatures:
    """Static per-molecule tensors consumed by the network."""

    def __init__(self, graph: MoleculeGraph):
        self.graph = graph
        n = graph.n_atoms
        feats = np.zeros((n, atom_feature_dim()))
        col = 0
        for i, atom in enumerate(graph.atoms):
            el = ELEMENT_VOCAB.index(atom.element) if atom.element in ELEMENT_VOCAB else len(ELEMENT_VOCAB)
            feats[i, el] = 1.0
        col += len(ELEMENT_VOCAB) + 1
        for i, atom in enumerate(graph.atoms):
            z = atom.atomic_number if atom.atomic_number <= MAX_Z_ONEHOT else 0
            feats[i, col + z] = 1.0
        col += MAX_Z_ONEHOT + 1
        for i, atom in enumerate(graph.atoms):
            deg = min(atom.degree, MAX_DEGREE_ONEHOT + 1)
            feats[i, col + deg] = 1.0
        col += MAX_DEGREE_ONEHOT + 2
        for i, atom in enumerate(graph.atoms):
            feats[i, col + HYBRIDIZATIONS.index(atom.hybridization)] = 1.0
        self.atom_features = torch.as_tensor(feats, dtype=torch.float64)

        edge = np.zeros((n, n, N_EDGE_CLASSES))
        edge[:, :, N_EDGE_CLASSES - 1] = 1.0
        for b in graph.bonds:
            k = BOND_ORDERS.index(b.order)
            edge[b.i, b.j] = 0.0
            edge[b.j, b.i] = 0.0
            edge[b.i, b.j, k] = 1.0
            edge[b.j, b.i, k] = 1.0
        self.edge_features = torch.as_tensor(edge, dtype=torch.float64)

        mask = np.ones((n, n)) - np.eye(n)
        self.pair_mask = torch.as_tensor(mask, dtype=torch.float64)

        adj = graph.adjacency
        self.torsion_bonds = []
        for t in graph.torsions:
            nb_b = tuple(k for k in adj[t.b] if k != t.c)
            nb_c = tuple(k for k in adj[t.c] if k != t.b)
            self.torsion_bonds.append((t.b, t.c, nb_b, nb_c))

    @property
    def n_atoms(self) -> int:
        return self.graph.n_atoms

    @property
    def n_torsions(self) -> int:
        return self.graph.n_torsions


def _init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, scale: float = 1.0, bias: bool = True):
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    store.register(f"{name}.W", rng.uniform(-lim, lim, size=(fan_out, fan_in)))
    if bias:
        store.register(f"{name}.b", np.zeros(fan_out))


def _linear(store: ParamStore, name: str, x: torch.Tensor) -> torch.Tensor:
    y = x @ store[f"{name}.W"].T
    if f"{name}.b" in store.params:
        y = y + store[f"{name}.b"]
    return y


class TorqueGNN:
    """The policy network; owns its ParamStore.

    One instance serves every molecule: conditioning enters through the
    per-molecule features and the 3D coordinates of the current state.
    """

    BACKBONE_PREFIXES = ("emb.", "msg", "upd", "force.")

    def __init__(self, config: TorqueGNNConfig, rng: np.random.Generator):
        self.config = config
        self.store = ParamStore()
        c = config
        pair_in = 2 * c.hidden_dim + N_EDGE_CLASSES + c.rbf_count
        _init_linear(self.store, "emb.in", atom_feature_dim() + c.step_embed_dim, c.hidden_dim, rng)
        for l in range(c.layers):
            _init_linear(self.store, f"msg{l}.l1", pair_in, c.hidden_dim, rng)
            _init_linear(self.store, f"msg{l}.l2", c.hidden_dim, c.hidden_dim, rng)
            _init_linear(self.store, f"upd{l}.l1", 2 * c.hidden_dim, c.hidden_dim, rng)
            _init_linear(self.store, f"upd{l}.l2", c.hidden_dim, c.hidden_dim, rng)
        force_in = c.hidden_dim + N_EDGE_CLASSES + c.rbf_count
        _init_linear(self.store, "force.l1", force_in, c.hidden_dim, rng)
        _init_linear(self.store, "force.l2", c.hidden_dim, c.force_channels, rng)
        # odd readout: no biases, small scale keeps the initial policy near uniform
        _init_linear(self.store, "head.inner", c.force_channels, c.equiv_hidden, rng, bias=False)
        _init_linear(self.store, "head.outer", c.equiv_hidden, 3 * c.n_components, rng,
                     scale=0.1, bias=False)
        centers = np.linspace(0.0, c.rbf_max, c.rbf_count)
        self._rbf_centers = torch.as_tensor(centers, dtype=torch.float64)
        self._rbf_gamma = 0.5 / (centers[1] - centers[0]) ** 2

    # ---- featurization -------------------------------------------------

    def _rbf(self, d: torch.Tensor) -> torch.Tensor:
        return torch.exp(-self._rbf_gamma * (d.unsqueeze(-1) - self._rbf_centers) ** 2)

    def step_embedding(self, t: torch.Tensor, n_steps: int) -> torch.Tensor:
        """Sinusoidal encoding of t/n, shape (B, step_embed_dim)."""
        tau = t.to(torch.float64) / float(n_steps)
        half = self.config.step_embed_dim // 2
        freqs = torch.pow(2.0, torch.arange(half, dtype=torch.float64)) * torch.pi
        arg = tau.unsqueeze(-1) * freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    # ---- forward pieces ------------------------------------------------

    def encode(self, coords: torch.Tensor, feats: MoleculeFeatures, t: torch.Tensor) -> torch.Tensor:
        """Message-passing embeddings h^L, shape (B, n, D); SE(3)-invariant."""
        B, n = coords.shape[0], coords.shape[1]
        diff = coords.unsqueeze(2) - coords.unsqueeze(1)
        dist = torch.sqrt((diff * diff).sum(-1) + torch.eye(n, dtype=torch.float64))
        offdiag = dist + torch.eye(n, dtype=torch.float64)
        if float(offdiag.min()) < MIN_PAIR_DISTANCE:
            raise ValueError("coincident atoms: pair distance below 1e-6 A")
        rbf = self._rbf(dist * feats.pair_mask)
        edge = feats.edge_features.expand(B, n, n, -1)
        step = self.step_embedding(t, self._n_steps).unsqueeze(1).expand(B, n, -1)
        h = _linear(self.store, "emb.in",
                    torch.cat([feats.atom_features.expand(B, n, -1), step], dim=-1))
        mask = feats.pair_mask.unsqueeze(-1)
        for l in range(self.config.layers):
            pair = torch.cat(
                [h.unsqueeze(2).expand(B, n, n, -1), h.unsqueeze(1).expand(B, n, n, -1), edge, rbf],
                dim=-1,
            )
            msg = _linear(self.store, f"msg{l}.l2", gelu(_linear(self.store, f"msg{l}.l1", pair)))
            agg = (msg * mask).sum(dim=2)
            h = _linear(self.store, f"upd{l}.l2", gelu(_linear(self.store, f"upd{l}.l1",
                                                               torch.cat([h, agg], dim=-1))))
        return h

    def net_forces(self, coords: torch.Tensor, feats: MoleculeFeatures, h: torch.Tensor) -> torch.Tensor:
        """Per-atom net force vectors from pairwise amplitudes, (B, n, C, 3)."""
        B, n = coords.shape[0], coords.shape[1]
        diff = coords.unsqueeze(2) - coords.unsqueeze(1)  # x_j - x_i at [b, i, j]
        diff = -diff  # x_ij points i -> j
        dist = torch.sqrt((diff * diff).sum(-1) + torch.eye(n, dtype=torch.float64))
        rbf = self._rbf(dist * feats.pair_mask)
        pair = torch.cat([h.unsqueeze(2) + h.unsqueeze(1),
                          feats.edge_features.expand(B, n, n, -1), rbf], dim=-1)
        amp = _linear(self.store, "force.l2", gelu(_linear(self.store, "force.l1", pair)))
        inv3 = (feats.pair_mask / dist**3).unsqueeze(-1)
        fvec = amp.unsqueeze(-1) * (diff * inv3).unsqueeze(3)  # (B, n, n, C, 3)
        return fvec.sum(dim=2)

    def torques(self, coords: torch.Tensor, feats: MoleculeFeatures,
                forces: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        """Net torque pseudo-scalars per rotatable bond, (B, m, C)."""
        if not feats.torsion_bonds:
            return torch.zeros((coords.shape[0], 0, self.config.force_channels),
                               dtype=torch.float64)
        out = []
        for b, c, nb_b, nb_c in feats.torsion_bonds:
            if reverse:
                b, c, nb_b, nb_c = c, b, nb_c, nb_b
            axis = coords[:, c] - coords[:, b]
            axis = axis / torch.linalg.vector_norm(axis, dim=-1, keepdim=True)
            t_bc = self._bond_torque(coords, forces, b, nb_b)
            t_cb = self._bond_torque(coords, forces, c, nb_c)
            proj_bc = (t_bc * axis.unsqueeze(1)).sum(-1)
            proj_cb = (t_cb * (-axis).unsqueeze(1)).sum(-1)
            out.append(proj_bc - proj_cb)
        return torch.stack(out, dim=1)

    @staticmethod
    def _bond_torque(coords, forces, i, neighbors):
        tq = torch.zeros_like(forces[:, i])
        for k in neighbors:
            lever = (coords[:, k] - coords[:, i]).unsqueeze(1)
            tq = tq + torch.linalg.cross(lever.expand_as(forces[:, k]), forces[:, k], dim=-1)
        return tq

    def mixture_head(self, s: torch.Tensor):
        """Map pseudo-scalars to (w, mu, kappa), each (B, m, K)."""
        c = self.config
        o = torch.sin(s @ self.store["head.inner.W"].T) @ self.store["head.outer.W"].T
        o = o.reshape(*s.shape[:-1], c.n_components, 3)
        o1, o2, o3 = o[..., 0], o[..., 1], o[..., 2]
        if c.weight_map == "softmax_square":
            w = torch.softmax(o1 * o1, dim=-1)
        elif c.weight_map == "square_norm":
            sq = o1 * o1 + 1e-12
            w = sq / sq.sum(dim=-1, keepdim=True)
        else:
            w = torch.softmax(o1, dim=-1)
        mu = torch.remainder(o2, TWO_PI)
        kappa = torch.clamp(o3 * o3, max=c.kappa_max)
        return w, mu, kappa

    # ---- public API ------------------------------------------------------

    _n_steps = 6  # trajectory length used by the step encoding; set by the trainer

    def set_trajectory_length(self, n_steps: int) -> None:
        self._n_steps = int(n_steps)

    def pseudo_scalars(self, coords: torch.Tensor, feats: MoleculeFeatures,
                       t: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        h = self.encode(coords, feats, t)
        forces = self.net_forces(coords, feats, h)
        return self.torques(coords, feats, forces, reverse=reverse)

    def mixture_params_t(self, coords: torch.Tensor, feats: MoleculeFeatures, t: torch.Tensor):
        """Differentiable (w, mu, kappa) tensors for a coordinate batch."""
        return self.mixture_head(self.pseudo_scalars(coords, feats, t))

    def mixture_params(self, coords: np.ndarray, feats: MoleculeFeatures, t: int) -> MixtureParams:
        """Detached single-conformation parameters for sampling."""
        with torch.no_grad():
            ct = torch.as_tensor(np.asarray(coords), dtype=torch.float64).unsqueeze(0)
            w, mu, kappa = self.mixture_params_t(ct, feats, torch.tensor([float(t)]))
        return MixtureParams(
            weights=w[0].numpy(), locations=mu[0].numpy(),
            concentrations=kappa[0].numpy(), kappa_max=self.config.kappa_max,
        )

    def backbone_arrays(self) -> dict:
        return {k: v for k, v in self.store.to_arrays().items()
                if k.startswith(self.BACKBONE_PREFIXES)}

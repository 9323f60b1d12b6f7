"""Evaluation machinery: sampler marginals, grid metrics, energy histograms,
and two-ensemble local-structure statistics.

The sampler's terminal marginal is estimated by importance sampling over
backward trajectories: log p(phi) = log mean_k exp(log PF(tau_k) -
log PB(tau_k | phi)), tau_k ~ PB(.|phi). Grid metrics compare the
grid-normalized sampler distribution with the grid-normalized reward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import Conformation, LocalStructure, TorusPoint, set_torsions
from .gfn import Condition, _mixture_logpdf_np, _policy_params_np, _sample_rows
from .gnn import TorqueGNN
from .molio import MoleculeGraph
from .torus import LOG_TWO_PI, TWO_PI


# ---- divergences ---------------------------------------------------------


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def _kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def pearson(x: np.ndarray, y: np.ndarray):
    """Pearson correlation with an explicit degenerate status."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sx = x.std()
    sy = y.std()
    if sx < 1e-300 or sy < 1e-300:
        return float("nan"), "undefined: zero variance"
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy)), None


# ---- grids ----------------------------------------------------------------


def build_eval_grid(m: int, side: int = 100, mode: str = "regular",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Grid points on the m-torus, shape (side**m, m).

    Regular mode places cell centers (no duplicated seam); random mode draws
    uniformly for a literal reading of "uniformly sampled points".
    """
    if mode == "random":
        if rng is None:
            raise ValueError("random grid needs an rng")
        return rng.uniform(0.0, TWO_PI, size=(side**m, m))
    axes = [(np.arange(side) + 0.5) * TWO_PI / side for _ in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([ax.ravel() for ax in mesh], axis=-1)


@dataclass
class GridMetrics:
    jsd_p: float
    rho_log: float
    rho_status: str | None = None


def grid_metrics(log_r: np.ndarray, log_pt: np.ndarray) -> GridMetrics:
    """Compare grid-normalized reward and sampler distributions."""
    log_r = np.asarray(log_r, dtype=float)
    log_pt = np.asarray(log_pt, dtype=float)
    if not (np.all(np.isfinite(log_r)) and np.all(np.isfinite(log_pt))):
        raise ValueError("grid arrays must be finite")
    p = _softmax(log_r)
    q = _softmax(log_pt)
    rho, status = pearson(log_pt, log_r)
    return GridMetrics(jsd_p=jsd(q, p), rho_log=rho, rho_status=status)


def _softmax(log_x: np.ndarray) -> np.ndarray:
    z = log_x - log_x.max()
    e = np.exp(z)
    return e / e.sum()


# ---- sampler marginal ------------------------------------------------------


def estimate_log_pT_batch(points: np.ndarray, cond: Condition, pf: TorqueGNN,
                          pb: TorqueGNN, n_steps: int, n_trajectories: int,
                          rng: np.random.Generator, chunk: int = 2048) -> np.ndarray:
    """Importance-sampling estimate of log p(terminal) for many points.

    Draws n_trajectories backward walks per point and averages the forward/
    backward density ratio with a max-shifted log-sum-exp.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    P, m = points.shape
    N = int(n_trajectories)
    flat = np.repeat(points, N, axis=0)
    ratios = np.empty(P * N)
    for start in range(0, P * N, chunk):
        cur = flat[start : start + chunk]
        B = cur.shape[0]
        log_pf = np.full(B, -m * LOG_TWO_PI)
        log_pb = np.zeros(B)
        state = cur.copy()
        for t in range(n_steps, 1, -1):
            wb, mub, kb = _policy_params_np(pb, cond, state, t)
            prev = _sample_rows(wb, mub, kb, rng)
            log_pb += _mixture_logpdf_np(prev, wb, mub, kb)
            wf, muf, kf = _policy_params_np(pf, cond, prev, t)
            log_pf += _mixture_logpdf_np(state, wf, muf, kf)
            state = prev
        ratios[start : start + B] = log_pf - log_pb
    ratios = ratios.reshape(P, N)
    shift = ratios.max(axis=1, keepdims=True)
    return (shift[:, 0] + np.log(np.exp(ratios - shift).mean(axis=1)))


def estimate_log_pT(phi, cond: Condition, pf: TorqueGNN, pb: TorqueGNN,
                    n_steps: int, n_trajectories: int, rng: np.random.Generator) -> float:
    phi = phi.phi if isinstance(phi, TorusPoint) else np.asarray(phi, dtype=float)
    return float(
        estimate_log_pT_batch(phi[None, :], cond, pf, pb, n_steps, n_trajectories, rng)[0]
    )


# ---- energy histograms -----------------------------------------------------


@dataclass
class EnergyHistogramMetrics:
    jsd_gfn: float
    jsd_rand: float
    ratio: float
    clamped_model: int
    clamped_random: int
    edges: np.ndarray
    hist_reference: np.ndarray
    hist_model: np.ndarray
    hist_random: np.ndarray
    status: str | None = None


def energy_histogram_metrics(reference, model, random, bins: int = 50) -> EnergyHistogramMetrics:
    """Histogram JSDs over the reference energy range; ratio < 1 beats random.

    Bin edges span the reference ensemble only; out-of-range model/random
    energies are excluded from the normalized mass and counted separately.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.size == 0:
        raise ValueError("reference ensemble is empty")
    model = np.asarray(model, dtype=float)
    random = np.asarray(random, dtype=float)
    lo, hi = float(reference.min()), float(reference.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)

    def _hist(values):
        counts, _ = np.histogram(values, bins=edges)
        in_range = int(counts.sum())
        clamped = int(values.size - in_range)
        norm = counts / in_range if in_range else counts.astype(float)
        return norm, clamped

    h_ref, _ = _hist(reference)
    h_mod, clamp_mod = _hist(model)
    h_rnd, clamp_rnd = _hist(random)
    status = None
    jsd_gfn = jsd(h_ref, h_mod) if h_mod.sum() else float("nan")
    jsd_rand = jsd(h_ref, h_rnd) if h_rnd.sum() else float("nan")
    if not np.isfinite(jsd_gfn) or not np.isfinite(jsd_rand):
        status = "undefined: a histogram has no in-range mass"
        ratio = float("nan")
    elif jsd_rand == 0.0:
        status = "undefined: JSD against random is zero"
        ratio = float("nan")
    else:
        ratio = jsd_gfn / jsd_rand
    return EnergyHistogramMetrics(
        jsd_gfn=jsd_gfn, jsd_rand=jsd_rand, ratio=ratio,
        clamped_model=clamp_mod, clamped_random=clamp_rnd,
        edges=edges, hist_reference=h_ref, hist_model=h_mod, hist_random=h_rnd,
        status=status,
    )


# ---- zero-shot sampling over an ensemble -----------------------------------


def sample_with_md_structures(graph: MoleculeGraph, frames, pf: TorqueGNN, oracle,
                              n_steps: int, rng: np.random.Generator,
                              uniform: bool = False, chunk: int = 512):
    """One policy draw per ensemble frame, treating each frame as the local structure.

    With uniform=True the policy is replaced by uniform torsions (the random
    baseline). Returns (conformations, energies, torsion_vectors).
    """
    from .geometry import batch_set_torsions

    m = graph.n_torsions
    all_confs: list = []
    all_phis = np.empty((len(frames), m))
    for start in range(0, len(frames), chunk):
        ref = np.stack([f.coords for f in frames[start : start + chunk]])
        B = ref.shape[0]
        phi = rng.uniform(0.0, TWO_PI, size=(B, m))
        if not uniform:
            for t in range(2, n_steps + 1):
                coords = batch_set_torsions(ref, phi, graph)
                with torch.no_grad():
                    tt = torch.full((B,), float(t), dtype=torch.float64)
                    w, mu, kappa = pf.mixture_params_t(
                        torch.as_tensor(coords, dtype=torch.float64), _feats_for(pf, graph), tt
                    )
                phi = _sample_rows(w.numpy(), mu.numpy(), kappa.numpy(), rng)
        final = batch_set_torsions(ref, phi, graph)
        all_confs += [Conformation(coords=c, graph_ref=graph.name) for c in final]
        all_phis[start : start + B] = phi
    energies = np.asarray(oracle.energy_batch(all_confs), dtype=float)
    return all_confs, energies, all_phis


_feats_cache: dict = {}


def _feats_for(net: TorqueGNN, graph: MoleculeGraph):
    from .gnn import MoleculeFeatures

    key = (id(net), id(graph))
    if key not in _feats_cache:
        _feats_cache[key] = MoleculeFeatures(graph)
    return _feats_cache[key]


# ---- local-structure statistics --------------------------------------------


@dataclass
class FeatureStats:
    kind: str  # "bond" or "angle"
    atoms: tuple
    values_a: np.ndarray
    values_b: np.ndarray
    var_ratio: float
    edges: np.ndarray
    hist_a: np.ndarray
    hist_b: np.ndarray


def local_structure_stats(ensemble_a, ensemble_b, graph: MoleculeGraph,
                          bins: int = 50) -> list:
    """Per-bond length and per-angle distributions for two ensembles."""
    for ens, label in ((ensemble_a, "A"), (ensemble_b, "B")):
        for f in ens:
            if f.n_atoms != graph.n_atoms:
                raise ValueError(f"ensemble {label}: frame does not match the graph")

    def _bond_lengths(ens, i, j):
        return np.array([np.linalg.norm(f.coords[i] - f.coords[j]) for f in ens])

    def _angles(ens, j, i, k):
        out = np.empty(len(ens))
        for idx, f in enumerate(ens):
            v1 = f.coords[j] - f.coords[i]
            v2 = f.coords[k] - f.coords[i]
            cosang = np.dot(v1, v2) / (np.linalg.norm(v1) * np.linalg.norm(v2))
            out[idx] = math.acos(max(-1.0, min(1.0, cosang)))
        return out

    features = []
    for b in graph.bonds:
        va = _bond_lengths(ensemble_a, b.i, b.j)
        vb = _bond_lengths(ensemble_b, b.i, b.j)
        features.append(("bond", (b.i, b.j), va, vb))
    for i, nbrs in enumerate(graph.adjacency):
        for a_idx in range(len(nbrs)):
            for b_idx in range(a_idx + 1, len(nbrs)):
                j, k = nbrs[a_idx], nbrs[b_idx]
                features.append(("angle", (j, i, k),
                                 _angles(ensemble_a, j, i, k),
                                 _angles(ensemble_b, j, i, k)))
    out = []
    for kind, atoms, va, vb in features:
        lo = min(va.min(), vb.min())
        hi = max(va.max(), vb.max())
        if hi <= lo:
            hi = lo + 1e-9
        edges = np.linspace(lo, hi, bins + 1)
        ha, _ = np.histogram(va, bins=edges)
        hb, _ = np.histogram(vb, bins=edges)
        var_b = vb.var()
        ratio = float(va.var() / var_b) if var_b > 0 else float("nan")
        out.append(FeatureStats(kind=kind, atoms=atoms, values_a=va, values_b=vb,
                                var_ratio=ratio, edges=edges,
                                hist_a=ha / max(len(va), 1), hist_b=hb / max(len(vb), 1)))
    return out


# ---- reports and plots ------------------------------------------------------


def write_report(path, per_condition: dict) -> None:
    """JSON report: one entry per condition with all computed metrics."""
    Path(path).write_text(json.dumps(per_condition, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def emit_heatmap(path, values: np.ndarray, side: int, title: str = "") -> None:
    """Rasterize a torus grid (side x side) as a PNG heatmap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.4))
    img = ax.imshow(values.reshape(side, side).T, origin="lower",
                    extent=(0, TWO_PI, 0, TWO_PI), aspect="auto", cmap="viridis")
    ax.set_xlabel("phi_1 (rad)")
    ax.set_ylabel("phi_2 (rad)")
    if title:
        ax.set_title(title)
    fig.colorbar(img, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_energy_histograms(path, metrics: EnergyHistogramMetrics, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = 0.5 * (metrics.edges[:-1] + metrics.edges[1:])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    width = metrics.edges[1] - metrics.edges[0]
    ax.bar(centers, metrics.hist_reference, width=width, alpha=0.5, label="reference")
    ax.bar(centers, metrics.hist_model, width=width, alpha=0.5, label="model")
    ax.bar(centers, metrics.hist_random, width=width, alpha=0.4, label="random")
    ax.set_xlabel("energy")
    ax.set_ylabel("probability")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

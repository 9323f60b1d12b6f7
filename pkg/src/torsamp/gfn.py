"""Trajectory sampling, the VarGrad objective, reward-prioritized replay,
and the conditional training loop.

A trajectory starts at an abstract source, takes a uniform first step onto
the torus, then n-1 policy-driven von Mises mixture steps. Behavior policies
may be epsilon-greedy or backward-from-replay; the objective stays valid
because accumulated log-densities always belong to the trained policies, not
the behavior mixture.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffcore
from .diffcore import ParamStore, adam_step, backward, load_checkpoint, save_checkpoint
from .energy import Reward
from .geometry import LocalStructure, TorusPoint, set_torsions
from .gnn import MoleculeFeatures, TorqueGNN, TorqueGNNConfig
from .molio import MoleculeGraph
from .torus import (
    LOG_TWO_PI,
    TWO_PI,
    MixtureParams,
    Trajectory,
    _sample_von_mises,
    vm_mixture_logpdf_t,
    wrapped_linf,
)

logger = logging.getLogger("torsamp.gfn")


class TrainDivergedError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is kept."""


@dataclass
class Condition:
    """One (molecular graph, local structure) training condition."""

    graph: MoleculeGraph
    local: LocalStructure
    reward: Reward
    condition_id: str
    feats: MoleculeFeatures = None

    def __post_init__(self):
        if self.feats is None:
            self.feats = MoleculeFeatures(self.graph)

    @property
    def m(self) -> int:
        return self.graph.n_torsions


@dataclass
class TrainConfig:
    trajectory_length: int = 6
    epsilon: float = 0.5
    replay_fraction: float = 0.5
    trajectories_per_condition: int = 64
    conditions_per_batch: int = 0  # 0 means every condition each step
    n_train_steps: int = 20000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    replay_capacity: int = 1000
    replay_diversity_radius: float = 0.1
    checkpoint_every: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must lie in [0, 1]")
        if self.trajectory_length < 1:
            raise ValueError("trajectory_length must be >= 1")
        if self.trajectories_per_condition < 2:
            raise ValueError("need at least 2 trajectories per condition")


class ReplayBuffer:
    """Bounded store of terminal states, reward-prioritized with a diversity radius.

    No two stored points lie within the wrapped L-infinity radius of each
    other; when full, the lowest-log-reward entry is evicted first.
    """

    def __init__(self, capacity: int = 1000, diversity_radius: float = 0.1):
        self.capacity = int(capacity)
        self.diversity_radius = float(diversity_radius)
        self.points: list = []
        self.log_rewards: list = []

    def __len__(self) -> int:
        return len(self.points)

    def insert(self, phi: np.ndarray, log_reward: float) -> bool:
        phi = np.asarray(phi, dtype=float)
        near = [k for k, p in enumerate(self.points)
                if wrapped_linf(p, phi) < self.diversity_radius]
        if near:
            if log_reward <= max(self.log_rewards[k] for k in near):
                return False
            for k in sorted(near, reverse=True):
                del self.points[k]
                del self.log_rewards[k]
        self.points.append(phi.copy())
        self.log_rewards.append(float(log_reward))
        while len(self.points) > self.capacity:
            k = int(np.argmin(self.log_rewards))
            del self.points[k]
            del self.log_rewards[k]
        return True

    def sample(self, k: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self.points), size=k)
        return [(self.points[i], self.log_rewards[i]) for i in idx]


# ---- sampling -----------------------------------------------------------


def _coords_batch(cond: Condition, phis: np.ndarray) -> torch.Tensor:
    from .geometry import batch_set_torsions

    coords = batch_set_torsions(cond.local.reference.coords, phis, cond.graph)
    return torch.as_tensor(coords, dtype=torch.float64)


def _policy_params_np(net: TorqueGNN, cond: Condition, phis: np.ndarray, t: int):
    with torch.no_grad():
        coords = _coords_batch(cond, phis)
        tt = torch.full((phis.shape[0],), float(t), dtype=torch.float64)
        w, mu, kappa = net.mixture_params_t(coords, cond.feats, tt)
    return w.numpy(), mu.numpy(), kappa.numpy()


def _sample_rows(w, mu, kappa, rng) -> np.ndarray:
    B, m, K = w.shape
    out = np.empty((B, m))
    for b in range(B):
        for i in range(m):
            p = w[b, i] / w[b, i].sum()
            k = rng.choice(K, p=p)
            out[b, i] = _sample_von_mises(float(mu[b, i, k]), float(kappa[b, i, k]), rng)
    return out


def _mixture_logpdf_np(x, w, mu, kappa) -> np.ndarray:
    return vm_mixture_logpdf_t(
        torch.as_tensor(x, dtype=torch.float64),
        torch.as_tensor(w, dtype=torch.float64),
        torch.as_tensor(mu, dtype=torch.float64),
        torch.as_tensor(kappa, dtype=torch.float64),
    ).numpy()


def sample_forward_batch(cond: Condition, pf: TorqueGNN, pb: TorqueGNN, n_traj: int,
                         n_steps: int, epsilon: float, rng: np.random.Generator,
                         score_backward: bool = True):
    """Sample n_traj forward trajectories with a per-step epsilon-greedy behavior.

    log_pf accumulates the policy's density of the realized steps (not the
    behavior mixture's), so the batch is valid for off-policy training.
    score_backward=False skips the backward-density passes for callers that
    recompute them differentiably anyway.
    """
    m = cond.m
    phi = rng.uniform(0.0, TWO_PI, size=(n_traj, m))
    states = [phi.copy()]
    log_pf = np.full(n_traj, -m * LOG_TWO_PI)
    for t in range(2, n_steps + 1):
        w, mu, kappa = _policy_params_np(pf, cond, phi, t)
        proposal = _sample_rows(w, mu, kappa, rng)
        take_uniform = rng.uniform(size=n_traj) < epsilon
        uniform_draw = rng.uniform(0.0, TWO_PI, size=(n_traj, m))
        nxt = np.where(take_uniform[:, None], uniform_draw, proposal)
        log_pf += _mixture_logpdf_np(nxt, w, mu, kappa)
        states.append(nxt.copy())
        phi = nxt
    log_pb = np.zeros(n_traj)
    if score_backward:
        for t in range(2, n_steps + 1):
            w, mu, kappa = _policy_params_np(pb, cond, states[t - 1], t)
            log_pb += _mixture_logpdf_np(states[t - 2], w, mu, kappa)
    log_rewards = cond.reward.log_reward_batch([TorusPoint(p) for p in phi])
    trajs = []
    for b in range(n_traj):
        trajs.append(
            Trajectory(
                states=[None] + [states[t][b] for t in range(n_steps)],
                log_pf=float(log_pf[b]),
                log_pb=float(log_pb[b]),
                log_reward=float(log_rewards[b]),
            )
        )
    return trajs


def sample_forward_trajectory(cond: Condition, pf: TorqueGNN, pb: TorqueGNN,
                              n_steps: int, epsilon: float, rng: np.random.Generator) -> Trajectory:
    return sample_forward_batch(cond, pf, pb, 1, n_steps, epsilon, rng)[0]


def sample_backward_batch(cond: Condition, pf: TorqueGNN, pb: TorqueGNN,
                          terminals, n_steps: int, rng: np.random.Generator,
                          score: bool = True):
    """Walk backward from stored terminal states under P_B, then score both ways.

    terminals is a list of (phi, log_reward) pairs, e.g. from a ReplayBuffer.
    score=False skips the density passes for callers that recompute them.
    """
    if not terminals:
        raise ValueError("empty terminal list: fall back to forward sampling")
    B = len(terminals)
    m = cond.m
    phi_n = np.stack([p for p, _ in terminals])
    log_rewards = np.array([r for _, r in terminals])
    states = [None] * (n_steps + 1)
    states[n_steps] = phi_n.copy()
    cur = phi_n
    for t in range(n_steps, 1, -1):
        w, mu, kappa = _policy_params_np(pb, cond, cur, t)
        prev = _sample_rows(w, mu, kappa, rng)
        states[t - 1] = prev.copy()
        cur = prev
    log_pf = np.full(B, -m * LOG_TWO_PI)
    log_pb = np.zeros(B)
    if score:
        for t in range(2, n_steps + 1):
            wf, muf, kf = _policy_params_np(pf, cond, states[t - 1], t)
            log_pf += _mixture_logpdf_np(states[t], wf, muf, kf)
            wb, mub, kb = _policy_params_np(pb, cond, states[t], t)
            log_pb += _mixture_logpdf_np(states[t - 1], wb, mub, kb)
    return [
        Trajectory(
            states=[None] + [states[t][b] for t in range(1, n_steps + 1)],
            log_pf=float(log_pf[b]),
            log_pb=float(log_pb[b]),
            log_reward=float(log_rewards[b]),
        )
        for b in range(B)
    ]


# ---- objective ----------------------------------------------------------


def recompute_log_probs(trajs, cond: Condition, pf: TorqueGNN, pb: TorqueGNN):
    """Differentiable per-trajectory (log_pf, log_pb) tensors from stored states."""
    B = len(trajs)
    n = trajs[0].n_steps
    m = cond.m
    base_f = torch.full((B,), -m * LOG_TWO_PI, dtype=torch.float64)
    if n < 2:
        return base_f, torch.zeros(B, dtype=torch.float64)
    prev = np.stack([traj.states[t] for traj in trajs for t in range(1, n)])
    nxt = np.stack([traj.states[t + 1] for traj in trajs for t in range(1, n)])
    t_idx = torch.as_tensor(
        np.tile(np.arange(2, n + 1, dtype=float), B), dtype=torch.float64
    )
    coords_prev = _coords_batch(cond, prev)
    wf, muf, kf = pf.mixture_params_t(coords_prev, cond.feats, t_idx)
    lp_f = vm_mixture_logpdf_t(torch.as_tensor(nxt, dtype=torch.float64), wf, muf, kf)
    coords_next = _coords_batch(cond, nxt)
    wb, mub, kb = pb.mixture_params_t(coords_next, cond.feats, t_idx)
    lp_b = vm_mixture_logpdf_t(torch.as_tensor(prev, dtype=torch.float64), wb, mub, kb)
    log_pf = base_f + lp_f.reshape(B, n - 1).sum(dim=1)
    log_pb = lp_b.reshape(B, n - 1).sum(dim=1)
    return log_pf, log_pb


def vargrad_core(log_pf: torch.Tensor, log_pb: torch.Tensor, log_reward: torch.Tensor) -> torch.Tensor:
    """Batch variance of log C = log_pb + log_reward - log_pf.

    Zero exactly when sampling is reward-proportional; invariant to constant
    shifts of the reward, hence no partition function is learned.
    """
    if log_pf.numel() < 2:
        raise ValueError("VarGrad needs at least 2 trajectories")
    log_c = log_pb + log_reward - log_pf
    log_z = log_c.mean()
    return ((log_z - log_c) ** 2).mean()


def vargrad_loss(trajs, cond: Condition, pf: TorqueGNN, pb: TorqueGNN) -> torch.Tensor:
    """Differentiable VarGrad loss for one condition's trajectory batch."""
    if len(trajs) < 2:
        raise ValueError("VarGrad needs at least 2 trajectories")
    log_pf, log_pb = recompute_log_probs(trajs, cond, pf, pb)
    log_r = torch.as_tensor([t.log_reward for t in trajs], dtype=torch.float64)
    return vargrad_core(log_pf, log_pb, log_r)


# ---- policies and training ----------------------------------------------


def make_policies(gnn_config: TorqueGNNConfig, trajectory_length: int,
                  rng: np.random.Generator, backbone: dict | None = None):
    """Fresh forward/backward policy pair, optionally warm-started from a backbone."""
    pf = TorqueGNN(gnn_config, rng)
    pb = TorqueGNN(gnn_config, rng)
    pf.set_trajectory_length(trajectory_length)
    pb.set_trajectory_length(trajectory_length)
    if backbone is not None:
        pf.store.load_values(backbone, strict=False)
        pb.store.load_values(backbone, strict=False)
    return pf, pb


def save_policies(path, pf: TorqueGNN, pb: TorqueGNN, extra_meta: dict | None = None) -> None:
    arrays = {f"pf/{k}": v for k, v in pf.store.to_arrays().items()}
    arrays.update({f"pb/{k}": v for k, v in pb.store.to_arrays().items()})
    meta = {
        "kind": "policy_pair",
        "gnn_config": pf.config.to_dict(),
        "trajectory_length": pf._n_steps,
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, arrays, meta)


def load_policies(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "policy_pair":
        raise ValueError(f"{path}: not a policy checkpoint")
    config = TorqueGNNConfig.from_dict(meta["gnn_config"])
    rng = np.random.default_rng(0)
    pf, pb = make_policies(config, int(meta["trajectory_length"]), rng)
    pf.store.load_values({k[3:]: v for k, v in arrays.items() if k.startswith("pf/")})
    pb.store.load_values({k[3:]: v for k, v in arrays.items() if k.startswith("pb/")})
    return pf, pb, meta


def train(dataset, pf: TorqueGNN, pb: TorqueGNN, config: TrainConfig,
          out_dir, rng: np.random.Generator, log_every: int = 1):
    """Run the conditional training loop; returns the final checkpoint path.

    Per step and condition, a trajectory batch mixes epsilon-greedy forward
    rollouts with backward walks from the replay buffer, per-condition
    VarGrad losses are averaged, and one Adam step updates both policies.
    Metrics are appended as JSON lines; checkpoints are written periodically
    and on completion, and kept on divergence.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = config.trajectory_length
    pf.set_trajectory_length(n)
    pb.set_trajectory_length(n)
    buffers = {c.condition_id: ReplayBuffer(config.replay_capacity,
                                            config.replay_diversity_radius)
               for c in dataset}
    metrics_path = out_dir / "metrics.ndjson"
    last_ckpt = None
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for step in range(1, config.n_train_steps + 1):
            if 0 < config.conditions_per_batch < len(dataset):
                idx = rng.choice(len(dataset), size=config.conditions_per_batch, replace=False)
                batch_conditions = [dataset[int(i)] for i in idx]
            else:
                batch_conditions = dataset
            losses = []
            for cond in batch_conditions:
                buf = buffers[cond.condition_id]
                n_total = config.trajectories_per_condition
                n_replay = int(round(config.replay_fraction * n_total)) if len(buf) else 0
                n_fwd = n_total - n_replay
                trajs = []
                if n_fwd:
                    trajs += sample_forward_batch(cond, pf, pb, n_fwd, n,
                                                  config.epsilon, rng,
                                                  score_backward=False)
                if n_replay:
                    trajs += sample_backward_batch(cond, pf, pb,
                                                   buf.sample(n_replay, rng), n, rng,
                                                   score=False)
                log_pf_t, log_pb_t = recompute_log_probs(trajs, cond, pf, pb)
                with torch.no_grad():
                    for k, traj in enumerate(trajs):
                        traj.log_pf = float(log_pf_t[k])
                        traj.log_pb = float(log_pb_t[k])
                log_r = torch.as_tensor([t.log_reward for t in trajs], dtype=torch.float64)
                loss_c = vargrad_core(log_pf_t, log_pb_t, log_r)
                losses.append(loss_c)
                for traj in trajs:
                    buf.insert(traj.terminal, traj.log_reward)
                if step % log_every == 0:
                    metrics.write(json.dumps({
                        "step": step,
                        "condition_id": cond.condition_id,
                        "loss": float(loss_c.detach()),
                        "mean_log_reward": float(np.mean([t.log_reward for t in trajs])),
                        "buffer_size": len(buf),
                    }) + "\n")
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                metrics.flush()
                raise TrainDivergedError(
                    f"non-finite loss at step {step}; last checkpoint: {last_ckpt}"
                )
            pf.store.zero_grad()
            pb.store.zero_grad()
            backward(loss, [pf.store, pb.store])
            adam_step(pf.store, config.lr, config.beta1, config.beta2, config.adam_eps)
            adam_step(pb.store, config.lr, config.beta1, config.beta2, config.adam_eps)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                last_ckpt = out_dir / f"ckpt_{step}.bin"
                save_policies(last_ckpt, pf, pb, {"step": step})
    final = out_dir / f"ckpt_{config.n_train_steps}.bin"
    if not final.exists():
        save_policies(final, pf, pb, {"step": config.n_train_steps})
    return final

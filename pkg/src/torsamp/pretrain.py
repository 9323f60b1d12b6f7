"""Supervised pretraining of the policy backbone.

The backbone is trained to predict, from a conformation, its (standardized)
energy and the sine and cosine of every rotatable torsion. Energy and cosine
are read from invariant channels; sine comes from an odd map over the torque
pseudo-scalars so the prediction flips sign under reflection exactly like
the target. The saved checkpoint holds backbone weights only; the mixture
readout is never pretrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import adam_step, backward, gelu, load_checkpoint, save_checkpoint
from .geometry import TorusPoint, set_torsions
from .gfn import Condition, _coords_batch
from .gnn import TorqueGNN, TorqueGNNConfig, _init_linear, _linear
from .torus import TWO_PI

HEAD_PREFIX = "pre_"


@dataclass
class PretrainConfig:
    samples_per_condition: int = 10000
    train_fraction: float = 0.8
    n_train_steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    trajectory_length: int = 6  # range of the step conditioning seen in training


class PretrainDataset:
    """Uniform torsion draws with energy and sin/cos targets per condition."""

    def __init__(self):
        self.condition_ids: list = []
        self.phis: dict = {}
        self.energies_raw: dict = {}
        self.energy_stats: dict = {}
        self.train_idx: dict = {}
        self.eval_idx: dict = {}
        self.skipped: dict = {}

    def energies_std(self, cid: str) -> np.ndarray:
        mean, std = self.energy_stats[cid]
        return (self.energies_raw[cid] - mean) / std

    def save(self, path) -> None:
        payload = {}
        for cid in self.condition_ids:
            payload[f"{cid}/phis"] = self.phis[cid]
            payload[f"{cid}/energies"] = self.energies_raw[cid]
            payload[f"{cid}/stats"] = np.array(self.energy_stats[cid])
            payload[f"{cid}/train_idx"] = self.train_idx[cid]
            payload[f"{cid}/eval_idx"] = self.eval_idx[cid]
        np.savez(path, ids=np.array(self.condition_ids, dtype=object), **payload)

    @staticmethod
    def load(path) -> "PretrainDataset":
        raw = np.load(path, allow_pickle=True)
        ds = PretrainDataset()
        ds.condition_ids = [str(x) for x in raw["ids"]]
        for cid in ds.condition_ids:
            ds.phis[cid] = raw[f"{cid}/phis"]
            ds.energies_raw[cid] = raw[f"{cid}/energies"]
            ds.energy_stats[cid] = tuple(raw[f"{cid}/stats"])
            ds.train_idx[cid] = raw[f"{cid}/train_idx"]
            ds.eval_idx[cid] = raw[f"{cid}/eval_idx"]
            ds.skipped[cid] = 0
        return ds


def build_pretrain_dataset(conditions, samples_per_condition: int,
                           rng: np.random.Generator,
                           train_fraction: float = 0.8) -> PretrainDataset:
    """Draw uniform torsion vectors per condition and record oracle targets.

    The split is deterministic (leading fraction trains); energies are
    standardized per condition with train-split statistics. Oracle failures
    skip the sample and are counted.
    """
    ds = PretrainDataset()
    for cond in conditions:
        cid = cond.condition_id
        phis, energies = [], []
        skipped = 0
        for _ in range(samples_per_condition):
            phi = rng.uniform(0.0, TWO_PI, size=cond.m)
            try:
                e = cond.reward.oracle.energy(set_torsions(cond.local, TorusPoint(phi), cond.graph))
            except Exception:
                skipped += 1
                continue
            phis.append(phi)
            energies.append(e)
        phis = np.asarray(phis)
        energies = np.asarray(energies)
        n_train = int(len(phis) * train_fraction)
        train_idx = np.arange(n_train)
        eval_idx = np.arange(n_train, len(phis))
        mean = float(energies[train_idx].mean())
        std = float(energies[train_idx].std())
        if std < 1e-12:
            std = 1.0
        ds.condition_ids.append(cid)
        ds.phis[cid] = phis
        ds.energies_raw[cid] = energies
        ds.energy_stats[cid] = (mean, std)
        ds.train_idx[cid] = train_idx
        ds.eval_idx[cid] = eval_idx
        ds.skipped[cid] = skipped
    return ds


class PretrainModel:
    """Backbone plus prediction heads sharing one parameter store."""

    def __init__(self, config: TorqueGNNConfig, rng: np.random.Generator):
        self.net = TorqueGNN(config, rng)
        store = self.net.store
        d = config.hidden_dim
        _init_linear(store, f"{HEAD_PREFIX}energy.l1", d, d, rng)
        _init_linear(store, f"{HEAD_PREFIX}energy.l2", d, 1, rng)
        _init_linear(store, f"{HEAD_PREFIX}cos.l1", d, d, rng)
        _init_linear(store, f"{HEAD_PREFIX}cos.l2", d, 1, rng)
        _init_linear(store, f"{HEAD_PREFIX}sin.inner", config.force_channels,
                     config.equiv_hidden, rng, bias=False)
        _init_linear(store, f"{HEAD_PREFIX}sin.outer", config.equiv_hidden, 1, rng, bias=False)

    def forward(self, coords: torch.Tensor, feats, t: torch.Tensor):
        store = self.net.store
        h = self.net.encode(coords, feats, t)
        pooled = h.sum(dim=1)
        e_pred = _linear(store, f"{HEAD_PREFIX}energy.l2",
                         gelu(_linear(store, f"{HEAD_PREFIX}energy.l1", pooled))).squeeze(-1)
        forces = self.net.net_forces(coords, feats, h)
        s = self.net.torques(coords, feats, forces)
        bond_h = torch.stack(
            [h[:, b] + h[:, c] for b, c, _, _ in feats.torsion_bonds], dim=1
        )
        cos_pred = _linear(store, f"{HEAD_PREFIX}cos.l2",
                           gelu(_linear(store, f"{HEAD_PREFIX}cos.l1", bond_h))).squeeze(-1)
        sin_pred = (torch.sin(s @ store[f"{HEAD_PREFIX}sin.inner.W"].T)
                    @ store[f"{HEAD_PREFIX}sin.outer.W"].T).squeeze(-1)
        return e_pred, sin_pred, cos_pred


def _head_losses(model: PretrainModel, cond: Condition, phis: np.ndarray,
                 energies_std: np.ndarray, t: torch.Tensor):
    coords = _coords_batch(cond, phis)
    e_pred, sin_pred, cos_pred = model.forward(coords, cond.feats, t)
    target_e = torch.as_tensor(energies_std, dtype=torch.float64)
    target_sin = torch.as_tensor(np.sin(phis), dtype=torch.float64)
    target_cos = torch.as_tensor(np.cos(phis), dtype=torch.float64)
    mse_e = ((e_pred - target_e) ** 2).mean()
    mse_sin = ((sin_pred - target_sin) ** 2).mean()
    mse_cos = ((cos_pred - target_cos) ** 2).mean()
    return mse_e, mse_sin, mse_cos


def pretrain(dataset: PretrainDataset, conditions, model: PretrainModel,
             config: PretrainConfig, rng: np.random.Generator):
    """Mini-batch training over all conditions; returns eval MSE per head."""
    by_id = {c.condition_id: c for c in conditions}
    model.net.set_trajectory_length(config.trajectory_length)
    store = model.net.store
    for step in range(config.n_train_steps):
        cid = dataset.condition_ids[step % len(dataset.condition_ids)]
        cond = by_id[cid]
        idx = rng.choice(dataset.train_idx[cid], size=min(config.batch_size,
                                                          len(dataset.train_idx[cid])),
                         replace=False)
        t = torch.as_tensor(
            rng.integers(1, config.trajectory_length + 1, size=len(idx)).astype(float)
        )
        mse_e, mse_sin, mse_cos = _head_losses(
            model, cond, dataset.phis[cid][idx], dataset.energies_std(cid)[idx], t
        )
        loss = mse_e + mse_sin + mse_cos
        if not torch.isfinite(loss):
            raise RuntimeError(f"pretraining diverged at step {step}")
        store.zero_grad()
        backward(loss, store)
        adam_step(store, config.lr, config.beta1, config.beta2, config.adam_eps)
    return evaluate(dataset, conditions, model, config)


def evaluate(dataset: PretrainDataset, conditions, model: PretrainModel,
             config: PretrainConfig, chunk: int = 512) -> dict:
    """Eval-split MSE per head, averaged over conditions."""
    by_id = {c.condition_id: c for c in conditions}
    totals = np.zeros(3)
    count = 0
    with torch.no_grad():
        for cid in dataset.condition_ids:
            cond = by_id[cid]
            idx = dataset.eval_idx[cid]
            for start in range(0, len(idx), chunk):
                part = idx[start : start + chunk]
                t = torch.full((len(part),), 1.0, dtype=torch.float64)
                mse = _head_losses(model, cond,
                                   dataset.phis[cid][part],
                                   dataset.energies_std(cid)[part], t)
                totals += np.array([float(x) for x in mse]) * len(part)
                count += len(part)
    totals /= max(count, 1)
    return {"energy": totals[0], "sin": totals[1], "cos": totals[2],
            "total": float(totals.sum())}


def save_backbone(path, model: PretrainModel, eval_mse: dict | None = None) -> None:
    save_checkpoint(
        path,
        model.net.backbone_arrays(),
        {"kind": "pretrain_backbone", "gnn_config": model.net.config.to_dict(),
         "eval_mse": eval_mse or {}},
    )


def load_backbone(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "pretrain_backbone":
        raise ValueError(f"{path}: not a backbone checkpoint")
    return arrays, meta

"""Operator entry point: pretraining, training, sampling, evaluation,
fixture generation, and energy-server checks, driven by a declarative config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config
from .diffcore import set_threads
from .energy import (
    DEFAULT_KT_EXTERNAL,
    AnalyticOracle,
    AnalyticTorsionPotential,
    ExternalOracle,
    OracleError,
    Reward,
    tabulate_oracle,
)
from .evaluation import (
    build_eval_grid,
    emit_energy_histograms,
    emit_heatmap,
    energy_histogram_metrics,
    estimate_log_pT_batch,
    grid_metrics,
    local_structure_stats,
    sample_with_md_structures,
    write_report,
)
from .fixtures import make_fixtures
from .geometry import LocalStructure
from .gfn import Condition, TrainConfig, load_policies, make_policies, train
from .gnn import TorqueGNNConfig
from .molio import MoleculeParseError, load_conformations, load_molecule, save_conformations
from .pretrain import (
    PretrainConfig,
    PretrainModel,
    build_pretrain_dataset,
    load_backbone,
    pretrain,
    save_backbone,
)

logger = logging.getLogger("torsamp.cli")


def _setup_logging() -> None:
    level = os.environ.get("TGFN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_kt(backend: str, raw: float) -> float:
    if raw > 0:
        return raw
    return DEFAULT_KT_EXTERNAL if backend.startswith("external") else 1.0


def _gnn_config(cfg: Config) -> TorqueGNNConfig:
    g = cfg["gnn"]
    return TorqueGNNConfig(
        layers=g["layers"], hidden_dim=g["hidden_dim"], force_channels=g["force_channels"],
        n_components=g["n_components"], rbf_count=g["rbf_count"], rbf_max=g["rbf_max"],
        step_embed_dim=g["step_embed_dim"], equiv_hidden=g["equiv_hidden"],
        kappa_max=g["kappa_max"], weight_map=g["weight_map"],
    )


def _train_config(cfg: Config) -> TrainConfig:
    g = cfg["gfn"]
    return TrainConfig(
        trajectory_length=g["trajectory_length"], epsilon=g["epsilon"],
        replay_fraction=g["replay_fraction"],
        trajectories_per_condition=g["trajectories_per_condition"],
        conditions_per_batch=g["conditions_per_batch"], n_train_steps=g["n_train_steps"],
        lr=g["lr"], beta1=g["beta1"], beta2=g["beta2"], adam_eps=g["adam_eps"],
        replay_capacity=g["replay_capacity"],
        replay_diversity_radius=g["replay_diversity_radius"],
        checkpoint_every=g["checkpoint_every"],
    )


def _load_conditions(cfg: Config, config_path: Path, oracle_override: str | None = None):
    data = cfg["data"]
    if not data["conditions"]:
        raise ConfigError("[data] conditions is empty")
    backend = oracle_override or cfg["energy"]["backend"]
    kt = _resolve_kt(backend, cfg["energy"]["kT"])
    conditions = []
    for entry in data["conditions"].split(","):
        cdir = Path(entry.strip())
        if not cdir.is_absolute():
            cdir = config_path.parent / cdir
        graph = load_molecule(cdir / data["molecule_file"])
        ref_frames = load_conformations(cdir / data["reference_file"], graph)
        local = LocalStructure(reference=ref_frames[data["reference_frame"]])
        if backend == "analytic" or backend == "table":
            potential = AnalyticTorsionPotential.load(cdir / data["potential_file"])
            oracle = AnalyticOracle(potential, graph)
            if backend == "table":
                oracle = tabulate_oracle(oracle, local, graph, cfg["energy"]["table_side"])
        elif backend.startswith("external:"):
            oracle = ExternalOracle(backend[len("external:"):], graph,
                                    timeout=cfg["energy"]["external_timeout"],
                                    max_inflight=cfg["energy"]["external_max_inflight"])
        else:
            raise ConfigError(f"unknown energy backend {backend!r}")
        reward = Reward(oracle=oracle, graph=graph, local=local, kT=kt,
                        use_metric_volume=cfg["energy"]["use_metric_volume"])
        conditions.append(Condition(graph=graph, local=local, reward=reward,
                                    condition_id=cdir.name))
    return conditions


def _write_manifest(out_dir: Path, command: str, cfg: Config | None, seed: int, threads: int) -> None:
    import torch

    manifest = {
        "command": command,
        "config_sha256": cfg.sha256() if cfg else None,
        "seed": seed,
        "threads": threads,
        "versions": {
            "torsamp": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


def _common_setup(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    threads = args.threads if args.threads is not None else cfg["run"]["threads"]
    out_dir = Path(args.out_dir) if args.out_dir else Path(cfg["run"]["out_dir"])
    set_threads(threads)
    return cfg, seed, threads, out_dir


def cmd_make_fixtures(args) -> int:
    dirs = make_fixtures(args.out, which=args.which.split(","), n_frames=args.frames,
                         sigma=args.sigma, kT=args.kT, seed=args.seed or 0)
    for d in dirs:
        print(d)
    return 0


def cmd_pretrain(args) -> int:
    cfg, seed, threads, out_dir = _common_setup(args)
    conditions = _load_conditions(cfg, Path(args.config), args.oracle)
    p = cfg["pretrain"]
    pcfg = PretrainConfig(
        samples_per_condition=p["samples_per_condition"], train_fraction=p["train_fraction"],
        n_train_steps=p["n_train_steps"], batch_size=p["batch_size"], lr=p["lr"],
        trajectory_length=cfg["gfn"]["trajectory_length"],
    )
    ss = np.random.SeedSequence(seed)
    rng_data, rng_init, rng_train = (np.random.default_rng(s) for s in ss.spawn(3))
    dataset = build_pretrain_dataset(conditions, pcfg.samples_per_condition, rng_data,
                                     pcfg.train_fraction)
    model = PretrainModel(_gnn_config(cfg), rng_init)
    mse = pretrain(dataset, conditions, model, pcfg, rng_train)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset.save(out_dir / "pretrain_dataset.npz")
    save_backbone(out_dir / "backbone.bin", model, mse)
    _write_manifest(out_dir, "pretrain", cfg, seed, threads)
    print(json.dumps({"eval_mse": mse}))
    return 0


def cmd_train(args) -> int:
    cfg, seed, threads, out_dir = _common_setup(args)
    conditions = _load_conditions(cfg, Path(args.config), args.oracle)
    tcfg = _train_config(cfg)
    ss = np.random.SeedSequence(seed)
    rng_init, rng_train = (np.random.default_rng(s) for s in ss.spawn(2))
    backbone = None
    if args.pretrained:
        backbone, _ = load_backbone(args.pretrained)
    pf, pb = make_policies(_gnn_config(cfg), tcfg.trajectory_length, rng_init, backbone)
    _write_manifest(out_dir, "train", cfg, seed, threads)
    final = train(conditions, pf, pb, tcfg, out_dir, rng_train,
                  log_every=cfg["gfn"]["log_every"])
    print(final)
    return 0


def cmd_sample(args) -> int:
    cfg, seed, threads, out_dir = _common_setup(args)
    conditions = _load_conditions(cfg, Path(args.config), args.oracle)
    if len(conditions) != 1:
        raise ConfigError("sample expects exactly one condition in the config")
    cond = conditions[0]
    pf, pb, meta = load_policies(args.ckpt)
    frames = load_conformations(args.ensemble, cond.graph)
    rng = np.random.default_rng(seed)
    confs, energies, _ = sample_with_md_structures(
        cond.graph, frames, pf, cond.reward.oracle,
        int(meta["trajectory_length"]), rng, uniform=args.uniform,
    )
    for conf, e in zip(confs, energies):
        object.__setattr__(conf, "energy", float(e))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_conformations(confs, cond.graph, out_path)
    _write_manifest(out_dir, "sample", cfg, seed, threads)
    print(f"{out_path} ({len(confs)} frames)")
    return 0


def cmd_eval(args) -> int:
    cfg, seed, threads, out_dir = _common_setup(args)
    conditions = _load_conditions(cfg, Path(args.config), args.oracle)
    pf, pb, meta = load_policies(args.ckpt)
    n_steps = int(meta["trajectory_length"])
    ev = cfg["evalsuite"]
    side = args.grid if args.grid else ev["grid_side"]
    rng = np.random.default_rng(seed)
    report = {}
    out_dir.mkdir(parents=True, exist_ok=True)
    for cond in conditions:
        entry = {}
        if cond.m in (1, 2):
            points = build_eval_grid(cond.m, side, ev["grid_mode"], rng)
            log_r = cond.reward.log_reward_batch([_tp(p) for p in points])
            log_pt = estimate_log_pT_batch(points, cond, pf, pb, n_steps,
                                           ev["n_trajectories"], rng)
            gm = grid_metrics(log_r, log_pt)
            entry.update({"jsd_p": gm.jsd_p, "rho_log": gm.rho_log,
                          "rho_status": gm.rho_status, "grid_points": len(points)})
            if args.plots and cond.m == 2:
                emit_heatmap(out_dir / f"{cond.condition_id}_log_reward.png", log_r, side,
                             f"{cond.condition_id}: log reward")
                emit_heatmap(out_dir / f"{cond.condition_id}_log_pT.png", log_pt, side,
                             f"{cond.condition_id}: log p_T")
        ensemble_path = _condition_dir(cfg, Path(args.config), cond) / cfg["data"]["ensemble_file"]
        if args.ensemble:
            ensemble_path = Path(args.ensemble)
        if ensemble_path.exists():
            frames = load_conformations(ensemble_path, cond.graph)
            ref_energies = np.array(
                [f.energy if f.energy is not None else cond.reward.oracle.energy(f)
                 for f in frames]
            )
            _, model_e, _ = sample_with_md_structures(cond.graph, frames, pf,
                                                      cond.reward.oracle, n_steps, rng)
            _, rand_e, _ = sample_with_md_structures(cond.graph, frames, pf,
                                                     cond.reward.oracle, n_steps, rng,
                                                     uniform=True)
            hm = energy_histogram_metrics(ref_energies, model_e, rand_e, ev["energy_bins"])
            entry.update({
                "jsd_gfn": hm.jsd_gfn, "jsd_rand": hm.jsd_rand, "ratio": hm.ratio,
                "clamped_model": hm.clamped_model, "clamped_random": hm.clamped_random,
                "histogram_status": hm.status,
            })
            if args.plots:
                emit_energy_histograms(out_dir / f"{cond.condition_id}_energies.png", hm,
                                       cond.condition_id)
        report[cond.condition_id] = entry
    write_report(out_dir / "report.json", report)
    _write_manifest(out_dir, "eval", cfg, seed, threads)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _tp(p):
    from .geometry import TorusPoint

    return TorusPoint(p)


def _condition_dir(cfg: Config, config_path: Path, cond: Condition) -> Path:
    for entry in cfg["data"]["conditions"].split(","):
        cdir = Path(entry.strip())
        if not cdir.is_absolute():
            cdir = config_path.parent / cdir
        if cdir.name == cond.condition_id:
            return cdir
    return config_path.parent


def cmd_serve_check(args) -> int:
    if not args.oracle.startswith("external:"):
        print("serve-check requires --oracle external:<command>", file=sys.stderr)
        return 1
    graph = load_molecule(args.molecule)
    frames = load_conformations(args.reference, graph)
    with ExternalOracle(args.oracle[len("external:"):], graph,
                        timeout=args.timeout) as oracle:
        e = oracle.energy(frames[0])
    print(json.dumps({"ok": True, "units": oracle.units, "energy": e}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torsamp",
                                     description="Torsion-angle Boltzmann sampler")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--oracle", default=None,
                       help="analytic | table | external:<server command>")

    p = sub.add_parser("make-fixtures", help="emit toy molecules and synthetic ensembles")
    p.add_argument("--out", required=True)
    p.add_argument("--which", default="toy1,toy2")
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--kT", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_fixtures)

    p = sub.add_parser("pretrain", help="supervised backbone pretraining")
    _common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="train the sampler")
    _common(p)
    p.add_argument("--pretrained", default=None, help="backbone checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw torsions for every ensemble frame")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uniform", action="store_true", help="random baseline")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="grid metrics and energy histograms")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--grid", type=int, default=None, help="grid side length")
    p.add_argument("--ensemble", default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve-check", help="handshake an external energy server")
    p.add_argument("--oracle", required=True)
    p.add_argument("--molecule", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(fn=cmd_serve_check)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, MoleculeParseError, OracleError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import sys, time, tempfile
import numpy as np, torch
torch.set_num_threads(1)
sys.path.insert(0, "tests")
from helpers import make_chain
from torsamp.energy import AnalyticOracle, Reward
from torsamp.fixtures import toy1_potential
from torsamp.gfn import Condition, TrainConfig, make_policies, train
from torsamp.gnn import TorqueGNNConfig
from torsamp.evaluation import build_eval_grid, estimate_log_pT_batch, grid_metrics

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
graph, local = make_chain(4, "toy1")
reward = Reward(oracle=AnalyticOracle(toy1_potential(), graph), graph=graph, local=local, kT=1.0)
cond = Condition(graph=graph, local=local, reward=reward, condition_id="toy1")
gc = TorqueGNNConfig(layers=2, hidden_dim=32, equiv_hidden=32)
rng = np.random.default_rng(0)
pf, pb = make_policies(gc, 6, rng)
cfg = TrainConfig(trajectory_length=6, trajectories_per_condition=32, n_train_steps=steps,
                  checkpoint_every=0, lr=1e-3, epsilon=0.5, replay_fraction=0.5)
t0 = time.time()
with tempfile.TemporaryDirectory() as d:
    train([cond], pf, pb, cfg, d, rng)
    import json
    lines = [json.loads(l) for l in open(f"{d}/metrics.ndjson")]
print(f"train {steps} steps: {time.time()-t0:.0f}s; loss first={np.mean([l['loss'] for l in lines[:50]]):.4f} last={np.mean([l['loss'] for l in lines[-50:]]):.4f}")

points = build_eval_grid(1, 100)
log_r = cond.reward.log_reward_batch(points)
for N in (10, 100):
    t0 = time.time()
    log_pt = estimate_log_pT_batch(points, cond, pf, pb, 6, N, rng)
    gm = grid_metrics(log_r, log_pt)
    print(f"N={N}: jsd_p={gm.jsd_p:.4f} rho_log={gm.rho_log:.4f}  ({time.time()-t0:.0f}s)")

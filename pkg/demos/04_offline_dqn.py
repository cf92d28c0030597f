"""
Offline DQN inside the residual kernel, on stochastic cart-pole
===============================================================

The agent only ever sees logged transitions.  Training episodes are rolled
inside the learned kernel (model prediction + drawn residual); evaluation
rolls the greedy policy in the real environment.  The paired baseline trains
on the bare model, which tends to look great in training and fall over in
the real environment.

Scaled down to run in about a minute.  The full-scale study is
    residual-rl compare-models --env cartpole --n 1000 --episodes 1000 \
        --seeds 0,1,2,3,4 --out-dir runs/compare
"""
import numpy as np

from residual_rl.dqn import DqnConfig, RegressionConfig, train, train_baseline
from residual_rl.envs import StochasticCartPole, generate_dataset

env = StochasticCartPole(noise_std=0.5)
ds = generate_dataset(env, n_trajectories=200, horizon_cap=500, seed=0)
print(f"offline dataset: {len(ds)} transitions")

cfg = DqnConfig(episodes=60, eval_every=15, eval_episodes=10, seed=0)
reg = RegressionConfig(kind="mlp", hidden=(64,), epochs=40)

res = train(ds, env, cfg, reg)
base = train_baseline(ds, env, cfg, reg)

for name, r in (("residuals", res), ("model-only", base)):
    rep = r.report
    ep, means, stds = rep.eval_curve()
    print(f"\n{name}")
    print(f"  final train return (sim)  : {rep.final_train_mean():8.1f}")
    print(f"  final eval return (real)  : {rep.final_eval_mean():8.1f}")
    for e, m, s in zip(ep, means, stds):
        print(f"    episode {e:3d}: eval {m:6.1f} +- {s:.1f}")

gap_res = abs(res.report.final_train_mean() - res.report.final_eval_mean())
gap_base = abs(base.report.final_train_mean() - base.report.final_eval_mean())
print(f"\n|train - eval| gap: residuals {gap_res:.1f} vs model-only {gap_base:.1f}")
# at 60 episodes neither agent has learned enough to exploit the simulator,
# so the gaps are close; at 1000 episodes the bare-model gap blows up by two
# orders of magnitude (the agent learns to ride the model's optimism) while
# the residual kernel's stays small.  run the compare-models line above.
print("at this scale the gaps are comparable; train longer and the bare "
      "model's sim returns detach from reality while residuals stay honest")

"""Offline deep Q-learning inside a learned transition model.

The agent never touches the real environment during training.  It fits a
next-state regressor on the offline dataset, keeps the pooled training
residuals, and rolls episodes inside the induced kernel: each simulated step
is model prediction + a uniformly drawn stored residual, projected onto the
state box.  A baseline variant drops the residuals and rolls the bare model,
which is the ablation the comparison experiments are built around.

Cost convention: the simulator minimizes cost; reported returns are negated
(so cart-pole numbers read like the familiar survival-time reward).
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from .envs import OfflineDataset
from .errors import ConfigError, NumericBlowupError
from .mdp import greedy_policy
from .nets import AdamState, MLP, adam_step, mlp_backward, mlp_forward, mlp_forward_cached, mlp_init
from .residuals import (
    EmpiricalKernel,
    ResidualSet,
    TransitionModel,
    compute_residuals,
    fit_transition_model,
    project,
)


@dataclass
class DqnConfig:
    """Knobs of the offline DQN trainer (defaults follow the cart-pole study)."""

    episodes: int = 200
    horizon_cap: int = 500
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 128
    replay_capacity: int = 10_000
    target_sync: int = 500          # hard target copy every this many grad steps
    eps_start: float = 0.9
    eps_min: float = 0.01
    eps_decay: float = 2000.0       # env steps; epsilon decays exp(-step/eps_decay)
    hidden: tuple = (64, 64)
    eval_every: int = 10            # episodes between greedy true-env evaluations
    eval_episodes: int = 20
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if not (0.0 <= self.eps_min <= self.eps_start <= 1.0):
            raise ConfigError("need 0 <= eps_min <= eps_start <= 1")
        if self.eps_decay <= 0 or self.lr <= 0:
            raise ConfigError("eps_decay and lr must be positive")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if min(self.horizon_cap, self.batch_size,
               self.replay_capacity, self.target_sync, self.eval_every,
               self.eval_episodes) < 1:
            raise ConfigError("counts must be >= 1")
        if self.batch_size > self.replay_capacity:
            raise ConfigError("batch_size cannot exceed replay_capacity")


@dataclass
class RegressionConfig:
    """How the transition model is fit before any Q-learning happens."""

    kind: str = "mlp"
    hidden: tuple = (64,)
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    ridge: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("mlp", "linear"):
            raise ConfigError(f"regressor kind must be mlp or linear, got {self.kind!r}")
        if min(self.epochs, self.batch_size) < 1 or self.lr <= 0 or self.ridge < 0:
            raise ConfigError("bad regression hyperparameters")


def epsilon_at(step: int, cfg: DqnConfig) -> float:
    """Exploration rate after `step` environment steps: exponential decay to a floor."""
    return max(cfg.eps_min, cfg.eps_start * math.exp(-step / cfg.eps_decay))


class ReplayMemory:
    """Fixed-capacity ring buffer over preallocated arrays."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self.s = np.empty((capacity, state_dim))
        self.a = np.empty(capacity, dtype=np.int64)
        self.c = np.empty(capacity)
        self.s_next = np.empty((capacity, state_dim))
        self.done = np.empty(capacity, dtype=bool)
        self._n = 0
        self._head = 0

    def __len__(self) -> int:
        return self._n

    def push(self, s, a, c, s_next, done) -> None:
        i = self._head
        self.s[i] = s
        self.a[i] = a
        self.c[i] = c
        self.s_next[i] = s_next
        self.done[i] = done
        self._head = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.choice(self._n, size=batch_size, replace=False)
        return (self.s[idx], self.a[idx], self.c[idx],
                self.s_next[idx], self.done[idx])


class NetworkQ:
    """Q-function backed by an MLP with one output head per action."""

    def __init__(self, net: MLP):
        self.net = net
        self.n_actions = net.layer_sizes[-1]

    def eval_all(self, s: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, np.asarray(s, dtype=np.float64))

    def eval(self, s: np.ndarray, a: int) -> float:
        return float(self.eval_all(s)[a])

    def eval_batch(self, s: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, s)


@dataclass
class EpisodeRecord:
    episode: int
    train_return: float
    loss_mean: float        # nan when no gradient step ran this episode
    epsilon: float          # value at the episode's last step
    eval_mean: float        # nan except on evaluation rounds
    eval_std: float


@dataclass
class TrainReport:
    """Per-episode log of one training run plus wall-clock and config echo."""

    records: list
    wall_time_s: float
    config: dict
    variant: str

    @property
    def train_returns(self) -> np.ndarray:
        return np.array([r.train_return for r in self.records])

    def eval_curve(self):
        """(episode numbers, eval means, eval stds) for evaluation rounds only."""
        eps = [(r.episode, r.eval_mean, r.eval_std)
               for r in self.records if not math.isnan(r.eval_mean)]
        if not eps:
            return np.empty(0, dtype=int), np.empty(0), np.empty(0)
        e, m, s = zip(*eps)
        return np.array(e), np.array(m), np.array(s)

    def final_eval_mean(self, rounds: int = 3) -> float:
        _, means, _ = self.eval_curve()
        if means.size == 0:
            return float("nan")
        return float(means[-rounds:].mean())

    def final_train_mean(self, tail: int = 50) -> float:
        tr = self.train_returns
        if tr.size == 0:
            return float("nan")
        return float(tr[-tail:].mean())

    def to_csv(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("episode,train_return,eval_return_mean,eval_return_std,loss_mean,epsilon\n")
            for r in self.records:
                em = "" if math.isnan(r.eval_mean) else repr(r.eval_mean)
                es = "" if math.isnan(r.eval_std) else repr(r.eval_std)
                lm = "" if math.isnan(r.loss_mean) else repr(r.loss_mean)
                fh.write(f"{r.episode},{r.train_return!r},{em},{es},{lm},{r.epsilon!r}\n")
        os.replace(tmp, path)


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    returns: np.ndarray


@dataclass
class TrainResult:
    q: NetworkQ
    model: TransitionModel
    residuals: ResidualSet
    report: TrainReport


def evaluate(q, env, episodes: int, seed, horizon_cap: int = 500) -> EvalResult:
    """Greedy rollouts in the true environment; returns are negated costs."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    policy = greedy_policy(q)
    returns = np.empty(episodes)
    for e in range(episodes):
        s = env.init_state(rng)
        total_cost = 0.0
        for _ in range(horizon_cap):
            a = policy(s)
            s, c, done = env.step(s, a, env.sample_noise(rng))
            total_cost += c
            if done:
                break
        returns[e] = -total_cost
    std = float(np.std(returns, ddof=1)) if episodes > 1 else 0.0
    return EvalResult(float(np.mean(returns)), std, returns)


def _prepare_transition(dataset: OfflineDataset, reg_cfg: RegressionConfig, seed: int):
    model = fit_transition_model(
        dataset, kind=reg_cfg.kind, ridge=reg_cfg.ridge, hidden=reg_cfg.hidden,
        seed=seed, epochs=reg_cfg.epochs, batch_size=reg_cfg.batch_size, lr=reg_cfg.lr)
    return model, compute_residuals(model, dataset)


def _run(dataset, env, cfg, reg_cfg, use_residuals, transition, variant):
    cfg.validate()
    reg_cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("offline dataset is empty")
    t_start = time.perf_counter()
    root = np.random.SeedSequence(cfg.seed)
    ss_reg, ss_init, ss_sim, ss_batch, ss_eval = root.spawn(5)
    if transition is None:
        model, residuals = _prepare_transition(
            dataset, reg_cfg, seed=int(ss_reg.generate_state(1)[0]))
    else:
        model, residuals = transition
    kernel = EmpiricalKernel(model, residuals, env.space)
    state_dim = dataset.s.shape[1]
    n_actions = len(env.actions)
    qnet = mlp_init([state_dim, *cfg.hidden, n_actions], np.random.default_rng(ss_init))
    target = qnet.copy()
    adam = AdamState.for_params(qnet.params(), cfg.lr)
    replay = ReplayMemory(cfg.replay_capacity, state_dim)
    rng_sim = np.random.default_rng(ss_sim)
    rng_batch = np.random.default_rng(ss_batch)
    n_rounds = cfg.episodes // cfg.eval_every
    eval_seeds = ss_eval.spawn(max(n_rounds, 1))

    records = []
    env_steps = 0
    grad_steps = 0
    for ep in range(1, cfg.episodes + 1):
        s = env.init_state(rng_sim)
        ep_cost = 0.0
        losses = []
        for _ in range(cfg.horizon_cap):
            eps = epsilon_at(env_steps, cfg)
            if rng_sim.random() < eps:
                a = int(rng_sim.integers(n_actions))
            else:
                a = int(np.argmin(mlp_forward(qnet, s)))
            c = env.cost(s, a)
            if use_residuals:
                s_next = kernel.sample(s, a, rng_sim)
            else:
                # consume the same index draw so paired variants share the
                # whole rng stream (common random numbers)
                kernel.draw_index(rng_sim)
                s_next = project(env.space, model.predict(s, a))
            done = env.terminal(s_next)
            replay.push(s, a, c, s_next, done)
            ep_cost += c
            env_steps += 1

            if len(replay) >= cfg.batch_size:
                bs, ba, bc, bsn, bdone = replay.sample(cfg.batch_size, rng_batch)
                target_q = mlp_forward(target, bsn).min(axis=1)
                y = bc + cfg.gamma * target_q * (~bdone)
                out, cache = mlp_forward_cached(qnet, bs)
                rows = np.arange(cfg.batch_size)
                q_sa = out[rows, ba]
                diff = q_sa - y
                loss = float(np.mean(diff * diff))
                if not np.isfinite(loss):
                    raise NumericBlowupError(f"numeric-blowup: loss={loss} at step {env_steps}")
                grad_out = np.zeros_like(out)
                grad_out[rows, ba] = 2.0 * diff / cfg.batch_size
                gw, gb = mlp_backward(qnet, cache, grad_out)
                adam_step(adam, qnet.params(), gw + gb)
                grad_steps += 1
                if grad_steps % cfg.target_sync == 0:
                    target = qnet.copy()
                losses.append(loss)

            if done:
                break
            s = s_next

        eval_mean = eval_std = float("nan")
        if ep % cfg.eval_every == 0 and n_rounds > 0:
            r = evaluate(NetworkQ(qnet), env, cfg.eval_episodes,
                         eval_seeds[ep // cfg.eval_every - 1], cfg.horizon_cap)
            eval_mean, eval_std = r.mean_return, r.std_return
        records.append(EpisodeRecord(
            episode=ep, train_return=float(-ep_cost),
            loss_mean=float(np.mean(losses)) if losses else float("nan"),
            epsilon=eps, eval_mean=eval_mean, eval_std=eval_std))

    report = TrainReport(
        records=records,
        wall_time_s=time.perf_counter() - t_start,
        config={**asdict(cfg), "regression": asdict(reg_cfg), "variant": variant,
                "n_transitions": len(dataset)},
        variant=variant,
    )
    return TrainResult(NetworkQ(qnet), model, residuals, report)


def train(dataset: OfflineDataset, env, cfg: DqnConfig,
          reg_cfg: RegressionConfig | None = None, transition=None) -> TrainResult:
    """Residuals-based offline DQN: simulate with model prediction + stored residuals.

    `transition` optionally injects a prefit (TransitionModel, ResidualSet)
    pair, e.g. to share one fit across paired runs or to study zero-residual
    kernels.
    """
    return _run(dataset, env, cfg, reg_cfg or RegressionConfig(),
                use_residuals=True, transition=transition, variant="residuals")


def train_baseline(dataset: OfflineDataset, env, cfg: DqnConfig,
                   reg_cfg: RegressionConfig | None = None, transition=None) -> TrainResult:
    """Ablation: identical training but rollouts follow the bare model prediction."""
    return _run(dataset, env, cfg, reg_cfg or RegressionConfig(),
                use_residuals=False, transition=transition, variant="model-only")

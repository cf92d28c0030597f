"""Ground-truth simulators and offline dataset generation.

Two environments:

* ``Synthetic1D`` -- scalar linear-decay system with known dynamics, used for
  solver consistency studies (the true transition map is exposed as f_star).
* ``StochasticCartPole`` -- classic cart-pole with additive Gaussian noise on
  the cart position and cost -1 per surviving step (cost-minimizing
  convention; reported returns are negated back to rewards).

Datasets are flat lists of (s, a, c, s_next, done) transitions collected by a
behavior policy, stored column-wise and persisted as JSON lines plus a sidecar
metadata file.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericBlowupError
from .mdp import ActionSet, DiscountedProblem, StateSpace

# cart-pole physical constants (the usual ones)
_GRAVITY = 9.8
_MASS_CART = 1.0
_MASS_POLE = 0.1
_TOTAL_MASS = _MASS_CART + _MASS_POLE
_HALF_LENGTH = 0.5
_POLEMASS_LENGTH = _MASS_POLE * _HALF_LENGTH
_FORCE_MAG = 10.0
_TAU = 0.02
_X_THRESHOLD = 2.4
_THETA_THRESHOLD = 12.0 * 2.0 * math.pi / 360.0


@dataclass(frozen=True)
class TransitionSample:
    s: np.ndarray
    a: int
    c: float
    s_next: np.ndarray
    done: bool


class OfflineDataset:
    """Ordered transitions stored column-wise, with generation metadata."""

    def __init__(self, s, a, c, s_next, done, meta: dict):
        self.s = np.asarray(s, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.int64)
        self.c = np.asarray(c, dtype=np.float64)
        self.s_next = np.asarray(s_next, dtype=np.float64)
        self.done = np.asarray(done, dtype=bool)
        self.meta = dict(meta)
        n = self.s.shape[0]
        if not (self.a.shape[0] == self.c.shape[0] == self.s_next.shape[0] == self.done.shape[0] == n):
            raise ValueError("dataset columns must have equal length")
        if self.s.ndim != 2 or self.s_next.shape != self.s.shape:
            raise ValueError("s and s_next must be [N, dim] of matching shape")

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, i: int) -> TransitionSample:
        return TransitionSample(
            s=self.s[i], a=int(self.a[i]), c=float(self.c[i]),
            s_next=self.s_next[i], done=bool(self.done[i]),
        )

    def subset(self, n: int) -> "OfflineDataset":
        """First n transitions, metadata annotated with the trim."""
        meta = dict(self.meta)
        meta["n_transitions"] = n
        return OfflineDataset(self.s[:n], self.a[:n], self.c[:n],
                              self.s_next[:n], self.done[:n], meta)

    def save(self, path: str) -> None:
        """JSON lines (one transition per line) + <path>.meta.json sidecar.

        Floats go through repr so the round trip is bit-exact for float64.
        """
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            for i in range(len(self)):
                row = {
                    "s": [float(v) for v in self.s[i]],
                    "a": int(self.a[i]),
                    "c": float(self.c[i]),
                    "s_next": [float(v) for v in self.s_next[i]],
                    "done": bool(self.done[i]),
                }
                fh.write(json.dumps(row) + "\n")
        os.replace(tmp, path)
        meta = dict(self.meta)
        meta["n_transitions"] = len(self)
        tmp = path + ".meta.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path + ".meta.json")

    @staticmethod
    def load(path: str) -> "OfflineDataset":
        s, a, c, s_next, done = [], [], [], [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                s.append(row["s"])
                a.append(row["a"])
                c.append(row["c"])
                s_next.append(row["s_next"])
                done.append(row["done"])
        meta_path = path + ".meta.json"
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        return OfflineDataset(np.array(s), np.array(a), np.array(c),
                              np.array(s_next), np.array(done), meta)


class Synthetic1D:
    """s' = clamp(0.8 s + u_a + w, [-1, 1]), c = s^2 + 0.01 u_a^2.

    Three actions push by u in {-0.2, 0, +0.2}; noise w is iid N(0, noise_std^2).
    Lipschitz constants: L_f = 0.8 in s, L_c = 2 on the box.  Never terminates.
    """

    name = "synthetic1d"
    has_f_star = True

    def __init__(self, noise_std: float = 0.1):
        if noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
        self.noise_std = float(noise_std)
        self.space = StateSpace(np.array([-1.0]), np.array([1.0]))
        self.actions = ActionSet(
            ("left", "stay", "right"),
            np.array([[-0.2], [0.0], [0.2]]),
        )
        self.decay = 0.8
        self.lipschitz_f = 0.8     # |df/ds|
        self.lipschitz_cost = 2.0  # max |dc/ds| = 2|s| on the box

    def f_star(self, s: np.ndarray, a: int) -> np.ndarray:
        u = self.actions.payloads[a, 0]
        return np.array([self.decay * float(s[0]) + u])

    def cost(self, s: np.ndarray, a: int) -> float:
        u = self.actions.payloads[a, 0]
        return float(s[0]) ** 2 + 0.01 * u * u

    def terminal(self, s: np.ndarray) -> bool:
        return False

    def step(self, s: np.ndarray, a: int, noise: np.ndarray):
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise NumericBlowupError(f"numeric-blowup: non-finite state {s}")
        c = self.cost(s, a)
        raw = self.f_star(s, a) + np.asarray(noise, dtype=np.float64)
        s_next = self.space.clip(raw)
        return s_next, c, False

    def sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.noise_std, size=1)

    def init_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=1)

    def make_problem(self, gamma: float) -> DiscountedProblem:
        return DiscountedProblem(self.space, self.actions, self.cost, gamma)


class StochasticCartPole:
    """Cart-pole with explicit-Euler dynamics and Gaussian noise on x.

    State (x, x_dot, theta, theta_dot); actions push the cart with force
    -10 or +10 N.  Each surviving step costs -1 (reward 1 negated).  An
    episode ends when |x| > 2.4 or |theta| > 12 degrees; episode caps are the
    rollout loop's business, not the step function's.  Noise N(0, noise_std^2)
    is added to the next cart position; states are clamped into a box wide
    enough that only extreme noise draws touch it.
    """

    name = "cartpole"
    has_f_star = False

    def __init__(self, noise_std: float = 0.5):
        if noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
        self.noise_std = float(noise_std)
        self.space = StateSpace(
            np.array([-4.8, -10.0, -2.0 * _THETA_THRESHOLD, -10.0]),
            np.array([4.8, 10.0, 2.0 * _THETA_THRESHOLD, 10.0]),
        )
        self.actions = ActionSet(
            ("push_left", "push_right"), np.array([[-1.0], [1.0]])
        )

    def cost(self, s: np.ndarray, a: int) -> float:
        return -1.0

    def terminal(self, s: np.ndarray) -> bool:
        return bool(abs(s[0]) > _X_THRESHOLD or abs(s[2]) > _THETA_THRESHOLD)

    def _deterministic_next(self, s: np.ndarray, a: int) -> np.ndarray:
        x, x_dot, theta, theta_dot = s
        force = _FORCE_MAG * self.actions.payloads[a, 0]
        costh = math.cos(theta)
        sinth = math.sin(theta)
        temp = (force + _POLEMASS_LENGTH * theta_dot**2 * sinth) / _TOTAL_MASS
        theta_acc = (_GRAVITY * sinth - costh * temp) / (
            _HALF_LENGTH * (4.0 / 3.0 - _MASS_POLE * costh**2 / _TOTAL_MASS)
        )
        x_acc = temp - _POLEMASS_LENGTH * theta_acc * costh / _TOTAL_MASS
        return np.array([
            x + _TAU * x_dot,
            x_dot + _TAU * x_acc,
            theta + _TAU * theta_dot,
            theta_dot + _TAU * theta_acc,
        ])

    def step(self, s: np.ndarray, a: int, noise: np.ndarray):
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise NumericBlowupError(f"numeric-blowup: non-finite state {s}")
        nxt = self._deterministic_next(s, a)
        nxt[0] += float(np.asarray(noise).reshape(-1)[0])
        s_next = self.space.clip(nxt)
        return s_next, self.cost(s, a), self.terminal(s_next)

    def sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.noise_std, size=1)

    def init_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=4)

    def make_problem(self, gamma: float) -> DiscountedProblem:
        return DiscountedProblem(self.space, self.actions, self.cost, gamma)


def make_env(name: str, noise_std: float | None = None):
    """Environment factory used by the CLI and experiment runners."""
    if name == "synthetic1d":
        return Synthetic1D(0.1 if noise_std is None else noise_std)
    if name == "cartpole":
        return StochasticCartPole(0.5 if noise_std is None else noise_std)
    raise ConfigError(f"unknown environment {name!r} (choose synthetic1d or cartpole)")


def generate_dataset(
    env,
    n_trajectories: int,
    horizon_cap: int,
    seed: int,
    behavior: str = "uniform",
) -> OfflineDataset:
    """Roll out a behavior policy and collect every transition.

    Each trajectory gets its own child RNG stream (SeedSequence.spawn), so the
    dataset is invariant to how trajectories would be batched.  Episodes stop
    at termination or at horizon_cap; cap hits are recorded done=False since
    nothing terminal happened.
    """
    if behavior != "uniform":
        raise ConfigError(f"unknown behavior policy {behavior!r}")
    if n_trajectories < 1 or horizon_cap < 1:
        raise ConfigError("n_trajectories and horizon_cap must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_trajectories)
    n_act = len(env.actions)
    s_col, a_col, c_col, sn_col, d_col = [], [], [], [], []
    lengths = []
    for child in children:
        rng = np.random.default_rng(child)
        s = env.init_state(rng)
        steps = 0
        for _ in range(horizon_cap):
            a = int(rng.integers(n_act))
            s_next, c, done = env.step(s, a, env.sample_noise(rng))
            s_col.append(s)
            a_col.append(a)
            c_col.append(c)
            sn_col.append(s_next)
            d_col.append(done)
            steps += 1
            if done:
                break
            s = s_next
        lengths.append(steps)
    meta = {
        "env": env.name,
        "noise_std": env.noise_std,
        "behavior": behavior,
        "seed": int(seed),
        "n_trajectories": int(n_trajectories),
        "horizon_cap": int(horizon_cap),
        "episode_lengths": lengths,
    }
    return OfflineDataset(
        np.array(s_col), np.array(a_col), np.array(c_col),
        np.array(sn_col), np.array(d_col), meta,
    )


def dataset_with_n_transitions(env, n: int, seed: int, horizon_cap: int = 50) -> OfflineDataset:
    """Exactly n transitions: ceil(n/horizon) trajectories, trimmed to n."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    n_traj = -(-n // horizon_cap)
    ds = generate_dataset(env, n_traj, horizon_cap, seed)
    if len(ds) < n:
        raise ConfigError(
            f"collected only {len(ds)} transitions (< {n}); early terminations"
        )
    return ds.subset(n)

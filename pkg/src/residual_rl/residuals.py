"""Estimated transition models and empirical residual kernels.

A TransitionModel predicts the next state from (state, action index) by
feeding [state, one-hot(action)] to a regressor.  Its residuals on the
training set, pooled across actions, define an empirical kernel: the
successors of (s, a) are the model prediction shifted by every stored
residual, clamped onto the state box.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .envs import OfflineDataset
from .errors import ConfigError, EmptySupportError
from .mdp import StateSpace
from .nets import LinearModel, MLP, fit_linear, fit_mlp, mlp_forward, _model_from_dict, _model_to_dict


def project(space: StateSpace, x: np.ndarray) -> np.ndarray:
    """Componentwise projection onto the feasible box (x finite, any batch shape)."""
    return space.clip(np.asarray(x, dtype=np.float64))


def one_hot_features(s: np.ndarray, a, n_actions: int) -> np.ndarray:
    """[state, one-hot action] rows for a batch (or a single pair)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
        a = np.asarray([a])
    a = np.asarray(a, dtype=np.int64)
    if np.any(a < 0) or np.any(a >= n_actions):
        raise ConfigError(f"action index out of range [0, {n_actions})")
    onehot = np.zeros((s.shape[0], n_actions))
    onehot[np.arange(s.shape[0]), a] = 1.0
    return np.hstack([s, onehot])


class TransitionModel:
    """Next-state regressor over (state, action) with one-hot action coding."""

    def __init__(self, regressor, state_dim: int, n_actions: int, info: dict | None = None):
        self.regressor = regressor
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        self.info = dict(info or {})

    def predict(self, s: np.ndarray, a: int) -> np.ndarray:
        return self.predict_batch(np.asarray(s)[None, :], np.array([a]))[0]

    def predict_batch(self, s: np.ndarray, a) -> np.ndarray:
        feats = one_hot_features(s, a, self.n_actions)
        if isinstance(self.regressor, MLP):
            return mlp_forward(self.regressor, feats)
        return self.regressor.predict(feats)

    def save(self, path: str) -> None:
        blob = _model_to_dict(self.regressor)
        blob["metadata"] = {
            "state_dim": self.state_dim,
            "n_actions": self.n_actions,
            **self.info,
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(blob, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "TransitionModel":
        with open(path) as fh:
            blob = json.load(fh)
        meta = blob.get("metadata", {})
        if "state_dim" not in meta or "n_actions" not in meta:
            raise ConfigError(f"{path}: missing state_dim/n_actions metadata")
        reg = _model_from_dict(blob)
        info = {k: v for k, v in meta.items() if k not in ("state_dim", "n_actions")}
        return TransitionModel(reg, meta["state_dim"], meta["n_actions"], info)


def fit_transition_model(
    dataset: OfflineDataset,
    kind: str = "linear",
    ridge: float = 0.0,
    hidden=(64,),
    seed: int = 0,
    epochs: int = 40,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> TransitionModel:
    """Regress s_next on [s, one-hot(a)] over the whole dataset."""
    if len(dataset) == 0:
        raise EmptySupportError("empty-support: cannot fit on an empty dataset")
    n_actions = int(dataset.a.max()) + 1 if len(dataset) else 0
    n_actions = max(n_actions, int(dataset.meta.get("n_actions", 0)))
    feats = one_hot_features(dataset.s, dataset.a, n_actions)
    if kind == "linear":
        # intercept would be collinear with the one-hot block
        reg = fit_linear(feats, dataset.s_next, ridge=ridge, fit_intercept=False)
    elif kind == "mlp":
        reg, _ = fit_mlp(feats, dataset.s_next, hidden=hidden, seed=seed,
                         epochs=epochs, batch_size=batch_size, lr=lr)
    else:
        raise ConfigError(f"unknown regressor kind {kind!r}")
    info = {"kind": kind, "n_train": len(dataset), "dataset_seed": dataset.meta.get("seed")}
    return TransitionModel(reg, dataset.s.shape[1], n_actions, info)


@dataclass
class ResidualSet:
    """Pooled empirical residuals s_next - f_hat(s, a), one row per transition."""

    residuals: np.ndarray
    source: str

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.residuals, dtype=np.float64))
        if r.shape[0] == 0:
            raise EmptySupportError("empty-support: residual set has no rows")
        object.__setattr__(self, "residuals", r)

    def __len__(self) -> int:
        return self.residuals.shape[0]

    def save(self, path: str) -> None:
        blob = {
            "source": self.source,
            "residuals": [[float(v) for v in row] for row in self.residuals],
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(blob, fh)
            fh.write("\n")
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "ResidualSet":
        with open(path) as fh:
            blob = json.load(fh)
        return ResidualSet(np.array(blob["residuals"]), blob.get("source", ""))


def compute_residuals(model: TransitionModel, dataset: OfflineDataset) -> ResidualSet:
    """Residuals of the fitted model at every training transition, in dataset order."""
    if len(dataset) == 0:
        raise EmptySupportError("empty-support: dataset has no transitions")
    pred = model.predict_batch(dataset.s, dataset.a)
    source = (
        f"model={model.info.get('kind', '?')}/n={model.info.get('n_train', '?')}"
        f" dataset=env:{dataset.meta.get('env', '?')}/seed:{dataset.meta.get('seed', '?')}"
    )
    return ResidualSet(dataset.s_next - pred, source)


class EmpiricalKernel:
    """Finite-support transition kernel: prediction plus every residual, projected.

    support(s, a) enumerates all atoms (shape [N, dim]); sample(s, a, rng)
    draws one uniformly.  Works with any predictor exposing
    predict(s, a) / predict_batch(S, A).
    """

    def __init__(self, model, residual_set: ResidualSet, space: StateSpace):
        self.model = model
        self.residual_set = residual_set
        self.space = space
        if residual_set.residuals.shape[1] != space.dim:
            raise ConfigError("residual dimension disagrees with the state box")

    @property
    def n_atoms(self) -> int:
        return len(self.residual_set)

    def support(self, s: np.ndarray, a: int) -> np.ndarray:
        center = self.model.predict(s, a)
        return project(self.space, center[None, :] + self.residual_set.residuals)

    def support_batch(self, s_batch: np.ndarray, a: int) -> np.ndarray:
        """Atoms for many states at one action: shape [n_atoms, n_states, dim]."""
        a_vec = np.full(s_batch.shape[0], a, dtype=np.int64)
        centers = self.model.predict_batch(s_batch, a_vec)
        atoms = centers[None, :, :] + self.residual_set.residuals[:, None, :]
        return project(self.space, atoms)

    def draw_index(self, rng: np.random.Generator) -> int:
        """Uniform atom index; a single atom costs no rng draw."""
        if self.n_atoms == 1:
            return 0
        return int(rng.integers(self.n_atoms))

    def sample(self, s: np.ndarray, a: int, rng: np.random.Generator) -> np.ndarray:
        i = self.draw_index(rng)
        center = self.model.predict(s, a)
        return project(self.space, center + self.residual_set.residuals[i])


class _CallablePredictor:
    """Adapts a plain f(s, a_index) -> next_state function to the model interface."""

    def __init__(self, fn, state_dim: int):
        self.fn = fn
        self.state_dim = state_dim
        self.info = {"kind": "callable"}

    def predict(self, s: np.ndarray, a: int) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(s, dtype=np.float64), int(a)), dtype=np.float64)

    def predict_batch(self, s: np.ndarray, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        return np.stack([self.predict(s[i], a[i]) for i in range(s.shape[0])])


def full_information_kernel(f_star, true_residuals: np.ndarray, space: StateSpace) -> EmpiricalKernel:
    """Kernel built from the exact transition map and the true noise draws.

    Counterpart of the estimated kernel for error decompositions: same atoms
    indexed the same way, with f_hat replaced by f_star and estimated
    residuals by the realized noise.
    """
    rs = ResidualSet(np.atleast_2d(np.asarray(true_residuals, dtype=np.float64)), "true-noise")
    return EmpiricalKernel(_CallablePredictor(f_star, space.dim), rs, space)


def true_noise_residuals(env, dataset: OfflineDataset) -> np.ndarray:
    """Realized noise w_i = s_next_i - f_star(s_i, a_i) for an env with known dynamics.

    Exact only where the clamp was inactive; on wide boxes that is all rows
    but callers studying boundary effects should filter.
    """
    if not getattr(env, "has_f_star", False):
        raise ConfigError(f"env {env.name!r} does not expose its transition map")
    pred = np.stack([env.f_star(dataset.s[i], int(dataset.a[i])) for i in range(len(dataset))])
    return dataset.s_next - pred

"""Core MDP vocabulary: state boxes, finite action sets, scenario Bellman backups.

Everything downstream (simulators, kernels, grid solvers, the offline DQN)
speaks in terms of the types defined here.  Costs are minimized throughout;
environments that are naturally reward-shaped get negated at the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .errors import EmptySupportError, NonConvergenceError, StateOutOfBoundsError


@dataclass(frozen=True)
class StateSpace:
    """Axis-aligned box of feasible states, lower[i] < upper[i] for every axis."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.ndim != 1 or hi.shape != lo.shape:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("state box bounds must be finite")
        if not np.all(lo < hi):
            raise ValueError("state box must satisfy lower < upper on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(
            np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol)
        )

    def clip(self, x: np.ndarray) -> np.ndarray:
        """Componentwise clamp onto the box; works on single states or batches."""
        return np.clip(x, self.lower, self.upper)


@dataclass(frozen=True)
class ActionSet:
    """Finite set of actions: human-readable labels plus numeric payloads.

    payloads has one row per action; actions are addressed everywhere by
    integer index into this set.
    """

    labels: tuple
    payloads: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.payloads, dtype=np.float64))
        labels = tuple(str(l) for l in self.labels)
        if len(labels) == 0:
            raise ValueError("action set must be nonempty")
        if len(set(labels)) != len(labels):
            raise ValueError("action labels must be unique")
        if p.shape[0] != len(labels):
            raise ValueError("payloads must have one row per label")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "payloads", p)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DiscountedProblem:
    """State box + finite actions + stage cost + discount in [0, 1)."""

    space: StateSpace
    actions: ActionSet
    cost: Callable[[np.ndarray, int], float]
    gamma: float

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")


@runtime_checkable
class QFunction(Protocol):
    """State-action value function over a fixed finite action set."""

    n_actions: int

    def eval(self, s: np.ndarray, a: int) -> float: ...

    def eval_all(self, s: np.ndarray) -> np.ndarray: ...


def scenario_bellman_apply(
    q: QFunction,
    problem: DiscountedProblem,
    next_states: Callable[[np.ndarray, int], np.ndarray],
    s: np.ndarray,
    a: int,
) -> float:
    """One Bellman backup averaged over a finite scenario set.

    next_states(s, a) must return an [N, dim] array of successor states, all
    inside problem.space.  Returns c(s,a) + gamma * (1/N) sum_i min_a' Q(s_i, a').
    """
    s = np.asarray(s, dtype=np.float64)
    scen = np.atleast_2d(np.asarray(next_states(s, a), dtype=np.float64))
    if scen.shape[0] == 0:
        raise EmptySupportError(f"empty-support: no successor scenarios at a={a}")
    for row in scen:
        if not problem.space.contains(row, atol=1e-12):
            raise StateOutOfBoundsError(
                f"state-out-of-bounds: scenario {row} leaves the feasible box"
            )
    acc = 0.0
    for row in scen:
        acc += float(np.min(q.eval_all(row)))
    return float(problem.cost(s, a)) + problem.gamma * acc / scen.shape[0]


def sup_norm_distance(q1: QFunction, q2: QFunction, probe_states=None) -> float:
    """Sup-norm distance between two Q-functions.

    Exact when both are grid tables over the same nodes (common fast path);
    otherwise a max over the supplied probe states.
    """
    v1 = getattr(q1, "values", None)
    v2 = getattr(q2, "values", None)
    g1 = getattr(q1, "grid", None)
    if v1 is not None and v2 is not None and g1 is not None and g1 == getattr(q2, "grid", None):
        return float(np.max(np.abs(v1 - v2)))
    if probe_states is None or len(probe_states) == 0:
        raise ValueError("probe_states required for non-grid Q-functions")
    worst = 0.0
    for s in probe_states:
        d = float(np.max(np.abs(q1.eval_all(s) - q2.eval_all(s))))
        if d > worst:
            worst = d
    return worst


@dataclass
class IterationDiagnostics:
    """Per-sweep deltas of a fixed-point iteration, plus convergence status."""

    iterations: int
    deltas: np.ndarray
    converged: bool
    tol: float

    @property
    def contraction_rates(self) -> np.ndarray:
        """Ratios delta_{k+1}/delta_k; empty when fewer than two sweeps ran."""
        d = self.deltas
        if d.shape[0] < 2:
            return np.empty(0)
        prev = d[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(prev > 0, d[1:] / prev, 0.0)


def value_iterate(
    operator: Callable[[QFunction], QFunction],
    q0: QFunction,
    tol: float,
    max_iter: int = 10_000,
    distance: Callable[[QFunction, QFunction], float] = sup_norm_distance,
):
    """Iterate q <- operator(q) until successive iterates are tol-close.

    For a gamma-contraction the returned q satisfies
    ||operator(q) - q|| <= gamma * tol <= tol.  Raises NonConvergenceError
    after max_iter sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = q0
    deltas = []
    for k in range(max_iter):
        q_next = operator(q)
        d = distance(q_next, q)
        deltas.append(d)
        q = q_next
        if d <= tol:
            return q, IterationDiagnostics(
                iterations=k + 1, deltas=np.asarray(deltas), converged=True, tol=tol
            )
    raise NonConvergenceError(
        f"non-convergence: delta={deltas[-1]:.3e} > tol={tol:.1e} after {max_iter} sweeps",
        iterations=max_iter,
        last_delta=deltas[-1],
    )


def greedy_policy(q: QFunction) -> Callable[[np.ndarray], int]:
    """Cost-minimizing greedy policy; ties resolve to the lowest action index."""

    def policy(s: np.ndarray) -> int:
        return int(np.argmin(q.eval_all(s)))

    return policy

"""Exact finite-MDP machinery: values, occupancies, kernels, and dataset sampling.

Everything here follows the discounted infinite-horizon convention with
normalized occupancies: d(s, a) sums to one over state-action pairs, and a
policy value carries the (1 - gamma) factor so rewards in [0, 1] give values
in [0, 1].  State-action pairs are flattened as ``sa = s * n_actions + a``
throughout the package.

All operations are pure functions of their inputs plus an explicit seed, so
they are safe to call from concurrent sweep workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageError

ROW_TOL = 1e-12
OCC_TOL = 1e-10
SUPPORT_TOL = 1e-12


def sa_index(s, a, n_actions: int):
    """Flatten (s, a) to the row index used by kernels and feature tables."""
    return s * n_actions + a


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense transition tensor ``transition[s, a, s']``.

    Rewards live in [0, 1]; ``mu0`` is the initial state distribution and
    ``gamma`` the discount in (0, 1).
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    mu0: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=np.float64))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=np.float64))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=np.float64))
        S, A = self.n_states, self.n_actions
        if S < 1 or A < 1:
            raise ValueError("n_states and n_actions must be positive")
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition must have shape {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}")
        if self.mu0.shape != (S,):
            raise ValueError(f"mu0 must have shape {(S,)}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if np.any(self.transition < 0.0):
            raise ValueError("transition entries must be nonnegative")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > ROW_TOL:
            raise ValueError("every transition row must sum to 1 within 1e-12")
        if np.any(self.mu0 < 0.0) or abs(self.mu0.sum() - 1.0) > ROW_TOL:
            raise ValueError("mu0 must be a distribution (sum 1 within 1e-12)")
        if np.any(self.reward < 0.0) or np.any(self.reward > 1.0):
            raise ValueError("reward entries must lie in [0, 1]")

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions


@dataclass(frozen=True)
class Policy:
    """Stationary Markovian policy: ``probs[s, a]`` rows are distributions."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise ValueError("policy table must be 2-dimensional")
        if np.any(self.probs < 0.0):
            raise ValueError("policy probabilities must be nonnegative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("every policy row must sum to 1 within 1e-12")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class TransitionDataset:
    """Bag of (s, a, s') transitions sampled at the discounted stationary law."""

    transitions: np.ndarray  # integer array of shape (n, 3)
    n: int
    gamma_used: float
    behavior_id: str
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "transitions", np.asarray(self.transitions, dtype=np.int64))
        if self.transitions.ndim != 2 or self.transitions.shape[1] != 3:
            raise ValueError("transitions must be an (n, 3) integer array")
        if self.n != self.transitions.shape[0]:
            raise ValueError("n must equal the number of stored transitions")
        if self.n >= 1 and self.transitions.min() < 0:
            raise ValueError("state/action indices must be nonnegative")

    def validate_bounds(self, n_states: int, n_actions: int):
        s, a, s_next = self.transitions.T
        if np.any(s >= n_states) or np.any(s_next >= n_states) or np.any(a >= n_actions):
            raise ValueError("dataset indices out of range for the given MDP shape")


@dataclass(frozen=True)
class OccupancyTable:
    """Normalized discounted state-action visitation frequencies."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if np.any(values < -OCC_TOL):
            raise ValueError("occupancy entries must be nonnegative")
        values = np.maximum(values, 0.0)
        if abs(values.sum() - 1.0) > OCC_TOL:
            raise ValueError("occupancy must sum to 1 within 1e-10")
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def state_marginal(self) -> np.ndarray:
        return self.values.sum(axis=1)


def state_action_kernel(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Kernel over pairs: K[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')."""
    S, A = mdp.n_states, mdp.n_actions
    flat_p = mdp.transition.reshape(S * A, S)
    kernel = flat_p[:, :, None] * policy.probs[None, :, :]
    return kernel.reshape(S * A, S * A)


def initial_pair_distribution(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """mu0(s) * pi(a|s) flattened over pairs."""
    return (mdp.mu0[:, None] * policy.probs).reshape(-1)


def occupancy_measure(mdp: TabularMdp, policy: Policy) -> OccupancyTable:
    """Solve d = (1-gamma) mu0*pi + gamma K^T d by a dense linear solve."""
    K = state_action_kernel(mdp, policy)
    b = initial_pair_distribution(mdp, policy)
    n = mdp.n_pairs
    d = np.linalg.solve(np.eye(n) - mdp.gamma * K.T, (1.0 - mdp.gamma) * b)
    return OccupancyTable(d.reshape(mdp.n_states, mdp.n_actions))


def q_values(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Exact Q table from the Bellman solve Q = r + gamma K Q, flattened over pairs."""
    K = state_action_kernel(mdp, policy)
    r = mdp.reward.reshape(-1)
    return np.linalg.solve(np.eye(mdp.n_pairs) - mdp.gamma * K, r)


def policy_value_exact(mdp: TabularMdp, policy: Policy) -> float:
    """Normalized policy value (1-gamma) E_{mu0, pi}[Q]."""
    q = q_values(mdp, policy)
    b = initial_pair_distribution(mdp, policy)
    return float((1.0 - mdp.gamma) * b @ q)


def concentratability(mdp: TabularMdp, target: Policy, behavior: Policy) -> float:
    """Worst-case occupancy ratio max d^pi / d^pi_b over the target's support.

    Pairs visited by neither policy impose no constraint (0/0 -> 0); a pair
    the target visits but the behavior never does raises :class:`CoverageError`.
    """
    d_target = occupancy_measure(mdp, target).flat
    d_behavior = occupancy_measure(mdp, behavior).flat
    uncovered = (d_target > SUPPORT_TOL) & (d_behavior <= SUPPORT_TOL)
    if np.any(uncovered):
        bad = int(np.flatnonzero(uncovered)[0])
        raise CoverageError(
            f"target visits pair sa={bad} that the behavior policy never visits"
        )
    supported = d_target > SUPPORT_TOL
    if not np.any(supported):
        return 1.0
    return float(np.max(d_target[supported] / d_behavior[supported]))


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one categorical sample per row of ``probs``."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def sample_dataset(
    mdp: TabularMdp,
    behavior: Policy,
    n: int,
    seed: int,
    behavior_id: str = "behavior",
) -> TransitionDataset:
    """Draw n i.i.d. transitions whose (s, a) marginal is exactly d^{pi_b}.

    Each sample picks a geometric horizon t with P(t) = (1-gamma) gamma^t,
    rolls out t steps from mu0 under the behavior policy, and records
    (s_t, a_t, s_{t+1}).
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    horizons = rng.geometric(1.0 - mdp.gamma, size=n) - 1
    states = _sample_rows(rng, np.tile(mdp.mu0, (n, 1)))
    for step in range(int(horizons.max())):
        active = np.flatnonzero(horizons > step)
        if active.size == 0:
            break
        acts = _sample_rows(rng, behavior.probs[states[active]])
        states[active] = _sample_rows(rng, mdp.transition[states[active], acts])
    actions = _sample_rows(rng, behavior.probs[states])
    next_states = _sample_rows(rng, mdp.transition[states, actions])
    transitions = np.stack([states, actions, next_states], axis=1)
    return TransitionDataset(
        transitions=transitions,
        n=n,
        gamma_used=mdp.gamma,
        behavior_id=behavior_id,
        seed=seed,
    )


def sample_trajectories(
    mdp: TabularMdp,
    behavior: Policy,
    n_trajectories: int,
    horizon: int,
    seed: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed-horizon trajectory protocol: returns (states, actions) pairs.

    ``states`` has length horizon + 1 and ``actions`` length horizon.  This is
    the alternative sampling mode used by trajectory-based estimators; the
    transition-bag sampler above is the one matching the stationary law.
    """
    if n_trajectories < 1 or horizon < 1:
        raise ValueError("need at least one trajectory and one step")
    rng = np.random.default_rng(seed)
    states = np.empty((n_trajectories, horizon + 1), dtype=np.int64)
    actions = np.empty((n_trajectories, horizon), dtype=np.int64)
    states[:, 0] = _sample_rows(rng, np.tile(mdp.mu0, (n_trajectories, 1)))
    for t in range(horizon):
        actions[:, t] = _sample_rows(rng, behavior.probs[states[:, t]])
        states[:, t + 1] = _sample_rows(rng, mdp.transition[states[:, t], actions[:, t]])
    return [(states[i], actions[i]) for i in range(n_trajectories)]


def empirical_pair_weights(dataset: TransitionDataset, n_states: int, n_actions: int) -> np.ndarray:
    """Empirical (s, a) frequencies of the dataset, flattened over pairs."""
    idx = dataset.transitions[:, 0] * n_actions + dataset.transitions[:, 1]
    counts = np.bincount(idx, minlength=n_states * n_actions).astype(np.float64)
    return counts / counts.sum()


# --- dataset persistence -------------------------------------------------

def save_dataset(dataset: TransitionDataset, path: str | Path):
    """Write transitions as CSV plus a ``<path>.meta`` key=value sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "a", "s_next"])
        writer.writerows(dataset.transitions.tolist())
    meta = path.with_suffix(path.suffix + ".meta")
    meta.write_text(
        f"n={dataset.n}\n"
        f"gamma={dataset.gamma_used!r}\n"
        f"behavior_id={dataset.behavior_id}\n"
        f"seed={dataset.seed}\n"
    )


def load_dataset(path: str | Path) -> TransitionDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["s", "a", "s_next"]:
            raise ValueError(f"unexpected dataset header {header}")
        rows = [[int(v) for v in row] for row in reader]
    meta = {}
    for line in path.with_suffix(path.suffix + ".meta").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    return TransitionDataset(
        transitions=np.asarray(rows, dtype=np.int64).reshape(len(rows), 3),
        n=int(meta["n"]),
        gamma_used=float(meta["gamma"]),
        behavior_id=meta["behavior_id"],
        seed=int(meta["seed"]),
    )


# --- MDP persistence ------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_mdp(mdp: TabularMdp, path: str | Path):
    """Flat text format: dimensions header, transition rows, reward, mu0, gamma."""
    lines = [f"{mdp.n_states} {mdp.n_actions}"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(" ".join(_fmt(v) for v in mdp.transition[s, a]))
    for s in range(mdp.n_states):
        lines.append(" ".join(_fmt(v) for v in mdp.reward[s]))
    lines.append(" ".join(_fmt(v) for v in mdp.mu0))
    lines.append(_fmt(mdp.gamma))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mdp(path: str | Path) -> TabularMdp:
    lines = Path(path).read_text().splitlines()
    n_states, n_actions = (int(v) for v in lines[0].split())
    pos = 1
    transition = np.empty((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            transition[s, a] = [float(v) for v in lines[pos].split()]
            pos += 1
    reward = np.empty((n_states, n_actions))
    for s in range(n_states):
        reward[s] = [float(v) for v in lines[pos].split()]
        pos += 1
    mu0 = np.asarray([float(v) for v in lines[pos].split()])
    gamma = float(lines[pos + 1])
    return TabularMdp(n_states, n_actions, transition, reward, mu0, gamma)

"""Benchmark environments: Four Rooms and random low-rank MDPs.

The low-rank generator returns the ground-truth factorization alongside the
MDP, so tests can verify linear-representation identities exactly.  Four
Rooms uses the standard 11x11 layout (104 free cells) with slip noise that
redirects to a uniformly random other direction; walls reflect, the goal is
absorbing, and the start distribution is uniform over free non-goal cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Policy, TabularMdp

# 13x13 incl. border walls; interior is the classic 11x11 four-room layout.
_FOUR_ROOMS_LAYOUT = [
    "XXXXXXXXXXXXX",
    "X     X     X",
    "X     X     X",
    "X           X",
    "X     X     X",
    "X     X     X",
    "XX XXXX     X",
    "X     XXX XXX",
    "X     X     X",
    "X     X     X",
    "X           X",
    "X     X     X",
    "XXXXXXXXXXXXX",
]

# up, down, left, right as (row, col) deltas
_MOVES = [(-1, 0), (1, 0), (0, -1), (0, 1)]


def four_rooms_cells() -> list[tuple[int, int]]:
    """Free (row, col) cells of the layout, in state-index order."""
    return [
        (r, c)
        for r, row in enumerate(_FOUR_ROOMS_LAYOUT)
        for c, ch in enumerate(row)
        if ch == " "
    ]


def four_rooms_grid_shape() -> tuple[int, int]:
    return len(_FOUR_ROOMS_LAYOUT), len(_FOUR_ROOMS_LAYOUT[0])


def four_rooms(noise: float, goal: int, gamma: float) -> TabularMdp:
    """Four Rooms gridworld with 4 actions and slip probability ``noise``.

    The intended move succeeds with probability 1 - noise; otherwise one of
    the other three directions is taken uniformly at random.  Moves into
    walls leave the state unchanged.  Reward is 1 for every action taken at
    the goal state, which is absorbing.
    """
    if not (0.0 <= noise < 1.0):
        raise ValueError("noise must lie in [0, 1)")
    cells = four_rooms_cells()
    n_states = len(cells)
    if not (0 <= goal < n_states):
        raise ValueError(f"goal must be a state index in [0, {n_states})")
    index = {cell: i for i, cell in enumerate(cells)}
    n_actions = 4

    def neighbor(state: int, move: tuple[int, int]) -> int:
        r, c = cells[state]
        nxt = (r + move[0], c + move[1])
        return index.get(nxt, state)

    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        if s == goal:
            transition[s, :, s] = 1.0
            continue
        for a in range(n_actions):
            transition[s, a, neighbor(s, _MOVES[a])] += 1.0 - noise
            for other in range(n_actions):
                if other != a:
                    transition[s, a, neighbor(s, _MOVES[other])] += noise / 3.0

    reward = np.zeros((n_states, n_actions))
    reward[goal, :] = 1.0

    mu0 = np.ones(n_states)
    mu0[goal] = 0.0
    mu0 /= mu0.sum()
    return TabularMdp(n_states, n_actions, transition, reward, mu0, gamma)


@dataclass(frozen=True)
class LowRankGroundTruth:
    """Exact factorization P(s'|s,a) = sum_k phi_star[sa, k] * w_star[k, s'].

    ``omega0`` mixes the w_star rows into mu0, so the initial distribution is
    representable in the dual feature space by construction.  ``theta_r`` is
    set only when the reward was generated linear in phi_star.
    """

    phi_star: np.ndarray  # (S*A, d), rows on the simplex
    w_star: np.ndarray  # (d, S), rows are next-state distributions
    omega0: np.ndarray  # (d,)
    theta_r: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.phi_star.shape[1]


def random_lowrank_mdp(
    n_states: int,
    n_actions: int,
    d: int,
    seed: int,
    linear_reward: bool = False,
    gamma: float = 0.95,
) -> tuple[TabularMdp, LowRankGroundTruth]:
    """Random rank-``d`` MDP with known spectral ground truth.

    phi rows are Dirichlet draws on the d-simplex and w rows are Dirichlet
    distributions over next states, so every reconstructed transition row is
    automatically a distribution.  mu0 is a random convex combination of the
    w rows, which makes the initial-distribution representability condition
    hold exactly with cofactor ``omega0``.
    """
    if not (1 <= d <= min(n_states * n_actions, n_states)):
        raise ValueError("rank d must satisfy 1 <= d <= min(S*A, S)")
    rng = np.random.default_rng(seed)
    phi_star = rng.dirichlet(np.ones(d), size=n_states * n_actions)
    w_star = rng.dirichlet(np.ones(n_states), size=d)
    transition = (phi_star @ w_star).reshape(n_states, n_actions, n_states)
    # Guard against accumulated rounding in the matrix product.
    transition /= transition.sum(axis=2, keepdims=True)

    omega0 = rng.dirichlet(np.ones(d))
    mu0 = omega0 @ w_star
    mu0 /= mu0.sum()

    theta_r = None
    if linear_reward:
        theta_r = rng.uniform(0.0, 1.0, size=d)
        reward = (phi_star @ theta_r).reshape(n_states, n_actions)
    else:
        reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))

    mdp = TabularMdp(n_states, n_actions, transition, reward, mu0, gamma)
    truth = LowRankGroundTruth(phi_star=phi_star, w_star=w_star, omega0=omega0, theta_r=theta_r)
    return mdp, truth


def uniform_policy(n_states: int, n_actions: int) -> Policy:
    return Policy(np.full((n_states, n_actions), 1.0 / n_actions))


def optimal_q_values(mdp: TabularMdp, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Q* by value iteration (deterministic, first-index tie-breaking downstream)."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = q.max(axis=1)
        q_next = mdp.reward + mdp.gamma * mdp.transition @ v
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next
    return q


def eps_greedy_policy(mdp: TabularMdp, epsilon: float) -> Policy:
    """Epsilon-greedy around the optimal policy of ``mdp``."""
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must lie in [0, 1]")
    q = optimal_q_values(mdp)
    greedy = q.argmax(axis=1)
    probs = np.full((mdp.n_states, mdp.n_actions), epsilon / mdp.n_actions)
    probs[np.arange(mdp.n_states), greedy] += 1.0 - epsilon
    return Policy(probs)

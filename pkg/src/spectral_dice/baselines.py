"""Reference OPE estimators: tabular direct DICE, model-based, importance sampling.

``direct_dice`` reuses the spectral saddle solver with one-hot features, so a
table-parameterized solve and a spectral solve with identity features follow
bit-identical iterate paths given equal seeds and configs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dice import DiceSolution, Regularizer, SolverConfig, spectral_dice
from .errors import CoverageError
from .mdp import Policy, TabularMdp, TransitionDataset, empirical_pair_weights, policy_value_exact
from .replearn import SpectralRep


@dataclass(frozen=True)
class BaselineResult:
    method: str
    rho_hat: float
    n_used: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.rho_hat):
            raise ValueError("rho_hat must be finite")


def identity_rep(dataset: TransitionDataset, n_states: int, n_actions: int) -> SpectralRep:
    """One-hot features over pairs: theta becomes a Q table, omega a ratio table."""
    n = n_states * n_actions
    eye = np.eye(n)
    return SpectralRep(
        d=n,
        phi=eye,
        mu_pi=eye,
        q_pib=empirical_pair_weights(dataset, n_states, n_actions),
    )


def direct_dice(
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    reg: Regularizer,
    cfg: SolverConfig,
    rewards: np.ndarray,
) -> BaselineResult:
    """Tabular DICE: the saddle solve with full Q and zeta tables."""
    n_states, n_actions = target.probs.shape
    rep = identity_rep(dataset, n_states, n_actions)
    solution = spectral_dice(rep, dataset, target, mu0, reg, cfg, rewards)
    return BaselineResult(
        method="direct_dice",
        rho_hat=solution.rho_hat,
        n_used=dataset.n,
        diagnostics={"final_gap": solution.gap_trace[-1], "iterations": solution.iterations},
    )


def direct_dice_solution(
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    reg: Regularizer,
    cfg: SolverConfig,
    rewards: np.ndarray,
) -> DiceSolution:
    """Full solver output of the tabular solve, for iterate-level comparisons."""
    n_states, n_actions = target.probs.shape
    rep = identity_rep(dataset, n_states, n_actions)
    return spectral_dice(rep, dataset, target, mu0, reg, cfg, rewards)


def model_based(
    dataset: TransitionDataset,
    target: Policy,
    n_states: int,
    n_actions: int,
    mu0: np.ndarray,
    rewards: np.ndarray,
    gamma: float,
    alpha: float = 0.1,
) -> BaselineResult:
    """Count-based model estimate, exact policy evaluation on the learned model.

    Visited rows use maximum-likelihood transition counts; rows never visited
    fall back to additive smoothing with ``alpha`` pseudo-counts, i.e. a
    uniform next-state row.
    """
    counts = np.zeros((n_states, n_actions, n_states))
    s, a, s_next = dataset.transitions.T
    np.add.at(counts, (s, a, s_next), 1.0)
    row_totals = counts.sum(axis=2)
    unvisited = row_totals == 0.0
    counts[unvisited] += alpha
    transition = counts / counts.sum(axis=2, keepdims=True)
    model = TabularMdp(n_states, n_actions, transition, rewards, mu0, gamma)
    rho_hat = policy_value_exact(model, target)
    return BaselineResult(
        method="model_based",
        rho_hat=rho_hat,
        n_used=dataset.n,
        diagnostics={"unvisited_rows": float(unvisited.sum()), "alpha": alpha},
    )


def importance_sampling(
    trajectories: list[tuple[np.ndarray, np.ndarray]],
    target: Policy,
    behavior: Policy,
    gamma: float,
    horizon: int,
    rewards: np.ndarray,
) -> BaselineResult:
    """Trajectory-wise importance sampling with cumulative likelihood ratios.

    Each trajectory contributes w * G * (1-gamma) / (1-gamma^H), where w is
    the product of per-step policy ratios and G the discounted return over the
    fixed horizon.  The weight variance is reported as a diagnostic; it is the
    quantity that blows up with horizon for far-apart policies.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = gamma ** np.arange(horizon)
    norm = (1.0 - gamma) / (1.0 - gamma**horizon)
    estimates = np.empty(len(trajectories))
    weights = np.empty(len(trajectories))
    for i, (states, actions) in enumerate(trajectories):
        s = states[:horizon]
        a = actions[:horizon]
        pb = behavior.probs[s, a]
        if np.any(pb == 0.0):
            t = int(np.flatnonzero(pb == 0.0)[0])
            raise CoverageError(
                f"behavior assigns zero probability to realized action at step {t}"
            )
        w = float(np.prod(target.probs[s, a] / pb))
        ret = float(discounts @ rewards[s, a])
        weights[i] = w
        estimates[i] = w * ret * norm
    return BaselineResult(
        method="importance_sampling",
        rho_hat=float(estimates.mean()),
        n_used=len(trajectories),
        diagnostics={
            "weight_variance": float(weights.var()),
            "weight_max": float(weights.max()),
            "horizon": float(horizon),
        },
    )

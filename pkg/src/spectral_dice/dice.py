"""Regularized convex-concave DICE solve in a learned primal-dual feature space.

The saddle objective over (theta, omega) is

    L(theta, omega) = (1-gamma) E_{s~mu0, a~pi}[phi^T theta]
                      + E.[(mu^T omega) (r + gamma phi(s',a')^T theta - phi(s,a)^T theta)]
                      - lambda E.[f(mu^T omega)]

with f(x) = (x-1)^2 / 2 for the half-square regularizer, which is centered at
1 so an on-policy ratio profile incurs zero penalty.  The middle expectation
runs over dataset transitions (empirical) or behavior-occupancy-weighted
exact tables (oracle).  Because the objective depends on the data only
through (s, a) pair weights and a (s, a) -> s' joint table, every
deterministic quantity here (objective value, analytic gradients, closed-form
inner optimizations, the exact saddle) is computed from those small tables
with target actions averaged analytically.  Only the stochastic
gradient-descent-ascent loop itself samples a' ~ pi(.|s').
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog

from .errors import DegenerateRowError, DivergenceError, RankDeficiencyError
from .mdp import (
    Policy,
    TabularMdp,
    TransitionDataset,
    initial_pair_distribution,
    occupancy_measure,
    policy_value_exact,
    state_action_kernel,
)
from .replearn import SpectralRep, reconstruct_kernel

RHO_SANE_LO = -0.5
RHO_SANE_HI = 1.5


@dataclass(frozen=True)
class Regularizer:
    """kind 'half_square' is f(x) = (x-1)^2 / 2; kind 'none' disables the term."""

    kind: str = "half_square"
    lam: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("none", "half_square"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")
        if self.kind == "none" and self.lam != 0.0:
            raise ValueError("kind='none' forces lambda=0")

    def value(self, zeta: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.zeros_like(zeta)
        return 0.5 * (zeta - 1.0) ** 2

    def grad(self, zeta: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.zeros_like(zeta)
        return zeta - 1.0


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 2000
    step_q: float = 0.01
    step_w: float = 0.01
    batch_size: int = 256
    c_inf_bound: float = 2.0
    seed: int = 0
    projection_passes: int = 5

    def __post_init__(self):
        if self.step_q <= 0.0 or self.step_w <= 0.0:
            raise ValueError("step sizes must be positive")
        if self.c_inf_bound < 1.0:
            raise ValueError("c_inf_bound must be at least 1")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


@dataclass(frozen=True)
class DiceSolution:
    theta_q: np.ndarray
    omega_d: np.ndarray
    rho_hat: float
    gap_trace: list[float] = field(default_factory=list)
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta_q", np.asarray(self.theta_q, dtype=np.float64))
        object.__setattr__(self, "omega_d", np.asarray(self.omega_d, dtype=np.float64))
        if not (RHO_SANE_LO <= self.rho_hat <= RHO_SANE_HI):
            raise ValueError(f"rho_hat={self.rho_hat} outside sanity range [-0.5, 1.5]")
        if not np.all(np.isfinite(self.gap_trace)):
            raise ValueError("gap_trace must be finite everywhere")


# --- shared objective tables -------------------------------------------------


@dataclass(frozen=True)
class _SaddleData:
    """Sufficient statistics of the saddle objective.

    ``w`` are (s, a) pair weights (empirical frequencies or exact behavior
    occupancy), ``joint`` the (s,a) -> s' joint table with the same total
    mass, and ``phi_bar`` the target-averaged next feature per state.
    """

    phi: np.ndarray  # (SA, d)
    mu: np.ndarray  # (SA, d)
    w: np.ndarray  # (SA,)
    joint: np.ndarray  # (SA, S)
    phi_bar: np.ndarray  # (S, d)
    r_flat: np.ndarray  # (SA,)
    c0: np.ndarray  # (d,)
    gamma: float
    reg: Regularizer

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @cached_property
    def moments(self):
        """(B, H, h, g_r) with B = M^T A_delta and H the weighted second moment."""
        a_delta = self.gamma * (self.joint @ self.phi_bar) - self.w[:, None] * self.phi
        b_mat = self.mu.T @ a_delta
        h_mat = self.mu.T @ (self.w[:, None] * self.mu)
        h_vec = self.mu.T @ self.w
        g_r = self.mu.T @ (self.w * self.r_flat)
        return b_mat, h_mat, h_vec, g_r

    def objective(self, theta: np.ndarray, omega: np.ndarray) -> float:
        zeta = self.mu @ omega
        b_mat, _, _, g_r = self.moments
        value = self.c0 @ theta + omega @ (g_r + b_mat @ theta)
        value -= self.reg.lam * float(self.w @ self.reg.value(zeta))
        return float(value)

    def gradients(self, theta: np.ndarray, omega: np.ndarray):
        zeta = self.mu @ omega
        b_mat, _, _, g_r = self.moments
        g_theta = self.c0 + b_mat.T @ omega
        g_omega = g_r + b_mat @ theta - self.reg.lam * (self.mu.T @ (self.w * self.reg.grad(zeta)))
        return g_theta, g_omega


def _mu0_feature(rep: SpectralRep, target: Policy, mu0: np.ndarray, gamma: float) -> np.ndarray:
    b = (np.asarray(mu0)[:, None] * target.probs).reshape(-1)
    return (1.0 - gamma) * (rep.phi.T @ b)


def _phi_bar_states(rep: SpectralRep, target: Policy) -> np.ndarray:
    n_states, n_actions = target.probs.shape
    phi_cube = rep.phi.reshape(n_states, n_actions, rep.d)
    return np.einsum("sa,sad->sd", target.probs, phi_cube)


def _check_dims(rep: SpectralRep, target: Policy, mu0: np.ndarray, rewards: np.ndarray):
    n_states, n_actions = target.probs.shape
    if rep.n_pairs != n_states * n_actions:
        raise ValueError("representation size does not match the policy's state-action space")
    if np.asarray(mu0).shape != (n_states,):
        raise ValueError("mu0 length must equal n_states")
    if np.asarray(rewards).shape != (n_states, n_actions):
        raise ValueError("rewards must be an (n_states, n_actions) table")


def _data_from_dataset(
    rep: SpectralRep,
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    rewards: np.ndarray,
    reg: Regularizer,
) -> _SaddleData:
    _check_dims(rep, target, mu0, rewards)
    if dataset.n < 1:
        raise ValueError("dataset must be nonempty")
    n_states, n_actions = target.probs.shape
    dataset.validate_bounds(n_states, n_actions)
    gamma = dataset.gamma_used
    cur = dataset.transitions[:, 0] * n_actions + dataset.transitions[:, 1]
    joint = np.zeros((n_states * n_actions, n_states))
    np.add.at(joint, (cur, dataset.transitions[:, 2]), 1.0 / dataset.n)
    return _SaddleData(
        phi=rep.phi,
        mu=rep.mu_pi,
        w=joint.sum(axis=1),
        joint=joint,
        phi_bar=_phi_bar_states(rep, target),
        r_flat=np.asarray(rewards, dtype=np.float64).reshape(-1),
        c0=_mu0_feature(rep, target, mu0, gamma),
        gamma=gamma,
        reg=reg,
    )


def _data_from_tables(
    rep: SpectralRep,
    mdp: TabularMdp,
    target: Policy,
    behavior: Policy,
    reg: Regularizer,
) -> _SaddleData:
    _check_dims(rep, target, mdp.mu0, mdp.reward)
    d_pib = occupancy_measure(mdp, behavior).flat
    flat_p = mdp.transition.reshape(mdp.n_pairs, mdp.n_states)
    return _SaddleData(
        phi=rep.phi,
        mu=rep.mu_pi,
        w=d_pib,
        joint=d_pib[:, None] * flat_p,
        phi_bar=_phi_bar_states(rep, target),
        r_flat=mdp.reward.reshape(-1),
        c0=_mu0_feature(rep, target, mdp.mu0, mdp.gamma),
        gamma=mdp.gamma,
        reg=reg,
    )


def saddle_objective(
    rep: SpectralRep,
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    rewards: np.ndarray,
    reg: Regularizer,
    theta: np.ndarray,
    omega: np.ndarray,
) -> float:
    """Deterministic empirical objective (target actions averaged analytically)."""
    data = _data_from_dataset(rep, dataset, target, mu0, rewards, reg)
    return data.objective(np.asarray(theta), np.asarray(omega))


def saddle_gradients(
    rep: SpectralRep,
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    rewards: np.ndarray,
    reg: Regularizer,
    theta: np.ndarray,
    omega: np.ndarray,
):
    """Analytic (grad_theta, grad_omega) of :func:`saddle_objective`."""
    data = _data_from_dataset(rep, dataset, target, mu0, rewards, reg)
    return data.gradients(np.asarray(theta), np.asarray(omega))


# --- box projections ---------------------------------------------------------


def active_constraint_rows(features: np.ndarray, rel_tol: float = 1e-3) -> np.ndarray:
    """Drop near-vacuous constraint rows before projection.

    A row with norm far below the typical scale can only pin its inner product
    to a sliver around zero, yet its Kaczmarz corrections (violation / norm)
    inject noise kicks of order ||v||.  Rows below ``rel_tol`` times the
    largest row norm are removed; this relaxes the feasible set by an amount
    far below solver tolerance.
    """
    norms = np.linalg.norm(features, axis=1)
    top = norms.max(initial=0.0)
    if top == 0.0:
        return features[:0]
    return features[norms > rel_tol * top]


def project_box(
    vec: np.ndarray,
    features: np.ndarray,
    lo: float,
    hi: float,
    passes: int = 5,
    tol: float = 1e-12,
) -> np.ndarray:
    """Cyclic half-space clipping onto {v : lo <= features @ v <= hi}.

    Kaczmarz-style relaxation with a fixed pass budget; exact projection would
    be a QP the pipeline never needs.  Zero feature rows are skipped.
    """
    v = np.array(vec, dtype=np.float64)
    norms = np.einsum("ij,ij->i", features, features)
    live = norms > 0.0
    for _ in range(passes):
        vals = features @ v
        violated = np.flatnonzero(live & ((vals < lo - tol) | (vals > hi + tol)))
        if violated.size == 0:
            break
        for j in violated:
            val = features[j] @ v
            if val > hi:
                v -= ((val - hi) / norms[j]) * features[j]
            elif val < lo:
                v -= ((val - lo) / norms[j]) * features[j]
    return v


# --- value extraction ----------------------------------------------------------


def value_from_zeta(
    rep: SpectralRep,
    omega_d: np.ndarray,
    dataset: TransitionDataset,
    mdp_rewards: np.ndarray,
) -> float:
    """Empirical mean over the dataset of zeta_hat(s, a) * r(s, a)."""
    omega_d = np.asarray(omega_d, dtype=np.float64)
    if omega_d.shape != (rep.d,):
        raise ValueError("omega length must equal the feature dimension")
    rewards = np.asarray(mdp_rewards, dtype=np.float64)
    n_actions = rewards.shape[1]
    cur = dataset.transitions[:, 0] * n_actions + dataset.transitions[:, 1]
    zeta = rep.mu_pi[cur] @ omega_d
    r = rewards[dataset.transitions[:, 0], dataset.transitions[:, 1]]
    return float(np.mean(zeta * r))


# --- stochastic solver ---------------------------------------------------------


def spectral_dice(
    rep: SpectralRep,
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    reg: Regularizer,
    cfg: SolverConfig,
    rewards: np.ndarray,
) -> DiceSolution:
    """Projected stochastic gradient descent-ascent on the regularized objective.

    Fresh target actions are drawn for every sampled batch element.  After
    each step, omega is clipped into {0 <= mu^T omega <= c_inf_bound} over the
    dataset's support and theta into {0 <= phi^T theta <= 1/(1-gamma)} over
    all pairs.  The output is the uniform average of the last half of the
    iterates; ``rho_hat`` comes from :func:`value_from_zeta` at that average.
    ``gap_trace`` holds duality-gap estimates on a thinned checkpoint
    schedule, with a final entry at the averaged iterates.
    """
    data = _data_from_dataset(rep, dataset, target, mu0, rewards, reg)
    n_states, n_actions = target.probs.shape
    gamma = dataset.gamma_used
    rng = np.random.default_rng(cfg.seed)

    cur = dataset.transitions[:, 0] * n_actions + dataset.transitions[:, 1]
    nxt = dataset.transitions[:, 2]
    r_lookup = np.asarray(rewards, dtype=np.float64).reshape(-1)
    support = np.flatnonzero(data.w > 0.0)
    omega_feats = active_constraint_rows(rep.mu_pi[support])
    theta_feats = active_constraint_rows(rep.phi)
    q_hi = 1.0 / (1.0 - gamma)

    theta = np.zeros(rep.d)
    omega = np.zeros(rep.d)
    theta_sum = np.zeros(rep.d)
    omega_sum = np.zeros(rep.d)
    tail_start = cfg.steps // 2
    n_avg = 0
    batch = min(cfg.batch_size, dataset.n)
    gap_every = max(1, cfg.steps // 32)
    gap_trace: list[float] = []

    for step in range(cfg.steps):
        idx = rng.integers(0, dataset.n, size=batch)
        x = cur[idx]
        a_next = _sample_actions(rng, target, nxt[idx])
        y = nxt[idx] * n_actions + a_next

        mu_x = rep.mu_pi[x]
        phi_x = rep.phi[x]
        phi_y = rep.phi[y]
        zeta = mu_x @ omega
        delta = r_lookup[x] + gamma * (phi_y @ theta) - phi_x @ theta
        if not (np.all(np.isfinite(zeta)) and np.all(np.isfinite(delta))):
            raise DivergenceError("saddle objective became non-finite; reduce step sizes")

        g_theta = data.c0 + (zeta[:, None] * (gamma * phi_y - phi_x)).mean(axis=0)
        g_omega = (delta[:, None] * mu_x).mean(axis=0)
        if reg.lam > 0.0:
            g_omega -= reg.lam * (reg.grad(zeta)[:, None] * mu_x).mean(axis=0)

        theta = project_box(
            theta - cfg.step_q * g_theta, theta_feats, 0.0, q_hi, cfg.projection_passes
        )
        omega = project_box(
            omega + cfg.step_w * g_omega, omega_feats, 0.0, cfg.c_inf_bound, cfg.projection_passes
        )

        if step >= tail_start:
            theta_sum += theta
            omega_sum += omega
            n_avg += 1
        if (step + 1) % gap_every == 0:
            gap_trace.append(
                _gap_estimate(data, theta, omega, cfg.c_inf_bound, support, probe_count=0)
            )

    theta_avg = theta_sum / n_avg
    omega_avg = omega_sum / n_avg
    gap_trace.append(
        _gap_estimate(data, theta_avg, omega_avg, cfg.c_inf_bound, support, probe_count=0)
    )
    rho_hat = value_from_zeta(rep, omega_avg, dataset, rewards)
    if not np.isfinite(rho_hat) or not (RHO_SANE_LO <= rho_hat <= RHO_SANE_HI):
        raise DivergenceError(f"solver produced an out-of-range estimate rho_hat={rho_hat}")
    return DiceSolution(
        theta_q=theta_avg,
        omega_d=omega_avg,
        rho_hat=rho_hat,
        gap_trace=gap_trace,
        iterations=cfg.steps,
    )


def _sample_actions(rng: np.random.Generator, target: Policy, states: np.ndarray) -> np.ndarray:
    cum = np.cumsum(target.probs[states], axis=1)
    u = rng.random(states.size)
    return np.minimum((u[:, None] > cum).sum(axis=1), target.n_actions - 1)


# --- exact oracle solve --------------------------------------------------------


def exact_regularized_solve(
    rep: SpectralRep,
    mdp: TabularMdp,
    target: Policy,
    behavior: Policy,
    reg: Regularizer,
) -> DiceSolution:
    """Closed-form saddle point with exact expectations from the MDP tables.

    The inner maximization over omega is an unconstrained concave quadratic
    (hence lambda > 0 is required) and the outer minimization a convex
    quadratic, so the saddle is the solution of one symmetric-indefinite
    linear system.  With exact features the recovered ratio profile
    mu^T omega equals d^pi / d^{pi_b} on the behavior support, independent of
    lambda.
    """
    if reg.kind != "half_square" or reg.lam <= 0.0:
        raise ValueError("closed-form solve requires the half-square regularizer with lambda > 0")
    data = _data_from_tables(rep, mdp, target, behavior, reg)
    b_mat, h_mat, h_vec, g_r = data.moments
    d = data.d
    kkt = np.zeros((2 * d, 2 * d))
    kkt[:d, d:] = b_mat.T
    kkt[d:, :d] = b_mat
    kkt[d:, d:] = -reg.lam * h_mat
    rhs = np.concatenate([-data.c0, -(g_r + reg.lam * h_vec)])
    sigma = np.linalg.svd(kkt, compute_uv=False)
    null_dim = int(np.sum(sigma <= 1e-10 * sigma[0]))
    if null_dim > 0:
        raise RankDeficiencyError("saddle normal equations are singular", null_dim)
    solution = np.linalg.solve(kkt, rhs)
    theta, omega = solution[:d], solution[d:]
    rho_hat = float(g_r @ omega)
    return DiceSolution(theta_q=theta, omega_d=omega, rho_hat=rho_hat, gap_trace=[], iterations=0)


# --- duality gap ----------------------------------------------------------------


def _evaluate_candidates(data: _SaddleData, theta, omega, cands, side: str) -> float:
    values = []
    for cand in cands:
        if side == "omega":
            values.append(data.objective(theta, cand))
        else:
            values.append(data.objective(cand, omega))
    return max(values) if side == "omega" else min(values)


def _omega_candidates(data, theta, omega, bound, support, probe_count, rng):
    b_mat, h_mat, h_vec, g_r = data.moments
    feats = active_constraint_rows(data.mu[support])
    cands = [omega]
    a_vec = g_r + b_mat @ theta
    if data.reg.lam > 0.0:
        try:
            star = np.linalg.solve(data.reg.lam * h_mat, a_vec + data.reg.lam * h_vec)
            cands.append(project_box(star, feats, 0.0, bound))
        except np.linalg.LinAlgError:
            pass
    else:
        res = linprog(
            -a_vec,
            A_ub=np.vstack([feats, -feats]),
            b_ub=np.concatenate([np.full(len(feats), bound), np.zeros(len(feats))]),
            bounds=[(None, None)] * data.d,
            method="highs",
        )
        if res.status == 0:
            cands.append(res.x)
    scale = 1.0 + np.linalg.norm(omega)
    for _ in range(probe_count):
        probe = omega + scale * rng.standard_normal(data.d)
        cands.append(project_box(probe, feats, 0.0, bound))
    return cands


def _theta_candidates(data, theta, omega, q_hi, probe_count, rng):
    b_mat, _, _, _ = data.moments
    feats = active_constraint_rows(data.phi)
    cands = [theta]
    c_vec = data.c0 + b_mat.T @ omega
    res = linprog(
        c_vec,
        A_ub=np.vstack([feats, -feats]),
        b_ub=np.concatenate([np.full(len(feats), q_hi), np.zeros(len(feats))]),
        bounds=[(None, None)] * data.d,
        method="highs",
    )
    if res.status == 0:
        cands.append(res.x)
    scale = 1.0 + np.linalg.norm(theta)
    for _ in range(probe_count):
        probe = theta + scale * rng.standard_normal(data.d)
        cands.append(project_box(probe, feats, 0.0, q_hi))
    return cands


def _gap_estimate(data, theta, omega, bound, support, probe_count=0, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    q_hi = 1.0 / (1.0 - data.gamma)
    best_max = _evaluate_candidates(
        data, theta, omega, _omega_candidates(data, theta, omega, bound, support, probe_count, rng), "omega"
    )
    best_min = _evaluate_candidates(
        data, theta, omega, _theta_candidates(data, theta, omega, q_hi, probe_count, rng), "theta"
    )
    return float(best_max - best_min)


def duality_gap(
    rep: SpectralRep,
    dataset: TransitionDataset,
    target: Policy,
    mu0: np.ndarray,
    reg: Regularizer,
    theta: np.ndarray,
    omega: np.ndarray,
    probe_count: int = 8,
    *,
    rewards: np.ndarray,
    c_inf_bound: float = 2.0,
) -> float:
    """Estimate max_omega L(theta, .) - min_theta L(., omega) over the boxes.

    The omega side uses the closed-form concave-quadratic maximizer (an LP
    when lambda = 0), the theta side an LP over the feasible polytope; both
    sides are sharpened with ``probe_count`` random projected probes and
    always include the query point itself, so the estimate is nonnegative.
    Probes use a fixed internal seed, keeping the diagnostic deterministic.
    """
    data = _data_from_dataset(rep, dataset, target, mu0, rewards, reg)
    support = np.flatnonzero(data.w > 0.0)
    return _gap_estimate(
        data,
        np.asarray(theta, dtype=np.float64),
        np.asarray(omega, dtype=np.float64),
        c_inf_bound,
        support,
        probe_count=probe_count,
    )


# --- simulation lemma diagnostic -----------------------------------------------


class SimulationLemmaResult(NamedTuple):
    lhs: float
    rhs: float
    clipped_mass: float


def simulation_lemma_check(
    mdp: TabularMdp, rep: SpectralRep, target: Policy
) -> SimulationLemmaResult:
    """Exact two-sided evaluation of the value-gap identity for the model kernel.

    The model is the reconstructed state-action kernel, clipped at zero and
    renormalized row-wise.  Both sides are reported on the unnormalized value
    scale, matching the gamma/(1-gamma) factor on the right-hand side:

        lhs = E_{mu0, pi}[Q_model] - rho / (1-gamma)
        rhs = gamma/(1-gamma) E_{d^pi}[(K_model - K_true) Q_model]

    ``clipped_mass`` is the total negative mass removed; the identity holds to
    numerical precision regardless, but a nonzero value flags that the model
    differs from the raw reconstruction.
    """
    raw = reconstruct_kernel(rep)
    clipped = np.maximum(raw, 0.0)
    clipped_mass = float((clipped - raw).sum())
    row_sums = clipped.sum(axis=1)
    if np.any(row_sums <= 0.0):
        bad = int(np.argmin(row_sums))
        raise DegenerateRowError(f"reconstructed row sa={bad} has no positive mass")
    k_model = clipped / row_sums[:, None]

    r_flat = mdp.reward.reshape(-1)
    q_model = np.linalg.solve(np.eye(mdp.n_pairs) - mdp.gamma * k_model, r_flat)
    b = initial_pair_distribution(mdp, target)
    k_true = state_action_kernel(mdp, target)
    d_pi = occupancy_measure(mdp, target).flat

    lhs = float(b @ q_model - policy_value_exact(mdp, target) / (1.0 - mdp.gamma))
    rhs = float(
        mdp.gamma / (1.0 - mdp.gamma) * (d_pi @ ((k_model - k_true) @ q_model))
    )
    return SimulationLemmaResult(lhs=lhs, rhs=rhs, clipped_mass=clipped_mass)

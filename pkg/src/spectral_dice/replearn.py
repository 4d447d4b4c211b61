"""Primal-dual spectral representation learning for the policy-conditioned kernel.

Three learners produce the same artifact, a :class:`SpectralRep` holding
primal features ``phi`` over (s, a), dual features ``mu_pi`` over (s, a), and
the behavior-occupancy weight ``q_pib`` used in reconstruction:

* :func:`svd_representation` is the tabular oracle: a truncated SVD of the
  occupancy-weighted kernel ratio matrix, exact at full rank.
* :func:`ols_replearn` fits the same ratio by least squares on sampled
  positive pairs against product-measure pairs.
* :func:`nce_replearn` fits it as a binary contrastive problem whose
  population optimum is the kernel-to-negative-density ratio.

The reconstruction everywhere is
``P_hat(s',a'|s,a) = q_pib[s',a'] * <phi[s,a], mu_pi[s',a']>``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CoverageError, DivergenceError
from .mdp import (
    OCC_TOL,
    SUPPORT_TOL,
    Policy,
    TabularMdp,
    TransitionDataset,
    occupancy_measure,
    state_action_kernel,
)


@dataclass(frozen=True)
class SpectralRep:
    """Learned or exact primal-dual features of the state-action kernel."""

    d: int
    phi: np.ndarray  # (S*A, d)
    mu_pi: np.ndarray  # (S*A, d)
    q_pib: np.ndarray  # (S*A,), nonnegative, sums to 1

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64))
        object.__setattr__(self, "mu_pi", np.asarray(self.mu_pi, dtype=np.float64))
        object.__setattr__(self, "q_pib", np.asarray(self.q_pib, dtype=np.float64))
        n = self.phi.shape[0]
        if self.phi.shape != (n, self.d) or self.mu_pi.shape != (n, self.d):
            raise ValueError("phi and mu_pi must both have shape (n_pairs, d)")
        if self.q_pib.shape != (n,):
            raise ValueError("q_pib must be a flat table over state-action pairs")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.mu_pi))):
            raise ValueError("feature tables must be finite")
        if np.any(self.q_pib < 0.0) or abs(self.q_pib.sum() - 1.0) > OCC_TOL:
            raise ValueError("q_pib must be a distribution (sum 1 within 1e-10)")

    @property
    def n_pairs(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True)
class ReplearnConfig:
    method: str  # svd | ols | nce
    d: int
    steps: int = 2000
    step_size: float = 0.05
    batch_size: int = 256
    seed: int = 0
    nce_clamp: float = 1e-6

    def __post_init__(self):
        if self.method not in ("svd", "ols", "nce"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.d < 1:
            raise ValueError("feature dimension must be at least 1")


def svd_representation(
    mdp: TabularMdp, target: Policy, behavior: Policy, d: int
) -> SpectralRep:
    """Top-d SVD of G[(s,a),(s',a')] = P^pi(s',a'|s,a) / d^{pi_b}(s',a').

    phi absorbs the singular values (phi = U_d Sigma_d, mu_pi = V_d), which
    keeps the dual feature rows orthonormal.  Columns where the behavior
    occupancy vanishes are excluded; if the kernel puts mass there this is a
    coverage violation.
    """
    kernel = state_action_kernel(mdp, target)
    d_pib = occupancy_measure(mdp, behavior).flat
    off_support = d_pib <= SUPPORT_TOL
    if np.any(off_support):
        column_mass = kernel[:, off_support].max(axis=0)
        if np.any(column_mass > SUPPORT_TOL):
            bad = int(np.flatnonzero(off_support)[np.argmax(column_mass)])
            raise CoverageError(
                f"kernel puts mass on pair sa={bad} with zero behavior occupancy"
            )
    ratio = np.zeros_like(kernel)
    on_support = ~off_support
    ratio[:, on_support] = kernel[:, on_support] / d_pib[on_support]
    u, sigma, vt = np.linalg.svd(ratio, full_matrices=False)
    k = min(d, sigma.size)
    phi = np.zeros((kernel.shape[0], d))
    mu_pi = np.zeros((kernel.shape[0], d))
    phi[:, :k] = u[:, :k] * sigma[:k]
    mu_pi[:, :k] = vt[:k].T
    return SpectralRep(d=d, phi=phi, mu_pi=mu_pi, q_pib=d_pib)


def reconstruct_kernel(rep: SpectralRep) -> np.ndarray:
    """q_pib[s',a'] * <phi[s,a], mu_pi[s',a']> as an (SA, SA) matrix.

    Diagnostic output: no clipping, so small negative entries may appear for
    inexact representations.
    """
    return (rep.phi @ rep.mu_pi.T) * rep.q_pib[None, :]


def replearn_error(
    rep: SpectralRep, mdp: TabularMdp, target: Policy, behavior: Policy
) -> float:
    """Behavior-weighted L1 reconstruction error of the state-action kernel."""
    d_pib = occupancy_measure(mdp, behavior).flat
    kernel = state_action_kernel(mdp, target)
    row_l1 = np.abs(reconstruct_kernel(rep) - kernel).sum(axis=1)
    return float(d_pib @ row_l1)


def ground_truth_rep(
    mdp: TabularMdp,
    phi_star: np.ndarray,
    w_star: np.ndarray,
    target: Policy,
    behavior: Policy,
) -> SpectralRep:
    """Exact features for a known factorization P(s'|s,a) = phi_star @ w_star.

    The dual feature folds the policy ratio into the state feature:
    mu_pi[(s, a)] = (pi(a|s) / pi_b(a|s)) * w_star[:, s] / q(s) with q the
    behavior state occupancy, so the reconstruction with q_pib = d^{pi_b}
    recovers the state-action kernel exactly.  Requires full behavior state
    coverage and pi_b > 0 wherever pi > 0.
    """
    occ = occupancy_measure(mdp, behavior)
    q_state = occ.state_marginal
    if np.any(q_state <= SUPPORT_TOL):
        raise CoverageError("behavior state occupancy must cover every state")
    ratio = np.zeros_like(target.probs)
    pos = behavior.probs > 0.0
    ratio[pos] = target.probs[pos] / behavior.probs[pos]
    if np.any((target.probs > SUPPORT_TOL) & ~pos):
        raise CoverageError("target plays actions the behavior policy never plays")
    mu_state = w_star.T / q_state[:, None]  # (S, d)
    mu_pi = (ratio[:, :, None] * mu_state[:, None, :]).reshape(-1, w_star.shape[0])
    return SpectralRep(
        d=w_star.shape[0], phi=np.array(phi_star), mu_pi=mu_pi, q_pib=occ.flat
    )


# --- sampled learners ------------------------------------------------------


def _sample_target_actions(
    rng: np.random.Generator, target: Policy, next_states: np.ndarray
) -> np.ndarray:
    cum = np.cumsum(target.probs[next_states], axis=1)
    u = rng.random(next_states.size)
    return np.minimum((u[:, None] > cum).sum(axis=1), target.n_actions - 1)


def _shuffled_partner(rng: np.random.Generator, size: int) -> np.ndarray:
    """Fixed-point-free pairing: cyclic shift by a random nonzero offset."""
    if size == 1:
        return np.zeros(1, dtype=np.int64)  # degenerate batch, self-pair unavoidable
    shift = int(rng.integers(1, size))
    return (np.arange(size) + shift) % size


def _init_tables(rng: np.random.Generator, n_pairs: int, d: int):
    """Positive initialization with inner products near 1."""
    scale = 1.0 / np.sqrt(d)
    phi = rng.uniform(0.5, 1.5, size=(n_pairs, d)) * scale
    mu = rng.uniform(0.5, 1.5, size=(n_pairs, d)) * scale
    return phi, mu


def _prepare(dataset: TransitionDataset, target: Policy, q_pib: np.ndarray):
    if dataset.n < 1:
        raise ValueError("dataset must be nonempty")
    n_states, n_actions = target.probs.shape
    dataset.validate_bounds(n_states, n_actions)
    q_pib = np.asarray(q_pib, dtype=np.float64).reshape(-1)
    if q_pib.size != n_states * n_actions:
        raise ValueError("q_pib length must equal n_states * n_actions")
    cur = dataset.transitions[:, 0] * n_actions + dataset.transitions[:, 1]
    nxt_state = dataset.transitions[:, 2]
    return q_pib, cur, nxt_state, n_actions


def ols_replearn(
    dataset: TransitionDataset,
    target: Policy,
    cfg: ReplearnConfig,
    q_pib: np.ndarray,
    phi_init: np.ndarray | None = None,
    mu_init: np.ndarray | None = None,
    learn_phi: bool = True,
) -> SpectralRep:
    """Least-squares factor fitting by mini-batch SGD.

    Minimizes E[(phi(s,a)^T mu(s~',a~'))^2] - 2 E[phi(s,a)^T mu(s',a')] where
    the first expectation pairs batch elements with a shuffled copy of their
    own (s, a) entries (both marginals are behavior-occupancy draws) and the
    second uses dataset transitions with a' drawn fresh from the target
    policy at every visit.
    """
    q_pib, cur, nxt_state, n_actions = _prepare(dataset, target, q_pib)
    rng = np.random.default_rng(cfg.seed)
    phi, mu = _init_tables(rng, q_pib.size, cfg.d)
    if phi_init is not None:
        phi = np.array(phi_init, dtype=np.float64)
    if mu_init is not None:
        mu = np.array(mu_init, dtype=np.float64)

    batch = min(cfg.batch_size, dataset.n)
    for _ in range(cfg.steps):
        idx = rng.integers(0, dataset.n, size=batch)
        x = cur[idx]
        a_next = _sample_target_actions(rng, target, nxt_state[idx])
        y = nxt_state[idx] * n_actions + a_next
        z = cur[idx[_shuffled_partner(rng, batch)]]

        u = np.einsum("ij,ij->i", phi[x], mu[z])
        if not np.all(np.isfinite(u)):
            raise DivergenceError("OLS objective became non-finite; reduce step_size")

        grad_phi = np.zeros_like(phi)
        grad_mu = np.zeros_like(mu)
        coef = 2.0 / batch
        if learn_phi:
            np.add.at(grad_phi, x, coef * (u[:, None] * mu[z] - mu[y]))
        np.add.at(grad_mu, z, coef * u[:, None] * phi[x])
        np.add.at(grad_mu, y, -coef * phi[x])
        phi = phi - cfg.step_size * grad_phi
        mu = mu - cfg.step_size * grad_mu

    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(mu))):
        raise DivergenceError("OLS iterates diverged; reduce step_size")
    return SpectralRep(d=cfg.d, phi=phi, mu_pi=mu, q_pib=q_pib)


def nce_replearn(
    dataset: TransitionDataset,
    target: Policy,
    cfg: ReplearnConfig,
    q_pib: np.ndarray,
    phi_init: np.ndarray | None = None,
    mu_init: np.ndarray | None = None,
    learn_phi: bool = True,
) -> SpectralRep:
    """Binary contrastive learner whose population optimum is P^pi / P_neg.

    Positives are dataset transitions with a' ~ target; negatives resample the
    dataset's own (s, a) pairs, so P_neg is the behavior occupancy.  Inner
    products are floored at ``cfg.nce_clamp`` inside the logarithms; a zero
    floor combined with a non-positive inner product raises
    :class:`DivergenceError`.
    """
    q_pib, cur, nxt_state, n_actions = _prepare(dataset, target, q_pib)
    rng = np.random.default_rng(cfg.seed)
    phi, mu = _init_tables(rng, q_pib.size, cfg.d)
    if phi_init is not None:
        phi = np.array(phi_init, dtype=np.float64)
    if mu_init is not None:
        mu = np.array(mu_init, dtype=np.float64)

    batch = min(cfg.batch_size, dataset.n)
    for _ in range(cfg.steps):
        idx = rng.integers(0, dataset.n, size=batch)
        x = cur[idx]
        a_next = _sample_target_actions(rng, target, nxt_state[idx])
        y = nxt_state[idx] * n_actions + a_next
        z = cur[idx[_shuffled_partner(rng, batch)]]

        f_pos = np.einsum("ij,ij->i", phi[x], mu[y])
        f_neg = np.einsum("ij,ij->i", phi[x], mu[z])
        pos_c = np.maximum(f_pos, cfg.nce_clamp)
        neg_c = np.maximum(f_neg, cfg.nce_clamp)
        with np.errstate(divide="ignore"):
            loss = np.mean(np.log1p(1.0 / pos_c)) + np.mean(np.log1p(neg_c))
        if not np.isfinite(loss):
            raise DivergenceError("NCE loss became non-finite (zero inner product?)")

        # d/df log(1 + 1/f) = -1/(f (1+f)); d/df log(1 + f) = 1/(1+f).
        g_pos = np.where(f_pos > cfg.nce_clamp, -1.0 / (pos_c * (1.0 + pos_c)), 0.0)
        g_neg = np.where(f_neg > cfg.nce_clamp, 1.0 / (1.0 + neg_c), 0.0)
        grad_phi = np.zeros_like(phi)
        grad_mu = np.zeros_like(mu)
        if learn_phi:
            np.add.at(grad_phi, x, (g_pos[:, None] * mu[y] + g_neg[:, None] * mu[z]) / batch)
        np.add.at(grad_mu, y, g_pos[:, None] * phi[x] / batch)
        np.add.at(grad_mu, z, g_neg[:, None] * phi[x] / batch)
        phi = phi - cfg.step_size * grad_phi
        mu = mu - cfg.step_size * grad_mu

    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(mu))):
        raise DivergenceError("NCE iterates diverged; reduce step_size")
    return SpectralRep(d=cfg.d, phi=phi, mu_pi=mu, q_pib=q_pib)


def learn_representation(
    dataset: TransitionDataset,
    target: Policy,
    cfg: ReplearnConfig,
    q_pib: np.ndarray,
) -> SpectralRep:
    """Dispatch on cfg.method for the sampled learners."""
    if cfg.method == "ols":
        return ols_replearn(dataset, target, cfg, q_pib)
    if cfg.method == "nce":
        return nce_replearn(dataset, target, cfg, q_pib)
    raise ValueError("svd_representation needs the exact MDP; call it directly")


# --- persistence -----------------------------------------------------------


def save_rep(rep: SpectralRep, directory: str | Path, method: str = "", seed: int = 0, steps: int = 0):
    """CSV triple (phi, mu_pi, q_pib) plus key=value metadata in a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, table in (("phi", rep.phi), ("mu_pi", rep.mu_pi)):
        with (directory / f"{name}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            for row in table:
                writer.writerow([format(v, ".17g") for v in row])
    with (directory / "q_pib.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        for v in rep.q_pib:
            writer.writerow([format(v, ".17g")])
    (directory / "meta.txt").write_text(
        f"d={rep.d}\nmethod={method}\nseed={seed}\nsteps={steps}\n"
    )


def load_rep(directory: str | Path) -> SpectralRep:
    directory = Path(directory)
    meta = {}
    for line in (directory / "meta.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key] = value

    def read_table(name: str) -> np.ndarray:
        with (directory / f"{name}.csv").open(newline="") as fh:
            return np.asarray([[float(v) for v in row] for row in csv.reader(fh)])

    return SpectralRep(
        d=int(meta["d"]),
        phi=read_table("phi"),
        mu_pi=read_table("mu_pi"),
        q_pib=read_table("q_pib").reshape(-1),
    )

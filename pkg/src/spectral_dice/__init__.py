"""Off-policy evaluation with primal-dual spectral representations on tabular MDPs."""

from .baselines import BaselineResult, direct_dice, importance_sampling, model_based
from .dice import (
    DiceSolution,
    Regularizer,
    SimulationLemmaResult,
    SolverConfig,
    duality_gap,
    exact_regularized_solve,
    simulation_lemma_check,
    spectral_dice,
    value_from_zeta,
)
from .envs import (
    LowRankGroundTruth,
    eps_greedy_policy,
    four_rooms,
    random_lowrank_mdp,
    uniform_policy,
)
from .errors import (
    ConfigError,
    CoverageError,
    DegenerateRowError,
    DivergenceError,
    RankDeficiencyError,
)
from .mdp import (
    OccupancyTable,
    Policy,
    TabularMdp,
    TransitionDataset,
    concentratability,
    occupancy_measure,
    policy_value_exact,
    sample_dataset,
    sample_trajectories,
    state_action_kernel,
)
from .replearn import (
    ReplearnConfig,
    SpectralRep,
    ground_truth_rep,
    nce_replearn,
    ols_replearn,
    reconstruct_kernel,
    replearn_error,
    svd_representation,
)

__all__ = [name for name in dir() if not name.startswith("_")]

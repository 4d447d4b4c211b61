"""Experiment orchestration: config parsing, dataset generation, sweeps, dumps.

Configs are flat sectioned key=value files (INI syntax, no nesting).  Every
sweep cell (n, d, seed) runs independently with RNG streams derived from the
config hash and cell index, so sequential ``evaluate`` and parallel ``sweep``
produce byte-identical results files.  No timestamps are written anywhere.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import baselines as bl
from .dice import Regularizer, SolverConfig, spectral_dice
from .envs import eps_greedy_policy, four_rooms, four_rooms_cells, four_rooms_grid_shape, random_lowrank_mdp
from .errors import ConfigError
from .mdp import (
    Policy,
    TabularMdp,
    concentratability,
    empirical_pair_weights,
    load_mdp,
    policy_value_exact,
    sample_dataset,
    sample_trajectories,
    save_dataset,
)
from .replearn import (
    ReplearnConfig,
    SpectralRep,
    learn_representation,
    load_rep,
    replearn_error,
    svd_representation,
)

RESULT_FIELDS = [
    "method",
    "n",
    "d",
    "seed",
    "rho_hat",
    "rho_true",
    "abs_error",
    "relative_error",
    "replearn_error",
    "final_gap",
    "status",
    "config_hash",
    "cell_index",
]


@dataclass(frozen=True)
class ExperimentConfig:
    # env
    env_kind: str  # four_rooms | lowrank | file
    gamma: float
    n_states: int = 8
    n_actions: int = 2
    rank: int = 2
    env_seed: int = 7
    linear_reward: bool = False
    noise: float = 0.1
    goal: int = 50
    env_path: str = ""
    # policies
    target_eps: float = 0.1
    behavior_eps: float = 0.3
    target_file: str = ""
    behavior_file: str = ""
    # data
    n_list: tuple = (1024,)
    seeds: tuple = (0,)
    # replearn
    replearn_method: str = "svd"
    d_list: tuple = (2,)
    replearn_steps: int = 2000
    replearn_step_size: float = 0.05
    replearn_batch: int = 256
    nce_clamp: float = 1e-6
    # dice
    reg_kind: str = "half_square"
    reg_lambda: float = 1e-3
    dice_steps: int = 2000
    dice_step_q: float | None = None  # None means auto-scaled from features
    dice_step_w: float | None = None
    dice_batch: int = 256
    c_inf_bound: float | None = None  # None means 2x exact concentratability
    projection_passes: int = 5
    # baselines
    methods: tuple = ("spectral",)
    is_horizon: int = 100
    # output
    out_dir: str = "out"
    config_hash: str = ""

    def __post_init__(self):
        if not self.n_list or not self.seeds or not self.d_list:
            raise ConfigError("n_list, d_list and seeds must be nonempty")
        if any(n < 1 for n in self.n_list):
            raise ConfigError("all N values must be >= 1")
        if self.env_kind not in ("four_rooms", "lowrank", "file"):
            raise ConfigError(f"unknown env kind {self.env_kind!r}")


def _get(section, key, default=None, cast=str):
    if key not in section:
        if default is None:
            raise ConfigError(f"missing key {key!r} in section [{section.name}]")
        return default
    raw = section[key].strip()
    if cast is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _tuple_of(cast):
    def parse(raw: str):
        return tuple(cast(v.strip()) for v in raw.split(",") if v.strip())

    return parse


def _optional_float(raw: str) -> float | None:
    return None if raw.strip().lower() == "auto" else float(raw)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(raw.decode())
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        env = parser["env"]
        cfg = ExperimentConfig(
            env_kind=_get(env, "kind"),
            gamma=_get(env, "gamma", cast=float),
            n_states=_get(env, "n_states", 8, int),
            n_actions=_get(env, "n_actions", 2, int),
            rank=_get(env, "rank", 2, int),
            env_seed=_get(env, "env_seed", 7, int),
            linear_reward=_get(env, "linear_reward", False, bool),
            noise=_get(env, "noise", 0.1, float),
            goal=_get(env, "goal", 50, int),
            env_path=_get(env, "path", "", str),
            target_eps=_get(parser["policies"], "target_eps", 0.1, float),
            behavior_eps=_get(parser["policies"], "behavior_eps", 0.3, float),
            target_file=_get(parser["policies"], "target_file", "", str),
            behavior_file=_get(parser["policies"], "behavior_file", "", str),
            n_list=_get(parser["data"], "n_list", cast=_tuple_of(int)),
            seeds=_get(parser["data"], "seeds", cast=_tuple_of(int)),
            replearn_method=_get(parser["replearn"], "method", "svd", str),
            d_list=_get(parser["replearn"], "d_list", cast=_tuple_of(int)),
            replearn_steps=_get(parser["replearn"], "steps", 2000, int),
            replearn_step_size=_get(parser["replearn"], "step_size", 0.05, float),
            replearn_batch=_get(parser["replearn"], "batch_size", 256, int),
            nce_clamp=_get(parser["replearn"], "nce_clamp", 1e-6, float),
            reg_kind=_get(parser["dice"], "kind", "half_square", str),
            reg_lambda=_get(parser["dice"], "lambda", 1e-3, float),
            dice_steps=_get(parser["dice"], "steps", 2000, int),
            dice_step_q=_get(parser["dice"], "step_q", "auto", _optional_float),
            dice_step_w=_get(parser["dice"], "step_w", "auto", _optional_float),
            dice_batch=_get(parser["dice"], "batch_size", 256, int),
            c_inf_bound=_get(parser["dice"], "c_inf_bound", "auto", _optional_float),
            projection_passes=_get(parser["dice"], "projection_passes", 5, int),
            methods=_get(parser["baselines"], "methods", ("spectral",), _tuple_of(str))
            if parser.has_section("baselines")
            else ("spectral",),
            is_horizon=_get(parser["baselines"], "is_horizon", 100, int)
            if parser.has_section("baselines")
            else 100,
            out_dir=_get(parser["output"], "dir", "out", str),
            config_hash=hashlib.sha256(raw).hexdigest()[:12],
        )
    except KeyError as exc:
        raise ConfigError(f"missing section {exc} in {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad value in {path}: {exc}") from exc
    return cfg


# --- environment assembly ----------------------------------------------------


def build_env(cfg: ExperimentConfig) -> tuple[TabularMdp, Policy, Policy]:
    if cfg.env_kind == "lowrank":
        mdp, _ = random_lowrank_mdp(
            cfg.n_states, cfg.n_actions, cfg.rank, cfg.env_seed,
            linear_reward=cfg.linear_reward, gamma=cfg.gamma,
        )
    elif cfg.env_kind == "four_rooms":
        mdp = four_rooms(cfg.noise, cfg.goal, cfg.gamma)
    else:
        mdp = load_mdp(cfg.env_path)

    def load_policy(path: str, eps: float) -> Policy:
        if path:
            return Policy(np.loadtxt(path, ndmin=2))
        return eps_greedy_policy(mdp, eps)

    target = load_policy(cfg.target_file, cfg.target_eps)
    behavior = load_policy(cfg.behavior_file, cfg.behavior_eps)
    return mdp, target, behavior


def _derive_seed(cfg: ExperimentConfig, cell_index: int, stream: int) -> int:
    base = int(cfg.config_hash[:8] or "0", 16)
    return int(np.random.SeedSequence([base, cell_index, stream]).generate_state(1)[0])


def auto_step(features: np.ndarray, base: float = 2.0) -> float:
    """Step size scaled by the mean squared feature row norm."""
    mean_sq = float(np.mean(np.einsum("ij,ij->i", features, features)))
    return base / (1.0 + mean_sq)


def solver_config_for(cfg: ExperimentConfig, rep: SpectralRep, c_inf: float, seed: int) -> SolverConfig:
    step_q = cfg.dice_step_q if cfg.dice_step_q is not None else auto_step(rep.phi)
    step_w = cfg.dice_step_w if cfg.dice_step_w is not None else auto_step(rep.mu_pi)
    return SolverConfig(
        steps=cfg.dice_steps,
        step_q=step_q,
        step_w=step_w,
        batch_size=cfg.dice_batch,
        c_inf_bound=c_inf,
        seed=seed,
        projection_passes=cfg.projection_passes,
    )


# --- subcommands ---------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, seed_offset: int = 0) -> list[Path]:
    """Write one dataset CSV (+ metadata sidecar) per (N, seed) plus a manifest."""
    mdp, _, behavior = build_env(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n in cfg.n_list:
        for seed in cfg.seeds:
            dataset = sample_dataset(
                mdp, behavior, n, seed=seed + seed_offset, behavior_id=f"eps{cfg.behavior_eps}"
            )
            path = out / f"dataset_n{n}_seed{seed}.csv"
            save_dataset(dataset, path)
            paths.append(path)
    manifest = out / "manifest.txt"
    manifest.write_text("".join(f"{p.name}\n" for p in paths))
    return paths


def _cells(cfg: ExperimentConfig):
    return list(product(cfg.n_list, cfg.d_list, cfg.seeds))


def _blank_row(method, n, d, seed, cfg, cell_index):
    return {
        "method": method,
        "n": n,
        "d": d,
        "seed": seed,
        "rho_hat": "",
        "rho_true": "",
        "abs_error": "",
        "relative_error": "",
        "replearn_error": "",
        "final_gap": "",
        "status": "ok",
        "config_hash": cfg.config_hash,
        "cell_index": cell_index,
    }


def run_cell(cfg: ExperimentConfig, cell_index: int, cell, seed_offset: int = 0) -> list[dict]:
    """Evaluate every enabled method on one (n, d, seed) cell.

    Failures are recorded per-row in the status column; the cell never raises.
    """
    n, d, seed = cell
    mdp, target, behavior = build_env(cfg)
    rho_true = policy_value_exact(mdp, target)
    rho_behavior = policy_value_exact(mdp, behavior)
    denom = max(abs(rho_behavior - rho_true), 1e-12)
    reg = Regularizer(kind=cfg.reg_kind, lam=cfg.reg_lambda)
    dataset = sample_dataset(mdp, behavior, n, seed=seed + seed_offset)
    if cfg.c_inf_bound is not None:
        c_inf = cfg.c_inf_bound
    else:
        c_inf = max(1.0, 2.0 * concentratability(mdp, target, behavior))

    rows = []
    for method in cfg.methods:
        row = _blank_row(method, n, d, seed, cfg, cell_index)
        row["rho_true"] = rho_true
        try:
            if method == "spectral":
                if cfg.replearn_method == "svd":
                    rep = svd_representation(mdp, target, behavior, d)
                else:
                    rl_cfg = ReplearnConfig(
                        method=cfg.replearn_method,
                        d=d,
                        steps=cfg.replearn_steps,
                        step_size=cfg.replearn_step_size,
                        batch_size=cfg.replearn_batch,
                        seed=_derive_seed(cfg, cell_index, 1),
                        nce_clamp=cfg.nce_clamp,
                    )
                    q_pib = empirical_pair_weights(dataset, mdp.n_states, mdp.n_actions)
                    rep = learn_representation(dataset, target, rl_cfg, q_pib)
                row["replearn_error"] = replearn_error(rep, mdp, target, behavior)
                sol_cfg = solver_config_for(cfg, rep, c_inf, _derive_seed(cfg, cell_index, 2))
                solution = spectral_dice(rep, dataset, target, mdp.mu0, reg, sol_cfg, mdp.reward)
                row["rho_hat"] = solution.rho_hat
                row["final_gap"] = solution.gap_trace[-1]
            elif method == "direct_dice":
                rep = bl.identity_rep(dataset, mdp.n_states, mdp.n_actions)
                sol_cfg = solver_config_for(cfg, rep, c_inf, _derive_seed(cfg, cell_index, 2))
                result = bl.direct_dice(dataset, target, mdp.mu0, reg, sol_cfg, mdp.reward)
                row["rho_hat"] = result.rho_hat
                row["final_gap"] = result.diagnostics["final_gap"]
            elif method == "model_based":
                result = bl.model_based(
                    dataset, target, mdp.n_states, mdp.n_actions, mdp.mu0, mdp.reward, mdp.gamma
                )
                row["rho_hat"] = result.rho_hat
            elif method == "importance_sampling":
                n_traj = max(1, n // cfg.is_horizon)
                trajectories = sample_trajectories(
                    mdp, behavior, n_traj, cfg.is_horizon, _derive_seed(cfg, cell_index, 3)
                )
                result = bl.importance_sampling(
                    trajectories, target, behavior, mdp.gamma, cfg.is_horizon, mdp.reward
                )
                row["rho_hat"] = result.rho_hat
            else:
                raise ConfigError(f"unknown method {method!r}")
            row["abs_error"] = abs(row["rho_hat"] - rho_true)
            row["relative_error"] = row["abs_error"] / denom
        except Exception as exc:  # noqa: BLE001 - per-row status, run continues
            row["status"] = f"error:{type(exc).__name__}"
        rows.append(row)
    return rows


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results(rows: list[dict], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_value(v) for k, v in row.items()})


def cmd_evaluate(cfg: ExperimentConfig, seed_offset: int = 0, jobs: int = 1) -> tuple[Path, int]:
    """Run all sweep cells and write results.csv; returns (path, n_failed_rows)."""
    cells = _cells(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(
                pool.map(
                    run_cell,
                    [cfg] * len(cells),
                    range(len(cells)),
                    cells,
                    [seed_offset] * len(cells),
                )
            )
    else:
        chunks = [run_cell(cfg, i, cell, seed_offset) for i, cell in enumerate(cells)]
    rows = [row for chunk in chunks for row in chunk]
    out = Path(cfg.out_dir) / "results.csv"
    write_results(rows, out)
    failed = sum(1 for row in rows if row["status"] != "ok")
    return out, failed


def cmd_dump_kernel(cfg: ExperimentConfig, rep_path: str | Path, state: int) -> list[Path]:
    """Dump reconstructed next-state heatmaps P_hat(.|s, a) for one state.

    The action-conditional next-state distribution marginalizes the target
    action out of the reconstructed state-action kernel.  Four Rooms output is
    reshaped to the grid with NaN on walls; other envs emit one flat row.
    """
    rep_path = Path(rep_path)
    if not rep_path.exists():
        raise FileNotFoundError(f"representation path not found: {rep_path}")
    rep = load_rep(rep_path)
    mdp, _, _ = build_env(cfg)
    if not (0 <= state < mdp.n_states):
        raise ValueError(f"state must lie in [0, {mdp.n_states})")
    from .replearn import reconstruct_kernel

    kernel = reconstruct_kernel(rep)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for action in range(mdp.n_actions):
        sa = state * mdp.n_actions + action
        next_state_probs = kernel[sa].reshape(mdp.n_states, mdp.n_actions).sum(axis=1)
        path = out / f"kernel_s{state}_a{action}.csv"
        if cfg.env_kind == "four_rooms":
            rows_, cols_ = four_rooms_grid_shape()
            grid = np.full((rows_, cols_), math.nan)
            for idx, (r, c) in enumerate(four_rooms_cells()):
                grid[r, c] = next_state_probs[idx]
            body = grid
        else:
            body = next_state_probs[None, :]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            for line in body:
                writer.writerow([repr(float(v)) for v in line])
        paths.append(path)
    return paths

"""Iterated projected evaluation and control, with per-iteration diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .analysis import beta_p, radius_l2
from .grid import (AtomGrid, ReturnFunction, embedding_matrix, grid_for_returns, lp_distance_array,
                   make_uniform_grid, projection_matrix)
from .mdp import (Policy, TabularMdp, eta_pi_dp, fine_dp_oracle, greedy_policy, mc_return_oracle,
                  mix_policies, optimal_q, policy_l1_distance, project_array_table)
from .operators import SolverOptions, TraceSpec, _workspace, apply_operator

CSV_COLUMNS = ("k", "sup_l2", "pt_l2", "min_mass", "mass_err", "step_change", "policy_eps")
ORACLES = ("dp", "fine_dp", "mc")


@dataclass(frozen=True)
class IterationLog:
    k: int
    sup_l2_to_oracle: float
    pointwise_l2_at_x0a0: float
    min_mass_overall: float
    total_mass_error: float
    step_change: float
    target_policy_epsilon: float

    def row(self) -> tuple:
        return (self.k, self.sup_l2_to_oracle, self.pointwise_l2_at_x0a0, self.min_mass_overall,
                self.total_mass_error, self.step_change, self.target_policy_epsilon)


@dataclass(frozen=True)
class RunConfig:
    """Settings for one evaluate or control run.

    ``v_min``/``v_max`` default to the return range of the MDP.  ``oracle``
    selects the reference distributions: ``dp`` (projected Bellman fixed
    point on the same grid), ``fine_dp`` (fixed point on a refined grid,
    projected once) or ``mc`` (projected Monte-Carlo returns).
    """

    mode: str = "evaluate"
    trace: TraceSpec = field(default_factory=TraceSpec.one_step)
    m: int = 10
    v_min: float | None = None
    v_max: float | None = None
    allow_uncovered: bool = False
    k_max: int = 100
    stop_tol: float = 0.0
    alpha: float = 1.0
    oracle: str = "mc"
    oracle_n_traj: int = 1000
    oracle_refine: int = 100
    solver_mode: str = "auto"
    refine: int = 1
    tracked: tuple[int, int] = (0, 0)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("evaluate", "control"):
            raise ValueError("mode must be 'evaluate' or 'control'")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.oracle not in ORACLES:
            raise ValueError(f"oracle must be one of {ORACLES}")
        if self.m < 2:
            raise ValueError("m must be >= 2")

    @property
    def solver(self) -> SolverOptions:
        return SolverOptions(mode=self.solver_mode, refine=self.refine)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trace"] = asdict(self.trace)
        d["tracked"] = list(self.tracked)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if isinstance(doc.get("trace"), dict):
            doc["trace"] = TraceSpec(**doc["trace"])
        if "tracked" in doc:
            doc["tracked"] = tuple(doc["tracked"])
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown run settings: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class RunResult:
    logs: list[IterationLog]
    final: ReturnFunction
    oracle: ReturnFunction

    def summary(self) -> dict:
        return summarize(self.logs)


def make_grid(mdp: TabularMdp, config: RunConfig) -> AtomGrid:
    lo, hi = mdp.return_range
    if config.v_min is None and config.v_max is None:
        return grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, config.m)
    v_min = lo if config.v_min is None else config.v_min
    v_max = hi if config.v_max is None else config.v_max
    grid = make_uniform_grid(v_min, v_max, config.m)
    if not grid.covers(lo, hi) and not config.allow_uncovered:
        raise ValueError(f"grid [{v_min:g}, {v_max:g}] does not cover the return range [{lo:g}, {hi:g}]; "
                         "pass allow_uncovered to clip instead")
    return grid


def build_oracle(mdp: TabularMdp, pi: Policy, grid: AtomGrid, config: RunConfig,
                 rng: np.random.Generator | None = None) -> ReturnFunction:
    if config.oracle == "dp":
        return eta_pi_dp(mdp, pi, grid)
    if config.oracle == "fine_dp":
        return fine_dp_oracle(mdp, pi, grid, refine=config.oracle_refine)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return mc_return_oracle(mdp, pi, grid, config.oracle_n_traj, rng=rng)


def optimal_policy(mdp: TabularMdp) -> Policy:
    return greedy_policy(optimal_q(mdp))


def _log(k, masses, prev, oracle, tracked, eps):
    grid = oracle.grid
    d = lp_distance_array(grid, masses, oracle.masses)
    x0, a0 = tracked
    return IterationLog(
        k=k,
        sup_l2_to_oracle=float(np.max(d)),
        pointwise_l2_at_x0a0=float(d[x0, a0]),
        min_mass_overall=float(np.min(masses)),
        total_mass_error=float(np.max(np.abs(masses.sum(axis=-1) - 1.0))),
        step_change=float(np.max(lp_distance_array(grid, masses, prev))),
        target_policy_epsilon=eps,
    )


def _run(mdp, mu, config, target_of, oracle, init):
    grid = oracle.grid
    x0, a0 = config.tracked
    if not (0 <= x0 < mdp.n_states and 0 <= a0 < mdp.n_actions):
        raise ValueError(f"tracked pair {config.tracked} is outside the MDP")
    eta = ReturnFunction.uniform(grid, mdp.n_states, mdp.n_actions) if init is None else init
    opts = config.solver
    _workspace(mdp, grid, opts.refine)  # emit the coverage warning once, up front
    logs = []
    for k in range(1, config.k_max + 1):
        pi = target_of(eta)
        try:
            new = apply_operator(mdp, pi, mu, config.trace, eta, opts)
        except Exception as exc:
            raise RuntimeError(f"operator failed at iteration {k}: {exc}") from exc
        logs.append(_log(k, new.masses, eta.masses, oracle, config.tracked,
                         policy_l1_distance(pi, mu)))
        eta = new
        if logs[-1].step_change < config.stop_tol:
            break
    return RunResult(logs, eta, oracle)


def run_evaluate(mdp: TabularMdp, pi: Policy, mu: Policy, config: RunConfig,
                 oracle: ReturnFunction | None = None, init: ReturnFunction | None = None) -> RunResult:
    if oracle is None:
        oracle = build_oracle(mdp, pi, make_grid(mdp, config), config)
    return _run(mdp, mu, config, lambda eta: pi, oracle, init)


def evaluate(mdp: TabularMdp, pi: Policy, mu: Policy, config: RunConfig,
             oracle: ReturnFunction | None = None) -> list[IterationLog]:
    """Iterate ``eta_{k+1} = Pi_c O eta_k`` from uniform measures for fixed pi and mu."""
    return run_evaluate(mdp, pi, mu, config, oracle).logs


def run_control(mdp: TabularMdp, mu: Policy, config: RunConfig,
                oracle: ReturnFunction | None = None, init: ReturnFunction | None = None) -> RunResult:
    if oracle is None:
        oracle = build_oracle(mdp, optimal_policy(mdp), make_grid(mdp, config), config)
    alpha = config.alpha

    def target_of(eta):
        return mix_policies(alpha, greedy_policy(eta.means()), mu)

    return _run(mdp, mu, config, target_of, oracle, init)


def control(mdp: TabularMdp, mu: Policy, config: RunConfig,
            oracle: ReturnFunction | None = None) -> list[IterationLog]:
    """Control with target ``mix(alpha, greedy(Q_eta_k), mu)`` at every step."""
    return run_control(mdp, mu, config, oracle).logs


# --------------------------------------------------------------------------
# negative-mass trace


@dataclass
class Figure1Trace:
    grid: AtomGrid
    tracked: tuple[int, int]
    masses: np.ndarray        # (k_max + 1, m) tracked entry at k = 0..k_max
    min_mass: np.ndarray      # tracked entry
    min_mass_overall: np.ndarray
    total_mass: np.ndarray
    sup_l2_to_target: np.ndarray
    bound: float              # approximation bound from beta_2 and the target's projection error

    @property
    def k_max(self) -> int:
        return len(self.masses) - 1

    def went_negative(self, tol: float = 1e-6) -> bool:
        return bool(np.any(self.min_mass_overall < -tol))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "atom_index", "atom", "mass", "min_mass", "total_mass"])
        for k, row in enumerate(self.masses):
            for i, (z, p) in enumerate(zip(self.grid.atoms, row)):
                w.writerow([k, i, repr(float(z)), repr(float(p)), repr(float(self.min_mass[k])),
                            repr(float(self.total_mass[k]))])
        return buf.getvalue()


def figure1_trace(mdp: TabularMdp, pi: Policy, mu: Policy, lam: float, grid: AtomGrid, k_max: int,
                  tracked: tuple[int, int] = (0, 0), opts: SolverOptions | None = None,
                  target: ReturnFunction | None = None, target_refine: int = 100) -> Figure1Trace:
    """Mass vectors of one entry along ``eta_{k+1} = Pi_c A eta_k`` from uniform measures.

    ``target`` defaults to a fine-grid DP estimate of the return distribution,
    projected onto ``grid``; its projection error feeds ``bound``.
    """
    eps = policy_l1_distance(pi, mu)
    if lam > 0 and eps >= radius_l2(mdp.gamma, lam):
        warnings.warn(f"||pi - mu||_1 = {eps:.3g} is outside the l2 contraction radius", stacklevel=2)
    x0, a0 = tracked
    if not (0 <= x0 < mdp.n_states and 0 <= a0 < mdp.n_actions):
        raise ValueError(f"tracked pair {tracked} is outside the MDP")
    trace = TraceSpec.off_policy(lam)
    if target is None:
        fine = grid.refined(target_refine)
        fine_eta = eta_pi_dp(mdp, pi, fine)
        target = ReturnFunction(grid, project_array_table(grid, fine, fine_eta.masses))
        d_proj = _projection_error(fine, grid, fine_eta.masses)
    else:
        d_proj = 0.0
    eta = ReturnFunction.uniform(grid, mdp.n_states, mdp.n_actions)
    masses, mins, mins_all, totals, dists = [], [], [], [], []
    for k in range(k_max + 1):
        if k > 0:
            eta = apply_operator(mdp, pi, mu, trace, eta, opts)
        e = eta.masses[x0, a0]
        masses.append(e.copy())
        mins.append(e.min())
        mins_all.append(eta.masses.min())
        totals.append(e.sum())
        dists.append(np.max(lp_distance_array(grid, eta.masses, target.masses)))
    b2 = beta_p(mdp.gamma, lam, eps, 2.0) if lam < 1 else math.inf
    bound = d_proj / math.sqrt(1 - b2 ** 2) if b2 < 1 else math.inf
    return Figure1Trace(grid, tracked, np.array(masses), np.array(mins), np.array(mins_all),
                        np.array(totals), np.array(dists), bound)


def _projection_error(fine: AtomGrid, coarse: AtomGrid, fine_masses: np.ndarray) -> float:
    """sup over (x,a) of l2(eta, Pi_c eta), both read as measures on the fine grid."""
    back = fine_masses @ projection_matrix(fine, coarse).T @ embedding_matrix(coarse, fine).T
    return float(np.max(lp_distance_array(fine, fine_masses, back)))


# --------------------------------------------------------------------------
# output


def logs_to_csv(logs: list[IterationLog], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    for log in logs:
        w.writerow([log.k] + [repr(float(v)) for v in log.row()[1:]])
    return buf.getvalue()


def logs_from_csv(text: str) -> list[IterationLog]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("unexpected CSV header")
    return [IterationLog(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


def summarize(logs: list[IterationLog]) -> dict:
    sup = np.array([log.sup_l2_to_oracle for log in logs])
    return {
        "iterations": len(logs),
        "final_sup_l2": float(sup[-1]),
        "min_sup_l2": float(sup.min()),
        "argmin_k": int(logs[int(sup.argmin())].k),
        "final_pt_l2": logs[-1].pointwise_l2_at_x0a0,
        "final_step_change": logs[-1].step_change,
        "min_mass": float(min(log.min_mass_overall for log in logs)),
        "max_mass_error": float(max(log.total_mass_error for log in logs)),
        "diverged": bool(sup[-1] > 2 * sup.min()),
    }


def summary_json(config: RunConfig, logs: list[IterationLog]) -> str:
    return json.dumps({"config": config.to_dict(), "summary": summarize(logs)}, indent=2)


def with_trace(config: RunConfig, trace: TraceSpec) -> RunConfig:
    return replace(config, trace=trace)

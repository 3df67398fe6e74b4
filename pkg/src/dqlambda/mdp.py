"""Tabular MDPs, policies, trajectory sampling and return-distribution oracles."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (AtomGrid, ReturnFunction, lp_distance_array, project_array, projection_matrix,
                   pushforward, pushforward_matrices)

ROW_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        if r.shape != P.shape[:2]:
            raise ValueError("reward must have shape (S, A)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def return_range(self) -> tuple[float, float]:
        return float(self.reward.min()) / (1 - self.gamma), float(self.reward.max()) / (1 - self.gamma)

    def pushforwards(self, grid: AtomGrid, slope: float | None = None) -> np.ndarray:
        """Cached (S, A, m, m) stack of projected pushforwards by ``r(x,a) + slope * z``."""
        slope = self.gamma if slope is None else slope
        key = ("pf", hash(grid), slope)
        if key not in self._cache:
            mats = pushforward_matrices(grid, self.reward, slope)
            mats.setflags(write=False)
            self._cache[key] = mats
        return self._cache[key]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        mdp = cls(np.array(doc["transition"]), np.array(doc["reward"]), doc["gamma"])
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared sizes disagree with the arrays")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def random_mdp(seed: int, n_states: int, n_actions: int, dirichlet_rate: float = 0.1,
               gamma: float = 0.9) -> TabularMdp:
    """Dirichlet(rate) transition rows and N(0, 1) deterministic rewards."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    if dirichlet_rate <= 0:
        raise ValueError("dirichlet_rate must be positive")
    rng = np.random.default_rng(seed)
    g = rng.standard_gamma(dirichlet_rate, size=(n_states, n_actions, n_states))
    # all-underflow rows are astronomically rare; fall back to a random vertex
    dead = g.sum(axis=2) == 0
    if np.any(dead):
        idx = rng.integers(n_states, size=int(dead.sum()))
        g[dead] = np.eye(n_states)[idx]
    P = g / g.sum(axis=2, keepdims=True)
    r = rng.standard_normal((n_states, n_actions))
    return TabularMdp(P, r, gamma)


# --------------------------------------------------------------------------
# policies


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy table must have shape (S, A)")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def shape(self):
        return self.probs.shape

    def __eq__(self, other):
        return isinstance(other, Policy) and np.array_equal(self.probs, other.probs)


def uniform_policy(mdp: TabularMdp) -> Policy:
    return Policy(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))


def greedy_policy(q: np.ndarray) -> Policy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    probs = np.zeros_like(q)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return Policy(probs)


def epsilon_greedy(q: np.ndarray, eps: float) -> Policy:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    g = greedy_policy(q).probs
    return Policy((1.0 - eps) * g + eps / g.shape[1])


def mix_policies(alpha: float, g: Policy, mu: Policy) -> Policy:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if g.shape != mu.shape:
        raise ValueError("policies have different shapes")
    if alpha == 1.0:
        return g
    if alpha == 0.0:
        return mu
    return Policy(alpha * g.probs + (1.0 - alpha) * mu.probs)


def policy_l1_distance(pi: Policy, mu: Policy) -> float:
    if pi.shape != mu.shape:
        raise ValueError("policies have different shapes")
    return float(np.max(np.sum(np.abs(pi.probs - mu.probs), axis=1)))


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class TrajectorySegment:
    states: np.ndarray  # (n + 1,), last entry is the next state
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)
    behavior_probs: np.ndarray  # (n, A), mu(.|states[t]) when actions[t] was taken

    def __post_init__(self):
        n = len(self.actions)
        if n < 1 or len(self.states) != n + 1 or len(self.rewards) != n:
            raise ValueError("inconsistent segment lengths")
        if np.max(np.abs(np.asarray(self.behavior_probs).sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("stored behaviour probabilities must sum to 1")

    @property
    def length(self) -> int:
        return len(self.actions)


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (shape (N, K))."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cum[..., -1]
    return np.minimum((cum <= u[..., None]).sum(axis=-1), probs.shape[-1] - 1)


def sample_segment(mdp: TabularMdp, mu: Policy, start: tuple[int, int], n: int,
                   rng: np.random.Generator) -> TrajectorySegment:
    if n < 1:
        raise ValueError("segment length must be >= 1")
    states, actions, rewards = sample_paths(mdp, mu, np.array([start[0]]), np.array([start[1]]), n, rng)
    probs = mu.probs[states[0, :n]]
    return TrajectorySegment(states[0], actions[0], rewards[0], probs)


def sample_paths(mdp: TabularMdp, policy: Policy, x0: np.ndarray, a0: np.ndarray, n: int,
                 rng: np.random.Generator):
    """Vectorised rollouts from the given start pairs, first action forced.

    Returns ``states`` (N, n+1), ``actions`` (N, n), ``rewards`` (N, n).
    """
    N = len(x0)
    states = np.empty((N, n + 1), dtype=np.intp)
    actions = np.empty((N, n), dtype=np.intp)
    states[:, 0] = x0
    actions[:, 0] = a0
    for t in range(n):
        if t > 0:
            actions[:, t] = sample_categorical(rng, policy.probs[states[:, t]])
        states[:, t + 1] = sample_categorical(rng, mdp.transition[states[:, t], actions[:, t]])
    rewards = mdp.reward[states[:, :n], actions]
    return states, actions, rewards


# --------------------------------------------------------------------------
# oracles


def q_values(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Q^pi = (I - gamma P^pi)^{-1} r by direct solve."""
    S, A = mdp.n_states, mdp.n_actions
    # P^pi[(x,a), (x',b)] = P(x'|x,a) pi(b|x')
    P_pi = np.einsum("xay,yb->xayb", mdp.transition, pi.probs).reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * P_pi, mdp.reward.ravel())
    return q.reshape(S, A)


def optimal_q(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Value iteration on the expected MDP until the sup-norm change is below ``tol``."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        new = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    raise ConvergenceError("value iteration did not converge")


def default_horizon(mdp: TabularMdp, grid: AtomGrid, tail_tol: float = 1e-4) -> int:
    """Smallest T with gamma^T max|r| / (1 - gamma) below ``tail_tol`` times the grid span."""
    rmax = float(np.max(np.abs(mdp.reward)))
    if rmax == 0 or mdp.gamma == 0:
        return 1
    target = tail_tol * (grid.v_max - grid.v_min) * (1 - mdp.gamma) / rmax
    if target >= 1:
        return 1
    return max(1, math.ceil(math.log(target) / math.log(mdp.gamma)))


def mc_returns(mdp: TabularMdp, pi: Policy, n_traj: int, horizon: int,
               rng: np.random.Generator) -> np.ndarray:
    """Truncated discounted returns, shape (S, A, n_traj)."""
    S, A = mdp.n_states, mdp.n_actions
    x = np.repeat(np.arange(S), A * n_traj)
    a = np.tile(np.repeat(np.arange(A), n_traj), S)
    g = np.zeros(x.size)
    disc = 1.0
    for t in range(horizon):
        if t > 0:
            a = sample_categorical(rng, pi.probs[x])
        g += disc * mdp.reward[x, a]
        disc *= mdp.gamma
        x = sample_categorical(rng, mdp.transition[x, a])
    return g.reshape(S, A, n_traj)


def mc_return_oracle(mdp: TabularMdp, pi: Policy, grid: AtomGrid, n_traj: int,
                     horizon: int | None = None, rng: np.random.Generator | None = None,
                     tail_tol: float = 1e-4) -> ReturnFunction:
    """Monte-Carlo return distributions projected onto ``grid``."""
    rng = np.random.default_rng() if rng is None else rng
    horizon = default_horizon(mdp, grid, tail_tol) if horizon is None else horizon
    returns = mc_returns(mdp, pi, n_traj, horizon, rng)
    S, A = mdp.n_states, mdp.n_actions
    masses = np.stack([project_array(grid, returns[x, a], np.full(n_traj, 1.0 / n_traj))
                       for x in range(S) for a in range(A)]).reshape(S, A, grid.m)
    return ReturnFunction(grid, masses)


def bellman_backup(mdp: TabularMdp, pi: Policy, grid: AtomGrid, masses: np.ndarray,
                   slope: float | None = None) -> np.ndarray:
    """Projected one-step distributional backup, (S, A, m) -> (S, A, m)."""
    mixed = np.einsum("yb,ybi->yi", pi.probs, masses)
    nxt = np.einsum("xay,yi->xai", mdp.transition, mixed)
    slope = mdp.gamma if slope is None else slope
    return pushforward(grid, nxt, mdp.reward, slope)


def eta_pi_dp(mdp: TabularMdp, pi: Policy, grid: AtomGrid, tol: float = 1e-10,
              max_iter: int = 100_000, init: np.ndarray | None = None) -> ReturnFunction:
    """Fixed point of the projected distributional Bellman operator by iteration."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A = mdp.n_states, mdp.n_actions
    eta = np.full((S, A, grid.m), 1.0 / grid.m) if init is None else np.array(init, dtype=float)
    for _ in range(max_iter):
        new = bellman_backup(mdp, pi, grid, eta)
        change = np.max(lp_distance_array(grid, new, eta))
        eta = new
        if change < tol:
            return ReturnFunction(grid, eta)
    raise ConvergenceError(f"projected Bellman iteration did not reach {tol} in {max_iter} steps")


def fine_dp_oracle(mdp: TabularMdp, pi: Policy, grid: AtomGrid, refine: int = 200,
                   tol: float = 1e-10) -> ReturnFunction:
    """Return distributions computed on a refined grid, then projected onto ``grid``.

    A noise-free alternative to the Monte-Carlo oracle; the refinement error
    shrinks linearly in the fine cell width.
    """
    fine = grid.refined(refine)
    eta = eta_pi_dp(mdp, pi, fine, tol=tol).masses
    coarse = project_array_table(grid, fine, eta)
    return ReturnFunction(grid, coarse)


def project_array_table(coarse: AtomGrid, fine: AtomGrid, masses: np.ndarray) -> np.ndarray:
    """Project (..., m_fine) grid measures onto ``coarse``; fine atoms act as particles."""
    return np.tensordot(masses, projection_matrix(fine, coarse), axes=([-1], [1]))

"""Exact application of the distributional evaluation operators on grid measures.

Every operator is computed by dynamic programming on the tabular MDP, with
the categorical projection applied after each one-step pushforward.  The
trace-based operators (on/off-policy Q(lambda), Retrace, the height-shrinking
alternative and Peng's Q(lambda)) are all linear fixed-point problems in a
per-state zero-mass unknown

    z(x) = u(x) + sum_b k(x,b) K(x,b) sum_y P(y|x,b) z(y)

where ``k`` is the behaviour probability times the trace coefficient and ``K``
a projected pushforward.  ``linear_solve`` mode solves it directly in the CDF
coordinates of the zero-mass subspace; ``iterate`` mode runs the unreduced
(state, action) recursion to a fixed point instead.

With ``SolverOptions.refine > 1`` the whole computation runs on a grid with
``refine`` sub-cells per cell and is projected back onto the input grid once
at the end, which approximates projecting the exact (infinite-support)
back-up target a single time.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import AtomGrid, ReturnFunction, embedding_matrix, interpolation_weights, projection_matrix
from .mdp import ConvergenceError, Policy, TabularMdp

log = logging.getLogger(__name__)

KINDS = ("one_step", "n_step", "on_policy_lambda", "off_policy_lambda", "retrace", "peng", "alt_lambda")


class SupportError(ValueError):
    """Target policy puts mass on an action the behaviour policy never takes."""


@dataclass(frozen=True)
class TraceSpec:
    kind: str
    lam: float = 0.0
    cbar: float = 1.0
    n: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.cbar <= 0:
            raise ValueError("cbar must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @classmethod
    def one_step(cls):
        return cls("one_step")

    @classmethod
    def n_step(cls, n: int):
        return cls("n_step", n=n)

    @classmethod
    def on_policy(cls, lam: float):
        return cls("on_policy_lambda", lam=lam)

    @classmethod
    def off_policy(cls, lam: float):
        return cls("off_policy_lambda", lam=lam)

    @classmethod
    def retrace(cls, cbar: float):
        return cls("retrace", cbar=cbar)

    @classmethod
    def peng(cls, lam: float):
        return cls("peng", lam=lam)

    @classmethod
    def alt(cls, lam: float):
        return cls("alt_lambda", lam=lam)

    @property
    def label(self) -> str:
        if self.kind == "one_step":
            return "one-step"
        if self.kind == "n_step":
            return f"{self.n}-step"
        if self.kind == "retrace":
            return f"retrace(cbar={self.cbar:g})"
        return f"{self.kind}(lambda={self.lam:g})"


SOLVER_MODES = ("auto", "linear_solve", "iterate")
MAX_DIRECT_UNKNOWNS = 50_000


@dataclass(frozen=True)
class SolverOptions:
    mode: str = "auto"
    tolerance: float = 1e-10
    max_depth: int = 10_000
    refine: int = 1

    def __post_init__(self):
        if self.mode not in SOLVER_MODES:
            raise ValueError(f"mode must be one of {SOLVER_MODES}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_depth < 1 or self.refine < 1:
            raise ValueError("max_depth and refine must be >= 1")


# --------------------------------------------------------------------------
# trace coefficients


def trace_table(trace: TraceSpec, pi: Policy, mu: Policy) -> np.ndarray:
    """Trace coefficient c(x, b) for every state-action pair."""
    if trace.kind == "retrace":
        p, q = pi.probs, mu.probs
        bad = (q == 0) & (p > 0)
        if np.any(bad):
            x, b = map(int, np.argwhere(bad)[0])
            raise SupportError(f"pi({b}|{x}) > 0 but mu({b}|{x}) = 0")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(q > 0, p / np.where(q > 0, q, 1.0), 0.0)
        return np.minimum(trace.cbar, ratio)
    if trace.kind in ("on_policy_lambda", "off_policy_lambda", "peng", "alt_lambda"):
        return np.full(pi.shape, trace.lam)
    raise ValueError(f"{trace.kind} has no trace coefficient")


def trace_coefficient(trace: TraceSpec, pi: Policy, mu: Policy, x: int, b: int) -> float:
    return float(trace_table(trace, pi, mu)[x, b])


# --------------------------------------------------------------------------
# building blocks


class _Workspace:
    """Refined grid and cached linear maps for one (mdp, grid, refine) triple."""

    def __init__(self, mdp: TabularMdp, grid: AtomGrid, refine: int):
        self.mdp = mdp
        self.grid = grid
        self.fine = grid.refined(refine)
        self.refine = refine
        self._pf = {}
        if refine > 1:
            self.embed = embedding_matrix(grid, self.fine)
            self.proj = projection_matrix(self.fine, grid)
        lo, hi = mdp.return_range
        if not self.fine.covers(lo, hi):
            warnings.warn(f"grid [{grid.v_min:g}, {grid.v_max:g}] does not cover the return range "
                          f"[{lo:g}, {hi:g}]; out-of-range mass is clipped to the boundary atoms",
                          stacklevel=3)

    def K(self, slope=None) -> "_Pushforward":
        slope = self.mdp.gamma if slope is None else slope
        pf = self._pf.get(slope)
        if pf is None:
            pf = self._pf[slope] = _Pushforward(self.fine, self.mdp.reward, slope)
        return pf

    def to_fine(self, masses):
        return masses if self.refine == 1 else masses @ self.embed.T

    def to_coarse(self, masses):
        return masses if self.refine == 1 else masses @ self.proj.T


def _workspace(mdp: TabularMdp, grid: AtomGrid, refine: int) -> _Workspace:
    key = ("ws", hash(grid), refine)
    ws = mdp._cache.get(key)
    if ws is None:
        ws = mdp._cache[key] = _Workspace(mdp, grid, refine)
    return ws


class _Pushforward:
    """Projected pushforwards by ``r(x,a) + slope * z`` for every (x, a), kept sparse.

    Column j of the (x, a) map puts weight ``1 - frac`` on atom ``lo`` and
    ``frac`` on atom ``lo + 1``.
    """

    def __init__(self, grid: AtomGrid, reward: np.ndarray, slope: float):
        self.shape = reward.shape + (grid.m,)
        self.lo, self.frac = interpolation_weights(grid, reward[..., None] + slope * grid.atoms)
        S, A, m = self.shape
        base = (np.arange(S * A) * m).reshape(S, A, 1)
        self._flat = (base + self.lo).ravel()

    def __call__(self, masses: np.ndarray) -> np.ndarray:
        """Apply to (S, A, m) measures."""
        size = masses.size
        out = np.bincount(self._flat, weights=(masses * (1.0 - self.frac)).ravel(), minlength=size + 1)
        out[1:] += np.bincount(self._flat, weights=(masses * self.frac).ravel(), minlength=size)
        return out[:size].reshape(masses.shape)

    def dense(self) -> np.ndarray:
        S, A, m = self.shape
        out = np.zeros((S, A, m, m))
        x, a, j = np.indices(self.shape)
        np.add.at(out, (x, a, self.lo, j), 1.0 - self.frac)
        np.add.at(out, (x, a, self.lo + 1, j), self.frac)
        return out

    def coupling(self, W: np.ndarray) -> np.ndarray:
        """L[x, i, y, j] = sum_b W[x, b, y] K(x, b)[i, j], built by scatter."""
        S, A, m = self.shape
        Sy = W.shape[2]
        x = np.arange(S).reshape(S, 1, 1, 1)
        y = np.arange(Sy).reshape(1, 1, Sy, 1)
        j = np.arange(m).reshape(1, 1, 1, m)
        lo = self.lo[:, :, None, :]
        frac = self.frac[:, :, None, :]
        w = W[:, :, :, None]
        idx = ((x * m + lo) * Sy + y) * m + j
        size = S * m * Sy * m
        out = np.bincount(idx.ravel(), weights=(w * (1.0 - frac)).ravel(), minlength=size)
        out += np.bincount((idx + Sy * m).ravel(), weights=(w * frac).ravel(), minlength=size + Sy * m)[:size]
        return out.reshape(S, m, Sy, m)


def _push(K: "_Pushforward", masses: np.ndarray) -> np.ndarray:
    return K(masses)


def _next(mdp: TabularMdp, per_state: np.ndarray) -> np.ndarray:
    """Expectation over the next state: (S, m) -> (S, A, m)."""
    return np.einsum("xay,yi->xai", mdp.transition, per_state)


def _mix(policy_probs: np.ndarray, masses: np.ndarray) -> np.ndarray:
    return np.einsum("xb,xbi->xi", policy_probs, masses)


def _bellman(mdp, K, pi_probs, masses):
    return _push(K, _next(mdp, _mix(pi_probs, masses)))


def _check_inputs(mdp: TabularMdp, pi: Policy, mu: Policy | None, eta: ReturnFunction):
    shape = (mdp.n_states, mdp.n_actions)
    if pi.shape != shape or (mu is not None and mu.shape != shape):
        raise ValueError("policy shape does not match the MDP")
    if eta.masses.shape[:2] != shape:
        raise ValueError("return function shape does not match the MDP")


def td_measure(mdp: TabularMdp, pi: Policy, eta: ReturnFunction) -> np.ndarray:
    """Projected one-step distributional TD error, shape (S, A, m), zero total mass."""
    _check_inputs(mdp, pi, None, eta)
    ws = _workspace(mdp, eta.grid, 1)
    return _bellman(mdp, ws.K(), pi.probs, eta.masses) - eta.masses


# --------------------------------------------------------------------------
# linear solves


def _solve_zero_mass(L: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Solve z = u + L z on per-state zero-mass vectors.

    ``L`` has shape (S, m, S, m) and maps zero-mass vectors to zero-mass
    vectors.  The system is written in CDF coordinates y_i = sum_{k<=i} z_k,
    i < m, where the (possibly unit) eigenvalue on the mass direction drops out.
    """
    S, m = u.shape
    LB = L[..., :-1] - L[..., 1:]  # right-multiply by the difference basis
    Lc = np.cumsum(LB, axis=1)[:, :-1]  # left-multiply by the partial-sum map
    n = S * (m - 1)
    A = np.eye(n) - Lc.reshape(n, n)
    rhs = np.cumsum(u, axis=1)[:, :-1].reshape(n)
    y = np.linalg.solve(A, rhs).reshape(S, m - 1)
    pad = np.zeros((S, 1))
    return np.diff(np.concatenate([pad, y, pad], axis=1), axis=1)


def _coupling(mdp: TabularMdp, kappa: np.ndarray, K: np.ndarray) -> np.ndarray:
    """L[x, i, y, j] = sum_b kappa(x,b) P(y|x,b) K(x,b)[i, j]."""
    return K.coupling(kappa[:, :, None] * mdp.transition)


def _cdf_change(grid, new, cur):
    return float(np.max(np.sqrt(np.sum(np.cumsum(new - cur, axis=-1) ** 2, axis=-1) * grid.dz)))


def _direct(mdp, ws, opts) -> bool:
    """Dense solve unless asked to iterate or, in auto mode, the system is too large."""
    if opts.mode == "auto":
        return mdp.n_states * (ws.fine.m - 1) <= MAX_DIRECT_UNKNOWNS
    return opts.mode == "linear_solve"


def _correction(mdp, ws, kappa, K_corr, scale, delta, opts):
    """Sum of discounted traced TD errors D = delta + scale * K_corr P (sum_b kappa D)."""
    fine = ws.fine
    if _direct(mdp, ws, opts):
        u = _mix(kappa, delta)
        L = _coupling(mdp, kappa, K_corr) * scale
        z = _solve_zero_mass(L, u)
        return delta + scale * _push(K_corr, _next(mdp, z))

    def step(D):
        return delta + scale * _push(K_corr, _next(mdp, _mix(kappa, D)))

    return _iterate_measures(step, delta, fine, opts, "trace correction")


def _iterate_measures(step, start, grid, opts, what):
    cur = start
    for it in range(1, opts.max_depth + 1):
        new = step(cur)
        change = _cdf_change(grid, new, cur)
        cur = new
        if change < opts.tolerance:
            log.debug("%s converged after %d iterations (change %.3g)", what, it, change)
            return cur
    raise ConvergenceError(f"{what} did not converge within {opts.max_depth} iterations")


# --------------------------------------------------------------------------
# public operator


def apply_operator(mdp: TabularMdp, pi: Policy, mu: Policy, trace: TraceSpec,
                   eta: ReturnFunction, opts: SolverOptions | None = None) -> ReturnFunction:
    """Projected back-up ``Pi_c O eta`` for the operator described by ``trace``."""
    opts = SolverOptions() if opts is None else opts
    _check_inputs(mdp, pi, mu, eta)
    ws = _workspace(mdp, eta.grid, opts.refine)
    out = ws.to_coarse(_apply_fine(mdp, ws, pi, mu, trace, ws.to_fine(eta.masses), opts))
    return ReturnFunction(eta.grid, out)


def apply_projected_recursion_step(mdp, pi, mu, trace, eta, opts=None) -> ReturnFunction:
    """One step ``eta_{k+1} = Pi_c O eta_k`` of the categorical recursion."""
    return apply_operator(mdp, pi, mu, trace, eta, opts)


def _apply_fine(mdp, ws, pi, mu, trace, eta, opts):
    K = ws.K()
    kind = trace.kind
    if kind in ("one_step", "n_step"):
        out = eta
        for _ in range(trace.n):
            out = _bellman(mdp, K, pi.probs, out)
        return out

    target = _bellman(mdp, K, pi.probs, eta)
    if kind == "peng":
        return _peng(mdp, ws, pi, mu, trace.lam, eta, target, opts)

    delta = target - eta
    behaviour = pi if kind == "on_policy_lambda" else mu
    if kind == "retrace":
        kappa = behaviour.probs * trace_table(trace, pi, behaviour)
    else:
        kappa = trace.lam * behaviour.probs
    if kind == "alt_lambda":
        return eta + _correction(mdp, ws, behaviour.probs, ws.K(1.0), mdp.gamma * trace.lam,
                                 delta, opts)
    return eta + _correction(mdp, ws, kappa, K, 1.0, delta, opts)


def _peng(mdp, ws, pi, mu, lam, eta, target, opts):
    """Y = K P ((1 - lam) eta^pi + lam sum_b mu Y), written as Y = T eta + lam K P z."""
    K = ws.K()
    eta_pi = _mix(pi.probs, eta)
    if _direct(mdp, ws, opts):
        u = _mix(mu.probs, target) - eta_pi
        z = _solve_zero_mass(_coupling(mdp, lam * mu.probs, K), u)
        return target + lam * _push(K, _next(mdp, z))

    def step(Y):
        return _push(K, _next(mdp, (1.0 - lam) * eta_pi + lam * _mix(mu.probs, Y)))

    return _iterate_measures(step, target, ws.fine, opts, "Peng recursion")


def fixed_point(mdp: TabularMdp, pi: Policy, mu: Policy, trace: TraceSpec, grid: AtomGrid,
                opts: SolverOptions | None = None, tol: float = 1e-12, max_iter: int = 100_000,
                init: ReturnFunction | None = None) -> ReturnFunction:
    """Fixed point of the projected operator by repeated application."""
    opts = SolverOptions() if opts is None else opts
    eta = ReturnFunction.uniform(grid, mdp.n_states, mdp.n_actions) if init is None else init
    ws = _workspace(mdp, grid, opts.refine)
    cur = eta.masses
    for _ in range(max_iter):
        new = ws.to_coarse(_apply_fine(mdp, ws, pi, mu, trace, ws.to_fine(cur), opts))
        change = _cdf_change(grid, new, cur)
        cur = new
        if change < tol:
            return ReturnFunction(grid, cur)
    raise ConvergenceError(f"{trace.label} recursion did not converge within {max_iter} steps")

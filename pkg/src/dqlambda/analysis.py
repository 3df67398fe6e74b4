"""Closed-form contraction rates and radii, approximation bounds, empirical contraction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .grid import AtomGrid, ReturnFunction, lp_distance_array
from .mdp import Policy, TabularMdp, policy_l1_distance
from .operators import SolverOptions, TraceSpec, apply_operator


class DomainError(ValueError):
    """A formula was evaluated outside the range where it is defined."""


def beta_p(gamma: float, lam: float, epsilon: float, p: float = 2.0) -> float:
    """Sup-l_p contraction rate of off-policy distributional Q(lambda)."""
    if not 0.0 <= gamma < 1.0:
        raise DomainError("gamma must lie in [0, 1)")
    if not 0.0 <= epsilon <= 2.0:
        raise DomainError("epsilon = ||pi - mu||_1 must lie in [0, 2]")
    if p < 1:
        raise DomainError("p must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise DomainError("lambda must lie in [0, 1]")
    if lam == 1.0 and p > 1:
        raise DomainError("beta_p is undefined at lambda = 1 for p > 1: (1 - lambda)^((p-1)/p) = 0")
    return gamma ** (1 / p) * (1 - lam + lam * epsilon) / (
        (1 - lam) ** ((p - 1) / p) * (1 - lam * gamma) ** (1 / p))


def radius_l1(gamma: float, lam: float) -> float:
    """Largest ||pi - mu||_1 keeping beta_1 < 1 (strict); +inf when lambda = 0."""
    _check_gl(gamma, lam)
    if lam == 0:
        return math.inf
    return (1 - gamma) / (lam * gamma)


def radius_l2(gamma: float, lam: float) -> float:
    """Largest ||pi - mu||_1 keeping beta_2 < 1 (strict); +inf when lambda = 0."""
    _check_gl(gamma, lam)
    if lam == 0:
        return math.inf
    return (math.sqrt((1 - lam) * (1 / gamma - lam)) + lam - 1) / lam


def beta_alt(gamma: float, lam: float) -> float:
    """Contraction bound of the height-shrinking alternative operator."""
    _check_gl(gamma, lam)
    return gamma * (1 + lam) / (1 - gamma * lam)


def radius_alt(gamma: float) -> float:
    """Threshold on lambda below which the alternative operator contracts."""
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma must lie in (0, 1)")
    return (1 - gamma) / (2 * gamma)


def _check_gl(gamma, lam):
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma must lie in (0, 1)")
    if not 0.0 <= lam <= 1.0:
        raise DomainError("lambda must lie in [0, 1]")


def approx_error_bound(d_proj: float, beta2: float) -> float:
    """Bound on sup-L2 distance from the target to the projected fixed point."""
    if d_proj < 0:
        raise DomainError("projection distance must be non-negative")
    if not 0.0 <= beta2 < 1.0:
        raise DomainError(f"bound needs 0 <= beta_2 < 1, got {beta2}")
    return d_proj / math.sqrt(1 - beta2 ** 2)


def control_error_bound(d_proj: float, gamma: float) -> float:
    """Optimal-control variant, valid for lambda < (1 - gamma) / (2 gamma)."""
    return approx_error_bound(d_proj, gamma)


@dataclass(frozen=True)
class ContractionReport:
    gamma: float
    lam: float
    epsilon: float
    beta_1: float
    beta_2: float
    radius_l1: float
    radius_l2: float
    contractive_l1: bool
    contractive_l2: bool
    beta_alt: float
    radius_alt: float

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def contraction_report(gamma: float, lam: float, epsilon: float) -> ContractionReport:
    b1 = beta_p(gamma, lam, epsilon, 1.0)
    b2 = beta_p(gamma, lam, epsilon, 2.0)
    return ContractionReport(
        gamma=gamma, lam=lam, epsilon=epsilon, beta_1=b1, beta_2=b2,
        radius_l1=radius_l1(gamma, lam), radius_l2=radius_l2(gamma, lam),
        contractive_l1=b1 < 1, contractive_l2=b2 < 1,
        beta_alt=beta_alt(gamma, lam), radius_alt=radius_alt(gamma),
    )


def policy_report(pi: Policy, mu: Policy, gamma: float, lam: float) -> ContractionReport:
    return contraction_report(gamma, lam, policy_l1_distance(pi, mu))


# --------------------------------------------------------------------------
# empirical contraction


def random_signed_masses(rng: np.random.Generator, shape: tuple, m: int,
                         negative_bound: float = 1.0) -> np.ndarray:
    """Unit-mass signed vectors with every atom mass >= -negative_bound."""
    base = rng.dirichlet(np.ones(m), size=shape)
    noise = rng.uniform(-negative_bound, negative_bound, size=shape + (m,))
    noise -= noise.mean(axis=-1, keepdims=True)
    out = base + rng.uniform(0, 1, size=shape + (1,)) * noise
    # keep the lower bound after recentring, then restore unit mass on the positive atoms
    out = np.maximum(out, -negative_bound)
    excess = out.sum(axis=-1, keepdims=True) - 1.0
    pos = np.maximum(out, 0)
    out -= excess * pos / pos.sum(axis=-1, keepdims=True)
    return out


def random_return_function(rng: np.random.Generator, grid: AtomGrid, n_states: int,
                           n_actions: int, negative_bound: float = 1.0) -> ReturnFunction:
    return ReturnFunction(grid, random_signed_masses(rng, (n_states, n_actions), grid.m, negative_bound))


def empirical_contraction(mdp: TabularMdp, pi: Policy, mu: Policy, trace: TraceSpec, grid: AtomGrid,
                          n_pairs: int, rng: np.random.Generator, p: float = 2.0,
                          opts: SolverOptions | None = None) -> float:
    """Largest observed ratio of output to input sup-l_p distance over random signed pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    S, A = mdp.n_states, mdp.n_actions
    worst = 0.0
    for _ in range(n_pairs):
        e1 = random_return_function(rng, grid, S, A)
        e2 = random_return_function(rng, grid, S, A)
        d_in = float(np.max(lp_distance_array(grid, e1.masses, e2.masses, p)))
        if d_in == 0:
            continue
        o1 = apply_operator(mdp, pi, mu, trace, e1, opts)
        o2 = apply_operator(mdp, pi, mu, trace, e2, opts)
        d_out = float(np.max(lp_distance_array(grid, o1.masses, o2.masses, p)))
        worst = max(worst, d_out / d_in)
    return worst

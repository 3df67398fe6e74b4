"""Categorical signed measures on a fixed uniform atom grid.

A grid measure is a mass vector over ``m`` atoms.  Masses may be negative;
only the total mass is constrained (to one for return measures, to zero for
TD errors).  The categorical projection is the usual two-hop linear
interpolation, which is the Cramer (l2) projection onto the grid and is
linear in the input weights, so it applies unchanged to signed inputs.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MASS_TOL = 1e-9
_SPACING_RTOL = 1e-12
_SNAP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AtomGrid:
    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim != 1 or atoms.size < 2:
            raise ValueError("a grid needs at least two atoms")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        gaps = np.diff(atoms)
        if np.any(gaps <= 0):
            raise ValueError("atoms must be strictly increasing")
        if np.max(np.abs(gaps - gaps[0])) > _SPACING_RTOL * max(1.0, abs(gaps[0])) * atoms.size:
            raise ValueError("only uniformly spaced grids are supported")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def m(self) -> int:
        return self.atoms.size

    @property
    def v_min(self) -> float:
        return float(self.atoms[0])

    @property
    def v_max(self) -> float:
        return float(self.atoms[-1])

    @property
    def dz(self) -> float:
        return (self.v_max - self.v_min) / (self.m - 1)

    def __eq__(self, other):
        return isinstance(other, AtomGrid) and np.array_equal(self.atoms, other.atoms)

    def __hash__(self):
        return hash(self.atoms.tobytes())

    def __repr__(self):
        return f"AtomGrid(v_min={self.v_min!r}, v_max={self.v_max!r}, m={self.m})"

    def refined(self, factor: int) -> "AtomGrid":
        """Same range with ``factor`` sub-cells per cell; contains every atom of ``self``."""
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        if factor == 1:
            return self
        return make_uniform_grid(self.v_min, self.v_max, factor * (self.m - 1) + 1)

    def covers(self, lo: float, hi: float) -> bool:
        return self.v_min <= lo + 1e-12 and self.v_max >= hi - 1e-12


def make_uniform_grid(v_min: float, v_max: float, m: int) -> AtomGrid:
    if m < 2:
        raise ValueError("m must be >= 2")
    if not v_min < v_max:
        raise ValueError("v_min must be < v_max")
    step = (v_max - v_min) / (m - 1)
    atoms = v_min + step * np.arange(m)
    atoms[-1] = v_max
    return AtomGrid(atoms)


@dataclass(frozen=True, eq=False)
class SignedMeasure:
    grid: AtomGrid
    masses: np.ndarray

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float)
        if masses.shape != (self.grid.m,):
            raise ValueError(f"expected {self.grid.m} masses, got shape {masses.shape}")
        if not np.all(np.isfinite(masses)):
            raise ValueError("masses must be finite")
        if abs(masses.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"total mass {masses.sum()!r} is not 1")
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def dirac(cls, grid: AtomGrid, index: int) -> "SignedMeasure":
        masses = np.zeros(grid.m)
        masses[index] = 1.0
        return cls(grid, masses)

    @classmethod
    def uniform(cls, grid: AtomGrid) -> "SignedMeasure":
        return cls(grid, np.full(grid.m, 1.0 / grid.m))

    def is_distribution(self) -> bool:
        return bool(np.all(self.masses >= -1e-12))

    def mean(self) -> float:
        return mean(self)

    def __eq__(self, other):
        return (isinstance(other, SignedMeasure) and self.grid == other.grid
                and np.array_equal(self.masses, other.masses))

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.masses])

    @classmethod
    def from_json(cls, grid: AtomGrid, text: str) -> "SignedMeasure":
        return cls(grid, np.array(json.loads(text), dtype=float))


@dataclass(frozen=True, eq=False)
class WeightedParticleSet:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.atleast_1d(np.asarray(self.positions, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if pos.shape != w.shape or pos.ndim != 1:
            raise ValueError("positions and weights must be 1-d arrays of equal length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("particle positions must be finite")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ValueError("particle weights must sum to 1")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "WeightedParticleSet":
        pairs = list(pairs)
        return cls(np.array([p for p, _ in pairs]), np.array([w for _, w in pairs]))


@dataclass(frozen=True, eq=False)
class ReturnFunction:
    """Grid measure per (state, action); ``masses`` has shape (S, A, m)."""

    grid: AtomGrid
    masses: np.ndarray

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float)
        if masses.ndim != 3 or masses.shape[2] != self.grid.m:
            raise ValueError(f"expected shape (S, A, {self.grid.m}), got {masses.shape}")
        if not np.all(np.isfinite(masses)):
            raise ValueError("masses must be finite")
        err = np.max(np.abs(masses.sum(axis=2) - 1.0))
        if err > MASS_TOL:
            raise ValueError(f"entry total masses deviate from 1 by {err:.3g}")
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)

    @property
    def n_states(self) -> int:
        return self.masses.shape[0]

    @property
    def n_actions(self) -> int:
        return self.masses.shape[1]

    @classmethod
    def uniform(cls, grid: AtomGrid, n_states: int, n_actions: int) -> "ReturnFunction":
        return cls(grid, np.full((n_states, n_actions, grid.m), 1.0 / grid.m))

    def __getitem__(self, key) -> SignedMeasure:
        x, a = key
        return SignedMeasure(self.grid, self.masses[x, a])

    def means(self) -> np.ndarray:
        """Induced Q table."""
        return self.masses @ self.grid.atoms

    def min_mass(self) -> float:
        return float(self.masses.min())

    def mass_error(self) -> float:
        return float(np.max(np.abs(self.masses.sum(axis=2) - 1.0)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["state", "action", "atom_index", "atom", "mass"])
        S, A, m = self.masses.shape
        for x in range(S):
            for a in range(A):
                for i in range(m):
                    writer.writerow([x, a, i, repr(float(self.grid.atoms[i])),
                                     repr(float(self.masses[x, a, i]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReturnFunction":
        rows = list(csv.DictReader(io.StringIO(text)))
        S = 1 + max(int(r["state"]) for r in rows)
        A = 1 + max(int(r["action"]) for r in rows)
        m = 1 + max(int(r["atom_index"]) for r in rows)
        atoms = np.empty(m)
        masses = np.empty((S, A, m))
        for r in rows:
            i = int(r["atom_index"])
            atoms[i] = float(r["atom"])
            masses[int(r["state"]), int(r["action"]), i] = float(r["mass"])
        return cls(AtomGrid(atoms), masses)

    def to_json(self) -> str:
        return json.dumps({"atoms": [float(z) for z in self.grid.atoms],
                           "masses": self.masses.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ReturnFunction":
        doc = json.loads(text)
        return cls(AtomGrid(np.array(doc["atoms"])), np.array(doc["masses"], dtype=float))


# --------------------------------------------------------------------------
# projection and pushforward


def interpolation_weights(grid: AtomGrid, positions: np.ndarray):
    """Lower atom index and upper-atom fraction for each position.

    Positions outside the grid clip to the boundary atoms.  Positions within
    ``1e-9`` cells of an atom snap onto it so that grid points map to
    themselves bit-for-bit.
    """
    pos = np.asarray(positions, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    u = (pos - grid.v_min) / grid.dz
    u = np.clip(u, 0.0, grid.m - 1)
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) < _SNAP_TOL, nearest, u)
    lo = np.minimum(np.floor(u).astype(np.intp), grid.m - 2)
    frac = u - lo
    return lo, frac


def project(grid: AtomGrid, particles: WeightedParticleSet) -> SignedMeasure:
    return SignedMeasure(grid, project_array(grid, particles.positions, particles.weights))


def project_array(grid: AtomGrid, positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unchecked projection of (possibly signed, any total) weighted particles."""
    lo, frac = interpolation_weights(grid, np.ravel(positions))
    w = np.ravel(np.asarray(weights, dtype=float))
    out = np.bincount(lo, weights=w * (1.0 - frac), minlength=grid.m)
    out += np.bincount(lo + 1, weights=w * frac, minlength=grid.m)
    return out


def pushforward_matrix(grid: AtomGrid, shift: float, slope: float) -> np.ndarray:
    """m x m matrix whose column i is the projection of ``shift + slope * z_i``."""
    if not 0.0 < slope <= 1.0:
        raise ValueError("slope must lie in (0, 1]")
    return pushforward_matrices(grid, np.array([shift]), slope)[0]


def pushforward_matrices(grid: AtomGrid, shifts: np.ndarray, slope: float) -> np.ndarray:
    """Stack of pushforward matrices, shape ``shifts.shape + (m, m)``."""
    shifts = np.asarray(shifts, dtype=float)
    m = grid.m
    pos = shifts[..., None] + slope * grid.atoms
    lo, frac = interpolation_weights(grid, pos)
    out = np.zeros(shifts.shape + (m, m))
    flat = out.reshape(-1, m, m)
    lo = lo.reshape(-1, m)
    frac = frac.reshape(-1, m)
    k = np.arange(flat.shape[0])[:, None]
    cols = np.arange(m)[None, :]
    np.add.at(flat, (k, lo, cols), 1.0 - frac)
    np.add.at(flat, (k, lo + 1, cols), frac)
    return out


def pushforward(grid: AtomGrid, masses: np.ndarray, shift, slope: float) -> np.ndarray:
    """Project ``(b_{shift,slope})_# masses`` without forming the matrix.

    ``masses`` has shape (..., m) and ``shift`` broadcasts against ``masses.shape[:-1]``.
    """
    masses = np.asarray(masses, dtype=float)
    lead = masses.shape[:-1]
    m = grid.m
    shift = np.broadcast_to(np.asarray(shift, dtype=float), lead)
    pos = shift[..., None] + slope * grid.atoms
    lo, frac = interpolation_weights(grid, pos)
    base = (np.arange(int(np.prod(lead, dtype=int))) * m).reshape(lead + (1,))
    idx = (base + lo).ravel()
    size = masses.size
    out = np.bincount(idx, weights=(masses * (1.0 - frac)).ravel(), minlength=size)
    out += np.bincount(idx + 1, weights=(masses * frac).ravel(), minlength=size)
    return out[:size].reshape(masses.shape)


def embedding_matrix(coarse: AtomGrid, fine: AtomGrid) -> np.ndarray:
    """Exact map of coarse grid measures onto a refining grid (fine x coarse)."""
    return np.stack([project_array(fine, np.array([z]), np.array([1.0])) for z in coarse.atoms], axis=1)


def projection_matrix(fine: AtomGrid, coarse: AtomGrid) -> np.ndarray:
    """Categorical projection of fine grid measures onto a coarser grid (coarse x fine)."""
    return np.stack([project_array(coarse, np.array([z]), np.array([1.0])) for z in fine.atoms], axis=1)


# --------------------------------------------------------------------------
# distances and statistics


def _cdf_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(a) - np.asarray(b), axis=-1)[..., :-1]


def lp_distance(a: SignedMeasure, b: SignedMeasure, p: float = 2.0) -> float:
    if a.grid != b.grid:
        raise ValueError("measures live on different grids")
    return float(lp_distance_array(a.grid, a.masses, b.masses, p))


def lp_distance_array(grid: AtomGrid, a: np.ndarray, b: np.ndarray, p: float = 2.0) -> np.ndarray:
    """l_p distance between step CDFs, vectorised over leading axes."""
    if p < 1:
        raise ValueError("p must be >= 1")
    gap = np.abs(_cdf_gap(a, b))
    if p == 2:
        return np.sqrt(np.sum(gap * gap, axis=-1) * grid.dz)
    if p == 1:
        return np.sum(gap, axis=-1) * grid.dz
    return (np.sum(gap ** p, axis=-1) * grid.dz) ** (1.0 / p)


def sup_lp_distance(h1: ReturnFunction, h2: ReturnFunction, p: float = 2.0) -> float:
    if h1.grid != h2.grid:
        raise ValueError("return functions live on different grids")
    if h1.masses.shape != h2.masses.shape:
        raise ValueError("return functions have different shapes")
    return float(np.max(lp_distance_array(h1.grid, h1.masses, h2.masses, p)))


def mean(a: SignedMeasure) -> float:
    return float(a.masses @ a.grid.atoms)


def min_mass(a: SignedMeasure) -> float:
    return float(a.masses.min())


def total_mass(a: SignedMeasure) -> float:
    return float(a.masses.sum())


def grid_for_returns(r_min: float, r_max: float, gamma: float, m: int) -> AtomGrid:
    """Smallest grid covering every discounted return of rewards in [r_min, r_max]."""
    lo = r_min / (1.0 - gamma)
    hi = r_max / (1.0 - gamma)
    if hi - lo <= 0:
        lo, hi = lo - 1.0, hi + 1.0
    return make_uniform_grid(lo, hi, m)


def as_grid(values: Sequence[float] | np.ndarray) -> AtomGrid:
    return AtomGrid(np.asarray(values, dtype=float))

"""Sample-based distributional Q(lambda) with tabular softmax parameters.

Back-up targets are signed combinations of proper categorical distributions.
For a segment X_0, A_0, ..., X_n with trace coefficients c, the term for
action b at step t < n has weight

    w_{t,b} = c_1 ... c_{t-1} (pi(b|X_t) - c(X_t, b) mu(b|X_t))

and at the segment end w_{n,b} = c_1 ... c_{n-1} pi(b|X_n).  Each term's
measure is the target network's distribution at (X_t, b), pushed forward by
the discounted reward prefix and projected.  For a constant trace the
weights sum to one on every segment; for Retrace they do so in expectation.
"""
from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .grid import AtomGrid, SignedMeasure, as_grid, grid_for_returns, pushforward
from .mdp import (Policy, TabularMdp, TrajectorySegment, epsilon_greedy, greedy_policy, optimal_q,
                  sample_categorical)
from .operators import SupportError, TraceSpec

LOG_COLUMNS = ("step", "epsilon", "sup_q_error", "greedy_accuracy", "mean_min_mass_of_targets")
PROJECTIONS = ("nested", "direct")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LearnerParams:
    logits: np.ndarray  # (S, A, m)
    grid: AtomGrid

    @classmethod
    def zeros(cls, grid: AtomGrid, n_states: int, n_actions: int) -> "LearnerParams":
        return cls(np.zeros((n_states, n_actions, grid.m)), grid)

    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def q_values(self) -> np.ndarray:
        return self.probs() @ self.grid.atoms

    def copy(self) -> "LearnerParams":
        return LearnerParams(self.logits.copy(), self.grid)

    def to_json(self) -> str:
        return json.dumps({"atoms": self.grid.atoms.tolist(), "logits": self.logits.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "LearnerParams":
        doc = json.loads(text)
        return cls(np.array(doc["logits"], dtype=float), as_grid(doc["atoms"]))


@dataclass(frozen=True)
class BackupTerm:
    t: int
    action: int
    weight: float
    measure: SignedMeasure


# --------------------------------------------------------------------------
# back-up targets


def _trace_rows(trace: TraceSpec, pi_rows: np.ndarray, mu_rows: np.ndarray) -> np.ndarray:
    """c(X_t, b) for every row, same shape as the policy rows."""
    if trace.kind == "retrace":
        bad = (mu_rows == 0) & (pi_rows > 0)
        if np.any(bad):
            raise SupportError("target policy puts mass on an action the behaviour policy never takes")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(mu_rows > 0, pi_rows / np.where(mu_rows > 0, mu_rows, 1.0), 0.0)
        return np.minimum(trace.cbar, ratio)
    if trace.kind in ("off_policy_lambda", "on_policy_lambda"):
        return np.full(pi_rows.shape, trace.lam)
    if trace.kind == "one_step":
        return np.zeros(pi_rows.shape)
    raise ValueError(f"sampled back-ups are not defined for {trace.kind}")


def backup_weights(trace: TraceSpec, actions: np.ndarray, pi_rows: np.ndarray,
                   mu_rows: np.ndarray) -> np.ndarray:
    """Term weights for a batch of segments.

    ``actions`` is (B, n); ``pi_rows`` and ``mu_rows`` are (B, n+1, A) with row
    t describing state X_t (row 0 is unused, and ``mu_rows[:, n]`` only
    matters for Retrace's coefficient table).  Returns (B, n+1, A) with row 0
    zero.
    """
    B, n = actions.shape
    c = _trace_rows(trace, pi_rows, mu_rows)
    c_taken = np.take_along_axis(c[:, :n], actions[:, :, None], axis=2)[:, :, 0]  # (B, n)
    c_taken[:, 0] = 1.0  # c_{1:0} = 1
    prefix = np.cumprod(c_taken, axis=1)  # prefix[:, t] = c_1 ... c_t, t < n
    w = np.zeros(pi_rows.shape)
    for t in range(1, n):
        w[:, t] = prefix[:, t - 1, None] * (pi_rows[:, t] - c[:, t] * mu_rows[:, t])
    w[:, n] = prefix[:, n - 1, None] * pi_rows[:, n]
    return w


def assemble_targets(grid: AtomGrid, gamma: float, states: np.ndarray, rewards: np.ndarray,
                     weights: np.ndarray, target_probs: np.ndarray, projection: str = "nested") -> np.ndarray:
    """Signed back-up targets (B, m) from term weights and target-network measures.

    ``nested`` projects after every one-step pushforward, matching the
    operators module; ``direct`` projects each term once.
    """
    B, n = rewards.shape
    mixed = np.einsum("kta,ktai->kti", weights[:, 1:], target_probs[states[:, 1:]])  # (B, n, m)
    if projection == "nested":
        acc = mixed[:, n - 1]
        for t in range(n - 1, 0, -1):
            acc = mixed[:, t - 1] + pushforward(grid, acc, rewards[:, t], gamma)
        return pushforward(grid, acc, rewards[:, 0], gamma)
    if projection == "direct":
        disc = gamma ** np.arange(n)
        prefix = np.cumsum(rewards * disc, axis=1)  # G_{0:t}
        out = np.zeros((B, grid.m))
        for t in range(1, n + 1):
            out += pushforward(grid, mixed[:, t - 1], prefix[:, t - 1], gamma ** t)
        return out
    raise ValueError(f"projection must be one of {PROJECTIONS}")


def _segment_rows(segment: TrajectorySegment, pi: Policy, mu_last: np.ndarray | None):
    n = segment.length
    pi_rows = pi.probs[segment.states][None]
    mu_rows = np.empty((1, n + 1, pi.probs.shape[1]))
    mu_rows[0, :n] = segment.behavior_probs
    mu_rows[0, n] = segment.behavior_probs[-1] if mu_last is None else mu_last
    return pi_rows, mu_rows


def backup_terms(segment: TrajectorySegment, trace: TraceSpec, pi: Policy, target_params: LearnerParams,
                 gamma: float, projection: str = "nested") -> list[BackupTerm]:
    """Every (t, b) term of the back-up target for one segment."""
    n = segment.length
    pi_rows, mu_rows = _segment_rows(segment, pi, None)
    w = backup_weights(trace, segment.actions[None], pi_rows, mu_rows)[0]
    grid = target_params.grid
    probs = target_params.probs()
    terms = []
    for t in range(1, n + 1):
        for b in range(probs.shape[1]):
            if w[t, b] == 0.0:
                continue
            q = probs[segment.states[t], b]
            if projection == "nested":
                for s in range(t - 1, -1, -1):
                    q = pushforward(grid, q, segment.rewards[s], gamma)
            else:
                g = float(np.sum(segment.rewards[:t] * gamma ** np.arange(t)))
                q = pushforward(grid, q, g, gamma ** t)
            terms.append(BackupTerm(t, b, float(w[t, b]), SignedMeasure(grid, q)))
    return terms


def combine_terms(terms: Sequence[BackupTerm]) -> np.ndarray:
    return sum(term.weight * term.measure.masses for term in terms)


def segment_target(segment: TrajectorySegment, trace: TraceSpec, pi: Policy, target_params: LearnerParams,
                   gamma: float, projection: str = "nested") -> np.ndarray:
    pi_rows, mu_rows = _segment_rows(segment, pi, None)
    w = backup_weights(trace, segment.actions[None], pi_rows, mu_rows)
    return assemble_targets(target_params.grid, gamma, segment.states[None], segment.rewards[None], w,
                            target_params.probs(), projection)[0]


# --------------------------------------------------------------------------
# gradients


def cross_entropy(logits: np.ndarray, q: np.ndarray) -> float:
    """-sum_i q_i log softmax(logits)_i for a single (x, a) entry."""
    z = logits - logits.max()
    log_p = z - np.log(np.sum(np.exp(z)))
    return float(-np.dot(q, log_p))


def term_gradient(logits: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Gradient of ``cross_entropy`` with respect to the logits: p * sum(q) - q."""
    return softmax(logits) * np.sum(q) - q


def batch_gradient(params: LearnerParams, starts: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Batch-averaged gradient of sum_terms w * CE(q_term, p) at each segment's start pair.

    ``targets`` holds the weighted term sums per segment (B, m); by linearity
    the per-segment gradient is ``(sum w) p - target``.
    """
    S, A, m = params.logits.shape
    x, a = starts[:, 0], starts[:, 1]
    p = params.probs()[x, a]
    g = p * targets.sum(axis=1, keepdims=True) - targets
    out = np.zeros(S * A * m)
    idx = ((x * A + a) * m)[:, None] + np.arange(m)
    np.add.at(out, idx.ravel(), g.ravel())
    return out.reshape(S, A, m) / len(starts)


def gradient_step(params: LearnerParams, target_params: LearnerParams, segments: Sequence[TrajectorySegment],
                  trace: TraceSpec, pi: Policy, kappa: float, gamma: float,
                  projection: str = "nested") -> LearnerParams:
    """One plain gradient-descent update on a batch of segments."""
    if not segments:
        raise ValueError("batch must be non-empty")
    targets = np.stack([segment_target(s, trace, pi, target_params, gamma, projection) for s in segments])
    starts = np.array([[s.states[0], s.actions[0]] for s in segments])
    return LearnerParams(params.logits - kappa * batch_gradient(params, starts, targets), params.grid)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class LearnerConfig:
    lam: float = 0.4
    alpha: float = 0.6
    kappa: float = 5.0
    tau: float = 0.05
    n: int = 3
    capacity: int = 10_000
    batch_size: int = 32
    eps_max: float = 1.0
    eps_min: float = 0.01
    eps_decay_steps: int = 3_000
    eval_eps: float = 0.001
    total_steps: int = 6_000
    learning_starts: int = 100
    log_every: int = 500
    m: int = 21
    trace: str = "off_policy_lambda"
    cbar: float = 1.0
    projection: str = "nested"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lam <= 1 or not 0 <= self.alpha <= 1:
            raise ValueError("lambda and alpha must lie in [0, 1]")
        if self.kappa <= 0 or not 0 < self.tau <= 1:
            raise ValueError("kappa must be positive and tau in (0, 1]")
        if self.n < 1 or self.batch_size < 1 or self.capacity <= self.n + 1:
            raise ValueError("need n >= 1, batch_size >= 1 and capacity > n + 1")
        if not 0 <= self.eps_min <= self.eps_max <= 1:
            raise ValueError("need 0 <= eps_min <= eps_max <= 1")
        if self.trace not in ("off_policy_lambda", "retrace"):
            raise ValueError("trace must be 'off_policy_lambda' or 'retrace'")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")

    @property
    def trace_spec(self) -> TraceSpec:
        return TraceSpec.retrace(self.cbar) if self.trace == "retrace" else TraceSpec.off_policy(self.lam)

    def epsilon(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.eps_decay_steps))
        return (1.0 - frac) * self.eps_max + frac * self.eps_min

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingLog:
    step: int
    epsilon: float
    sup_q_error: float
    greedy_accuracy: float
    mean_min_mass_of_targets: float


class ReplayBuffer:
    """Ring buffer over one continuing behaviour stream."""

    def __init__(self, capacity: int, n_actions: int):
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=np.intp)
        self.actions = np.zeros(capacity, dtype=np.intp)
        self.rewards = np.zeros(capacity)
        self.mu = np.zeros((capacity, n_actions))
        self.count = 0

    def add(self, x: int, a: int, r: float, mu_row: np.ndarray):
        i = self.count % self.capacity
        self.states[i], self.actions[i], self.rewards[i] = x, a, r
        self.mu[i] = mu_row
        self.count += 1

    def n_segments(self, n: int) -> int:
        # a segment needs n transitions plus the transition stored at X_n
        return max(0, min(self.count, self.capacity) - n)

    def sample(self, rng: np.random.Generator, n: int, size: int):
        """Contiguous segments as arrays: states (B, n+1), actions (B, n), rewards (B, n), mu (B, n+1, A)."""
        avail = self.n_segments(n)
        if avail < 1:
            raise ValueError("not enough transitions for a segment")
        first = self.count - min(self.count, self.capacity)
        starts = first + rng.integers(0, avail, size=size)
        idx = (starts[:, None] + np.arange(n + 1)) % self.capacity
        return (self.states[idx], self.actions[idx[:, :n]], self.rewards[idx[:, :n]], self.mu[idx])


def _evaluate(params: LearnerParams, q_star: np.ndarray) -> tuple[float, float]:
    q = params.q_values()
    err = float(np.max(np.abs(q - q_star)))
    acc = float(np.mean(np.argmax(q, axis=1) == np.argmax(q_star, axis=1)))
    return err, acc


def train(mdp: TabularMdp, config: LearnerConfig,
          grid: AtomGrid | None = None) -> tuple[LearnerParams, list[TrainingLog]]:
    """Act epsilon-greedily, store transitions, learn from replayed segments."""
    rng = np.random.default_rng(config.seed)
    S, A = mdp.n_states, mdp.n_actions
    if grid is None:
        grid = grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, config.m)
    params = LearnerParams.zeros(grid, S, A)
    target = params.copy()
    trace = config.trace_spec
    q_star = optimal_q(mdp)
    replay = ReplayBuffer(config.capacity, A)
    logs: list[TrainingLog] = []
    min_masses: list[float] = []
    x = int(rng.integers(S))
    for step in range(1, config.total_steps + 1):
        eps = config.epsilon(step)
        q_row = params.q_values()[x]
        mu_row = np.full(A, eps / A)
        mu_row[int(np.argmax(q_row))] += 1.0 - eps
        a = int(sample_categorical(rng, mu_row[None])[0])
        replay.add(x, a, float(mdp.reward[x, a]), mu_row)
        x = int(sample_categorical(rng, mdp.transition[x, a][None])[0])

        if step >= config.learning_starts and replay.n_segments(config.n) > 0:
            states, actions, rewards, mu = replay.sample(rng, config.n, config.batch_size)
            greedy = greedy_policy(params.q_values()).probs[states]
            pi_rows = config.alpha * greedy + (1.0 - config.alpha) * mu
            w = backup_weights(trace, actions, pi_rows, mu)
            targets = assemble_targets(grid, mdp.gamma, states, rewards, w, target.probs(), config.projection)
            min_masses.append(float(np.mean(targets.min(axis=1))))
            starts = np.stack([states[:, 0], actions[:, 0]], axis=1)
            params.logits -= config.kappa * batch_gradient(params, starts, targets)
            target.logits = (1.0 - config.tau) * target.logits + config.tau * params.logits

        if step % config.log_every == 0 or step == config.total_steps:
            err, acc = _evaluate(params, q_star)
            mm = float(np.mean(min_masses)) if min_masses else float("nan")
            logs.append(TrainingLog(step, eps, err, acc, mm))
            min_masses = []
    return params, logs


def greedy_eval_policy(params: LearnerParams, eval_eps: float = 0.001) -> Policy:
    return epsilon_greedy(params.q_values(), eval_eps)


def training_log_csv(logs: Sequence[TrainingLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for log in logs:
        w.writerow([log.step] + [repr(float(v)) for v in (log.epsilon, log.sup_q_error, log.greedy_accuracy,
                                                           log.mean_min_mass_of_targets)])
    return buf.getvalue()

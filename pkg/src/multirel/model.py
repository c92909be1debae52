"""Domain types and exact log-space probability terms of the collapsed model.

Counts on each directed edge are Poisson with mean ``rate * deviation``, where
the deviation factor is shared by all edges of a group at a given time slice
and is Gamma distributed given the group's hidden Markov state.  Integrating
the deviation factors out leaves, per group and time slice, a closed-form
term in the sufficient statistics ``c' = c_s + sum(y)`` and
``d' = 1 / (1/d_s + sum(rates))``.

Gamma distributions are parameterised by (shape, scale) throughout.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln


class ModelError(ValueError):
    """Invalid model input (bad dimensions, empty group, broken invariant)."""


class NumericalError(ArithmeticError):
    """A log-probability evaluated to a non-finite value."""


@dataclass
class EdgeCountPanel:
    """Observed interaction counts, one row of ``T`` counts per directed edge."""

    edges: list[tuple[str, str]]
    counts: np.ndarray
    labels: dict[str, str] | None = None
    bins: str | None = None

    def __post_init__(self):
        self.edges = [(str(a), str(b)) for a, b in self.edges]
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != len(self.edges):
            raise ModelError(
                f"counts must have shape (n_edges, T); got {counts.shape} "
                f"for {len(self.edges)} edges")
        if counts.shape[1] < 1:
            raise ModelError("panel needs at least one time slice")
        if counts.size and not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ModelError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ModelError("counts must be nonnegative")
        if len(set(self.edges)) != len(self.edges):
            raise ModelError("duplicate directed edge in panel")
        for a, b in self.edges:
            if a == b:
                raise ModelError(f"self-loop edge ({a}, {b}) not allowed")
        self.counts = counts

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def name(self, actor: str) -> str:
        if self.labels:
            return self.labels.get(actor, actor)
        return actor

    def subset(self, rows) -> "EdgeCountPanel":
        rows = list(rows)
        return EdgeCountPanel([self.edges[r] for r in rows],
                              self.counts[rows], self.labels, self.bins)


@dataclass
class HyperParams:
    """Model hyperparameters.

    ``shape[s]``/``scale[s]`` are the Gamma emission parameters of HMM state
    ``s`` (state 0 is the spike) and ``dirichlet[s]`` is the Dirichlet prior
    on row ``s`` of the transition matrix.
    """

    alpha: float
    gamma_shape: float
    gamma_scale: float
    shape: np.ndarray
    scale: np.ndarray
    dirichlet: np.ndarray

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.gamma_shape = float(self.gamma_shape)
        self.gamma_scale = float(self.gamma_scale)
        self.shape = np.asarray(self.shape, dtype=float).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=float).reshape(-1)
        self.dirichlet = np.asarray(self.dirichlet, dtype=float)
        K = self.shape.size
        if K < 2:
            raise ModelError("need at least two HMM states")
        if self.scale.shape != (K,) or self.dirichlet.shape != (K, K):
            raise ModelError("emission and Dirichlet parameters disagree on K")
        values = np.concatenate([[self.alpha, self.gamma_shape, self.gamma_scale],
                                 self.shape, self.scale, self.dirichlet.ravel()])
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ModelError("all hyperparameters must be finite and positive")

    @property
    def K(self) -> int:
        return self.shape.size

    @classmethod
    def from_mean_var(cls, alpha, gamma_shape, gamma_scale, means, variances,
                      dirichlet) -> "HyperParams":
        means = np.asarray(means, dtype=float)
        variances = np.asarray(variances, dtype=float)
        return cls(alpha, gamma_shape, gamma_scale, means ** 2 / variances,
                   variances / means, dirichlet)

    def lint(self) -> list[str]:
        """Configuration warnings; never raises."""
        problems = []
        spike_mean = self.shape[0] * self.scale[0]
        spike_var = self.shape[0] * self.scale[0] ** 2
        if abs(spike_mean - 1.0) > 0.05:
            problems.append(f"spike state mean {spike_mean:g} is not close to 1")
        slab_vars = self.shape[1:] * self.scale[1:] ** 2
        if spike_var >= 0.1 * slab_vars.min():
            problems.append(
                f"spike variance {spike_var:g} is not small relative to slab "
                f"variance {slab_vars.min():g}")
        return problems

    def warn_lint(self):
        for msg in self.lint():
            warnings.warn(msg, stacklevel=2)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma_shape": self.gamma_shape,
            "gamma_scale": self.gamma_scale,
            "shape": self.shape.tolist(),
            "scale": self.scale.tolist(),
            "dirichlet": self.dirichlet.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        if "means" in d:
            return cls.from_mean_var(d["alpha"], d["gamma_shape"], d["gamma_scale"],
                                     d["means"], d["variances"], d["dirichlet"])
        return cls(d["alpha"], d["gamma_shape"], d["gamma_scale"], d["shape"],
                   d["scale"], d["dirichlet"])


def canonical_labels(labels) -> np.ndarray:
    """Relabel groups 0, 1, ... in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse.reshape(-1)]


@dataclass(frozen=True, eq=False)
class Partition:
    """Canonically labelled assignment of edges to groups."""

    assignment: np.ndarray
    occupancy: np.ndarray = field(init=False)

    def __post_init__(self):
        z = np.array(self.assignment, dtype=np.int64).reshape(-1)
        if z.size == 0:
            raise ModelError("partition of an empty edge set")
        if np.any(z < 0):
            raise ModelError("group labels must be nonnegative")
        occ = np.bincount(z)
        if np.any(occ == 0) or not np.array_equal(z, canonical_labels(z)):
            raise ModelError("partition labels are not canonical")
        z.flags.writeable = False
        occ.flags.writeable = False
        object.__setattr__(self, "assignment", z)
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        return cls(canonical_labels(labels))

    @property
    def G(self) -> int:
        return self.occupancy.size

    @property
    def n(self) -> int:
        return self.assignment.size

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == g)

    def __eq__(self, other):
        return (isinstance(other, Partition)
                and np.array_equal(self.assignment, other.assignment))

    def __hash__(self):
        return hash(self.assignment.tobytes())


def check_paths(paths, G: int, T: int, K: int) -> np.ndarray:
    paths = np.asarray(paths, dtype=np.int64)
    if paths.shape != (G, T):
        raise ModelError(f"expected state paths of shape {(G, T)}, got {paths.shape}")
    if paths.size and (paths.min() < 0 or paths.max() >= K):
        raise ModelError(f"state values must lie in 0..{K - 1}")
    return paths


def check_transition(theta, K: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (K, K) or np.any(theta < 0):
        raise ModelError("transition matrix must be a nonnegative K x K array")
    if np.any(np.abs(theta.sum(axis=1) - 1.0) > 1e-12):
        raise ModelError("transition matrix rows must sum to one")
    return theta


@dataclass
class ModelParams:
    base_rates: np.ndarray
    transition: np.ndarray
    deviations: np.ndarray | None = None

    def __post_init__(self):
        self.base_rates = np.asarray(self.base_rates, dtype=float)
        if not np.all(np.isfinite(self.base_rates)) or np.any(self.base_rates <= 0):
            raise ModelError("base rates must be finite and positive")
        self.transition = check_transition(self.transition, self.transition.shape[0])


@dataclass(frozen=True)
class GroupTimeSuffStats:
    c_prime: float
    d_prime: float
    sum_y: int
    sum_lambda: float


def suff_stats(panel: EdgeCountPanel, partition: Partition, base_rates, group: int,
               t: int, state: int, hypers: HyperParams) -> GroupTimeSuffStats:
    """Sufficient statistics of one group at time ``t`` under ``state``."""
    if not 0 <= t < panel.T:
        raise ModelError(f"time index {t} out of range")
    if not 0 <= state < hypers.K:
        raise ModelError(f"state {state} out of range")
    members = partition.members(group) if 0 <= group < partition.G else []
    if len(members) == 0:
        raise ModelError(f"group {group} is empty; no sufficient statistics")
    rates = np.asarray(base_rates, dtype=float)
    sum_y = int(panel.counts[members, t].sum())
    sum_lambda = float(rates[members].sum())
    c = hypers.shape[state]
    d = hypers.scale[state]
    return GroupTimeSuffStats(c + sum_y, 1.0 / (1.0 / d + sum_lambda), sum_y, sum_lambda)


def merge_stats(a: GroupTimeSuffStats, b: GroupTimeSuffStats, shape: float,
                scale: float) -> GroupTimeSuffStats:
    """Statistics of the union of two disjoint groups under the same state."""
    sum_y = a.sum_y + b.sum_y
    sum_lambda = a.sum_lambda + b.sum_lambda
    return GroupTimeSuffStats(shape + sum_y, 1.0 / (1.0 / scale + sum_lambda),
                              sum_y, sum_lambda)


def group_time_marginal_loglik(stats: GroupTimeSuffStats, shape: float, scale: float,
                               counts, rates) -> float:
    """Log probability of one group's counts at one time slice, deviation integrated out."""
    counts = np.asarray(counts, dtype=float)
    rates = np.asarray(rates, dtype=float)
    cp, dp = stats.c_prime, stats.d_prime
    if not (cp > 0 and dp > 0 and math.isfinite(cp) and math.isfinite(dp)):
        raise NumericalError(f"invalid sufficient statistics c'={cp!r} d'={dp!r}")
    value = (-shape * math.log(scale) - math.lgamma(shape)
             + math.lgamma(cp) + cp * math.log(dp)
             + float(np.sum(counts * np.log(rates) - gammaln(counts + 1.0))))
    if not math.isfinite(value):
        raise NumericalError(
            f"non-finite group marginal (c'={cp}, d'={dp}, shape={shape}, scale={scale})")
    return value


def group_marginal_table(sum_y, sum_lambda, paths, hypers: HyperParams) -> np.ndarray:
    """Per (group, time) log marginals without the per-edge ``rate**y / y!`` factors.

    ``sum_y`` is (G, T), ``sum_lambda`` is (G,), ``paths`` is (G, T).
    """
    sum_y = np.asarray(sum_y, dtype=float)
    paths = np.asarray(paths, dtype=np.int64)
    c = hypers.shape[paths]
    d = hypers.scale[paths]
    cp = c + sum_y
    log_dp = -np.log(1.0 / d + np.asarray(sum_lambda, dtype=float)[:, None])
    return -c * np.log(d) - gammaln(c) + gammaln(cp) + cp * log_dp


def edge_count_terms(counts, base_rates) -> float:
    """Sum over edges and time of ``y log(rate) - log(y!)``."""
    counts = np.asarray(counts, dtype=float)
    rates = np.asarray(base_rates, dtype=float)
    return float(np.sum(counts.sum(axis=1) * np.log(rates)) - np.sum(gammaln(counts + 1.0)))


def gamma_logpdf(x, shape: float, scale: float):
    x = np.asarray(x, dtype=float)
    return (shape - 1.0) * np.log(x) - x / scale - shape * math.log(scale) - math.lgamma(shape)


def crp_logprob(partition: Partition, alpha: float) -> float:
    occ = partition.occupancy
    n = int(occ.sum())
    # rising factorial summed directly: lgamma differences lose ~1e-13 for small alpha
    rising = math.fsum(np.log(alpha + np.arange(n)))
    return float(occ.size * math.log(alpha) - rising + np.sum(gammaln(occ)))


def transition_counts(paths, K: int, initial_state: int | None = None) -> np.ndarray:
    """Count state transitions along each path.

    With ``initial_state`` set, every path also contributes one transition out
    of that virtual state into its first state.
    """
    paths = np.atleast_2d(np.asarray(paths, dtype=np.int64))
    counts = np.zeros((K, K), dtype=np.int64)
    if paths.size == 0:
        return counts
    np.add.at(counts, (paths[:, :-1].ravel(), paths[:, 1:].ravel()), 1)
    if initial_state is not None:
        np.add.at(counts, (initial_state, paths[:, 0]), 1)
    return counts


def polya_logprob(counts, dirichlet) -> float:
    """Dirichlet-multinomial log probability of transition counts, row by row."""
    n = np.asarray(counts, dtype=float)
    beta = np.asarray(dirichlet, dtype=float)
    if np.any(n < 0):
        raise ModelError("transition counts must be nonnegative")
    row_beta = beta.sum(axis=1)
    return float(np.sum(gammaln(row_beta) - gammaln(row_beta + n.sum(axis=1)))
                 + np.sum(gammaln(beta + n) - gammaln(beta)))


def path_logprob(paths, theta, initial_state: int = 0) -> float:
    """Log probability of state paths under a fixed transition matrix."""
    K = np.asarray(theta).shape[0]
    n = transition_counts(paths, K, initial_state)
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta)
    used = n > 0
    return float(np.sum(n[used] * log_theta[used]))


def joint_logprob(panel: EdgeCountPanel, partition: Partition, base_rates, paths,
                  hypers: HyperParams, theta=None) -> float:
    """Log joint of counts, base rates, state paths and partition.

    The transition matrix is integrated out (Pólya term) unless ``theta`` is
    given, in which case the paths are scored under it directly.  Every path
    starts from the virtual state 0.
    """
    rates = np.asarray(base_rates, dtype=float)
    if rates.shape != (panel.n_edges,) or partition.n != panel.n_edges:
        raise ModelError("base rates / partition do not match the panel")
    if not np.all(rates > 0):
        raise ModelError("base rates must be positive")
    paths = check_paths(paths, partition.G, panel.T, hypers.K)
    z = partition.assignment
    sum_y = np.zeros((partition.G, panel.T), dtype=np.int64)
    np.add.at(sum_y, z, panel.counts)
    sum_lambda = np.bincount(z, weights=rates, minlength=partition.G)
    total = float(np.sum(group_marginal_table(sum_y, sum_lambda, paths, hypers)))
    total += edge_count_terms(panel.counts, rates)
    total += float(np.sum(gamma_logpdf(rates, hypers.gamma_shape, hypers.gamma_scale)))
    if theta is None:
        total += polya_logprob(transition_counts(paths, hypers.K, 0), hypers.dirichlet)
    else:
        total += path_logprob(paths, theta, 0)
    total += crp_logprob(partition, hypers.alpha)
    if not math.isfinite(total):
        raise NumericalError(f"joint log probability is not finite ({total})")
    return total

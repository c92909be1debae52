"""MCMC updates for the edge-clustering model.

One sweep visits the latent variables in a fixed order: base rates (slice
sampling on the log axis), base-rate Gamma hyperparameters (slice sampling),
group assignments (Neal's Algorithm 8 with auxiliary state paths drawn from
the HMM prior), the transition matrix (conjugate Dirichlet draw) and the
per-group state paths (forward filtering, backward sampling).

All mutable sampler state lives in :class:`ChainState`, which caches the
per-group sufficient statistics so that single-edge updates cost O(G T).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .model import (
    EdgeCountPanel,
    HyperParams,
    ModelError,
    NumericalError,
    Partition,
    canonical_labels,
    check_paths,
    joint_logprob,
    transition_counts,
)

# log-uniform hyperprior support for the base-rate Gamma shape and scale
GAMMA_HYPER_BOUNDS = (1e-3, 1e3)


@dataclass(frozen=True)
class SliceConfig:
    initial_width: float = 1.0
    max_stepout: int = 30
    max_shrink: int = 100

    def __post_init__(self):
        if not (self.initial_width > 0 and self.max_stepout > 0 and self.max_shrink > 0):
            raise ValueError("slice sampler settings must be positive")


@dataclass(frozen=True)
class Algo8Config:
    m_aux: int = 3

    def __post_init__(self):
        if self.m_aux < 1:
            raise ValueError("m_aux must be at least 1")


@dataclass
class Diagnostics:
    slice_exhausted: int = 0
    slice_calls: int = 0
    groups_opened: int = 0
    groups_closed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream)``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def slice_sample(logdensity, x0: float, rng: np.random.Generator,
                 cfg: SliceConfig = SliceConfig(), logp0: float | None = None):
    """One univariate slice-sampling update with stepping out and shrinkage.

    Returns ``(x, logdensity(x), ok)``; ``ok`` is False when the shrinkage
    budget ran out, in which case ``x0`` is returned unchanged.
    """
    if logp0 is None:
        logp0 = logdensity(x0)
    log_level = logp0 - rng.standard_exponential()
    w = cfg.initial_width
    left = x0 - w * rng.random()
    right = left + w
    j = int(cfg.max_stepout * rng.random())
    k = cfg.max_stepout - 1 - j
    while j > 0 and logdensity(left) > log_level:
        left -= w
        j -= 1
    while k > 0 and logdensity(right) > log_level:
        right += w
        k -= 1
    for _ in range(cfg.max_shrink):
        x1 = left + rng.random() * (right - left)
        lp = logdensity(x1)
        if lp > log_level:
            return x1, lp, True
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0, logp0, False


def base_rate_log_conditional(log_rate: float, total_y: float, other_sum: float,
                              state_cprime, inv_scale, gamma_shape: float,
                              gamma_scale: float) -> float:
    """Unnormalised log density of ``log(rate)`` for one edge.

    ``state_cprime[s]`` sums c' over the time slices the edge's group spends
    in state ``s``; ``other_sum`` is the summed rate of the other members.
    """
    if log_rate > 700.0:
        return -math.inf
    lam = math.exp(log_rate)
    value = (gamma_shape + total_y) * log_rate - lam / gamma_scale
    for cs, b in zip(state_cprime, inv_scale):
        if cs:
            value -= cs * math.log(b + other_sum + lam)
    return value


def sample_log_categorical(logw, rng: np.random.Generator) -> int:
    logw = np.asarray(logw, dtype=float)
    top = logw.max()
    if not math.isfinite(top):
        raise NumericalError("all candidate weights are zero")
    cum = np.cumsum(np.exp(logw - top))
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def sample_prior_paths(theta, n_paths: int, T: int, rng: np.random.Generator,
                       initial_state: int = 0) -> np.ndarray:
    """State paths from the Markov chain started after ``initial_state``."""
    paths = np.empty((n_paths, T), dtype=np.int64)
    if n_paths == 0:
        return paths
    cum = np.cumsum(theta, axis=1)
    cum[:, -1] = np.inf
    cum_rows = cum.tolist()
    u = rng.random((n_paths, T)).tolist()
    for i in range(n_paths):
        s = initial_state
        row = paths[i]
        ui = u[i]
        out = []
        for t in range(T):
            c = cum_rows[s]
            x = ui[t]
            s = 0
            while x >= c[s]:
                s += 1
            out.append(s)
        row[:] = out
    return paths


class ChainState:
    """Mutable state of one Markov chain plus cached group statistics.

    Group slots may be non-contiguous while an assignment sweep is in
    progress; :meth:`compact` restores canonical labels.
    """

    def __init__(self, panel: EdgeCountPanel, hypers: HyperParams, labels, paths,
                 rates, theta, gamma_shape: float, gamma_scale: float):
        self.panel = panel
        self.hypers = hypers
        self.counts = panel.counts.astype(float)
        self.total_y = self.counts.sum(axis=1)
        self.inv_scale = 1.0 / hypers.scale
        self.labels = np.asarray(labels, dtype=np.int64).copy()
        self.paths = np.asarray(paths, dtype=np.int64).copy()
        self.rates = np.asarray(rates, dtype=float).copy()
        self.theta = np.asarray(theta, dtype=float).copy()
        self.gamma_shape = float(gamma_shape)
        self.gamma_scale = float(gamma_scale)
        self.diagnostics = Diagnostics()
        if self.labels.shape != (panel.n_edges,) or self.rates.shape != (panel.n_edges,):
            raise ModelError("labels/rates do not match the panel")
        self.compact()

    @property
    def T(self) -> int:
        return self.panel.T

    @property
    def K(self) -> int:
        return self.hypers.K

    @property
    def G(self) -> int:
        return int(np.count_nonzero(self.sizes))

    def copy(self) -> "ChainState":
        return ChainState(self.panel, self.hypers, self.labels, self.paths, self.rates,
                          self.theta, self.gamma_shape, self.gamma_scale)

    # -- cached statistics -------------------------------------------------

    def compact(self):
        """Relabel groups canonically and rebuild every cache from scratch."""
        canon = canonical_labels(self.labels)
        G = int(canon.max()) + 1
        old_of_new = np.empty(G, dtype=np.int64)
        old_of_new[canon] = self.labels
        self.paths = check_paths(self.paths[old_of_new], G, self.T, self.K)
        self.labels = canon
        self.refresh()

    def refresh(self):
        G = self.paths.shape[0]
        self.sizes = np.bincount(self.labels, minlength=G).astype(np.int64)
        self.sum_y = np.zeros((G, self.T))
        np.add.at(self.sum_y, self.labels, self.counts)
        self.sum_lam = np.bincount(self.labels, weights=self.rates, minlength=G)
        self.cprime = self.hypers.shape[self.paths] + self.sum_y
        self.state_c = self._per_state(self.paths, self.cprime)

    def _per_state(self, paths, values) -> np.ndarray:
        """Sum ``values`` over time within each state, row by row -> (rows, K)."""
        out = np.empty((paths.shape[0], self.K))
        for s in range(self.K):
            out[:, s] = np.where(paths == s, values, 0.0).sum(axis=1)
        return out

    def _remove(self, e: int, g: int):
        y = self.counts[e]
        self.sizes[g] -= 1
        self.sum_y[g] -= y
        self.cprime[g] -= y
        self.sum_lam[g] -= self.rates[e]
        self.state_c[g] -= np.bincount(self.paths[g], weights=y, minlength=self.K)
        if self.sizes[g] == 0:
            self._reset_slot(g, self.paths[g])

    def _reset_slot(self, g: int, path):
        self.paths[g] = path
        self.sum_y[g] = 0.0
        self.sum_lam[g] = 0.0
        self.cprime[g] = self.hypers.shape[self.paths[g]]
        self.state_c[g] = np.bincount(self.paths[g], weights=self.cprime[g],
                                      minlength=self.K)

    def _add(self, e: int, g: int):
        y = self.counts[e]
        self.sizes[g] += 1
        self.sum_y[g] += y
        self.cprime[g] += y
        self.sum_lam[g] += self.rates[e]
        self.state_c[g] += np.bincount(self.paths[g], weights=y, minlength=self.K)
        self.labels[e] = g

    def _open_group(self, e: int, path, slot: int | None = None) -> int:
        if slot is not None and self.sizes[slot] == 0:
            g = slot
        elif np.any(self.sizes == 0):
            g = int(np.flatnonzero(self.sizes == 0)[0])
        else:
            g = self.paths.shape[0]
            self.paths = np.vstack([self.paths, np.zeros((1, self.T), dtype=np.int64)])
            self.sizes = np.append(self.sizes, 0)
            self.sum_y = np.vstack([self.sum_y, np.zeros((1, self.T))])
            self.cprime = np.vstack([self.cprime, np.zeros((1, self.T))])
            self.sum_lam = np.append(self.sum_lam, 0.0)
            self.state_c = np.vstack([self.state_c, np.zeros((1, self.K))])
        self._reset_slot(g, path)
        self._add(e, g)
        return g

    # -- views ---------------------------------------------------------------

    def partition(self) -> Partition:
        return Partition(self.labels)

    def group_paths(self) -> np.ndarray:
        return self.paths

    def joint_logprob(self, collapsed: bool = True) -> float:
        return joint_logprob(self.panel, self.partition(), self.rates, self.paths,
                             self.with_gamma(), None if collapsed else self.theta)

    def with_gamma(self) -> HyperParams:
        h = self.hypers
        return HyperParams(h.alpha, self.gamma_shape, self.gamma_scale, h.shape,
                           h.scale, h.dirichlet)

    def check(self):
        """Raise if canonical-form or cache invariants are broken."""
        part = self.partition()
        if part.G != self.paths.shape[0] or np.any(self.sizes != part.occupancy):
            raise ModelError("group caches disagree with labels")
        check_paths(self.paths, part.G, self.T, self.K)
        if np.any(self.rates <= 0) or not np.all(np.isfinite(self.rates)):
            raise ModelError("invalid base rates")


# -- base rates and their hyperparameters ----------------------------------

def slice_sample_base_rate(state: ChainState, e: int, rng: np.random.Generator,
                           cfg: SliceConfig = SliceConfig()) -> float:
    """Resample the base rate of edge ``e`` from its full conditional."""
    g = state.labels[e]
    lam = state.rates[e]
    other = 0.0 if state.sizes[g] == 1 else max(state.sum_lam[g] - lam, 0.0)
    cs = state.state_c[g].tolist()
    inv = state.inv_scale.tolist()
    total_y = state.total_y[e]
    a, b = state.gamma_shape, state.gamma_scale

    def logdensity(u):
        return base_rate_log_conditional(u, total_y, other, cs, inv, a, b)

    u, _, ok = slice_sample(logdensity, math.log(lam), rng, cfg)
    state.diagnostics.slice_calls += 1
    if not ok:
        state.diagnostics.slice_exhausted += 1
    new = math.exp(u)
    state.rates[e] = new
    state.sum_lam[g] = other + new
    return new


def gamma_hyper_loglik(shape: float, scale: float, n: int, sum_log: float,
                       sum_x: float) -> float:
    """Log likelihood of ``n`` rates under Gamma(shape, scale) from their sums."""
    return ((shape - 1.0) * sum_log - sum_x / scale
            - n * (shape * math.log(scale) + math.lgamma(shape)))


def slice_sample_gamma_hypers(shape: float, scale: float, rates,
                              rng: np.random.Generator,
                              cfg: SliceConfig = SliceConfig(),
                              bounds=GAMMA_HYPER_BOUNDS, diagnostics=None):
    """Coordinate-wise slice updates of the base-rate Gamma (shape, scale).

    Both coordinates carry independent log-uniform priors on ``bounds``.
    """
    rates = np.asarray(rates, dtype=float)
    n = rates.size
    sum_log = float(np.log(rates).sum())
    sum_x = float(rates.sum())
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    if not (lo <= math.log(shape) <= hi and lo <= math.log(scale) <= hi):
        raise ModelError("Gamma hyperparameters outside their prior support")

    def target_shape(u):
        if not lo <= u <= hi:
            return -math.inf
        return gamma_hyper_loglik(math.exp(u), scale, n, sum_log, sum_x)

    u, _, ok1 = slice_sample(target_shape, math.log(shape), rng, cfg)
    shape = math.exp(u)

    def target_scale(u):
        if not lo <= u <= hi:
            return -math.inf
        return gamma_hyper_loglik(shape, math.exp(u), n, sum_log, sum_x)

    u, _, ok2 = slice_sample(target_scale, math.log(scale), rng, cfg)
    scale = math.exp(u)
    if diagnostics is not None:
        diagnostics.slice_calls += 2
        diagnostics.slice_exhausted += (not ok1) + (not ok2)
    return shape, scale


# -- group assignments -----------------------------------------------------

def assignment_log_weights(state: ChainState, e: int, groups, aux_paths,
                           alpha: float, m_aux: int) -> np.ndarray:
    """Log weights for moving detached edge ``e`` into each candidate.

    The first ``len(groups)`` entries score existing groups (CRP weight times
    the ratio of group marginals with and without the edge); the rest score
    new groups carrying each auxiliary path.  Per-edge ``rate**y / y!``
    factors are common to all candidates and omitted.
    """
    y = state.counts[e]
    lam = state.rates[e]
    nz = np.flatnonzero(y)
    ynz = y[nz]
    inv = state.inv_scale
    K = state.K
    groups = np.asarray(groups, dtype=np.int64)

    out = np.empty(groups.size + len(aux_paths))
    if groups.size:
        cp = state.cprime[groups][:, nz]
        paths = state.paths[groups]
        ys = np.empty((groups.size, K))
        for s in range(K):
            ys[:, s] = (paths == s) @ y
        base = inv[None, :] + state.sum_lam[groups][:, None]
        ll = (gammaln(cp + ynz).sum(axis=1) - gammaln(cp).sum(axis=1)
              - (state.state_c[groups] * np.log1p(lam / base)).sum(axis=1)
              - (ys * np.log(base + lam)).sum(axis=1))
        out[:groups.size] = np.log(state.sizes[groups]) + ll
    if len(aux_paths):
        aux = np.asarray(aux_paths, dtype=np.int64)
        c = state.hypers.shape
        ca = c[aux][:, nz]
        cs = np.empty((aux.shape[0], K))
        ys = np.empty((aux.shape[0], K))
        for s in range(K):
            mask = aux == s
            cs[:, s] = c[s] * mask.sum(axis=1)
            ys[:, s] = mask @ y
        ll = (gammaln(ca + ynz).sum(axis=1) - gammaln(ca).sum(axis=1)
              - (cs * np.log1p(lam / inv)).sum(axis=1)
              - (ys * np.log(inv + lam)).sum(axis=1))
        out[groups.size:] = math.log(alpha / m_aux) + ll
    return out


def detach_edge(state: ChainState, e: int):
    """Remove ``e`` from its group; returns (old group, emptied path or None)."""
    g = int(state.labels[e])
    state._remove(e, g)
    if state.sizes[g] == 0:
        state.diagnostics.groups_closed += 1
        return g, state.paths[g].copy()
    return g, None


def attach_edge(state: ChainState, e: int, choice: int, groups, aux_paths,
                reuse: int | None = None) -> int:
    """Place ``e`` according to a candidate index from :func:`assignment_log_weights`."""
    if choice < len(groups):
        g = int(groups[choice])
        state._add(e, g)
        return g
    path = np.asarray(aux_paths[choice - len(groups)], dtype=np.int64)
    state.diagnostics.groups_opened += 1
    return state._open_group(e, path, slot=reuse)


def gibbs_group_assignment(state: ChainState, e: int, rng: np.random.Generator,
                           cfg: Algo8Config = Algo8Config()) -> int:
    """Algorithm-8 update of edge ``e``'s group; returns its new slot.

    If ``e`` was alone, its group's path is kept as the first auxiliary path
    and only ``m_aux - 1`` fresh paths are drawn from the HMM prior.
    """
    old, emptied = detach_edge(state, e)
    fresh = sample_prior_paths(state.theta, cfg.m_aux - (emptied is not None),
                               state.T, rng)
    aux = fresh if emptied is None else np.vstack([emptied[None, :], fresh])
    groups = np.flatnonzero(state.sizes)
    logw = assignment_log_weights(state, e, groups, aux, state.hypers.alpha, cfg.m_aux)
    if not np.any(np.isfinite(logw)):
        raise NumericalError(f"edge {e}: every assignment weight is zero")
    choice = sample_log_categorical(logw, rng)
    return attach_edge(state, e, choice, groups, aux,
                       reuse=old if emptied is not None else None)


# -- transition matrix and state paths ---------------------------------------

def sample_transition_matrix(paths, dirichlet, rng: np.random.Generator) -> np.ndarray:
    """Draw each row from its Dirichlet posterior, counting the virtual start."""
    beta = np.asarray(dirichlet, dtype=float)
    K = beta.shape[0]
    paths = np.asarray(paths, dtype=np.int64)
    n = transition_counts(paths, K, 0) if paths.size else np.zeros((K, K))
    theta = np.empty((K, K))
    for s in range(K):
        row = rng.dirichlet(beta[s] + n[s])
        theta[s] = row / row.sum()
    return theta


def emission_table(sum_y, sum_lam, hypers: HyperParams) -> np.ndarray:
    """State-dependent part of the group marginals, shape (G, T, K)."""
    sum_y = np.asarray(sum_y, dtype=float)
    sum_lam = np.asarray(sum_lam, dtype=float)
    G, T = sum_y.shape
    out = np.empty((G, T, hypers.K))
    for s in range(hypers.K):
        c, d = hypers.shape[s], hypers.scale[s]
        cp = c + sum_y
        out[:, :, s] = (-c * math.log(d) - math.lgamma(c) + gammaln(cp)
                        - cp * np.log(1.0 / d + sum_lam)[:, None])
    return out


def ffbs_paths(sum_y, sum_lam, theta, hypers: HyperParams,
               rng: np.random.Generator) -> np.ndarray:
    """Jointly sample the state path of every group given its statistics."""
    E = emission_table(sum_y, sum_lam, hypers)
    G, T, K = E.shape
    theta = np.asarray(theta, dtype=float)
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta)
    filt = np.empty((T, G, K))
    with np.errstate(divide="ignore"):
        cur = log_theta[0][None, :] + E[:, 0, :]
        for t in range(T):
            top = cur.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(top)):
                raise NumericalError(f"forward filter underflow at time index {t}")
            cur = cur - top
            filt[t] = cur
            if t + 1 < T:
                cur = np.log(np.exp(cur) @ theta) + E[:, t + 1, :]
    paths = np.empty((G, T), dtype=np.int64)
    u = rng.random((T, G))
    logits = filt[T - 1]
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            logits = filt[t] + log_theta[:, paths[:, t + 1]].T
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        cum = np.cumsum(p, axis=1)
        paths[:, t] = np.minimum((cum < (u[t] * cum[:, -1])[:, None]).sum(axis=1), K - 1)
    return paths


def ffbs_state_path(panel: EdgeCountPanel, partition: Partition, base_rates, group: int,
                    theta, hypers: HyperParams, rng: np.random.Generator) -> np.ndarray:
    members = partition.members(group)
    if members.size == 0:
        raise ModelError(f"group {group} is empty")
    sum_y = panel.counts[members].sum(axis=0)[None, :]
    sum_lam = np.asarray(base_rates, dtype=float)[members].sum()[None]
    return ffbs_paths(sum_y, sum_lam, theta, hypers, rng)[0]


# -- deviation factors -------------------------------------------------------

def deviation_posterior(sum_y, sum_lam, path, hypers: HyperParams):
    """Gamma posterior (shape, scale) of one group's deviation factors."""
    path = np.asarray(path, dtype=np.int64)
    shape = hypers.shape[path] + np.asarray(sum_y, dtype=float)
    scale = 1.0 / (1.0 / hypers.scale[path] + float(sum_lam))
    return shape, scale


def deviation_posterior_mean(sum_y, sum_lam, path, hypers: HyperParams) -> np.ndarray:
    shape, scale = deviation_posterior(sum_y, sum_lam, path, hypers)
    return shape * scale


def sample_deviation_factors(sum_y, sum_lam, path, hypers: HyperParams,
                             rng: np.random.Generator, size=None) -> np.ndarray:
    shape, scale = deviation_posterior(sum_y, sum_lam, path, hypers)
    if size is None:
        return rng.gamma(shape, scale)
    return rng.gamma(shape, scale, size=(size,) + shape.shape)


# -- full sweep ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    slice: SliceConfig = field(default_factory=SliceConfig)
    algo8: Algo8Config = field(default_factory=Algo8Config)
    update_rates: bool = True
    update_gamma: bool = True
    update_assignments: bool = True
    update_theta: bool = True
    update_paths: bool = True
    debug: bool = False


def sweep(state: ChainState, rng: np.random.Generator,
          cfg: SweepConfig = SweepConfig()) -> ChainState:
    """One MCMC iteration over all latent variables, in the pinned order."""
    if cfg.update_rates:
        for e in range(state.panel.n_edges):
            slice_sample_base_rate(state, e, rng, cfg.slice)
        state.sum_lam = np.bincount(state.labels, weights=state.rates,
                                    minlength=state.paths.shape[0])
    if cfg.update_gamma:
        state.gamma_shape, state.gamma_scale = slice_sample_gamma_hypers(
            state.gamma_shape, state.gamma_scale, state.rates, rng, cfg.slice,
            diagnostics=state.diagnostics)
    if cfg.update_assignments:
        for e in range(state.panel.n_edges):
            gibbs_group_assignment(state, e, rng, cfg.algo8)
    state.compact()
    if cfg.update_theta:
        state.theta = sample_transition_matrix(state.paths, state.hypers.dirichlet, rng)
    if cfg.update_paths:
        state.paths = ffbs_paths(state.sum_y, state.sum_lam, state.theta, state.hypers, rng)
        state.refresh()
    if cfg.debug:
        state.check()
    return state

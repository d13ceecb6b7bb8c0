"""Sticky HDP-HMM with zero-mean Gaussian emissions, inferred with a
truncated (weak-limit) blocked Gibbs sampler.

Generative model, truncated to L states:

    beta ~ Dirichlet(gamma/L, ..., gamma/L)            (global stick weights)
    pi_j ~ Dirichlet(alpha beta_1, ..., alpha beta_j + kappa, ..., alpha beta_L)
    Sigma_k ~ InverseWishart(nu0, S0)                  (emission covariances)
    z_t | z_{t-1} ~ pi_{z_{t-1}},    o_t | z_t ~ N(0, Sigma_{z_t})

kappa adds extra self-transition mass to each row's prior (the "sticky"
bias); rho = kappa / (alpha + kappa). One Gibbs sweep resamples, in order:
labels (blocked forward-backward), transition counts, auxiliary table and
override counts, beta, transition rows, emission covariances, and
optionally the concentration hyperparameters.

Several independent sequences may share one model: forward recursions and
transition counts restart at each sequence boundary, and every sequence
starts from the global weights beta.

States are indexed 0..L-1 internally; exports renumber patterns from 1.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import invwishart

from .core import FeatureSequence
from .errors import NumericalUnderflow

OCCUPANCY_THRESHOLD = 0.01  # a state is "effective" above this label share


@dataclass(frozen=True)
class HdpHmmHyper:
    """Fixed hyperparameters (resampling of gamma, alpha+kappa and rho is
    available but off by default for reproducible runs)."""

    gamma: float = 1.0
    alpha_plus_kappa: float = 10.0
    rho: float = 0.9
    L: int = 25
    nu0: float | None = None            # defaults to D + 2
    S0: np.ndarray | None = None        # defaults to identity(D)
    hyper_resampling: bool = False
    gamma_prior: tuple[float, float] = (1.0, 0.01)  # Gamma(shape, rate)
    ak_prior: tuple[float, float] = (1.0, 0.01)     # Gamma(shape, rate)
    rho_prior: tuple[float, float] = (10.0, 1.0)    # Beta(a, b)

    def __post_init__(self):
        if self.gamma <= 0 or self.alpha_plus_kappa <= 0:
            raise ValueError("gamma and alpha_plus_kappa must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.L < 2:
            raise ValueError("truncation level L must be >= 2")

    @property
    def alpha(self) -> float:
        return (1.0 - self.rho) * self.alpha_plus_kappa

    @property
    def kappa(self) -> float:
        return self.rho * self.alpha_plus_kappa

    def emission_prior(self, d: int) -> tuple[float, np.ndarray]:
        nu0 = float(self.nu0) if self.nu0 is not None else d + 2.0
        if nu0 <= d + 1:
            raise ValueError(f"nu0 must exceed D+1 = {d + 1}")
        S0 = np.eye(d) if self.S0 is None else np.asarray(self.S0, dtype=np.float64)
        if S0.shape != (d, d) or not np.allclose(S0, S0.T):
            raise ValueError("S0 must be a symmetric (D, D) matrix")
        np.linalg.cholesky(S0)  # must be positive definite
        return nu0, S0


@dataclass
class HdpHmmState:
    """Sampler state; ``z`` holds one label array per sequence."""

    beta: np.ndarray                 # (L,)
    pi: np.ndarray                   # (L, L) row-stochastic
    sigmas: np.ndarray               # (L, D, D)
    z: list[np.ndarray]
    n: np.ndarray                    # (L, L) transition counts
    m: np.ndarray                    # (L, L) table counts
    w: np.ndarray                    # (L,) override counts
    m_bar: np.ndarray                # (L, L) adjusted table counts
    loglik: float = float("-inf")

    @property
    def L(self) -> int:
        return self.beta.shape[0]

    def labels_concat(self) -> np.ndarray:
        return np.concatenate(self.z) if self.z else np.empty(0, dtype=np.int64)


def as_sequences(features) -> list[np.ndarray]:
    """Normalize the accepted feature inputs (one FeatureSequence/array or a
    list of them) into a list of (T, D) float arrays."""
    if isinstance(features, FeatureSequence):
        return [np.asarray(features.values, dtype=np.float64)]
    if isinstance(features, np.ndarray):
        if features.ndim != 2:
            raise ValueError(f"feature array must be 2-d, got shape {features.shape}")
        return [features.astype(np.float64, copy=False)]
    seqs = [s.values if isinstance(s, FeatureSequence) else np.asarray(s, dtype=np.float64)
            for s in features]
    if not seqs:
        raise ValueError("no feature sequences given")
    d = seqs[0].shape[1]
    for s in seqs:
        if s.ndim != 2 or s.shape[1] != d:
            raise ValueError("all sequences must share the feature dimension")
    return [np.asarray(s, dtype=np.float64) for s in seqs]


# conjugate pieces ---------------------------------------------------------

def stick_breaking(gamma: float, L: int, rng) -> np.ndarray:
    """Truncated stick-breaking draw: beta_k = v_k prod_{i<k} (1 - v_i) with
    v_k ~ Beta(1, gamma); the final weight absorbs the remainder so the
    result sums to exactly 1."""
    if gamma <= 0 or L < 1:
        raise ValueError("gamma must be positive and L >= 1")
    if L == 1:
        return np.ones(1)
    v = np.asarray(rng.beta(1.0, gamma, size=L - 1), dtype=np.float64)
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - v)))
    beta = np.empty(L)
    beta[:-1] = v * remaining[:-1]
    beta[-1] = remaining[-1]
    return beta


def _dirichlet(conc: np.ndarray, rng) -> np.ndarray:
    draws = rng.gamma(shape=np.maximum(conc, 1e-300))
    # tiny concentrations make the gamma sampler underflow to exact zero,
    # which would cut states out of the chain entirely; keep every
    # coordinate strictly positive (the weak-limit model gives every state
    # positive mass)
    draws = np.maximum(draws, 1e-300)
    total = draws.sum()
    if not np.isfinite(total) or total <= 0:
        draws = np.asarray(conc, dtype=np.float64)
        total = draws.sum()
    return draws / total


def sample_pi(beta: np.ndarray, counts_row: np.ndarray, j: int,
              hyper: HdpHmmHyper, rng) -> np.ndarray:
    """One transition row from its Dirichlet conditional; the sticky mass
    kappa lands only on the self coordinate."""
    conc = hyper.alpha * beta + counts_row
    conc = conc.astype(np.float64).copy()
    conc[j] += hyper.kappa
    return _dirichlet(conc, rng)


def transition_counts(z: Sequence[np.ndarray], L: int) -> np.ndarray:
    """Within-sequence transition counts n[j, k] = #{t: z_t = j, z_{t+1} = k}."""
    n = np.zeros((L, L), dtype=np.int64)
    for labels in z:
        if len(labels) > 1:
            np.add.at(n, (labels[:-1], labels[1:]), 1)
    return n


def sample_emissions(features, z: Sequence[np.ndarray], hyper: HdpHmmHyper, rng
                     ) -> np.ndarray:
    """Per-state covariance draws from the Inverse-Wishart conditional
    IW(nu0 + n_k, S0 + sum_{t: z_t = k} o_t o_t^T); unoccupied states draw
    from the prior."""
    seqs = as_sequences(features)
    d = seqs[0].shape[1]
    nu0, S0 = hyper.emission_prior(d)
    counts = np.zeros(hyper.L, dtype=np.int64)
    scatter = np.zeros((hyper.L, d, d))
    for vals, labels in zip(seqs, z):
        for k in np.unique(labels):
            members = vals[labels == k]
            counts[k] += members.shape[0]
            scatter[k] += members.T @ members
    sigmas = np.empty((hyper.L, d, d))
    for k in range(hyper.L):
        draw = invwishart.rvs(df=nu0 + counts[k], scale=S0 + scatter[k], random_state=rng)
        sigmas[k] = (draw + draw.T) / 2
    return sigmas


# emission densities and the forward/backward machinery --------------------

def _emission_loglik(values: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Zero-mean Gaussian log-densities, shape (T, L); the per-state solves
    are batched through numpy's stacked Cholesky."""
    d = values.shape[1]
    chols = np.linalg.cholesky(sigmas)                      # (L, D, D)
    eye = np.broadcast_to(np.eye(d), chols.shape)
    inv_chols = np.linalg.solve(chols, eye)                 # (L, D, D)
    logdet = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
    y = np.einsum("kij,tj->kti", inv_chols, values, optimize=True)
    quad = np.einsum("kti,kti->kt", y, y, optimize=True)
    out = -0.5 * (d * np.log(2 * np.pi) + logdet[:, None] + quad).T
    if np.isnan(out).any():
        raise NumericalUnderflow("non-finite emission log-density")
    return np.ascontiguousarray(out)


def _backward_messages(pi: np.ndarray, logB: np.ndarray) -> np.ndarray:
    """m[t, i] = log p(o_{t+1:T} | z_t = i) up to a per-step constant
    (messages are kept in log space and max-normalized each step).

    Each step evaluates logsumexp_j(log pi_ij + x_j) as
    log(pi @ exp(x - max x)) + max x, which is safe because pi entries lie
    in [0, 1] and the shifted exponentials cannot overflow.
    """
    T, L = logB.shape
    msg = np.zeros((T, L))
    with np.errstate(divide="ignore"):
        for t in range(T - 2, -1, -1):
            tmp = logB[t + 1] + msg[t + 1]
            mx = tmp.max()
            row = np.log(pi @ np.exp(tmp - mx)) + mx
            top = row.max()
            msg[t] = row - top if top > -np.inf else row
    return msg


def _sample_labels_one(logB: np.ndarray, pi: np.ndarray,
                       init: np.ndarray, rng) -> np.ndarray:
    T, L = logB.shape
    msg = _backward_messages(pi, logB)
    # Per-frame weights exp(logB + msg), max-shifted per row; the forward
    # conditional at t is then proportional to pi[z_{t-1}] * weights[t].
    q = logB + msg
    shift = q.max(axis=1)
    if np.any(shift == -np.inf) or np.isnan(shift).any():
        raise NumericalUnderflow("zero probability for every state")
    weights = np.exp(q - shift[:, None])
    us = rng.random(T)
    labels = np.empty(T, dtype=np.int64)
    prev = -1
    for t in range(T):
        p = (init if t == 0 else pi[prev]) * weights[t]
        cum = np.cumsum(p)
        total = cum[-1]
        if not total > 0:
            raise NumericalUnderflow("zero probability for every state")
        prev = min(int(np.searchsorted(cum, us[t] * total, side="right")), L - 1)
        labels[t] = prev
    return labels


def sample_labels(features, pi: np.ndarray, sigmas: np.ndarray,
                  init: np.ndarray, rng) -> list[np.ndarray]:
    """Blocked draw of the whole label sequence from its exact conditional,
    one array per input sequence."""
    seqs = as_sequences(features)
    return [_sample_labels_one(_emission_loglik(vals, sigmas), pi, init, rng)
            for vals in seqs]


def loglik(features, pi: np.ndarray, sigmas: np.ndarray, init: np.ndarray) -> float:
    """Exact marginal log-likelihood via the scaled forward recursion;
    independent sequences restart from ``init`` and their logs add."""
    seqs = as_sequences(features)
    total = 0.0
    for vals in seqs:
        logB = _emission_loglik(vals, sigmas)
        shift = logB.max(axis=1)
        if np.any(shift == -np.inf):
            raise NumericalUnderflow("an observation has zero density under every state")
        B = np.exp(logB - shift[:, None])
        logc = np.empty(vals.shape[0])
        alpha = init * B[0]
        for t in range(1, vals.shape[0]):
            c = alpha.sum()
            if not c > 0:
                raise NumericalUnderflow(f"forward recursion underflow at t={t - 1}")
            logc[t - 1] = np.log(c)
            alpha = ((alpha / c) @ pi) * B[t]
        c = alpha.sum()
        if not c > 0:
            raise NumericalUnderflow("forward recursion underflow at the last step")
        logc[-1] = np.log(c)
        total += logc.sum() + shift.sum()
    return float(total)


# auxiliary counts and global weights ---------------------------------------

def sample_aux_counts(n: np.ndarray, beta: np.ndarray, hyper: HdpHmmHyper, rng
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Table counts m, sticky override counts w, and the adjusted counts
    m_bar that inform the global weights.

    m[j, k] counts Bernoulli successes with p_i = c / (i - 1 + c) over
    i = 1..n[j, k], where c = alpha beta_k (+ kappa on the diagonal);
    w[j] ~ Binomial(m[j, j], rho / (rho + beta_j (1 - rho))).
    """
    L = hyper.L
    m = np.zeros((L, L), dtype=np.int64)
    for j in range(L):
        for k in range(L):
            njk = int(n[j, k])
            if njk == 0:
                continue
            c = hyper.alpha * beta[k] + (hyper.kappa if j == k else 0.0)
            idx = np.arange(njk, dtype=np.float64)
            p = c / (idx + c)
            m[j, k] = int((rng.random(njk) < p).sum())
    w = np.zeros(L, dtype=np.int64)
    if hyper.rho > 0:
        for j in range(L):
            if m[j, j] > 0:
                p_override = hyper.rho / (hyper.rho + beta[j] * (1.0 - hyper.rho))
                w[j] = rng.binomial(m[j, j], p_override)
    m_bar = m.copy()
    m_bar[np.diag_indices(L)] -= w
    return m, w, m_bar


def sample_beta(m_bar: np.ndarray, gamma: float, rng) -> np.ndarray:
    """Global weights from Dirichlet(gamma/L + column sums of m_bar)."""
    L = m_bar.shape[0]
    return _dirichlet(gamma / L + m_bar.sum(axis=0), rng)


def resample_hyperparameters(state: HdpHmmState, hyper: HdpHmmHyper, rng) -> HdpHmmHyper:
    """Auxiliary-variable updates for the DP concentrations and a Beta
    update for the sticky fraction rho; a no-op unless enabled."""
    if not hyper.hyper_resampling:
        return hyper

    # gamma: top-level DP with m_bar tables as customers and the occupied
    # states as distinct dishes (Escobar-West auxiliary update).
    a, b = hyper.gamma_prior
    n_top = float(state.m_bar.sum())
    k_top = int((state.m_bar.sum(axis=0) > 0).sum())
    if n_top > 0 and k_top > 0:
        eta = rng.beta(hyper.gamma + 1.0, n_top)
        rate = b - np.log(eta)
        odds = (a + k_top - 1.0) / (n_top * rate)
        shape = a + k_top if rng.random() < odds / (1.0 + odds) else a + k_top - 1.0
        gamma = float(rng.gamma(shape=shape, scale=1.0 / rate))
    else:
        gamma = float(rng.gamma(shape=a, scale=1.0 / b))

    # alpha + kappa: concentration shared by the L row DPs; customers per
    # restaurant from n, tables from m.
    a2, b2 = hyper.ak_prior
    n_rows = state.n.sum(axis=1).astype(np.float64)
    total_tables = float(state.m.sum())
    active = n_rows > 0
    if active.any() and total_tables > 0:
        r = rng.beta(hyper.alpha_plus_kappa + 1.0, n_rows[active])
        s = rng.random(active.sum()) < n_rows[active] / (n_rows[active] + hyper.alpha_plus_kappa)
        shape = a2 + total_tables - float(s.sum())
        rate = b2 - float(np.log(r).sum())
        alpha_plus_kappa = float(rng.gamma(shape=shape, scale=1.0 / rate))
    else:
        alpha_plus_kappa = float(rng.gamma(shape=a2, scale=1.0 / b2))

    # rho: every table is an override candidate; overrides happened w times
    # among the m total tables.
    c, d = hyper.rho_prior
    w_total = float(state.w.sum())
    rho = float(rng.beta(c + w_total, d + max(total_tables - w_total, 0.0)))
    rho = min(rho, 1.0 - 1e-12)

    return replace(hyper, gamma=gamma, alpha_plus_kappa=alpha_plus_kappa, rho=rho)


# the sweep and the fitting loop ---------------------------------------------

def init_state(features, hyper: HdpHmmHyper, rng) -> HdpHmmState:
    """Prior draw of all blocks (labels start from one blocked sample)."""
    seqs = as_sequences(features)
    d = seqs[0].shape[1]
    nu0, S0 = hyper.emission_prior(d)
    beta = stick_breaking(hyper.gamma, hyper.L, rng)
    nzero = np.zeros(hyper.L)
    pi = np.vstack([sample_pi(beta, nzero, j, hyper, rng) for j in range(hyper.L)])
    sigmas = np.empty((hyper.L, d, d))
    for k in range(hyper.L):
        draw = invwishart.rvs(df=nu0, scale=S0, random_state=rng)
        sigmas[k] = (draw + draw.T) / 2
    z = sample_labels(seqs, pi, sigmas, beta, rng)
    n = transition_counts(z, hyper.L)
    m, w, m_bar = sample_aux_counts(n, beta, hyper, rng)
    return HdpHmmState(beta=beta, pi=pi, sigmas=sigmas, z=z, n=n, m=m, w=w,
                       m_bar=m_bar, loglik=loglik(seqs, pi, sigmas, beta))


def gibbs_sweep(state: HdpHmmState, features, hyper: HdpHmmHyper, rng) -> HdpHmmState:
    """One blocked sweep: labels, counts, auxiliary counts, global weights,
    transition rows, emission covariances; records the exact marginal
    log-likelihood of the refreshed parameters."""
    seqs = as_sequences(features)
    z = sample_labels(seqs, state.pi, state.sigmas, state.beta, rng)
    n = transition_counts(z, hyper.L)
    m, w, m_bar = sample_aux_counts(n, state.beta, hyper, rng)
    beta = sample_beta(m_bar, hyper.gamma, rng)
    pi = np.vstack([sample_pi(beta, n[j], j, hyper, rng) for j in range(hyper.L)])
    sigmas = sample_emissions(seqs, z, hyper, rng)
    return HdpHmmState(beta=beta, pi=pi, sigmas=sigmas, z=z, n=n, m=m, w=w,
                       m_bar=m_bar, loglik=loglik(seqs, pi, sigmas, beta))


def occupancy(state: HdpHmmState) -> np.ndarray:
    labels = state.labels_concat()
    return np.bincount(labels, minlength=state.L)


def effective_state_count(state: HdpHmmState,
                          threshold: float = OCCUPANCY_THRESHOLD) -> int:
    """Number of states holding strictly more than the threshold share of
    all labels."""
    counts = occupancy(state)
    total = counts.sum()
    return int((counts > threshold * total).sum()) if total else 0


def fit(features, hyper: HdpHmmHyper = HdpHmmHyper(), iterations: int = 500,
        rng=None) -> tuple[dict, list[float], HdpHmmState]:
    """Run the sampler and return (chain summary, log-likelihood history,
    final state). ``rng`` may be a seed or a numpy Generator."""
    rng = np.random.default_rng(rng)
    seqs = as_sequences(features)
    state = init_state(seqs, hyper, rng)
    history: list[float] = []
    effective: list[int] = []
    for _ in range(iterations):
        state = gibbs_sweep(state, seqs, hyper, rng)
        if hyper.hyper_resampling:
            hyper = resample_hyperparameters(state, hyper, rng)
        history.append(state.loglik)
        effective.append(effective_state_count(state))
    counts = occupancy(state)
    summary = {
        "iterations": iterations,
        "loglik": [float(v) for v in history],
        "effective_states": effective,
        "effective_state_count": effective[-1] if effective else 0,
        "final_beta": state.beta.tolist(),
        "final_pi": state.pi.tolist(),
        "occupancy": {int(k): int(v) for k, v in enumerate(counts) if v > 0},
        "hyper": {"gamma": hyper.gamma, "alpha_plus_kappa": hyper.alpha_plus_kappa,
                  "rho": hyper.rho, "L": hyper.L},
    }
    return summary, history, state

"""Mixture model with global per-variable selection indicators.

Variable j is relevant with probability c_j = E[gamma_j]; irrelevant variables
follow a fixed null distribution phi0 estimated from the pooled data.
gamma_j ~ Bernoulli(delta_j), delta_j ~ Beta(a, a); the variational factor
for delta_j is Beta(c_j + a, 1 - c_j + a).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betaln, digamma, expit, xlogy

from .data import CategoricalDataset
from .merdel import CoreEngine, FittedModel, MerDelConfig, run_merdel
from .model import (
    Priors,
    _combine,
    _segment_sum,
    assignment_entropy,
    category_counts,
    e_step_with_entropy,
    elbo_terms,
    expected_log_phi,
    m_step,
)

PHI0_FLOOR = 1e-10
SELECTION_THRESHOLD = 0.5
DEFAULT_WARMUP = 5


@dataclass
class SelectionState:
    """c (selection probabilities), null-model probabilities and the q(delta) parameters."""

    c: np.ndarray
    phi0: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray

    @classmethod
    def initial(cls, phi0: np.ndarray, n_vars: int, a: float) -> "SelectionState":
        c = np.ones(n_vars)
        return cls(c, phi0, np.zeros(n_vars), np.full(n_vars, -np.inf), c + a, 1.0 - c + a)

    def selected(self, threshold: float = SELECTION_THRESHOLD) -> np.ndarray:
        return self.c > threshold

    def copy(self) -> "SelectionState":
        return replace(self, c=self.c.copy(), eta1=self.eta1.copy(), eta2=self.eta2.copy(),
                       delta_a=self.delta_a.copy(), delta_b=self.delta_b.copy())


def null_params(data: CategoricalDataset) -> np.ndarray:
    """Per-variable category frequencies (flattened layout), floored at 1e-10 and renormalised."""
    if data.n_rows == 0:
        raise ValueError("null_params needs at least one row")
    freq = data.category_totals() / data.n_rows
    freq = np.maximum(freq, PHI0_FLOOR)
    return freq / np.repeat(_segment_sum(freq, data.cardinalities), data.cardinalities)


def e_step_vs(data: CategoricalDataset, alpha_star, eps_star, c, phi0) -> np.ndarray:
    """Responsibilities with c-weighted emission log-densities.

    The null-model contribution (1 - c_j) ln phi0 does not depend on the
    cluster and cancels in the normalisation.
    """
    return e_step_with_entropy(data, alpha_star, eps_star, weights=c)[0]


def m_step_vs(data: CategoricalDataset, resp, c, priors: Priors):
    """M step with category counts for variable j scaled by c_j."""
    return m_step(data, resp, priors.resolve(data.cardinalities), weights=c)


def selection_update(cluster_loglik, null_loglik, c_old, a: float) -> SelectionState:
    """q(delta) from ``c_old``, then c from the per-variable log-likelihood evidence.

    ``cluster_loglik[j]`` is sum_n sum_k r_nk E[ln phi_kj x_nj]; ``null_loglik[j]``
    is sum_n ln phi0_j x_nj. The returned state has an empty ``phi0``.
    """
    c_old = np.asarray(c_old, dtype=np.float64)
    delta_a, delta_b = c_old + a, 1.0 - c_old + a
    norm = digamma(delta_a + delta_b)
    log_eta1 = np.asarray(cluster_loglik, dtype=np.float64) + digamma(delta_a) - norm
    log_eta2 = np.asarray(null_loglik, dtype=np.float64) + digamma(delta_b) - norm
    c = expit(log_eta1 - log_eta2)
    return SelectionState(c, np.empty(0), log_eta1, log_eta2, delta_a, delta_b)


def gamma_delta_update(data: CategoricalDataset, resp, eps_star, phi0, priors: Priors,
                       selection: SelectionState | None = None) -> SelectionState:
    """Update q(delta) from the current c, then q(gamma) given the new q(delta)."""
    resp = np.asarray(resp, dtype=np.float64)
    c_old = selection.c if selection is not None else np.ones(data.n_vars)
    counts = category_counts(data, resp)
    elogphi = expected_log_phi(eps_star, data.cardinalities)
    cluster_ll = _segment_sum(np.sum(counts * elogphi, axis=0), data.cardinalities)
    null_ll = _segment_sum(data.category_totals() * np.log(phi0), data.cardinalities)
    return replace(selection_update(cluster_ll, null_ll, c_old, priors.a), phi0=phi0)


def selection_terms(selection: SelectionState, priors: Priors) -> dict[str, float]:
    """ELBO terms that involve gamma and delta only."""
    c, a = selection.c, priors.a
    da, db = selection.delta_a, selection.delta_b
    norm = digamma(da + db)
    e_ld = digamma(da) - norm
    e_l1d = digamma(db) - norm
    return {
        "log_p_gamma": float(np.sum(c * e_ld + (1.0 - c) * e_l1d)),
        "log_p_delta": float(np.sum(-betaln(a, a) + (a - 1.0) * (e_ld + e_l1d))),
        "log_q_gamma": float(np.sum(xlogy(c, c) + xlogy(1.0 - c, 1.0 - c))),
        "log_q_delta": float(np.sum(-betaln(da, db) + (da - 1.0) * e_ld + (db - 1.0) * e_l1d)),
    }


def elbo_vs(data: CategoricalDataset, resp, alpha_star, eps_star, selection: SelectionState,
            priors: Priors, k_total_for_prior: int, entropy: float | None = None, counts=None) -> float:
    """Full ELBO of the selection model.

    The emission term is split into the c-weighted cluster part and the
    (1 - c)-weighted null part; ``counts`` are unweighted per-category counts.
    """
    priors = priors.resolve(data.cardinalities)
    resp = np.asarray(resp, dtype=np.float64)
    if counts is None:
        counts = category_counts(data, resp)
    if entropy is None:
        entropy = assignment_entropy(resp)
    card = data.cardinalities
    c_flat = np.repeat(selection.c, card)
    T = resp.sum(axis=0)
    terms = elbo_terms(T, counts * c_flat[None, :], alpha_star, eps_star, priors, card, entropy,
                       k_total_for_prior)
    null_part = float(np.sum((1.0 - c_flat) * data.category_totals() * np.log(selection.phi0)))
    sel = selection_terms(selection, priors)
    return (_combine(terms) + null_part + sel["log_p_gamma"] + sel["log_p_delta"]
            - sel["log_q_gamma"] - sel["log_q_delta"])


class SelectionEngine(CoreEngine):
    """Plugs the selection model into the MerDel loop; c is frozen during moves.

    The gamma/delta update is skipped for the first ``warmup`` M steps (c stays
    at 1). Starting it on the k-modes initialisation lets weakly separated
    relevant variables fall to c = 0, which is absorbing: the M step then
    ignores them and their evidence never recovers.
    """

    def __init__(self, priors: Priors, data: CategoricalDataset, k_total_for_prior: int,
                 warmup: int = DEFAULT_WARMUP):
        super().__init__(priors, data.cardinalities, k_total_for_prior)
        self.selection = SelectionState.initial(null_params(data), data.n_vars, self.priors.a)
        self.warmup = warmup
        self._m_steps = 0

    def e(self, data, alpha_star, eps_star):
        return e_step_with_entropy(data, alpha_star, eps_star, weights=self.selection.c)

    def m(self, data, resp):
        return m_step(data, resp, self.priors, weights=self.selection.c)

    def elbo(self, data, resp, entropy, alpha_star, eps_star) -> float:
        return elbo_vs(data, resp, alpha_star, eps_star, self.selection, self.priors, self.k_total, entropy)

    def settled(self) -> bool:
        return self._m_steps > self.warmup

    def after_m(self, data, resp, alpha_star, eps_star) -> None:
        self._m_steps += 1
        if self._m_steps <= self.warmup:
            return
        self.selection = gamma_delta_update(data, resp, eps_star, self.selection.phi0, self.priors,
                                            self.selection)


def fit_merdel_vs(data: CategoricalDataset, config: MerDelConfig | None = None,
                  priors: Priors | None = None, warmup: int = DEFAULT_WARMUP) -> FittedModel:
    """MerDel with variable selection; ``fitted.selection`` holds the final SelectionState."""
    config = config or MerDelConfig()
    priors = (priors or Priors()).resolve(data.cardinalities)
    rng = np.random.default_rng(config.seed)
    eng = SelectionEngine(priors, data, config.k_init, warmup)
    fitted = run_merdel(data, config, eng, rng)
    fitted.selection = eng.selection
    return fitted

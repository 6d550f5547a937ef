"""Variational Bayesian finite mixture of categorical distributions.

Cluster emission parameters are stored flattened: for K clusters over P
variables with L_j categories each, ``eps_star`` has shape (K, sum L_j) and
variable j occupies columns ``offsets[j]:offsets[j+1]``. Clusters that have
been pruned ("zombies") are not stored; their posterior equals the prior and
they enter the objective only through ``k_total_for_prior``, the dimension of
the symmetric Dirichlet prior on the mixture weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from . import kernels
from .data import CategoricalDataset
from .errors import ContractError, DomainError, InconsistencyError, NumericalError

DEFAULT_ALPHA0 = 0.01
DEFAULT_A = 2.0
DEFAULT_TOL = 5e-7
DEFAULT_MAX_ITERS = 1000
ENTROPY_FLOOR = 1e-300


@dataclass(frozen=True)
class Priors:
    """Symmetric Dirichlet concentrations and the Beta parameter for variable selection.

    ``epsilon`` is per variable; ``None`` means 1/L_j once cardinalities are known.
    """

    alpha0: float = DEFAULT_ALPHA0
    epsilon: tuple[float, ...] | None = None
    a: float = DEFAULT_A

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise DomainError("alpha0 must be positive")
        if not self.a > 0:
            raise DomainError("a must be positive")
        if self.epsilon is not None:
            eps = tuple(float(e) for e in self.epsilon)
            if any(not e > 0 for e in eps):
                raise DomainError("epsilon must be positive")
            object.__setattr__(self, "epsilon", eps)

    def resolve(self, cardinalities) -> "Priors":
        """Return priors with ``epsilon`` filled in for the given cardinalities."""
        card = np.asarray(cardinalities)
        if self.epsilon is None:
            return replace(self, epsilon=tuple((1.0 / card).tolist()))
        if len(self.epsilon) != len(card):
            raise ContractError("epsilon length does not match the number of variables")
        return self

    def epsilon_flat(self, cardinalities) -> np.ndarray:
        card = np.asarray(cardinalities)
        eps = np.asarray(self.resolve(card).epsilon, dtype=np.float64)
        return np.repeat(eps, card)


@dataclass
class SufficientStats:
    T: np.ndarray
    S: np.ndarray


@dataclass
class VariationalState:
    resp: np.ndarray
    alpha_star: np.ndarray
    eps_star: np.ndarray
    k_init: int
    elbo_trace: list[float] = field(default_factory=list)
    entropy: float | None = None

    @property
    def n_clusters(self) -> int:
        return self.alpha_star.shape[0]

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.resp.copy(), self.alpha_star.copy(), self.eps_star.copy(),
            self.k_init, list(self.elbo_trace), self.entropy,
        )


def _segment_sum(arr: np.ndarray, cardinalities) -> np.ndarray:
    offsets = np.concatenate([[0], np.cumsum(cardinalities)[:-1]]).astype(np.int64)
    return np.add.reduceat(arr, offsets, axis=-1)


def _default_card(eps_star: np.ndarray, cardinalities):
    if cardinalities is None:
        return np.array([eps_star.shape[-1]])
    return np.asarray(cardinalities)


def expected_log_pi(alpha_star, n_zombies: int = 0, alpha0: float = DEFAULT_ALPHA0) -> np.ndarray:
    """E[ln pi_k] under Dirichlet(alpha_star), optionally padded with prior-only clusters."""
    alpha_star = np.asarray(alpha_star, dtype=np.float64)
    if np.any(~(alpha_star > 0)):
        raise DomainError("alpha_star entries must be positive")
    total = alpha_star.sum() + n_zombies * alpha0
    return digamma(alpha_star) - digamma(total)


def expected_log_phi(eps_star, cardinalities=None) -> np.ndarray:
    """E[ln phi_kjl] = psi(eps*_kjl) - psi(sum_l eps*_kjl), in the flattened layout.

    Without ``cardinalities`` the last axis is treated as a single variable.
    """
    eps_star = np.asarray(eps_star, dtype=np.float64)
    if np.any(~(eps_star > 0)):
        raise DomainError("eps_star entries must be positive")
    card = _default_card(eps_star, cardinalities)
    totals = _segment_sum(eps_star, card)
    return digamma(eps_star) - np.repeat(digamma(totals), card, axis=-1)


def _log_beta(eps: np.ndarray, cardinalities) -> np.ndarray:
    """ln B(v) per variable segment along the last axis."""
    return _segment_sum(gammaln(eps), cardinalities) - gammaln(_segment_sum(eps, cardinalities))


def _check_shapes(data: CategoricalDataset, alpha_star, eps_star):
    if eps_star.ndim != 2 or eps_star.shape != (alpha_star.shape[0], data.n_columns):
        raise ContractError(
            f"eps_star shape {eps_star.shape} inconsistent with K={alpha_star.shape[0]} "
            f"and {data.n_columns} category columns"
        )


def e_step_with_entropy(data: CategoricalDataset, alpha_star, eps_star, weights=None, log_prior_pi=None):
    """Responsibilities and their entropy sum_nk r ln r.

    ``weights`` scales each variable's log-emission (variable selection);
    ``log_prior_pi`` overrides E[ln pi].
    """
    alpha_star = np.asarray(alpha_star, dtype=np.float64)
    eps_star = np.asarray(eps_star, dtype=np.float64)
    _check_shapes(data, alpha_star, eps_star)
    elogpi = expected_log_pi(alpha_star) if log_prior_pi is None else np.asarray(log_prior_pi, dtype=np.float64)
    elogphi = expected_log_phi(eps_star, data.cardinalities)
    if weights is not None:
        elogphi = elogphi * np.repeat(np.asarray(weights, dtype=np.float64), data.cardinalities)[None, :]
    resp, entropy = kernels.estep(data.idx, np.ascontiguousarray(elogpi), np.ascontiguousarray(elogphi.T))
    if not np.isfinite(entropy):
        raise NumericalError("non-finite responsibilities")
    return resp, entropy


def e_step(data: CategoricalDataset, alpha_star, eps_star) -> np.ndarray:
    """Variational E step, normalised in log space with per-row max subtraction."""
    return e_step_with_entropy(data, alpha_star, eps_star)[0]


def category_counts(data: CategoricalDataset, resp) -> np.ndarray:
    """S[k, c] = sum_n r_nk I(observation n has flattened category c)."""
    resp = np.ascontiguousarray(resp, dtype=np.float64)
    if resp.ndim != 2 or resp.shape[0] != data.n_rows:
        raise ContractError(f"responsibilities shape {resp.shape} does not match {data.n_rows} rows")
    return kernels.category_counts(data.idx, resp, data.n_columns).T.copy()


def m_step(data: CategoricalDataset, resp, priors: Priors, weights=None):
    """Variational M step: alpha* = alpha0 + T, eps* = eps + S (S scaled by ``weights`` per variable)."""
    counts = category_counts(data, resp)
    T = np.asarray(resp).sum(axis=0)
    if weights is not None:
        counts = counts * np.repeat(np.asarray(weights, dtype=np.float64), data.cardinalities)[None, :]
    alpha_star = priors.alpha0 + T
    eps_star = priors.epsilon_flat(data.cardinalities)[None, :] + counts
    return alpha_star, eps_star


def assignment_entropy(resp) -> float:
    """sum_n sum_k r_nk ln r_nk with 0 ln 0 = 0 (values below 1e-300 count as 0)."""
    resp = np.asarray(resp, dtype=np.float64)
    clipped = np.where(resp < ENTROPY_FLOOR, 0.0, resp)
    return float(xlogy(clipped, clipped).sum())


def suff_stats(alpha_star, eps_star, priors: Priors, cardinalities) -> SufficientStats:
    """T and S recovered linearly from the variational parameters."""
    T = np.asarray(alpha_star, dtype=np.float64) - priors.alpha0
    S = np.asarray(eps_star, dtype=np.float64) - priors.epsilon_flat(cardinalities)[None, :]
    if T.size and T.min() < -1e-9 or S.size and S.min() < -1e-9:
        raise InconsistencyError("variational parameters fall below the prior")
    return SufficientStats(np.maximum(T, 0.0), np.maximum(S, 0.0))


def elbo_terms(T, S, alpha_star, eps_star, priors: Priors, cardinalities, entropy: float,
               k_total_for_prior: int) -> dict[str, float]:
    """The seven ELBO terms, named after the expectation each one is."""
    alpha_star = np.asarray(alpha_star, dtype=np.float64)
    eps_star = np.asarray(eps_star, dtype=np.float64)
    card = np.asarray(cardinalities)
    k_live = alpha_star.shape[0]
    n_zombies = int(k_total_for_prior) - k_live
    if n_zombies < 0:
        raise ContractError(f"k_total_for_prior={k_total_for_prior} below live cluster count {k_live}")
    a0 = priors.alpha0
    eps0 = priors.epsilon_flat(card)

    elogpi = expected_log_pi(alpha_star, n_zombies, a0)
    elogpi_zombie = float(digamma(a0) - digamma(alpha_star.sum() + n_zombies * a0))
    elogphi = expected_log_phi(eps_star, card)

    log_b_prior_pi = k_total_for_prior * gammaln(a0) - gammaln(k_total_for_prior * a0)
    log_b_post_pi = gammaln(alpha_star).sum() + n_zombies * gammaln(a0) - gammaln(alpha_star.sum() + n_zombies * a0)
    log_b_prior_phi = _log_beta(eps0, card).sum()
    log_b_post_phi = _log_beta(eps_star, card).sum(axis=-1)

    return {
        "log_p_x": float(np.sum(S * elogphi)),
        "log_p_z": float(np.dot(T, elogpi)),
        "log_p_pi": float(-log_b_prior_pi + (a0 - 1.0) * (elogpi.sum() + n_zombies * elogpi_zombie)),
        "log_p_phi": float(np.sum(-log_b_prior_phi + ((eps0[None, :] - 1.0) * elogphi).sum(axis=-1))),
        "log_q_z": float(entropy),
        "log_q_pi": float(-log_b_post_pi + np.dot(alpha_star - 1.0, elogpi) + n_zombies * (a0 - 1.0) * elogpi_zombie),
        "log_q_phi": float(np.sum(-log_b_post_phi + ((eps_star - 1.0) * elogphi).sum(axis=-1))),
    }


def _combine(terms: dict[str, float]) -> float:
    return (terms["log_p_x"] + terms["log_p_z"] + terms["log_p_pi"] + terms["log_p_phi"]
            - terms["log_q_z"] - terms["log_q_pi"] - terms["log_q_phi"])


def elbo_from_stats(stats: SufficientStats, alpha_star, eps_star, priors: Priors, cardinalities,
                    entropy_total: float, k_total_for_prior: int) -> float:
    """ELBO from sufficient statistics; no pass over the data."""
    return _combine(elbo_terms(stats.T, stats.S, alpha_star, eps_star, priors, cardinalities,
                               entropy_total, k_total_for_prior))


def elbo_direct(data: CategoricalDataset, resp, alpha_star, eps_star, priors: Priors,
                k_total_for_prior: int) -> float:
    """ELBO with T, S and the entropy computed from the responsibility matrix."""
    resp = np.asarray(resp, dtype=np.float64)
    alpha_star = np.asarray(alpha_star, dtype=np.float64)
    eps_star = np.asarray(eps_star, dtype=np.float64)
    _check_shapes(data, alpha_star, eps_star)
    if resp.shape != (data.n_rows, alpha_star.shape[0]):
        raise ContractError(f"responsibilities shape {resp.shape} inconsistent with parameters")
    T = resp.sum(axis=0)
    S = category_counts(data, resp)
    return _combine(elbo_terms(T, S, alpha_star, eps_star, priors, data.cardinalities,
                               assignment_entropy(resp), k_total_for_prior))


def check_convergence(elbo_trace, tol: float = DEFAULT_TOL, window: int = 3) -> bool:
    """True when each of the last ``window`` increments is below ``tol`` relative to |ELBO|."""
    if len(elbo_trace) < window + 1:
        return False
    tail = np.asarray(elbo_trace[-(window + 1):], dtype=np.float64)
    increments = np.abs(np.diff(tail))
    scale = np.maximum(np.abs(tail[1:]), np.finfo(float).tiny)
    return bool(np.all(increments / scale < tol))

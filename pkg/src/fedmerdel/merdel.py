"""Variational EM with merge and delete moves (MerDel).

The fit alternates ``laps`` plain EM cycles with one merge proposal and one
delete proposal. Moves are accepted only on a strict ELBO increase; rejected
moves leave the state untouched. Clusters whose expected size drops below
``zombie_threshold`` after an accepted move are pruned; they still count in
the prior dimension ``k_init``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import CategoricalDataset
from .errors import ContractError
from .model import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    Priors,
    VariationalState,
    _log_beta,
    assignment_entropy,
    check_convergence,
    e_step_with_entropy,
    elbo_from_stats,
    expected_log_phi,
    m_step,
    suff_stats,
)

log = logging.getLogger(__name__)

CRITERIA = ("correlation", "kl", "bhattacharyya", "random")
NEVER = None


@dataclass(frozen=True)
class MerDelConfig:
    """Training options. ``laps=None`` (or "never") disables moves entirely."""

    k_init: int = 20
    laps: int | None = 5
    merge_criterion: str = "correlation"
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = 0
    candidate_pool: int = 3
    correlation_floor: float = 0.05
    delete_small_fraction: float = 0.05
    zombie_threshold: float = 1e-6
    live_threshold: float = 0.5
    kmodes_sweeps: int = 10
    max_consecutive_rejections: int = 10

    def __post_init__(self):
        if isinstance(self.laps, str):
            if self.laps.lower() != "never":
                raise ContractError(f"laps must be an integer or 'never', got {self.laps!r}")
            object.__setattr__(self, "laps", None)
        if self.laps is not None and self.laps < 0:
            raise ContractError("laps must be >= 0")
        if self.k_init < 1:
            raise ContractError("k_init must be >= 1")
        if self.candidate_pool < 1:
            raise ContractError("candidate_pool must be >= 1")
        if not 0 < self.delete_small_fraction < 1:
            raise ContractError("delete_small_fraction must lie in (0, 1)")
        if self.merge_criterion not in CRITERIA:
            raise ContractError(f"unknown merge criterion {self.merge_criterion!r}")
        if not self.tol > 0:
            raise ContractError("tol must be positive")


@dataclass(frozen=True)
class MoveRecord:
    kind: str
    clusters: tuple[int, ...]
    accepted: bool
    delta: float


@dataclass
class FittedModel:
    state: VariationalState
    labels: np.ndarray
    live_clusters: int
    elbo_final: float
    move_log: list[MoveRecord] = field(default_factory=list)
    converged: bool = False
    n_iters: int = 0
    selection: object | None = None

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.state.resp.sum(axis=0)


class CoreEngine:
    """E step, M step and ELBO of the plain mixture model for one dataset."""

    def __init__(self, priors: Priors, cardinalities, k_total_for_prior: int):
        self.priors = priors.resolve(cardinalities)
        self.cardinalities = np.asarray(cardinalities)
        self.k_total = int(k_total_for_prior)

    def e(self, data, alpha_star, eps_star):
        return e_step_with_entropy(data, alpha_star, eps_star)

    def m(self, data, resp):
        return m_step(data, resp, self.priors)

    def elbo(self, data, resp, entropy, alpha_star, eps_star) -> float:
        stats = suff_stats(alpha_star, eps_star, self.priors, self.cardinalities)
        return elbo_from_stats(stats, alpha_star, eps_star, self.priors, self.cardinalities,
                               entropy, self.k_total)

    def after_m(self, data, resp, alpha_star, eps_star) -> None:
        """Hook for updates placed after the M step (variable selection)."""

    def settled(self) -> bool:
        """False while the engine still has pending updates that block convergence."""
        return True

    def state_from_resp(self, data, resp, k_init, trace=()) -> VariationalState:
        alpha_star, eps_star = self.m(data, resp)
        entropy = assignment_entropy(resp)
        return VariationalState(np.ascontiguousarray(resp, dtype=np.float64), alpha_star, eps_star,
                                k_init, list(trace), entropy)

    def state_elbo(self, data, state: VariationalState) -> float:
        return self.elbo(data, state.resp, state.entropy, state.alpha_star, state.eps_star)

    def cycle(self, data, state: VariationalState) -> VariationalState:
        resp, entropy = self.e(data, state.alpha_star, state.eps_star)
        alpha_star, eps_star = self.m(data, resp)
        self.after_m(data, resp, alpha_star, eps_star)
        return VariationalState(resp, alpha_star, eps_star, state.k_init, state.elbo_trace, entropy)


# ---------------------------------------------------------------------------
# initialisation


def _cluster_modes(data: CategoricalDataset, labels: np.ndarray, k: int, modes: np.ndarray) -> np.ndarray:
    onehot = np.zeros((data.n_rows, k))
    onehot[np.arange(data.n_rows), labels] = 1.0
    counts = kernels.category_counts(data.idx, onehot, data.n_columns).T
    new = modes.copy()
    sizes = onehot.sum(axis=0)
    for j in range(data.n_vars):
        seg = counts[:, data.offsets[j]:data.offsets[j + 1]]
        new[:, j] = np.where(sizes > 0, np.argmax(seg, axis=1), modes[:, j])
    return new


def kmodes_init(data: CategoricalDataset, k_init: int, seed=0, max_sweeps: int = 10) -> np.ndarray:
    """Huang-style k-modes; returns one-hot responsibilities (empty clusters allowed)."""
    n = data.n_rows
    if k_init > n:
        raise ContractError(f"k_init={k_init} exceeds the number of rows {n}")
    if k_init < 1:
        raise ContractError("k_init must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = np.ascontiguousarray(data.values, dtype=np.int32)
    distinct = np.unique(values, axis=0)
    if len(distinct) >= k_init:
        modes = distinct[np.sort(rng.choice(len(distinct), size=k_init, replace=False))]
        modes = modes[rng.permutation(k_init)]
    else:
        extra = values[rng.choice(n, size=k_init - len(distinct), replace=False)]
        modes = np.concatenate([distinct, extra])
    modes = np.ascontiguousarray(modes, dtype=np.int32)

    labels, dists = kernels.hamming_assign(values, modes)
    for _ in range(max_sweeps):
        modes = np.ascontiguousarray(_cluster_modes(data, labels, k_init, modes), dtype=np.int32)
        new_labels, dists = kernels.hamming_assign(values, modes)
        sizes = np.bincount(new_labels, minlength=k_init)
        # re-seed empty clusters from the farthest points of clusters that can spare one
        for empty in np.flatnonzero(sizes == 0):
            order = np.argsort(-dists, kind="stable")
            for pt in order:
                if dists[pt] == 0:
                    break
                if sizes[new_labels[pt]] > 1:
                    sizes[new_labels[pt]] -= 1
                    modes[empty] = values[pt]
                    new_labels[pt] = empty
                    dists[pt] = 0
                    sizes[empty] = 1
                    break
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    resp = np.zeros((n, k_init))
    resp[np.arange(n), labels] = 1.0
    return resp


# ---------------------------------------------------------------------------
# candidate selection


def pairwise_kl(eps_star: np.ndarray, cardinalities) -> np.ndarray:
    """Symmetrised Dirichlet KL summed over variables, K x K."""
    eps_star = np.asarray(eps_star, dtype=np.float64)
    elog = expected_log_phi(eps_star, cardinalities)
    lb = _log_beta(eps_star, cardinalities).sum(axis=-1)
    self_term = np.sum(eps_star * elog, axis=1)
    cross = elog @ eps_star.T
    kl = lb[None, :] - lb[:, None] + self_term[:, None] - cross
    return 0.5 * (kl + kl.T)


def pairwise_bhattacharyya(eps_star: np.ndarray, cardinalities) -> np.ndarray:
    """Bhattacharyya distance between Dirichlet factors summed over variables, K x K."""
    eps_star = np.asarray(eps_star, dtype=np.float64)
    lb = _log_beta(eps_star, cardinalities).sum(axis=-1)
    k = eps_star.shape[0]
    out = np.empty((k, k))
    for i in range(k):
        mid = 0.5 * (eps_star[i][None, :] + eps_star)
        out[i] = -_log_beta(mid, cardinalities).sum(axis=-1) + 0.5 * (lb[i] + lb)
    np.fill_diagonal(out, 0.0)
    return out


def pairwise_correlation(eps_star: np.ndarray, cardinalities) -> np.ndarray:
    """Pearson correlation of first-category concentrations, K x K (NaN -> -inf)."""
    card = np.asarray(cardinalities)
    first = np.asarray(eps_star)[:, np.concatenate([[0], np.cumsum(card)[:-1]])]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(first) if first.shape[0] > 1 else np.ones((1, 1))
    return np.where(np.isfinite(corr), corr, -np.inf)


def effective_criterion(criterion: str, cardinalities) -> str:
    if criterion == "correlation" and not np.all(np.asarray(cardinalities) == 2):
        return "kl"
    return criterion


def pair_scores(eps_star, cardinalities, criterion: str) -> tuple[np.ndarray, bool]:
    """Score matrix and whether higher is better."""
    criterion = effective_criterion(criterion, cardinalities)
    if criterion == "correlation":
        return pairwise_correlation(eps_star, cardinalities), True
    if criterion == "kl":
        return pairwise_kl(eps_star, cardinalities), False
    if criterion == "bhattacharyya":
        return pairwise_bhattacharyya(eps_star, cardinalities), False
    k = np.asarray(eps_star).shape[0]
    return np.zeros((k, k)), True


def merge_candidates(eps_star, cardinalities, criterion: str, rng, candidate_pool: int = 3,
                     correlation_floor: float = 0.05, allowed=None):
    """Pick a pair (k1 < k2) to propose for merging, or None if no pair qualifies.

    ``allowed`` optionally masks which pairs may be proposed (K x K booleans).
    """
    k = np.asarray(eps_star).shape[0]
    if k < 2:
        return None
    iu, ju = np.triu_indices(k, 1)
    mask = np.ones(iu.shape[0], dtype=bool) if allowed is None else np.asarray(allowed)[iu, ju]
    if not mask.any():
        return None
    iu, ju = iu[mask], ju[mask]
    if criterion == "random":
        pick = rng.integers(iu.shape[0])
        return int(iu[pick]), int(ju[pick])
    scores, higher_better = pair_scores(eps_star, cardinalities, criterion)
    s = scores[iu, ju]
    if effective_criterion(criterion, cardinalities) == "correlation":
        ok = s > correlation_floor
        iu, ju, s = iu[ok], ju[ok], s[ok]
        if s.size == 0:
            return None
    order = np.argsort(-s if higher_better else s, kind="stable")[:candidate_pool]
    pick = order[rng.integers(order.shape[0])]
    return int(iu[pick]), int(ju[pick])


def delete_candidate(sizes, n_rows: int, rng, small_fraction: float = 0.05, n_smallest: int = 3) -> int:
    """Uniform among clusters below ``small_fraction`` of the data, else among the smallest three."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape[0] < 2:
        raise ContractError("delete needs at least two clusters")
    small = np.flatnonzero(sizes < small_fraction * n_rows)
    if small.size == 0:
        small = np.argsort(sizes, kind="stable")[:n_smallest]
    return int(small[rng.integers(small.shape[0])])


# ---------------------------------------------------------------------------
# moves


def _engine_for(data, priors, k_total, engine):
    return engine if engine is not None else CoreEngine(priors, data.cardinalities, k_total)


def merge_move(data: CategoricalDataset, state: VariationalState, k1: int, k2: int, priors: Priors,
               k_total_for_prior: int, engine=None):
    """Propose merging k2 into k1; returns (state, accepted, elbo_delta)."""
    if k1 == k2:
        raise ContractError("merge needs two distinct clusters")
    eng = _engine_for(data, priors, k_total_for_prior, engine)
    before = eng.state_elbo(data, state)
    resp = state.resp.copy()
    resp[:, k1] += resp[:, k2]
    resp = np.ascontiguousarray(np.delete(resp, k2, axis=1))
    alpha_star, eps_star = eng.m(data, resp)
    resp, entropy = eng.e(data, alpha_star, eps_star)
    alpha_star, eps_star = eng.m(data, resp)
    after = eng.elbo(data, resp, entropy, alpha_star, eps_star)
    if after > before:
        return VariationalState(resp, alpha_star, eps_star, state.k_init, list(state.elbo_trace), entropy), True, after - before
    return state, False, after - before


def delete_proposal(data: CategoricalDataset, state: VariationalState, k: int, eng: CoreEngine):
    """State after removing cluster k and refitting; returns (state, elbo). Nothing is accepted here."""
    if state.n_clusters < 2:
        raise ContractError("deleting would leave no clusters")
    keep = np.delete(np.arange(state.n_clusters), k)
    labels = np.argmax(state.resp, axis=1)
    rows = labels != k
    subset = data if rows.all() else data.take(np.flatnonzero(rows))
    sub_resp, _ = eng.e(subset, state.alpha_star[keep], state.eps_star[keep])
    alpha_star, eps_star = eng.m(subset, sub_resp)
    resp, entropy = eng.e(data, alpha_star, eps_star)
    alpha_star, eps_star = eng.m(data, resp)
    proposed = VariationalState(resp, alpha_star, eps_star, state.k_init, list(state.elbo_trace), entropy)
    return proposed, eng.elbo(data, resp, entropy, alpha_star, eps_star)


def delete_move(data: CategoricalDataset, state: VariationalState, k: int, priors: Priors,
                k_total_for_prior: int, engine=None):
    """Propose deleting cluster k; returns (state, accepted, elbo_delta)."""
    eng = _engine_for(data, priors, k_total_for_prior, engine)
    before = eng.state_elbo(data, state)
    proposed, after = delete_proposal(data, state, k, eng)
    if after > before:
        return proposed, True, after - before
    return state, False, after - before


def prune_zombies(state: VariationalState, threshold: float = 1e-6) -> VariationalState:
    """Drop clusters with expected size below ``threshold``; rows are renormalised."""
    sizes = state.resp.sum(axis=0)
    keep = sizes >= threshold
    if keep.all() or not keep.any():
        return state
    resp = state.resp[:, keep]
    resp = np.ascontiguousarray(resp / resp.sum(axis=1, keepdims=True))
    return VariationalState(resp, state.alpha_star[keep].copy(), state.eps_star[keep].copy(),
                            state.k_init, list(state.elbo_trace), assignment_entropy(resp))


# ---------------------------------------------------------------------------
# training loop


def _move_round(data, state, config, eng, rng, moves):
    """One merge proposal then one delete proposal. Returns (state, any_accepted, n_proposed, n_rejected)."""
    accepted_any = False
    proposed = rejected = 0
    if state.n_clusters >= 2:
        pair = merge_candidates(state.eps_star, data.cardinalities, config.merge_criterion, rng,
                                config.candidate_pool, config.correlation_floor)
        if pair is not None:
            state, ok, delta = merge_move(data, state, pair[0], pair[1], eng.priors, eng.k_total, eng)
            moves.append(MoveRecord("merge", pair, ok, delta))
            proposed += 1
            if ok:
                state.elbo_trace.append(eng.state_elbo(data, state))
                state = prune_zombies(state, config.zombie_threshold)
                accepted_any = True
            else:
                rejected += 1
    if state.n_clusters >= 2:
        k = delete_candidate(state.resp.sum(axis=0), data.n_rows, rng, config.delete_small_fraction)
        state, ok, delta = delete_move(data, state, k, eng.priors, eng.k_total, eng)
        moves.append(MoveRecord("delete", (k,), ok, delta))
        proposed += 1
        if ok:
            state.elbo_trace.append(eng.state_elbo(data, state))
            state = prune_zombies(state, config.zombie_threshold)
            accepted_any = True
        else:
            rejected += 1
    return state, accepted_any, proposed, rejected


def run_merdel(data: CategoricalDataset, config: MerDelConfig, eng: CoreEngine, rng) -> FittedModel:
    """Training loop shared by the plain and variable-selection models."""
    resp0 = kmodes_init(data, config.k_init, rng, config.kmodes_sweeps)
    state = eng.state_from_resp(data, resp0, config.k_init)
    eng.after_m(data, state.resp, state.alpha_star, state.eps_star)
    state.elbo_trace.append(eng.state_elbo(data, state))
    moves: list[MoveRecord] = []
    iters = 0
    converged = False

    def step(st):
        st = eng.cycle(data, st)
        st.elbo_trace.append(eng.state_elbo(data, st))
        return st

    if config.laps is None:
        while iters < config.max_iters:
            state = step(state)
            iters += 1
            if check_convergence(state.elbo_trace, config.tol) and eng.settled():
                converged = True
                break
    elif config.laps == 0:
        state = step(state)
        iters = 1
        streak = 0
        while streak < config.max_consecutive_rejections and state.n_clusters >= 2:
            before = len(moves)
            state, _, proposed, _ = _move_round(data, state, config, eng, rng, moves)
            if proposed == 0:
                break
            for rec in moves[before:]:
                streak = 0 if rec.accepted else streak + 1
        converged = True
    else:
        while iters < config.max_iters:
            for _ in range(config.laps):
                state = step(state)
                iters += 1
                if check_convergence(state.elbo_trace, config.tol) and eng.settled():
                    break
                if iters >= config.max_iters:
                    break
            done = check_convergence(state.elbo_trace, config.tol) and eng.settled()
            state, accepted, _, _ = _move_round(data, state, config, eng, rng, moves)
            if done and not accepted:
                converged = True
                break

    sizes = state.resp.sum(axis=0)
    return FittedModel(
        state=state,
        labels=np.argmax(state.resp, axis=1),
        live_clusters=int(np.sum(sizes > config.live_threshold)),
        elbo_final=state.elbo_trace[-1],
        move_log=moves,
        converged=converged,
        n_iters=iters,
    )


def fit_merdel(data: CategoricalDataset, config: MerDelConfig | None = None, priors: Priors | None = None) -> FittedModel:
    """Fit the mixture with merge/delete moves; deterministic for a fixed ``config.seed``."""
    config = config or MerDelConfig()
    priors = (priors or Priors()).resolve(data.cardinalities)
    rng = np.random.default_rng(config.seed)
    eng = CoreEngine(priors, data.cardinalities, config.k_init)
    fitted = run_merdel(data, config, eng, rng)
    log.debug("fit done: %d iters, %d live clusters, elbo %.6f", fitted.n_iters, fitted.live_clusters,
              fitted.elbo_final)
    return fitted

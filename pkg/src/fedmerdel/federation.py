"""One-shot federated clustering (FedMerDel).

Each batch is fitted locally and reduced to a :class:`BatchSummary` holding
its variational parameters and assignment entropy. The coordinator stacks
the summaries into a :class:`GlobalModel` and merges clusters across batches.
A merge adds the two clusters' statistics, so the global ELBO can be
evaluated from the summaries alone; no data or responsibilities move.

Merging two clusters from the same batch changes the assignment entropy,
which only the owning node can compute. Such merges need an entropy
correction callback (see :class:`LocalEntropyOracle` and the transport
module); without one the search is restricted to cross-batch pairs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import CategoricalDataset
from .errors import ContractError, IncompatiblePriorsError, InconsistencyError, SchemaError
from .jsonio import sha256_hex
from .merdel import (
    CoreEngine,
    FittedModel,
    MerDelConfig,
    delete_proposal,
    fit_merdel,
    merge_candidates,
    pair_scores,
    prune_zombies,
)
from .model import (
    Priors,
    VariationalState,
    assignment_entropy,
    e_step_with_entropy,
    elbo_from_stats,
    m_step,
    suff_stats,
)

log = logging.getLogger(__name__)

SUMMARY_VERSION = 1
PRIVACY_MIN_SIZE = 5.0
SEARCHES = ("greedy", "random")

EntropyCorrector = Callable[[int, Sequence[int], Sequence[int]], float]


def prior_fingerprint(priors: Priors, cardinalities) -> str:
    """Hex SHA-256 of the canonical encoding of (alpha0, epsilon, a, P, L_j)."""
    card = np.asarray(cardinalities, dtype=np.int64)
    pr = priors.resolve(card)
    return sha256_hex({
        "alpha0": float(pr.alpha0),
        "epsilon": [float(e) for e in pr.epsilon],
        "a": float(pr.a),
        "p": int(card.size),
        "cardinalities": card.tolist(),
    })


# ---------------------------------------------------------------------------
# batch summaries


@dataclass
class BatchSummary:
    """What a node sends to the coordinator.

    ``local_labels`` and ``resp`` stay on the node (they are never
    serialised); they are kept here so the in-process path can map labels
    and answer entropy corrections.
    """

    batch_id: str
    n_obs: int
    k_init: int
    cardinalities: np.ndarray
    alpha_star: np.ndarray
    eps_star: np.ndarray
    entropy: float
    priors: Priors
    fingerprint: str
    selected_vars: np.ndarray | None = None
    flagged: tuple[int, ...] = ()
    local_labels: np.ndarray | None = field(default=None, repr=False)
    resp: np.ndarray | None = field(default=None, repr=False)

    @property
    def k_clusters(self) -> int:
        return int(self.alpha_star.shape[0])

    def check(self) -> None:
        """Raise InconsistencyError when the summary violates its invariants."""
        mass = float(np.sum(self.alpha_star - self.priors.alpha0))
        if abs(mass - self.n_obs) > 1e-4:
            raise InconsistencyError(f"batch {self.batch_id}: cluster mass {mass} != n_obs {self.n_obs}")
        if self.entropy > 1e-9:
            raise InconsistencyError(f"batch {self.batch_id}: positive entropy term {self.entropy}")
        if self.k_clusters > self.k_init:
            raise InconsistencyError(f"batch {self.batch_id}: more clusters than initialised")

    def to_dict(self) -> dict:
        offsets = np.concatenate([[0], np.cumsum(self.cardinalities)])
        eps_nested = [[row[offsets[j]:offsets[j + 1]].tolist() for j in range(len(self.cardinalities))]
                      for row in self.eps_star]
        d = {
            "version": SUMMARY_VERSION,
            "batch_id": self.batch_id,
            "n_obs": int(self.n_obs),
            "k_clusters": self.k_clusters,
            "k_init": int(self.k_init),
            "cardinalities": [int(c) for c in self.cardinalities],
            "alpha_star": self.alpha_star.tolist(),
            "eps_star": eps_nested,
            "entropy": float(self.entropy),
            "prior": {"alpha0": self.priors.alpha0, "epsilon": list(self.priors.epsilon), "a": self.priors.a},
            "fingerprint": self.fingerprint,
            "flagged": [int(k) for k in self.flagged],
        }
        if self.selected_vars is not None:
            d["selected_vars"] = [bool(v) for v in self.selected_vars]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BatchSummary":
        if not isinstance(d, dict):
            raise SchemaError("summary must be a JSON object")
        if d.get("version") != SUMMARY_VERSION:
            raise SchemaError(f"unsupported summary version {d.get('version')!r}")
        required = ("batch_id", "n_obs", "k_clusters", "k_init", "cardinalities", "alpha_star", "eps_star",
                    "entropy", "prior", "fingerprint")
        missing = [key for key in required if key not in d]
        if missing:
            raise SchemaError(f"summary lacks fields {missing}")
        try:
            card = np.asarray(d["cardinalities"], dtype=np.int64)
            alpha_star = np.asarray(d["alpha_star"], dtype=np.float64)
            rows = []
            for row in d["eps_star"]:
                if len(row) != card.size or any(len(v) != c for v, c in zip(row, card)):
                    raise SchemaError("eps_star row does not match cardinalities")
                rows.append(np.concatenate([np.asarray(v, dtype=np.float64) for v in row]))
            eps_star = np.vstack(rows) if rows else np.empty((0, int(card.sum())))
            prior = d["prior"]
            priors = Priors(float(prior["alpha0"]), tuple(prior["epsilon"]), float(prior["a"]))
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed summary: {exc}") from None
        if alpha_star.shape != (int(d["k_clusters"]),) or eps_star.shape[0] != alpha_star.shape[0]:
            raise SchemaError("k_clusters does not match parameter shapes")
        if prior_fingerprint(priors, card) != d["fingerprint"]:
            raise SchemaError("fingerprint does not match the embedded prior")
        sel = d.get("selected_vars")
        return cls(
            batch_id=str(d["batch_id"]),
            n_obs=int(d["n_obs"]),
            k_init=int(d["k_init"]),
            cardinalities=card,
            alpha_star=alpha_star,
            eps_star=eps_star,
            entropy=float(d["entropy"]),
            priors=priors.resolve(card),
            fingerprint=str(d["fingerprint"]),
            selected_vars=None if sel is None else np.asarray(sel, dtype=bool),
            flagged=tuple(int(k) for k in d.get("flagged", ())),
        )


class _WeightedEngine(CoreEngine):
    """E/M steps with fixed per-variable weights (the selection model's c)."""

    def __init__(self, priors, cardinalities, k_total, weights):
        super().__init__(priors, cardinalities, k_total)
        self.weights = weights

    def e(self, data, alpha_star, eps_star):
        return e_step_with_entropy(data, alpha_star, eps_star, weights=self.weights)

    def m(self, data, resp):
        return m_step(data, resp, self.priors, weights=self.weights)


def _local_state(fitted: FittedModel, data: CategoricalDataset, eng: CoreEngine,
                 zombie_threshold: float) -> VariationalState:
    state = prune_zombies(fitted.state, zombie_threshold)
    if state.n_clusters != fitted.state.n_clusters:
        # keep alpha*/eps* exactly consistent with the renormalised responsibilities
        alpha_star, eps_star = eng.m(data, state.resp)
        state = VariationalState(state.resp, alpha_star, eps_star, state.k_init, state.elbo_trace,
                                 assignment_entropy(state.resp))
    return state


def summarize_batch(fitted: FittedModel, data: CategoricalDataset, priors: Priors, batch_id,
                    privacy_min_size: float = PRIVACY_MIN_SIZE, withhold: bool = False,
                    zombie_threshold: float = 1e-6) -> BatchSummary:
    """Reduce a converged local fit to its summary.

    Clusters with expected size below ``privacy_min_size`` are flagged. With
    ``withhold`` they are deleted instead (their rows are reassigned by an E
    and M step), so no small cluster leaves the node.
    """
    if not fitted.converged:
        raise ContractError(f"batch {batch_id}: local fit has not converged")
    card = data.cardinalities
    priors = priors.resolve(card)
    weights = fitted.selection.c if fitted.selection is not None else None
    eng = _WeightedEngine(priors, card, fitted.state.k_init, weights)
    state = _local_state(fitted, data, eng, zombie_threshold)
    if withhold:
        while state.n_clusters > 1:
            sizes = state.resp.sum(axis=0)
            small = np.flatnonzero(sizes < privacy_min_size)
            if small.size == 0:
                break
            k = int(small[np.argmin(sizes[small])])
            state, _ = delete_proposal(data, state, k, eng)
            state = prune_zombies(state, zombie_threshold)
    sizes = state.resp.sum(axis=0)
    flagged = tuple(int(k) for k in np.flatnonzero(sizes < privacy_min_size))
    entropy = assignment_entropy(state.resp)
    summary = BatchSummary(
        batch_id=str(batch_id),
        n_obs=data.n_rows,
        k_init=int(state.k_init),
        cardinalities=np.asarray(card, dtype=np.int64),
        alpha_star=state.alpha_star.copy(),
        eps_star=state.eps_star.copy(),
        entropy=entropy,
        priors=priors,
        fingerprint=prior_fingerprint(priors, card),
        selected_vars=None if fitted.selection is None else fitted.selection.selected(),
        flagged=flagged,
        local_labels=np.argmax(state.resp, axis=1),
        resp=state.resp,
    )
    return summary


# ---------------------------------------------------------------------------
# global model


@dataclass
class GlobalModel:
    """Stacked batch clusters and the merges applied to them.

    ``ids`` gives each current cluster a stable identifier: its position in
    the initial concatenation. ``membership[k]`` is the set of
    (batch index, local cluster) pairs absorbed by current cluster k.
    """

    alpha_star: np.ndarray
    eps_star: np.ndarray
    entropy_total: float
    k_total_for_prior: int
    cardinalities: np.ndarray
    priors: Priors
    batch_ids: tuple[str, ...]
    n_obs: tuple[int, ...]
    k_batches: tuple[int, ...]
    ids: np.ndarray
    membership: list[frozenset]
    merge_history: list[tuple[int, int]] = field(default_factory=list)
    elbo_trace: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return int(self.alpha_star.shape[0])

    @property
    def n_batches(self) -> int:
        return len(self.batch_ids)

    def batch_set(self, k: int) -> set[int]:
        return {b for b, _ in self.membership[k]}

    def index_of(self, member: tuple[int, int]) -> int:
        for k, members in enumerate(self.membership):
            if member in members:
                return k
        raise ContractError(f"local cluster {member} is not part of the global model")

    def copy(self) -> "GlobalModel":
        return replace(self, alpha_star=self.alpha_star.copy(), eps_star=self.eps_star.copy(),
                       ids=self.ids.copy(), membership=list(self.membership),
                       merge_history=list(self.merge_history), elbo_trace=list(self.elbo_trace))

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "batch_ids": list(self.batch_ids),
            "n_obs": list(self.n_obs),
            "k_batches": list(self.k_batches),
            "k_total_for_prior": int(self.k_total_for_prior),
            "cardinalities": [int(c) for c in self.cardinalities],
            "alpha_star": self.alpha_star.tolist(),
            "eps_star": self.eps_star.tolist(),
            "entropy_total": float(self.entropy_total),
            "ids": [int(i) for i in self.ids],
            "membership": [sorted([int(b), int(l)] for b, l in m) for m in self.membership],
            "merge_history": [[int(a), int(b)] for a, b in self.merge_history],
            "elbo_trace": [float(v) for v in self.elbo_trace],
        }


def combine_summaries(summaries: Sequence[BatchSummary]) -> GlobalModel:
    """Concatenate batch clusters; the prior dimension is the sum of k_init."""
    if not summaries:
        raise ContractError("need at least one summary")
    first = summaries[0]
    for s in summaries[1:]:
        if not np.array_equal(s.cardinalities, first.cardinalities):
            raise SchemaError(f"batch {s.batch_id} has different variable cardinalities")
    for s in summaries[1:]:
        if s.fingerprint != first.fingerprint:
            raise IncompatiblePriorsError(f"batch {s.batch_id} was fitted under different priors")
    membership = [frozenset({(b, l)}) for b, s in enumerate(summaries) for l in range(s.k_clusters)]
    alpha_star = np.concatenate([s.alpha_star for s in summaries])
    return GlobalModel(
        alpha_star=alpha_star,
        eps_star=np.vstack([s.eps_star for s in summaries]),
        entropy_total=float(sum(s.entropy for s in summaries)),
        k_total_for_prior=int(sum(s.k_init for s in summaries)),
        cardinalities=np.asarray(first.cardinalities),
        priors=first.priors.resolve(first.cardinalities),
        batch_ids=tuple(s.batch_id for s in summaries),
        n_obs=tuple(int(s.n_obs) for s in summaries),
        k_batches=tuple(s.k_clusters for s in summaries),
        ids=np.arange(alpha_star.shape[0]),
        membership=membership,
    )


def global_elbo(g: GlobalModel, priors: Priors | None = None) -> float:
    """ELBO of the pooled data under the global clustering, from summaries only."""
    priors = (priors or g.priors).resolve(g.cardinalities)
    stats = suff_stats(g.alpha_star, g.eps_star, priors, g.cardinalities)
    return elbo_from_stats(stats, g.alpha_star, g.eps_star, priors, g.cardinalities,
                           g.entropy_total, g.k_total_for_prior)


def global_merge_pair(g: GlobalModel, k1: int, k2: int, priors: Priors | None = None,
                      entropy_delta: float | None = None) -> GlobalModel:
    """Candidate model with cluster k2 absorbed into k1 (k1 keeps its id).

    Cross-batch merges leave the entropy unchanged; a merge of clusters that
    share a batch needs ``entropy_delta`` from the owning node(s).
    """
    if k1 == k2:
        raise ContractError("merge needs two distinct clusters")
    priors = (priors or g.priors).resolve(g.cardinalities)
    shared = g.batch_set(k1) & g.batch_set(k2)
    if shared and entropy_delta is None:
        raise ContractError(f"clusters {k1} and {k2} share batches {sorted(shared)}; entropy correction needed")
    out = g.copy()
    out.alpha_star[k1] = g.alpha_star[k1] + g.alpha_star[k2] - priors.alpha0
    out.eps_star[k1] = g.eps_star[k1] + g.eps_star[k2] - priors.epsilon_flat(g.cardinalities)
    out.membership[k1] = g.membership[k1] | g.membership[k2]
    out.merge_history.append((int(g.ids[k1]), int(g.ids[k2])))
    out.alpha_star = np.delete(out.alpha_star, k2)
    out.eps_star = np.delete(out.eps_star, k2, axis=0)
    out.ids = np.delete(out.ids, k2)
    del out.membership[k2]
    if shared:
        out.entropy_total = g.entropy_total + float(entropy_delta)
    return out


# ---------------------------------------------------------------------------
# entropy corrections for same-batch merges


def entropy_correction(resp, group_a: Sequence[int], group_b: Sequence[int]) -> float:
    """sum_n [(a+b) ln(a+b) - a ln a - b ln b], a and b summed over the column groups."""
    resp = np.asarray(resp, dtype=np.float64)
    ra = resp[:, list(group_a)].sum(axis=1)
    rb = resp[:, list(group_b)].sum(axis=1)
    return assignment_entropy(ra + rb) - assignment_entropy(ra) - assignment_entropy(rb)


class LocalEntropyOracle:
    """Answers entropy corrections from responsibilities held in this process."""

    def __init__(self, resps: Sequence[np.ndarray]):
        self.resps = list(resps)
        self.calls = 0

    def __call__(self, batch: int, group_a: Sequence[int], group_b: Sequence[int]) -> float:
        self.calls += 1
        return entropy_correction(self.resps[batch], group_a, group_b)


def merge_entropy_delta(g: GlobalModel, k1: int, k2: int, corrector: EntropyCorrector | None) -> float:
    """Entropy change of merging k1 and k2; zero unless they share a batch."""
    shared = g.batch_set(k1) & g.batch_set(k2)
    if not shared:
        return 0.0
    if corrector is None:
        raise ContractError("same-batch merge without an entropy corrector")
    total = 0.0
    for b in sorted(shared):
        ga = sorted(l for bb, l in g.membership[k1] if bb == b)
        gb = sorted(l for bb, l in g.membership[k2] if bb == b)
        total += float(corrector(b, ga, gb))
    return total


# ---------------------------------------------------------------------------
# search strategies


def _best_partner(g: GlobalModel, k: int, candidates: list[int], criterion: str, rng) -> int:
    if criterion == "random":
        return candidates[int(rng.integers(len(candidates)))]
    sub = g.eps_star[[k] + candidates]
    scores, higher_better = pair_scores(sub, g.cardinalities, criterion)
    row = scores[0, 1:]
    pick = int(np.argmax(row)) if higher_better else int(np.argmin(row))
    return candidates[pick]


def greedy_search(g: GlobalModel, criterion: str = "correlation", rng=None,
                  priors: Priors | None = None) -> GlobalModel:
    """Sequential cross-batch sweep.

    Batches are visited in order. Each cluster whose earliest member comes
    from the current batch proposes one merge per later batch, with the
    best-scoring cluster of that batch whose batch set is disjoint from its
    own. Proposals are accepted on a strict global ELBO increase.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    priors = (priors or g.priors).resolve(g.cardinalities)
    g = g.copy()
    current = global_elbo(g, priors)
    if not g.elbo_trace:
        g.elbo_trace.append(current)
    n_batches = g.n_batches
    if n_batches < 2:
        return g
    for b in range(n_batches):
        for local in range(g.k_batches[b]):
            for b2 in range(b + 1, n_batches):
                k = g.index_of((b, local))
                mine = g.batch_set(k)
                if min(mine) != b or min(l for bb, l in g.membership[k] if bb == b) != local:
                    break  # this cluster is driven from an earlier batch or member
                if b2 in mine:
                    continue
                candidates = [j for j in range(g.n_clusters)
                              if b2 in g.batch_set(j) and not (g.batch_set(j) & mine)]
                if not candidates:
                    continue
                j = _best_partner(g, k, candidates, criterion, rng)
                proposal = global_merge_pair(g, k, j, priors)
                value = global_elbo(proposal, priors)
                if value > current:
                    proposal.elbo_trace.append(value)
                    g, current = proposal, value
    return g


def random_search(g: GlobalModel, criterion: str = "correlation", rng=None, priors: Priors | None = None,
                  stop_after: int = 10, candidate_pool: int = 3, correlation_floor: float = 0.05,
                  entropy_corrector: EntropyCorrector | None = None,
                  cross_batch_only: bool = False) -> GlobalModel:
    """Propose pairs from the best-scoring candidates until ``stop_after`` rejections in a row.

    Same-batch pairs are proposed only when an entropy corrector is given
    and ``cross_batch_only`` is off.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    priors = (priors or g.priors).resolve(g.cardinalities)
    g = g.copy()
    current = global_elbo(g, priors)
    if not g.elbo_trace:
        g.elbo_trace.append(current)
    same_batch_ok = entropy_corrector is not None and not cross_batch_only
    streak = 0
    while streak < stop_after and g.n_clusters >= 2:
        allowed = None
        if not same_batch_ok:
            sets = [g.batch_set(k) for k in range(g.n_clusters)]
            allowed = np.array([[not (a & b) for b in sets] for a in sets])
        pair = merge_candidates(g.eps_star, g.cardinalities, criterion, rng, candidate_pool,
                                correlation_floor, allowed)
        if pair is None:
            break
        k1, k2 = pair
        delta = merge_entropy_delta(g, k1, k2, entropy_corrector)
        proposal = global_merge_pair(g, k1, k2, priors, entropy_delta=delta)
        value = global_elbo(proposal, priors)
        if value > current:
            proposal.elbo_trace.append(value)
            g, current = proposal, value
            streak = 0
        else:
            streak += 1
    return g


def search(g: GlobalModel, method: str, criterion: str, rng, priors: Priors | None = None, **kw) -> GlobalModel:
    if method == "greedy":
        return greedy_search(g, criterion, rng, priors)
    if method == "random":
        return random_search(g, criterion, rng, priors, **kw)
    raise ContractError(f"unknown search {method!r}; expected one of {SEARCHES}")


# ---------------------------------------------------------------------------
# outputs


def map_labels(local_labels: Sequence, g: GlobalModel) -> np.ndarray:
    """Global label of every observation, batches concatenated in model order."""
    if len(local_labels) != g.n_batches:
        raise ContractError(f"expected labels for {g.n_batches} batches, got {len(local_labels)}")
    lookup = {member: k for k, members in enumerate(g.membership) for member in members}
    out = []
    for b, labels in enumerate(local_labels):
        labels = np.asarray(labels, dtype=np.int64)
        table = np.full(g.k_batches[b], -1, dtype=np.int64)
        for l in range(g.k_batches[b]):
            table[l] = lookup.get((b, l), -1)
        if labels.size and (labels.min() < 0 or labels.max() >= g.k_batches[b] or np.any(table[labels] < 0)):
            raise ContractError(f"batch {g.batch_ids[b]}: label outside the summarised clusters")
        out.append(table[labels])
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def aggregate_variable_selection(summaries: Sequence[BatchSummary]) -> np.ndarray:
    """A variable is selected when at least B - 1 batches selected it (B = 1 passes through)."""
    if not summaries:
        raise ContractError("need at least one summary")
    if any(s.selected_vars is None for s in summaries):
        raise ContractError("every summary needs a selection vector")
    votes = np.sum([np.asarray(s.selected_vars, dtype=bool) for s in summaries], axis=0)
    n = len(summaries)
    return votes >= (n - 1 if n > 1 else 1)


# ---------------------------------------------------------------------------
# in-process driver


@dataclass
class FederatedResult:
    model: GlobalModel
    labels: np.ndarray
    summaries: list[BatchSummary]
    selected_vars: np.ndarray | None
    local_fits: list[FittedModel] = field(repr=False, default_factory=list)
    fit_seconds: float = 0.0
    merge_seconds: float = 0.0


def batch_seeds(seed: int, n_batches: int) -> tuple[list[int], int]:
    """Independent integer seeds for each batch fit and for the global search."""
    children = np.random.SeedSequence(seed).spawn(n_batches + 1)
    ints = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
    return ints[:-1], ints[-1]


def fit_batch(data: CategoricalDataset, config: MerDelConfig, priors: Priors, varsel: bool = False) -> FittedModel:
    if varsel:
        from .varsel import fit_merdel_vs
        return fit_merdel_vs(data, config, priors)
    return fit_merdel(data, config, priors)


def run_federated(batches: Sequence[CategoricalDataset], config: MerDelConfig | None = None,
                  priors: Priors | None = None, search_method: str = "greedy", criterion: str | None = None,
                  varsel: bool = False, cross_batch_only: bool = False, stop_after: int = 10,
                  privacy_min_size: float = PRIVACY_MIN_SIZE, withhold: bool = False) -> FederatedResult:
    """Fit every batch, summarise, combine and run the global search, all in this process."""
    config = config or MerDelConfig()
    if not batches:
        raise ContractError("need at least one batch")
    priors = (priors or Priors()).resolve(batches[0].cardinalities)
    criterion = criterion or config.merge_criterion
    seeds, search_seed = batch_seeds(config.seed, len(batches))
    t0 = time.perf_counter()
    fits, summaries = [], []
    for b, (data, seed) in enumerate(zip(batches, seeds)):
        fitted = fit_batch(data, replace(config, seed=seed), priors, varsel)
        fits.append(fitted)
        summaries.append(summarize_batch(fitted, data, priors, f"batch{b}", privacy_min_size, withhold,
                                         config.zombie_threshold))
    t1 = time.perf_counter()
    g = combine_summaries(summaries)
    rng = np.random.default_rng(search_seed)
    kw = {}
    if search_method == "random":
        kw = {"stop_after": stop_after, "candidate_pool": config.candidate_pool,
              "correlation_floor": config.correlation_floor, "cross_batch_only": cross_batch_only,
              "entropy_corrector": None if cross_batch_only else LocalEntropyOracle([s.resp for s in summaries])}
    g = search(g, search_method, criterion, rng, priors, **kw)
    t2 = time.perf_counter()
    labels = map_labels([s.local_labels for s in summaries], g)
    selected = aggregate_variable_selection(summaries) if varsel else None
    log.debug("federated: %d batches, %d -> %d clusters", len(batches), sum(g.k_batches), g.n_clusters)
    return FederatedResult(g, labels, summaries, selected, fits, t1 - t0, t2 - t1)

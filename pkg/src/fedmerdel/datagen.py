"""Synthetic categorical data with planted clusters, and batch partitioning.

Random numbers come from numpy's counter-based Philox generator so a
(spec, seed) pair always yields the same dataset bytes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import CategoricalDataset, write_csv, write_labels
from .errors import ContractError

RNG_NAME = "numpy.Philox-4x64"
RNG_VERSION = 1


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class GenSpec:
    """Generator settings.

    Cluster sizes come from exactly one of ``sizes`` (counts), ``size_range``
    (per-cluster draws from Uniform(lo, hi), rescaled to ``n``) or
    ``cluster_weights`` (multinomial labels); the default is equal sizes.
    Noise variables are placed last.
    """

    n: int
    p: int
    k_true: int
    cardinalities: int | tuple[int, ...] = 2
    n_noise_vars: int = 0
    cluster_weights: tuple[float, ...] | None = None
    sizes: tuple[int, ...] | None = None
    size_range: tuple[float, float] | None = None
    beta: tuple[float, float] = (1.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_noise_vars > self.p or self.n_noise_vars < 0:
            raise ContractError("n_noise_vars must lie in [0, p]")
        if self.k_true < 1 or self.n < 1 or self.p < 1:
            raise ContractError("n, p and k_true must be positive")
        if self.sizes is not None:
            if len(self.sizes) != self.k_true or sum(self.sizes) != self.n:
                raise ContractError("sizes must have k_true entries summing to n")
        if self.cluster_weights is not None:
            w = np.asarray(self.cluster_weights, dtype=float)
            if w.shape != (self.k_true,) or abs(w.sum() - 1) > 1e-9 or np.any(w < 0):
                raise ContractError("cluster_weights must be a probability vector of length k_true")
        card = self.cardinality_vector()
        if np.any(card < 2):
            raise ContractError("cardinalities must be >= 2")

    def cardinality_vector(self) -> np.ndarray:
        if isinstance(self.cardinalities, int):
            return np.full(self.p, self.cardinalities, dtype=np.int64)
        card = np.asarray(self.cardinalities, dtype=np.int64)
        if card.shape != (self.p,):
            raise ContractError("cardinalities must be an int or have length p")
        return card

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        kw = dict(d)
        for key in ("cluster_weights", "sizes", "size_range", "beta"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if isinstance(kw.get("cardinalities"), list):
            kw["cardinalities"] = tuple(kw["cardinalities"])
        return cls(**kw)


def _largest_remainder(weights: np.ndarray, n: int) -> np.ndarray:
    raw = weights / weights.sum() * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def cluster_sizes(spec: GenSpec, rng) -> np.ndarray | None:
    if spec.sizes is not None:
        return np.asarray(spec.sizes, dtype=np.int64)
    if spec.size_range is not None:
        lo, hi = spec.size_range
        return _largest_remainder(rng.uniform(lo, hi, size=spec.k_true), spec.n)
    if spec.cluster_weights is not None:
        return None
    return _largest_remainder(np.ones(spec.k_true), spec.n)


@dataclass
class Generated:
    data: CategoricalDataset
    labels: np.ndarray
    relevant: np.ndarray
    params: list = field(repr=False, default_factory=list)


def _category_probs(rng, n_draws: int, n_cat: int, beta) -> np.ndarray:
    if n_cat == 2:
        p1 = rng.beta(beta[0], beta[1], size=n_draws)
        return np.stack([1.0 - p1, p1], axis=1)
    return rng.dirichlet(np.ones(n_cat), size=n_draws)


def generate(spec: GenSpec) -> Generated:
    """Draw a dataset; returns data, true labels and the relevant-variable mask."""
    rng = make_rng(spec.seed)
    k = spec.k_true
    sizes = cluster_sizes(spec, rng)
    if sizes is None:
        labels = rng.choice(k, size=spec.n, p=np.asarray(spec.cluster_weights))
    else:
        labels = rng.permutation(np.repeat(np.arange(k), sizes))
    card = spec.cardinality_vector()
    relevant = np.ones(spec.p, dtype=bool)
    if spec.n_noise_vars:
        relevant[spec.p - spec.n_noise_vars:] = False
    values = np.empty((spec.n, spec.p), dtype=np.int32)
    params = []
    for j in range(spec.p):
        if relevant[j]:
            probs = _category_probs(rng, k, int(card[j]), spec.beta)
        else:
            probs = np.repeat(_category_probs(rng, 1, int(card[j]), spec.beta), k, axis=0)
        params.append(probs)
        cum = np.cumsum(probs, axis=1)[:, :-1]
        u = rng.random(spec.n)
        values[:, j] = np.sum(u[:, None] >= cum[labels], axis=1)
    data = CategoricalDataset(values, card)
    return Generated(data, labels.astype(np.int64), relevant, params)


def write_generated(out_dir, gen: Generated, spec: GenSpec) -> Path:
    """CSV data, label file and a sidecar manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "data.csv", gen.data)
    write_labels(out / "labels.csv", gen.labels)
    manifest = {
        "generator": spec.to_dict(),
        "rng": {"name": RNG_NAME, "version": RNG_VERSION, "seed": spec.seed},
        "data": "data.csv",
        "truth_labels": "labels.csv",
        "relevant_mask": gen.relevant.astype(int).tolist(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# partitioning


class Batch(NamedTuple):
    data: CategoricalDataset
    labels: np.ndarray
    rows: np.ndarray


PARTITION_MODES = ("random", "exclusive", "disjoint", "disjoint_plus_shared", "dirichlet_skew")


def _even_split(rows: np.ndarray, n_batches: int) -> list[np.ndarray]:
    return list(np.array_split(rows, n_batches))


def partition_rows(labels, mode: str, n_batches: int, seed=0, exclusive_cluster: int = 0,
                   n_shared: int = 2) -> list[np.ndarray]:
    """Row indices per batch (each sorted); batches are disjoint and cover every row."""
    labels = np.asarray(labels)
    if n_batches < 1:
        raise ContractError("need at least one batch")
    rng = make_rng(seed)
    n = labels.shape[0]
    clusters = np.unique(labels)
    if mode == "random":
        parts = _even_split(rng.permutation(n), n_batches)
    elif mode == "exclusive":
        if exclusive_cluster not in clusters:
            raise ContractError(f"cluster {exclusive_cluster} not present")
        own = np.flatnonzero(labels == exclusive_cluster)
        rest = rng.permutation(np.flatnonzero(labels != exclusive_cluster))
        parts = _even_split(rest, n_batches)
        home = int(rng.integers(n_batches))
        parts[home] = np.concatenate([parts[home], own])
    elif mode in ("disjoint", "disjoint_plus_shared"):
        shared = clusters[len(clusters) - n_shared:] if mode == "disjoint_plus_shared" else clusters[:0]
        exclusive = np.setdiff1d(clusters, shared)
        if exclusive.size < n_batches:
            raise ContractError(f"{exclusive.size} clusters cannot cover {n_batches} batches disjointly")
        groups = np.array_split(exclusive, n_batches)
        parts = [np.flatnonzero(np.isin(labels, g)) for g in groups]
        if shared.size:
            spread = _even_split(rng.permutation(np.flatnonzero(np.isin(labels, shared))), n_batches)
            parts = [np.concatenate([p, s]) for p, s in zip(parts, spread)]
    elif mode == "dirichlet_skew":
        assign = np.empty(n, dtype=np.int64)
        for c in clusters:
            rows = np.flatnonzero(labels == c)
            share = rng.dirichlet(np.ones(n_batches))
            assign[rows] = rng.choice(n_batches, size=rows.size, p=share)
        parts = [np.flatnonzero(assign == b) for b in range(n_batches)]
    else:
        raise ContractError(f"unknown partition mode {mode!r}")
    return [np.sort(p) for p in parts]


def partition(data: CategoricalDataset, labels, mode: str, n_batches: int, seed=0, **kw) -> list[Batch]:
    labels = np.asarray(labels)
    return [Batch(data.take(rows), labels[rows], rows)
            for rows in partition_rows(labels, mode, n_batches, seed, **kw)]

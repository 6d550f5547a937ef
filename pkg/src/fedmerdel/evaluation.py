"""Clustering metrics, variable-selection F1 and cluster prevalence profiles."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import CategoricalDataset
from .errors import ContractError

QUANTILE_METHOD = "linear"  # Hyndman-Fan type 7
SHADES = " .:-=+*#%@"


def _comb2(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * (x - 1.0)) / 2.0)


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ContractError(f"label vectors differ in length ({a.size} vs {b.size})")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from pair counts; 1.0 for identical partitions up to relabelling."""
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    index = _comb2(table)
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0  # both partitions trivial and equal (one cluster each, or all singletons)
    return float((index - expected) / (max_index - expected))


def selection_f1(predicted, truth) -> float:
    """F1 of the relevant class; 1.0 when both masks select nothing."""
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ContractError("masks differ in length")
    tp = int(np.sum(p & t))
    denom = 2 * tp + int(np.sum(p & ~t)) + int(np.sum(~p & t))
    return 1.0 if denom == 0 else 2.0 * tp / denom


def selection_counts(predicted, truth) -> dict[str, int]:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    return {"relevant_found": int(np.sum(p & t)), "irrelevant_found": int(np.sum(~p & ~t)),
            "n_relevant": int(t.sum()), "n_irrelevant": int((~t).sum())}


def n_clusters(labels) -> int:
    return int(np.unique(np.asarray(labels)).size)


def summarize(values) -> dict[str, float]:
    """Median with lower/upper quartiles (type-7 interpolation), mean and count."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "median": float("nan"), "lower": float("nan"), "upper": float("nan"), "mean": float("nan")}
    lo, med, hi = np.quantile(v, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return {"n": int(v.size), "median": float(med), "lower": float(lo), "upper": float(hi), "mean": float(v.mean())}


# ---------------------------------------------------------------------------
# profiles


@dataclass
class ProfileTable:
    """Category prevalences among each cluster's members, clusters largest first.

    ``prevalence`` uses the flattened category layout restricted to
    ``variables``; rows follow ``clusters``.
    """

    clusters: np.ndarray
    sizes: np.ndarray
    prevalence: np.ndarray
    variables: np.ndarray
    names: tuple[str, ...]
    cardinalities: np.ndarray

    def _columns(self):
        cols = []
        for j, name, card in zip(self.variables, self.names, self.cardinalities):
            cols.extend((int(j), name, l) for l in range(int(card)))
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cluster", "size"] + [f"{name}={l}" for _, name, l in self._columns()])
        for cid, size, row in zip(self.clusters, self.sizes, self.prevalence):
            writer.writerow([int(cid), int(size)] + [f"{v:.6f}" for v in row])
        return buf.getvalue()

    def display_values(self) -> np.ndarray:
        """Per cluster and variable, the share of members not in category 0."""
        offsets = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(int)
        return 1.0 - self.prevalence[:, offsets]

    def to_ascii(self, width: int = 3) -> str:
        """Heatmap with one character per cell; darker means more prevalent."""
        vals = self.display_values()
        head = " " * 14 + "".join(name[:width].ljust(width) for name in self.names)
        lines = [head.rstrip()]
        for cid, size, row in zip(self.clusters, self.sizes, vals):
            cells = "".join(SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)] * width for v in row)
            lines.append(f"{int(cid):>4} n={int(size):<6} " + cells)
        return "\n".join(lines) + "\n"


def profile(data: CategoricalDataset, labels, top: int | None = None) -> ProfileTable:
    """Prevalence table of the clusters in ``labels``; ``top`` keeps the most prevalent variables."""
    labels = np.asarray(labels)
    if labels.shape != (data.n_rows,):
        raise ContractError("one label per row required")
    clusters, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    order = np.argsort(-sizes, kind="stable")
    onehot = np.zeros((clusters.size, data.n_columns))
    np.add.at(onehot, (np.repeat(inverse, data.n_vars), data.idx.ravel()), 1.0)
    prevalence = onehot / sizes[:, None]
    names = data.names or tuple(f"v{j}" for j in range(data.n_vars))
    variables = np.arange(data.n_vars)
    if top is not None and top < data.n_vars:
        overall = 1.0 - data.category_totals()[data.offsets[:-1]] / data.n_rows
        variables = np.sort(np.argsort(-overall, kind="stable")[:top])
    cols = np.concatenate([np.arange(data.offsets[j], data.offsets[j + 1]) for j in variables])
    return ProfileTable(
        clusters=clusters[order],
        sizes=sizes[order],
        prevalence=prevalence[order][:, cols],
        variables=variables,
        names=tuple(names[j] for j in variables),
        cardinalities=data.cardinalities[variables],
    )

"""Replicated simulation experiments driven by a JSON manifest.

Example manifest::

    {
      "name": "merdel-laps5",
      "generator": {"n": 1000, "p": 60, "k_true": 5, "size_range": [100, 300]},
      "datasets": 20,
      "seeds": 10,
      "base_seed": 0,
      "model": {"k_init": 20, "laps": 5, "merge_criterion": "correlation", "varsel": false},
      "methods": ["full"],
      "federation": {"batches": 5, "partition": "random", "search": "greedy"}
    }

Dataset ``d`` uses generator seed ``base_seed + d``; replicate ``s`` uses
fit seed ``s`` and, for FedMerDel, partition seed ``s``. Reports hold no
wall-clock values so reruns are byte-identical; timings are returned
separately.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datagen import GenSpec, generate, partition
from .errors import ContractError
from .evaluation import QUANTILE_METHOD, ari, selection_counts, selection_f1, summarize
from .federation import SEARCHES, run_federated
from .merdel import MerDelConfig, fit_merdel
from .varsel import fit_merdel_vs

METHODS = ("full", "fedmerdel")
MODEL_KEYS = {"k_init", "laps", "merge_criterion", "tol", "max_iters", "candidate_pool", "correlation_floor",
              "delete_small_fraction"}


@dataclass(frozen=True)
class RunUnit:
    dataset: int
    seed: int
    method: str


def validate_manifest(manifest: dict) -> dict:
    if not isinstance(manifest, dict) or not manifest:
        raise ContractError("manifest is empty")
    if "generator" not in manifest:
        raise ContractError("manifest needs a generator section")
    methods = manifest.get("methods", ["full"])
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ContractError(f"methods must be a non-empty subset of {METHODS}")
    model = manifest.get("model", {})
    unknown = set(model) - MODEL_KEYS - {"varsel"}
    if unknown:
        raise ContractError(f"unknown model settings {sorted(unknown)}")
    fed = manifest.get("federation", {})
    if "fedmerdel" in methods and fed.get("search", "greedy") not in SEARCHES:
        raise ContractError(f"federation.search must be one of {SEARCHES}")
    for key in ("datasets", "seeds"):
        if int(manifest.get(key, 1)) < 1:
            raise ContractError(f"{key} must be >= 1")
    return manifest


def _config(manifest: dict, seed: int) -> MerDelConfig:
    model = {k: v for k, v in manifest.get("model", {}).items() if k in MODEL_KEYS}
    return MerDelConfig(seed=seed, **model)


def run_unit(manifest: dict, unit: RunUnit) -> tuple[dict, float]:
    """One fit; returns the record and its wall time (fit and global merge only)."""
    gen_kw = dict(manifest["generator"])
    gen_kw["seed"] = int(manifest.get("base_seed", 0)) + unit.dataset
    spec = GenSpec.from_dict(gen_kw)
    gen = generate(spec)
    varsel = bool(manifest.get("model", {}).get("varsel", False))
    config = _config(manifest, unit.seed)
    record = {"dataset": unit.dataset, "seed": unit.seed, "method": unit.method}
    if unit.method == "full":
        t0 = time.perf_counter()
        fitted = (fit_merdel_vs if varsel else fit_merdel)(gen.data, config)
        seconds = time.perf_counter() - t0
        labels, truth = fitted.labels, gen.labels
        selected = fitted.selection.selected() if varsel else None
        record.update(clusters=fitted.live_clusters, elbo=fitted.elbo_final, converged=fitted.converged)
    else:
        fed = manifest.get("federation", {})
        kw = dict(fed.get("partition_kw", {}))
        batches = partition(gen.data, gen.labels, fed.get("partition", "random"), int(fed.get("batches", 5)),
                            seed=unit.seed, **kw)
        t0 = time.perf_counter()
        res = run_federated([b.data for b in batches], config, search_method=fed.get("search", "greedy"),
                            varsel=varsel, cross_batch_only=bool(fed.get("cross_batch_only", True)))
        seconds = time.perf_counter() - t0
        labels = res.labels
        truth = np.concatenate([b.labels for b in batches])
        selected = res.selected_vars
        record.update(clusters=res.model.n_clusters, elbo=res.model.elbo_trace[-1],
                      merges=len(res.model.merge_history))
    record["ari"] = ari(truth, labels)
    if selected is not None:
        record["f1"] = selection_f1(selected, gen.relevant)
        record.update(selection_counts(selected, gen.relevant))
    return record, seconds


def _run_unit_packed(args):
    return run_unit(*args)


def run_experiment(manifest: dict, jobs: int = 1) -> tuple[dict, dict]:
    """Run every (dataset, seed, method) unit; returns (report, timing)."""
    manifest = validate_manifest(manifest)
    units = [RunUnit(d, s, m) for d in range(int(manifest.get("datasets", 1)))
             for s in range(int(manifest.get("seeds", 1))) for m in manifest.get("methods", ["full"])]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_unit_packed, [(manifest, u) for u in units]))
    else:
        results = [run_unit(manifest, u) for u in units]
    records = [r for r, _ in results]
    summary = {}
    for method in manifest.get("methods", ["full"]):
        rows = [r for r in records if r["method"] == method]
        summary[method] = {key: summarize([r[key] for r in rows])
                           for key in ("ari", "clusters", "elbo", "f1", "relevant_found", "irrelevant_found")
                           if rows and key in rows[0]}
    report = {"name": manifest.get("name", "experiment"), "manifest": manifest,
              "quantile_method": f"numpy {QUANTILE_METHOD} (type 7)", "records": records, "summary": summary}
    timing = {"seconds": [{"dataset": u.dataset, "seed": u.seed, "method": u.method, "seconds": t}
                          for u, (_, t) in zip(units, results)]}
    timing["summary"] = {m: summarize([t["seconds"] for t in timing["seconds"] if t["method"] == m])
                         for m in manifest.get("methods", ["full"])}
    return report, timing

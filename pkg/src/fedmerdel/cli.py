"""Command-line interface: ``fedmerdel <command> ...``.

Every command that takes ``--seed`` honours the FEDMERDEL_SEED environment
variable, which overrides the flag. Reports never contain wall-clock times,
so reruns with the same inputs and seed give byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, read_csv, read_labels, write_csv, write_labels
from .datagen import PARTITION_MODES, GenSpec, generate, partition, write_generated
from .errors import ContractError, SchemaError
from .evaluation import ari, n_clusters, profile, selection_counts, selection_f1
from .federation import SEARCHES, run_federated
from .jsonio import dumps
from .merdel import CRITERIA, MerDelConfig, fit_merdel
from .model import DEFAULT_TOL, Priors
from .transport import (
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_PROTOCOL,
    FitRequest,
    PartialCollectionError,
    ProtocolError,
    run_coordinator,
    seed_from_env,
    serve_node,
    serve_node_files,
)

log = logging.getLogger("fedmerdel")
EXIT_USAGE = 1


def _laps(text: str):
    if text.lower() == "never":
        return None
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("laps must be >= 0 or 'never'")
    return value


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-init", type=int, default=20)
    p.add_argument("--laps", type=_laps, default=5, help="EM cycles between move rounds, or 'never'")
    p.add_argument("--criterion", choices=CRITERIA, default="correlation")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--varsel", action="store_true", help="fit the variable-selection model")
    p.add_argument("--alpha0", type=float, default=0.01)


def _config(args) -> MerDelConfig:
    return MerDelConfig(k_init=args.k_init, laps=args.laps, merge_criterion=args.criterion, tol=args.tol,
                        max_iters=args.max_iters, seed=args.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    data = read_csv(args.data)
    config = _config(args)
    priors = Priors(alpha0=args.alpha0)
    if args.varsel:
        from .varsel import fit_merdel_vs
        fitted = fit_merdel_vs(data, config, priors)
    else:
        fitted = fit_merdel(data, config, priors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.csv", fitted.labels)
    report = {
        "command": "fit",
        "n_rows": data.n_rows,
        "n_vars": data.n_vars,
        "config": {"seed": config.seed, "k_init": config.k_init, "laps": config.laps or "never",
                   "criterion": config.merge_criterion, "tol": config.tol, "varsel": args.varsel},
        "live_clusters": fitted.live_clusters,
        "cluster_sizes": fitted.cluster_sizes.tolist(),
        "elbo": fitted.elbo_final,
        "elbo_trace": fitted.state.elbo_trace,
        "converged": fitted.converged,
        "iterations": fitted.n_iters,
        "moves": {"proposed": len(fitted.move_log), "accepted": sum(m.accepted for m in fitted.move_log)},
    }
    if fitted.selection is not None:
        report["selected_vars"] = fitted.selection.selected().tolist()
        report["c"] = fitted.selection.c.tolist()
    _write_json(out / "report.json", report)
    print(f"{fitted.live_clusters} clusters, ELBO {fitted.elbo_final:.6f}; wrote {out}")
    return EXIT_OK


def _load_batches(args):
    if args.batch_files:
        return [read_csv(p) for p in args.batch_files.split(",")], None
    data = read_csv(args.data)
    labels = read_labels(args.labels) if args.labels else None
    if args.partition != "random" and labels is None:
        raise ContractError(f"partition mode {args.partition} needs --labels")
    parts = partition(data, labels if labels is not None else np.zeros(data.n_rows, dtype=int),
                      args.partition, args.batches, seed=args.seed)
    return [p.data for p in parts], np.concatenate([p.rows for p in parts])


def cmd_federate(args) -> int:
    batches, rows = _load_batches(args)
    config = _config(args)
    res = run_federated(batches, config, Priors(alpha0=args.alpha0), args.search, args.criterion, args.varsel,
                        args.cross_batch_only, args.stop_after)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = res.labels
    if rows is not None:  # back to input row order
        restored = np.empty_like(labels)
        restored[rows] = labels
        labels = restored
    write_labels(out / "labels.csv", labels)
    report = {
        "command": "federate",
        "batches": len(batches),
        "search": args.search,
        "criterion": args.criterion,
        "cross_batch_only": args.cross_batch_only,
        "local_clusters": [s.k_clusters for s in res.summaries],
        "global_clusters": res.model.n_clusters,
        "global_elbo": res.model.elbo_trace[-1],
        "merge_history": res.model.merge_history,
        "flagged_small_clusters": {s.batch_id: list(s.flagged) for s in res.summaries},
    }
    if res.selected_vars is not None:
        report["selected_vars"] = res.selected_vars.tolist()
    _write_json(out / "report.json", report)
    _write_json(out / "model.json", res.model.to_dict())
    print(f"{len(batches)} batches, {sum(res.model.k_batches)} local -> {res.model.n_clusters} global clusters")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = GenSpec(n=args.n, p=args.p, k_true=args.k_true, cardinalities=args.cardinality,
                   n_noise_vars=args.noise, size_range=tuple(args.size_range) if args.size_range else None,
                   seed=args.seed)
    gen = generate(spec)
    out = Path(args.out)
    manifest = write_generated(out, gen, spec)
    if args.batches:
        for b, part in enumerate(partition(gen.data, gen.labels, args.partition, args.batches, seed=args.seed)):
            write_csv(out / f"batch{b}.csv", part.data)
            write_labels(out / f"batch{b}_labels.csv", part.labels)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    result = {"ari": ari(truth, pred), "clusters": n_clusters(pred), "true_clusters": n_clusters(truth)}
    if args.report and args.manifest:
        selected = np.asarray(json.loads(Path(args.report).read_text())["selected_vars"], dtype=bool)
        relevant = np.asarray(json.loads(Path(args.manifest).read_text())["relevant_mask"], dtype=bool)
        result["f1"] = selection_f1(selected, relevant)
        result.update(selection_counts(selected, relevant))
    text = dumps(result) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_profile(args) -> int:
    table = profile(read_csv(args.data), read_labels(args.labels), args.top)
    text = table.to_csv() if args.format == "csv" else table.to_ascii()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    manifest = json.loads(Path(args.manifest).read_text())
    if "FEDMERDEL_SEED" in os.environ:
        manifest["base_seed"] = seed_from_env(int(manifest.get("base_seed", 0)))
    report, timing = run_experiment(manifest, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", timing)
    for method, stats in report["summary"].items():
        a = stats["ari"]
        print(f"{method}: ARI {a['median']:.3f} [{a['lower']:.3f}, {a['upper']:.3f}] mean {a['mean']:.3f}, "
              f"clusters {stats['clusters']['median']:.2f}")
    return EXIT_OK


def cmd_node(args) -> int:
    data = read_csv(args.data) if args.data else None
    if args.run_dir:
        request = None
        if not (Path(args.run_dir) / "request.json").exists():
            request = FitRequest(_config(args), Priors(alpha0=args.alpha0), args.batch_id, args.varsel)
        outcome = serve_node_files(args.run_dir, data, args.labels_out, request)
    else:
        outcome = serve_node(args.listen, data, allow_entropy=args.allow_entropy, labels_out=args.labels_out)
    if outcome is not None:
        print(f"{outcome.summary.batch_id}: sent summary with {outcome.summary.k_clusters} clusters, "
              f"answered {outcome.entropy_replies} entropy requests")
    return EXIT_OK


def cmd_coordinate(args) -> int:
    config = _config(args)
    nodes = args.nodes.split(",") if args.nodes else None
    res = run_coordinator(nodes, args.summaries, config, Priors(alpha0=args.alpha0), args.search, args.criterion,
                          args.varsel, not args.entropy_corrections, args.stop_after, args.timeout, args.min_nodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = res.report()
    report["command"] = "coordinate"
    if args.varsel and all(s.selected_vars is not None for s in res.summaries):
        from .federation import aggregate_variable_selection
        report["selected_vars"] = aggregate_variable_selection(res.summaries).tolist()
    _write_json(out / "report.json", report)
    _write_json(out / "model.json", res.model.to_dict())
    print(f"{len(res.summaries)} summaries ({len(res.dropouts)} dropped), {res.model.n_clusters} global clusters")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmerdel", description="Variational categorical mixtures with "
                                     "merge/delete moves and one-shot federated merging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("federate", help="split a dataset into batches and run FedMerDel in-process")
    p.add_argument("--data")
    p.add_argument("--labels", help="truth labels, needed for non-random partitions")
    p.add_argument("--batch-files", help="comma-separated CSVs, one per batch (instead of --data)")
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--partition", choices=PARTITION_MODES, default="random")
    p.add_argument("--search", choices=SEARCHES, default="greedy")
    p.add_argument("--stop-after", type=int, default=10)
    p.add_argument("--cross-batch-only", action="store_true")
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_federate)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--k-true", type=int, required=True)
    p.add_argument("--cardinality", type=int, default=2)
    p.add_argument("--noise", type=int, default=0, help="number of noise variables (placed last)")
    p.add_argument("--size-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--batches", type=int, default=0, help="also write this many batch files")
    p.add_argument("--partition", choices=PARTITION_MODES, default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="ARI (and selection F1) of predicted labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", help="fit/federate report.json with selected_vars")
    p.add_argument("--manifest", help="simulate manifest.json with relevant_mask")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="per-cluster category prevalences")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--top", type=int)
    p.add_argument("--format", choices=("csv", "ascii"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("experiment", help="run a JSON experiment manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("node", help="serve one local fit to a coordinator")
    where = p.add_mutually_exclusive_group(required=True)
    where.add_argument("--listen", help="host:port")
    where.add_argument("--run-dir", help="file mode: read request.json, write summary-<batch>.json")
    p.add_argument("--data", help="local CSV (otherwise the request must reference data)")
    p.add_argument("--batch-id", default="batch0")
    p.add_argument("--allow-entropy", action="store_true", help="keep responsibilities to answer entropy requests")
    p.add_argument("--labels-out", help="write local labels here (stays on the node)")
    _model_flags(p)
    p.set_defaults(func=cmd_node)

    p = sub.add_parser("coordinate", help="collect summaries and run the global merge")
    where = p.add_mutually_exclusive_group(required=True)
    where.add_argument("--nodes", help="comma-separated host:port list")
    where.add_argument("--summaries", help="directory of summary-*.json files")
    p.add_argument("--search", choices=SEARCHES, default="greedy")
    p.add_argument("--stop-after", type=int, default=10)
    p.add_argument("--entropy-corrections", action="store_true",
                   help="allow same-batch merges in random search (asks nodes for entropy corrections)")
    p.add_argument("--timeout", type=float, default=3600.0)
    p.add_argument("--min-nodes", type=int, default=1)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_coordinate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "seed"):
        args.seed = seed_from_env(args.seed)
    try:
        return args.func(args)
    except PartialCollectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (ProtocolError, SchemaError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ContractError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Node/coordinator protocol for one-shot federated fits.

Messages are versioned JSON objects ``{"version", "kind", "payload"}``.
Over TCP each message is one frame: a 4-byte big-endian length followed by
the UTF-8 JSON body. In file mode the same JSON sits in files of a shared
run directory.

A node receives one ``fit_request``, fits its local data and answers with
exactly one ``batch_summary``. If the node opted in and the coordinator asks
for them, ``entropy_request`` frames follow on the same connection, each
answered by a scalar ``entropy_reply``. Raw rows and responsibilities never
leave the node.
"""
from __future__ import annotations

import logging
import os
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CategoricalDataset, read_csv, write_labels
from .errors import ContractError
from .federation import (
    PRIVACY_MIN_SIZE,
    BatchSummary,
    GlobalModel,
    batch_seeds,
    combine_summaries,
    entropy_correction,
    fit_batch,
    search,
    summarize_batch,
)
from .jsonio import dumps, loads
from .merdel import MerDelConfig
from .model import Priors

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
KINDS = ("fit_request", "batch_summary", "entropy_request", "entropy_reply", "error")
HEADER = struct.Struct(">I")
MAX_FRAME = 256 * 1024 * 1024
DEFAULT_TIMEOUT = 3600.0
SEED_ENV = "FEDMERDEL_SEED"

EXIT_OK = 0
EXIT_PROTOCOL = 2
EXIT_PARTIAL = 3


class ProtocolError(ContractError):
    """Malformed, truncated or unexpected message."""


class PartialCollectionError(RuntimeError):
    """Fewer than ``min_nodes`` summaries arrived before the timeout."""


def seed_from_env(default: int) -> int:
    """The FEDMERDEL_SEED environment variable, when set, overrides ``default``."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ContractError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class WireMessage:
    kind: str
    payload: dict
    version: int = PROTOCOL_VERSION

    def to_bytes(self) -> bytes:
        return dumps({"version": self.version, "kind": self.kind, "payload": self.payload}).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WireMessage":
        try:
            obj = loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"message is not valid UTF-8 JSON: {exc}") from None
        if not isinstance(obj, dict) or set(obj) != {"version", "kind", "payload"}:
            raise ProtocolError("message must be an object with version, kind and payload")
        if obj["version"] != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {obj['version']!r}")
        if obj["kind"] not in KINDS:
            raise ProtocolError(f"unknown message kind {obj['kind']!r}")
        if not isinstance(obj["payload"], dict):
            raise ProtocolError("payload must be an object")
        return cls(obj["kind"], obj["payload"], obj["version"])


def encode_frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME} byte limit")
    return HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(min(n - len(chunks), 1 << 20))
        if not chunk:
            raise ProtocolError(f"connection closed after {len(chunks)} of {n} bytes")
        chunks.extend(chunk)
    return bytes(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Next frame body, or None on a clean close between frames."""
    first = sock.recv(HEADER.size)
    if not first:
        return None
    header = first if len(first) == HEADER.size else first + _recv_exact(sock, HEADER.size - len(first))
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"announced frame length {length} exceeds the limit")
    return _recv_exact(sock, length)


def send_message(sock: socket.socket, msg: WireMessage) -> int:
    frame = encode_frame(msg.to_bytes())
    sock.sendall(frame)
    return len(frame)


def decode_frames(stream: bytes) -> list[bytes]:
    """Split a captured byte stream into frame bodies; truncation is an error."""
    out, pos = [], 0
    while pos < len(stream):
        if pos + HEADER.size > len(stream):
            raise ProtocolError("truncated frame header")
        (length,) = HEADER.unpack_from(stream, pos)
        pos += HEADER.size
        if length > MAX_FRAME or pos + length > len(stream):
            raise ProtocolError("truncated frame body")
        out.append(stream[pos:pos + length])
        pos += length
    return out


def error_message(text: str) -> WireMessage:
    return WireMessage("error", {"message": text})


# ---------------------------------------------------------------------------
# fit requests


def config_to_dict(config: MerDelConfig) -> dict:
    d = asdict(config)
    d["laps"] = "never" if config.laps is None else config.laps
    return d


def config_from_dict(d: dict) -> MerDelConfig:
    try:
        return MerDelConfig(**d)
    except TypeError as exc:
        raise ProtocolError(f"bad config: {exc}") from None


@dataclass(frozen=True)
class FitRequest:
    """What the coordinator asks a node to do.

    ``data_ref`` is a node-side path, or ``None`` to use the node's own data.
    ``data_csv`` optionally carries the batch inline (coordinator to node only).
    """

    config: MerDelConfig
    priors: Priors
    batch_id: str
    variable_selection: bool = False
    data_ref: str | None = None
    data_csv: str | None = None
    entropy_requests: bool = False
    privacy_min_size: float = PRIVACY_MIN_SIZE
    withhold: bool = False

    def to_dict(self) -> dict:
        return {
            "config": config_to_dict(self.config),
            "priors": {"alpha0": self.priors.alpha0,
                       "epsilon": None if self.priors.epsilon is None else list(self.priors.epsilon),
                       "a": self.priors.a},
            "batch_id": self.batch_id,
            "variable_selection": self.variable_selection,
            "data_ref": self.data_ref,
            "data_csv": self.data_csv,
            "entropy_requests": self.entropy_requests,
            "privacy_min_size": self.privacy_min_size,
            "withhold": self.withhold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitRequest":
        try:
            pr = d["priors"]
            priors = Priors(float(pr["alpha0"]), None if pr.get("epsilon") is None else tuple(pr["epsilon"]),
                            float(pr["a"]))
            return cls(
                config=config_from_dict(d["config"]),
                priors=priors,
                batch_id=str(d["batch_id"]),
                variable_selection=bool(d.get("variable_selection", False)),
                data_ref=d.get("data_ref"),
                data_csv=d.get("data_csv"),
                entropy_requests=bool(d.get("entropy_requests", False)),
                privacy_min_size=float(d.get("privacy_min_size", PRIVACY_MIN_SIZE)),
                withhold=bool(d.get("withhold", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ProtocolError):
                raise
            raise ProtocolError(f"bad fit request: {exc}") from None

    def message(self) -> WireMessage:
        return WireMessage("fit_request", self.to_dict())


def _csv_from_text(text: str, cardinalities=None) -> CategoricalDataset:
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as fh:
        fh.write(text)
        path = fh.name
    try:
        return read_csv(path, cardinalities)
    finally:
        os.unlink(path)


# ---------------------------------------------------------------------------
# node side


@dataclass
class NodeOutcome:
    summary: BatchSummary
    entropy_replies: int = 0


def node_fit(request: FitRequest, data: CategoricalDataset | None = None,
             cardinalities=None) -> BatchSummary:
    """Run the requested local fit and summarise it."""
    if request.data_csv is not None:
        data = _csv_from_text(request.data_csv, cardinalities)
    elif request.data_ref is not None:
        data = read_csv(request.data_ref, cardinalities)
    if data is None:
        raise ContractError("node has no data: pass data or a data_ref")
    priors = request.priors.resolve(data.cardinalities)
    fitted = fit_batch(data, request.config, priors, request.variable_selection)
    return summarize_batch(fitted, data, priors, request.batch_id, request.privacy_min_size,
                           request.withhold, request.config.zombie_threshold)


def _answer_entropy(summary: BatchSummary, payload: dict) -> WireMessage:
    try:
        ga = [int(v) for v in payload["group_a"]]
        gb = [int(v) for v in payload["group_b"]]
    except (KeyError, TypeError, ValueError):
        return error_message("entropy_request needs integer lists group_a and group_b")
    k = summary.k_clusters
    if not ga or not gb or set(ga) & set(gb) or min(ga + gb) < 0 or max(ga + gb) >= k:
        return error_message(f"entropy_request groups must be disjoint, non-empty and within 0..{k - 1}")
    return WireMessage("entropy_reply", {"batch_id": summary.batch_id,
                                         "value": entropy_correction(summary.resp, ga, gb)})


def handle_connection(conn: socket.socket, data: CategoricalDataset | None, allow_entropy: bool,
                      labels_out=None, cardinalities=None) -> NodeOutcome | None:
    """Serve one coordinator connection: fit request, summary, then optional entropy requests."""
    raw = read_frame(conn)
    if raw is None:
        return None
    try:
        msg = WireMessage.from_bytes(raw)
        if msg.kind != "fit_request":
            raise ProtocolError(f"expected fit_request, got {msg.kind}")
        request = FitRequest.from_dict(msg.payload)
    except ProtocolError as exc:
        send_message(conn, error_message(str(exc)))
        raise
    try:
        summary = node_fit(request, data, cardinalities)
    except Exception as exc:  # report any fit failure to the coordinator
        send_message(conn, error_message(f"fit failed: {type(exc).__name__}: {exc}"))
        raise
    if labels_out is not None:
        write_labels(labels_out, summary.local_labels)
    send_message(conn, WireMessage("batch_summary", summary.to_dict()))
    outcome = NodeOutcome(summary)
    if not (request.entropy_requests and allow_entropy):
        return outcome
    while True:
        raw = read_frame(conn)
        if raw is None:
            return outcome
        msg = WireMessage.from_bytes(raw)
        if msg.kind != "entropy_request":
            send_message(conn, error_message(f"unexpected {msg.kind} after the summary"))
            raise ProtocolError(f"unexpected {msg.kind}")
        send_message(conn, _answer_entropy(summary, msg.payload))
        outcome.entropy_replies += 1


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ContractError(f"address {addr!r} must look like host:port")
    return host or "127.0.0.1", int(port)


def serve_node(listen: str | None = None, data: CategoricalDataset | None = None, run_dir=None,
               allow_entropy: bool = False, labels_out=None, ready: threading.Event | None = None,
               bound: list | None = None, accept_timeout: float | None = None) -> NodeOutcome | None:
    """Run a node until its single fit is done.

    With ``listen`` ("host:port", port 0 picks a free one reported through
    ``bound``) the node serves one TCP connection. With ``run_dir`` it reads
    ``request.json`` there and writes ``summary-<batch_id>.json``.
    """
    if (listen is None) == (run_dir is None):
        raise ContractError("give exactly one of listen address or run directory")
    if run_dir is not None:
        return serve_node_files(run_dir, data, labels_out)
    host, port = parse_address(listen)
    with socket.create_server((host, port)) as server:
        if bound is not None:
            bound.append(server.getsockname()[1])
        if accept_timeout is not None:
            server.settimeout(accept_timeout)
        if ready is not None:
            ready.set()
        conn, _ = server.accept()
        with conn:
            conn.settimeout(None)
            return handle_connection(conn, data, allow_entropy, labels_out)


def serve_node_files(run_dir, data: CategoricalDataset | None = None, labels_out=None,
                     request: FitRequest | None = None) -> NodeOutcome:
    run_dir = Path(run_dir)
    if request is None:
        msg = WireMessage.from_bytes((run_dir / "request.json").read_bytes())
        if msg.kind != "fit_request":
            raise ProtocolError(f"request.json holds a {msg.kind} message")
        request = FitRequest.from_dict(msg.payload)
    summary = node_fit(request, data)
    if labels_out is not None:
        write_labels(labels_out, summary.local_labels)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / f"summary-{summary.batch_id}.json"
    tmp = out.with_suffix(".tmp")
    tmp.write_bytes(WireMessage("batch_summary", summary.to_dict()).to_bytes() + b"\n")
    tmp.replace(out)
    return NodeOutcome(summary)


# ---------------------------------------------------------------------------
# coordinator side


@dataclass
class CoordinatorResult:
    model: GlobalModel
    summaries: list[BatchSummary]
    batch_ids: list[str]
    dropouts: list[str] = field(default_factory=list)
    inbound: list[bytes] = field(default_factory=list, repr=False)
    entropy_requests: int = 0

    def label_map(self) -> dict[str, list[int]]:
        """Per batch id, the global cluster of each local cluster."""
        lookup = {m: k for k, members in enumerate(self.model.membership) for m in members}
        return {bid: [lookup[(b, l)] for l in range(self.model.k_batches[b])]
                for b, bid in enumerate(self.model.batch_ids)}

    def report(self) -> dict:
        return {
            "batch_ids": list(self.batch_ids),
            "dropouts": list(self.dropouts),
            "n_clusters": self.model.n_clusters,
            "elbo": self.model.elbo_trace[-1] if self.model.elbo_trace else None,
            "merge_history": [[int(a), int(b)] for a, b in self.model.merge_history],
            "label_map": self.label_map(),
            "entropy_requests": self.entropy_requests,
            "cluster_sizes": (self.model.alpha_star - self.model.priors.alpha0).tolist(),
        }


def apply_label_map(local_labels, label_map: Sequence[int]) -> np.ndarray:
    table = np.asarray(label_map, dtype=np.int64)
    local_labels = np.asarray(local_labels, dtype=np.int64)
    if local_labels.size and (local_labels.min() < 0 or local_labels.max() >= table.size):
        raise ContractError("local label outside the summarised clusters")
    return table[local_labels]


class _NodeLink:
    """Coordinator end of one node connection."""

    def __init__(self, address: str, request: FitRequest, capture: list | None, lock: threading.Lock):
        self.address = address
        self.request = request
        self.capture = capture
        self.lock = lock
        self.sock: socket.socket | None = None
        self.summary: BatchSummary | None = None
        self.error: str | None = None

    def _recv(self) -> WireMessage:
        raw = read_frame(self.sock)
        if raw is None:
            raise ProtocolError(f"{self.address} closed the connection")
        if self.capture is not None:
            with self.lock:
                self.capture.append(encode_frame(raw))
        msg = WireMessage.from_bytes(raw)
        if msg.kind == "error":
            raise ProtocolError(f"{self.address}: {msg.payload.get('message')}")
        return msg

    def collect(self, deadline: float) -> None:
        try:
            while True:
                try:
                    remaining = max(deadline - time.monotonic(), 0.01)
                    self.sock = socket.create_connection(parse_address(self.address), timeout=remaining)
                    break
                except (ConnectionRefusedError, OSError):
                    if time.monotonic() >= deadline:
                        raise
                    time.sleep(0.05)
            self.sock.settimeout(max(deadline - time.monotonic(), 0.01))
            send_message(self.sock, self.request.message())
            msg = self._recv()
            if msg.kind != "batch_summary":
                raise ProtocolError(f"{self.address}: expected batch_summary, got {msg.kind}")
            summary = BatchSummary.from_dict(msg.payload)
            if summary.batch_id != self.request.batch_id:
                raise ProtocolError(f"{self.address}: summary for {summary.batch_id}, expected {self.request.batch_id}")
            self.summary = summary
            self.sock.settimeout(None)
        except (OSError, ContractError) as exc:
            self.error = f"{type(exc).__name__}: {exc}"
            self.close()

    def entropy(self, group_a, group_b) -> float:
        send_message(self.sock, WireMessage("entropy_request", {"group_a": list(group_a), "group_b": list(group_b)}))
        msg = self._recv()
        if msg.kind != "entropy_reply":
            raise ProtocolError(f"{self.address}: expected entropy_reply, got {msg.kind}")
        return float(msg.payload["value"])

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None


def fit_requests(n_nodes: int, config: MerDelConfig, priors: Priors | None = None, varsel: bool = False,
                 entropy_requests: bool = False, **kw) -> list[FitRequest]:
    """Per-node requests with the same seeds the in-process driver uses."""
    seeds, _ = batch_seeds(config.seed, n_nodes)
    priors = priors or Priors()
    return [FitRequest(replace(config, seed=s), priors, f"batch{b}", varsel,
                       entropy_requests=entropy_requests, **kw)
            for b, s in enumerate(seeds)]


def global_merge(summaries: list[BatchSummary], config: MerDelConfig, search_method: str,
                 criterion: str | None, corrector=None, cross_batch_only: bool = True,
                 stop_after: int = 10, n_planned: int | None = None) -> GlobalModel:
    g = combine_summaries(summaries)
    _, search_seed = batch_seeds(config.seed, n_planned or len(summaries))
    kw = {}
    if search_method == "random":
        kw = {"stop_after": stop_after, "candidate_pool": config.candidate_pool,
              "correlation_floor": config.correlation_floor, "cross_batch_only": cross_batch_only,
              "entropy_corrector": corrector}
    return search(g, search_method, criterion or config.merge_criterion, np.random.default_rng(search_seed),
                  g.priors, **kw)


def run_coordinator(nodes: Sequence[str] | None = None, summaries_dir=None, config: MerDelConfig | None = None,
                    priors: Priors | None = None, search_method: str = "greedy", criterion: str | None = None,
                    varsel: bool = False, cross_batch_only: bool = True, stop_after: int = 10,
                    timeout: float = DEFAULT_TIMEOUT, min_nodes: int = 1, capture: bool = False,
                    requests: Sequence[FitRequest] | None = None) -> CoordinatorResult:
    """Collect summaries (TCP nodes or a summary directory) and run the global merge."""
    config = config or MerDelConfig()
    if (nodes is None) == (summaries_dir is None):
        raise ContractError("give exactly one of a node list or a summaries directory")
    if summaries_dir is not None:
        return _coordinate_files(summaries_dir, config, search_method, criterion, stop_after, min_nodes)

    nodes = list(nodes)
    entropy_wanted = search_method == "random" and not cross_batch_only
    requests = list(requests) if requests is not None else fit_requests(
        len(nodes), config, priors, varsel, entropy_requests=entropy_wanted)
    if len(requests) != len(nodes):
        raise ContractError("one fit request per node is required")
    inbound: list[bytes] = [] if capture else None
    lock = threading.Lock()
    links = [_NodeLink(addr, req, inbound, lock) for addr, req in zip(nodes, requests)]
    deadline = time.monotonic() + timeout
    threads = [threading.Thread(target=link.collect, args=(deadline,), daemon=True) for link in links]
    for t in threads:
        t.start()
    for t in threads:
        t.join(max(deadline - time.monotonic(), 0.0))
    ok = [link for link, t in zip(links, threads) if not t.is_alive() and link.summary is not None]
    dropouts = [link.address for link in links if link not in ok]
    for link in links:
        if link not in ok:
            log.warning("node %s dropped: %s", link.address, link.error or "timed out")
            link.close()
    try:
        if len(ok) < min_nodes:
            raise PartialCollectionError(f"only {len(ok)} of {len(nodes)} nodes answered (need {min_nodes})")
        summaries = [link.summary for link in ok]
        counter = {"n": 0}
        corrector = None
        if entropy_wanted:
            def corrector(b, ga, gb):
                counter["n"] += 1
                return ok[b].entropy(ga, gb)
        g = global_merge(summaries, config, search_method, criterion, corrector, cross_batch_only,
                         stop_after, n_planned=len(nodes))
    finally:
        for link in links:
            link.close()
    return CoordinatorResult(g, summaries, [s.batch_id for s in summaries], dropouts,
                             inbound or [], counter["n"])


def read_summary_file(path) -> BatchSummary:
    msg = WireMessage.from_bytes(Path(path).read_bytes().strip())
    if msg.kind != "batch_summary":
        raise ProtocolError(f"{path} holds a {msg.kind} message")
    return BatchSummary.from_dict(msg.payload)


def _coordinate_files(summaries_dir, config, search_method, criterion, stop_after, min_nodes) -> CoordinatorResult:
    paths = sorted(Path(summaries_dir).glob("summary-*.json"))
    summaries = [read_summary_file(p) for p in paths]
    summaries.sort(key=lambda s: _batch_sort_key(s.batch_id))
    if len(summaries) < min_nodes:
        raise PartialCollectionError(f"found {len(summaries)} summaries in {summaries_dir} (need {min_nodes})")
    g = global_merge(summaries, config, search_method, criterion, None, True, stop_after)
    return CoordinatorResult(g, summaries, [s.batch_id for s in summaries])


def _batch_sort_key(batch_id: str):
    digits = "".join(ch for ch in batch_id if ch.isdigit())
    return (int(digits) if digits else -1, batch_id)


# ---------------------------------------------------------------------------
# data-minimality audit


@dataclass
class AuditReport:
    n_messages: int
    kinds: dict[str, int]
    violations: list[str]

    @property
    def clean(self) -> bool:
        return not self.violations


def _walk(obj, path="$"):
    yield path, obj
    if isinstance(obj, dict):
        for key, val in obj.items():
            yield from _walk(val, f"{path}.{key}")
    elif isinstance(obj, list):
        for i, val in enumerate(obj):
            yield from _walk(val, f"{path}[{i}]")


def audit_inbound(frames: Sequence[bytes], datasets: Sequence[CategoricalDataset]) -> AuditReport:
    """Scan coordinator-inbound frames for raw rows or per-observation arrays.

    A violation is any list as long as some batch (when batches are larger
    than both P and the cluster counts, so the check is unambiguous), any
    integer list equal to a data row, or a message kind a node should never
    send.
    """
    bodies = []
    for frame in frames:
        bodies.extend(decode_frames(frame))
    row_set = {tuple(int(v) for v in row) for d in datasets for row in d.values}
    n_vars = datasets[0].n_vars if datasets else 0
    violations, kinds = [], {}
    for i, body in enumerate(bodies):
        msg = WireMessage.from_bytes(body)
        kinds[msg.kind] = kinds.get(msg.kind, 0) + 1
        if msg.kind not in ("batch_summary", "entropy_reply", "error"):
            violations.append(f"message {i}: nodes must not send {msg.kind}")
        max_k = max(msg.payload.get("k_init", 0), msg.payload.get("k_clusters", 0))
        per_obs = {d.n_rows for d in datasets if d.n_rows > max(n_vars, max_k)}
        for path, node in _walk(msg.payload):
            if not isinstance(node, list):
                continue
            if len(node) in per_obs:
                violations.append(f"message {i}: {path} has one entry per observation ({len(node)})")
            if (len(node) == n_vars and node and all(type(v) is int for v in node)
                    and not path.endswith(".cardinalities") and tuple(node) in row_set):
                violations.append(f"message {i}: {path} equals a raw data row")
    return AuditReport(len(bodies), kinds, violations)

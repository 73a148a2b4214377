"""Experiment runner and crypto benchmarks.

A run sweeps clustering method x k x sharing strategy (plus the baseline
methods) over every experiment window and writes two CSV files:

``results.csv`` columns, in order::

    window, org, method, k, strategy, backend, tp, fp, fn, tpr, ppv, f1,
    tp_impr, fp_incr, fn_incr, cluster_size, collaborators

``summary.csv`` columns, in order::

    method, k, strategy, backend, windows, tpr, ppv, f1, tp_impr, fp_incr,
    fn_incr, cluster_size, collaborators

Summary values are macro averages (mean over orgs in a window, then over
windows); undefined relative metrics are left empty and skipped. Both files
start with a ``#`` provenance line carrying the seed and the config.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import io
import logging
import os
import random
import statistics
import struct
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .baselines import (
    VictimAttackerMatrix,
    cross_associate,
    select_pairs,
    ts_ca_knn_predict,
    ts_ca_predict,
)
from .coordination import ClusterAssignment, O2OMatrix, build_o2o, cluster, local_assignment
from .corpus import CorpusSpec, ExperimentWindow, OrgLog, build_windows, generate_synthetic, parse_logs
from .predictor import AugmentedTrainingSet, Blacklist, ForecastParams, PredictionMetrics, macro_average, predict_blacklist, score
from .sharing import STRATEGIES, augment, share_intersection, sketch_ip2ip_builder

logger = logging.getLogger(__name__)

CLUSTER_METHODS = ("agglomerative", "kmeans", "knn", "none")
BASELINE_METHODS = ("TS", "TS-CA", "TS-CA-kNN", "FREUD-A", "FREUD-B")
METHODS = CLUSTER_METHODS + BASELINE_METHODS
BACKENDS = ("plaintext", "psi", "server_aided")

RESULT_COLUMNS = (
    "window", "org", "method", "k", "strategy", "backend", "tp", "fp", "fn", "tpr", "ppv", "f1",
    "tp_impr", "fp_incr", "fn_incr", "cluster_size", "collaborators",
)
SUMMARY_COLUMNS = (
    "method", "k", "strategy", "backend", "windows", "tpr", "ppv", "f1",
    "tp_impr", "fp_incr", "fn_incr", "cluster_size", "collaborators",
)
_AVERAGED = ("tpr", "ppv", "f1", "tp_impr", "fp_incr", "fn_incr", "cluster_size", "collaborators")

ENV_OUTPUT = "HYBRIDCPB_OUTPUT_DIR"
ENV_WORKERS = "HYBRIDCPB_WORKERS"

USAGE = f"""\
config keys (key = value, lists comma-separated, '#' starts a comment):
  corpus      path to a date,org,ip[,sport,dport] CSV (else a synthetic corpus)
  n_orgs, n_days, corpus_seed, and any other synthetic-corpus field
  windows     'all' or comma-separated window indices
  methods     any of: {', '.join(METHODS)}
  k           cluster count / neighbours / FREUD-A percent / FREUD-B top-x
  strategies  any of: {', '.join(STRATEGIES)}
  backend     one of: {', '.join(BACKENDS)}
  alpha, tau, binary, threshold_percentile, multiset, ip2ip (exact|sketch)
  output_dir, seed, workers
"""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: str | None = None
    spec: CorpusSpec = field(default_factory=CorpusSpec.default)
    windows: tuple[int, ...] | None = None
    methods: tuple[str, ...] = ("kmeans",)
    k: tuple[int, ...] = (5,)
    strategies: tuple[str, ...] = ("local", "global", "intersection", "ip2ip", "ip2ip_and_intersection")
    backend: str = "plaintext"
    forecast: ForecastParams = ForecastParams()
    threshold_percentile: float = 40.0
    multiset: bool = False
    ip2ip: str = "exact"
    output_dir: str = "results"
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}\n{USAGE}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategy(ies) {bad}\n{USAGE}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}\n{USAGE}")
        if self.ip2ip not in ("exact", "sketch"):
            raise ConfigError("ip2ip must be 'exact' or 'sketch'")
        if not self.methods or not self.k or not self.strategies:
            raise ConfigError("methods, k and strategies must be non-empty")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @property
    def sharing_multiset(self) -> bool:
        # The PRP labels carry occurrence counters, so that back-end is multiset.
        return self.multiset or self.backend == "server_aided"

    def describe(self) -> str:
        parts = [
            f"corpus={self.corpus or 'synthetic'}",
            f"methods={','.join(self.methods)}",
            f"k={','.join(map(str, self.k))}",
            f"strategies={','.join(self.strategies)}",
            f"backend={self.backend}",
            f"alpha={self.forecast.alpha}",
            f"tau={self.forecast.tau}",
            f"multiset={self.sharing_multiset}",
            f"ip2ip={self.ip2ip}",
        ]
        if self.corpus is None:
            parts.append(f"corpus_seed={self.spec.seed}")
        return " ".join(parts)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _split(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


_SPEC_FLOATS = ("persistence", "base_rate", "noise_rate", "coverage", "hit_prob", "extra_events", "spill_prob")


def spec_from_kv(kv: Mapping[str, str]) -> CorpusSpec:
    """Synthetic corpus spec from flat keys (n_orgs, n_days, seed/corpus_seed, rates)."""
    kw: dict = {}
    for name in _SPEC_FLOATS:
        if name in kv:
            kw[name] = float(kv[name])
    if "attacker_groups" in kv:
        kw["attacker_groups"] = int(kv["attacker_groups"])
    seed = int(kv.get("corpus_seed", kv.get("seed", 1)))
    return CorpusSpec.default(n_orgs=int(kv.get("n_orgs", 70)), n_days=int(kv.get("n_days", 15)), seed=seed, **kw)


def config_from_kv(kv: Mapping[str, str], env: Mapping[str, str] | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    known = {f.name for f in fields(ExperimentConfig)} | {"alpha", "tau", "binary", "n_orgs", "n_days", "corpus_seed"}
    known |= set(_SPEC_FLOATS) | {"attacker_groups"}
    extra = set(kv) - known
    if extra:
        raise ConfigError(f"unknown config key(s) {sorted(extra)}\n{USAGE}")
    try:
        kw: dict = {}
        if "corpus" in kv:
            kw["corpus"] = kv["corpus"]
        spec_keys = {"n_orgs", "n_days", "corpus_seed", "attacker_groups", *_SPEC_FLOATS}
        if spec_keys & set(kv):
            kw["spec"] = spec_from_kv({k: v for k, v in kv.items() if k in spec_keys})
        if "windows" in kv and kv["windows"].lower() != "all":
            kw["windows"] = tuple(int(v) for v in _split(kv["windows"]))
        for key in ("methods", "strategies"):
            if key in kv:
                kw[key] = _split(kv[key])
        if "k" in kv:
            kw["k"] = tuple(int(v) for v in _split(kv["k"]))
        for key in ("backend", "ip2ip", "output_dir"):
            if key in kv:
                kw[key] = kv[key]
        if "threshold_percentile" in kv:
            kw["threshold_percentile"] = float(kv["threshold_percentile"])
        if "multiset" in kv:
            kw["multiset"] = _bool(kv["multiset"])
        for key in ("seed", "workers"):
            if key in kv:
                kw[key] = int(kv[key])
        kw["forecast"] = ForecastParams(
            alpha=float(kv.get("alpha", 0.9)), tau=float(kv.get("tau", 0.5)), binary=_bool(kv.get("binary", "true"))
        )
        if env.get(ENV_OUTPUT):
            kw["output_dir"] = env[ENV_OUTPUT]
        if env.get(ENV_WORKERS):
            kw["workers"] = int(env[ENV_WORKERS])
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    return ExperimentConfig(**kw)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    return config_from_kv(parse_kv(Path(path).read_text()), env)


# -- per-window evaluation -------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    window: int
    org: str
    method: str
    k: int
    strategy: str
    backend: str
    tp: int
    fp: int
    fn: int
    tpr: float
    ppv: float
    f1: float
    tp_impr: float | None
    fp_incr: float | None
    fn_incr: float | None
    cluster_size: int
    collaborators: int

    def as_csv(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in RESULT_COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def _rows(
    window: ExperimentWindow,
    method: str,
    k: int,
    strategy: str,
    backend: str,
    blacklists: Mapping[str, Blacklist],
    baseline: Mapping[str, tuple[int, int, int]],
    sizes: Mapping[str, tuple[int, int]],
) -> list[ResultRow]:
    out = []
    for org in window.orgs:
        counts = score(blacklists[org], window.truth[org])
        m = PredictionMetrics.from_counts(counts, baseline[org])
        size, collab = sizes.get(org, (1, 0))
        out.append(
            ResultRow(window.index, org, method, k, strategy, backend, m.tp, m.fp, m.fn, m.tpr, m.ppv, m.f1,
                      m.tp_impr, m.fp_incr, m.fn_incr, size, collab)
        )
    return out


def _assignment_sizes(assignment: ClusterAssignment) -> dict[str, tuple[int, int]]:
    peers = assignment.peers()
    out = {}
    for org in assignment.orgs:
        if assignment.mode == "partition":
            size = len(assignment.cluster_of(org)[0]) if assignment.cluster_of(org) else 1
        else:
            size = len(peers.get(org, ())) + 1
        out[org] = (size, len(peers.get(org, ())))
    return out


def _seed_for(seed: int, window: int) -> np.random.Generator:
    return np.random.default_rng([seed, window])


def _psi_dt_intersection(logs: Mapping[str, OrgLog], peers: Mapping[str, Iterable[str]], seed: int) -> dict:
    """Intersection sharing where each chunk travels through a PSI-DT session."""
    from .psi import psi_dt

    rng = random.Random(seed)
    records: dict[str, dict[int, bytes]] = {}
    for org, log in logs.items():
        by_src: dict[int, list[int]] = defaultdict(list)
        for day, src in zip(log.days.tolist(), log.sources.tolist()):
            by_src[src].append(day)
        records[org] = {s: struct.pack(f">{len(d)}i", *d) for s, d in by_src.items()}
    out: dict[str, dict[str, OrgLog]] = {}
    for org in logs:
        chunks = {}
        for peer in sorted(peers.get(org, ())):
            got = psi_dt(records[org].keys(), records[peer], rng=rng).result
            days, srcs = [], []
            for s in sorted(got):
                d = struct.unpack(f">{len(got[s]) // 4}i", got[s])
                days.extend(d)
                srcs.extend([s] * len(d))
            if srcs:
                chunks[peer] = OrgLog(peer, np.array(days, dtype=np.int64), np.array(srcs, dtype=np.int64))
        out[org] = chunks
    return out


def _server_aided_intersection(logs: Mapping[str, OrgLog], assignment: ClusterAssignment, rng) -> dict:
    """Intersection sharing through PRP labels, the STA buffers and local decryption."""
    from .server_aided import PrpKey, encrypt_with_keys, log_sharing, sta_o2o

    key = PrpKey.generate(rng)
    enc = {o: encrypt_with_keys(logs[o], key) for o in logs}
    buffer = sta_o2o([enc[o][0] for o in logs])
    peers = assignment.peers()
    out = {}
    for org in logs:
        deliveries = {p: buffer.buff.get((org, p), ()) for p in sorted(peers.get(org, ()))}
        out[org] = log_sharing(deliveries, enc[org][0], enc[org][1])
    return out


def _collaborative(
    window: ExperimentWindow, assignment: ClusterAssignment, strategy: str, config: ExperimentConfig, rng
) -> dict[str, Blacklist]:
    logs = dict(window.logs)
    builder = None
    if config.ip2ip == "sketch" and strategy in ("ip2ip", "ip2ip_and_intersection"):
        builder = sketch_ip2ip_builder(seed=config.seed, rng=rng)
    via_crypto = config.backend != "plaintext" and strategy in ("intersection", "ip2ip_and_intersection")
    base_strategy = strategy
    if via_crypto:
        base_strategy = "ip2ip" if strategy == "ip2ip_and_intersection" else "local"
    aug = augment(logs, assignment, base_strategy, window.train_days,
                  multiset=config.sharing_multiset, ip2ip_builder=builder)
    if via_crypto:
        if config.backend == "server_aided":
            shared = _server_aided_intersection(logs, assignment, rng)
        else:
            shared = _psi_dt_intersection(logs, assignment.peers(), config.seed + window.index)
        aug = {
            o: AugmentedTrainingSet(o, a.base, {**shared.get(o, {}), **a.extra}) for o, a in aug.items()
        }
    return {o: predict_blacklist(a, window.train_days, config.forecast) for o, a in aug.items()}


def _o2o(window: ExperimentWindow, config: ExperimentConfig, rng) -> O2OMatrix:
    backend = {"plaintext": "plaintext", "psi": "psi_ca", "server_aided": "server_aided"}[config.backend]
    psi_rng = random.Random(config.seed + window.index) if backend == "psi_ca" else rng
    return build_o2o(window.orgs, window.logs, backend, multiset=config.sharing_multiset, rng=psi_rng)


def evaluate_window(window: ExperimentWindow, config: ExperimentConfig) -> list[ResultRow]:
    rng = _seed_for(config.seed, window.index)
    params = config.forecast
    ts = {o: predict_blacklist(window.logs[o], window.train_days, params) for o in window.orgs}
    baseline = {o: score(ts[o], window.truth[o]) for o in window.orgs}
    rows: list[ResultRow] = []
    o2o = None
    plain_o2o = None
    ca = None

    for method in config.methods:
        if method in CLUSTER_METHODS:
            if o2o is None:
                o2o = _o2o(window, config, rng)
            for k in config.k if method != "none" else (0,):
                if method == "none":
                    assignment = local_assignment(window.orgs)
                else:
                    assignment = cluster(o2o, method, k, config.threshold_percentile, config.seed)
                sizes = _assignment_sizes(assignment)
                for strategy in config.strategies:
                    bls = ts if strategy == "local" else _collaborative(window, assignment, strategy, config, rng)
                    rows += _rows(window, method, k, strategy, config.backend, bls, baseline, sizes)
        elif method == "TS":
            rows += _rows(window, "TS", 0, "local", config.backend, ts, baseline, {})
        elif method == "TS-CA":
            m = VictimAttackerMatrix.from_logs(window.logs, window.orgs)
            ca = ca or cross_associate(m)
            groups = dict(zip(m.victims, ca.row_groups.tolist()))
            counts = np.bincount(ca.row_groups)
            sizes = {o: (int(counts[g]), int(counts[g]) - 1) for o, g in groups.items()}
            bls = ts_ca_predict(window, params, ca)
            rows += _rows(window, "TS-CA", 0, "pooled", config.backend, bls, baseline, sizes)
        elif method == "TS-CA-kNN":
            for k in config.k:
                if not 1 <= k < len(window.orgs):
                    logger.warning("window %d: TS-CA-kNN k=%d out of range, skipped", window.index, k)
                    continue
                bls = ts_ca_knn_predict(window, k, params)
                rows += _rows(window, "TS-CA-kNN", k, "pooled", config.backend, bls, baseline,
                              {o: (k + 1, k) for o in window.orgs})
        else:  # FREUD-A / FREUD-B
            if plain_o2o is None:
                plain_o2o = o2o if (o2o is not None and config.backend == "plaintext") else build_o2o(
                    window.orgs, window.logs, "plaintext", multiset=config.sharing_multiset
                )
            mode = "global_percent" if method == "FREUD-A" else "local_top_x"
            for k in config.k:
                try:
                    sel = select_pairs(plain_o2o, mode, k)
                except ValueError as exc:
                    logger.warning("window %d: %s k=%d skipped: %s", window.index, method, k, exc)
                    continue
                peers = sel.peers(window.orgs)
                shared = share_intersection(window.logs, peers, config.sharing_multiset)
                bls = {
                    o: predict_blacklist(AugmentedTrainingSet(o, window.logs[o], shared[o]), window.train_days, params)
                    for o in window.orgs
                }
                sizes = {o: (len(peers[o]) + 1, len(peers[o])) for o in window.orgs}
                rows += _rows(window, method, k, "intersection", config.backend, bls, baseline, sizes)
    return rows


# -- run -------------------------------------------------------------------


@dataclass
class RunResult:
    rows: list[ResultRow]
    summary: list[dict]
    skipped: dict[int, str]
    results_path: Path | None = None
    summary_path: Path | None = None


def load_windows(config: ExperimentConfig) -> list[ExperimentWindow]:
    if config.corpus:
        with open(config.corpus, newline="") as fh:
            parsed = parse_logs(fh)
        if parsed.rejects or parsed.invalid_ip:
            logger.info("corpus: %d rejected lines, %d non-routable sources", parsed.rejects, parsed.invalid_ip)
        events = parsed.events
        total_days = max(e.day for e in events) + 1 if events else 0
    else:
        events = generate_synthetic(config.spec)
        total_days = config.spec.n_days
    windows = build_windows(events, total_days)
    if config.windows is not None:
        wanted = set(config.windows)
        windows = [w for w in windows if w.index in wanted]
    return windows


def _safe_evaluate(args) -> tuple[int, list[ResultRow] | None, str | None]:
    window, config = args
    try:
        return window.index, evaluate_window(window, config), None
    except Exception as exc:  # one bad window must not sink the run
        logger.exception("window %d failed", window.index)
        return window.index, None, f"{type(exc).__name__}: {exc}"


def summarize(rows: Sequence[ResultRow]) -> list[dict]:
    cells: dict[tuple, dict[int, list[ResultRow]]] = defaultdict(lambda: defaultdict(list))
    order: list[tuple] = []
    for r in rows:
        key = (r.method, r.k, r.strategy, r.backend)
        if key not in cells:
            order.append(key)
        cells[key][r.window].append(r)
    out = []
    for key in order:
        per_window = cells[key]
        entry = dict(zip(("method", "k", "strategy", "backend"), key))
        entry["windows"] = len(per_window)
        for metric in _AVERAGED:
            entry[metric] = macro_average({w: [getattr(r, metric) for r in rs] for w, rs in per_window.items()})
        out.append(entry)
    return out


def _write_csv(path: Path | None, header_line: str, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        path.write_text(text)
    return text


def run(config: ExperimentConfig, write: bool = True) -> RunResult:
    windows = load_windows(config)
    if not windows:
        raise ConfigError("the corpus yields no experiment windows")
    jobs = [(w, config) for w in windows]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_safe_evaluate, jobs))
    else:
        outcomes = [_safe_evaluate(j) for j in jobs]
    rows: list[ResultRow] = []
    skipped = {}
    for index, result, error in sorted(outcomes, key=lambda t: t[0]):
        if result is None:
            logger.warning("window %d skipped: %s", index, error)
            skipped[index] = error
        else:
            rows.extend(result)
    summary = summarize(rows)
    head = f"# seed={config.seed} {config.describe()}"
    res_path = sum_path = None
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        res_path, sum_path = out / "results.csv", out / "summary.csv"
    _write_csv(res_path, head, RESULT_COLUMNS, (r.as_csv() for r in rows))
    _write_csv(sum_path, head, SUMMARY_COLUMNS, ([_fmt(s[c]) for c in SUMMARY_COLUMNS] for s in summary))
    return RunResult(rows, summary, skipped, res_path, sum_path)


def read_results(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- benchmarks ------------------------------------------------------------

BENCH_COLUMNS = ("protocol", "role", "n_orgs", "set_size", "repeats", "seconds_median", "bytes_median")


@dataclass(frozen=True)
class BenchRow:
    protocol: str
    role: str
    n_orgs: int
    set_size: int
    repeats: int
    seconds_median: float
    bytes_median: float

    def as_csv(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in BENCH_COLUMNS]


@contextlib.contextmanager
def _quiet_gc():
    """Keep collector pauses out of timed sections, as timeit does."""
    was = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _random_sets(rng: np.random.Generator, n: int, size: int, overlap: float = 0.3) -> list[list[int]]:
    """Sets of 24-bit values where roughly ``overlap`` of each set comes from a shared pool."""
    shared = rng.choice(1 << 24, size=max(1, size * 2), replace=False)
    out = []
    for _ in range(n):
        k = int(size * overlap)
        own = rng.choice(1 << 24, size=size - k, replace=False)
        out.append(list({*rng.choice(shared, size=k, replace=False).tolist(), *own.tolist()}))
    return out


def _sample_psi(
    protocol: str, cells: Sequence[tuple[int, int]], rng: np.random.Generator, group
) -> dict[tuple[int, int], tuple[float, int]]:
    """One org per (size, n) cell runs a session with each of its n - 1 peers.

    Returns that org's total (seconds, bytes) per cell. Sessions of all cells
    are timed interleaved, so slow phases of the host affect every cell alike.
    """
    from .psi import psi_ca, psi_dt

    state = {}
    for size, n in cells:
        prng = random.Random(int(rng.integers(1 << 62)))
        state[(size, n)] = dict(sets=_random_sets(rng, n, size), prng=prng, t=0.0, bytes=0)
    tasks = [((i + 0.5) / (n - 1), c, (size, n), i + 1) for c, (size, n) in enumerate(cells) for i in range(n - 1)]
    tasks.sort()
    with _quiet_gc():
        for _, _, cell, j in tasks:
            st = state[cell]
            me, peer = st["sets"][0], st["sets"][j]
            t0 = time.perf_counter()
            if protocol == "psi_ca":
                st["bytes"] += psi_ca(me, peer, group=group, rng=st["prng"]).total_bytes
            else:
                records = {s: struct.pack(">i", 0) for s in peer}
                st["bytes"] += psi_dt(me, records, group=group, rng=st["prng"]).total_bytes
            st["t"] += time.perf_counter() - t0
    return {cell: (st["t"], st["bytes"]) for cell, st in state.items()}


def _spread_schedule(cells: Sequence[tuple[int, int]]) -> list[tuple[tuple[int, int], int]]:
    """(cell, org index) tasks, each cell's orgs spaced evenly over the sweep."""
    tasks = [((i + 0.5) / n, c, (size, n), i) for c, (size, n) in enumerate(cells) for i in range(n)]
    tasks.sort()
    return [(cell, i) for _, _, cell, i in tasks]


def _sample_server_aided(
    cells: Sequence[tuple[int, int]], rng: np.random.Generator, cluster_size: int
) -> dict[tuple[int, int], tuple[list[float], list[int], float, int]]:
    """One run per (size, n) cell: (per-org seconds, per-org bytes, STA seconds, STA bytes).

    Per-org cost covers encrypting, submitting, receiving and decrypting
    within a fixed-size cluster; per-org values are lists over orgs. The
    per-org operations of all cells are timed interleaved, so slow phases of
    the host affect every cell alike.
    """
    from .server_aided import PrpKey, delivery_message, encrypt_with_keys, log_sharing, sta_o2o

    state = {}
    for size, n in cells:
        sets = _random_sets(rng, n, size)
        names = [f"o{i:04d}" for i in range(n)]
        logs = [OrgLog(o, rng.integers(0, 5, size=len(s)), np.array(s, dtype=np.int64)) for o, s in zip(names, sets)]
        state[(size, n)] = dict(names=names, logs=logs, key=PrpKey.generate(rng), enc=[None] * n, t=[0.0] * n)
    schedule = _spread_schedule(cells)

    with _quiet_gc():
        for cell, i in schedule:
            st = state[cell]
            t0 = time.perf_counter()
            st["enc"][i] = encrypt_with_keys(st["logs"][i], st["key"])
            st["t"][i] = time.perf_counter() - t0

    for cell in cells:
        st = state[cell]
        st["sub_bytes"] = [len(sub.to_message()) for sub, _ in st["enc"]]
        with _quiet_gc():
            t0 = time.perf_counter()
            st["buffer"] = sta_o2o([sub for sub, _ in st["enc"]])
            st["sta_t"] = time.perf_counter() - t0
        names, n = st["names"], len(st["names"])
        st["deliveries"] = [None] * n
        st["recv"] = [0] * n
        for lo in range(0, n, cluster_size):
            members = names[lo : lo + cluster_size]
            for i in range(lo, min(lo + cluster_size, n)):
                d = st["buffer"].deliveries(members, names[i])
                st["deliveries"][i] = d
                st["recv"][i] = sum(len(delivery_message(p, e)) for p, e in d.items())

    with _quiet_gc():
        for cell, i in schedule:
            st = state[cell]
            sub, keys = st["enc"][i]
            t0 = time.perf_counter()
            log_sharing(st["deliveries"][i], sub, keys)
            st["t"][i] += time.perf_counter() - t0

    out = {}
    for cell in cells:
        st = state[cell]
        out[cell] = (
            list(st["t"]),
            [a + b for a, b in zip(st["sub_bytes"], st["recv"])],
            st["sta_t"],
            sum(st["sub_bytes"]) + sum(st["recv"]),
        )
    return out


def bench(
    protocol: str,
    sizes: Sequence[int],
    orgs: Sequence[int],
    repeats: int = 3,
    seed: int = 0,
    group: str | None = None,
    cluster_size: int = 10,
) -> list[BenchRow]:
    """Medians over ``repeats`` runs per (size, n) cell.

    Repeats go round-robin over all cells so slow drift in machine speed
    lands on every cell alike instead of on whichever ran last. Server-aided
    per-org figures are medians over every org of every repeat, so small
    clusters get as stable an estimate as large ones.
    """
    if protocol not in ("psi_ca", "psi_dt", "server_aided"):
        raise ConfigError(f"unknown protocol {protocol!r}; choose psi_ca, psi_dt or server_aided")
    if any(n < 2 for n in orgs):
        raise ConfigError("benchmarks need at least two organizations")
    if repeats < 1:
        raise ConfigError("repeats must be positive")
    from .psi import group_by_name

    grp = group_by_name(group) if group else None
    rng = np.random.default_rng(seed)
    cells = [(size, n) for size in sizes for n in orgs]
    samples: dict[tuple[int, int], list[tuple]] = defaultdict(list)
    for rep in range(repeats):
        if protocol == "server_aided":
            for cell, sample in _sample_server_aided(cells, rng, cluster_size).items():
                samples[cell].append(sample)
        else:
            for cell, sample in _sample_psi(protocol, cells, rng, grp).items():
                samples[cell].append(sample)
        logger.info("bench %s repeat %d/%d done", protocol, rep + 1, repeats)
    out = []
    for size, n in cells:
        cols = list(zip(*samples[(size, n)]))
        if protocol == "server_aided":
            cols[0] = [t for run in cols[0] for t in run]
            cols[1] = [b for run in cols[1] for b in run]
        med = [statistics.median(c) for c in cols]
        if protocol == "server_aided":
            out.append(BenchRow(protocol, "per_org", n, size, repeats, med[0], med[1]))
            out.append(BenchRow(protocol, "sta", n, size, repeats, med[2], med[3]))
        else:
            out.append(BenchRow(protocol, "per_org", n, size, repeats, med[0], med[1]))
    return out


def bench_csv(rows: Sequence[BenchRow], path: str | Path | None = None, seed: int = 0) -> str:
    p = Path(path) if path is not None else None
    return _write_csv(p, f"# seed={seed}", BENCH_COLUMNS, (r.as_csv() for r in rows))


def fit_line(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2

"""Within-cluster sharing strategies producing each org's augmented training set."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .coordination import ClusterAssignment
from .corpus import OrgLog
from .predictor import AugmentedTrainingSet

Strategy = Literal["local", "global", "intersection", "ip2ip", "ip2ip_and_intersection"]
STRATEGIES: tuple[str, ...] = ("local", "global", "intersection", "ip2ip", "ip2ip_and_intersection")

HEAVY_HITTERS = 1000
CORRELATES = 50
IP2IP_KEY = "__ip2ip__"

Extras = dict[str, dict[str, OrgLog]]


def _all_peers(cluster: Mapping[str, OrgLog]) -> dict[str, frozenset[str]]:
    orgs = frozenset(cluster)
    return {o: orgs - {o} for o in cluster}


def _min_multiplicity_mask(own: OrgLog, peer: OrgLog) -> np.ndarray:
    """Mask over peer events whose (source, running count) also occurs in ``own``."""
    own_counts = Counter(own.sources.tolist())
    seen: Counter[int] = Counter()
    mask = np.zeros(len(peer), dtype=bool)
    for pos, s in enumerate(peer.sources.tolist()):
        seen[s] += 1
        if seen[s] <= own_counts.get(s, 0):
            mask[pos] = True
    return mask


def intersection_chunk(own: OrgLog, peer: OrgLog, multiset: bool = False) -> OrgLog:
    """Events of ``peer`` on sources ``own`` has also observed."""
    if multiset:
        mask = _min_multiplicity_mask(own, peer)
    else:
        mask = np.isin(peer.sources, np.unique(own.sources))
    return OrgLog(peer.org, peer.days[mask], peer.sources[mask])


def share_intersection(
    cluster: Mapping[str, OrgLog],
    peers: Mapping[str, Iterable[str]] | None = None,
    multiset: bool = False,
) -> Extras:
    """Each org receives, from each peer, the peer's events on their common sources.

    Sharing is pairwise: an org only hears from the peers listed for it.
    ``multiset=True`` restricts to min-multiplicity occurrence pairs.
    """
    peers = _all_peers(cluster) if peers is None else peers
    out: Extras = {}
    for org in cluster:
        chunks = {}
        for p in sorted(peers.get(org, ())):
            chunk = intersection_chunk(cluster[org], cluster[p], multiset)
            if len(chunk):
                chunks[p] = chunk
        out[org] = chunks
    return out


def share_global(cluster: Mapping[str, OrgLog], peers: Mapping[str, Iterable[str]] | None = None) -> Extras:
    peers = _all_peers(cluster) if peers is None else peers
    return {org: {p: cluster[p] for p in sorted(peers.get(org, ())) if len(cluster[p])} for org in cluster}


def heavy_hitters(cluster: Mapping[str, OrgLog] | Sequence[OrgLog], limit: int = HEAVY_HITTERS) -> tuple[int, ...]:
    """Top sources by total event count across the cluster; ties by numeric value."""
    logs = cluster.values() if isinstance(cluster, Mapping) else cluster
    src = np.concatenate([log.sources for log in logs] + [np.zeros(0, dtype=np.int64)])
    values, counts = np.unique(src, return_counts=True)
    order = np.lexsort((values, -counts))
    return tuple(values[order[:limit]].tolist())


def presence_matrix(log: OrgLog, domain: Sequence[int]) -> np.ndarray:
    """Binary (day x domain) matrix of which heavy hitters the org saw each day."""
    dom = np.asarray(domain, dtype=np.int64)
    if dom.size == 0 or len(log) == 0:
        return np.zeros((0, dom.size), dtype=np.int64)
    sorter = np.argsort(dom)
    pos = np.searchsorted(dom, log.sources, sorter=sorter)
    pos = np.clip(pos, 0, dom.size - 1)
    col = sorter[pos]
    hit = dom[col] == log.sources
    days, inv = np.unique(log.days[hit], return_inverse=True)
    x = np.zeros((days.size, dom.size), dtype=np.int64)
    x[inv, col[hit]] = 1
    return x


def cooccurrence(log: OrgLog, domain: Sequence[int]) -> np.ndarray:
    """Per-org IP2IP contribution: days on which both sources hit this org."""
    x = presence_matrix(log, domain)
    w = x.T @ x
    np.fill_diagonal(w, 0)
    return w


@dataclass(frozen=True, eq=False)
class IP2IPMatrix:
    domain: tuple[int, ...]
    weights: np.ndarray

    def weight(self, a: int, b: int) -> int:
        if a == b or a not in self._index or b not in self._index:
            return 0
        return int(self.weights[self._index[a], self._index[b]])

    @property
    def _index(self) -> dict[int, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.domain)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index_of(self, s: int) -> int | None:
        return self._index.get(s)


def build_ip2ip(cluster: Mapping[str, OrgLog], hh: Sequence[int] | None = None) -> IP2IPMatrix:
    """Exact co-occurrence counts over (victim, day) for heavy-hitter pairs."""
    hh = heavy_hitters(cluster) if hh is None else tuple(hh)
    w = np.zeros((len(hh), len(hh)), dtype=np.int64)
    for log in cluster.values():
        w += cooccurrence(log, hh)
    return IP2IPMatrix(hh, w)


def top_correlated(m: IP2IPMatrix, s: int, limit: int = CORRELATES) -> list[int]:
    i = m.index_of(s)
    if i is None:
        return []
    row = m.weights[i]
    dom = np.asarray(m.domain, dtype=np.int64)
    cand = np.flatnonzero(row > 0)
    cand = cand[cand != i]
    order = np.lexsort((dom[cand], -row[cand]))
    return dom[cand[order[:limit]]].tolist()


def ip2ip_correlates(log: OrgLog, m: IP2IPMatrix, limit: int = CORRELATES) -> set[int]:
    """Correlates of the heavy hitters this org saw, minus sources it already logs."""
    own = log.unique_sources()
    gained: set[int] = set()
    for s in sorted(own):
        if m.index_of(s) is not None:
            gained.update(top_correlated(m, s, limit))
    return gained - own


def share_ip2ip(
    cluster: Mapping[str, OrgLog], m: IP2IPMatrix, last_day: int, limit: int = CORRELATES
) -> Extras:
    """One synthetic event on ``last_day`` per new correlate."""
    out: Extras = {}
    for org, log in cluster.items():
        gained = sorted(ip2ip_correlates(log, m, limit))
        out[org] = {}
        if gained:
            src = np.array(gained, dtype=np.int64)
            out[org][IP2IP_KEY] = OrgLog(IP2IP_KEY, np.full(src.size, last_day, dtype=np.int64), src)
    return out


def _merge_extras(*parts: Extras) -> Extras:
    out: Extras = {}
    for part in parts:
        for org, chunks in part.items():
            dst = out.setdefault(org, {})
            for key, chunk in chunks.items():
                if key == IP2IP_KEY and key in dst:
                    merged = np.union1d(dst[key].sources, chunk.sources)
                    dst[key] = OrgLog(IP2IP_KEY, np.full(merged.size, chunk.days[0], dtype=np.int64), merged)
                else:
                    dst[key] = chunk
    return out


def augment(
    logs: Mapping[str, OrgLog],
    assignment: ClusterAssignment,
    strategy: Strategy,
    train_days: Sequence[int],
    *,
    multiset: bool = False,
    ip2ip_builder=None,
) -> dict[str, AugmentedTrainingSet]:
    """Apply ``strategy`` inside every cluster and return D'_i for each org.

    ``ip2ip_builder(cluster_logs, hh)`` replaces the exact IP2IP matrix
    construction (e.g. with the private sketch aggregation).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown sharing strategy {strategy!r}")
    orgs = list(assignment.orgs) or list(logs)
    extras: Extras = {o: {} for o in orgs}
    if strategy != "local":
        peers = assignment.peers()
        if strategy == "global":
            extras = _merge_extras(extras, share_global(logs, peers))
        if strategy in ("intersection", "ip2ip_and_intersection"):
            extras = _merge_extras(extras, share_intersection(logs, peers, multiset))
        if strategy in ("ip2ip", "ip2ip_and_intersection"):
            build = ip2ip_builder or (lambda cl, hh: build_ip2ip(cl, hh))
            for members in assignment.clusters:
                if len(members) < 2:
                    continue
                cl = {o: logs[o] for o in sorted(members)}
                m = build(cl, heavy_hitters(cl))
                extras = _merge_extras(extras, share_ip2ip(cl, m, train_days[-1]))
    return {o: AugmentedTrainingSet(o, logs[o], extras.get(o, {})) for o in orgs}


def sketch_ip2ip_builder(params=None, seed: int = 0, rng: np.random.Generator | None = None):
    """IP2IP construction where the STA only learns a privately summed Count-Min sketch.

    Each member sketches its own co-occurring heavy-hitter pairs; the
    aggregate is queried for every pair of the heavy-hitter domain.
    """
    from .sketch import CountMinSketch, encode_pairs, private_aggregate, size_sketch

    params = params or size_sketch()

    def build(cluster: Mapping[str, OrgLog], hh: Sequence[int]) -> IP2IPMatrix:
        dom = np.asarray(hh, dtype=np.int64)
        iu, ju = np.triu_indices(dom.size, k=1)
        sketches = {}
        for org, log in cluster.items():
            w = cooccurrence(log, hh)
            nz = w[iu, ju] > 0
            sk = CountMinSketch(params, seed)
            sk.update_many(encode_pairs(dom[iu[nz]], dom[ju[nz]]), w[iu, ju][nz])
            sketches[org] = sk
        total = private_aggregate(sketches, rng)
        est = total.query_many(encode_pairs(dom[iu], dom[ju])).astype(np.int64)
        weights = np.zeros((dom.size, dom.size), dtype=np.int64)
        weights[iu, ju] = est
        weights[ju, iu] = est
        return IP2IPMatrix(tuple(hh), weights)

    return build

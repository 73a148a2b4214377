"""O2O similarity matrices and the clustering back-ends run by the STA."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import IO, Literal, Mapping, Sequence

import numpy as np

from .corpus import OrgLog

Backend = Literal["plaintext", "psi_ca", "server_aided"]


class O2OError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class O2OMatrix:
    orgs: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.orgs)
        if counts.shape != (n, n):
            raise ValueError("counts must be n x n")
        if not np.array_equal(counts, counts.T):
            raise ValueError("O2O matrix must be symmetric")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return len(self.orgs)

    def __getitem__(self, pair: tuple[str, str]) -> int:
        i, j = (self.orgs.index(o) for o in pair)
        return int(self.counts[i, j])

    def to_csv(self, stream: IO[str] | None = None) -> str:
        buf = stream if stream is not None else io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.orgs)
        writer.writerows(self.counts.tolist())
        return buf.getvalue() if stream is None else ""

    @classmethod
    def from_csv(cls, stream: IO[str]) -> "O2OMatrix":
        rows = list(csv.reader(stream))
        return cls(tuple(rows[0]), np.array([[int(x) for x in r] for r in rows[1:]], dtype=np.int64))


def _plaintext_o2o(orgs: Sequence[str], logs: Mapping[str, OrgLog], multiset: bool) -> np.ndarray:
    all_src = np.unique(np.concatenate([logs[o].sources for o in orgs] + [np.zeros(0, dtype=np.int64)]))
    counts = np.zeros((len(orgs), all_src.size), dtype=np.int64)
    for i, o in enumerate(orgs):
        idx = np.searchsorted(all_src, logs[o].sources)
        if multiset:
            np.add.at(counts[i], idx, 1)
        else:
            counts[i, idx] = 1
    if not multiset:
        return counts @ counts.T
    out = np.zeros((len(orgs), len(orgs)), dtype=np.int64)
    for i in range(len(orgs)):
        out[i] = np.minimum(counts[i], counts).sum(axis=1)
    return out


def build_o2o(
    orgs: Sequence[str],
    logs: Mapping[str, OrgLog],
    backend: Backend = "plaintext",
    *,
    multiset: bool = False,
    group=None,
    rng=None,
) -> O2OMatrix:
    """Common-attack counts between every pair of organizations.

    ``plaintext`` and ``psi_ca`` count common unique /24 sources; with
    ``multiset=True`` plaintext counts min-multiplicity common occurrences,
    which is what ``server_aided`` computes from PRP labels.
    """
    orgs = tuple(orgs)
    if len(orgs) < 2:
        raise ValueError("need at least two organizations")
    if backend == "plaintext":
        return O2OMatrix(orgs, _plaintext_o2o(orgs, logs, multiset))
    if backend == "psi_ca":
        from .psi import psi_ca

        sets = {o: logs[o].unique_sources() for o in orgs}
        n = len(orgs)
        counts = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            counts[i, i] = len(sets[orgs[i]])
            for j in range(i + 1, n):
                try:
                    c = psi_ca(sets[orgs[i]], sets[orgs[j]], group=group, rng=rng).result
                except Exception as exc:
                    raise O2OError(f"PSI-CA session failed for pair ({orgs[i]}, {orgs[j]}): {exc}") from exc
                counts[i, j] = counts[j, i] = c
        return O2OMatrix(orgs, counts)
    if backend == "server_aided":
        from .server_aided import PrpKey, encrypt_dataset, sta_o2o

        key = PrpKey.generate(rng)
        buffer = sta_o2o([encrypt_dataset(logs[o], key) for o in orgs])
        return buffer.o2o
    raise ValueError(f"unknown O2O backend {backend!r}")


def cosine_distance_matrix(o2o: O2OMatrix | np.ndarray) -> np.ndarray:
    """1 - cosine similarity between O2O rows (diagonal included)."""
    x = np.asarray(o2o.counts if isinstance(o2o, O2OMatrix) else o2o, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    sim = (x @ x.T) / np.outer(safe, safe)
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    dist = np.clip(1.0 - sim, 0.0, 1.0)
    dist = (dist + dist.T) / 2
    np.fill_diagonal(dist, 0.0)
    return dist


def normalized_rows(o2o: O2OMatrix | np.ndarray) -> np.ndarray:
    x = np.asarray(o2o.counts if isinstance(o2o, O2OMatrix) else o2o, dtype=float)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """The ceil(p/100 * N)-th smallest value (1-based)."""
    vals = sorted(values)
    if not vals:
        raise ValueError("no values")
    rank = max(1, math.ceil(percentile / 100.0 * len(vals)))
    return vals[min(rank, len(vals)) - 1]


@dataclass(frozen=True)
class ClusterAssignment:
    clusters: tuple[frozenset[str], ...]
    mode: Literal["partition", "neighborhoods"] = "partition"
    orgs: tuple[str, ...] = ()
    dropped: frozenset[str] = frozenset()
    info: Mapping[str, object] = field(default_factory=dict, compare=False)

    def peers(self) -> dict[str, frozenset[str]]:
        """Org -> collaborators (members of any cluster that contains it)."""
        out: dict[str, set[str]] = {o: set() for o in self.orgs}
        for c in self.clusters:
            for o in c:
                out.setdefault(o, set()).update(c)
        return {o: frozenset(p - {o}) for o, p in out.items()}

    def cluster_of(self, org: str) -> list[frozenset[str]]:
        return [c for c in self.clusters if org in c]

    def canonical(self) -> frozenset[frozenset[str]]:
        return frozenset(self.clusters)


def local_assignment(orgs: Sequence[str]) -> ClusterAssignment:
    return ClusterAssignment(tuple(frozenset([o]) for o in orgs), "partition", tuple(orgs))


def agglomerative(dist: np.ndarray, k: int, orgs: Sequence[str] | None = None) -> ClusterAssignment:
    """Bottom-up average-linkage merging until ``k`` clusters remain.

    Ties between equally close pairs go to the pair whose smallest member
    indices are lowest.
    """
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    orgs = tuple(orgs) if orgs is not None else tuple(str(i) for i in range(n))
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    active = list(range(n))
    while len(active) > k:
        best = None
        for ai, a in enumerate(active):
            for b in active[ai + 1 :]:
                key = (d[a, b], min(members[a]), min(members[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        na, nb = len(members[a]), len(members[b])
        for c in active:
            if c not in (a, b):
                d[a, c] = d[c, a] = (na * d[a, c] + nb * d[b, c]) / (na + nb)
        members[a].extend(members.pop(b))
        active.remove(b)
    clusters = tuple(frozenset(orgs[i] for i in members[a]) for a in active)
    return ClusterAssignment(clusters, "partition", orgs)


def _canonical_order(orgs: Sequence[str]) -> list[int]:
    return sorted(range(len(orgs)), key=lambda i: orgs[i])


def kmeans(
    features: np.ndarray,
    k: int,
    orgs: Sequence[str] | None = None,
    threshold_percentile: float | None = 40.0,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-9,
) -> ClusterAssignment:
    """Lloyd's k-means with farthest-first seeding and a per-cluster distance cut.

    ``features`` are typically the L2-normalized O2O rows. After convergence,
    members farther from their centroid than the cluster's nearest-rank
    ``threshold_percentile`` distance are dropped and predict locally.
    """
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    orgs = tuple(orgs) if orgs is not None else tuple(str(i) for i in range(n))
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = _canonical_order(orgs)
    rng = np.random.default_rng(seed)
    centers_idx = [order[int(rng.integers(n))]]
    while len(centers_idx) < k:
        nearest = np.min(((x[:, None, :] - x[centers_idx][None, :, :]) ** 2).sum(-1), axis=1)
        best = max(order, key=lambda i: (nearest[i], -order.index(i)))
        centers_idx.append(best)
    centers = x[centers_idx].copy()
    inertia: list[float] = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(n), labels].sum()))
        new = centers.copy()
        for c in range(k):
            if np.any(labels == c):
                new[c] = x[labels == c].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    inertia.append(float(d2[np.arange(n), labels].sum()))
    dist_to_center = np.sqrt(d2[np.arange(n), labels])

    clusters = []
    dropped: set[str] = set()
    for c in range(k):
        idx = [i for i in range(n) if labels[i] == c]
        if not idx:
            continue
        kept = idx
        if threshold_percentile is not None:
            kept = threshold_members([dist_to_center[i] for i in idx], threshold_percentile, idx)
            dropped.update(orgs[i] for i in idx if i not in kept)
        clusters.append(frozenset(orgs[i] for i in kept))
        clusters.extend(frozenset([orgs[i]]) for i in idx if i not in kept)
    return ClusterAssignment(
        tuple(clusters), "partition", orgs, frozenset(dropped), {"inertia": inertia, "labels": labels.tolist()}
    )


def threshold_members(distances: Sequence[float], percentile: float, ids: Sequence | None = None) -> list:
    """Members whose distance is at most the nearest-rank percentile value."""
    ids = list(ids) if ids is not None else list(range(len(distances)))
    cut = nearest_rank(distances, percentile)
    return [i for i, d in zip(ids, distances) if d <= cut]


def _mean_pairwise(dist: np.ndarray, idx: Sequence[int]) -> float:
    sub = dist[np.ix_(idx, idx)]
    m = len(idx)
    return float(sub.sum() / (m * (m - 1))) if m > 1 else 0.0


def knn_neighborhoods(
    dist: np.ndarray,
    k: int,
    orgs: Sequence[str] | None = None,
    threshold_percentile: float | None = 40.0,
) -> ClusterAssignment:
    """One neighborhood per org: itself plus its ``k`` nearest others.

    Neighborhood strength is the mean pairwise distance of its members;
    those weaker than the nearest-rank percentile cutoff are discarded.
    """
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    orgs = tuple(orgs) if orgs is not None else tuple(str(i) for i in range(n))
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    hoods = []
    for i in range(n):
        others = sorted((j for j in range(n) if j != i), key=lambda j: (dist[i, j], orgs[j]))
        hoods.append([i, *others[:k]])
    strength = [_mean_pairwise(dist, h) for h in hoods]
    keep = list(range(n))
    if threshold_percentile is not None:
        cut = nearest_rank(strength, threshold_percentile)
        keep = [i for i in range(n) if strength[i] <= cut]
    clusters = tuple(frozenset(orgs[j] for j in hoods[i]) for i in keep)
    dropped = frozenset(orgs[i] for i in range(n) if i not in keep)
    return ClusterAssignment(
        clusters, "neighborhoods", orgs, dropped, {"strength": dict(zip(orgs, strength)), "owners": [orgs[i] for i in keep]}
    )


def cluster(
    o2o: O2OMatrix,
    algorithm: Literal["agglomerative", "kmeans", "knn", "none"],
    k: int,
    threshold_percentile: float | None = 40.0,
    seed: int = 0,
) -> ClusterAssignment:
    if algorithm == "none":
        return local_assignment(o2o.orgs)
    if algorithm == "agglomerative":
        return agglomerative(cosine_distance_matrix(o2o), k, o2o.orgs)
    if algorithm == "kmeans":
        return kmeans(normalized_rows(o2o), k, o2o.orgs, threshold_percentile, seed)
    if algorithm == "knn":
        return knn_neighborhoods(cosine_distance_matrix(o2o), k, o2o.orgs, threshold_percentile)
    raise ValueError(f"unknown clustering algorithm {algorithm!r}")

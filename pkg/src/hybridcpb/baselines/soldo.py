"""TS, TS-CA and TS-CA-kNN predictors built on co-clustered victims."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..corpus import ExperimentWindow, OrgLog
from ..predictor import AugmentedTrainingSet, Blacklist, ForecastParams, predict_blacklist
from .cross_association import CoClustering, VictimAttackerMatrix, cross_associate


def ts_predict(window: ExperimentWindow, params: ForecastParams = ForecastParams()) -> dict[str, Blacklist]:
    """Local time-series prediction from each org's own log."""
    return {o: predict_blacklist(window.logs[o], window.train_days, params) for o in window.orgs}


def candidate_pools(m: VictimAttackerMatrix, cc: CoClustering) -> dict[str, frozenset[int]]:
    """Own sources plus attackers in column groups whose block with the org's
    row group is denser than the whole matrix."""
    density = cc.block_density(m.cells.astype(float))
    mean = m.density
    attackers = np.asarray(m.attackers, dtype=np.int64)
    pools = {}
    for r, victim in enumerate(m.victims):
        dense = np.flatnonzero(density[cc.row_groups[r]] > mean)
        cols = np.isin(cc.col_groups, dense) | (m.cells[r] > 0)
        pools[victim] = frozenset(attackers[cols].tolist())
    return pools


def _restrict(log: OrgLog, pool: frozenset[int]) -> OrgLog:
    mask = np.isin(log.sources, np.fromiter(pool, dtype=np.int64, count=len(pool)))
    return OrgLog(log.org, log.days[mask], log.sources[mask])


def _pooled_predict(
    window: ExperimentWindow,
    logs: Mapping[str, OrgLog],
    holders: Mapping[str, Sequence[str]],
    params: ForecastParams,
    cc: CoClustering | None = None,
) -> tuple[dict[str, Blacklist], CoClustering]:
    """EWMA over the pooled series of each org's row-group mates and extra holders."""
    m = VictimAttackerMatrix.from_logs(logs, window.orgs)
    cc = cc or cross_associate(m)
    pools = candidate_pools(m, cc)
    group_of = dict(zip(m.victims, cc.row_groups.tolist()))
    out = {}
    for org in window.orgs:
        mates = {o for o in window.orgs if group_of[o] == group_of[org] and o != org}
        mates.update(h for h in holders.get(org, ()) if h != org)
        pool = pools[org]
        extra = {}
        for mate in sorted(mates):
            chunk = _restrict(window.logs[mate], pool)
            if len(chunk):
                extra[mate] = chunk
        aug = AugmentedTrainingSet(org, window.logs[org], extra)
        bl = predict_blacklist(aug, window.train_days, params)
        out[org] = Blacklist(org, bl.predicted & pool)
    return out, cc


def ts_ca_predict(
    window: ExperimentWindow, params: ForecastParams = ForecastParams(), cc: CoClustering | None = None
) -> dict[str, Blacklist]:
    return _pooled_predict(window, window.logs, {}, params, cc)[0]


def nearest_victims(m: VictimAttackerMatrix, k: int) -> dict[str, list[str]]:
    """k most cosine-similar victims per row; ties by org id."""
    n = len(m.victims)
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    x = m.cells.astype(float)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    sim = (x @ x.T) / np.outer(safe, safe)
    names = np.array(m.victims)
    out = {}
    for i, v in enumerate(m.victims):
        others = np.array([j for j in range(n) if j != i])
        order = np.lexsort((names[others], -sim[i, others]))
        out[v] = [m.victims[j] for j in others[order[:k]]]
    return out


def ts_ca_knn_predict(window: ExperimentWindow, k: int, params: ForecastParams = ForecastParams()) -> dict[str, Blacklist]:
    """Each org first pools its k nearest victims' logs, then TS-CA runs on the pooled rows."""
    m = VictimAttackerMatrix.from_logs(window.logs, window.orgs)
    nn = nearest_victims(m, k)
    pooled = {}
    for org in window.orgs:
        parts = [window.logs[org]] + [window.logs[p] for p in nn[org]]
        pooled[org] = OrgLog(
            org, np.concatenate([p.days for p in parts]), np.concatenate([p.sources for p in parts])
        )
    return _pooled_predict(window, pooled, nn, params)[0]

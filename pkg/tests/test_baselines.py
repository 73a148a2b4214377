from __future__ import annotations

import itertools

import numpy as np
import pytest

from hybridcpb.baselines.cross_association import codelength, log_star
from hybridcpb.baselines import (
    CoClustering,
    VictimAttackerMatrix,
    candidate_pairs,
    candidate_pools,
    cross_associate,
    nearest_victims,
    select_pairs,
    ts_ca_knn_predict,
    ts_ca_predict,
    ts_predict,
)
from hybridcpb.coordination import O2OMatrix
from hybridcpb.corpus import ExperimentWindow
from hybridcpb.predictor import AugmentedTrainingSet, ForecastParams, predict_blacklist
from hybridcpb.sharing import share_intersection

from .conftest import make_log

TRAIN = (0, 1, 2, 3, 4)


def _partition(groups):
    out = {}
    for i, g in enumerate(np.asarray(groups).tolist()):
        out.setdefault(g, set()).add(i)
    return {frozenset(s) for s in out.values()}


def planted(seed: int, noise: float = 0.0, n: int = 20) -> np.ndarray:
    rng = np.random.default_rng(seed)
    half = n // 2
    m = np.zeros((n, n), dtype=np.int8)
    m[:half, :half] = 1
    m[half:, half:] = 1
    flips = rng.random((n, n)) < noise
    m = np.where(flips, 1 - m, m)
    rp, cp = rng.permutation(n), rng.permutation(n)
    return m[np.ix_(rp, cp)], (rp < half), (cp < half)


def test_log_star():
    assert log_star(1) == pytest.approx(np.log2(2.865064))
    assert log_star(16) > log_star(4) > log_star(1)


def test_all_ones_is_one_block():
    cc = cross_associate(np.ones((12, 9)))
    assert (cc.k, cc.l) == (1, 1)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("noise", [0.0, 0.05])
def test_planted_blocks_recovered(seed, noise):
    m, row_truth, col_truth = planted(seed, noise)
    cc = cross_associate(m)
    assert _partition(cc.row_groups) == _partition(row_truth)
    assert _partition(cc.col_groups) == _partition(col_truth)
    if noise == 0.0:
        dens = cc.block_density(m.astype(float))
        assert set(np.round(dens, 12).ravel().tolist()) == {0.0, 1.0}
    h = cc.history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert cc.codelength == pytest.approx(codelength(m.astype(float), cc.row_groups, cc.col_groups))


def test_planted_beats_every_two_by_two_alternative():
    # exhaustive over row splits sharing the found column grouping
    m, _, _ = planted(3, n=8)
    cc = cross_associate(m)
    best = cc.codelength
    for mask in range(1, 2**8 - 1):
        rg = np.array([(mask >> i) & 1 for i in range(8)])
        assert codelength(m.astype(float), rg, cc.col_groups) >= best - 1e-9


def test_permutation_equivariance():
    m, _, _ = planted(7, 0.05)
    cc = cross_associate(m)
    rng = np.random.default_rng(1)
    rp, cp = rng.permutation(m.shape[0]), rng.permutation(m.shape[1])
    other = cross_associate(m[np.ix_(rp, cp)])
    assert _partition(other.row_groups) == _partition(cc.row_groups[rp])
    assert _partition(other.col_groups) == _partition(cc.col_groups[cp])


def test_group_ids_are_contiguous():
    m, _, _ = planted(2, 0.05)
    cc = cross_associate(m)
    assert sorted(set(cc.row_groups.tolist())) == list(range(cc.k))
    assert sorted(set(cc.col_groups.tolist())) == list(range(cc.l))
    with pytest.raises(ValueError):
        cross_associate(np.zeros((0, 3)))


def test_matrix_from_logs():
    logs = {"a": make_log("a", [(0, 5), (1, 5), (2, 7)]), "b": make_log("b", [(0, 9)])}
    m = VictimAttackerMatrix.from_logs(logs)
    assert m.victims == ("a", "b") and m.attackers == (5, 7, 9)
    assert m.cells.tolist() == [[1, 1, 0], [0, 0, 1]]
    assert m.density == pytest.approx(0.5)


def _window(logs: dict, truth: dict | None = None) -> ExperimentWindow:
    orgs = tuple(sorted(logs))
    return ExperimentWindow(0, TRAIN, 5, orgs, logs, truth or {o: frozenset() for o in orgs})


def _group_fixture():
    """Two victim groups with disjoint attackers; a has never seen source 5."""
    logs = {}
    for o in ("a", "b", "c"):
        ev = [(d, s) for d in TRAIN for s in (1, 2, 3, 4)]
        if o != "a":
            ev += [(3, 5), (4, 5)]
        logs[o] = make_log(o, ev)
    for o in ("d", "e", "f"):
        logs[o] = make_log(o, [(d, s) for d in TRAIN for s in (20, 21, 22, 23)])
    return _window(logs)


def test_group_mates_extend_candidate_pool():
    w = _group_fixture()
    m = VictimAttackerMatrix.from_logs(w.logs, w.orgs)
    cc = cross_associate(m)
    groups = dict(zip(m.victims, cc.row_groups.tolist()))
    assert groups["a"] == groups["b"] == groups["c"] != groups["d"]
    pools = candidate_pools(m, cc)
    assert 5 in pools["a"]
    assert not pools["a"] & {20, 21, 22, 23}
    pred = ts_ca_predict(w)
    assert 5 in pred["a"].predicted
    assert 5 not in ts_predict(w)["a"].predicted


def test_singleton_row_groups_reduce_to_ts(small_window):
    w = small_window
    m = VictimAttackerMatrix.from_logs(w.logs, w.orgs)
    cc = CoClustering(np.arange(len(w.orgs)), np.zeros(len(m.attackers), dtype=np.int64), 0.0, ())
    ts = ts_predict(w)
    got = ts_ca_predict(w, cc=cc)
    assert all(got[o].predicted == ts[o].predicted for o in w.orgs)


def test_ts_ca_contains_ts(small_window):
    ts = ts_predict(small_window)
    ca = ts_ca_predict(small_window)
    assert all(ts[o].predicted <= ca[o].predicted for o in small_window.orgs)


def test_knn_pools_the_whole_group():
    w = _group_fixture()
    pred = ts_ca_knn_predict(w, 2)
    assert 5 in pred["a"].predicted
    nn = nearest_victims(VictimAttackerMatrix.from_logs(w.logs, w.orgs), 2)
    assert set(nn["a"]) == {"b", "c"}
    assert set(nn["d"]) <= {"e", "f"}


def test_knn_twin_equals_twin_pooled_ts():
    twin = [(d, s) for d in (2, 3, 4) for s in (1, 2)] + [(0, 3)]
    logs = {"a": make_log("a", twin), "a2": make_log("a2", twin)}
    for i, o in enumerate(("x", "y", "z")):
        logs[o] = make_log(o, [(d, 100 * (i + 1) + s) for d in TRAIN for s in range(i + 1)])
    w = _window(logs)
    got = ts_ca_knn_predict(w, 1)
    expect = predict_blacklist(AugmentedTrainingSet("a", logs["a"], {"a2": logs["a2"]}), TRAIN, ForecastParams())
    assert got["a"].predicted == expect.predicted


def test_knn_bounds(small_window):
    m = VictimAttackerMatrix.from_logs(small_window.logs, small_window.orgs)
    with pytest.raises(ValueError):
        nearest_victims(m, len(m.victims))
    with pytest.raises(ValueError):
        nearest_victims(m, 0)
    with pytest.raises(ValueError):
        ts_ca_knn_predict(small_window, len(small_window.orgs))


def _o2o(c: np.ndarray, names=None) -> O2OMatrix:
    n = c.shape[0]
    return O2OMatrix(tuple(names or (f"o{i:03d}" for i in range(n))), c)


def _random_o2o(n: int, seed: int = 0) -> O2OMatrix:
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 1000, (n, n))
    c = np.triu(c, 1)
    c = c + c.T
    np.fill_diagonal(c, 5000)
    return _o2o(c)


def test_candidate_pair_counts():
    assert candidate_pairs(100) == 4950
    assert candidate_pairs(70) == 2415
    assert len(select_pairs(_random_o2o(70), "global_percent", 2).pairs) == 49
    assert len(select_pairs(_random_o2o(100), "global_percent", 1).pairs) == 50


def test_global_selection_ranks_by_count():
    o2o = _random_o2o(12, seed=3)
    sel = select_pairs(o2o, "global_percent", 10)
    c = o2o.counts
    idx = {o: i for i, o in enumerate(o2o.orgs)}
    chosen = sorted(c[idx[a], idx[b]] for a, b in sel.pairs)
    rest = [c[i, j] for i, j in itertools.combinations(range(12), 2) if (o2o.orgs[i], o2o.orgs[j]) not in sel.pairs]
    assert min(chosen) >= max(rest)


def test_complete_graph_at_the_limits():
    o2o = _random_o2o(9)
    full = {tuple(p) for p in itertools.combinations(o2o.orgs, 2)}
    assert select_pairs(o2o, "global_percent", 100).pairs == full
    assert select_pairs(o2o, "local_top_x", 8).pairs == full
    with pytest.raises(ValueError):
        select_pairs(o2o, "local_top_x", 9)
    with pytest.raises(ValueError):
        select_pairs(o2o, "global_percent", 0)
    with pytest.raises(ValueError):
        select_pairs(o2o, "best_friends", 1)


def test_mutual_nearest_pairs_selected_once():
    c = np.array([[9, 8, 1, 1], [8, 9, 1, 1], [1, 1, 9, 7], [1, 1, 7, 9]])
    sel = select_pairs(_o2o(c, "abcd"), "local_top_x", 1)
    assert sel.pairs == {("a", "b"), ("c", "d")}


def test_pair_sharing_is_not_transitive():
    c = np.array([[5, 4, 0], [4, 5, 3], [0, 3, 5]])
    sel = select_pairs(_o2o(c, "abc"), "local_top_x", 1)
    assert sel.pairs == {("a", "b"), ("b", "c")}
    peers = sel.peers("abc")
    assert peers == {"a": {"b"}, "b": {"a", "c"}, "c": {"b"}}
    logs = {o: make_log(o, [(0, 1), (1, 1)]) for o in "abc"}
    shared = share_intersection(logs, peers)
    assert set(shared["a"]) == {"b"} and set(shared["c"]) == {"b"}

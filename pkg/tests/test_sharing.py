from __future__ import annotations

import itertools

import numpy as np
import pytest

from hybridcpb.coordination import ClusterAssignment, local_assignment
from hybridcpb.corpus import OrgLog
from hybridcpb.predictor import ForecastParams, predict_blacklist
from hybridcpb.sharing import (
    IP2IP_KEY,
    augment,
    build_ip2ip,
    heavy_hitters,
    intersection_chunk,
    share_global,
    share_intersection,
    share_ip2ip,
    sketch_ip2ip_builder,
    top_correlated,
)
from hybridcpb.sketch import size_sketch

from .conftest import as_pairs, make_log, random_logs

TRAIN = (0, 1, 2, 3, 4)


def test_intersection_only_common_sources():
    cl = {"i": make_log("i", [(0, 1), (1, 2), (2, 3)]), "j": make_log("j", [(0, 2), (3, 3), (4, 4), (4, 2)])}
    got = share_intersection(cl)
    assert as_pairs(got["i"]["j"]) == [(0, 2), (3, 3), (4, 2)]
    assert 4 not in got["i"]["j"].unique_sources()
    assert as_pairs(got["j"]["i"]) == [(1, 2), (2, 3)]


def test_disjoint_logs_exchange_nothing():
    cl = {"i": make_log("i", [(0, 1)]), "j": make_log("j", [(0, 2)])}
    assert share_intersection(cl) == {"i": {}, "j": {}}


def test_three_orgs_one_common_source():
    cl = {
        "a": make_log("a", [(0, 9), (1, 1)]),
        "b": make_log("b", [(2, 9), (1, 2)]),
        "c": make_log("c", [(3, 9), (4, 9), (1, 3)]),
    }
    got = share_intersection(cl)
    assert as_pairs(got["a"]["b"]) == [(2, 9)]
    assert as_pairs(got["a"]["c"]) == [(3, 9), (4, 9)]
    assert as_pairs(got["c"]["a"]) == [(0, 9)] and as_pairs(got["c"]["b"]) == [(2, 9)]


def _brute_intersection(cl, multiset):
    out = {}
    for i, j in itertools.permutations(cl, 2):
        own = cl[i].sources.tolist()
        seen = {}
        keep = []
        for d, s in zip(cl[j].days.tolist(), cl[j].sources.tolist()):
            seen[s] = seen.get(s, 0) + 1
            if (multiset and seen[s] <= own.count(s)) or (not multiset and s in own):
                keep.append((d, s))
        out[(i, j)] = sorted(keep)
    return out


@pytest.mark.parametrize("multiset", [False, True])
def test_intersection_matches_brute_force(multiset):
    rng = np.random.default_rng(5)
    for _ in range(10):
        cl = random_logs(rng, 4, 30, universe=20)
        got = share_intersection(cl, multiset=multiset)
        for (i, j), expect in _brute_intersection(cl, multiset).items():
            chunk = got[i].get(j)
            assert (as_pairs(chunk) if chunk is not None else []) == expect
            # privacy scope: nothing outside the recipient's own sources
            if chunk is not None:
                assert chunk.unique_sources() <= cl[i].unique_sources()


def test_global_shares_everything_and_contains_intersection():
    rng = np.random.default_rng(6)
    cl = random_logs(rng, 3, 25, universe=15)
    g = share_global(cl)
    inter = share_intersection(cl)
    for org in cl:
        assert sum(len(c) for c in g[org].values()) == sum(len(cl[p]) for p in cl if p != org)
        for peer, chunk in inter[org].items():
            gp = as_pairs(g[org][peer])
            for ev in as_pairs(chunk):
                assert ev in gp
    assert share_global({"a": make_log("a", [(0, 1)])}) == {"a": {}}


def test_non_transitive_peers():
    cl = {"a": make_log("a", [(0, 1)]), "b": make_log("b", [(0, 1)]), "c": make_log("c", [(1, 1)])}
    got = share_intersection(cl, {"a": {"b"}, "b": {"a", "c"}, "c": {"b"}})
    assert set(got["a"]) == {"b"} and set(got["c"]) == {"b"}


def test_heavy_hitters_rank_and_ties():
    cl = {"a": make_log("a", [(0, 5), (0, 5), (0, 3), (1, 9)]), "b": make_log("b", [(0, 3), (0, 7), (1, 9)])}
    assert heavy_hitters(cl) == (3, 5, 9, 7)
    assert heavy_hitters(cl, limit=2) == (3, 5)
    assert heavy_hitters(dict(reversed(list(cl.items())))) == heavy_hitters(cl)


def test_ip2ip_counts_shared_victim_days():
    cl = {
        "a": make_log("a", [(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2), (3, 1)]),
        "b": make_log("b", [(0, 3), (1, 4)]),
    }
    m = build_ip2ip(cl)
    assert m.weight(1, 2) == 3 == m.weight(2, 1)
    assert m.weight(1, 3) == 0 and m.weight(1, 1) == 0
    assert m.weight(1, 12345) == 0


def _brute_ip2ip(cl, hh):
    w = {}
    for log in cl.values():
        for d in set(log.days.tolist()):
            present = {s for dd, s in zip(log.days.tolist(), log.sources.tolist()) if dd == d and s in hh}
            for a, b in itertools.combinations(sorted(present), 2):
                w[(a, b)] = w.get((a, b), 0) + 1
    return w


def test_ip2ip_against_brute_force():
    rng = np.random.default_rng(11)
    cl = random_logs(rng, 3, 60, universe=25)
    m = build_ip2ip(cl)
    expect = _brute_ip2ip(cl, set(m.domain))
    for a, b in itertools.combinations(m.domain, 2):
        assert m.weight(a, b) == expect.get(tuple(sorted((a, b))), 0)


def test_top_correlated_ranking():
    cl = {
        "a": make_log("a", [(0, 1), (0, 2), (1, 1), (1, 2), (0, 3), (2, 1), (2, 4)]),
        "b": make_log("b", [(0, 1), (0, 4), (1, 9)]),
    }
    m = build_ip2ip(cl)
    # weights with 1: 2 -> 2 days, 4 -> 2 (a day 2, b day 0), 3 -> 1
    assert top_correlated(m, 1) == [2, 4, 3]
    assert top_correlated(m, 1, limit=2) == [2, 4]
    assert top_correlated(m, 9) == []
    assert top_correlated(m, 424242) == []


def test_share_ip2ip_injects_last_day_events():
    cl = {
        "a": make_log("a", [(0, 1), (0, 2), (1, 1), (1, 2)]),
        "b": make_log("b", [(3, 1)]),
    }
    m = build_ip2ip(cl)
    got = share_ip2ip(cl, m, last_day=4)
    assert as_pairs(got["b"][IP2IP_KEY]) == [(4, 2)]
    assert got["a"] == {}  # already logs both
    aug = augment(cl, ClusterAssignment((frozenset(cl),), "partition", ("a", "b")), "ip2ip", TRAIN)
    assert 2 in predict_blacklist(aug["b"], TRAIN, ForecastParams(0.9, 0.5)).predicted


def test_combined_strategy_is_union():
    rng = np.random.default_rng(2)
    cl = random_logs(rng, 4, 50, universe=30)
    asg = ClusterAssignment((frozenset(cl),), "partition", tuple(cl))
    both = augment(cl, asg, "ip2ip_and_intersection", TRAIN)
    inter = augment(cl, asg, "intersection", TRAIN)
    ip = augment(cl, asg, "ip2ip", TRAIN)
    for o in cl:
        assert set(both[o].extra) == set(inter[o].extra) | set(ip[o].extra)
        assert both[o].extra_sources() == inter[o].extra_sources() | ip[o].extra_sources()


def test_local_intersection_global_predictions_nest():
    rng = np.random.default_rng(3)
    cl = random_logs(rng, 5, 80, universe=40)
    asg = ClusterAssignment((frozenset(cl),), "partition", tuple(cl))
    p = ForecastParams(0.9, 0.5)
    sets = {s: {o: predict_blacklist(a, TRAIN, p).predicted for o, a in augment(cl, asg, s, TRAIN).items()} for s in ("local", "intersection", "global")}
    for o in cl:
        assert sets["local"][o] <= sets["intersection"][o] <= sets["global"][o]


def test_local_ignores_clusters_and_unknown_strategy_fails():
    cl = random_logs(np.random.default_rng(1), 3, 10)
    aug = augment(cl, local_assignment(tuple(cl)), "global", TRAIN)
    assert all(a.extra == {} for a in aug.values())
    with pytest.raises(ValueError):
        augment(cl, local_assignment(tuple(cl)), "everything", TRAIN)


def test_sketch_builder_never_underestimates_exact_matrix():
    rng = np.random.default_rng(4)
    cl = random_logs(rng, 3, 80, universe=30)
    hh = heavy_hitters(cl)
    exact = build_ip2ip(cl, hh)
    approx = sketch_ip2ip_builder(size_sketch(0.05, 0.05, 1000), seed=3, rng=rng)(cl, hh)
    assert (approx.weights >= exact.weights).all()
    assert np.array_equal(approx.weights, approx.weights.T)


def test_multiset_intersection_chunk():
    own = make_log("a", [(0, 1), (1, 1), (2, 2)])
    peer = make_log("b", [(0, 1), (1, 1), (2, 1), (3, 2), (4, 2)])
    assert as_pairs(intersection_chunk(own, peer, multiset=True)) == [(0, 1), (1, 1), (3, 2)]
    assert len(intersection_chunk(own, OrgLog.empty("b"))) == 0

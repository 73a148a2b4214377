"""Pairwise collaboration: pick org pairs by common-attack count, then share intersections."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..coordination import O2OMatrix

PairMode = Literal["global_percent", "local_top_x"]


def candidate_pairs(n: int) -> int:
    return n * (n - 1) // 2


@dataclass(frozen=True)
class PairSelection:
    pairs: frozenset[tuple[str, str]]
    mode: PairMode

    def peers(self, orgs) -> dict[str, frozenset[str]]:
        """Direct partners only; sharing along selected pairs is not transitive."""
        out: dict[str, set[str]] = {o: set() for o in orgs}
        for a, b in self.pairs:
            out.setdefault(a, set()).add(b)
            out.setdefault(b, set()).add(a)
        return {o: frozenset(p) for o, p in out.items()}


def select_pairs(o2o: O2OMatrix, mode: PairMode, amount: float) -> PairSelection:
    """``global_percent``: top ceil(amount% of all pairs) by count.
    ``local_top_x``: each org's ``amount`` highest-count partners, deduplicated."""
    orgs = list(o2o.orgs)
    n = len(orgs)
    c = np.asarray(o2o.counts)
    if mode == "global_percent":
        if not 0 < amount <= 100:
            raise ValueError("percentage must be in (0, 100]")
        iu, ju = np.triu_indices(n, k=1)
        keep = math.ceil(round(amount / 100.0 * candidate_pairs(n), 9))
        order = np.lexsort((ju, iu, -c[iu, ju]))[:keep]
        pairs = {tuple(sorted((orgs[iu[t]], orgs[ju[t]]))) for t in order}
    elif mode == "local_top_x":
        x = int(amount)
        if not 1 <= x <= n - 1:
            raise ValueError(f"x must be in [1, {n - 1}]")
        names = np.array(orgs)
        pairs = set()
        for i in range(n):
            others = np.array([j for j in range(n) if j != i])
            order = np.lexsort((names[others], -c[i, others]))[:x]
            pairs.update(tuple(sorted((orgs[i], orgs[j]))) for j in others[order])
    else:
        raise ValueError(f"unknown pair selection mode {mode!r}")
    return PairSelection(frozenset(pairs), mode)

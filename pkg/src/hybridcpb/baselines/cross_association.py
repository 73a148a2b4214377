"""Cross-Association: parameter-free MDL co-clustering of a binary matrix.

The total codelength is the model cost (group counts, group sizes, per-block
one-counts) plus the entropy-coded block contents. Search alternates row and
column reassignment for fixed group counts and grows the counts by split
proposals that are kept only when the total codelength strictly drops.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..corpus import OrgLog

logger = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class VictimAttackerMatrix:
    """Binary victims x attacker /24 matrix over the training days."""

    victims: tuple[str, ...]
    attackers: tuple[int, ...]
    cells: np.ndarray

    def __post_init__(self) -> None:
        if self.cells.shape != (len(self.victims), len(self.attackers)):
            raise ValueError("cell grid does not match labels")
        if self.cells.size and not np.isin(self.cells, (0, 1)).all():
            raise ValueError("matrix must be binary")

    @classmethod
    def from_logs(cls, logs: Mapping[str, OrgLog], victims: Sequence[str] | None = None) -> "VictimAttackerMatrix":
        victims = tuple(victims if victims is not None else sorted(logs))
        cols = np.unique(np.concatenate([logs[v].sources for v in victims] + [np.zeros(0, dtype=np.int64)]))
        cells = np.zeros((len(victims), cols.size), dtype=np.int8)
        for r, v in enumerate(victims):
            cells[r, np.searchsorted(cols, np.unique(logs[v].sources))] = 1
        return cls(victims, tuple(cols.tolist()), cells)

    @property
    def density(self) -> float:
        return float(self.cells.mean()) if self.cells.size else 0.0


@dataclass(frozen=True, eq=False)
class CoClustering:
    row_groups: np.ndarray
    col_groups: np.ndarray
    codelength: float
    history: tuple[float, ...] = field(default=())

    @property
    def k(self) -> int:
        return int(self.row_groups.max()) + 1 if self.row_groups.size else 0

    @property
    def l(self) -> int:
        return int(self.col_groups.max()) + 1 if self.col_groups.size else 0

    def block_density(self, cells: np.ndarray) -> np.ndarray:
        ones, sizes = _block_stats(cells, self.row_groups, self.col_groups, self.k, self.l)
        return np.divide(ones, sizes, out=np.zeros_like(ones, dtype=float), where=sizes > 0)


def log_star(x: float) -> float:
    """Universal code length for a positive integer, in bits."""
    total = math.log2(2.865064)
    v = float(x)
    while v > 1.0:
        v = math.log2(v)
        if v <= 0:
            break
        total += v
    return total


def _relabel(groups: np.ndarray) -> np.ndarray:
    """Contiguous ids from 0 in order of first appearance."""
    _, first, inv = np.unique(groups, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inv].astype(np.int64)


def _indicator(groups: np.ndarray, n_groups: int, weights: np.ndarray) -> np.ndarray:
    ind = np.zeros((groups.size, n_groups))
    ind[np.arange(groups.size), groups] = weights
    return ind


def _block_stats(
    cells: np.ndarray, rg: np.ndarray, cg: np.ndarray, k: int, l: int, rw: np.ndarray | None = None, cw: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    rw = np.ones(rg.size) if rw is None else rw
    cw = np.ones(cg.size) if cw is None else cw
    ones = _indicator(rg, k, rw).T @ cells @ _indicator(cg, l, cw)
    sizes = np.outer(np.bincount(rg, rw, k), np.bincount(cg, cw, l))
    return ones, sizes


def _size_cost(sizes: np.ndarray) -> float:
    a = np.sort(np.rint(sizes))[::-1]
    k = a.size
    bits = 0.0
    for i in range(k - 1):
        bound = a[i:].sum() - (k - 1 - i)
        bits += math.ceil(math.log2(bound)) if bound > 1 else 0
    return bits


def codelength(
    cells: np.ndarray, rg: np.ndarray, cg: np.ndarray, rw: np.ndarray | None = None, cw: np.ndarray | None = None
) -> float:
    """Total bits: model description plus entropy-coded blocks.

    ``rw``/``cw`` are multiplicities of identical rows/columns collapsed
    into one; the result equals the cost of the expanded matrix.
    """
    rw = np.ones(rg.size) if rw is None else rw
    cw = np.ones(cg.size) if cw is None else cw
    k, l = int(rg.max()) + 1, int(cg.max()) + 1
    ones, sizes = _block_stats(cells, rg, cg, k, l, rw, cw)
    model = log_star(k) + log_star(l)
    model += _size_cost(np.bincount(rg, rw, k)) + _size_cost(np.bincount(cg, cw, l))
    model += float(np.ceil(np.log2(sizes + 1) - 1e-9).sum())
    p = np.divide(ones, sizes, out=np.zeros_like(ones), where=sizes > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return model + float((sizes * h).sum())


def _per_row_cost(cells, rg, cg, rw, cw):
    """Bits to encode each row under every row group's block densities (rows x k)."""
    k, l = int(rg.max()) + 1, int(cg.max()) + 1
    ones, sizes = _block_stats(cells, rg, cg, k, l, rw, cw)
    p = (ones + 0.5) / (sizes + 1.0)
    n1 = cells @ _indicator(cg, l, cw)
    n0 = np.bincount(cg, cw, l)[None, :] - n1
    return n1 @ (-np.log2(p)).T + n0 @ (-np.log2(1 - p)).T


def _reassign_rows(cells, rg, cg, rw, cw) -> np.ndarray:
    cost = _per_row_cost(cells, rg, cg, rw, cw)
    return np.argmin(cost + _EPS * np.arange(cost.shape[1])[None, :], axis=1)


def _local_search(cells, rg, cg, rw, cw, max_iter: int = 50):
    """Alternate row/column reassignment; keep each step only if cost drops."""
    best = codelength(cells, rg, cg, rw, cw)
    for _ in range(max_iter):
        changed = False
        for axis in (0, 1):
            if axis == 0:
                new_rg, new_cg = _relabel(_reassign_rows(cells, rg, cg, rw, cw)), cg
            else:
                new_rg, new_cg = rg, _relabel(_reassign_rows(cells.T, cg, rg, cw, rw))
            if np.array_equal(new_rg, rg) and np.array_equal(new_cg, cg):
                continue
            cost = codelength(cells, new_rg, new_cg, rw, cw)
            if cost < best - 1e-9:
                rg, cg, best, changed = new_rg, new_cg, cost, True
        if not changed:
            break
    return rg, cg, best


def _split_proposals(cells, rg, cg, rw, cw, tries: int):
    """Seed a new row group with a costly row; optionally split columns by its pattern."""
    cost = _per_row_cost(cells, rg, cg, rw, cw)[np.arange(rg.size), rg]
    order = np.lexsort((np.arange(cost.size), -cost))
    k, l = int(rg.max()) + 1, int(cg.max()) + 1
    counts = np.bincount(rg, rw, k)
    for x in order[:tries]:
        if counts[rg[x]] - rw[x] <= 0:
            continue
        new_rg = rg.copy()
        new_rg[x] = k
        yield new_rg, cg
        pattern = cells[x] > 0
        new_cg = cg.copy()
        next_id = l
        for g in range(l):
            members = cg == g
            hit = members & pattern
            if hit.any() and hit.sum() < members.sum():
                new_cg[hit] = next_id
                next_id += 1
        if next_id > l:
            yield new_rg, new_cg


def cross_associate(m: VictimAttackerMatrix | np.ndarray, tries: int = 3, max_rounds: int = 200) -> CoClustering:
    full = np.asarray(m.cells if isinstance(m, VictimAttackerMatrix) else m, dtype=float)
    if full.size == 0:
        raise ValueError("cross-association needs a non-empty matrix")
    # Identical rows/columns always share a group, so search over unique ones.
    urows, row_inv, row_w = np.unique(full, axis=0, return_inverse=True, return_counts=True)
    cells, col_inv, col_w = np.unique(urows, axis=1, return_inverse=True, return_counts=True)
    row_inv, col_inv = row_inv.reshape(-1), col_inv.reshape(-1)
    rw, cw = row_w.astype(float), col_w.astype(float)
    rg = np.zeros(cells.shape[0], dtype=np.int64)
    cg = np.zeros(cells.shape[1], dtype=np.int64)
    best = codelength(cells, rg, cg, rw, cw)
    history = [best]
    for _ in range(max_rounds):
        candidate = None
        for axis in (0, 1):
            if axis == 0:
                a, args = cells, (rg, cg, rw, cw)
            else:
                a, args = cells.T, (cg, rg, cw, rw)
            for pr, pc in _split_proposals(a, *args, tries):
                wr, wc = args[2], args[3]
                pr, pc = _local_search(a, _relabel(pr), _relabel(pc), wr, wc)[:2]
                new_rg, new_cg = (pr, pc) if axis == 0 else (pc, pr)
                cost = codelength(cells, new_rg, new_cg, rw, cw)
                if cost < best - 1e-9 and (candidate is None or cost < candidate[2]):
                    candidate = (new_rg, new_cg, cost)
        if candidate is None:
            break
        rg, cg, cost = candidate
        if cost > best:
            raise AssertionError("codelength increased on an accepted move")
        best = cost
        history.append(best)
    logger.debug("cross-association: k=%d l=%d bits=%.1f", rg.max() + 1, cg.max() + 1, best)
    return CoClustering(_relabel(rg[row_inv]), _relabel(cg[col_inv]), best, tuple(history))

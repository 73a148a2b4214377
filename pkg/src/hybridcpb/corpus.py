"""Attack-log data model, CSV parsing, sliding windows and a synthetic corpus.

Sources are stored as /24 subnets packed into a 24-bit integer (the top 24
bits of the IPv4 address). Dates become integer day offsets from an epoch.
"""

from __future__ import annotations

import csv
import datetime as dt
import ipaddress
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SUBNET24_SPACE = 1 << 24
TRAIN_DAYS = 5

_NON_ROUTABLE = tuple(
    ipaddress.IPv4Network(net)
    for net in (
        "0.0.0.0/8",
        "127.0.0.0/8",
        "224.0.0.0/4",
        "240.0.0.0/4",
        "10.0.0.0/8",
        "172.16.0.0/12",
        "192.168.0.0/16",
    )
)
# Same list as (first /24, last /24 exclusive) ranges for fast integer checks.
_NON_ROUTABLE_24 = tuple(
    (int(net.network_address) >> 8, (int(net.broadcast_address) >> 8) + 1) for net in _NON_ROUTABLE
)


class CorpusError(Exception):
    """Raised when a log stream cannot be read at all."""


class AttackEvent(NamedTuple):
    day: int
    victim: str
    source: int  # Subnet24 value


def truncate24(addr: int) -> int:
    """Zero the host octet of a 32-bit IPv4 address."""
    return addr & 0xFFFFFF00


def to_subnet24(addr: int | str) -> int:
    """Return the 24-bit /24 value of an IPv4 address (int or dotted string)."""
    if isinstance(addr, str):
        addr = int(ipaddress.IPv4Address(addr))
    return truncate24(addr) >> 8


def subnet24_to_str(value: int) -> str:
    return str(ipaddress.IPv4Address(value << 8)) + "/24"


def is_routable24(value: int) -> bool:
    return not any(lo <= value < hi for lo, hi in _NON_ROUTABLE_24)


@dataclass(frozen=True, eq=False)
class OrgLog:
    """Multiset of one organization's events, stored column-wise.

    Events are kept in (day, insertion) order, duplicates included.
    """

    org: str
    days: np.ndarray
    sources: np.ndarray

    def __post_init__(self) -> None:
        days = np.asarray(self.days, dtype=np.int64)
        sources = np.asarray(self.sources, dtype=np.int64)
        if days.shape != sources.shape:
            raise ValueError("days and sources must have equal length")
        order = np.argsort(days, kind="stable")
        object.__setattr__(self, "days", days[order])
        object.__setattr__(self, "sources", sources[order])

    @classmethod
    def from_events(cls, org: str, events: Iterable[AttackEvent]) -> "OrgLog":
        evs = list(events)
        if any(e.victim != org for e in evs):
            raise ValueError(f"event victim does not match org {org!r}")
        return cls(org, np.array([e.day for e in evs], dtype=np.int64), np.array([e.source for e in evs], dtype=np.int64))

    @classmethod
    def empty(cls, org: str) -> "OrgLog":
        return cls(org, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.days.size)

    def events(self) -> Iterator[AttackEvent]:
        for d, s in zip(self.days.tolist(), self.sources.tolist()):
            yield AttackEvent(d, self.org, s)

    def unique_sources(self) -> frozenset[int]:
        return frozenset(np.unique(self.sources).tolist())

    def restrict(self, days: Iterable[int]) -> "OrgLog":
        mask = np.isin(self.days, np.fromiter(days, dtype=np.int64))
        return OrgLog(self.org, self.days[mask], self.sources[mask])

    def merged(self, days: np.ndarray, sources: np.ndarray) -> "OrgLog":
        return OrgLog(self.org, np.concatenate([self.days, days]), np.concatenate([self.sources, sources]))


@dataclass(frozen=True, eq=False)
class ExperimentWindow:
    index: int
    train_days: tuple[int, ...]
    test_day: int
    orgs: tuple[str, ...]
    logs: Mapping[str, OrgLog]
    truth: Mapping[str, frozenset[int]]
    warning: bool = False

    def __post_init__(self) -> None:
        if len(self.train_days) != TRAIN_DAYS or self.test_day != self.train_days[-1] + 1:
            raise ValueError("window must have 5 consecutive train days followed by the test day")
        if len(set(self.orgs)) != len(self.orgs):
            raise ValueError("window orgs must be distinct")


@dataclass
class ParsedLogs:
    events: list[AttackEvent] = field(default_factory=list)
    rejects: int = 0
    invalid_ip: int = 0
    epoch: dt.date | None = None


def parse_logs(stream: IO[str], epoch: dt.date | None = None) -> ParsedLogs:
    """Parse ``date,contributor_id,source_ip[,source_port,target_port]`` lines.

    Malformed lines bump ``rejects``; non-routable sources bump ``invalid_ip``.
    Day indices are offsets from ``epoch``, or from the earliest valid date
    in the stream when no epoch is given.
    """
    rows: list[tuple[dt.date, str, int]] = []
    rejects = invalid = 0
    try:
        for lineno, row in enumerate(csv.reader(stream)):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 0 and row[0].strip().lower() == "date":
                continue
            if len(row) not in (3, 5):
                rejects += 1
                continue
            try:
                date = dt.date.fromisoformat(row[0].strip())
                org = row[1].strip()
                ip = ipaddress.IPv4Address(row[2].strip())
                if len(row) == 5:
                    for port in row[3:]:
                        if not 0 <= int(port) <= 65535:
                            raise ValueError(port)
                if not org:
                    raise ValueError("empty contributor id")
            except ValueError:
                rejects += 1
                continue
            if any(ip in net for net in _NON_ROUTABLE):
                invalid += 1
                continue
            rows.append((date, org, int(ip) >> 8))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise CorpusError(f"cannot read log stream: {exc}") from exc

    if epoch is None and rows:
        epoch = min(r[0] for r in rows)
    events = []
    for date, org, src in rows:
        day = (date - epoch).days
        if day < 0:
            rejects += 1
            continue
        events.append(AttackEvent(day, org, src))
    return ParsedLogs(events, rejects, invalid, epoch)


def write_logs(events: Iterable[AttackEvent], stream: IO[str], epoch: dt.date = dt.date(2024, 1, 1)) -> int:
    """Write events in the log CSV format; the host octet is derived from the source."""
    writer = csv.writer(stream, lineterminator="\n")
    n = 0
    for ev in events:
        host = 1 + (ev.source * 2654435761 >> 7) % 254
        ip = ipaddress.IPv4Address((ev.source << 8) | host)
        writer.writerow([(epoch + dt.timedelta(days=ev.day)).isoformat(), ev.victim, str(ip)])
        n += 1
    return n


def _group_by_org(events: Sequence[AttackEvent]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    by_org: dict[str, tuple[list[int], list[int]]] = {}
    for day, victim, source in events:
        d, s = by_org.setdefault(victim, ([], []))
        d.append(day)
        s.append(source)
    return {org: (np.array(d, dtype=np.int64), np.array(s, dtype=np.int64)) for org, (d, s) in by_org.items()}


def select_contributors(ranked: Sequence[str]) -> list[str]:
    """Drop the heaviest and lightest contributors from a ranked list.

    With 100 or more qualifiers keep ranks 11..80; otherwise drop the top
    10% and bottom 20% (both rounded down).
    """
    n = len(ranked)
    if n >= 100:
        return list(ranked[10:80])
    top, bottom = n // 10, n // 5
    return list(ranked[top : n - bottom])


def build_windows(events: Sequence[AttackEvent], total_days: int) -> list[ExperimentWindow]:
    if total_days < TRAIN_DAYS + 1:
        raise ValueError("need at least 6 days of events")
    grouped = _group_by_org(events)
    windows = []
    for w in range(total_days - TRAIN_DAYS):
        train = tuple(range(w, w + TRAIN_DAYS))
        test_day = w + TRAIN_DAYS
        scored = []
        for org, (days, sources) in grouped.items():
            in_train = (days >= train[0]) & (days <= train[-1])
            if np.unique(days[in_train]).size != TRAIN_DAYS:
                continue
            scored.append((-int(np.unique(sources[in_train]).size), org))
        scored.sort()
        ranked = [org for _, org in scored]
        orgs = select_contributors(ranked)
        warning = len(ranked) < 31
        if warning:
            logger.warning("window %d: only %d qualifying contributors", w, len(ranked))
        logs = {}
        truth = {}
        for org in orgs:
            days, sources = grouped[org]
            in_train = (days >= train[0]) & (days <= train[-1])
            logs[org] = OrgLog(org, days[in_train], sources[in_train])
            truth[org] = frozenset(np.unique(sources[days == test_day]).tolist())
        windows.append(ExperimentWindow(w, train, test_day, tuple(orgs), logs, truth, warning))
    return windows


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic attack corpus.

    Each attacker group keeps a pool of active attackers. Every day an active
    attacker survives with probability ``persistence`` and ``base_rate`` new
    ones appear (Poisson mean). A new attacker picks its targets among the
    group's members once (each member with probability ``coverage`` scaled
    by the member's visibility) and hits each target on an active day with
    probability ``hit_prob``. ``noise_rate`` fresh attackers per org per day
    are seen by that org only. ``spill_prob`` is the chance a group attacker
    also targets one random non-member org.
    """

    n_orgs: int
    n_days: int
    attacker_groups: int
    group_membership: Mapping[str, frozenset[int]]
    persistence: float
    base_rate: float
    noise_rate: float
    seed: int
    coverage: float = 0.6
    hit_prob: float = 0.75
    extra_events: float = 0.5
    spill_prob: float = 0.05

    def __post_init__(self) -> None:
        for name in ("persistence", "coverage", "hit_prob", "spill_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_orgs <= 0 or self.n_days <= 0 or self.attacker_groups <= 0:
            raise ValueError("counts must be positive")
        if self.base_rate < 0 or self.noise_rate < 0 or self.extra_events < 0:
            raise ValueError("rates must be non-negative")
        if len(self.group_membership) != self.n_orgs:
            raise ValueError("group_membership must list every org")
        for groups in self.group_membership.values():
            if any(not 0 <= g < self.attacker_groups for g in groups):
                raise ValueError("group id out of range")

    @property
    def orgs(self) -> list[str]:
        return sorted(self.group_membership)

    @classmethod
    def default(cls, n_orgs: int = 70, n_days: int = 15, seed: int = 1, **overrides) -> "CorpusSpec":
        """Desk-scale corpus: ~7 groups of ~10 orgs, a fifth of orgs in two groups."""
        groups = overrides.pop("attacker_groups", max(1, n_orgs // 10))
        rng = np.random.default_rng([seed, 0x5EED])
        membership = {}
        for i in range(n_orgs):
            gs = {i % groups}
            if rng.random() < 0.2 and groups > 1:
                gs.add(int(rng.integers(groups)))
            membership[f"org{i:03d}"] = frozenset(gs)
        params = dict(persistence=0.7, base_rate=200.0, noise_rate=220.0)
        params.update(overrides)
        return cls(n_orgs=n_orgs, n_days=n_days, attacker_groups=groups, group_membership=membership, seed=seed, **params)


class _SourcePool:
    """Draws distinct routable /24 values."""

    def __init__(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self._used: set[int] = set()

    def draw(self, n: int) -> list[int]:
        out: list[int] = []
        while len(out) < n:
            for v in self._rng.integers(0, SUBNET24_SPACE, size=2 * (n - len(out)) + 4).tolist():
                if v not in self._used and is_routable24(v):
                    self._used.add(v)
                    out.append(v)
                    if len(out) == n:
                        break
        return out


def generate_synthetic(spec: CorpusSpec) -> list[AttackEvent]:
    """Generate a corpus with planted group structure; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    pool = _SourcePool(rng)
    orgs = spec.orgs
    visibility = {org: float(v) for org, v in zip(orgs, rng.uniform(0.6, 1.4, size=len(orgs)))}
    members = {g: [o for o in orgs if g in spec.group_membership[o]] for g in range(spec.attacker_groups)}

    # attacker -> list of targets; active attacker sets per group
    targets: dict[int, list[str]] = {}
    active: dict[int, list[int]] = {g: [] for g in range(spec.attacker_groups)}

    def spawn(g: int, n: int) -> list[int]:
        fresh = pool.draw(n)
        group = members[g]
        outsiders = [o for o in orgs if o not in set(group)]
        for a in fresh:
            probs = np.array([min(1.0, spec.coverage * visibility[o]) for o in group])
            tgt = [o for o, hit in zip(group, rng.random(len(group)) < probs) if hit]
            if outsiders and rng.random() < spec.spill_prob:
                tgt.append(outsiders[int(rng.integers(len(outsiders)))])
            targets[a] = tgt
        return fresh

    burn_in = spec.base_rate / (1.0 - spec.persistence) if spec.persistence < 1.0 else spec.base_rate
    for g in range(spec.attacker_groups):
        if members[g]:
            active[g] = spawn(g, int(rng.poisson(burn_in)))

    events: list[AttackEvent] = []
    for day in range(spec.n_days):
        if day > 0:
            for g in range(spec.attacker_groups):
                if not members[g]:
                    continue
                prev = active[g]
                keep = rng.random(len(prev)) < spec.persistence
                survivors = [a for a, k in zip(prev, keep) if k]
                active[g] = survivors + spawn(g, int(rng.poisson(spec.base_rate)))
        for g in range(spec.attacker_groups):
            for a in active[g]:
                tgt = targets[a]
                if not tgt:
                    continue
                hits = rng.random(len(tgt)) < spec.hit_prob
                reps = 1 + rng.poisson(spec.extra_events, size=len(tgt))
                for org, hit, r in zip(tgt, hits.tolist(), reps.tolist()):
                    if hit:
                        events.extend([AttackEvent(day, org, a)] * r)
        for org in orgs:
            n_noise = int(rng.poisson(spec.noise_rate * visibility[org]))
            for a in pool.draw(n_noise):
                events.extend([AttackEvent(day, org, a)] * (1 + int(rng.poisson(spec.extra_events))))
    return events

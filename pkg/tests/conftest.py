from __future__ import annotations

import numpy as np
import pytest

from hybridcpb.corpus import CorpusSpec, OrgLog, build_windows, generate_synthetic


def make_log(org: str, events: list[tuple[int, int]]) -> OrgLog:
    """OrgLog from (day, source) pairs."""
    days = np.array([d for d, _ in events], dtype=np.int64)
    sources = np.array([s for _, s in events], dtype=np.int64)
    return OrgLog(org, days, sources)


def random_logs(rng: np.random.Generator, n_orgs: int, max_events: int, universe: int = 400, days: int = 5) -> dict[str, OrgLog]:
    """Small random multiset logs over a shared universe, so overlaps are common."""
    out = {}
    for i in range(n_orgs):
        m = int(rng.integers(0, max_events + 1))
        out[f"o{i:02d}"] = OrgLog(
            f"o{i:02d}", rng.integers(0, days, size=m).astype(np.int64), rng.integers(0, universe, size=m).astype(np.int64)
        )
    return out


def as_pairs(log: OrgLog) -> list[tuple[int, int]]:
    return sorted(zip(log.days.tolist(), log.sources.tolist()))


@pytest.fixture(scope="session")
def small_window():
    spec = CorpusSpec.default(n_orgs=20, n_days=6, seed=7)
    return build_windows(generate_synthetic(spec), 6)[0]


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

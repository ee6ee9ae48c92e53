from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from treegrid.case_io import load_bundled  # noqa: E402
from treegrid.network import Bus, GridCase, Line  # noqa: E402

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_tree_edges(rng, nodes):
    """Random spanning tree on ``nodes`` (list of ids)."""
    order = list(rng.permutation(nodes))
    return [(order[k], order[rng.integers(0, k)]) for k in range(1, len(order))]


def random_grid(rng, n, extra=None, limit=10.0, name="random") -> GridCase:
    """Connected random grid with balanced injections and a random orientation."""
    ids = list(range(1, n + 1))
    pairs = set()
    for a, b in random_tree_edges(rng, ids):
        pairs.add((min(a, b), max(a, b)))
    extra = rng.integers(0, n + 1) if extra is None else extra
    for _ in range(int(extra)):
        a, b = rng.choice(ids, 2, replace=False)
        pairs.add((min(a, b), max(a, b)))
    lines = []
    for a, b in sorted(pairs):
        if rng.random() < 0.5:
            a, b = b, a
        lines.append(Line(int(a), int(b), float(rng.uniform(0.5, 20.0)), limit))
    p = rng.normal(size=n)
    p -= p.mean()
    buses = []
    for i, v in zip(ids, p):
        buses.append(Bus(i, pg=max(v, 0.0), pd=max(-v, 0.0), pg_max=max(v, 0.0) + 1.0,
                         damping=float(rng.uniform(0.1, 1.0)),
                         inertia=float(rng.uniform(0.05, 0.5)),
                         alpha=float(rng.uniform(0.5, 2.0))))
    return GridCase(tuple(buses), tuple(lines), name=name)


def two_area_tree_grid(rng, n1=4, n2=4, chords=2) -> GridCase:
    """Two areas joined by one tie line (a bridge), each area meshed, every bus
    a generator with ample headroom, generous line limits."""
    a1 = list(range(1, n1 + 1))
    a2 = list(range(n1 + 1, n1 + n2 + 1))
    lines = []
    for nodes in (a1, a2):
        pairs = {tuple(sorted(e)) for e in random_tree_edges(rng, nodes)}
        for _ in range(chords):
            a, b = rng.choice(nodes, 2, replace=False)
            pairs.add((min(a, b), max(a, b)))
        lines += [Line(int(a), int(b), float(rng.uniform(1.0, 10.0)), 50.0) for a, b in sorted(pairs)]
    lines.append(Line(int(rng.choice(a1)), int(rng.choice(a2)), float(rng.uniform(1.0, 10.0)), 50.0))
    p = rng.uniform(-1.0, 1.0, size=n1 + n2)
    p -= p.mean()
    buses = []
    for i, v in enumerate(p, start=1):
        pg = 2.0 + max(v, 0.0)
        buses.append(Bus(i, pg=pg, pd=pg - v, pg_max=pg + 3.0,
                         alpha=float(rng.uniform(0.5, 2.0)), area=1 if i <= n1 else 2))
    return GridCase(tuple(buses), tuple(lines), name="two_area")


@pytest.fixture(scope="session")
def ieee39():
    return load_bundled("ieee39")


@pytest.fixture(scope="session")
def six_bus():
    return load_bundled("six_bus")


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


# acceptance criteria report: one PASS/FAIL line per criterion
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

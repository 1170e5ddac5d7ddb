import os

import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[list]()

from bayeslfm.ingest import from_arrays, load_movielens

ML1M_ENV = "BAYESLFM_ML1M"


def synthetic_movielens(n_users=30, n_items=40, per_user=(6, 15), seed=0, K=3):
    """MovieLens-format text with integer 1..5 ratings from a noisy low-rank model.

    Raw ids are shuffled and sparse so dense re-indexing is exercised.
    """
    rng = np.random.default_rng(seed)
    P = rng.normal(0, 0.7, (n_users, K))
    Q = rng.normal(0, 0.7, (n_items, K))
    raw_users = rng.choice(10_000, n_users, replace=False) + 1
    raw_items = rng.choice(10_000, n_items, replace=False) + 1
    lines = []
    for u in range(n_users):
        count = rng.integers(per_user[0], per_user[1] + 1)
        items = rng.choice(n_items, count, replace=False)
        for i in items:
            score = 3.5 + P[u] @ Q[i] + rng.normal(0, 0.5)
            rating = int(np.clip(np.rint(score), 1, 5))
            ts = 978_300_000 + int(rng.integers(0, 50_000))
            lines.append((ts, f"{raw_users[u]}::{raw_items[i]}::{rating}::{ts}"))
    # file order is not time order, as in the real data
    order = rng.permutation(len(lines))
    return "\n".join(lines[k][1] for k in order) + "\n"


@pytest.fixture
def ml_text():
    return synthetic_movielens()


@pytest.fixture
def toy():
    """3 users x 3 items, 5 ratings."""
    return from_arrays([0, 0, 1, 2, 2], [0, 1, 1, 0, 2], [4.0, 3.0, 5.0, 2.0, 4.0], m=3, n=3)


@pytest.fixture
def small_random():
    rng = np.random.default_rng(7)
    m, n, N = 5, 5, 30
    return from_arrays(rng.integers(0, m, N), rng.integers(0, n, N), rng.uniform(1, 5, N), m=m, n=n)


def ml1m_path():
    path = os.environ.get(ML1M_ENV)
    if path and os.path.isdir(path):
        path = os.path.join(path, "ratings.dat")
    return path if path and os.path.exists(path) else None


@pytest.fixture(scope="session")
def ml1m():
    path = ml1m_path()
    if path is None:
        pytest.skip(f"MovieLens-1M ratings.dat not available (set {ML1M_ENV})")
    return load_movielens(path)


class Verdicts:
    """Records one PASS/FAIL/SKIP line per acceptance criterion."""

    def __init__(self, lines):
        self.lines = lines

    def check(self, number, title, ok, detail):
        self.lines.append((number, f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}  {detail}"))
        assert ok, detail

    def skip(self, number, title, reason):
        self.lines.append((number, f"criterion {number} {title}: SKIP  {reason}"))
        pytest.skip(reason)


@pytest.fixture
def verdict(request):
    return Verdicts(request.config.stash.setdefault(ACCEPTANCE, []))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)

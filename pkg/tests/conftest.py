import os

import numpy as np
import pytest

from msmkit.core import EpisodeDataset, StateSpace


@pytest.fixture
def d3():
    """A: 0→1 at 1; B: censored at 2 in 0; C: 0→2 at 3."""
    ss = StateSpace.competing_risks(2)
    return EpisodeDataset(ss, ["A", "B", "C"], [0, 0, 0], [1.0, 2.0, 3.0], [0, 0, 0],
                          [1, -1, 2])


def _raw(name, env):
    path = os.environ.get(env)
    if path:
        import pandas as pd
        return pd.read_csv(path)
    try:
        from msmkit.datasets import fetch_raw
        return fetch_raw(name)
    except Exception:  # noqa: BLE001 - optional data source
        return None


@pytest.fixture(scope="session")
def colon_raw():
    df = _raw("colon", "MSMKIT_COLON_CSV")
    if df is None:
        pytest.skip("colon data unavailable (set MSMKIT_COLON_CSV or install rdatasets)")
    return df


@pytest.fixture(scope="session")
def colon(colon_raw):
    from msmkit.datasets import colon_episodes
    return colon_episodes(colon_raw)


def random_dataset(rng, n=30, censor=True):
    """Illness-death style episodes with random exponential times."""
    ss = StateSpace(("0", "1", "2"), frozenset({2}), frozenset({(0, 1), (0, 2), (1, 2)}))
    rows = []
    for i in range(n):
        c = rng.exponential(3.0) if censor else np.inf
        t1 = rng.exponential(1.0)
        dest = 1 if rng.random() < 0.6 else 2
        if t1 > c:
            rows.append((i, 0.0, c, 0, -1))
            continue
        rows.append((i, 0.0, t1, 0, dest))
        if dest == 1:
            t2 = t1 + rng.exponential(1.0)
            rows.append((i, t1, min(t2, c), 1, 2 if t2 <= c else -1))
    sid, a, b, k, l = zip(*rows)
    return EpisodeDataset(ss, sid, a, b, k, l), rows

import numpy as np
import pandas as pd
import pytest

import clockrd as cr


@pytest.fixture(scope="session")
def small_study():
    """One modest simulated study shared by read-only tests."""
    scenario = cr.preset("paper_like", seed=42, n_days=80)
    visits, truth = cr.simulate(scenario)
    forced = cr.compute_forcing(visits, scenario.schedule)
    return {"scenario": scenario, "visits": visits, "truth": truth, "forced": forced}


def make_forced_frame(n_left, n_right, y_left, y_right, s_left=None, s_right=None,
                      days=None, rng=None):
    """Hand-built forced table for unit tests that bypass the simulator."""
    rng = rng or np.random.default_rng(0)
    s_left = s_left if s_left is not None else -rng.uniform(0.01, 1.0, n_left)
    s_right = s_right if s_right is not None else rng.uniform(0.0, 1.0, n_right)
    s = np.concatenate([s_left, s_right])
    a = np.concatenate([np.zeros(n_left), np.ones(n_right)]).astype(int)
    y = np.concatenate([np.atleast_1d(y_left), np.atleast_1d(y_right)])
    n = n_left + n_right
    days = days if days is not None else np.array([f"d{i % 20}" for i in range(n)])
    return pd.DataFrame({"s": s, "a": a, "y": y, "day_key": days})

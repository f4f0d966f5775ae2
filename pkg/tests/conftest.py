import numpy as np
import pytest

from votedpo.diffusion import Arch, init_params, linear_schedule
from votedpo.prefcore import PreferencePair, ScoreVector, seeded_rng

METRICS = ("metric_1", "metric_2", "metric_3", "metric_4")


def make_pair(pair_id, scores_a, scores_b, condition=0, sample_a=(0.0, 0.0), sample_b=(1.0, 1.0),
              metric_ids=None):
    ids = metric_ids or tuple(f"m{i}" for i in range(len(scores_a)))
    return PreferencePair(pair_id, condition, sample_a, sample_b, ScoreVector(scores_a, ids), ScoreVector(scores_b, ids))


def random_pairs(n, k=4, seed=0, d=2, num_conditions=4):
    g = np.random.default_rng(seed)
    ids = tuple(f"m{i}" for i in range(k))
    return [
        PreferencePair(i, int(g.integers(0, num_conditions)), tuple(g.normal(size=d)), tuple(g.normal(size=d)),
                       ScoreVector(tuple(g.normal(size=k)), ids), ScoreVector(tuple(g.normal(size=k)), ids))
        for i in range(n)
    ]


@pytest.fixture
def small_arch():
    return Arch(d=2, m=3, C=3, h=8, T_steps=10)


@pytest.fixture
def small_schedule():
    return linear_schedule(10)


@pytest.fixture
def small_params(small_arch):
    # non-trivial output layer so gradients reach every weight
    return init_params(small_arch, seeded_rng(7).split("init"), out_scale=1.0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ei_monte_carlo
from sdeinfer.bayesopt import (BOConfig, bo_run, ei_from_moments, expected_improvement, initial_design,
                               log_ei_from_moments)
from sdeinfer.errors import EvaluationError, SDEInferError
from sdeinfer.gp import GPSurrogate


def test_ei_closed_form_examples():
    assert ei_from_moments(2.0, 0.0, 2.0) == 0.0
    assert ei_from_moments(3.5, 0.0, 2.0) == 1.5
    assert ei_from_moments(0.0, 1.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(0)
    triples = [(rng.normal(), rng.uniform(0.05, 3.0), rng.normal()) for _ in range(18)]
    triples += [(1.0, 1e-9, 0.5), (0.2, 1e-9, 0.5)]
    for mu, sigma, best in triples:
        mc, se = ei_monte_carlo(mu, sigma, best, 200000, rng)
        assert abs(ei_from_moments(mu, sigma, best) - mc) <= 4 * se + 1e-9


def test_log_ei_stable_far_below_incumbent():
    # log EI at u = -40 from the Mills-ratio asymptote log(phi(u) / u^2)
    u = -40.0
    asym = -0.5 * u**2 - 0.5 * math.log(2 * math.pi) - 2 * math.log(-u)
    val = log_ei_from_moments(u, 1.0, 0.0)[0]
    assert np.isfinite(val) and val == pytest.approx(asym, abs=1e-2)
    assert log_ei_from_moments(0.3, 0.7, 0.1)[0] == pytest.approx(math.log(ei_from_moments(0.3, 0.7, 0.1)))


@given(st.floats(-50, 50), st.floats(1e-3, 50), st.floats(-50, 50))
def test_ei_positive_and_above_plain_improvement(mu, sigma, best):
    ei = ei_from_moments(mu, sigma, best)
    assert ei > 0 or mu - best < -30 * sigma
    assert ei >= max(mu - best, 0.0) - 1e-9 * (1 + abs(mu) + abs(best))


def test_ei_on_surrogate_zero_at_incumbent_data():
    gp = GPSurrogate([[0.0], [1.0]], [0.0, 1.0], 1.0, 1.0, 0.0, normalize_y=False)
    assert expected_improvement(gp, [[1.0]], 1.0) == pytest.approx(0.0, abs=1e-6)
    assert expected_improvement(gp, [[3.0]], 1.0) > 0


def test_initial_design_strata():
    cfg = BOConfig(n_initial=10, search_box=((0.0, 1.0), (-5.0, 5.0)), seed=3)
    X = initial_design(cfg)
    for k, (lo, hi) in enumerate(cfg.search_box):
        bins = np.floor((X[:, k] - lo) / (hi - lo) * 10).astype(int)
        assert sorted(bins.tolist()) == list(range(10))
    one = initial_design(BOConfig(n_initial=1, search_box=((0.0, 1.0),)))
    assert one.shape == (1, 1) and 0 <= one[0, 0] <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        BOConfig(stop_epsilon=0.0)
    with pytest.raises(ValueError):
        BOConfig(n_initial=0)
    with pytest.raises(ValueError):
        bo_run(lambda t: 0.0, BOConfig(n_initial=1, search_box=((0.0, 1.0),)))


@pytest.mark.parametrize("seed", range(10))
def test_quadratic_maximum_found(seed):
    cfg = BOConfig(n_initial=3, n_max=20, search_box=((0.0, 3.0),), seed=seed, acquisition_restarts=8,
                   gp_restarts=2)
    res = bo_run(lambda t: -(t[0] - 1.0) ** 2, cfg)
    assert abs(res.theta_ml[0] - 1.0) <= 0.05
    assert len(res.history) <= 3 + 20
    trace = [v for v in res.incumbent_trace if v is not None]
    assert all(b >= a for a, b in zip(trace, trace[1:]))


def test_infinite_epsilon_stops_at_min_iterations():
    cfg = BOConfig(n_initial=3, n_max=10, stop_epsilon=math.inf, min_iterations=3,
                   search_box=((0.0, 3.0),), acquisition_restarts=4, gp_restarts=1)
    res = bo_run(lambda t: -(t[0] - 1.0) ** 2, cfg)
    assert res.n_iterations == 3 and res.stopped_early
    capped = bo_run(lambda t: -(t[0] - 1.0) ** 2,
                    BOConfig(n_initial=3, n_max=2, stop_epsilon=math.inf, search_box=((0.0, 3.0),),
                             acquisition_restarts=4, gp_restarts=1))
    assert capped.n_iterations == 2 and len(capped.history) == 5


def test_failed_evaluations_enter_at_floor():
    def obj(t):
        if t[0] > 2.0:
            raise EvaluationError(t, "blown up")
        return -(t[0] - 1.0) ** 2

    cfg = BOConfig(n_initial=4, n_max=4, search_box=((0.0, 3.0),), seed=1, failure_value=-50.0,
                   acquisition_restarts=4, gp_restarts=1)
    res = bo_run(obj, cfg)
    failed = [h for h in res.history if h["failed"]]
    assert failed and all(h["value"] == -50.0 for h in failed)
    assert res.theta_ml[0] <= 2.0


def test_all_failed_raises():
    def obj(t):
        raise EvaluationError(t, "nope")

    with pytest.raises(SDEInferError, match="all"):
        bo_run(obj, BOConfig(n_initial=3, n_max=2, search_box=((0.0, 1.0),)))


def test_deterministic_given_seed():
    cfg = BOConfig(n_initial=3, n_max=4, search_box=((0.0, 3.0),), seed=7, acquisition_restarts=4,
                   gp_restarts=1)
    a = bo_run(lambda t: -(t[0] - 1.0) ** 2, cfg)
    b = bo_run(lambda t: -(t[0] - 1.0) ** 2, cfg)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.values, b.values)


def test_checkpoint_written(tmp_path):
    cfg = BOConfig(n_initial=3, n_max=2, search_box=((0.0, 3.0),), acquisition_restarts=4, gp_restarts=1)
    res = bo_run(lambda t: -(t[0] - 1.0) ** 2, cfg, checkpoint_path=tmp_path / "gp.json")
    back = GPSurrogate.from_json(tmp_path / "gp.json")
    assert np.array_equal(back.mean([[0.5]]), res.surrogate.mean([[0.5]]))

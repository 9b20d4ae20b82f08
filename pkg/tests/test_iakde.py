import math

import numpy as np
import pytest
from scipy import integrate, stats

from oracles import ou_moments
from sdeinfer.errors import InsufficientWindowSamples
from sdeinfer.iakde import IAKDE, IAKDEConfig, bandwidth, iakde_grid, iakde_log_density
from sdeinfer.models import make_ou_model
from sdeinfer.simulate import TransitionDataset, simulate_transition_pairs


def _ou_dataset(M=5000, seed=0, lo=1.0, hi=3.0):
    starts = np.random.default_rng(seed).uniform(lo, hi, (M, 1))
    return simulate_transition_pairs(make_ou_model(), [1.0], starts, 0.1, 0.001, seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        IAKDEConfig(window_epsilon=(0.0,))
    with pytest.raises(ValueError):
        IAKDEConfig(bandwidth_rule=-1.0)
    with pytest.raises(ValueError):
        bandwidth(np.arange(10.0), "wide")


def test_bandwidth_rules_match_hand_formula():
    x = np.random.default_rng(0).normal(size=400)
    A = min(x.std(ddof=1), stats.iqr(x) / 1.349)
    assert bandwidth(x, "silverman") == pytest.approx(0.9 * A * 400 ** -0.2)
    assert bandwidth(x, "scott") == pytest.approx(1.059 * A * 400 ** -0.2)
    assert bandwidth(x, 0.25) == 0.25


def test_single_sample_kernel_at_centre():
    data = TransitionDataset([1.0], 0.1, [[0.0]], [[0.0]])
    cfg = IAKDEConfig(window_epsilon=(0.5,), bandwidth_rule=0.3, min_window_samples=1)
    assert iakde_log_density(data, [0.0], [0.0], cfg) == pytest.approx(math.log(1 / (0.3 * math.sqrt(2 * math.pi))))


def test_insufficient_window_carries_count():
    data = TransitionDataset([1.0], 0.1, np.linspace(0, 1, 11)[:, None], np.zeros((11, 1)))
    cfg = IAKDEConfig(window_epsilon=(0.05,), min_window_samples=5)
    with pytest.raises(InsufficientWindowSamples) as err:
        iakde_log_density(data, [0.5], [0.0], cfg)
    assert err.value.n_window == 1


def test_independent_2d_is_sum_of_marginals():
    rng = np.random.default_rng(3)
    z0 = rng.uniform(-1, 1, (400, 2))
    z1 = rng.normal(size=(400, 2))
    data = TransitionDataset([0.0], 0.1, z0, z1)
    cfg = IAKDEConfig(window_epsilon=(0.5, 0.5), bandwidth_rule=0.4)
    q0, q1 = np.array([0.1, -0.2]), np.array([0.3, 0.8])
    inside = np.all(np.abs(z0 - q0) <= 0.5, axis=1)
    marg = [np.log(stats.norm.pdf(q1[k], loc=z1[inside, k], scale=0.4).mean()) for k in range(2)]
    assert iakde_log_density(data, q0, q1, cfg) == pytest.approx(sum(marg), rel=1e-12)


def test_ou_curve_close_to_analytic():
    data = _ou_dataset()
    mean, var = ou_moments(2.0, 1.0, 0.1)
    grid = np.linspace(mean - 5 * math.sqrt(var), mean + 5 * math.sqrt(var), 400)
    est = iakde_grid(data, [2.0], grid, IAKDEConfig(window_epsilon=(0.1,)))
    truth = stats.norm.pdf(grid, mean, math.sqrt(var))
    assert np.max(np.abs(est - truth)) < 0.35 * truth.max()


def test_normalization():
    kde = IAKDEConfig(window_epsilon=(0.1,)).fit(_ou_dataset())
    val, _ = integrate.quad(lambda z: math.exp(kde.log_density([2.0], [z])), -3, 7, limit=200)
    assert val == pytest.approx(1.0, abs=0.02)


def test_kl_to_truth_decreases_with_window_size():
    mean, var = ou_moments(2.0, 1.0, 0.1)
    sd = math.sqrt(var)
    grid = np.linspace(mean - 6 * sd, mean + 6 * sd, 2001)
    p = stats.norm.pdf(grid, mean, sd)
    kls = []
    for M in (50, 500, 5000):
        data = simulate_transition_pairs(make_ou_model(), [1.0], np.full((M, 1), 2.0), 0.1, 0.001, seed=M)
        log_q = IAKDE(data, IAKDEConfig(window_epsilon=(0.01,))).log_density([2.0], grid[:, None])
        kls.append(integrate.trapezoid(p * (np.log(p) - log_q), grid))
    assert kls[0] > kls[1] > kls[2] > 0


def test_row_permutation_is_bitwise_invariant():
    data = _ou_dataset(M=2000)
    perm = np.random.default_rng(9).permutation(len(data))
    cfg = IAKDEConfig(window_epsilon=(0.1,))
    grid = np.linspace(0.5, 3.0, 50)[:, None]
    a = IAKDE(data, cfg).log_density([2.0], grid)
    b = IAKDE(data.subset(perm), cfg).log_density([2.0], grid)
    assert np.array_equal(a, b)


def test_pairs_match_pointwise():
    kde = IAKDEConfig(window_epsilon=(0.2,)).fit(_ou_dataset(M=2000))
    z0 = np.array([[1.5], [2.0], [2.5]])
    z1 = np.array([[1.4], [1.8], [2.3]])
    pairs = kde.log_density_pairs(z0, z1)
    assert np.allclose(pairs, [kde.log_density(a, b) for a, b in zip(z0, z1)])


def test_mask_mass_matches_quadrature():
    kde = IAKDEConfig(window_epsilon=(0.1,)).fit(_ou_dataset())
    intervals = [(1.5, 1.8), (2.0, 2.2)]
    expect = sum(integrate.quad(lambda z: math.exp(kde.log_density([2.0], [z])), lo, hi)[0] for lo, hi in intervals)
    assert math.exp(kde.log_mask_mass([2.0], intervals)) == pytest.approx(expect, rel=1e-6)


def test_grid_csv(tmp_path):
    grid = np.linspace(1, 3, 11)
    dens = iakde_grid(_ou_dataset(M=1000), [2.0], grid, IAKDEConfig(window_epsilon=(0.2,)), tmp_path / "g.csv")
    back = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
    assert open(tmp_path / "g.csv").readline().strip() == "z1,density"
    assert np.array_equal(back[:, 0], grid) and np.array_equal(back[:, 1], dens)

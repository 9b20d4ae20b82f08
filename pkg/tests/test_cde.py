import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from oracles import ou_moments
from sdeinfer.cde import (CDEConfig, CDEDataWarning, ConditionalDensityModel, _init_params, _layer_sizes,
                          _loss_and_grad, cde_fit, cde_log_density)
from sdeinfer.errors import TrainingError
from sdeinfer.models import make_ou_model
from sdeinfer.simulate import TransitionDataset, simulate_transition_pairs


def _fit(data, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CDEDataWarning)
        return cde_fit(data, CDEConfig(**kw))


def _zero_model(K):
    cfg = CDEConfig(n_components=K, hidden_widths=(4,))
    params = [np.zeros((a, b)) if i % 2 == 0 else np.zeros(b)
              for a, b in zip(_layer_sizes(1, cfg)[:-1], _layer_sizes(1, cfg)[1:]) for i in (0, 1)]
    return ConditionalDensityModel(params, cfg, [0.0], [1.0], [0.0], [1.0])


@pytest.fixture(scope="module")
def ou_data():
    starts = np.random.default_rng(0).uniform(1.0, 3.0, (5000, 1))
    return simulate_transition_pairs(make_ou_model(), [1.0], starts, 0.1, 0.001, seed=0)


@pytest.fixture(scope="module")
def ou_model(ou_data):
    return _fit(ou_data, seed=1)


def test_config_validation():
    with pytest.raises(ValueError):
        CDEConfig(validation_fraction=0.5)
    with pytest.raises(ValueError):
        CDEConfig(hidden_widths=(0,))
    with pytest.raises(ValueError):
        CDEConfig(learning_rate=0.0)


def test_standard_normal_component_at_mode():
    assert cde_log_density(_zero_model(1), [0.3], [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_equal_components_collapse_to_one():
    for z1 in (-1.0, 0.0, 2.5):
        assert cde_log_density(_zero_model(2), [0.0], [z1]) == pytest.approx(cde_log_density(_zero_model(1), [0.0], [z1]))


def test_analytic_gradient_matches_finite_differences():
    cfg = CDEConfig(n_components=3, hidden_widths=(5, 4))
    rng = np.random.default_rng(0)
    params = _init_params(2, cfg, rng)
    params = [p + 0.3 * rng.normal(size=p.shape) for p in params]
    x, y = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    _, grads = _loss_and_grad(params, x, y, 3, 2)
    h = 1e-6
    for p, g in zip(params, grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            up, _ = _loss_and_grad(params, x, y, 3, 2)
            p[idx] = old - h
            down, _ = _loss_and_grad(params, x, y, 3, 2)
            p[idx] = old
            assert g[idx] == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_near_identity_map_recovered():
    rng = np.random.default_rng(4)
    z0 = rng.uniform(0.0, 1.0, (4000, 1))
    data = TransitionDataset([0.0], 0.1, z0, z0 + 0.01 * rng.normal(size=z0.shape))
    model = _fit(data, seed=0)
    q = np.array([[0.2], [0.5], [0.8]])
    assert np.all(np.abs(model.mean(q) - q) < 0.02)
    sd = np.sqrt(model.variance(q))
    assert np.all((sd >= 0.005) & (sd <= 0.02))


def test_ou_conditional_moments(ou_model):
    mean, var = ou_moments(2.0, 1.0, 0.1)
    assert abs(ou_model.mean([[2.0]])[0, 0] - mean) < 0.05
    assert ou_model.variance([[2.0]])[0, 0] == pytest.approx(var, rel=0.3)


def test_single_component_matches_gaussian_nll():
    rng = np.random.default_rng(5)
    z0 = rng.uniform(-2, 2, (5000, 1))
    sigma = 0.3
    data = TransitionDataset([0.0], 0.1, z0, 0.8 * z0 + 0.1 + sigma * rng.normal(size=z0.shape))
    model = _fit(data, n_components=1, seed=2)
    entropy = 0.5 * math.log(2 * math.pi * math.e * sigma**2)
    assert abs(model.metadata["validation_nll"] - entropy) < 0.05


def test_normalization(ou_model):
    for z0 in (1.5, 2.0, 2.7):
        val, _ = integrate.quad(lambda z: math.exp(ou_model.log_density([z0], [z])), -5, 8, limit=200)
        assert val == pytest.approx(1.0, abs=0.01)


def test_weights_and_scales_valid(ou_model):
    w, _, s = ou_model.components(np.linspace(0, 4, 9)[:, None])
    assert np.allclose(w.sum(axis=1), 1.0) and np.all(s > 0)


def test_validation_nll_not_worse_than_init(ou_model):
    assert ou_model.metadata["validation_nll"] <= ou_model.metadata["initial_validation_nll"]
    assert ou_model.metadata["n_validation"] == 1000


def test_seeded_determinism(ou_data):
    small = ou_data.subset(np.arange(1500))
    a = _fit(small, seed=3, max_epochs=20)
    b = _fit(small, seed=3, max_epochs=20)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_json_roundtrip(ou_model, tmp_path):
    path = tmp_path / "m.json"
    ou_model.to_json(path)
    back = ConditionalDensityModel.from_json(str(path))
    grid = np.linspace(1, 3, 7)[:, None]
    assert np.array_equal(back.log_density([2.0], grid), ou_model.log_density([2.0], grid))
    assert back.metadata == ou_model.metadata


def test_small_dataset_warns():
    data = TransitionDataset([0.0], 0.1, np.linspace(0, 1, 50)[:, None], np.linspace(0, 1, 50)[:, None])
    with pytest.warns(CDEDataWarning):
        cde_fit(data, CDEConfig(max_epochs=2))


def test_non_finite_data_aborts():
    z = np.linspace(0, 1, 200)[:, None]
    z1 = z.copy()
    z1[5] = np.nan
    with pytest.raises(TrainingError):
        _fit(TransitionDataset([0.0], 0.1, z, z1), max_epochs=3)


def test_mask_mass_matches_quadrature(ou_model):
    intervals = [(1.5, 1.8), (2.0, 2.2)]
    expect = sum(integrate.quad(lambda z: math.exp(ou_model.log_density([2.0], [z])), lo, hi)[0]
                 for lo, hi in intervals)
    assert math.exp(ou_model.log_mask_mass_pairs([[2.0]], intervals)[0]) == pytest.approx(expect, rel=1e-6)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from psinvert import surrogate as sg
from psinvert import tensorad as ad

ARCH = sg.Architecture(n_pixels=16, channels=(2, 3, 4, 4), hidden=8)


@pytest.fixture(scope="module")
def model():
    m = sg.Surrogate(ARCH, seed=3)
    m.scaler = sg.Standardizer(np.array([2.0, -1.0]), np.array([0.5, 3.0]))
    return m


def binary(rng, n=4, side=16):
    return (rng.random((n, side, side)) < 0.5).astype(float)


def test_forward_is_deterministic_and_variance_positive(model):
    x = binary(np.random.default_rng(0))
    m1, v1 = model.predict(x)
    m2, v2 = model.predict(x)
    assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()
    assert m1.shape == (4, 2) and np.all(v1 > 0)
    m0, v0 = model.predict(x[0])
    np.testing.assert_allclose(m0, m1[0], rtol=1e-14)


def test_wrong_input_shape(model):
    with pytest.raises(ad.ShapeError):
        model.predict(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        sg.Architecture(n_pixels=24)


def test_input_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    x0 = rng.uniform(0.1, 0.9, (16, 16))
    kappa = np.array([2.3, 0.4])
    xt = ad.Tensor(x0, requires_grad=True)
    ad.backward(ad.tsum(model.log_density(kappa, xt)))
    h = 1e-6
    for _ in range(5):
        i, j = rng.integers(0, 16, 2)
        up, dn = x0.copy(), x0.copy()
        up[i, j] += h
        dn[i, j] -= h
        num = (model.log_density(kappa, up[None])[0] - model.log_density(kappa, dn[None])[0]) / (2 * h)
        assert xt.grad[i, j] == pytest.approx(num, rel=1e-3, abs=1e-8)


def test_log_density_tensor_and_numpy_routes_agree(model):
    x = np.random.default_rng(2).uniform(0, 1, (3, 16, 16))
    kappa = np.array([[1.0, 2.0], [2.5, -4.0], [2.0, 0.0]])
    via_tensor = model.log_density(kappa, ad.Tensor(x)).value
    m, v = model.predict(x)
    ref = stats.norm.logpdf(kappa, m, np.sqrt(v)).sum(-1)
    np.testing.assert_allclose(via_tensor, ref, rtol=1e-12)
    np.testing.assert_allclose(model.log_density(kappa, x), ref, rtol=1e-12)


def test_log_density_peaks_at_mean(model):
    x = binary(np.random.default_rng(3), 1)
    m, v = model.predict(x)
    peak = model.log_density(m, x)[0]
    assert peak == pytest.approx(-0.5 * np.log(2 * math.pi * v[0]).sum(), rel=1e-12)
    assert model.log_density(m + np.sqrt(v), x)[0] < peak


def test_gaussian_nll_closed_form():
    mean = np.array([[0.3, -1.0]])
    logvar = np.array([[0.2, -0.5]])
    y = np.array([[1.0, 0.0]])
    got = sg.gaussian_nll(ad.Tensor(mean), ad.Tensor(logvar), y).value[0]
    ref = -stats.norm.logpdf(y, mean, np.exp(0.5 * logvar)).sum()
    assert got == pytest.approx(ref, rel=1e-14)
    at_mean = sg.gaussian_nll(ad.Tensor(y), ad.Tensor(np.zeros((1, 2))), y).value[0]
    assert at_mean == pytest.approx(math.log(2 * math.pi), rel=1e-15)


def test_weight_decay_adds_nonnegative_penalty(model):
    rng = np.random.default_rng(4)
    x, y = binary(rng, 3), rng.standard_normal((3, 2))
    vals = [sg.nll(model, model.params, x, y, wd).item() for wd in (0.0, 1e-4, 1e-2)]
    assert vals[0] < vals[1] < vals[2]
    sq = sum(float((v ** 2).sum()) for v in model.params.values())
    assert vals[2] - vals[0] == pytest.approx(0.5 * 1e-2 * sq, rel=1e-10)
    with pytest.raises(ValueError):
        sg.nll(model, model.params, x[:0], y[:0])


def test_parameter_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(5)
    x, y = binary(rng, 2), rng.standard_normal((2, 2))
    leaves = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in model.params.items()}
    ad.backward(sg.nll(model, leaves, x, y, 1e-3))
    h = 1e-6
    for name in ("conv0.w", "conv3.b", "hidden.w", "mean.b", "logvar.w"):
        base = model.params[name]
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in base.shape)
            p_up = dict(model.params)
            p_dn = dict(model.params)
            p_up[name] = base.copy()
            p_dn[name] = base.copy()
            p_up[name][idx] += h
            p_dn[name][idx] -= h
            num = (sg.nll(model, p_up, x, y, 1e-3).item() - sg.nll(model, p_dn, x, y, 1e-3).item()) / (2 * h)
            assert leaves[name].grad[idx] == pytest.approx(num, rel=1e-4, abs=1e-9), (name, idx)


def test_training_on_constant_labels_recovers_the_constant():
    rng = np.random.default_rng(6)
    x = binary(rng, 40)
    y = np.tile([3.0, 7.0], (40, 1))
    res = sg.train(x, y, ARCH, sg.TrainConfig(batch_size=20, epochs=100, lr=3e-3, dropout=0.0, holdout=0.0))
    m, v = res.model.predict(x)
    np.testing.assert_allclose(m, np.tile([3.0, 7.0], (40, 1)), rtol=0.01)
    assert np.all(v < 0.05)


def _linear_problem(n=64, seed=7):
    rng = np.random.default_rng(seed)
    x = binary(rng, n)
    y = np.stack([x.mean((1, 2)) * 4.0, x[:, :8].mean((1, 2)) - x[:, 8:].mean((1, 2))], 1)
    return x, y + 0.01 * rng.standard_normal(y.shape)


def test_training_loss_decreases():
    x, y = _linear_problem(200)
    res = sg.train(x, y, ARCH, sg.TrainConfig(batch_size=16, epochs=40, lr=3e-3))
    assert res.curve[-1] < res.curve[0]
    assert np.mean(res.curve[-5:]) < np.mean(res.curve[:5])
    assert res.heldout_nll <= res.baseline_nll


def test_training_is_bit_reproducible():
    x, y = _linear_problem(32)
    cfg = sg.TrainConfig(batch_size=8, epochs=3, seed=11)
    a = sg.train(x, y, ARCH, cfg).model
    b = sg.train(x, y, ARCH, cfg).model
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        sg.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        sg.TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        sg.TrainConfig(lr=-1.0)


def test_prob_in_box_limits():
    assert sg.prob_in_box([0.0, 0.0], [1e-8, 1e-8], [-1, -1], [1, 1]) == pytest.approx(1.0)
    assert sg.prob_in_box([5.0, 0.0], [1e-8, 1e-8], [-1, -1], [1, 1]) == pytest.approx(0.0, abs=1e-300)
    assert sg.prob_in_box([0.0, 0.0], [1.0, 1.0], [-1e9, -1e9], [1e9, 1e9]) == 1.0
    with pytest.raises(ValueError):
        sg.prob_in_box([0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [1.0, 2.0])
    # mean on the lower face: the Phi(0) = 0.5 factor
    assert sg.prob_in_box([0.0], [2.5], [0.0], [1e9]) == 0.5


def test_prob_in_box_monte_carlo():
    rng = np.random.default_rng(8)
    mean, var = np.array([0.3, -0.2]), np.array([0.8, 1.5])
    lo, hi = np.array([-0.5, -1.0]), np.array([1.0, 0.7])
    draws = mean + np.sqrt(var) * rng.standard_normal((1_000_000, 2))
    mc = np.all((draws >= lo) & (draws <= hi), axis=1).mean()
    assert sg.prob_in_box(mean, var, lo, hi) == pytest.approx(mc, abs=0.002)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 2), st.floats(0.0, 1.0), st.floats(0.01, 1.0))
def test_prob_in_box_grows_with_the_box(m, s, lo_shift, grow):
    lo, hi = np.array([lo_shift - 1, -1.0]), np.array([lo_shift + 0.5, 1.0])
    p_small = sg.prob_in_box([m, 0.0], [s, s], lo, hi)
    p_big = sg.prob_in_box([m, 0.0], [s, s], lo - grow, hi + grow)
    assert 0.0 <= p_small <= p_big <= 1.0


def test_standardizer_roundtrip_and_constant_column():
    y = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]])
    s = sg.Standardizer.fit(y)
    np.testing.assert_allclose(s.inverse(s.forward(y)), y, rtol=1e-15)
    assert s.std[1] == 1.0
    np.testing.assert_allclose(s.forward(y).mean(0), 0.0, atol=1e-15)


def test_constant_baseline_nll():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((100, 2)), rng.standard_normal((30, 2))
    ref = -np.mean([stats.multivariate_normal.logpdf(r, a.mean(0), np.diag(a.var(0))) for r in b])
    assert sg.constant_baseline_nll(a, b) == pytest.approx(ref, rel=1e-12)


def test_save_load_roundtrip(model, tmp_path):
    path = model.save(tmp_path / "m")
    back = sg.Surrogate.load(path)
    x = binary(np.random.default_rng(10), 2)
    assert model.predict(x)[0].tobytes() == back.predict(x)[0].tobytes()
    assert back.arch == model.arch
    blob = (tmp_path / "m.bin").read_bytes()
    assert len(blob) == 8 * sum(v.size for v in model.params.values())

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special, stats

from psinvert import randfield as rf
from psinvert import tensorad as ad


@pytest.fixture(scope="module")
def grid():
    return rf.SpectralGrid(32, 16, rf.SdfConfig(36, 65.0, 12.0))


def test_sdf_weights_closed_forms():
    np.testing.assert_allclose(rf.sdf_weights(np.zeros(100)), np.full(100, 0.01), atol=1e-15)
    np.testing.assert_allclose(rf.sdf_weights(np.array([math.log(2.0), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 100), elements=st.floats(-50, 50)))
def test_sdf_weights_on_simplex(phi):
    g = rf.sdf_weights(phi)
    assert np.all(g >= 0)
    assert abs(g.sum() - 1.0) < 1e-12


def test_sdf_peak_value():
    cfg = rf.SdfConfig(36, 65.0, 12.0)
    gamma = np.zeros(36)
    gamma[7] = 1.0
    assert rf.sdf_eval(gamma, cfg.centers[7], cfg) == pytest.approx(1 / (2 * math.pi * 144.0), rel=1e-14)


def test_sdf_nonnegative_and_swap_symmetric():
    cfg = rf.SdfConfig(36, 65.0, 12.0)
    rng = np.random.default_rng(0)
    w = rng.uniform(0, 65, (200, 2))
    g = rf.sdf_eval(rng.dirichlet(np.ones(36)), w, cfg)
    assert np.all(g >= 0)
    uni = np.full(36, 1 / 36)
    np.testing.assert_allclose(rf.sdf_eval(uni, w, cfg), rf.sdf_eval(uni, w[:, ::-1], cfg), rtol=1e-12)


def test_centers_in_domain():
    c = rf.SdfConfig(100, 65.0, 12.0).centers
    assert c.shape == (100, 2) and c.min() == 0.0 and c.max() == 65.0


def test_bad_sdf_config():
    with pytest.raises(ValueError):
        rf.SdfConfig(35)
    with pytest.raises(ValueError):
        rf.SdfConfig(36, bandwidth=0.0)


def test_phase_transform_uniform():
    rng = np.random.default_rng(1)
    ang = rf.phase_transform(rng.standard_normal(20000))
    assert ang.min() >= 0 and ang.max() <= 2 * math.pi
    assert stats.kstest(ang / (2 * math.pi), "uniform").pvalue > 1e-3


def test_synthesis_matches_explicit_cosine_sum(grid):
    rng = np.random.default_rng(2)
    phi = rng.standard_normal(36)
    psi = rng.standard_normal(grid.dim_psi)
    # independent evaluation of sum_k A_k cos(w_k . s + Psi_k)
    dens = special.softmax(phi) @ rf._rbf_matrix(grid.nodes, grid.sdf)
    amp = np.sqrt(dens / dens.sum())
    ang = 2 * math.pi * stats.norm.cdf(psi)
    n = grid.n_pixels
    s = (np.arange(n) + 0.5) / n
    ref = np.zeros((n, n))
    K = len(grid.nodes)
    for k, (w1, w2) in enumerate(grid.nodes):
        for fam, sign in enumerate((1.0, -1.0)):
            ref += amp[k] * np.cos(w1 * s[None, :] + sign * w2 * s[:, None] + ang[fam * K + k])
    np.testing.assert_allclose(rf.synthesize_field(phi, psi, grid), ref, atol=1e-11)


def test_synthesis_deterministic(grid):
    rng = np.random.default_rng(3)
    phi, psi = rng.standard_normal(36), rng.standard_normal(grid.dim_psi)
    a = rf.synthesize_field(phi, psi, grid)
    b = rf.synthesize_field(phi, psi, grid)
    assert a.tobytes() == b.tobytes()


def test_synthesis_length_mismatch(grid):
    with pytest.raises(ValueError, match="phase vector"):
        rf.synthesize_field(np.zeros(36), np.zeros(grid.dim_psi - 1), grid)
    with pytest.raises(ValueError, match="phi length"):
        rf.synthesize_field(np.zeros(35), np.zeros(grid.dim_psi), grid)


def _ensemble(grid, phi, n, seed):
    rng = np.random.default_rng(seed)
    return rf.synthesize_field(phi, rng.standard_normal((n, grid.dim_psi)), grid)


def test_unit_variance_over_pixel_samples(grid):
    rng = np.random.default_rng(4)
    phi = rng.standard_normal(36)
    fields = _ensemble(grid, phi, 10_000, 5)
    # one pixel per field keeps the 10^4 samples independent
    r, c = rng.integers(0, 32, size=(2, 10_000))
    vals = fields[np.arange(10_000), r, c]
    assert abs(vals.var() - 1.0) < 0.05
    assert grid.covariance(phi, [0.0, 0.0])[0] == pytest.approx(1.0, abs=1e-12)


def test_autocovariance_matches_discrete_spectrum(grid):
    rng = np.random.default_rng(6)
    phi = rng.standard_normal(36)
    fields = _ensemble(grid, phi, 3000, 7)
    n = grid.n_pixels
    for dr, dc in [(0, 0), (0, 1), (1, 0), (1, 1), (-1, 2), (0, 3)]:
        r0, r1 = max(0, -dr), n - max(0, dr)
        c0, c1 = max(0, -dc), n - max(0, dc)
        prod = fields[:, r0:r1, c0:c1] * fields[:, r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        per_field = prod.mean(axis=(1, 2))
        est = per_field.mean()
        se = per_field.std(ddof=1) / math.sqrt(len(per_field))
        exact = grid.covariance(phi, [dc / n, dr / n])[0]  # columns step s1, rows step s2
        assert abs(est - exact) < 3 * se + 1e-12, (dr, dc, est, exact, se)


def test_statistical_homogeneity(grid):
    phi = np.random.default_rng(8).standard_normal(36)
    fields = _ensemble(grid, phi, 4000, 9)
    a, b = fields[:, 3, 5], fields[:, 20, 27]
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_cutoff_values():
    assert rf.cutoff_from_vf(0.5) == 0.0
    assert rf.cutoff_from_vf(0.3) == pytest.approx(0.5244005127080407, abs=1e-12)
    # independent: bisection on erf
    lo, hi = -5.0, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < 0.7:
            lo = mid
        else:
            hi = mid
    assert rf.cutoff_from_vf(0.3) == pytest.approx(lo, abs=1e-12)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            rf.cutoff_from_vf(bad)


@pytest.mark.parametrize("vf", [0.3, 0.5, 0.7])
def test_volume_fraction(grid, vf):
    rng = np.random.default_rng(10)
    x = rf.sample_microstructures(rng.standard_normal(36), grid, vf, rng, 100)
    assert abs(x.mean() - vf) < 0.02


def test_smooth_threshold_values():
    assert rf.smooth_threshold(np.array([0.3]), 0.3)[0] == 0.5
    assert rf.smooth_threshold(np.array([1.0]), 0.0, eps=1e6)[0] == 1.0
    assert rf.smooth_threshold(np.array([0.2]), 0.0, 25.0)[0] == pytest.approx((math.tanh(5) + 1) / 2, rel=1e-15)
    assert math.tanh(5) == pytest.approx(0.99991, abs=1e-5)
    with pytest.raises(ValueError):
        rf.smooth_threshold(np.zeros(2), 0.0, 0.0)


def test_hard_threshold_and_agreement(grid):
    assert np.all(rf.hard_threshold(np.full((4, 4), 2.0), 1.0) == 1.0)
    assert np.all(rf.hard_threshold(np.full((4, 4), 0.0), 1.0) == 0.0)
    rng = np.random.default_rng(11)
    xg = rf.synthesize_field(rng.standard_normal(36), rng.standard_normal((20, grid.dim_psi)), grid)
    x0 = rf.cutoff_from_vf(0.4)
    hard = rf.hard_threshold(xg, x0)
    soft = np.round(rf.smooth_threshold(xg, x0, 25.0))
    mask = np.abs(xg - x0) >= 1e-6
    assert np.array_equal(hard[mask], soft[mask])
    assert set(np.unique(hard)) <= {0.0, 1.0}


def test_relaxed_mean_gradient(grid):
    rng = np.random.default_rng(12)
    phi0 = rng.standard_normal(36)
    psi0 = rng.standard_normal(grid.dim_psi)
    x0 = 0.1
    eps = 5.0  # milder slope keeps central differences well conditioned

    def f(phi, psi):
        return float(rf.smooth_threshold(rf.synthesize_field(phi, psi, grid), x0, eps).mean())

    phi_t = ad.Tensor(phi0, requires_grad=True)
    psi_t = ad.Tensor(psi0, requires_grad=True)
    ad.backward(ad.mean(rf.smooth_threshold(rf.synthesize_field(phi_t, psi_t, grid), x0, eps)))
    h = 1e-6
    for i in rng.choice(36, 6, replace=False):
        e = np.zeros(36)
        e[i] = h
        num = (f(phi0 + e, psi0) - f(phi0 - e, psi0)) / (2 * h)
        assert phi_t.grad[i] == pytest.approx(num, rel=1e-3, abs=1e-9)
    for i in rng.choice(grid.dim_psi, 6, replace=False):
        e = np.zeros(grid.dim_psi)
        e[i] = h
        num = (f(phi0, psi0 + e) - f(phi0, psi0 - e)) / (2 * h)
        assert psi_t.grad[i] == pytest.approx(num, rel=1e-3, abs=1e-9)


def test_microstructure_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    ms = rf.Microstructure(rng.integers(0, 2, (16, 16)).astype(float), "binary", 0.5, 0.0, 42)
    rf.save_microstructure(ms, tmp_path / "m")
    back = rf.load_microstructure(tmp_path / "m")
    assert back.grid.tobytes() == ms.grid.tobytes()
    assert (back.mode, back.vf, back.x0, back.seed) == ("binary", 0.5, 0.0, 42)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw == ms.grid.astype("<f8").tobytes()


def test_microstructure_validation():
    with pytest.raises(ValueError):
        rf.Microstructure(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        rf.Microstructure(np.zeros((4, 4)), mode="fuzzy")

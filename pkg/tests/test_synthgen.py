import math

import numpy as np
import pytest
from scipy.stats import chi2, kstest

from tsnorm.data import RngState
from tsnorm import synthgen as sg


def test_ma_autocovariance_examples():
    assert sg.ma_autocovariance(np.array([-1.0]), 1.0, 0) == pytest.approx(1.0)
    theta = np.array([-1.0, 0.5, -0.2, 0.8])
    assert sg.ma_autocovariance(theta, 1.0, 0) == pytest.approx(1.93)
    assert sg.ma_autocovariance(theta, 1.0, 1) == pytest.approx(-0.76)
    assert sg.ma_autocovariance(theta, 1.0, 4) == 0.0
    assert sg.ma_autocovariance(theta, 2.0, 0) == pytest.approx(4 * 1.93)


def one_feature_config(**kw):
    return sg.SynthConfig(pdfs=[sg.pdf_left_skew], bounds=[(-1.0, 7.0)],
                          theta=np.array([[-1.0, 0.5, -0.2, 0.8]]), n=10, t=6, **kw)


def test_build_covariance_single_feature_is_banded_toeplitz():
    cfg = one_feature_config(seed=0)
    sigma = sg.build_covariance(cfg, RngState(0).generator())
    t = cfg.t
    assert sigma.shape == (t, t)
    for lag in range(t):
        want = sg.ma_autocovariance(cfg.theta[0], 1.0, lag)
        band = np.diagonal(sigma, offset=lag)
        assert np.allclose(band, want)
    assert np.max(np.abs(sigma - sigma.T)) < 1e-15


def test_build_covariance_diagonal_and_symmetry_multifeature():
    cfg = sg.default_config(n=5, t=4, seed=1)
    sigma = sg.build_covariance(cfg, RngState(1).generator())
    assert np.max(np.abs(sigma - sigma.T)) < 1e-15
    for j in range(3):
        s0 = sg.ma_autocovariance(cfg.theta[j], 1.0, 0)
        assert np.allclose(np.diagonal(sigma)[j * 4:(j + 1) * 4], s0)


def test_nearest_psd_examples():
    eye = np.eye(3)
    assert np.max(np.abs(sg.nearest_psd(eye) - eye)) < 1e-12

    fixed = sg.nearest_psd(np.diag([1.0, -1.0]))
    assert np.allclose(fixed, np.diag([1.0, 0.0]), atol=1e-12)

    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.normal(size=(6, 6))
        sym = (a + a.T) / 2
        out = sg.nearest_psd(sym)
        assert np.linalg.eigvalsh(out).min() >= -1e-10
        again = sg.nearest_psd(out)
        assert np.max(np.abs(again - out)) < 1e-10  # idempotent

    with pytest.raises(ValueError, match="symmetric"):
        sg.nearest_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sample_correlated_uniforms_identity_cov():
    rng = RngState(3).generator()
    u = sg.sample_correlated_uniforms(np.eye(4), 10_000, rng)
    assert u.shape == (10_000, 4)
    assert np.all((u > 0) & (u < 1))
    for j in range(4):
        assert abs(u[:, j].mean() - 0.5) < 0.02
    # KS sanity check against U(0,1) at the 1% level
    assert kstest(u[:, 0], "uniform").pvalue > 0.01


def test_sample_correlated_uniforms_degenerate_coordinate():
    sigma = np.diag([1.0, 0.0])
    u = sg.sample_correlated_uniforms(sigma, 50, RngState(4).generator())
    assert np.allclose(u[:, 1], 0.5)


def test_build_inverse_cdf_uniform_density():
    table = sg.build_inverse_cdf(lambda x: np.ones_like(x), 0.0, 1.0, 1e-3, use_cache=False)
    assert sg.inv_cdf_lookup(table, 0.25) == pytest.approx(0.25, abs=1e-3)
    assert sg.inv_cdf_lookup(table, 0.75) == pytest.approx(0.75, abs=1e-3)


def test_build_inverse_cdf_normal_median():
    pdf = lambda x: np.exp(-0.5 * x * x)
    table = sg.build_inverse_cdf(pdf, -8.0, 8.0, 1e-3, use_cache=False)
    assert abs(sg.inv_cdf_lookup(table, 0.5)) < 2e-3


def test_inv_cdf_lookup_monotone_and_grid_identity():
    pdf = lambda x: np.exp(-0.5 * x * x)
    table = sg.build_inverse_cdf(pdf, -6.0, 6.0, 1e-2, use_cache=False)
    us = np.linspace(0.01, 0.99, 200)
    xs = sg.inv_cdf_lookup(table, us)
    assert np.all(np.diff(xs) >= 0)
    # lookup of the tabulated CDF returns the grid point itself
    idx = np.arange(50, len(table.x), 97)
    assert np.max(np.abs(sg.inv_cdf_lookup(table, table.cdf[idx]) - table.x[idx])) <= 1e-2


def test_build_inverse_cdf_zero_mass_rejected():
    with pytest.raises(ValueError, match="zero mass"):
        sg.build_inverse_cdf(lambda x: np.zeros_like(x), 0.0, 1.0, 1e-3, use_cache=False)


def test_table_cache_reuses_instance():
    table_a = sg.build_inverse_cdf(sg.pdf_left_skew, -1.0, 7.0, 1e-2)
    table_b = sg.build_inverse_cdf(sg.pdf_left_skew, -1.0, 7.0, 1e-2)
    assert table_a is table_b
    assert table_a.cached


def test_builtin_pdf_values():
    f1, f2, f3 = sg.builtin_pdfs()
    phi0 = 1.0 / math.sqrt(2 * math.pi)
    assert f1(np.array([-4.0]))[0] == pytest.approx(10 * 0.5 * phi0)  # 1.99471
    assert f1(np.array([-4.0]))[0] == pytest.approx(1.99471, abs=1e-5)
    # the bump term dominates at 8.5
    assert f1(np.array([8.5]))[0] == pytest.approx(math.exp(0.5) / 10.0, rel=1e-6)
    assert f1(np.array([9.7]))[0] == pytest.approx(0.0, abs=1e-9)  # bump ends at 9.5
    grid = np.linspace(-1.0, 7.0, 2000)
    assert np.all(f3(grid) >= 0.0)
    # two-regime density is continuous-by-parts and nonnegative on its bounds
    assert np.all(f2(np.linspace(-30, 30, 2000)) >= 0.0)


def test_generate_dataset_deterministic():
    cfg = sg.default_config(n=50, t=5, seed=7)
    a = sg.generate_dataset(cfg)
    b = sg.generate_dataset(sg.default_config(n=50, t=5, seed=7))
    assert np.array_equal(a.batch.values, b.batch.values)
    assert np.array_equal(a.labels, b.labels)
    c = sg.generate_dataset(sg.default_config(n=50, t=5, seed=8))
    assert not np.array_equal(a.batch.values, c.batch.values)


def test_generate_dataset_balance_small():
    cfg = sg.default_config(n=2000, t=10, seed=5)
    ds = sg.generate_dataset(cfg)
    assert abs(ds.labels.mean() - 0.5) < 0.05


def test_generate_dataset_literal_threshold_supported():
    cfg = sg.default_config(n=500, t=10, seed=5, response_threshold=0.5)
    ds = sg.generate_dataset(cfg)
    assert set(np.unique(ds.labels)) <= {0, 1}


def test_generated_marginals_match_density():
    # chi-square GoF on the first timestep (iid across series), 20 bins, 1% level
    cfg = sg.default_config(n=4000, t=5, seed=6)
    ds = sg.generate_dataset(cfg)
    for j in range(3):
        a, b = cfg.bounds[j]
        table = sg.build_inverse_cdf(cfg.pdfs[j], a, b, cfg.delta[j])
        samples = ds.batch.values[:, j, 0]
        n_bins = 20
        qs = np.linspace(0, 1, n_bins + 1)[1:-1]
        edge_idx = np.searchsorted(table.cdf, qs, side="left")
        edges_x = (table.x[edge_idx] + table.x[np.minimum(edge_idx + 1, len(table.x) - 1)]) / 2
        cum = np.concatenate([[0.0], table.cdf[edge_idx], [1.0]])
        expected = np.diff(cum) * len(samples)
        counts, _ = np.histogram(samples, bins=np.concatenate([[a - 1], edges_x, [b + 1]]))
        stat = ((counts - expected) ** 2 / expected).sum()
        assert stat < chi2.ppf(0.99, n_bins - 1), f"feature {j}: chi2={stat:.1f}"


def test_latent_signal_supports_linear_model():
    cfg = sg.default_config(n=3000, t=10, seed=9)
    ds, u = sg.generate_dataset(cfg, return_latent=True)
    x = u.reshape(ds.n, -1)
    y = ds.labels.astype(float)
    w = np.zeros(x.shape[1])
    b = 0.0
    xtr, ytr = x[:2400], y[:2400]
    for _ in range(400):
        p = 1.0 / (1.0 + np.exp(-(xtr @ w + b)))
        w -= 0.5 * xtr.T @ (p - ytr) / len(ytr)
        b -= 0.5 * float((p - ytr).mean())
    pva = 1.0 / (1.0 + np.exp(-(x[2400:] @ w + b)))
    accuracy = ((pva > 0.5) == y[2400:]).mean()
    assert accuracy > 0.8

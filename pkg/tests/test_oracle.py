import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postdenoise.oracle import (
    TOY_PRIOR, GaussianPrior, OracleBudgetWarning, SmoothFieldPrior, exact_sampler_mse,
    make_toy_dataset, navg_error_law, navg_theory, posterior_params, psnr_gap_db,
)


def test_posterior_substitution():
    p = posterior_params(GaussianPrior(0.0, 1.0), 1.0, 0.5)
    assert p.mu_post == pytest.approx(0.8)
    assert p.sigma_post ** 2 == pytest.approx(0.2)


def test_posterior_symmetric_case():
    p = posterior_params(GaussianPrior(0.3, 0.5), np.array([1.0, -1.0]), 0.5)
    np.testing.assert_allclose(p.mu_post, (np.array([1.0, -1.0]) + 0.3) / 2)
    assert p.sigma_post ** 2 == pytest.approx(0.25 / 2)


def test_posterior_uninformative_limit():
    p = posterior_params(GaussianPrior(0.0, 1e6), 0.7, 0.1)
    assert p.mu_post == pytest.approx(0.7, abs=1e-12)


def test_posterior_noiseless():
    p = posterior_params(GaussianPrior(0.0, 1.0), np.array([0.25]), 0.0)
    assert p.sigma_post == 0 and p.mu_post[0] == 0.25


@settings(max_examples=100, deadline=None)
@given(s0=st.floats(1e-3, 1e3), s=st.floats(1e-3, 1e3))
def test_precision_additivity(s0, s):
    sp = posterior_params(GaussianPrior(0.0, s0), 0.0, s).sigma_post
    assert 1 / sp ** 2 == pytest.approx(1 / s0 ** 2 + 1 / s ** 2, rel=1e-9)
    assert 0 < sp <= min(s0, s) * (1 + 1e-12)


def test_smooth_prior_marginal_std_and_spectrum():
    prior = SmoothFieldPrior(0.5, 0.12, 16, 1.5)
    # unit-energy kernel: mean eigenvalue equals the per-pixel variance
    assert prior.spectrum.mean() == pytest.approx(0.12 ** 2, rel=1e-12)
    x = prior.sample(2000, np.random.default_rng(0))
    assert x.std() == pytest.approx(0.12, rel=0.02)


def test_smooth_posterior_matches_dense_gaussian_conditioning():
    # independent route: explicit covariance matrices and a linear solve
    prior = SmoothFieldPrior(0.4, 0.2, 4, 1.0)
    D = 16
    basis = np.eye(D).reshape(D, 1, 4, 4)
    cov = np.stack([prior._filter(prior._filter(b, np.sqrt(prior.spectrum)), np.sqrt(prior.spectrum))
                    .ravel() for b in basis])
    sigma = 0.3
    y = np.random.default_rng(1).random((1, 1, 4, 4))
    gain = cov @ np.linalg.inv(cov + sigma ** 2 * np.eye(D))
    mu = 0.4 + gain @ (y.ravel() - 0.4)
    post_cov = cov - gain @ cov
    np.testing.assert_allclose(prior.posterior_mean(y, sigma).ravel(), mu, atol=1e-12)
    assert prior.posterior_variance(sigma) == pytest.approx(np.trace(post_cov) / D, rel=1e-10)


@pytest.mark.parametrize("prior", [GaussianPrior(0.5, 0.2, 8), TOY_PRIOR], ids=["iid", "smooth"])
def test_three_db_gap(prior):
    sigma = 50 / 255
    mmse, samp = exact_sampler_mse(prior, sigma, 10_000, seed=0)
    assert samp / mmse == pytest.approx(2.0, rel=0.05)
    assert psnr_gap_db(mmse, samp) == pytest.approx(10 * math.log10(2), abs=0.2)
    assert mmse == pytest.approx(prior.posterior_variance(sigma), rel=0.05)


def test_noiseless_limit():
    mmse, samp = exact_sampler_mse(GaussianPrior(0.5, 0.2, 4), 1e-6, 1000)
    assert mmse < 1e-11 and samp < 1e-11


def test_budget_guard():
    with pytest.warns(OracleBudgetWarning):
        exact_sampler_mse(GaussianPrior(0.5, 0.2, 4), 0.1, 100)


@pytest.mark.parametrize("prior", [GaussianPrior(0.5, 0.2, 8), TOY_PRIOR], ids=["iid", "smooth"])
def test_navg_law(prior):
    sigma = 50 / 255
    got = navg_error_law(prior, sigma, (1, 4, 16), 10_000, seed=1)
    for n, v in got.items():
        assert v == pytest.approx(navg_theory(prior, sigma, n), rel=0.10)
    assert got[4] == pytest.approx(1.25 * prior.posterior_variance(sigma), rel=0.05)


def test_navg_law_limits():
    prior = GaussianPrior(0.0, 1.0, 4)
    assert navg_theory(prior, 0.5, 1) == pytest.approx(2 * 0.2)
    assert navg_theory(prior, 0.5, 10 ** 9) == pytest.approx(0.2, rel=1e-6)


def test_toy_dataset(tmp_path):
    t0 = time.perf_counter()
    make_toy_dataset(TOY_PRIOR, 2000, 16, 3, tmp_path / "a")
    assert time.perf_counter() - t0 < 10
    make_toy_dataset(TOY_PRIOR, 2000, 16, 3, tmp_path / "b")
    a = (tmp_path / "a" / "images.npy").read_bytes()
    assert a == (tmp_path / "b" / "images.npy").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["prior"]["sigma0"] == TOY_PRIOR.sigma0 and manifest["seed"] == 3
    x = np.load(tmp_path / "a" / "images.npy")
    assert x.shape == (2000, 1, 16, 16)
    assert x.std() == pytest.approx(TOY_PRIOR.sigma0, rel=0.02)


def test_toy_dataset_sizes(tmp_path):
    with pytest.raises(ValueError):
        make_toy_dataset(TOY_PRIOR, 4, 12, 0, tmp_path)
    make_toy_dataset(TOY_PRIOR, 4, 8, 0, tmp_path, write_png=True)
    assert len(list(tmp_path.glob("*.png"))) == 4

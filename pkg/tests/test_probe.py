import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from mechpilot.evidence.probe import DegenerateActivations, SingleClass, fit_probe, fit_weights
from mechpilot.workbench.run import ActivationSet, Site


def _acts(X):
    return ActivationSet(Site(0), np.asarray(X, dtype=np.float32), tuple(f"p{i}" for i in range(len(X))), "sha256:x")


def _objective_oracle(X, y, l2):
    """Direct minimisation of the same penalised loss in standardized space."""
    mu, sd = X.mean(0), X.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd

    def loss(beta):
        z = Z @ beta[:-1] + beta[-1]
        return np.sum(np.logaddexp(0, z) - y * z) + 0.5 * l2 * beta[:-1] @ beta[:-1]

    beta = minimize(loss, np.zeros(X.shape[1] + 1), method="BFGS", options={"gtol": 1e-10}).x
    w = beta[:-1] / sd
    return w, beta[-1] - w @ mu


class TestFitWeights:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_direct_minimisation(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 3))
        y = (X[:, 0] + rng.normal(size=60) > 0).astype(float)
        if y.all() or not y.any():
            return
        w, b = fit_weights(X, y, 1.0)
        w2, b2 = _objective_oracle(X, y, 1.0)
        assert np.allclose(w, w2, atol=1e-4) and abs(b - b2) < 1e-4

    def test_gradient_zero_at_solution(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(80, 4))
        y = (X[:, 1] > 0).astype(float)
        w, b = fit_weights(X, y, 1.0)
        p = expit(X @ w + b)
        # intercept is unpenalized, so its gradient is exactly the residual sum
        assert abs(np.sum(p - y)) < 1e-6

    def test_more_penalty_shrinks(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(80, 4))
        y = (X[:, 0] > 0).astype(float)
        assert np.linalg.norm(fit_weights(X, y, 100.0)[0]) < np.linalg.norm(fit_weights(X, y, 0.1)[0])


class TestFitProbe:
    def test_separable_data_scores_in_order(self):
        X = np.r_[np.full((10, 2), -1.0), np.full((10, 2), 1.0)] + np.linspace(0, 0.1, 20)[:, None]
        y = np.r_[np.zeros(10), np.ones(10)].astype(bool)
        probe = fit_probe(_acts(X), y, seed=0)
        s = probe.score(X)
        assert s[y].min() > s[~y].max()

    def test_single_class(self):
        with pytest.raises(SingleClass):
            fit_probe(_acts(np.eye(3)), [True, True, True], 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateActivations):
            fit_probe(_acts(np.ones((4, 3))), [True, False, True, False], 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fit_probe(_acts(np.eye(3)), [True, False], 0)

    def test_fit_digest_depends_on_seed_and_data(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 3))
        y = np.arange(20) % 2 == 0
        a = fit_probe(_acts(X), y, 0)
        assert a.fit_digest == fit_probe(_acts(X), y, 0).fit_digest
        assert a.fit_digest != fit_probe(_acts(X), y, 1).fit_digest
        assert a.fit_digest != fit_probe(_acts(X + 1e-3), y, 0).fit_digest

    def test_weights_read_only(self):
        rng = np.random.default_rng(0)
        probe = fit_probe(_acts(rng.normal(size=(10, 2))), np.arange(10) % 2 == 0, 0)
        with pytest.raises(ValueError):
            probe.weight[0] = 1.0

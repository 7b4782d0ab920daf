"""Sklearn-style estimator wrapping the functional fitting API.

JenssBayleyLCSM follows the fit/predict convention so it composes with
pipelines, cloning, and parameter search from the wider ecosystem.  Because
every individual carries their own measurement occasions, ``fit`` takes the
outcome matrix together with a matching matrix of times instead of a single
feature matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .estimation import Dataset, FitConfig, ModelSpec, fiml_loglik, fit
from .model import batched_implied_moments
from .scores import factor_scores, rate_curve_on_grid


def _validate_pair(y, times):
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if times is None:
        raise ValueError("times is required: one occasion per observed score")
    times = check_array(times, dtype=np.float64, ensure_2d=False)
    if times.ndim == 1:
        times = np.tile(times, (y.shape[0], 1))
    if times.shape != y.shape:
        raise ValueError(
            f"times shape {times.shape} does not match y shape {y.shape}"
        )
    return y, times


class JenssBayleyLCSM(BaseEstimator):
    """Jenss-Bayley latent change score model with individual occasions.

    Parameters
    ----------
    model : {"full", "reduced"}
        Whether the log acceleration ratio gets a variance ("full") or is a
        fixed effect ("reduced").
    expression : {"midpoint", "right_endpoint"}
        Change-score approximation; "midpoint" is the proposed expression.
    framework : {"lcsm", "lgc"}
        Latent change score model or the latent growth curve sensitivity
        variant.
    max_restarts, max_iterations : int
        Optimizer restart and iteration budget.
    seed : int or None
        Seed for the restart jitter stream.
    """

    def __init__(
        self,
        model="full",
        expression="midpoint",
        framework="lcsm",
        max_restarts=10,
        max_iterations=500,
        seed=None,
    ):
        self.model = model
        self.expression = expression
        self.framework = framework
        self.max_restarts = max_restarts
        self.max_iterations = max_iterations
        self.seed = seed

    def _spec(self) -> ModelSpec:
        if self.model not in ("full", "reduced"):
            raise ValueError("model must be 'full' or 'reduced'")
        return ModelSpec(
            expression=self.expression,
            acceleration="random" if self.model == "full" else "fixed",
            framework=self.framework,
        )

    def fit(self, y, times):
        """Fit by full-information maximum likelihood.

        y is (n_individuals, n_waves); times is the matching occasion matrix,
        or a single shared schedule of length n_waves.
        """
        y, times = _validate_pair(y, times)
        spec = self._spec()
        dataset = Dataset(y=y, times=times)
        config = FitConfig(
            max_restarts=self.max_restarts, max_iterations=self.max_iterations
        )
        self.result_ = fit(dataset, spec, config, seed=self.seed)
        self.spec_ = spec
        self.params_ = self.result_.estimates
        self.se_ = self.result_.se
        self.param_names_ = self.result_.param_names
        self.loglik_ = self.result_.loglik
        self.aic_ = self.result_.aic
        self.bic_ = self.result_.bic
        self.converged_ = self.result_.converged
        self.improper_ = self.result_.improper
        self.n_waves_ = dataset.n_waves
        return self

    def predict(self, times):
        """Model-implied mean trajectory for each row of occasion times."""
        check_is_fitted(self, "result_")
        times = check_array(times, dtype=np.float64, ensure_2d=False)
        if times.ndim == 1:
            times = times[None, :]
        mu, _ = batched_implied_moments(times, self.params_, self.spec_)
        return mu

    def score(self, y, times):
        """Mean per-individual log-likelihood under the fitted parameters."""
        check_is_fitted(self, "result_")
        y, times = _validate_pair(y, times)
        dataset = Dataset(y=y, times=times)
        return fiml_loglik(self.params_, dataset, self.spec_) / dataset.n

    def factor_scores(self, y, times):
        """Regression factor scores; rows align with the input individuals."""
        check_is_fitted(self, "result_")
        y, times = _validate_pair(y, times)
        dataset = Dataset(y=y, times=times)
        return factor_scores(dataset, self.result_, self.spec_)

    def mean_rate_curve(self, time_grid, level=0.95):
        """(mean rate, lower, upper) over an arbitrary time grid."""
        check_is_fitted(self, "result_")
        return rate_curve_on_grid(self.params_, time_grid, self.spec_, level=level)

"""Mean growth-rate curves and regression factor scores.

Under the fitted model the observed vector and all latent variables --
growth factors, latent true scores, latent interval rates -- are jointly
normal.  Regression scores are the conditional expectations

    score_i = latent_mean_i + Psi_i Lambda_i' (Lambda_i Psi_i Lambda_i'
              + theta_eps I)^{-1} (y_i - mu_i)

where Psi_i, the covariance of the stacked latent vector (growth factors,
true scores, rates), is assembled as Gamma_i S Gamma_i' from the factor
covariance alone: true scores and rates carry no free variance of their own.
Scoring is LCSM-specific; the latent growth curve variant has no rate or
true-score latents to recover (its mean rate curve is still available).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .estimation import Dataset, FitResult
from .model import (
    IndividualSchedule,
    ModelSpec,
    PopulationParameters,
    _check_params_spec,
    _evaluation_times,
    _rate_loadings_at,
    _readonly,
    factor_mean_vector,
    loading_bundle,
)


@dataclass(frozen=True)
class LatentVariableSet:
    """One individual's latent scores, ordered (growth factors, ly, dy).

    growth_factors is always a 4-vector; in the reduced model its gamma entry
    is the fixed log acceleration ratio.
    """

    growth_factors: np.ndarray  # (4,)
    true_scores: np.ndarray     # (J,)
    rates: np.ndarray           # (J-1,)
    ok: bool = True

    def __post_init__(self):
        object.__setattr__(self, "growth_factors", _readonly(self.growth_factors))
        object.__setattr__(self, "true_scores", _readonly(self.true_scores))
        object.__setattr__(self, "rates", _readonly(self.rates))


@dataclass(frozen=True)
class ScoreMatrices:
    """Joint-distribution building blocks for one individual."""

    gamma_map: np.ndarray    # (q, q) with q = k + J + (J-1)
    s_core: np.ndarray       # (q, q): factor covariance block, zeros elsewhere
    lambda_full: np.ndarray  # (J, q): observed loadings (growth block only)
    latent_cov: np.ndarray   # (q, q) = gamma_map @ s_core @ gamma_map.T
    latent_mean: np.ndarray  # (q,) stacked (factor means, mean ly, mean dy)

    def __post_init__(self):
        for name in ("gamma_map", "s_core", "lambda_full", "latent_cov", "latent_mean"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))


def _rate_factor_mean(params: PopulationParameters, spec: ModelSpec) -> np.ndarray:
    # rate factors are (eta1, eta2[, gamma deviation]); the deviation has mean 0
    return factor_mean_vector(params, spec)[1:]


def mean_rate_curve(
    params: PopulationParameters,
    schedule: IndividualSchedule,
    spec: ModelSpec,
) -> np.ndarray:
    """Mean instantaneous growth rate at each interval's evaluation time."""
    _check_params_spec(params, spec)
    tstar = _evaluation_times(schedule.times[None, :], spec.expression)
    lam_r = _rate_loadings_at(
        tstar, float(params.mean[3]), float(params.mean[2]), spec.n_factors - 1
    )[0]
    return lam_r @ _rate_factor_mean(params, spec)


def rate_curve_on_grid(
    params: PopulationParameters,
    grid: np.ndarray,
    spec: ModelSpec,
    level: float = 0.95,
):
    """Mean rate and a Wald band over an arbitrary time grid.

    Returns (mean_rate, lower, upper); the band half-width at each grid time
    is z * sqrt(lam_r(t) Psi_r lam_r(t)') with Psi_r the covariance block of
    the rate-related factors.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    lam_r = _rate_loadings_at(
        grid[None, :], float(params.mean[3]), float(params.mean[2]),
        spec.n_factors - 1,
    )[0]
    mean_rate = lam_r @ _rate_factor_mean(params, spec)
    psi_r = params.covariance[1 : spec.n_factors, 1 : spec.n_factors]
    var = np.einsum("jk,kl,jl->j", lam_r, psi_r, lam_r)
    half = norm.ppf(0.5 * (1.0 + level)) * np.sqrt(np.maximum(var, 0.0))
    return mean_rate, mean_rate - half, mean_rate + half


def mean_true_scores(
    params: PopulationParameters,
    schedule: IndividualSchedule,
    spec: ModelSpec,
) -> np.ndarray:
    """Mean latent true score at each wave: growth loadings times factor means."""
    bundle = loading_bundle(schedule, params, spec)
    return bundle.growth_loadings @ factor_mean_vector(params, spec)


def score_matrices(
    schedule: IndividualSchedule,
    params: PopulationParameters,
    spec: ModelSpec,
) -> ScoreMatrices:
    """Assemble the joint latent mean/covariance machinery for one schedule."""
    if spec.framework != "lcsm":
        raise ValueError("factor scoring is defined for framework='lcsm' only")
    bundle = loading_bundle(schedule, params, spec)
    lam_r = bundle.rate_loadings
    omega = bundle.interval_matrix
    lam_g = bundle.growth_loadings
    k = spec.n_factors
    j = schedule.n_waves
    q = k + j + (j - 1)

    gamma_map = np.zeros((q, q))
    gamma_map[:k, :k] = np.eye(k)
    gamma_map[k : k + j, :k] = lam_g
    gamma_map[k : k + j, k : k + j] = np.tril(np.ones((j, j)))
    gamma_map[k : k + j, k + j :] = omega
    gamma_map[k + j :, 1:k] = lam_r  # zero column for eta0, rate loadings after
    gamma_map[k + j :, k + j :] = np.eye(j - 1)

    s_core = np.zeros((q, q))
    s_core[:k, :k] = params.covariance[:k, :k]

    lambda_full = np.zeros((j, q))
    lambda_full[:, :k] = lam_g

    latent_cov = gamma_map @ s_core @ gamma_map.T

    factor_mean = factor_mean_vector(params, spec)
    latent_mean = np.concatenate(
        [
            params.mean[:4] if not spec.reduced else params.mean[:3],
            lam_g @ factor_mean,
            lam_r @ factor_mean[1:],
        ]
    )
    return ScoreMatrices(
        gamma_map=gamma_map,
        s_core=s_core,
        lambda_full=lambda_full,
        latent_cov=latent_cov,
        latent_mean=latent_mean,
    )


def latent_covariance(
    schedule: IndividualSchedule,
    params: PopulationParameters,
    spec: ModelSpec,
) -> np.ndarray:
    """Covariance of the stacked latent vector (growth factors, ly, dy)."""
    return score_matrices(schedule, params, spec).latent_cov


def factor_scores(
    data: Dataset,
    result: FitResult,
    spec: ModelSpec = None,
) -> list:
    """Regression scores for every individual under a converged fit.

    Individuals whose conditioning matrix cannot be factorized are returned
    with ok=False and nan scores instead of aborting the batch.
    """
    spec = spec or result.spec
    if spec.framework != "lcsm":
        raise ValueError("factor scoring is defined for framework='lcsm' only")
    params = result.estimates
    _check_params_spec(params, spec)
    k = spec.n_factors
    j = data.n_waves
    psi = params.covariance[:k, :k]
    theta_eps = params.residual_variance
    out = []
    for i in range(data.n):
        schedule = data.schedule(i)
        bundle = loading_bundle(schedule, params, spec)
        lam_g = bundle.growth_loadings
        lam_r = bundle.rate_loadings
        factor_mean = factor_mean_vector(params, spec)
        mu_i = lam_g @ factor_mean
        sigma_i = lam_g @ psi @ lam_g.T + theta_eps * np.eye(j)
        try:
            cho = linalg.cho_factor(sigma_i, lower=True)
            weight = psi @ lam_g.T @ linalg.cho_solve(cho, data.y[i] - mu_i)
        except (linalg.LinAlgError, ValueError):
            out.append(
                LatentVariableSet(
                    growth_factors=np.full(4, np.nan),
                    true_scores=np.full(j, np.nan),
                    rates=np.full(j - 1, np.nan),
                    ok=False,
                )
            )
            continue
        eta = factor_mean + weight  # (eta0, eta1, eta2[, gamma deviation])
        growth = np.empty(4)
        growth[:3] = eta[:3]
        growth[3] = params.mean[3] + (eta[3] if k == 4 else 0.0)
        out.append(
            LatentVariableSet(
                growth_factors=growth,
                true_scores=lam_g @ eta,
                rates=lam_r @ eta[1:],
                ok=True,
            )
        )
    return out


def score_midpoint_times(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Evaluation times attached to each individual's rate scores."""
    return _evaluation_times(data.times, spec.expression)

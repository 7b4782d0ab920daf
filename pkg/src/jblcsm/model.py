"""Jenss-Bayley curves and person-specific loading matrices.

The Jenss-Bayley growth function

    y(t) = eta0 + eta1 * t + eta2 * (exp(gamma * t) - 1)

is an exponential that approaches the linear asymptote (eta0 - eta2) + eta1 * t
from below when eta2 < 0 and gamma < 0.  In the latent change score model
(LCSM) each latent true score accumulates latent instantaneous growth rates:
the rate over the interval (t_{j-1}, t_j) is evaluated either at the interval
midpoint (the proposed expression) or at the right endpoint (the existing
expression), multiplied by the interval length, and summed.  The rate is a
nonlinear function of gamma, so it is linearized around the population mean
mu_gamma, which turns the model into a person-specific linear factor model:

    rates_i   ~= Lambda_r(t*_i; mu_gamma, mu_eta2) @ (eta1, eta2, gamma - mu_gamma)
    loadings  Lambda_g = [1 | Omega @ Lambda_r]

where Omega holds the interval lengths in a lower staircase and t*_i are the
per-individual evaluation times.  Because the linearization centers gamma on
its mean, the deviation factor has mean zero and mu_gamma enters only through
the loadings.  All loading matrices therefore depend on the current values of
mu_gamma and mu_eta2 and are rebuilt on every evaluation.

The latent growth curve (LGC) variant applies the same linearization to the
level function directly: loadings [1, t, exp(mu_gamma t) - 1,
mu_eta2 * t * exp(mu_gamma t)].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DivergentCurveError

# exp argument beyond this is treated as a divergent curve rather than inf/0,
# keeping optimizer line searches finite
MAX_EXP_ARG = 700.0

EXPRESSIONS = ("midpoint", "right_endpoint")
ACCELERATIONS = ("random", "fixed")
FRAMEWORKS = ("lcsm", "lgc")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_exp_argument(arg) -> None:
    arg = np.asarray(arg)
    if arg.size and float(np.max(np.abs(arg))) > MAX_EXP_ARG:
        raise DivergentCurveError(
            "divergent curve: |gamma * t| exceeds %g" % MAX_EXP_ARG
        )


@dataclass(frozen=True)
class GrowthFactorVector:
    """One individual's growth factors.

    eta0: initial status (score units)
    eta1: slope of the linear asymptote (score units per time unit)
    eta2: vertical distance between initial status and the asymptote
          intercept; negative for growth approaching the asymptote from below
    gamma: log ratio of growth acceleration between consecutive time units
    """

    eta0: float
    eta1: float
    eta2: float
    gamma: float

    def __post_init__(self):
        values = (self.eta0, self.eta1, self.eta2, self.gamma)
        if not all(np.isfinite(v) for v in values):
            raise ValueError("growth factors must all be finite")
        if self.gamma >= 0:
            warnings.warn(
                "gamma >= 0: the curve does not approach a linear asymptote",
                stacklevel=2,
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.eta0, self.eta1, self.eta2, self.gamma])


@dataclass(frozen=True)
class PopulationParameters:
    """Population-level parameters: factor means, factor covariance, residual.

    The mean is always a 4-vector (mu_eta0, mu_eta1, mu_eta2, mu_gamma) and
    the covariance a 4x4 matrix, also in the reduced model: there the gamma
    row/column of the covariance is identically zero and mean[3] is the fixed
    log acceleration ratio.  Diagonal entries of the covariance may be
    negative (improper solutions remain representable and are flagged by the
    estimation module rather than rejected here).
    """

    mean: np.ndarray
    covariance: np.ndarray
    residual_variance: float
    reduced: bool = False

    def __post_init__(self):
        mean = _readonly(self.mean)
        cov = _readonly(self.covariance)
        if mean.shape != (4,):
            raise ValueError("mean must be a 4-vector")
        if cov.shape != (4, 4):
            raise ValueError("covariance must be 4x4")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("parameters must be finite")
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0.0):
            raise ValueError("covariance must be symmetric")
        if not self.residual_variance > 0:
            raise ValueError("residual_variance must be positive")
        if self.reduced and (np.any(cov[3, :] != 0.0) or np.any(cov[:, 3] != 0.0)):
            raise ValueError("reduced parameters require a zero gamma row/column")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "residual_variance", float(self.residual_variance))

    @property
    def n_factors(self) -> int:
        return 3 if self.reduced else 4


@dataclass(frozen=True)
class IndividualSchedule:
    """An individual's ordered measurement occasions.

    Strictly increasing and finite.  Model fitting requires J >= 3; shorter
    schedules are accepted here so moment construction can be exercised on
    degenerate cases.
    """

    times: np.ndarray

    def __post_init__(self):
        times = _readonly(np.atleast_1d(self.times))
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a non-empty 1-D vector")
        if not np.all(np.isfinite(times)):
            raise ValueError("times must be finite")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @property
    def n_waves(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class ModelSpec:
    """Model variant selector.

    expression: how change scores approximate the rate integral over an
        interval ("midpoint" is the proposed expression, "right_endpoint"
        the existing comparison expression).
    acceleration: "random" estimates a variance for gamma (full model),
        "fixed" treats gamma as a fixed effect (reduced model).
    framework: "lcsm" (latent change score) or "lgc" (latent growth curve
        sensitivity variant).
    """

    expression: str = "midpoint"
    acceleration: str = "random"
    framework: str = "lcsm"

    def __post_init__(self):
        if self.expression not in EXPRESSIONS:
            raise ValueError(f"expression must be one of {EXPRESSIONS}")
        if self.acceleration not in ACCELERATIONS:
            raise ValueError(f"acceleration must be one of {ACCELERATIONS}")
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"framework must be one of {FRAMEWORKS}")
        if self.expression == "right_endpoint" and self.framework != "lcsm":
            raise ValueError("right_endpoint is only defined for framework='lcsm'")

    @property
    def reduced(self) -> bool:
        return self.acceleration == "fixed"

    @property
    def n_factors(self) -> int:
        return 3 if self.reduced else 4


@dataclass(frozen=True)
class LoadingBundle:
    """Person-specific loading matrices for one schedule."""

    rate_loadings: np.ndarray    # (J-1, 3) or (J-1, 2) when reduced
    interval_matrix: np.ndarray  # (J, J-1)
    growth_loadings: np.ndarray  # (J, 4) or (J, 3) when reduced

    def __post_init__(self):
        object.__setattr__(self, "rate_loadings", _readonly(self.rate_loadings))
        object.__setattr__(self, "interval_matrix", _readonly(self.interval_matrix))
        object.__setattr__(self, "growth_loadings", _readonly(self.growth_loadings))


@dataclass(frozen=True)
class ImpliedMoments:
    """Model-implied mean vector and covariance matrix for one individual."""

    mean: np.ndarray        # (J,)
    covariance: np.ndarray  # (J, J)

    def __post_init__(self):
        object.__setattr__(self, "mean", _readonly(self.mean))
        object.__setattr__(self, "covariance", _readonly(self.covariance))


def jb_value(factors: GrowthFactorVector, t):
    """Deterministic Jenss-Bayley curve value at time(s) t."""
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("t must be finite")
    _check_exp_argument(factors.gamma * t)
    out = factors.eta0 + factors.eta1 * t + factors.eta2 * np.expm1(factors.gamma * t)
    return float(out) if out.ndim == 0 else out


def jb_rate(factors: GrowthFactorVector, t):
    """Instantaneous growth rate d/dt of jb_value at time(s) t."""
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("t must be finite")
    _check_exp_argument(factors.gamma * t)
    out = factors.eta1 + factors.eta2 * factors.gamma * np.exp(factors.gamma * t)
    return float(out) if out.ndim == 0 else out


def midpoints(schedule: IndividualSchedule) -> np.ndarray:
    """Midpoints of consecutive measurement intervals, length J-1."""
    t = schedule.times
    return 0.5 * (t[:-1] + t[1:])


def interval_matrix(schedule: IndividualSchedule) -> np.ndarray:
    """J x (J-1) staircase of interval lengths accumulating rates into levels.

    Row 1 is zero; row j holds (t2-t1, ..., tj-t_{j-1}, 0, ...), so the j-th
    row of interval_matrix @ rate_loadings accumulates each rate-loading
    column up to time t_j.
    """
    return _interval_matrices(schedule.times[None, :])[0]


def rate_loadings(
    schedule: IndividualSchedule,
    mu_gamma: float,
    mu_eta2: float,
    spec: ModelSpec,
) -> np.ndarray:
    """Linearized loadings of the interval rates on (eta1, eta2, gamma - mu_gamma).

    Rows correspond to intervals; the evaluation time is the interval midpoint
    for expression="midpoint" and the right endpoint for "right_endpoint".
    The deviation column is dropped when acceleration="fixed".
    """
    tstar = _evaluation_times(schedule.times[None, :], spec.expression)
    return _rate_loadings_at(tstar, mu_gamma, mu_eta2, spec.n_factors - 1)[0]


def growth_loadings(
    schedule: IndividualSchedule,
    params: PopulationParameters,
    spec: ModelSpec,
) -> np.ndarray:
    """J x 4 (or J x 3 reduced) loadings of the repeated outcome on the factors."""
    _check_params_spec(params, spec)
    return _growth_loadings_batch(schedule.times[None, :], params.mean, spec)[-1][0]


def loading_bundle(
    schedule: IndividualSchedule,
    params: PopulationParameters,
    spec: ModelSpec,
) -> LoadingBundle:
    """All three loading matrices for one schedule under current parameters."""
    _check_params_spec(params, spec)
    if spec.framework != "lcsm":
        raise ValueError("loading bundles are defined for framework='lcsm' only")
    lam_r, omega, lam_g = _growth_loadings_batch(
        schedule.times[None, :], params.mean, spec
    )
    return LoadingBundle(
        rate_loadings=lam_r[0], interval_matrix=omega[0], growth_loadings=lam_g[0]
    )


def implied_moments(
    schedule: IndividualSchedule,
    params: PopulationParameters,
    spec: ModelSpec,
) -> ImpliedMoments:
    """Model-implied mean and covariance of the repeated outcome."""
    mu, sigma = batched_implied_moments(schedule.times[None, :], params, spec)
    return ImpliedMoments(mean=mu[0], covariance=sigma[0])


# ---------------------------------------------------------------------------
# Batched internals: times has shape (n, J); used directly by the likelihood.
# ---------------------------------------------------------------------------


def _check_params_spec(params: PopulationParameters, spec: ModelSpec) -> None:
    if params.reduced != spec.reduced:
        raise ValueError(
            "dimension mismatch: params.reduced=%s but spec.acceleration=%r"
            % (params.reduced, spec.acceleration)
        )


def _evaluation_times(times: np.ndarray, expression: str) -> np.ndarray:
    if expression == "midpoint":
        return 0.5 * (times[:, :-1] + times[:, 1:])
    return times[:, 1:]


def _rate_loadings_at(
    tstar: np.ndarray, mu_gamma: float, mu_eta2: float, n_cols: int
) -> np.ndarray:
    _check_exp_argument(mu_gamma * tstar)
    e = np.exp(mu_gamma * tstar)
    cols = [np.ones_like(tstar), mu_gamma * e]
    if n_cols == 3:
        cols.append(mu_eta2 * e * (1.0 + mu_gamma * tstar))
    return np.stack(cols, axis=-1)


def _interval_matrices(times: np.ndarray) -> np.ndarray:
    n, n_waves = times.shape
    dt = np.diff(times, axis=1)
    mask = np.arange(n_waves)[:, None] > np.arange(n_waves - 1)[None, :]
    return dt[:, None, :] * mask[None, :, :]


def _growth_loadings_batch(times, mean, spec):
    """Returns (lam_r, omega, lam_g); lam_r and omega are None for LGC."""
    mu_gamma = float(mean[3])
    mu_eta2 = float(mean[2])
    if spec.framework == "lcsm":
        tstar = _evaluation_times(times, spec.expression)
        lam_r = _rate_loadings_at(tstar, mu_gamma, mu_eta2, spec.n_factors - 1)
        omega = _interval_matrices(times)
        ones = np.ones(times.shape + (1,))
        lam_g = np.concatenate([ones, omega @ lam_r], axis=2)
        return lam_r, omega, lam_g
    _check_exp_argument(mu_gamma * times)
    e = np.exp(mu_gamma * times)
    cols = [np.ones_like(times), times, e - 1.0]
    if spec.n_factors == 4:
        cols.append(mu_eta2 * times * e)
    return None, None, np.stack(cols, axis=-1)


def _loading_derivatives_batch(times, mean, spec):
    """d(growth loadings)/d(mu_gamma) and d/d(mu_eta2), batched.

    Only the loading dependence is differentiated here; the direct appearance
    of mu_eta2 in the factor mean is handled by the likelihood gradient.
    """
    mu_gamma = float(mean[3])
    mu_eta2 = float(mean[2])
    n, j = times.shape
    k = spec.n_factors
    if spec.framework == "lcsm":
        tstar = _evaluation_times(times, spec.expression)
        e = np.exp(mu_gamma * tstar)
        zeros_r = np.zeros_like(tstar)
        dr_gamma_cols = [zeros_r, e * (1.0 + mu_gamma * tstar)]
        if k == 4:
            dr_gamma_cols.append(mu_eta2 * tstar * e * (2.0 + mu_gamma * tstar))
        dr_gamma = np.stack(dr_gamma_cols, axis=-1)
        omega = _interval_matrices(times)
        zero_first = np.zeros((n, j, 1))
        dg_gamma = np.concatenate([zero_first, omega @ dr_gamma], axis=2)
        if k == 4:
            dr_eta2 = np.stack([zeros_r, zeros_r, e * (1.0 + mu_gamma * tstar)], axis=-1)
            dg_eta2 = np.concatenate([zero_first, omega @ dr_eta2], axis=2)
        else:
            dg_eta2 = np.zeros((n, j, k))
        return dg_gamma, dg_eta2
    e = np.exp(mu_gamma * times)
    zeros_j = np.zeros_like(times)
    dg_gamma_cols = [zeros_j, zeros_j, times * e]
    if k == 4:
        dg_gamma_cols.append(mu_eta2 * times**2 * e)
    dg_gamma = np.stack(dg_gamma_cols, axis=-1)
    if k == 4:
        dg_eta2 = np.stack([zeros_j, zeros_j, zeros_j, times * e], axis=-1)
    else:
        dg_eta2 = np.zeros((n, j, k))
    return dg_gamma, dg_eta2


def factor_mean_vector(params: PopulationParameters, spec: ModelSpec) -> np.ndarray:
    """Mean of the working factor vector (eta0, eta1, eta2[, gamma - mu_gamma]).

    The linearization centers gamma on mu_gamma, so the fourth working factor
    is the zero-mean deviation; mu_gamma itself enters through the loadings.
    """
    if spec.reduced:
        return params.mean[:3].copy()
    return np.array([params.mean[0], params.mean[1], params.mean[2], 0.0])


def batched_implied_moments(times, params, spec):
    """Implied means (n, J) and covariances (n, J, J) for stacked schedules."""
    _check_params_spec(params, spec)
    times = np.asarray(times, dtype=float)
    k = spec.n_factors
    _, _, lam_g = _growth_loadings_batch(times, params.mean, spec)
    mu = lam_g @ factor_mean_vector(params, spec)
    psi = params.covariance[:k, :k]
    sigma = lam_g @ psi @ lam_g.transpose(0, 2, 1)
    j = times.shape[1]
    sigma[:, np.arange(j), np.arange(j)] += params.residual_variance
    return mu, sigma

"""Full-information maximum likelihood estimation of the model variants.

Each individual contributes a multivariate-normal log density with
person-specific implied moments (loadings depend on the individual's
measurement occasions and on the current mu_gamma / mu_eta2 iterate):

    loglik_i = -(J/2) ln(2*pi) - 1/2 ln|Sigma_i| - 1/2 r_i' Sigma_i^{-1} r_i

The factor covariance is optimized as an unconstrained symmetric matrix
(free lower triangle, not a Cholesky factor) so that improper solutions --
negative factor variances, out-of-range factor correlations -- remain
representable and can be flagged after the fit.  The residual variance is
optimized on the log scale.  Maximization uses L-BFGS-B with analytic
gradients and per-coordinate scaling, restarting from multiplicatively
jittered starts when the optimizer fails.  Standard errors come from the
numerically differentiated observed information at the optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, stats

from .errors import DivergentCurveError, NonPositiveDefiniteError
from . import model as model_mod
from .model import (
    IndividualSchedule,
    ModelSpec,
    PopulationParameters,
    batched_implied_moments,
)

LOG_2PI = math.log(2.0 * math.pi)

PARAM_NAMES_FULL = (
    "mu_eta0", "mu_eta1", "mu_eta2", "mu_gamma",
    "psi_00", "psi_01", "psi_02", "psi_0g",
    "psi_11", "psi_12", "psi_1g",
    "psi_22", "psi_2g",
    "psi_gg",
    "theta_eps",
)

PARAM_NAMES_REDUCED = (
    "mu_eta0", "mu_eta1", "mu_eta2", "gamma",
    "psi_00", "psi_01", "psi_02",
    "psi_11", "psi_12",
    "psi_22",
    "theta_eps",
)


def param_names(spec: ModelSpec) -> tuple:
    return PARAM_NAMES_REDUCED if spec.reduced else PARAM_NAMES_FULL


def n_free_parameters(spec: ModelSpec) -> int:
    return len(param_names(spec))


@dataclass(frozen=True)
class Dataset:
    """Complete-case longitudinal data: outcomes and occasions per individual.

    Every individual has the same number of waves J; occasion values may
    differ across individuals.
    """

    y: np.ndarray       # (n, J)
    times: np.ndarray   # (n, J)
    ids: tuple = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        times = np.array(self.times, dtype=float)
        if y.ndim != 2 or y.shape != times.shape:
            raise ValueError("y and times must be 2-D arrays of identical shape")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(times)):
            raise ValueError("y and times must be finite (complete cases only)")
        if times.shape[1] > 1 and not np.all(np.diff(times, axis=1) > 0):
            raise ValueError("each individual's times must be strictly increasing")
        if self.ids is not None and len(self.ids) != y.shape[0]:
            raise ValueError("ids length must match the number of individuals")
        y.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "times", times)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_waves(self) -> int:
        return self.y.shape[1]

    def schedule(self, i: int) -> IndividualSchedule:
        return IndividualSchedule(times=self.times[i])


@dataclass(frozen=True)
class FitConfig:
    """Optimizer protocol: restarts, tolerances, iteration caps."""

    max_restarts: int = 10
    gradient_tol: float = 1e-6
    objective_tol: float = 1e-10
    jitter_scale: float = 0.2
    max_iterations: int = 500

    def __post_init__(self):
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be >= 1")


@dataclass(frozen=True)
class ImproperFlags:
    """Improper-solution diagnostics for a fitted covariance matrix."""

    negative_factor_variance: bool = False
    out_of_range_correlation: bool = False
    negative_variance_factors: tuple = ()
    out_of_range_pairs: tuple = ()

    @property
    def any(self) -> bool:
        return self.negative_factor_variance or self.out_of_range_correlation

    def involves_gamma(self) -> bool:
        return 3 in self.negative_variance_factors or any(
            3 in pair for pair in self.out_of_range_pairs
        )


STATUS_CONVERGED = "converged"
STATUS_FAILED = "failed_after_restarts"


@dataclass(frozen=True)
class FitResult:
    """Point estimates, uncertainty, fit indices, and diagnostics.

    Immutable, so results can be shared freely across worker processes.
    """

    estimates: PopulationParameters
    theta: np.ndarray          # estimates in param_names order
    se: np.ndarray             # standard errors (nan where unavailable)
    param_names: tuple
    loglik: float
    n_params: int
    n_obs: int
    aic: float
    bic: float
    status: str
    improper: ImproperFlags
    spec: ModelSpec
    n_restarts_used: int = 0

    def __post_init__(self):
        for name in ("theta", "se"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def minus2ll(self) -> float:
        return -2.0 * self.loglik

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    @property
    def se_available(self) -> bool:
        return bool(np.all(np.isfinite(self.se)))


# ---------------------------------------------------------------------------
# Parameter packing.  Reporting vector: means, upper triangle of the factor
# covariance in row-major order, residual variance.  The optimizer works on
# the same vector with the residual variance replaced by its log.
# ---------------------------------------------------------------------------


def pack_parameters(params: PopulationParameters, spec: ModelSpec) -> np.ndarray:
    # the mean slot 4 is mu_gamma in the full model and the fixed gamma in the
    # reduced one; the covariance block shrinks to the leading k x k triangle
    k = spec.n_factors
    rows, cols = np.triu_indices(k)
    return np.concatenate(
        [params.mean, params.covariance[rows, cols], [params.residual_variance]]
    )


def unpack_parameters(theta: np.ndarray, spec: ModelSpec) -> PopulationParameters:
    theta = np.asarray(theta, dtype=float)
    if theta.size != n_free_parameters(spec):
        raise ValueError(
            "expected %d parameters, got %d" % (n_free_parameters(spec), theta.size)
        )
    k = spec.n_factors
    mean = np.array(theta[:4])
    cov = np.zeros((4, 4))
    rows, cols = np.triu_indices(k)
    cov[rows, cols] = theta[4:-1]
    cov[cols, rows] = theta[4:-1]
    return PopulationParameters(
        mean=mean,
        covariance=cov,
        residual_variance=float(theta[-1]),
        reduced=spec.reduced,
    )


def _report_to_opt(theta: np.ndarray) -> np.ndarray:
    x = np.array(theta, dtype=float)
    x[-1] = math.log(x[-1])
    return x


def _opt_to_report(x: np.ndarray) -> np.ndarray:
    theta = np.array(x, dtype=float)
    theta[-1] = math.exp(theta[-1])
    return theta


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


def fiml_loglik(
    params: PopulationParameters, data: Dataset, spec: ModelSpec
) -> float:
    """Sum of per-individual multivariate-normal log densities.

    Raises NonPositiveDefiniteError if any individual's implied covariance is
    not positive definite at these parameters.
    """
    mu, sigma = batched_implied_moments(data.times, params, spec)
    if not np.all(np.isfinite(sigma)) or not np.all(np.isfinite(mu)):
        raise NonPositiveDefiniteError("indefinite implied covariance")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteError("indefinite implied covariance") from None
    resid = data.y - mu
    z = np.linalg.solve(chol, resid[:, :, None])[:, :, 0]
    half_logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    j = data.n_waves
    ll = -0.5 * j * LOG_2PI - half_logdet - 0.5 * np.einsum("ij,ij->i", z, z)
    # fsum is exact, so reordering individuals cannot move the total
    return math.fsum(ll)


def _negative_loglik(x_opt: np.ndarray, data: Dataset, spec: ModelSpec) -> float:
    try:
        params = unpack_parameters(_opt_to_report(x_opt), spec)
        return -fiml_loglik(params, data, spec)
    except (NonPositiveDefiniteError, DivergentCurveError, OverflowError, ValueError):
        return np.inf


# Infeasible optimizer steps (indefinite implied covariance, exponent
# overflow) get a large finite value with a zero gradient: L-BFGS-B's line
# search then backtracks instead of choking on inf during differencing.
_PENALTY = 1e13


def _raw_parameters(x_opt: np.ndarray, spec: ModelSpec):
    """Unvalidated (mean, covariance block, residual variance) for the
    optimizer hot path; the optimizer may propose improper values freely."""
    k = spec.n_factors
    mean = np.asarray(x_opt[:4], dtype=float)
    rows, cols = np.triu_indices(k)
    cov = np.zeros((k, k))
    cov[rows, cols] = x_opt[4:-1]
    cov[cols, rows] = x_opt[4:-1]
    return mean, cov, math.exp(float(x_opt[-1]))


def _neg_loglik_and_grad(x_opt: np.ndarray, data: Dataset, spec: ModelSpec):
    """Penalized negative log-likelihood and its analytic gradient.

    The gradient handles the double role of the mean parameters: mu_eta2 and
    mu_gamma enter the implied moments both directly (mu_eta2 through the
    factor mean) and through the linearized loadings, which are rebuilt from
    the current iterate on every call.
    """
    p = x_opt.size
    k = spec.n_factors
    times = data.times
    n, j = times.shape
    try:
        mean, psi, theta_eps = _raw_parameters(x_opt, spec)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(psi))
                and np.isfinite(theta_eps)):
            return _PENALTY, np.zeros(p)
        lam = model_mod._growth_loadings_batch(times, mean, spec)[-1]
        if spec.reduced:
            m = mean[:3]
        else:
            m = np.array([mean[0], mean[1], mean[2], 0.0])
        mu = lam @ m
        sigma = lam @ psi @ lam.transpose(0, 2, 1)
        diag_idx = np.arange(j)
        sigma[:, diag_idx, diag_idx] += theta_eps
        if not np.all(np.isfinite(sigma)):
            return _PENALTY, np.zeros(p)
        chol = np.linalg.cholesky(sigma)
    except (np.linalg.LinAlgError, DivergentCurveError, OverflowError):
        return _PENALTY, np.zeros(p)

    resid = data.y - mu
    inv_sigma = np.linalg.inv(sigma)
    u = (inv_sigma @ resid[:, :, None])[:, :, 0]
    half_logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
    quad = float(np.einsum("nj,nj->", resid, u))
    value = -0.5 * n * j * LOG_2PI - half_logdet - 0.5 * quad

    # d ll / d Sigma = -A/2 + u u'/2 folded through Sigma = Lam Psi Lam' + eps I
    a_lam = inv_sigma @ lam                                   # (n, J, k)
    w_sum = np.einsum("njk,njl->kl", lam, a_lam)
    v = np.einsum("njk,nj->nk", lam, u)
    g_mat = -0.5 * w_sum + 0.5 * (v.T @ v)
    rows, cols = np.triu_indices(k)
    g_psi = g_mat[rows, cols] * np.where(rows == cols, 1.0, 2.0)

    tr_a = float(np.einsum("njj->", inv_sigma))
    g_theta = -0.5 * tr_a + 0.5 * float(np.einsum("nj,nj->", u, u))

    # loading sensitivity to the mu_gamma / mu_eta2 iterate
    d_mat = -(a_lam @ psi) + u[:, :, None] * (v @ psi + m)[:, None, :]
    dg_gamma, dg_eta2 = model_mod._loading_derivatives_batch(times, mean, spec)
    g_gamma = float(np.einsum("njk,njk->", d_mat, dg_gamma))
    g_eta2_loading = float(np.einsum("njk,njk->", d_mat, dg_eta2))

    v_sum = v.sum(axis=0)
    grad_ll = np.empty(p)
    grad_ll[0] = v_sum[0]
    grad_ll[1] = v_sum[1]
    grad_ll[2] = v_sum[2] + g_eta2_loading
    grad_ll[3] = g_gamma
    grad_ll[4:-1] = g_psi
    grad_ll[-1] = g_theta * theta_eps  # chain rule for log residual variance
    return -value, -grad_ll


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def default_start(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Coarse moment-based starting values on the reporting scale.

    Growth-factor means come from cheap trajectory heuristics; each
    individual's trajectory is then projected onto the starting loading basis
    by least squares, and half the variances of those projections seed the
    covariance diagonal.  The pooled projection residual seeds the residual
    variance.
    """
    y, t = data.y, data.times
    first = y[:, 0]
    last_slope = (y[:, -1] - y[:, -2]) / (t[:, -1] - t[:, -2])
    mu0 = float(first.mean())
    mu1 = float(last_slope.mean())
    # vertical distance: initial status minus the intercept of the late-time
    # line extrapolated back to t = 0; fall back to -0.5 * range(y)
    asym_intercept = y[:, -1] - last_slope * t[:, -1]
    mu2 = mu0 - float(asym_intercept.mean())
    if not np.isfinite(mu2) or mu2 >= 0.0:
        mu2 = -0.5 * float(y.max() - y.min())
    mu_gamma = -0.7

    mean = np.array([mu0, mu1, mu2, mu_gamma])
    k = spec.n_factors
    lam = model_mod._growth_loadings_batch(t, mean, spec)[-1]
    n_base = min(k, 3)  # project on (eta0, eta1, eta2); deviation column excluded
    proj = np.empty((data.n, n_base))
    sq_resid = 0.0
    dof = 0
    for i in range(data.n):
        coef, res_ss, rank, _ = np.linalg.lstsq(lam[i][:, :n_base], y[i], rcond=None)
        proj[i] = coef
        if res_ss.size and rank == n_base:
            sq_resid += float(res_ss[0])
            dof += data.n_waves - n_base
    theta_eps = max(sq_resid / dof if dof > 0 else 1.0, 1e-6)

    if data.n > 1:
        variances = np.var(proj, axis=0, ddof=1)
    else:
        variances = np.ones(n_base)
    diag = np.zeros(4)
    diag[:n_base] = 0.5 * variances
    diag[3] = 0.0 if spec.reduced else 0.01
    diag[:3] = np.maximum(diag[:3], 1e-4)

    mean_start = mean.copy()
    mean_start[:n_base] = proj.mean(axis=0)
    if not mean_start[2] < 0:
        mean_start[2] = mu2

    rows, cols = np.triu_indices(k)
    cov = np.diag(diag[:k])
    return np.concatenate([mean_start, cov[rows, cols], [theta_eps]])


def _jitter_start(theta0: np.ndarray, rng, scale: float) -> np.ndarray:
    factors = rng.uniform(1.0 - scale, 1.0 + scale, size=theta0.size)
    jittered = theta0 * factors
    jittered[-1] = max(jittered[-1], 1e-8)
    return jittered


def _optimizer_scales(start: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Characteristic magnitude per optimizer coordinate.

    Optimizing x = z * scale equalizes wildly different parameter scales
    (factor variances span 0.01 .. 100 in typical data), which L-BFGS-B needs
    to make progress on all coordinates.  Zero-started covariance entries get
    the geometric mean of their diagonal starts.
    """
    k = spec.n_factors
    scales = np.ones(start.size)
    scales[:4] = np.maximum(np.abs(start[:4]), 0.1)
    rows, cols = np.triu_indices(k)
    diag_start = {}
    for pos, (a, b) in enumerate(zip(rows, cols)):
        if a == b:
            diag_start[a] = max(abs(start[4 + pos]), 1e-3)
    for pos, (a, b) in enumerate(zip(rows, cols)):
        scales[4 + pos] = max(
            abs(start[4 + pos]), 0.5 * math.sqrt(diag_start[a] * diag_start[b]), 1e-3
        )
    scales[-1] = 1.0  # log residual variance is already O(1)
    return scales


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------


def fit(
    data: Dataset,
    spec: ModelSpec,
    config: FitConfig = None,
    seed=None,
    initial: np.ndarray = None,
) -> FitResult:
    """Maximize the FIML log-likelihood with restarts; never raises on
    non-convergence (status records the outcome so simulations can tally).
    """
    config = config or FitConfig()
    if data.n_waves < 3:
        raise ValueError("fitting requires at least 3 waves per individual")
    p = n_free_parameters(spec)
    if data.n < p:
        raise ValueError(
            "need at least as many individuals (%d) as free parameters (%d)"
            % (data.n, p)
        )

    theta0 = np.asarray(initial, dtype=float) if initial is not None else default_start(data, spec)
    if theta0.size != p:
        raise ValueError("initial start has wrong length")
    rng = np.random.default_rng(seed)

    best_x = None
    best_fun = np.inf
    status = STATUS_FAILED
    restarts_used = 0
    for attempt in range(config.max_restarts):
        start = theta0 if attempt == 0 else _jitter_start(theta0, rng, config.jitter_scale)
        x0 = _report_to_opt(start)
        if _neg_loglik_and_grad(x0, data, spec)[0] >= _PENALTY:
            continue
        scales = _optimizer_scales(start, spec)

        def scaled_objective(z):
            value, grad = _neg_loglik_and_grad(z * scales, data, spec)
            return value, grad * scales

        res = optimize.minimize(
            scaled_objective,
            x0 / scales,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": config.max_iterations,
                "ftol": config.objective_tol,
                "gtol": config.gradient_tol,
            },
        )
        restarts_used = attempt + 1
        x_found = res.x * scales
        ok = (
            res.success
            and np.all(np.isfinite(x_found))
            and np.isfinite(res.fun)
            and res.fun < _PENALTY
        )
        if res.fun < best_fun and np.all(np.isfinite(x_found)):
            best_fun = float(res.fun)
            best_x = x_found
        if ok:
            status = STATUS_CONVERGED
            best_fun = float(res.fun)
            best_x = x_found
            break

    if best_x is None:
        theta_hat = theta0.copy()
        loglik = -np.inf
    else:
        theta_hat = _opt_to_report(best_x)
        loglik = -best_fun

    estimates = unpack_parameters(theta_hat, spec)
    improper = detect_improper(estimates)
    aic, bic = _information_criteria(loglik, p, data.n)
    result = FitResult(
        estimates=estimates,
        theta=theta_hat,
        se=np.full(p, np.nan),
        param_names=param_names(spec),
        loglik=loglik,
        n_params=p,
        n_obs=data.n,
        aic=aic,
        bic=bic,
        status=status,
        improper=improper,
        spec=spec,
        n_restarts_used=restarts_used,
    )
    if status == STATUS_CONVERGED:
        result = replace(result, se=standard_errors(result, data, spec))
    return result


# ---------------------------------------------------------------------------
# Standard errors, intervals, fit indices, diagnostics
# ---------------------------------------------------------------------------


def numerical_hessian(func, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central-difference Hessian with per-coordinate steps."""
    p = x.size
    hess = np.empty((p, p))
    f0 = func(x)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = steps[i]
        hess[i, i] = (func(x + ei) - 2.0 * f0 + func(x - ei)) / steps[i] ** 2
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = steps[i]
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = steps[j]
            hess[i, j] = hess[j, i] = (
                func(x + ei + ej) - func(x + ei - ej)
                - func(x - ei + ej) + func(x - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
    return hess


def standard_errors(result: FitResult, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Square roots of the diagonal of the inverse observed information.

    The information matrix is differentiated on the optimizer scale (log
    residual variance) and mapped back, which keeps the finite-difference
    stencil inside the positive-variance region; unavailable entries are nan.
    """
    x_hat = _report_to_opt(result.theta)
    steps = 1e-4 * (1.0 + np.abs(x_hat))
    hess = numerical_hessian(
        lambda x: _negative_loglik(x, data, spec), x_hat, steps
    )
    if not np.all(np.isfinite(hess)):
        return np.full(x_hat.size, np.nan)
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        return np.full(x_hat.size, np.nan)
    scale = np.ones(x_hat.size)
    scale[-1] = result.theta[-1]  # d(theta_eps)/d(log theta_eps)
    cov = cov * np.outer(scale, scale)
    diag = np.diag(cov)
    se = np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan)
    return se


def wald_ci(estimate: float, se: float, level: float = 0.95):
    """Two-sided Wald interval estimate +/- z * se."""
    if se < 0:
        raise ValueError("se must be non-negative")
    z = stats.norm.ppf(0.5 * (1.0 + level))
    return estimate - z * se, estimate + z * se


def wald_p_value(estimate: float, se: float) -> float:
    """Two-sided Wald p-value against zero."""
    if se == 0:
        return 1.0 if estimate == 0 else 0.0
    z = abs(estimate) / se
    return float(2.0 * stats.norm.sf(z))


def _information_criteria(loglik: float, n_params: int, n: int):
    minus2ll = -2.0 * loglik
    aic = minus2ll + 2.0 * n_params
    bic = minus2ll + math.log(n) * n_params
    return aic, bic


def fit_indices(result: FitResult, n: int = None):
    """(aic, bic, minus2ll) recomputed for the given sample size."""
    n = n if n is not None else result.n_obs
    aic, bic = _information_criteria(result.loglik, result.n_params, n)
    return aic, bic, result.minus2ll


def detect_improper(result) -> ImproperFlags:
    """Flag negative factor variances and out-of-range factor correlations.

    Accepts a FitResult or PopulationParameters.  Correlations are evaluated
    only for pairs whose variances are both positive.
    """
    params = result.estimates if isinstance(result, FitResult) else result
    cov = params.covariance
    diag = np.diag(cov)
    active = list(range(3)) if params.reduced else list(range(4))
    negative = tuple(i for i in active if diag[i] < 0)
    pairs = []
    for i in active:
        for j in active:
            if j <= i or diag[i] <= 0 or diag[j] <= 0:
                continue
            corr = cov[i, j] / math.sqrt(diag[i] * diag[j])
            if abs(corr) > 1.0:
                pairs.append((i, j))
    return ImproperFlags(
        negative_factor_variance=bool(negative),
        out_of_range_correlation=bool(pairs),
        negative_variance_factors=negative,
        out_of_range_pairs=tuple(pairs),
    )


def embed_reduced_start(reduced_result: FitResult) -> np.ndarray:
    """Lift a converged reduced fit into a full-model starting vector.

    The gamma fixed effect becomes mu_gamma; the gamma variance and
    covariances start at zero, from which the unconstrained optimizer is free
    to move in either direction.
    """
    r = reduced_result.theta
    mean = np.array([r[0], r[1], r[2], r[3]])
    psi = np.zeros((4, 4))
    rows, cols = np.triu_indices(3)
    psi[rows, cols] = r[4:10]
    psi[cols, rows] = r[4:10]
    full_rows, full_cols = np.triu_indices(4)
    return np.concatenate([mean, psi[full_rows, full_cols], [r[10]]])

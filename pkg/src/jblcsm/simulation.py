"""Monte Carlo harness: factorial design, data generation, metrics.

Data are generated from the exact Jenss-Bayley latent growth curve (not from
the change-score approximation), which is the deliberate mismatch the
simulation is designed to probe.  Each replication draws factors from a
multivariate normal with all pairwise correlations 0.3, jitters wave times
2..J uniformly within +/- delta per individual (wave 1 anchors the clock; see
generate_schedules), evaluates the curve at the jittered occasions, and adds
iid residual noise.

Replication RNG streams are keyed by (master seed, condition fingerprint,
replication index), so replications are order-independent and safe to run in
parallel while keeping the aggregate bit-reproducible.  A condition keeps
generating fresh data until the requested number of replications in which
every fitted variant converged has been reached.  When the full model's
fitted gamma variance is negative or its gamma correlations leave [-1, 1],
the retained estimates are substituted with the reduced fit's (gamma variance
and covariances recorded as zero), mirroring how such improper solutions are
handled in evaluation; the pre-substitution flags still feed the tally.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConditionAbortError
from .estimation import (
    Dataset,
    FitConfig,
    FitResult,
    embed_reduced_start,
    fit,
    pack_parameters,
    param_names,
    wald_ci,
)
from .model import ModelSpec, PopulationParameters, _growth_loadings_batch

WAVE_DESIGNS = {
    "seven_equal": (0.0, 1.5, 3.0, 4.5, 6.0, 7.5, 9.0),
    "ten_equal": (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0),
    "ten_unequal": (0.0, 0.75, 1.5, 2.25, 3.0, 3.75, 4.5, 6.0, 7.5, 9.0),
}

# fixed generating block shared by every condition
MU_ETA0, SD_ETA0 = 50.0, 4.0
MU_ETA2, SD_ETA2 = -30.0, 6.0
MU_GAMMA = -0.7
RHO = 0.3

SLOPE_DISTS = ((2.5, 1.0), (1.0, 0.4))
SD_GAMMAS = (0.0, 0.05, 0.10)
SAMPLE_SIZES = (200, 500)
THETA_EPS_LEVELS = (1.0, 2.0)

MODEL_KEYS = ("proposed_full", "proposed_reduced", "existing_full", "existing_reduced")

MODEL_SPECS = {
    "proposed_full": ModelSpec("midpoint", "random", "lcsm"),
    "proposed_reduced": ModelSpec("midpoint", "fixed", "lcsm"),
    "existing_full": ModelSpec("right_endpoint", "random", "lcsm"),
    "existing_reduced": ModelSpec("right_endpoint", "fixed", "lcsm"),
    "lgc_full": ModelSpec("midpoint", "random", "lgc"),
    "lgc_reduced": ModelSpec("midpoint", "fixed", "lgc"),
}

_FULL_TO_REDUCED = {
    "proposed_full": "proposed_reduced",
    "existing_full": "existing_reduced",
    "lgc_full": "lgc_reduced",
}


@dataclass(frozen=True)
class SimulationCondition:
    """One cell of the factorial design (manipulated factors + fixed block)."""

    wave_design: str
    n: int
    slope_mean: float
    slope_sd: float
    sd_gamma: float
    theta_eps: float
    delta: float = 0.25

    def __post_init__(self):
        if self.wave_design not in WAVE_DESIGNS:
            raise ValueError(f"unknown wave design {self.wave_design!r}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        waves = np.asarray(WAVE_DESIGNS[self.wave_design])
        min_gap = float(np.min(np.diff(waves)))
        if not self.delta < 0.5 * min_gap:
            raise ValueError("occasion windows must not overlap (delta too large)")

    @property
    def wave_times(self) -> np.ndarray:
        return np.asarray(WAVE_DESIGNS[self.wave_design], dtype=float)

    @property
    def n_waves(self) -> int:
        return len(WAVE_DESIGNS[self.wave_design])

    @property
    def slug(self) -> str:
        return "{}_n{}_slope{:g}_sdg{:g}_eps{:g}".format(
            self.wave_design, self.n, self.slope_mean, self.sd_gamma, self.theta_eps
        )

    def fingerprint(self) -> str:
        return "|".join(
            repr(v)
            for v in (
                self.wave_design, self.n, self.slope_mean, self.slope_sd,
                self.sd_gamma, self.theta_eps, self.delta,
            )
        )

    def factor_covariance(self) -> np.ndarray:
        sds = np.array([SD_ETA0, self.slope_sd, SD_ETA2, self.sd_gamma])
        corr = np.full((4, 4), RHO)
        np.fill_diagonal(corr, 1.0)
        return corr * np.outer(sds, sds)

    def factor_means(self) -> np.ndarray:
        return np.array([MU_ETA0, self.slope_mean, MU_ETA2, MU_GAMMA])

    def population_parameters(self) -> PopulationParameters:
        return PopulationParameters(
            mean=self.factor_means(),
            covariance=self.factor_covariance(),
            residual_variance=self.theta_eps,
            reduced=False,
        )


@dataclass(frozen=True)
class SimulationTruth:
    """Generating parameters plus the drawn factor matrix of one replication."""

    params: PopulationParameters
    factors: np.ndarray  # (n, 4)


@dataclass
class ReplicationRecord:
    """Everything retained from one generation + fit attempt."""

    rep_index: int
    converged: bool
    truth: SimulationTruth
    fits: dict            # model key -> FitResult
    improper: dict        # model key -> ImproperFlags (pre-substitution)
    substituted: dict     # model key -> bool
    estimates: dict       # model key -> report vector used for evaluation
    ses: dict             # model key -> standard errors aligned with estimates


@dataclass(frozen=True)
class ParameterMetrics:
    """Monte Carlo performance measures for one parameter of one model."""

    parameter: str
    truth: float
    bias: float            # relative when truth != 0, absolute otherwise
    absolute: bool
    empirical_se: float
    rmse: float            # relative when truth != 0, absolute otherwise
    coverage: float
    mc_se_bias: float


@dataclass(frozen=True)
class MetricSummary:
    model: str
    n_replications: int
    parameters: tuple

    def by_name(self, name: str) -> ParameterMetrics:
        for p in self.parameters:
            if p.parameter == name:
                return p
        raise KeyError(name)


def condition_grid() -> list:
    """The full factorial: 3 wave designs x 2 n x 2 slopes x 3 sd(gamma) x 2
    residual levels = 72 conditions, in a fixed enumeration order."""
    grid = []
    for design, n, (smean, ssd), sdg, eps in product(
        ("seven_equal", "ten_equal", "ten_unequal"),
        SAMPLE_SIZES,
        SLOPE_DISTS,
        SD_GAMMAS,
        THETA_EPS_LEVELS,
    ):
        grid.append(
            SimulationCondition(
                wave_design=design, n=n, slope_mean=smean, slope_sd=ssd,
                sd_gamma=sdg, theta_eps=eps,
            )
        )
    return grid


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def replication_rng(master_seed: int, cond: SimulationCondition, rep_index: int):
    """Independent, order-insensitive stream for one replication."""
    digest = hashlib.sha256(cond.fingerprint().encode()).digest()[:8]
    cond_key = int.from_bytes(digest, "little")
    seq = np.random.SeedSequence(
        entropy=(int(master_seed), cond_key, int(rep_index))
    )
    return np.random.default_rng(seq)


def generate_factors(cond: SimulationCondition, rng) -> np.ndarray:
    """Draw n growth-factor vectors; sd(gamma)=0 collapses gamma to a constant."""
    mean = cond.factor_means()
    cov = cond.factor_covariance()
    if cond.sd_gamma == 0.0:
        chol = np.linalg.cholesky(cov[:3, :3])
        draws = mean[:3] + rng.standard_normal((cond.n, 3)) @ chol.T
        gamma = np.full((cond.n, 1), MU_GAMMA)
        return np.hstack([draws, gamma])
    chol = np.linalg.cholesky(cov)
    return mean + rng.standard_normal((cond.n, 4)) @ chol.T


def generate_schedules(cond: SimulationCondition, rng) -> np.ndarray:
    """Jitter wave times uniformly within +/- delta, per individual.

    The first wave anchors every individual's clock and is not disturbed:
    the change-score intercept is the true score at the first occasion, so
    first-wave jitter would contaminate the initial-status variance with
    curve variation (by about E[eta2^2] * Var(exp(gamma t1) - 1), a ~45%
    inflation of psi_00 under the design values), which the estimand does
    not include.  Later waves vary freely, which is what drives the
    individual interval and midpoint heterogeneity under study.
    """
    base = cond.wave_times
    jitter = rng.uniform(-cond.delta, cond.delta, size=(cond.n, base.size))
    jitter[:, 0] = 0.0
    return base[None, :] + jitter


def generate_dataset(cond: SimulationCondition, rng):
    """One (Dataset, SimulationTruth) pair from the exact growth curve."""
    factors = generate_factors(cond, rng)
    times = generate_schedules(cond, rng)
    curve = (
        factors[:, [0]]
        + factors[:, [1]] * times
        + factors[:, [2]] * np.expm1(factors[:, [3]] * times)
    )
    noise = rng.standard_normal(times.shape) * np.sqrt(cond.theta_eps)
    data = Dataset(y=curve + noise, times=times)
    truth = SimulationTruth(params=cond.population_parameters(), factors=factors)
    return data, truth


def generate_model_faithful_dataset(
    cond: SimulationCondition,
    spec: ModelSpec,
    rng,
    exact_moments: bool = False,
):
    """Data generated from the fitted model family itself (no curve mismatch).

    Outcomes are built from the linearized loading structure at the generating
    parameters, so a correct estimator recovers them up to residual noise.
    With exact_moments the factor draws and residuals are standardized to
    carry the generating moments exactly, removing sampling variation: what
    remains measures the estimation machinery alone.
    """
    k = spec.n_factors
    mean = cond.factor_means()
    cov = cond.factor_covariance()[:k, :k]
    z = rng.standard_normal((cond.n, k))
    if exact_moments:
        z = z - z.mean(axis=0)
        z = z @ np.linalg.inv(np.linalg.cholesky(np.cov(z, rowvar=False))).T
    if spec.reduced:
        factor_mean = mean[:3]
    else:
        factor_mean = np.array([mean[0], mean[1], mean[2], 0.0])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(
            "factor covariance must be positive definite for model-faithful "
            "generation (use the reduced spec when sd_gamma is zero)"
        ) from None
    factors = factor_mean + z @ chol.T
    times = generate_schedules(cond, rng)
    lam = _growth_loadings_batch(times, mean, spec)[-1]
    signal = np.einsum("njk,nk->nj", lam, factors)
    eps = rng.standard_normal(times.shape)
    if exact_moments:
        eps = eps - eps.mean()
        eps = eps * np.sqrt(cond.theta_eps / eps.var())
    else:
        eps = eps * np.sqrt(cond.theta_eps)
    data = Dataset(y=signal + eps, times=times)
    return data, factors


def truth_vector(cond: SimulationCondition, spec: ModelSpec) -> np.ndarray:
    """Generating parameter values in the reporting order of the given spec."""
    full = cond.population_parameters()
    if spec.reduced:
        cov = full.covariance.copy()
        cov[3, :] = 0.0
        cov[:, 3] = 0.0
        reduced = PopulationParameters(
            mean=full.mean, covariance=cov,
            residual_variance=full.residual_variance, reduced=True,
        )
        return pack_parameters(reduced, spec)
    return pack_parameters(full, spec)


# ---------------------------------------------------------------------------
# Replication driver
# ---------------------------------------------------------------------------


NESTING_SLACK = 1e-6


def run_replication(
    cond: SimulationCondition,
    rep_index: int,
    master_seed: int,
    model_keys=MODEL_KEYS,
    fit_config: FitConfig = None,
) -> ReplicationRecord:
    """Generate one dataset and fit every requested model variant on it."""
    fit_config = fit_config or FitConfig()
    rng = replication_rng(master_seed, cond, rep_index)
    data, truth = generate_dataset(cond, rng)

    # reduced variants first so each full fit can fall back to the nested
    # solution as a start if its own optimum dips below the reduced one
    order = sorted(model_keys, key=lambda k: 0 if MODEL_SPECS[k].reduced else 1)
    fits = {}
    for idx, key in enumerate(order):
        spec = MODEL_SPECS[key]
        fit_seed = replication_rng(master_seed, cond, rep_index).integers(2**63) + idx
        result = fit(data, spec, fit_config, seed=fit_seed)
        if not spec.reduced:
            partner = fits.get(_FULL_TO_REDUCED.get(key))
            if partner is not None and partner.converged:
                needs_lift = (not result.converged) or (
                    result.loglik < partner.loglik - NESTING_SLACK
                )
                if needs_lift:
                    lifted = fit(
                        data, spec, fit_config, seed=fit_seed,
                        initial=embed_reduced_start(partner),
                    )
                    if lifted.converged and (
                        not result.converged or lifted.loglik >= result.loglik
                    ):
                        result = lifted
        fits[key] = result

    converged = all(fits[k].converged for k in model_keys)
    improper = {k: fits[k].improper for k in model_keys}
    substituted = {k: False for k in model_keys}
    estimates = {}
    ses = {}
    for key in model_keys:
        res = fits[key]
        theta = res.theta.copy()
        se = res.se.copy()
        spec = MODEL_SPECS[key]
        if not spec.reduced:
            partner_key = _FULL_TO_REDUCED.get(key)
            partner = fits.get(partner_key)
            if (
                improper[key].involves_gamma()
                and partner is not None
                and partner.converged
            ):
                theta, se = _substitute_from_reduced(partner)
                substituted[key] = True
        estimates[key] = theta
        ses[key] = se
    return ReplicationRecord(
        rep_index=rep_index,
        converged=converged,
        truth=truth,
        fits=fits,
        improper=improper,
        substituted=substituted,
        estimates=estimates,
        ses=ses,
    )


def _substitute_from_reduced(reduced_result: FitResult):
    """Full-model evaluation vector built from the reduced fit: gamma variance
    and covariances (and their SEs) recorded as zero."""
    theta = embed_reduced_start(reduced_result)
    se = np.zeros(theta.size)
    r_se = reduced_result.se
    se[:4] = r_se[:4]
    full_rows, full_cols = np.triu_indices(4)
    r_idx = {pair: pos for pos, pair in enumerate(zip(*np.triu_indices(3)))}
    for pos, pair in enumerate(zip(full_rows, full_cols)):
        if pair in r_idx:
            se[4 + pos] = r_se[4 + r_idx[pair]]
    se[-1] = r_se[-1]
    return theta, se


def run_condition(
    cond: SimulationCondition,
    n_replications: int,
    model_keys=MODEL_KEYS,
    master_seed: int = 0,
    fit_config: FitConfig = None,
    threads: int = None,
    level: float = 0.95,
):
    """Fresh-data replications until n_replications have every model converged.

    Returns (records, summaries) where records lists every attempt in index
    order (failures included) and summaries maps model key -> MetricSummary
    over the retained replications.  Aborts with ConditionAbortError after
    20 * n_replications consecutive failures.
    """
    if n_replications < 1:
        raise ValueError("n_replications must be >= 1")
    threads = _resolve_threads(threads)
    max_consecutive = 20 * n_replications
    hard_cap = 50 * n_replications

    records = []
    successes = 0
    consecutive_failures = 0
    next_index = 0
    chunk = max(threads, 1)

    with _executor(threads) as run_many:
        while successes < n_replications:
            if next_index >= hard_cap:
                raise ConditionAbortError(
                    f"condition {cond.slug}: exceeded {hard_cap} total attempts"
                )
            indices = list(range(next_index, next_index + chunk))
            next_index += chunk
            for record in run_many(
                cond, indices, master_seed, tuple(model_keys), fit_config
            ):
                records.append(record)
                if record.converged:
                    successes += 1
                    consecutive_failures = 0
                else:
                    consecutive_failures += 1
                    if consecutive_failures >= max_consecutive:
                        raise ConditionAbortError(
                            f"condition {cond.slug}: {consecutive_failures} "
                            "consecutive failed replications"
                        )
                if successes == n_replications:
                    break

    retained = [r for r in records if r.converged][:n_replications]
    summaries = metrics(retained, cond, model_keys=model_keys, level=level)
    return records, summaries


def _resolve_threads(threads: int = None) -> int:
    if threads is None:
        env = os.environ.get("JBLCSM_THREADS", "").strip()
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(int(threads), 1)


class _executor:
    """Serial or process-pool replication runner with a common interface."""

    def __init__(self, threads: int):
        self.threads = threads
        self.pool = None

    def __enter__(self):
        if self.threads > 1:
            self.pool = ProcessPoolExecutor(max_workers=self.threads)
        return self._run

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()
        return False

    def _run(self, cond, indices, master_seed, model_keys, fit_config):
        if self.pool is None:
            for i in indices:
                yield run_replication(cond, i, master_seed, model_keys, fit_config)
        else:
            futures = [
                self.pool.submit(
                    run_replication, cond, i, master_seed, model_keys, fit_config
                )
                for i in indices
            ]
            for f in futures:  # submission order == index order
                yield f.result()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def summarize_metrics(
    estimates: np.ndarray,
    ses: np.ndarray,
    truth: np.ndarray,
    names,
    level: float = 0.95,
    model: str = "",
) -> MetricSummary:
    """Monte Carlo performance measures per parameter.

    Relative bias and RMSE divide by the generating value; when it is zero the
    absolute versions are reported instead and flagged.  Coverage counts Wald
    intervals containing the generating value.
    """
    estimates = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    n_reps = estimates.shape[0]
    if n_reps < 1:
        raise ValueError("need at least one replication")
    rows = []
    for pos, name in enumerate(names):
        theta = float(truth[pos])
        est = estimates[:, pos]
        err = est - theta
        bias = float(err.mean())
        emp_se = float(est.std(ddof=1)) if n_reps > 1 else float("nan")
        rmse = float(np.sqrt(np.mean(err**2)))
        covered = 0
        for s in range(n_reps):
            lo, hi = wald_ci(est[s], max(ses[s, pos], 0.0), level)
            covered += int(lo <= theta <= hi)
        absolute = theta == 0.0
        rows.append(
            ParameterMetrics(
                parameter=name,
                truth=theta,
                bias=bias if absolute else bias / theta,
                absolute=absolute,
                empirical_se=emp_se,
                rmse=rmse if absolute else rmse / theta,
                coverage=covered / n_reps,
                mc_se_bias=(
                    emp_se / np.sqrt(n_reps) if np.isfinite(emp_se) else float("nan")
                ),
            )
        )
    return MetricSummary(model=model, n_replications=n_reps, parameters=tuple(rows))


def metrics(
    records,
    cond: SimulationCondition,
    model_keys=MODEL_KEYS,
    level: float = 0.95,
) -> dict:
    """MetricSummary per model over retained (converged) replications."""
    retained = [r for r in records if r.converged]
    out = {}
    for key in model_keys:
        spec = MODEL_SPECS[key]
        names = param_names(spec)
        truth = truth_vector(cond, spec)
        est = np.array([r.estimates[key] for r in retained])
        ses = np.array([np.nan_to_num(r.ses[key], nan=0.0) for r in retained])
        out[key] = summarize_metrics(est, ses, truth, names, level=level, model=key)
    return out


def improper_tally(records, model_key: str):
    """(negative gamma variance count, out-of-range gamma correlation count)
    among retained replications, before substitution."""
    retained = [r for r in records if r.converged]
    neg = sum(
        1 for r in retained if 3 in r.improper[model_key].negative_variance_factors
    )
    oob = sum(
        1
        for r in retained
        if any(3 in pair for pair in r.improper[model_key].out_of_range_pairs)
    )
    return neg, oob


def format_tally(neg: int, oob: int) -> str:
    return f"{neg}//{oob}"


def parse_tally(text: str):
    left, right = text.split("//")
    return int(left), int(right)

"""Multi-start bounded least-squares fitting and a basin-hopping variant.

The local solver is a bounded trust-region least-squares routine operating
in internal coordinates: log-scale parameters are optimized as ``ln(p)``,
CPE exponents linearly. The residual Jacobian is analytic.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeResult, basinhopping, least_squares

from .circuit import CircuitModel, ImpedanceEvaluationError, Role, Scale, draw_parameters
from .loss import GuardConfig, LossEvaluationError, LossKind, ResidualModel
from .metrics import MetricError, chi_squared_arrays, r2_triple_arrays
from .spectrum import Spectrum

ALPHA_FIT_BOUNDS = (0.05, 1.0)
# Gaussian hop size for CPE exponents relative to step_scale (log units).
ALPHA_STEP_FACTOR = 0.2


class NonFiniteStart(LossEvaluationError):
    """The residual is not finite at the initial guess; the caller should restart."""


@dataclass(frozen=True)
class FitOptions:
    chi2_threshold: float = 0.01
    r2_threshold: float = 0.9
    max_restarts: int = 20
    max_evaluations_per_restart: int = 1000
    rng_seed: int = 0
    guards: GuardConfig = field(default_factory=GuardConfig)
    gtol: float = 1e-10
    xtol: float = 1e-10
    ftol: float = 1e-12
    paired: bool = True

    def __post_init__(self):
        if self.chi2_threshold <= 0 or self.r2_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be at least 1")
        if self.max_evaluations_per_restart < 1:
            raise ValueError("max_evaluations_per_restart must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LocalResult:
    params: np.ndarray
    loss: float
    initial_loss: float
    evaluations: int
    status: int


@dataclass
class FitOutcome:
    best_params: np.ndarray
    converged: bool
    restarts_used: int
    chi2: float
    r2_score: float
    r2_magnitude: float
    r2_phase: float
    final_loss: float
    wall_time: float
    evaluations: int

    def quality_key(self):
        return _quality_key(self.chi2, self.r2_score)


def _quality_key(chi2, r2_score):
    chi2 = chi2 if math.isfinite(chi2) else math.inf
    r2 = -r2_score if math.isfinite(r2_score) else math.inf
    return (chi2, r2)


def task_rng(seed: int, spectrum_id: str, kind: LossKind | None = None) -> np.random.Generator:
    """Generator for one (spectrum, loss) task, independent of scheduling order.

    With ``kind=None`` (paired mode) every loss sees the same stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(str(spectrum_id).encode())]
    if kind is not None:
        entropy.append(1 + list(LossKind).index(LossKind.from_token(kind)))
    return np.random.default_rng(np.random.SeedSequence(entropy))


# --- coordinates -------------------------------------------------------------


def fit_bounds(schema) -> tuple:
    """Sampling ranges widened by one decade each side; CPE exponents in [0.05, 1]."""
    lo, hi = [], []
    for d in schema:
        if d.role is Role.CPE_EXPONENT:
            lo.append(ALPHA_FIT_BOUNDS[0])
            hi.append(ALPHA_FIT_BOUNDS[1])
        else:
            lo.append(d.lower / 10.0)
            hi.append(d.upper * 10.0)
    return np.array(lo), np.array(hi)


class _Coords:
    def __init__(self, schema):
        self.log = np.array([d.scale is Scale.LOG for d in schema])
        lo, hi = fit_bounds(schema)
        self.lower_p, self.upper_p = lo, hi
        self.lower = self.to_internal(lo)
        self.upper = self.to_internal(hi)

    def to_internal(self, p):
        p = np.asarray(p, dtype=float)
        return np.where(self.log, np.log(np.where(self.log, p, 1.0)), p)

    def to_params(self, x):
        p = np.where(self.log, np.exp(np.where(self.log, x, 0.0)), x)
        # exp(log(b)) can land one ulp outside b
        return np.clip(p, self.lower_p, self.upper_p)

    def dparams(self, p):
        """dp/dx for each coordinate."""
        return np.where(self.log, p, 1.0)


class Problem:
    """Residual function and Jacobian in internal coordinates for one fit."""

    def __init__(self, model: CircuitModel, observed: Spectrum, kind, guards: GuardConfig | None = None):
        self.model = model
        self.kind = LossKind.from_token(kind)
        self.omega = observed.omega
        self.z_obs = observed.z
        self.rm = ResidualModel(self.kind, self.z_obs, guards)
        self.coords = _Coords(model.schema)
        self.nfev = 0
        self._cache_x = None
        self._cache = None

    def _evaluate(self, x):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        p = self.coords.to_params(x)
        z, dz = self.model.evaluate(p, self.omega, jacobian=True)
        self._cache_x = np.array(x, copy=True)
        self._cache = (p, z, dz)
        return self._cache

    def residuals(self, x) -> np.ndarray:
        """Strict residuals; raises on non-finite values."""
        _, z, _ = self._evaluate(x)
        return self.rm.residuals(z)

    def fun(self, x) -> np.ndarray:
        self.nfev += 1
        try:
            return self.residuals(x)
        except (ImpedanceEvaluationError, LossEvaluationError):
            return np.full(2 * self.rm.n, np.inf)

    def jac(self, x) -> np.ndarray:
        p, z, dz = self._evaluate(x)
        return self.rm.jacobian(z, dz) * self.coords.dparams(p)[None, :]

    def loss_at_params(self, p) -> float:
        r = self.rm.residuals(self.model.evaluate(p, self.omega))
        return float(np.sum(r * r))


# --- local and multi-start fits ---------------------------------------------


def sample_initial_guess(schema, rng: np.random.Generator) -> np.ndarray:
    """Random guess within the sampling ranges (log-uniform or uniform)."""
    return draw_parameters(schema, rng)


def _local(problem: Problem, init, options: FitOptions) -> LocalResult:
    coords = problem.coords
    x0 = np.clip(coords.to_internal(init), coords.lower, coords.upper)
    try:
        r0 = problem.residuals(x0)
    except (ImpedanceEvaluationError, LossEvaluationError) as exc:
        raise NonFiniteStart(f"residual not finite at initial guess: {exc}") from exc
    initial_loss = float(np.sum(r0 * r0))
    start_nfev = problem.nfev
    res = least_squares(
        problem.fun,
        x0,
        jac=problem.jac,
        bounds=(coords.lower, coords.upper),
        method="trf",
        ftol=options.ftol,
        xtol=options.xtol,
        gtol=options.gtol,
        max_nfev=options.max_evaluations_per_restart,
    )
    evaluations = problem.nfev - start_nfev
    p = coords.to_params(res.x)
    try:
        loss = problem.loss_at_params(p)
    except (ImpedanceEvaluationError, LossEvaluationError):
        loss = math.inf
    if not loss <= initial_loss:
        # never hand back something worse than where we started
        p = coords.to_params(x0)
        loss = initial_loss
    return LocalResult(p, loss, initial_loss, evaluations, int(res.status))


def fit_once(model: CircuitModel, observed: Spectrum, kind, init, options: FitOptions | None = None) -> LocalResult:
    options = options or FitOptions()
    problem = Problem(model, observed, kind, options.guards)
    return _local(problem, np.asarray(init, dtype=float), options)


def _quality(problem: Problem, params):
    try:
        z = problem.model.evaluate(params, problem.omega)
        chi2 = chi_squared_arrays(problem.z_obs, z)
    except (ImpedanceEvaluationError, LossEvaluationError, MetricError):
        return math.inf, math.nan, math.nan, math.nan
    try:
        r2 = r2_triple_arrays(problem.z_obs, z)
    except MetricError:
        r2 = (math.nan, math.nan, math.nan)
    return (chi2, *r2)


def _meets(chi2, r2_score, options: FitOptions) -> bool:
    return bool(chi2 <= options.chi2_threshold and r2_score >= options.r2_threshold)


def _outcome(best, options, restarts, evaluations, started) -> FitOutcome:
    params, loss, (chi2, r2s, r2m, r2p) = best
    return FitOutcome(
        best_params=np.asarray(params, dtype=float),
        converged=_meets(chi2, r2s, options),
        restarts_used=restarts,
        chi2=float(chi2),
        r2_score=float(r2s),
        r2_magnitude=float(r2m),
        r2_phase=float(r2p),
        final_loss=float(loss),
        wall_time=time.perf_counter() - started,
        evaluations=evaluations,
    )


def fit_multistart(
    model: CircuitModel,
    observed: Spectrum,
    kind,
    options: FitOptions | None = None,
    rng: np.random.Generator | None = None,
    history: list | None = None,
) -> FitOutcome:
    """Restart local fits from fresh random guesses until both thresholds hold.

    Fit quality is always judged with chi-squared and R^2 on the rectangular
    impedance, whatever the training loss. The best attempt (chi2 ascending,
    then r2_score descending) is returned even without convergence.
    ``history``, if given, receives the best-so-far quality key after each
    restart.
    """
    options = options or FitOptions()
    rng = rng if rng is not None else np.random.default_rng(options.rng_seed)
    started = time.perf_counter()
    problem = Problem(model, observed, kind, options.guards)
    schema = model.schema

    best = None
    evaluations = 0
    restarts = 0
    guess = sample_initial_guess(schema, rng)
    while True:
        restarts += 1
        try:
            local = _local(problem, guess, options)
            evaluations += local.evaluations
            quality = _quality(problem, local.params)
            candidate = (local.params, local.loss, quality)
        except NonFiniteStart:
            candidate = (guess, math.inf, (math.inf, math.nan, math.nan, math.nan))
        if best is None or _quality_key(*candidate[2][:2]) < _quality_key(*best[2][:2]):
            best = candidate
        if history is not None:
            history.append(_quality_key(*best[2][:2]))
        if _meets(best[2][0], best[2][1], options) or restarts >= options.max_restarts:
            break
        guess = sample_initial_guess(schema, rng)
    return _outcome(best, options, restarts, evaluations, started)


def basinhop_fit(
    model: CircuitModel,
    observed: Spectrum,
    kind,
    options: FitOptions | None = None,
    hop_count: int = 50,
    step_scale: float = 0.5,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    init: Sequence[float] | None = None,
) -> FitOutcome:
    """Basin-hopping via :func:`scipy.optimize.basinhopping`.

    Each hop is a Gaussian step of ``step_scale`` in internal coordinates
    (exponent steps scaled by ``ALPHA_STEP_FACTOR``), followed by the same
    bounded least-squares local fit as :func:`fit_once` and a Metropolis
    test on the loss at ``temperature``. ``hop_count`` counts local
    minimizations, the one from the starting point included, and all of
    them run. Returns the best local minimum by fit quality under the same
    contract as :func:`fit_multistart`.
    """
    if hop_count < 1:
        raise ValueError("hop_count must be at least 1")
    if step_scale < 0 or temperature < 0:
        raise ValueError("step_scale and temperature must be non-negative")
    options = options or FitOptions()
    rng = rng if rng is not None else np.random.default_rng(options.rng_seed)
    started = time.perf_counter()
    problem = Problem(model, observed, kind, options.guards)
    coords = problem.coords
    schema = model.schema
    step_unit = np.where(coords.log, 1.0, ALPHA_STEP_FACTOR)

    # find a finite starting point
    current = np.asarray(init, dtype=float) if init is not None else sample_initial_guess(schema, rng)
    for _ in range(options.max_restarts):
        try:
            problem.loss_at_params(current)
            break
        except (ImpedanceEvaluationError, LossEvaluationError):
            current = sample_initial_guess(schema, rng)

    best = [None]
    evaluations = [0]

    def minimizer(fun, x0, args=(), **_):
        try:
            local = _local(problem, coords.to_params(x0), options)
        except NonFiniteStart:
            return OptimizeResult(x=x0, fun=math.inf, success=False, nfev=0)
        evaluations[0] += local.evaluations
        quality = _quality(problem, local.params)
        if best[0] is None or _quality_key(*quality[:2]) < _quality_key(*best[0][2][:2]):
            best[0] = (local.params, local.loss, quality)
        return OptimizeResult(x=coords.to_internal(local.params), fun=local.loss, success=True, nfev=local.evaluations)

    def take_step(x):
        return np.clip(x + step_scale * step_unit * rng.standard_normal(x.size), coords.lower, coords.upper)

    basinhopping(
        lambda x: problem.loss_at_params(coords.to_params(x)),
        coords.to_internal(current),
        niter=hop_count - 1,
        T=temperature,
        take_step=take_step,
        minimizer_kwargs={"method": minimizer},
        seed=rng,
    )
    if best[0] is None:
        best[0] = (current, math.inf, _quality(problem, current))
    return _outcome(best[0], options, hop_count, evaluations[0], started)

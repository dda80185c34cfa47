"""Monte Carlo coverage study for bootstrap percentile intervals.

Data come from the random-slope model
``y_ij = b0 + u0j + (b1 + u1j) x_ij + s_ij nu_ij`` with standard normal
covariates redrawn for every repetition, and either Gaussian or centred
chi-square(1) errors and random effects.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import MultilevelError, ValidationError
from .inference import IntervalEstimate, percentile_interval
from .model import FitOptions, GroupedDataset, fit_reml, parameter_names
from .resampling import (
    Cases,
    Parametric,
    RefitPolicy,
    Residual,
    SchemeSpec,
    Wild,
    _psd_factor,
    run_bootstrap,
    scheme_key,
    substream,
)

DEFAULT_TRUTH = (3.0, 5.0, 2.0, 2.0, 0.5, 2.0)
PARAM_NAMES = tuple(parameter_names(2, 2))
SETTINGS = ((10, 20), (10, 80), (20, 40), (40, 80))
DATASET_REDRAWS = 5

# substream domains
_DATA = 1
_BOOT = 2


class ErrorLaw(str, enum.Enum):
    GAUSSIAN = "gaussian"
    CHISQ1 = "chisq1"


@dataclass(frozen=True)
class Scenario:
    error_law: ErrorLaw = ErrorLaw.GAUSSIAN
    heteroscedastic: bool = False
    n: int = 10
    J: int = 20
    truth: tuple = DEFAULT_TRUTH
    reps: int = 200
    B: int = 399
    alpha: float = 0.05
    master_seed: int = 0
    schemes: tuple = (Parametric(), Residual(), Cases(), Wild())
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "error_law", ErrorLaw(self.error_law))
        object.__setattr__(self, "truth", tuple(float(t) for t in self.truth))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if self.n < 2 or self.J < 2:
            raise ValidationError(f"n and J must be at least 2 (got n={self.n}, J={self.J})")
        if len(self.truth) != 6:
            raise ValidationError("truth must hold (beta0, beta1, sigma2_eps, sigma2_u0, sigma_u01, sigma2_u1)")
        _, _, s2e, s0, s01, s1 = self.truth
        if min(s2e, s0, s1) <= 0:
            raise ValidationError("true variances must be positive")
        if abs(s01) > math.sqrt(s0 * s1):
            raise ValidationError("|sigma_u01| exceeds sqrt(sigma2_u0 * sigma2_u1)")
        if self.error_law is ErrorLaw.CHISQ1 and s01 < 0:
            raise ValidationError("chi-square random effects cannot have negative covariance")
        if self.reps < 1 or self.B < 1:
            raise ValidationError("reps and B must be positive")

    @property
    def Sigma(self) -> np.ndarray:
        _, _, _, s0, s01, s1 = self.truth
        return np.array([[s0, s01], [s01, s1]])


def draw_random_effects(law, J: int, rng: np.random.Generator, Sigma=None) -> np.ndarray:
    """J x 2 random effects with covariance ``Sigma`` (default [[2, .5], [.5, 2]]).

    For ``chisq1`` each margin is a scaled ``h^2 - 1`` with ``h`` bivariate
    normal; the correlation of ``h`` is chosen to hit the target covariance.
    """
    law = ErrorLaw(law)
    Sigma = np.array([[2.0, 0.5], [0.5, 2.0]]) if Sigma is None else np.asarray(Sigma, float)
    if law is ErrorLaw.GAUSSIAN:
        return rng.standard_normal((J, 2)) @ _psd_factor(Sigma).T
    a = np.sqrt(np.diag(Sigma) / 2.0)
    scale = math.sqrt(Sigma[0, 0] * Sigma[1, 1])
    rho = math.sqrt(Sigma[0, 1] / scale) if scale > 0 else 0.0
    C = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    h = rng.standard_normal((J, 2)) @ C.T
    return a * (h**2 - 1.0)


def draw_level1_errors(law, s, rng: np.random.Generator, sigma2: float = 2.0) -> np.ndarray:
    law = ErrorLaw(law)
    s = np.asarray(s, float)
    if law is ErrorLaw.GAUSSIAN:
        nu = np.sqrt(sigma2) * rng.standard_normal(s.shape)
    else:
        nu = np.sqrt(sigma2 / 2.0) * (rng.chisquare(1, s.shape) - 1.0)
    return s * nu


def simulate_dataset(sc: Scenario, rep_index: int, rng: np.random.Generator) -> GroupedDataset:
    N = sc.n * sc.J
    b0, b1, s2e = sc.truth[:3]
    x = rng.standard_normal(N)
    U = np.repeat(draw_random_effects(sc.error_law, sc.J, rng, sc.Sigma), sc.n, axis=0)
    s = x if sc.heteroscedastic else np.ones(N)
    eps = draw_level1_errors(sc.error_law, s, rng, s2e)
    y = b0 + U[:, 0] + (b1 + U[:, 1]) * x + eps
    X = np.column_stack([np.ones(N), x])
    return GroupedDataset(y, X, X, np.full(sc.J, sc.n), range(sc.J))


def coverage(intervals, truth: float) -> float:
    intervals = list(intervals)
    if not intervals:
        raise ValidationError("coverage needs at least one interval")
    hits = sum(1 for iv in intervals if iv.lower <= truth <= iv.upper)
    return 100.0 * hits / len(intervals)


@dataclass(frozen=True)
class CoverageCell:
    scheme: str
    parameter: str
    coverage: float
    avg_length: float
    used: int
    failures: int


@dataclass(frozen=True, eq=False)
class CoverageReport:
    scenario: Scenario
    cells: tuple
    dataset_redraws: int = 0
    dataset_failures: int = 0
    replicate_redraws: dict = field(default_factory=dict)

    def cell(self, scheme: str, parameter: str) -> CoverageCell:
        for c in self.cells:
            if c.scheme == scheme and c.parameter == parameter:
                return c
        raise KeyError((scheme, parameter))

    @property
    def scheme_labels(self) -> list[str]:
        return list(dict.fromkeys(c.scheme for c in self.cells))


@dataclass(frozen=True, eq=False)
class _RepOutcome:
    rep: int
    redraws: int
    ok: bool
    intervals: dict  # scheme label -> (lower array, upper array) or None
    replicate_redraws: dict


def _fit_dataset(sc: Scenario, rep: int, opts: FitOptions):
    for attempt in range(DATASET_REDRAWS):
        ds = simulate_dataset(sc, rep, substream(sc.master_seed, _DATA, rep, attempt))
        try:
            fit = fit_reml(ds, opts)
        except MultilevelError:
            continue
        if fit.converged:
            return ds, fit, attempt
    return None, None, DATASET_REDRAWS


def run_repetition(sc: Scenario, rep: int, opts: FitOptions | None = None) -> _RepOutcome:
    opts = opts or FitOptions()
    ds, fit, redraws = _fit_dataset(sc, rep, opts)
    if ds is None:
        return _RepOutcome(rep, redraws, False, {}, {})
    out, extra = {}, {}
    for scheme in sc.schemes:
        try:
            reps = run_bootstrap(
                scheme, ds, fit, sc.B, sc.master_seed, RefitPolicy(),
                key=(_BOOT, rep, scheme_key(scheme)), opts=opts,
            )
        except MultilevelError:
            out[scheme.label] = None
            continue
        bounds = np.array([percentile_interval(reps.rows[:, i], sc.alpha) for i in range(reps.rows.shape[1])])
        out[scheme.label] = (bounds[:, 0], bounds[:, 1])
        extra[scheme.label] = reps.attempted - sc.B
    return _RepOutcome(rep, redraws, True, out, extra)


def _run_chunk(sc, reps, opts):
    return [run_repetition(sc, r, opts) for r in reps]


def aggregate(sc: Scenario, outcomes) -> CoverageReport:
    outcomes = sorted(outcomes, key=lambda o: o.rep)
    truth = np.array(sc.truth)
    cells = []
    redraw_totals = {}
    for scheme in sc.schemes:
        label = scheme.label
        lows, highs = [], []
        for o in outcomes:
            got = o.intervals.get(label) if o.ok else None
            if got is not None:
                lows.append(got[0])
                highs.append(got[1])
            redraw_totals[label] = redraw_totals.get(label, 0) + o.replicate_redraws.get(label, 0)
        used = len(lows)
        failures = sc.reps - used
        lo = np.array(lows).reshape(used, len(PARAM_NAMES))
        hi = np.array(highs).reshape(used, len(PARAM_NAMES))
        for i, name in enumerate(PARAM_NAMES):
            if used:
                ivs = [IntervalEstimate(name, a, b, sc.alpha, sc.B) for a, b in zip(lo[:, i], hi[:, i])]
                cov = coverage(ivs, truth[i])
                length = float(np.mean(hi[:, i] - lo[:, i]))
            else:
                cov, length = float("nan"), float("nan")
            cells.append(CoverageCell(label, name, cov, length, used, failures))
    return CoverageReport(
        scenario=sc,
        cells=tuple(cells),
        dataset_redraws=sum(o.redraws for o in outcomes if o.ok),
        dataset_failures=sum(1 for o in outcomes if not o.ok),
        replicate_redraws=redraw_totals,
    )


def run_study(sc: Scenario, parallelism: int = 1, opts: FitOptions | None = None, progress=None) -> CoverageReport:
    """Simulate ``sc.reps`` datasets, bootstrap each with every scheme, tabulate coverage.

    Results are keyed by repetition index before aggregation, so the report
    does not depend on ``parallelism``.
    """
    reps = list(range(sc.reps))
    if parallelism <= 1:
        outcomes = []
        for r in reps:
            outcomes.append(run_repetition(sc, r, opts))
            if progress:
                progress(r)
    else:
        chunks = [c.tolist() for c in np.array_split(np.arange(sc.reps), parallelism * 4) if c.size]
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            outcomes = [o for part in ex.map(_run_chunk, [sc] * len(chunks), chunks, [opts] * len(chunks)) for o in part]
    return aggregate(sc, outcomes)


def with_setting(sc: Scenario, n: int, J: int) -> Scenario:
    return replace(sc, n=n, J=J)

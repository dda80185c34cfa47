"""Bootstrap data-generating schemes for two-level models and the replicate loop.

Four schemes are provided: parametric, residual (with reflated shrunken
residuals), cases (with a choice of which levels to resample) and the
multilevel wild bootstrap, which multiplies the HCCME-transformed marginal
residuals of a whole group by a single auxiliary draw.

Every replicate ``b`` draws from its own random stream derived from
``(master_seed, *key, b, attempt)``, so the output never depends on the order
in which replicates are evaluated.
"""

from __future__ import annotations

import enum
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import linalg

from .exceptions import (
    LeverageError,
    MultilevelError,
    NumericalError,
    RefitFailureError,
    SingularDesignError,
    ValidationError,
)
from .model import (
    FitOptions,
    FitResult,
    GroupedDataset,
    blup_level2_residuals,
    fit_reml,
    level1_residuals,
    marginal_residuals,
    parameter_names,
)

SQRT5 = np.sqrt(5.0)
MAMMEN_LOW = -(SQRT5 - 1.0) / 2.0
MAMMEN_HIGH = (SQRT5 + 1.0) / 2.0
MAMMEN_P = (SQRT5 + 1.0) / (2.0 * SQRT5)
LEVERAGE_GUARD = 1e-12


class AuxiliaryLaw(str, enum.Enum):
    F1_MAMMEN = "F1_mammen"
    F2_RADEMACHER = "F2_rademacher"

    @property
    def atoms(self) -> tuple[float, float]:
        if self is AuxiliaryLaw.F1_MAMMEN:
            return (MAMMEN_LOW, MAMMEN_HIGH)
        return (-1.0, 1.0)

    @property
    def probabilities(self) -> tuple[float, float]:
        if self is AuxiliaryLaw.F1_MAMMEN:
            return (MAMMEN_P, 1.0 - MAMMEN_P)
        return (0.5, 0.5)


class HccmeForm(str, enum.Enum):
    HC2 = "HC2"
    HC3 = "HC3"


class CasesMode(str, enum.Enum):
    BOTH_LEVELS = "both_levels"
    LEVEL2_ONLY = "level2_only"
    LEVEL1_ONLY = "level1_only"


@dataclass(frozen=True)
class Parametric:
    @property
    def label(self) -> str:
        return "parametric"


@dataclass(frozen=True)
class Residual:
    @property
    def label(self) -> str:
        return "residual"


@dataclass(frozen=True)
class Cases:
    mode: CasesMode = CasesMode.BOTH_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "mode", CasesMode(self.mode))

    @property
    def label(self) -> str:
        if self.mode is CasesMode.BOTH_LEVELS:
            return "cases"
        return f"cases[{self.mode.value}]"


@dataclass(frozen=True)
class Wild:
    form: HccmeForm = HccmeForm.HC2
    law: AuxiliaryLaw = AuxiliaryLaw.F1_MAMMEN

    def __post_init__(self):
        object.__setattr__(self, "form", HccmeForm(self.form))
        object.__setattr__(self, "law", AuxiliaryLaw(self.law))

    @property
    def label(self) -> str:
        law = "F1" if self.law is AuxiliaryLaw.F1_MAMMEN else "F2"
        return f"wild[{self.form.value},{law}]"


SchemeSpec = Union[Parametric, Residual, Cases, Wild]


def scheme_key(scheme: SchemeSpec) -> int:
    """Stable integer used in substream derivation."""
    return zlib.crc32(scheme.label.encode())


@dataclass(frozen=True)
class RefitPolicy:
    """Redraw a replicate with a fresh substream when its refit fails."""

    max_attempts: int = 10


@dataclass(frozen=True, eq=False)
class ReplicateMatrix:
    rows: np.ndarray
    scheme: SchemeSpec
    attempted: int
    failed: int
    names: tuple = ()
    flags: tuple = ()

    @property
    def B(self) -> int:
        return self.rows.shape[0]


def substream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))


# -- parametric ---------------------------------------------------------------

def _psd_factor(S, tol=1e-10):
    S = np.asarray(S, float)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        if w.min() < -tol * max(1.0, np.abs(S).max()):
            raise NumericalError("random-effects covariance is not positive semidefinite")
        return V * np.sqrt(np.clip(w, 0.0, None))


def _expand(ds: GroupedDataset, U) -> np.ndarray:
    # z_ij' u_j for every row
    return np.einsum("ij,ij->i", ds.Z, np.repeat(U, ds.sizes, axis=0))


def parametric_resample(fit: FitResult, ds: GroupedDataset, rng: np.random.Generator) -> GroupedDataset:
    vc = fit.varcomps
    F = _psd_factor(vc.Sigma)
    e = np.sqrt(vc.sigma2_eps) * rng.standard_normal(ds.N)
    U = rng.standard_normal((ds.J, ds.q)) @ F.T
    return ds.with_response(ds.X @ fit.beta + _expand(ds, U) + e)


# -- residual -----------------------------------------------------------------

def center_columns(M) -> np.ndarray:
    M = np.asarray(M, float)
    if M.size == 0:
        raise ValidationError("cannot center an empty matrix")
    return M - M.mean(axis=0)


def reflate_level2(U_centered, Gamma_hat) -> np.ndarray:
    """Rescale centered level-2 residuals so that ``U'U / J == Gamma_hat``.

    Uses ``A = R_S^{-1} R_Gamma`` with upper Cholesky factors
    (``S = R_S' R_S``), which gives ``A' S A = Gamma_hat`` exactly.
    """
    U = np.atleast_2d(np.asarray(U_centered, float))
    J = U.shape[0]
    # thin QR of U / sqrt(J) gives R_S up to row signs without forming S,
    # and U R_S^{-1} = sqrt(J) Q D stays orthonormal to working precision
    Q, R = np.linalg.qr(U / np.sqrt(J))
    d = np.abs(np.diag(R))
    singular = U.shape[0] < U.shape[1] or d.min() <= U.shape[1] * np.finfo(float).eps * max(d.max(), 1e-300)
    try:
        if singular:
            raise linalg.LinAlgError("S is singular")
        R_G = linalg.cholesky(np.asarray(Gamma_hat, float), lower=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            "empirical covariance of level-2 residuals (or Gamma_hat) is singular; "
            "use reflate_level2_diagonal as a fallback"
        ) from exc
    return np.sqrt(J) * (Q * np.sign(np.diag(R))) @ R_G


def reflate_level2_diagonal(U_centered, Gamma_hat) -> np.ndarray:
    """Fallback: scale each column so its mean square matches the diagonal of Gamma_hat."""
    U = np.atleast_2d(np.asarray(U_centered, float))
    ms = (U**2).mean(axis=0)
    scale = np.divide(np.sqrt(np.diag(Gamma_hat)), np.sqrt(ms), out=np.zeros_like(ms), where=ms > 0)
    return U * scale


def reflate_level1(e_centered, sigma2_hat: float) -> np.ndarray:
    e = np.asarray(e_centered, float)
    s2 = float(np.mean(e**2))
    if not s2 > 0:
        raise NumericalError("level-1 residuals have zero variance; cannot reflate")
    return e * np.sqrt(sigma2_hat / s2)


@dataclass(frozen=True, eq=False)
class ReflatedResiduals:
    U_tilde: np.ndarray
    e_tilde: np.ndarray
    diagonal_fallback: bool = False


def reflated_residuals(fit: FitResult, ds: GroupedDataset) -> ReflatedResiduals:
    """BLUPs, centering and reflation, computed once per original fit."""
    U = blup_level2_residuals(fit, ds)
    e = level1_residuals(fit, ds, U)
    Uc = center_columns(U)
    fallback = False
    try:
        Ut = reflate_level2(Uc, fit.varcomps.Sigma)
    except NumericalError:
        Ut = reflate_level2_diagonal(Uc, fit.varcomps.Sigma)
        fallback = True
    et = reflate_level1(center_columns(e[:, None])[:, 0], fit.varcomps.sigma2_eps)
    return ReflatedResiduals(Ut, et, fallback)


def residual_resample(fit: FitResult, ds: GroupedDataset, U_tilde, e_tilde, rng: np.random.Generator) -> GroupedDataset:
    U_tilde = np.atleast_2d(np.asarray(U_tilde, float))
    e_tilde = np.asarray(e_tilde, float)
    U = U_tilde[rng.integers(0, U_tilde.shape[0], ds.J)]
    e = e_tilde[rng.integers(0, e_tilde.shape[0], ds.N)]
    return ds.with_response(ds.X @ fit.beta + _expand(ds, U) + e)


# -- cases --------------------------------------------------------------------

def cases_resample(ds: GroupedDataset, mode: CasesMode | str, rng: np.random.Generator) -> GroupedDataset:
    mode = CasesMode(mode)
    J = ds.J
    if mode is CasesMode.LEVEL1_ONLY:
        groups = np.arange(J)
    else:
        groups = rng.integers(0, J, J)
    sizes = ds.sizes[groups]
    starts = np.repeat(ds.offsets[groups], sizes)
    if mode is CasesMode.LEVEL2_ONLY:
        within = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    else:
        within = rng.integers(0, np.repeat(sizes, sizes))
    rows = starts + within
    return GroupedDataset(
        ds.y[rows], ds.X[rows], ds.Z[rows], sizes, [ds.group_ids[g] for g in groups]
    )


# -- wild ---------------------------------------------------------------------

def hat_matrix_blocks(ds: GroupedDataset) -> list[np.ndarray]:
    """Diagonal blocks ``X_j (X'X)^{-1} X_j'`` of the OLS projection matrix."""
    XtX = ds.X.T @ ds.X
    if np.linalg.matrix_rank(XtX) < ds.k:
        raise SingularDesignError("X'X is singular; leverages are undefined")
    cf = linalg.cho_factor(XtX, lower=True)
    return [ds.X[s] @ linalg.cho_solve(cf, ds.X[s].T) for s in ds.group_slices()]


def hccme_transform(v_hat_j, H_j, form: HccmeForm | str) -> np.ndarray:
    form = HccmeForm(form)
    v = np.asarray(v_hat_j, float)
    h = np.diag(np.atleast_2d(H_j))
    if h.shape != v.shape:
        raise ValidationError("H_j must be n_j x n_j to match the residual vector")
    bad = np.flatnonzero(h >= 1.0 - LEVERAGE_GUARD)
    if bad.size:
        i = int(bad[0])
        raise LeverageError(f"leverage h[{i}] = {h[i]!r} is too close to 1")
    if form is HccmeForm.HC2:
        return v / np.sqrt(1.0 - h)
    return v / (1.0 - h)


def draw_auxiliary(law: AuxiliaryLaw | str, J: int, rng: np.random.Generator) -> np.ndarray:
    law = AuxiliaryLaw(law)
    lo, hi = law.atoms
    p = law.probabilities[0]
    return np.where(rng.random(J) < p, lo, hi)


def wild_transformed_residuals(fit: FitResult, ds: GroupedDataset, form) -> np.ndarray:
    """Stacked HCCME-transformed marginal residuals."""
    H = hat_matrix_blocks(ds)
    v = marginal_residuals(fit, ds)
    return np.concatenate([hccme_transform(vj, Hj, form) for vj, Hj in zip(v, H)])


def wild_resample(fit: FitResult, ds: GroupedDataset, form, law, rng: np.random.Generator,
                  v_tilde=None) -> GroupedDataset:
    if v_tilde is None:
        v_tilde = wild_transformed_residuals(fit, ds, form)
    w = draw_auxiliary(law, ds.J, rng)
    return ds.with_response(ds.X @ fit.beta + v_tilde * np.repeat(w, ds.sizes))


# -- replicate loop -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Prepared:
    scheme: SchemeSpec
    fit: FitResult
    ds: GroupedDataset
    reflated: ReflatedResiduals | None = None
    v_tilde: np.ndarray | None = None
    flags: tuple = field(default=())


def prepare(scheme: SchemeSpec, ds: GroupedDataset, fit: FitResult) -> _Prepared:
    if isinstance(scheme, Residual):
        rr = reflated_residuals(fit, ds)
        flags = ("reflation_diagonal_fallback",) if rr.diagonal_fallback else ()
        return _Prepared(scheme, fit, ds, reflated=rr, flags=flags)
    if isinstance(scheme, Wild):
        return _Prepared(scheme, fit, ds, v_tilde=wild_transformed_residuals(fit, ds, scheme.form))
    if isinstance(scheme, (Parametric, Cases)):
        return _Prepared(scheme, fit, ds)
    raise ValidationError(f"unknown scheme {scheme!r}")


def resample(prep: _Prepared, rng: np.random.Generator) -> GroupedDataset:
    s = prep.scheme
    if isinstance(s, Parametric):
        return parametric_resample(prep.fit, prep.ds, rng)
    if isinstance(s, Residual):
        r = prep.reflated
        return residual_resample(prep.fit, prep.ds, r.U_tilde, r.e_tilde, rng)
    if isinstance(s, Cases):
        return cases_resample(prep.ds, s.mode, rng)
    return wild_resample(prep.fit, prep.ds, s.form, s.law, rng, v_tilde=prep.v_tilde)


def _one_replicate(prep, b, master_seed, key, policy, opts):
    """Returns (theta or None, attempts used)."""
    for attempt in range(policy.max_attempts):
        rng = substream(master_seed, *key, b, attempt)
        try:
            star = resample(prep, rng)
            f = fit_reml(star, opts)
        except MultilevelError:
            continue
        theta = f.theta
        if f.converged and np.all(np.isfinite(theta)):
            return theta, attempt + 1
    return None, policy.max_attempts


def _replicate_chunk(prep, bs, master_seed, key, policy, opts):
    return [_one_replicate(prep, b, master_seed, key, policy, opts) for b in bs]


def run_bootstrap(
    scheme: SchemeSpec,
    ds: GroupedDataset,
    fit: FitResult,
    B: int,
    master_seed: int,
    policy: RefitPolicy | None = None,
    *,
    key: tuple = (),
    opts: FitOptions | None = None,
    workers: int = 1,
) -> ReplicateMatrix:
    """Generate ``B`` bootstrap replicates of the parameter vector.

    A replicate whose refit fails is redrawn from a new substream, up to
    ``policy.max_attempts`` times; beyond that ``RefitFailureError`` is raised
    with the replicates gathered so far on ``.partial``.
    """
    if B < 1:
        raise ValidationError("B must be at least 1")
    policy = policy or RefitPolicy()
    prep = prepare(scheme, ds, fit)
    if workers > 1:
        chunks = np.array_split(np.arange(B), workers)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_replicate_chunk, prep, c.tolist(), master_seed, key, policy, opts) for c in chunks]
            results = [r for fu in futs for r in fu.result()]
    else:
        results = _replicate_chunk(prep, range(B), master_seed, key, policy, opts)
    names = tuple(parameter_names(ds.k, ds.q))
    rows, attempted, failed = [], 0, 0
    for b, (theta, used) in enumerate(results):
        attempted += used
        if theta is None:
            failed += used
            partial = ReplicateMatrix(np.array(rows).reshape(len(rows), len(names)), scheme,
                                      attempted, failed, names, prep.flags)
            raise RefitFailureError(
                f"replicate {b}: {policy.max_attempts} consecutive refits failed", partial
            )
        failed += used - 1
        rows.append(theta)
    return ReplicateMatrix(np.vstack(rows), scheme, attempted, failed, names, prep.flags)

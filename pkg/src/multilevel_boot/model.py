"""Two-level linear mixed model: data containers, REML fit, GLS and BLUPs.

The model for group ``j`` is ``y_j = X_j beta + Z_j u_j + e_j`` with
``u_j ~ (0, Sigma)`` and ``e_j ~ (0, sigma2_eps I)``, so that the marginal
covariance of ``y_j`` is ``V_j = Z_j Sigma Z_j' + sigma2_eps I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from . import _kernels
from .exceptions import NumericalError, SingularDesignError, ValidationError

__all__ = [
    "GroupBlock",
    "GroupedDataset",
    "VarianceComponents",
    "FitOptions",
    "FitResult",
    "parameter_names",
    "parameter_vector",
    "encode_varcomps",
    "decode_varcomps",
    "marginal_cov_block",
    "gls_fixed_effects",
    "reml_criterion",
    "fit_reml",
    "blup_level2_residuals",
    "level1_residuals",
    "marginal_residuals",
]


def _frozen(a, ndim):
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 1 and ndim == 2:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GroupBlock:
    """Response and design rows for a single level-2 unit."""

    group_id: Any
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y, 1))
        object.__setattr__(self, "X", _frozen(self.X, 2))
        object.__setattr__(self, "Z", _frozen(self.Z, 2))
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ValidationError(
                f"group {self.group_id!r}: row counts differ "
                f"(y={n}, X={self.X.shape[0]}, Z={self.Z.shape[0]})"
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]


class GroupedDataset:
    """Grouped responses and design matrices for a two-level model.

    Rows are stored stacked in group order; ``offsets[j]:offsets[j+1]`` is the
    slice belonging to group ``j``. Instances are immutable.
    """

    __slots__ = ("y", "X", "Z", "group_ids", "offsets")

    def __init__(self, y, X, Z, sizes, group_ids=None):
        y = _frozen(y, 1)
        X = _frozen(X, 2)
        Z = _frozen(Z, 2)
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size < 1:
            raise ValidationError("at least one group is required")
        if np.any(sizes < 1):
            bad = int(np.flatnonzero(sizes < 1)[0])
            raise ValidationError(f"group at position {bad} is empty")
        N = int(sizes.sum())
        if y.shape[0] != N or X.shape[0] != N or Z.shape[0] != N:
            raise ValidationError(
                f"group sizes sum to {N} but y/X/Z have "
                f"{y.shape[0]}/{X.shape[0]}/{Z.shape[0]} rows"
            )
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        if group_ids is None:
            group_ids = tuple(range(sizes.size))
        group_ids = tuple(group_ids)
        if len(group_ids) != sizes.size:
            raise ValidationError("one group id per group is required")
        offsets = np.zeros(sizes.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        offsets.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "group_ids", group_ids)
        object.__setattr__(self, "offsets", offsets)

    def __setattr__(self, name, value):
        raise AttributeError("GroupedDataset is immutable")

    def __reduce__(self):
        return (GroupedDataset, (self.y, self.X, self.Z, self.sizes, self.group_ids))

    @classmethod
    def from_blocks(cls, blocks: Sequence[GroupBlock]) -> "GroupedDataset":
        blocks = list(blocks)
        if not blocks:
            raise ValidationError("at least one group is required")
        k, q = blocks[0].X.shape[1], blocks[0].Z.shape[1]
        for b in blocks:
            if b.X.shape[1] != k or b.Z.shape[1] != q:
                raise ValidationError(
                    f"group {b.group_id!r} has k={b.X.shape[1]}, q={b.Z.shape[1]}; "
                    f"expected k={k}, q={q}"
                )
        return cls(
            np.concatenate([b.y for b in blocks]),
            np.vstack([b.X for b in blocks]),
            np.vstack([b.Z for b in blocks]),
            [b.n for b in blocks],
            [b.group_id for b in blocks],
        )

    def with_response(self, y) -> "GroupedDataset":
        """Copy with a new stacked response and the same designs."""
        return GroupedDataset(y, self.X, self.Z, self.sizes, self.group_ids)

    @property
    def J(self) -> int:
        return len(self.group_ids)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def block(self, j: int) -> GroupBlock:
        a, b = self.offsets[j], self.offsets[j + 1]
        return GroupBlock(self.group_ids[j], self.y[a:b], self.X[a:b], self.Z[a:b])

    @property
    def groups(self) -> tuple:
        return tuple(self.block(j) for j in range(self.J))

    def group_slices(self):
        return [slice(self.offsets[j], self.offsets[j + 1]) for j in range(self.J)]

    def __eq__(self, other):
        if not isinstance(other, GroupedDataset):
            return NotImplemented
        return (
            self.group_ids == other.group_ids
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.Z, other.Z)
        )

    __hash__ = None

    def __repr__(self):
        return f"GroupedDataset(J={self.J}, N={self.N}, k={self.k}, q={self.q})"


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_eps: float
    Sigma: np.ndarray
    tol: float = field(default=1e-10, repr=False, compare=False)

    def __post_init__(self):
        S = _frozen(np.atleast_2d(self.Sigma), 2)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "sigma2_eps", float(self.sigma2_eps))
        if not np.isfinite(self.sigma2_eps) or not np.all(np.isfinite(S)):
            raise ValidationError("variance components must be finite")
        if S.shape[0] != S.shape[1]:
            raise ValidationError(f"Sigma must be square, got {S.shape}")
        if self.sigma2_eps < 0:
            raise ValidationError("sigma2_eps must be non-negative")
        if not np.allclose(S, S.T, rtol=0, atol=self.tol * max(1.0, np.abs(S).max())):
            raise ValidationError("Sigma must be symmetric")
        scale = max(1.0, np.abs(S).max())
        if np.linalg.eigvalsh(S).min() < -self.tol * scale:
            raise ValidationError("Sigma must be positive semidefinite")

    @property
    def q(self) -> int:
        return self.Sigma.shape[0]

    def scaled(self, c: float) -> "VarianceComponents":
        return VarianceComponents(c * self.sigma2_eps, c * self.Sigma)


@dataclass(frozen=True)
class FitOptions:
    nm_maxiter: int = 500
    bfgs_maxiter: int = 200
    ftol: float = 1e-8
    gtol: float = 1e-6
    floor_rel: float = 1e-8


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    varcomps: VarianceComponents
    reml_loglik: float
    converged: bool
    iterations: int
    boundary_flag: bool
    vp: np.ndarray = field(repr=False)
    floor: float = field(repr=False)

    @property
    def criterion(self) -> float:
        return -2.0 * self.reml_loglik

    @property
    def theta(self) -> np.ndarray:
        return parameter_vector(self.beta, self.varcomps)


def parameter_names(k: int, q: int) -> list[str]:
    """Names of the flattened parameter vector (betas, sigma2_eps, vech(Sigma))."""
    names = [f"beta{i}" for i in range(k)] + ["sigma2_eps"]
    for i in range(q):
        for j in range(i + 1):
            names.append(f"sigma2_u{i}" if i == j else f"sigma_u{j}{i}")
    return names


def parameter_vector(beta, vc: VarianceComponents) -> np.ndarray:
    rows, cols = np.tril_indices(vc.q)
    return np.concatenate([np.asarray(beta, float), [vc.sigma2_eps], vc.Sigma[rows, cols]])


def _floor(ds: GroupedDataset, rel: float = 1e-8) -> float:
    # floor on log standard deviations: variance >= rel * var(y)
    vy = float(np.var(ds.y))
    if not vy > 0:
        vy = 1.0
    return 0.5 * np.log(rel * vy)


def encode_varcomps(vc: VarianceComponents, floor: float = -np.inf) -> np.ndarray:
    """Map variance components to the unconstrained (log-Cholesky) vector."""
    q = vc.q
    vp = np.empty(_kernels.n_params(q))
    vp[0] = 0.5 * np.log(vc.sigma2_eps) if vc.sigma2_eps > 0 else -np.inf
    vp[0] = max(vp[0], floor)
    # tiny jitter keeps the factorization defined for singular Sigma
    jitter = np.exp(2 * floor) if np.isfinite(floor) else 0.0
    L = np.linalg.cholesky(vc.Sigma + jitter * np.eye(q)) if q else np.zeros((0, 0))
    idx = 1
    for i in range(q):
        for j in range(i + 1):
            vp[idx] = max(np.log(L[i, i]), floor) if i == j else L[i, j]
            idx += 1
    return vp


def decode_varcomps(vp, q: int, floor: float = -np.inf) -> VarianceComponents:
    s, L = _kernels.decode(np.asarray(vp, float), q, floor)
    return VarianceComponents(s, L @ L.T)


def marginal_cov_block(vc: VarianceComponents, Z_j) -> np.ndarray:
    """``V_j = Z_j Sigma Z_j' + sigma2_eps I``."""
    Z_j = np.atleast_2d(np.asarray(Z_j, float))
    if Z_j.shape[1] != vc.q:
        raise ValidationError(f"Z_j has {Z_j.shape[1]} columns, Sigma is {vc.q}x{vc.q}")
    if not np.all(np.isfinite(Z_j)):
        raise ValidationError("non-finite entries in Z_j")
    V = Z_j @ vc.Sigma @ Z_j.T + vc.sigma2_eps * np.eye(Z_j.shape[0])
    return 0.5 * (V + V.T)


def _cho(V):
    try:
        return linalg.cho_factor(V, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("marginal covariance block is not positive definite") from exc


def gls_fixed_effects(ds: GroupedDataset, vc: VarianceComponents) -> np.ndarray:
    """Generalized least squares for beta, accumulated group by group."""
    k = ds.k
    A = np.zeros((k, k))
    c = np.zeros(k)
    for blk in ds.groups:
        cf = _cho(marginal_cov_block(vc, blk.Z))
        VX = linalg.cho_solve(cf, blk.X, check_finite=False)
        A += blk.X.T @ VX
        c += VX.T @ blk.y
    return _solve_normal(A, c)


def _solve_normal(A, c):
    k = A.shape[0]
    rank = np.linalg.matrix_rank(A)
    if rank < k:
        raise SingularDesignError(
            f"fixed-effects normal matrix is singular: rank {rank} < {k} columns "
            f"({k - rank} deficient)"
        )
    return linalg.solve(A, c, assume_a="pos", check_finite=False)


def sufficient_stats(ds: GroupedDataset):
    """Per-group cross products used by the compiled REML criterion."""
    starts = ds.offsets[:-1]
    X, Z, y = ds.X, ds.Z, ds.y
    ZtZ = np.add.reduceat(Z[:, :, None] * Z[:, None, :], starts, axis=0)
    ZtX = np.add.reduceat(Z[:, :, None] * X[:, None, :], starts, axis=0)
    XtX = np.add.reduceat(X[:, :, None] * X[:, None, :], starts, axis=0)
    Zty = np.add.reduceat(Z * y[:, None], starts, axis=0)
    Xty = np.add.reduceat(X * y[:, None], starts, axis=0)
    yty = np.add.reduceat(y * y, starts)
    nobs = ds.sizes.astype(float)
    return ZtZ, ZtX, XtX, Zty, Xty, yty, nobs


def reml_criterion(vp, ds: GroupedDataset, floor: float | None = None) -> float:
    """-2 x restricted log-likelihood, up to an additive constant.

    ``sum_j log|V_j| + log|sum_j X_j' V_j^-1 X_j| + sum_j r_j' V_j^-1 r_j``
    with ``r_j = y_j - X_j beta_hat(vp)``. Returns a large finite penalty when
    the decoded covariance cannot be factored.
    """
    if floor is None:
        floor = _floor(ds)
    vp = np.asarray(vp, dtype=float)
    if vp.shape != (_kernels.n_params(ds.q),):
        raise ValidationError(f"vp must have length {_kernels.n_params(ds.q)}")
    buf = np.empty(ds.k)
    return float(_kernels.reml_eval(vp, ds.q, ds.k, floor, *sufficient_stats(ds), buf))


def _ols(ds: GroupedDataset):
    beta, *_ = np.linalg.lstsq(ds.X, ds.y, rcond=None)
    resid = ds.y - ds.X @ beta
    return beta, float(resid @ resid / max(ds.N - ds.k, 1))


def _start(ds: GroupedDataset, floor: float):
    _, v = _ols(ds)
    if not v > 0:
        v = np.exp(2 * floor) * 1e4
    q = ds.q
    vc = VarianceComponents(0.5 * v, np.eye(q) * (0.5 * v / q))
    x0 = encode_varcomps(vc, floor)
    step = np.where(_kernels.log_mask(q), 0.5, 0.5 * np.sqrt(0.5 * v / q))
    return x0, step


def check_design(ds: GroupedDataset) -> None:
    q = ds.q
    need = ds.k + q * (q + 1) // 2 + 1
    if ds.N <= need:
        raise ValidationError(f"N={ds.N} observations; more than {need} are required")
    rank = np.linalg.matrix_rank(ds.X)
    if rank < ds.k:
        raise SingularDesignError(
            f"singular fixed-effects design: rank deficient: rank {rank} < {ds.k} columns "
            f"({ds.k - rank} deficient)"
        )


def fit_reml(ds: GroupedDataset, opts: FitOptions | None = None, *, check: bool = True) -> FitResult:
    """Restricted maximum likelihood fit.

    Non-convergence is reported through ``FitResult.converged`` rather than
    raised; a rank-deficient fixed design raises ``SingularDesignError``.
    """
    opts = opts or FitOptions()
    if check:
        check_design(ds)
    floor = _floor(ds, opts.floor_rel)
    stats = sufficient_stats(ds)
    x0, step = _start(ds, floor)
    vp, crit, beta, nit, conv = _kernels.fit_kernel(
        x0, step, ds.q, ds.k, floor, *stats,
        opts.nm_maxiter, opts.bfgs_maxiter, opts.ftol, opts.gtol,
    )
    if crit >= _kernels.PENALTY:
        raise NumericalError("REML criterion could not be evaluated at the optimum")
    lmask = _kernels.log_mask(ds.q)
    at_floor = lmask & (vp <= floor + 1e-6)
    vp = np.where(at_floor, floor, vp)
    vp.flags.writeable = False
    beta = np.array(beta)
    beta.flags.writeable = False
    return FitResult(
        beta=beta,
        varcomps=decode_varcomps(vp, ds.q, floor),
        reml_loglik=-0.5 * float(crit),
        converged=bool(conv),
        iterations=int(nit),
        boundary_flag=bool(at_floor.any()),
        vp=vp,
        floor=floor,
    )


def marginal_residuals(fit: FitResult, ds: GroupedDataset) -> list[np.ndarray]:
    r = ds.y - ds.X @ fit.beta
    return [r[s] for s in ds.group_slices()]


def blup_level2_residuals(fit: FitResult, ds: GroupedDataset) -> np.ndarray:
    """Shrunken level-2 residuals ``Sigma Z_j' V_j^-1 (y_j - X_j beta)``, one row per group."""
    vc = fit.varcomps
    U = np.zeros((ds.J, ds.q))
    for j, (blk, r) in enumerate(zip(ds.groups, marginal_residuals(fit, ds))):
        cf = _cho(marginal_cov_block(vc, blk.Z))
        U[j] = vc.Sigma @ blk.Z.T @ linalg.cho_solve(cf, r, check_finite=False)
    return U


def level1_residuals(fit: FitResult, ds: GroupedDataset, U) -> np.ndarray:
    U = np.asarray(U, float)
    if U.shape != (ds.J, ds.q):
        raise ValidationError(f"U must be {ds.J}x{ds.q}, got {U.shape}")
    per_row = np.repeat(U, ds.sizes, axis=0)
    return ds.y - ds.X @ fit.beta - np.einsum("ij,ij->i", ds.Z, per_row)

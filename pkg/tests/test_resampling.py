import itertools
from collections import Counter

import numpy as np
import pytest
from conftest import random_slope_data
from numpy.testing import assert_allclose, assert_array_equal

from multilevel_boot.exceptions import LeverageError, NumericalError, RefitFailureError, SingularDesignError
from multilevel_boot.model import FitResult, GroupedDataset, VarianceComponents, fit_reml
from multilevel_boot.resampling import (
    MAMMEN_HIGH,
    MAMMEN_LOW,
    MAMMEN_P,
    AuxiliaryLaw,
    Cases,
    CasesMode,
    HccmeForm,
    Parametric,
    RefitPolicy,
    Residual,
    Wild,
    cases_resample,
    center_columns,
    draw_auxiliary,
    hat_matrix_blocks,
    hccme_transform,
    parametric_resample,
    reflate_level1,
    reflate_level2,
    reflated_residuals,
    residual_resample,
    run_bootstrap,
    substream,
    wild_resample,
    wild_transformed_residuals,
)


def _fit_with(beta, vc):
    return FitResult(np.asarray(beta, float), vc, 0.0, True, 0, False, None, -np.inf)


@pytest.fixture(scope="module")
def ds():
    return random_slope_data(6, 12, seed=21)


@pytest.fixture(scope="module")
def fit(ds):
    return fit_reml(ds)


def _block_set(d):
    return [(b.X.tobytes(), b.Z.tobytes()) for b in d.groups]


# -- auxiliary laws ------------------------------------------------------------------

def test_mammen_atoms():
    assert MAMMEN_LOW == pytest.approx(-0.6180339887, abs=1e-9)
    assert MAMMEN_HIGH == pytest.approx(1.6180339887, abs=1e-9)
    assert MAMMEN_P == pytest.approx(0.7236067977, abs=1e-9)
    lo, hi = AuxiliaryLaw.F1_MAMMEN.atoms
    p, q = AuxiliaryLaw.F1_MAMMEN.probabilities
    assert p * lo + q * hi == pytest.approx(0, abs=1e-15)
    assert p * lo**2 + q * hi**2 == pytest.approx(1, abs=1e-15)
    assert p * lo**3 + q * hi**3 == pytest.approx(1, abs=1e-14)


@pytest.mark.parametrize("law, third", [(AuxiliaryLaw.F1_MAMMEN, 1.0), (AuxiliaryLaw.F2_RADEMACHER, 0.0)])
def test_auxiliary_moments(law, third):
    w = draw_auxiliary(law, 10**6, np.random.default_rng(5))
    assert set(np.unique(w)) <= set(law.atoms)
    assert abs(w.mean()) < 0.005
    assert abs(w.var() - 1) < 0.01
    assert abs((w**3).mean() - third) < 0.02


# -- parametric --------------------------------------------------------------------

def test_parametric_degenerate_law(ds):
    fit = _fit_with([3.0, 5.0], VarianceComponents(0.0, np.zeros((2, 2))))
    star = parametric_resample(fit, ds, np.random.default_rng(0))
    assert_array_equal(star.y, ds.X @ fit.beta)


def test_parametric_level1_variance():
    N = 10**6
    ones = np.ones((N, 1))
    big = GroupedDataset(np.zeros(N), ones, ones, [1000] * 1000)
    fit = _fit_with([0.0], VarianceComponents(2.5, [[0.0]]))
    e = parametric_resample(fit, big, np.random.default_rng(1)).y
    assert abs(e.var() / 2.5 - 1) < 0.01


def test_parametric_random_effect_covariance():
    J = 10**5
    Z = np.tile(np.eye(2), (J, 1))
    big = GroupedDataset(np.zeros(2 * J), Z[:, :1], Z, [2] * J)
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    fit = _fit_with([0.0], VarianceComponents(0.0, S))
    U = parametric_resample(fit, big, np.random.default_rng(2)).y.reshape(J, 2)
    assert np.abs(np.cov(U.T) - S).max() < 0.02 * np.diag(S).max()


def test_parametric_rejects_non_psd(ds):
    vc = object.__new__(VarianceComponents)
    object.__setattr__(vc, "sigma2_eps", 1.0)
    object.__setattr__(vc, "Sigma", np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NumericalError):
        parametric_resample(_fit_with([0.0, 0.0], vc), ds, np.random.default_rng(0))


# -- centering and reflation ---------------------------------------------------------

def test_center_columns():
    assert_array_equal(center_columns([[1.0], [2.0], [3.0]]), [[-1.0], [0.0], [1.0]])
    c = np.array([[-1.0, 2.0], [1.0, -2.0]])
    assert_array_equal(center_columns(c), c)
    assert_array_equal(center_columns([[4.0, -7.0]]), [[0.0, 0.0]])
    M = np.random.default_rng(0).standard_normal((30, 3)) + 5
    assert np.abs(center_columns(M).mean(axis=0)).max() < 1e-14


def test_reflate_level2_hand():
    Ut = reflate_level2([[-1.0], [1.0]], [[4.0]])
    assert_allclose(Ut, [[-2.0], [2.0]], rtol=1e-15)
    assert (Ut.T @ Ut / 2)[0, 0] == pytest.approx(4.0, rel=1e-15)


def test_reflate_level2_already_calibrated():
    U = center_columns(np.random.default_rng(3).standard_normal((40, 2)))
    S = U.T @ U / 40
    assert_allclose(reflate_level2(U, S), U, atol=1e-12)


def test_reflate_level2_random_identity():
    rng = np.random.default_rng(4)
    U = center_columns(rng.standard_normal((50, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]]))
    G = np.array([[2.0, 0.5], [0.5, 2.0]])
    Ut = reflate_level2(U, G)
    assert np.abs(Ut.T @ Ut / 50 - G).max() < 1e-10


def test_reflate_level2_singular_fails():
    with pytest.raises(NumericalError, match="fallback"):
        reflate_level2([[1.0, 2.0], [-1.0, -2.0]], np.eye(2))


def test_reflate_level1():
    assert_allclose(reflate_level1([-1.0, 1.0], 4.0), [-2.0, 2.0], rtol=1e-15)
    e = np.array([-1.0, 3.0, -2.0])
    assert_allclose(reflate_level1(e, np.mean(e**2)), e, rtol=1e-15)
    assert_array_equal(np.sign(reflate_level1(e, 0.3)), np.sign(e))
    with pytest.raises(NumericalError):
        reflate_level1([0.0, 0.0], 1.0)


def test_reflated_residuals_calibrated(ds, fit):
    rr = reflated_residuals(fit, ds)
    assert not rr.diagonal_fallback
    assert np.abs(rr.U_tilde.T @ rr.U_tilde / ds.J - fit.varcomps.Sigma).max() < 1e-10
    assert abs(np.mean(rr.e_tilde**2) - fit.varcomps.sigma2_eps) < 1e-10


def test_reflation_diagonal_fallback_when_J_small():
    d = random_slope_data(8, 2, seed=9)
    f = _fit_with([3.0, 5.0], VarianceComponents(1.0, [[2.0, 0.5], [0.5, 2.0]]))
    rr = reflated_residuals(f, d)
    assert rr.diagonal_fallback
    assert_allclose((rr.U_tilde**2).mean(axis=0), [2.0, 2.0], rtol=1e-12)


# -- residual resample ----------------------------------------------------------------

def test_residual_single_atom(ds, fit):
    U = np.tile([[0.5, -0.2]], (ds.J, 1))
    e = np.full(ds.N, 0.1)
    a = residual_resample(fit, ds, U, e, np.random.default_rng(0))
    b = residual_resample(fit, ds, U, e, np.random.default_rng(1))
    assert_array_equal(a.y, b.y)


def test_residual_support(ds, fit):
    rr = reflated_residuals(fit, ds)
    rng = np.random.default_rng(0)
    U = rr.U_tilde[rng.integers(0, ds.J, ds.J)]
    # replay the draw to identify which rows/entries were used
    star = residual_resample(fit, ds, rr.U_tilde, rr.e_tilde, np.random.default_rng(0))
    e_star = star.y - ds.X @ fit.beta - np.einsum("ij,ij->i", ds.Z, np.repeat(U, ds.sizes, axis=0))
    assert all(np.any(np.abs(rr.e_tilde - v) < 1e-12) for v in e_star)
    assert all(any(np.array_equal(u, row) for row in rr.U_tilde) for u in U)


def test_residual_row_frequencies():
    J, reps = 5, 20000
    ones = np.ones((J, 1))
    d = GroupedDataset(np.zeros(J), ones, ones, [1] * J)
    f = _fit_with([0.0], VarianceComponents(1.0, [[1.0]]))
    U = np.arange(J, dtype=float)[:, None]
    rng = np.random.default_rng(12)
    draws = np.concatenate([residual_resample(f, d, U, np.zeros(J), rng).y for _ in range(reps)])
    freq = np.bincount(draws.astype(int), minlength=J) / draws.size
    se = np.sqrt((1 / J) * (1 - 1 / J) / draws.size)
    assert np.all(np.abs(freq - 1 / J) < 3 * se)


# -- cases ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", list(CasesMode))
def test_cases_trivial_single_row(mode):
    ones = np.ones((1, 1))
    d = GroupedDataset([4.2], ones, ones, [1], ["g"])
    assert cases_resample(d, mode, np.random.default_rng(0)) == d


def test_cases_level2_intact(ds):
    star = cases_resample(ds, CasesMode.LEVEL2_ONLY, np.random.default_rng(3))
    src = [(b.y.tobytes(), b.X.tobytes(), b.Z.tobytes()) for b in ds.groups]
    assert star.J == ds.J
    for b in star.groups:
        assert (b.y.tobytes(), b.X.tobytes(), b.Z.tobytes()) in src


def test_cases_level1_keeps_groups(ds):
    star = cases_resample(ds, CasesMode.LEVEL1_ONLY, np.random.default_rng(4))
    assert_array_equal(star.sizes, ds.sizes)
    for src, b in zip(ds.groups, star.groups):
        rows = {r.tobytes() for r in np.column_stack([src.y, src.X, src.Z])}
        assert all(r.tobytes() in rows for r in np.column_stack([b.y, b.X, b.Z]))


def test_cases_both_levels_sizes_and_rows():
    d = random_slope_data(0, 0, 5, sizes=[2, 3, 5, 4])
    for seed in range(20):
        star = cases_resample(d, CasesMode.BOTH_LEVELS, np.random.default_rng(seed))
        assert star.J == d.J
        # every emitted group's rows come from a single source group of the same size
        for b in star.groups:
            src = [g for g in d.groups if g.n == b.n]
            assert any(all(any(np.array_equal(r, s) for s in g.X) for r in b.X) for g in src)


def test_cases_both_levels_enumeration():
    # J=2: group a has one row, group b two rows. Enumerate all outcomes exactly.
    ones = np.ones((3, 1))
    d = GroupedDataset([10.0, 20.0, 21.0], ones, ones, [1, 2], ["a", "b"])
    rows = {"a": [10.0], "b": [20.0, 21.0]}
    exact = Counter()
    for slots in itertools.product("ab", repeat=2):
        choices = [list(itertools.product(rows[g], repeat=len(rows[g]))) for g in slots]
        for picked in itertools.product(*choices):
            p = 0.25 * np.prod([1.0 / len(c) for c in choices])
            exact[tuple(v for grp in picked for v in grp) + (slots,)] += p
    assert sum(exact.values()) == pytest.approx(1.0)
    rng = np.random.default_rng(8)
    n = 40000
    seen = Counter()
    slot_hits = np.zeros(2)
    for _ in range(n):
        s = cases_resample(d, CasesMode.BOTH_LEVELS, rng)
        seen[tuple(s.y) + (tuple(s.group_ids),)] += 1
        slot_hits += [g == "a" for g in s.group_ids]
    assert set(seen) <= set(exact)
    for outcome, p in exact.items():
        se = np.sqrt(p * (1 - p) / n)
        assert abs(seen[outcome] / n - p) < 4.5 * se
    assert np.all(np.abs(slot_hits / n - 0.5) < 4.5 * np.sqrt(0.25 / n))


# -- hat matrix and HCCME ------------------------------------------------------------

def test_hat_blocks_trace_and_bounds(ds):
    H = hat_matrix_blocks(ds)
    assert sum(np.trace(h) for h in H) == pytest.approx(ds.k, rel=1e-12)
    for h in H:
        d = np.diag(h)
        assert np.all((d >= 0) & (d < 1))


def test_hat_blocks_intercept_only():
    ones = np.ones((4, 1))
    d = GroupedDataset(np.arange(4.0), ones, ones, [2, 2])
    for h in hat_matrix_blocks(d):
        assert_allclose(np.diag(h), 0.25, rtol=1e-15)


def test_hat_blocks_match_full_projection(ds):
    full = ds.X @ np.linalg.solve(ds.X.T @ ds.X, ds.X.T)
    for s, h in zip(ds.group_slices(), hat_matrix_blocks(ds)):
        assert_allclose(h, full[s, s], atol=1e-12)


def test_hat_blocks_singular():
    x = np.arange(4.0)
    d = GroupedDataset(x, np.column_stack([x, x]), np.ones((4, 1)), [2, 2])
    with pytest.raises(SingularDesignError):
        hat_matrix_blocks(d)


def test_hccme_values():
    v = np.array([1.0, -3.0])
    for form in HccmeForm:
        assert_array_equal(hccme_transform(v, np.zeros((2, 2)), form), v)
    H = np.diag([0.75, 0.0])
    assert_allclose(hccme_transform(v, H, "HC2"), [2.0, -3.0])
    assert_allclose(hccme_transform(v, H, "HC3"), [4.0, -3.0])


def test_hccme_never_shrinks(ds):
    v = np.random.default_rng(1).standard_normal(ds.N)
    H = hat_matrix_blocks(ds)
    for form in HccmeForm:
        out = np.concatenate([hccme_transform(v[s], h, form) for s, h in zip(ds.group_slices(), H)])
        assert np.all(np.abs(out) >= np.abs(v))


def test_hccme_leverage_guard():
    with pytest.raises(LeverageError, match=r"h\[1\]"):
        hccme_transform([1.0, 1.0], np.diag([0.2, 1.0]), "HC2")


# -- wild ------------------------------------------------------------------------------

def test_wild_identity_reconstruction(monkeypatch, ds, fit):
    import multilevel_boot.resampling as rs

    monkeypatch.setattr(rs, "draw_auxiliary", lambda law, J, rng: np.ones(J))
    monkeypatch.setattr(rs, "hat_matrix_blocks", lambda d: [np.zeros((n, n)) for n in d.sizes])
    star = rs.wild_resample(fit, ds, "HC2", "F1_mammen", np.random.default_rng(0))
    assert_allclose(star.y, ds.y, atol=1e-12)


@pytest.mark.parametrize("form", list(HccmeForm))
def test_wild_rademacher_support(ds, fit, form):
    vt = wild_transformed_residuals(fit, ds, form)
    mean = ds.X @ fit.beta
    star = wild_resample(fit, ds, form, AuxiliaryLaw.F2_RADEMACHER, np.random.default_rng(9))
    dev = star.y - mean
    assert_allclose(dev**2, vt**2, rtol=1e-12)
    for s in ds.group_slices():
        signs = np.sign(dev[s] * vt[s])
        assert np.all(signs == signs[0])


@pytest.mark.parametrize("law", list(AuxiliaryLaw))
def test_wild_group_coherence(ds, fit, law):
    vt = wild_transformed_residuals(fit, ds, "HC3")
    mean = ds.X @ fit.beta
    for seed in range(5):
        star = wild_resample(fit, ds, "HC3", law, np.random.default_rng(seed))
        for s in ds.group_slices():
            w = (star.y[s] - mean[s]) / vt[s]
            assert np.ptp(w) < 1e-12
            assert min(abs(w[0] - a) for a in law.atoms) < 1e-12


# -- all resamplers keep the source designs ---------------------------------------------

@pytest.mark.parametrize("scheme", [Parametric(), Residual(), Cases(), Cases("level2_only"), Wild()])
def test_designs_come_from_source(ds, fit, scheme):
    from multilevel_boot.resampling import prepare, resample

    star = resample(prepare(scheme, ds, fit), np.random.default_rng(2))
    if isinstance(scheme, Cases):
        return  # rows are mixed within a group; checked in the cases tests
    assert_array_equal(star.X, ds.X)
    assert_array_equal(star.Z, ds.Z)


def test_cases_level2_blocks_from_source(ds):
    star = cases_resample(ds, "level2_only", np.random.default_rng(1))
    assert set(_block_set(star)) <= set(_block_set(ds))


# -- run_bootstrap ---------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", [Parametric(), Residual(), Cases(), Wild("HC3", "F2_rademacher")])
def test_run_bootstrap_shape_and_determinism(ds, fit, scheme):
    a = run_bootstrap(scheme, ds, fit, 15, master_seed=42)
    b = run_bootstrap(scheme, ds, fit, 15, master_seed=42)
    assert a.rows.shape == (15, 6) and np.all(np.isfinite(a.rows))
    assert a.rows.tobytes() == b.rows.tobytes()
    assert a.attempted >= 15 and a.failed == a.attempted - 15
    assert a.names[2] == "sigma2_eps"


def test_run_bootstrap_worker_independent(ds, fit):
    a = run_bootstrap(Wild(), ds, fit, 12, master_seed=3)
    b = run_bootstrap(Wild(), ds, fit, 12, master_seed=3, workers=2)
    assert a.rows.tobytes() == b.rows.tobytes()


def test_run_bootstrap_substreams_depend_on_index_only(ds, fit):
    a = run_bootstrap(Parametric(), ds, fit, 6, master_seed=3)
    b = run_bootstrap(Parametric(), ds, fit, 3, master_seed=3)
    assert a.rows[:3].tobytes() == b.rows.tobytes()


def test_run_bootstrap_degenerate_parametric(ds):
    beta = np.array([3.0, 5.0])
    exact = ds.with_response(ds.X @ beta)
    f = fit_reml(exact)
    f0 = FitResult(f.beta, VarianceComponents(0.0, np.zeros((2, 2))), f.reml_loglik, True, 0, True, f.vp, f.floor)
    reps = run_bootstrap(Parametric(), exact, f0, 5, master_seed=1)
    assert_allclose(reps.rows[:, :2], np.tile(f.beta, (5, 1)), atol=1e-8)
    floor_var = np.exp(2 * f.floor)
    assert_allclose(reps.rows[:, 2], floor_var, rtol=1e-9)
    # Cholesky diagonals of Sigma* sit at the floor
    s0, s01, s1 = reps.rows[:, 3], reps.rows[:, 4], reps.rows[:, 5]
    assert_allclose(s0, floor_var, rtol=1e-9)
    assert_allclose(s1 - s01**2 / s0, floor_var, rtol=1e-6)


def test_run_bootstrap_failure_cap(ds, fit, monkeypatch):
    import multilevel_boot.resampling as rs

    real = rs.fit_reml
    calls = {"n": 0}

    def flaky(d, opts=None):
        calls["n"] += 1
        f = real(d, opts)
        if calls["n"] > 4:
            return FitResult(f.beta, f.varcomps, f.reml_loglik, False, 0, False, f.vp, f.floor)
        return f

    monkeypatch.setattr(rs, "fit_reml", flaky)
    with pytest.raises(RefitFailureError) as err:
        run_bootstrap(Parametric(), ds, fit, 8, master_seed=0, policy=RefitPolicy(max_attempts=3))
    partial = err.value.partial
    assert partial.rows.shape == (4, 6)
    assert partial.failed == 3


def test_substream_is_reproducible():
    assert substream(5, 1, 2).random() == substream(5, 1, 2).random()
    assert substream(5, 1, 2).random() != substream(5, 2, 1).random()

import math

import numpy as np
import pytest

from serialtrack.registration import (Correspondence, DegenerateConfiguration, GridSpec, InvalidPair,
                                      Matches, NoConsensus, RansacParams, ThinPlateSpline,
                                      build_pair_transform, fit_affine_lsq, fit_affine_ransac,
                                      fit_pair, fit_tps, FitOptions, registration_error)
from serialtrack.transform import AffineTransform2D, DisplacementField, PairKind, identity_pair


def make_matches(t: AffineTransform2D, n, rng, noise=0.0, outliers=0.0, extent=1000.0):
    src = rng.uniform(0, extent, size=(n, 2))
    dst = t.apply(src) + (rng.normal(0, noise, size=(n, 2)) if noise else 0.0)
    k = int(round(outliers * n))
    out = np.zeros(n, dtype=bool)
    if k:
        idx = rng.choice(n, k, replace=False)
        dst[idx] = rng.uniform(0, extent, size=(k, 2))
        out[idx] = True
    return Matches(src, dst, np.ones(n)), out


def ransac_trial(seed: int, sigma: float = 2.0):
    """One recovery trial: returns held-out RMS error in units of sigma."""
    rng = np.random.default_rng(seed)
    true = AffineTransform2D.similarity(1.1, 15, 4, 4)
    m, _ = make_matches(true, 100, rng, noise=sigma, outliers=0.3)
    t, _ = fit_affine_ransac(m, RansacParams(inlier_threshold=3 * sigma, seed=seed))
    held, _ = make_matches(true, 200, rng, noise=sigma)
    rms = float(np.sqrt(np.mean(np.sum((t.apply(held.src) - held.dst) ** 2, axis=1))))
    return rms / sigma


# --- least squares ----------------------------------------------------------

def test_lsq_examples(rng):
    corr = [Correspondence((0, 0), (0, 0)), Correspondence((1, 0), (1, 0)), Correspondence((0, 1), (0, 1))]
    assert np.allclose(fit_affine_lsq(corr).matrix, np.eye(3), atol=1e-12)
    true = AffineTransform2D.similarity(1.0, 30, 7, -2)
    m, _ = make_matches(true, 10, rng, extent=100)
    assert np.max(np.abs(fit_affine_lsq(m).matrix - true.matrix)) < 1e-9
    line = Matches(np.array([[0, 0], [1, 1], [2, 2], [3, 3.0]]), np.zeros((4, 2)), np.ones(4))
    with pytest.raises(DegenerateConfiguration):
        fit_affine_lsq(line)
    with pytest.raises(DegenerateConfiguration):
        fit_affine_lsq(corr[:2])


def test_lsq_weights_and_similarity_model(rng):
    true = AffineTransform2D.similarity(0.9, -20, 50, 10)
    m, _ = make_matches(true, 30, rng, extent=200)
    dst = m.dst.copy()
    dst[0] += 500  # a gross error carrying zero weight is ignored
    w = np.ones(30)
    w[0] = 0
    assert np.allclose(fit_affine_lsq(Matches(m.src, dst, w)).matrix, true.matrix, atol=1e-9)
    assert np.allclose(fit_affine_lsq(m, model="similarity").matrix, true.matrix, atol=1e-9)


def test_lsq_is_global_minimum(rng):
    true = AffineTransform2D([[1.02, 0.05, 3], [-0.04, 0.97, -8], [0, 0, 1]])
    m, _ = make_matches(true, 40, rng, noise=3.0, extent=300)
    w = rng.uniform(0.2, 2.0, 40)
    m = Matches(m.src, m.dst, w)
    fit = fit_affine_lsq(m)

    def cost(mat):
        pred = m.src @ mat[:2, :2].T + mat[:2, 2]
        return float(np.sum(w * np.sum((pred - m.dst) ** 2, axis=1)))

    base = cost(fit.matrix)
    for _ in range(100):
        pert = fit.matrix.copy()
        pert[:2] += rng.normal(0, 1e-4, size=(2, 3)) * np.array([1, 1, 100])
        assert cost(pert) > base


# --- RANSAC -----------------------------------------------------------------

def test_ransac_without_outliers_equals_lsq(rng):
    true = AffineTransform2D.similarity(1.2, 5, -30, 12)
    m, _ = make_matches(true, 50, rng, noise=0.5)
    t, mask = fit_affine_ransac(m, RansacParams(inlier_threshold=10))
    assert mask.all()
    assert np.max(np.abs(t.matrix - fit_affine_lsq(m).matrix)) < 1e-9


def test_ransac_recovers_with_outliers():
    assert ransac_trial(7) < 2.0


def test_ransac_no_consensus(rng):
    true = AffineTransform2D.similarity(1.0, 0, 0, 0)
    m, _ = make_matches(true, 100, rng, noise=1.0, outliers=0.95)
    with pytest.raises(NoConsensus):
        fit_affine_ransac(m, RansacParams(inlier_threshold=3, min_inlier_fraction=0.5))


def test_ransac_deterministic(rng):
    true = AffineTransform2D.similarity(1.1, 15, 4, 4)
    m, _ = make_matches(true, 100, rng, noise=2.0, outliers=0.3)
    p = RansacParams(inlier_threshold=6, seed=42)
    t1, m1 = fit_affine_ransac(m, p)
    t2, m2 = fit_affine_ransac(m, p)
    assert m1.tobytes() == m2.tobytes()
    assert t1.matrix.tobytes() == t2.matrix.tobytes()


@pytest.mark.parametrize("kw", [dict(max_iterations=0), dict(inlier_threshold=0),
                                dict(min_inlier_fraction=0), dict(min_inlier_fraction=1.5)])
def test_ransac_params_validated(kw):
    with pytest.raises(ValueError):
        RansacParams(**kw)


# --- thin-plate splines ------------------------------------------------------

def test_tps_zero_residuals_give_zero_field():
    grid = GridSpec((0, 0), 10, 11, 11)
    src = np.array([[10, 10], [80, 20], [50, 90], [20, 60.0]])
    f = fit_tps(Matches(src, src.copy(), np.ones(4)), 0.0, grid)
    assert f.is_zero()


def test_tps_interpolates_control_points_on_grid():
    grid = GridSpec((0, 0), 10, 21, 21)
    src = np.array([[20, 30], [150, 40], [100, 170], [40, 120], [180, 180.0]])  # on grid nodes
    residual = np.array([[1.5, -2], [0, 3], [-4, 1], [2.5, 2.5], [-1, -1.0]])
    f = fit_tps(Matches(src, src + residual, np.ones(5)), 0.0, grid)
    assert np.max(np.abs(f.displacement(src) - residual)) < 1e-6


def _numeric_bending(spline, lo, hi, n=400):
    """Finite-difference integral of f_xx^2 + 2 f_xy^2 + f_yy^2 over a box."""
    xs = np.linspace(lo, hi, n)
    h = xs[1] - xs[0]
    X, Y = np.meshgrid(xs, xs)
    vals = spline(np.column_stack([X.ravel(), Y.ravel()])).reshape(n, n, -1)
    total = 0.0
    for c in range(vals.shape[2]):
        f = vals[:, :, c]
        fyy, fxx = np.gradient(np.gradient(f, h, axis=0), h, axis=0), np.gradient(np.gradient(f, h, axis=1), h, axis=1)
        fxy = np.gradient(np.gradient(f, h, axis=1), h, axis=0)
        total += float(np.sum(fxx ** 2 + 2 * fxy ** 2 + fyy ** 2) * h * h)
    return total


def test_tps_regularization_trades_energy_for_fit():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 100, size=(12, 2))
    vals = rng.normal(0, 3, size=(12, 2))
    exact = ThinPlateSpline(pts, vals, 0.0)
    smooth = ThinPlateSpline(pts, vals, 10.0)
    assert np.max(np.abs(exact(pts) - vals)) < 1e-8
    assert smooth.bending_energy() < exact.bending_energy()
    assert np.sum((smooth(pts) - vals) ** 2) > np.sum((exact(pts) - vals) ** 2)
    # the closed-form energy agrees with a finite-difference integral, up to the 8*pi constant
    e_exact = _numeric_bending(exact, -150, 250)
    e_smooth = _numeric_bending(smooth, -150, 250)
    assert e_smooth < e_exact
    ratio = e_exact / (exact.bending_energy() / exact.scale ** 2)
    assert ratio == pytest.approx(8 * math.pi, rel=0.1)


def test_tps_degenerate_inputs():
    grid = GridSpec((0, 0), 10, 5, 5)
    with pytest.raises(DegenerateConfiguration):
        fit_tps(Matches(np.zeros((2, 2)), np.ones((2, 2)), np.ones(2)), 0.0, grid)
    line = np.array([[0, 0], [1, 1], [2, 2.0]])
    with pytest.raises(DegenerateConfiguration):
        fit_tps(Matches(line, line + 1, np.ones(3)), 0.0, grid)


# --- pair transforms -------------------------------------------------------

def test_build_pair_transform_examples():
    a = build_pair_transform(4, 5, AffineTransform2D.identity())
    assert a.kind is PairKind.FORWARD_ADJACENT and a.field is None
    f = DisplacementField.zeros((0, 0), 10, 3, 3)
    b = build_pair_transform(4, 6, AffineTransform2D.translation(1, 2), f)
    assert b.kind is PairKind.BACKWARD_INTERLEAVE and b.field is f
    with pytest.raises(InvalidPair):
        build_pair_transform(4, 7, AffineTransform2D.identity())


def test_fit_pair_with_tps_satisfies_inverse_contract():
    rng = np.random.default_rng(11)
    true = AffineTransform2D.similarity(1.01, 3, 10, -5, center=(500, 500))
    src = rng.uniform(0, 1000, size=(80, 2))
    bump = np.column_stack([4 * np.sin(src[:, 1] / 150), 3 * np.cos(src[:, 0] / 170)])
    dst = true.apply(src) + bump
    grid = GridSpec.covering(-100, -100, 1100, 1100, 25)
    tr = fit_pair(0, 1, Matches(src, dst, np.ones(80)), FitOptions(grid=grid, tps_regularization=0.01))
    assert tr.field is not None
    # the TPS stage absorbs the smooth residual that the affine cannot
    assert np.sqrt(np.mean(np.sum((tr.forward(src) - dst) ** 2, axis=1))) < 0.5
    pts = rng.uniform(50, 950, size=(100, 2))
    assert np.max(np.linalg.norm(tr.inverse(tr.forward(pts)) - pts, axis=1)) <= 2 * tr.inverse_tol


# --- registration error -------------------------------------------------------

def test_registration_error_examples(rng):
    pts = rng.uniform(0, 500, size=(20, 2))
    rep = registration_error(identity_pair(0, 1), Matches(pts, pts.copy(), np.ones(20)))
    assert np.all(rep.distances == 0) and rep.median == 0
    rep = registration_error(identity_pair(0, 1), Matches(pts, pts + [70, 0], np.ones(20)))
    assert np.allclose(rep.distances, 70) and rep.mean == pytest.approx(70)


def test_registration_error_cross_validation(rng):
    true = AffineTransform2D([[0.98, 0.03, 20], [-0.02, 1.03, -15], [0, 0, 1]])
    m, _ = make_matches(true, 60, rng, noise=2.0)
    train, test = Matches(m.src[:30], m.dst[:30], m.w[:30]), Matches(m.src[30:], m.dst[30:], m.w[30:])
    tr = build_pair_transform(0, 1, fit_affine_lsq(train))
    fitted = registration_error(tr, train).mean
    held = registration_error(tr, test).mean
    assert held < 3 * fitted

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundpose.errors import EmptyInput, InsufficientInliers, SingularNormalEquations
from groundpose.geometry import Pose, exp_so3, project_points
from groundpose.pipeline import refine_hypothesis, run_hypothesis
from groundpose.ransac import Correspondence, CorrespondenceSet, RansacConfig, reprojection_error
from groundpose.refine import (
    MadScale,
    RobustConfig,
    ShapeModel,
    clamp_scale,
    gauss_newton,
    hre,
    irls_minimize,
    mad_scale,
    min_correspondences,
    reprojection_residuals,
    residual,
    residual_jacobian,
    shape_point,
    tukey_rho,
    tukey_weight,
)
from groundpose.synthbench import SynthConfig, generate, rotation_error
from helpers import K, central_difference


def random_problem(rng, n=40, M=2, outliers=0.0, noise=0.0):
    mean = rng.uniform(-2, 2, (n, 3))
    basis = rng.normal(0, 0.1, (M, n, 3))
    model = ShapeModel(mean, basis)
    coeffs = rng.normal(size=M)
    w = rng.normal(size=3)
    w *= rng.uniform(0, math.pi) / np.linalg.norm(w)
    pose = Pose(exp_so3(w), [rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(15, 35)])
    uv, _ = project_points(pose, K, model.points(coeffs))
    uv = uv + rng.normal(0, noise, uv.shape)
    n_out = int(outliers * n)
    uv[:n_out] = rng.uniform(0, [640, 480], (n_out, 2))
    return model, coeffs, pose, CorrespondenceSet(uv, mean)


# -- shape model ---------------------------------------------------------------


def test_shape_point_zero_coeffs_is_mean():
    model = ShapeModel(np.arange(12.0).reshape(4, 3), np.ones((2, 4, 3)))
    assert np.array_equal(shape_point(model, np.zeros(2), 2), model.mean[2])


def test_shape_point_single_basis():
    mean = np.array([[0.5, 1.0, -1.0]])
    model = ShapeModel(mean, np.array([[[1.0, 0.0, 0.0]]]))
    assert np.array_equal(shape_point(model, [2.0], 0), mean[0] + [2.0, 0, 0])


@given(st.lists(st.integers(-8, 8), min_size=3, max_size=3), st.lists(st.integers(-8, 8), min_size=3, max_size=3))
def test_shape_point_affine(a, b):
    # dyadic data keep the identity exact in floating point
    rng = np.random.default_rng(0)
    model = ShapeModel(rng.integers(-4, 4, (5, 3)) / 4, rng.integers(-4, 4, (3, 5, 3)) / 8)
    la, lb = np.array(a) / 4, np.array(b) / 4
    for i in range(5):
        lhs = shape_point(model, la, i) + shape_point(model, lb, i) - shape_point(model, np.zeros(3), i)
        assert np.array_equal(lhs, shape_point(model, la + lb, i))


def test_shape_point_index_errors():
    model = ShapeModel.rigid(np.zeros((3, 3)))
    with pytest.raises(IndexError):
        shape_point(model, None, 3)
    with pytest.raises(ValueError):
        ShapeModel(np.zeros((3, 3)), np.zeros((1, 2, 3)))


# -- residual ------------------------------------------------------------------


def test_residual_zero_at_truth():
    rng = np.random.default_rng(0)
    model, coeffs, pose, corrs = random_problem(rng)
    assert np.abs(reprojection_residuals(pose, coeffs, model, K, corrs)).max() < 1e-9


def test_rigid_residual_equals_reprojection_error():
    rng = np.random.default_rng(1)
    model, _, pose, corrs = random_problem(rng, M=0, noise=3.0)
    for c in list(corrs)[:10]:
        assert residual(pose, None, model, K, c) == pytest.approx(reprojection_error(pose, K, c), rel=1e-12)


def test_residual_behind_camera():
    model = ShapeModel.rigid([[0, 0, -5.0]])
    assert residual(Pose.identity(), None, model, K, Correspondence([320, 240], [0, 0, -5], 0)) == math.inf


# -- Tukey and scale -------------------------------------------------------------


def test_tukey_examples():
    c = 4.685
    assert tukey_rho(0.0, c) == 0.0
    assert tukey_rho(c, c) == pytest.approx(c * c / 6, abs=0)
    assert tukey_rho(10 * c, c) == c * c / 6


def test_tukey_branch_continuity():
    for c in (0.5, 4.685, 28.11):
        inner = (c * c / 6.0) * (1.0 - (1.0 - (c / c) ** 2) ** 3)
        assert abs(tukey_rho(c, c) - c * c / 6) <= np.finfo(float).eps * c * c
        assert abs(inner - c * c / 6) <= np.finfo(float).eps * c * c
        assert tukey_rho(np.nextafter(c, 0), c) <= c * c / 6
        assert tukey_weight(c, c) == 0.0
        assert tukey_weight(np.nextafter(c, math.inf), c) == 0.0


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.1, 20))
def test_tukey_properties(r1, r2, c):
    lo, hi = sorted((r1, r2))
    assert tukey_rho(lo, c) <= tukey_rho(hi, c) + 1e-12
    assert 0 <= tukey_rho(hi, c) <= c * c / 6 + 1e-12
    assert 0 <= tukey_weight(lo, c) <= 1
    if hi > c:
        assert tukey_weight(hi, c) == 0.0


def test_tukey_weight_is_derivative_over_r():
    c = 3.0
    for r in (0.3, 1.0, 2.5):
        h = 1e-6
        d = (tukey_rho(r + h, c) - tukey_rho(r - h, c)) / (2 * h)
        assert tukey_weight(r, c) == pytest.approx(d / r, rel=1e-6)


def test_mad_example():
    assert mad_scale([1, 2, 3, 4, 5]) == pytest.approx(1.4826, abs=1e-4)


def test_mad_degenerate():
    assert mad_scale([3.0, 3.0, 3.0]) == 0.0
    assert mad_scale([7.0]) == 0.0
    assert mad_scale([1, 2, 3, 4, 5, math.inf]) == mad_scale([1, 2, 3, 4, 5, 3])
    with pytest.raises(EmptyInput):
        mad_scale([])
    with pytest.raises(EmptyInput):
        mad_scale([math.inf])


def test_clamp_examples():
    assert clamp_scale(5, 4, 6) == 5
    assert clamp_scale(2, 4, 6) == 4
    assert clamp_scale(10, 4, 6) == 6
    with pytest.raises(ValueError):
        clamp_scale(1, 6, 4)


def test_mad_scale_policy_floor():
    assert MadScale(4, 6)([2.0, 2.0, 2.0]) == pytest.approx(4.685 * 4)


# -- Jacobian ------------------------------------------------------------------


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        model, coeffs, pose, corrs = random_problem(rng, n=8, M=3, noise=5.0)
        pose = pose.perturbed(rng.normal(0, [0.05, 0.05, 0.05, 0.2, 0.2, 0.5]))
        e, J = residual_jacobian(pose, coeffs, model, K, corrs)

        def f(x):
            p = pose.perturbed(x[:6])
            return residual_jacobian(p, coeffs + x[6:], model, K, corrs)[0]

        Jn = central_difference(f, np.zeros(9))
        rel = np.linalg.norm(J - Jn) / np.linalg.norm(Jn)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_jacobian_pose_only_block():
    rng = np.random.default_rng(1)
    model, coeffs, pose, corrs = random_problem(rng, n=5, M=2)
    _, J = residual_jacobian(pose, coeffs, model, K, corrs, with_shape=False)
    assert J.shape == (5, 2, 6)


# -- IRLS ----------------------------------------------------------------------


def test_irls_cost_non_increasing():
    rng = np.random.default_rng(2)
    n_steps = 0
    for k in range(100):
        model, coeffs, pose, corrs = random_problem(rng, n=40, M=2, outliers=0.2, noise=1.0)
        init = pose.perturbed(rng.normal(0, [0.02, 0.02, 0.02, 0.1, 0.1, 0.3]))
        scale = MadScale(4, 12) if k % 2 else 20.0
        fit = irls_minimize(corrs, K, init, scale, model=model, optimize_shape=True)
        for before, after in fit.steps:
            assert after <= before + 1e-9
        n_steps += len(fit.steps)
    assert n_steps > 100


def test_irls_stationary_at_truth():
    rng = np.random.default_rng(3)
    model, coeffs, pose, corrs = random_problem(rng, M=0)
    fit = irls_minimize(corrs, K, pose, 10.0, model=model)
    assert fit.iterations == 1
    assert fit.cost < 1e-16
    assert np.allclose(fit.pose.matrix, pose.matrix, atol=1e-9)


def test_irls_recovers_pose_with_outliers():
    rng = np.random.default_rng(4)
    model, _, pose, corrs = random_problem(rng, n=100, M=0, outliers=0.3, noise=1.0)
    init = pose.perturbed([0.01, -0.01, 0.005, 0.1, -0.05, 0.3])
    fit = irls_minimize(corrs, K, init, MadScale(1.0, 12.0), model=model)
    assert rotation_error(fit.pose.R, pose.R) < 0.5


def test_irls_all_weights_zero():
    rng = np.random.default_rng(5)
    model, _, pose, corrs = random_problem(rng, M=0)
    far = Pose(pose.R, pose.t + [5.0, 0, 0])
    with pytest.raises(SingularNormalEquations):
        irls_minimize(corrs, K, far, 1.0, model=model)


def test_irls_too_few_points_for_shape():
    rng = np.random.default_rng(6)
    model, coeffs, pose, corrs = random_problem(rng, n=4, M=2)
    with pytest.raises(InsufficientInliers):
        irls_minimize(corrs.subset([0, 1, 2]), K, pose, 10.0, model=model, optimize_shape=True)


# -- Gauss-Newton ----------------------------------------------------------------


def test_gauss_newton_converges():
    rng = np.random.default_rng(7)
    for _ in range(10):
        model, _, pose, corrs = random_problem(rng, M=0)
        axis = rng.normal(size=3)
        axis *= math.radians(0.5) / np.linalg.norm(axis)
        init = Pose(exp_so3(axis) @ pose.R, pose.t * 1.01)
        fit = gauss_newton(corrs, K, init, model=model)
        assert np.abs(fit.pose.R - pose.R).max() < 1e-6
        assert np.abs(fit.pose.t - pose.t).max() < 1e-6


def test_gauss_newton_zero_iterations():
    rng = np.random.default_rng(8)
    model, _, pose, corrs = random_problem(rng, M=0)
    init = pose.perturbed([0.01, 0, 0, 0, 0, 0])
    assert gauss_newton(corrs, K, init, model=model, max_iters=0).pose is init


def test_gauss_newton_needs_three_points():
    rng = np.random.default_rng(9)
    model, _, pose, corrs = random_problem(rng, M=0)
    with pytest.raises(ValueError):
        gauss_newton(corrs.subset([0, 1]), K, pose, model=model)


def test_gauss_newton_cost_non_increasing():
    rng = np.random.default_rng(10)
    model, _, pose, corrs = random_problem(rng, M=0, noise=2.0)
    fit = gauss_newton(corrs, K, pose.perturbed([0.05, 0, 0, 0.5, 0, 1]), model=model)
    for before, after in fit.steps:
        assert after <= before


# -- HRE -----------------------------------------------------------------------


def test_robust_config_validation():
    with pytest.raises(ValueError, match="tau1 < tau2 < tau3"):
        RobustConfig(6, 6, 12)
    with pytest.raises(ValueError):
        RobustConfig(4, 12, 6)
    RobustConfig()


def test_min_correspondences():
    assert min_correspondences(0) == 3
    assert min_correspondences(5) == 6


def test_hre_noiseless_truth():
    rng = np.random.default_rng(11)
    model, _, pose, corrs = random_problem(rng, M=0)
    res = hre(corrs, K, pose, model)
    assert np.allclose(res.pose.matrix, pose.matrix, atol=1e-9)
    assert res.inlier_ids == frozenset(corrs.ids.tolist())
    assert res.final_cost < 1e-12


def test_hre_recovers_shape():
    rng = np.random.default_rng(12)
    model, coeffs, pose, corrs = random_problem(rng, n=80, M=2, outliers=0.2, noise=0.5)
    init = pose.perturbed([0.01, 0.01, 0, 0.1, 0, 0.3])
    res = hre(corrs, K, init, model)
    assert rotation_error(res.pose.R, pose.R) < 0.5
    assert np.abs(res.coeffs - coeffs).max() < 0.5
    assert len(res.stage_costs) == 3


def test_hre_stage_ordering():
    rng = np.random.default_rng(13)
    for _ in range(20):
        model, _, pose, corrs = random_problem(rng, n=60, M=1, outliers=0.3, noise=1.5)
        init = pose.perturbed(rng.normal(0, [0.01, 0.01, 0.01, 0.1, 0.1, 0.3]))
        res = hre(corrs, K, init, model)
        fit2 = res.stage_fits[1]
        rows = np.flatnonzero(np.isin(corrs.ids, sorted(res.inlier_ids)))
        sub = corrs.subset(rows)
        before = np.sum(reprojection_residuals(fit2.pose, fit2.coeffs, model, K, sub) ** 2)
        assert res.stage_costs[2] <= before + 1e-9


def test_hre_insufficient_inliers():
    rng = np.random.default_rng(14)
    model, _, pose, corrs = random_problem(rng, n=6, M=0, noise=20.0)
    with pytest.raises((InsufficientInliers, SingularNormalEquations)):
        hre(corrs, K, pose, model, RobustConfig(0.01, 0.02, 0.03))


def test_hre_beats_gn_inliers_under_pitch_error():
    cfg = SynthConfig(pitch_error_deg=3.0)
    n = 500
    wins = 0
    for trial in range(n):
        s = generate(cfg, trial)
        rc = RansacConfig(seed=s.ransac_seed)
        hyp = run_hypothesis(s.corrs, s.scene, "p1p", s.box3d, rc)
        counts = []
        for refiner in ("gn", "hre"):
            est = refine_hypothesis(s.corrs, s.scene, hyp, refiner)
            counts.append(int((reprojection_residuals(est.pose, None, None, s.scene.K, s.corrs) < 4).sum()))
        wins += counts[1] >= counts[0]
    assert wins >= 0.9 * n

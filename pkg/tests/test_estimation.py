import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundusreg.errors import DegenerateConfiguration, InsufficientMatches
from fundusreg.estimation import (FitConfig, PairMeta, estimate_homography, fit, linear_k1_k2, linear_k1_k2_H,
                                  linear_k_and_H, linear_k_single, refine_nonlinear, resolve_mode,
                                  transfer_errors)
from fundusreg.features import CorrespondenceSet
from fundusreg.geometry import (AffineHomography, RadialDistortion, RegistrationModel, distort_points,
                                image_centre, rotation, undistort_points)

W, H_ = 768, 512
C = image_centre(W, H_)
S = 1 + float(np.hypot(*C))
FRAMES = ((C, C), (S, S))
META = PairMeta((H_, W), (H_, W))


def _points(rng, n, margin=40):
    return rng.uniform([margin, margin], [W - margin, H_ - margin], (n, 2))


def _in_frame(p, margin=10):
    return (p[:, 0] > margin) & (p[:, 0] < W - margin) & (p[:, 1] > margin) & (p[:, 1] < H_ - margin)


def _fov_points(n_side=40, radius=0.45 * H_):
    g = np.linspace(-radius, radius, n_side)
    xx, yy = np.meshgrid(g, g)
    p = np.column_stack([xx.ravel(), yy.ravel()])
    return C + p[np.hypot(p[:, 0], p[:, 1]) <= radius]


def _generate(p1, H, k1, k2):
    """Forward model with raw functions (allows k outside the model bound)."""
    u = undistort_points(p1, k1, C, S)
    return distort_points(H.apply(u), k2, C, S)


def _sim(angle_deg=0.0, t=(0.0, 0.0), scale=1.0):
    return AffineHomography.similarity(np.deg2rad(angle_deg), scale, t, C)


def _model(H, k1, k2, mode="two"):
    return RegistrationModel(H, RadialDistortion.for_image(k1, W, H_), RadialDistortion.for_image(k2, W, H_), mode)


# --- configuration -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(scale_gate=1.5)
    with pytest.raises(ValueError):
        FitConfig(max_iter=0)
    with pytest.raises(ValueError):
        FitConfig(epsilon=-1)
    with pytest.raises(ValueError):
        FitConfig(mode="three")


def test_auto_mode():
    assert resolve_mode("auto", PairMeta((512, 768), (512, 768))) == "one"
    assert resolve_mode("auto", PairMeta((512, 768), (600, 800))) == "two"
    assert resolve_mode("auto", PairMeta((512, 768), (512, 768), "cam A", "cam B")) == "two"
    assert resolve_mode("one", PairMeta((512, 768), (600, 800))) == "one"


# --- homography --------------------------------------------------------------

def test_homography_exact(rng):
    p1 = _points(rng, 20)
    truth = AffineHomography(rotation(np.deg2rad(15)), [5, -3])
    fitres = estimate_homography(CorrespondenceSet(p1, truth.apply(p1)))
    assert np.abs(fitres.H.params - truth.params).max() < 1e-6
    assert fitres.gate_passed


def test_homography_identity(rng):
    p = _points(rng, 30)
    fitres = estimate_homography(CorrespondenceSet(p, p))
    assert np.abs(fitres.H.params - AffineHomography.identity().params).max() < 1e-9


def test_homography_gate_never_passes(rng):
    p1 = _points(rng, 30)
    truth = AffineHomography(np.diag([1.05, 1.0]), [0, 0])
    fitres = estimate_homography(CorrespondenceSet(p1, truth.apply(p1)), FitConfig(scale_retries=5))
    assert not fitres.gate_passed
    assert fitres.scale_ratio == pytest.approx(0.05 / 1.05, abs=1e-6)
    assert fitres.attempts == 5


def test_homography_errors(rng):
    p = _points(rng, 3)
    with pytest.raises(InsufficientMatches, match="insufficient correspondences"):
        estimate_homography(CorrespondenceSet(p, p))
    line = np.column_stack([np.linspace(0, 100, 10), np.linspace(0, 50, 10)])
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(CorrespondenceSet(line, line))


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_homography_tolerates_outliers(seed):
    rng = np.random.default_rng(seed)
    n = 200
    p1 = _points(rng, n)
    truth = AffineHomography(rotation(rng.uniform(-0.3, 0.3)) * rng.uniform(0.95, 1.05), rng.uniform(-40, 40, 2))
    p2 = truth.apply(p1)
    bad = rng.random(n) < 0.3
    p2[bad] = _points(rng, bad.sum())
    H = estimate_homography(CorrespondenceSet(p1, p2), FitConfig(seed=seed)).H
    assert np.linalg.norm(H.apply(p1[~bad]) - p2[~bad], axis=1).mean() < 1


def test_homography_seeded_reproducible(rng):
    p1 = _points(rng, 100)
    p2 = p1 + rng.normal(0, 1, p1.shape)
    a = estimate_homography(CorrespondenceSet(p1, p2), FitConfig(seed=7))
    b = estimate_homography(CorrespondenceSet(p1, p2), FitConfig(seed=7))
    assert np.array_equal(a.H.params, b.H.params)


# --- linear estimators -------------------------------------------------------

def test_linear_k_single_zero(rng):
    p1 = _points(rng, 100)
    H = _sim(4, (10, -5))
    est = linear_k_single(CorrespondenceSet(p1, H.apply(p1)), H, *FRAMES)
    assert abs(est.k) < 1e-8 and not est.clamped


def test_linear_k_single_recovers(rng):
    p1 = _points(rng, 100)
    H = _sim(6, (12, 4))
    est = linear_k_single(CorrespondenceSet(p1, _generate(p1, H, 0.1, 0.1)), H, *FRAMES)
    assert est.k == pytest.approx(0.1, abs=1e-4)


def test_linear_k_single_clamps(rng):
    p1 = _points(rng, 100)
    H = _sim(6, (12, 4))
    est = linear_k_single(CorrespondenceSet(p1, _generate(p1, H, 0.25, 0.25)), H, *FRAMES)
    assert est.k == 0.2 and est.clamped


def test_linear_k_single_degenerate_radii():
    p = np.tile(C, (10, 1))
    with pytest.raises(DegenerateConfiguration, match="degenerate radii"):
        linear_k_single(CorrespondenceSet(p, p), AffineHomography.identity(), *FRAMES)


def test_linear_k_and_H_affine_only(rng):
    p1 = _points(rng, 60)
    H = AffineHomography([[1.02, 0.05], [-0.04, 0.99]], [7, -3])
    Hf, k = linear_k_and_H(CorrespondenceSet(p1, H.apply(p1)), *FRAMES)
    assert abs(k) < 1e-6
    assert np.abs(Hf.params - H.params).max() < 1e-6


def test_linear_k_and_H_recovers(rng):
    p1 = _points(rng, 80)
    H = AffineHomography(rotation(np.deg2rad(5)), [12, 4])
    Hf, k = linear_k_and_H(CorrespondenceSet(p1, _generate(p1, H, -0.08, -0.08)), *FRAMES)
    assert k == pytest.approx(-0.08, abs=1e-3)
    assert np.abs(Hf.params - H.params).max() < 1e-3


def test_linear_k_and_H_needs_eight(rng):
    p1 = _points(rng, 7)
    H = _sim(5, (3, 1))
    with pytest.raises(DegenerateConfiguration, match="degenerate system"):
        linear_k_and_H(CorrespondenceSet(p1[:6], _generate(p1[:6], H, 0.1, 0.1)), *FRAMES)


def test_linear_k1_k2_zero(rng):
    p1 = _points(rng, 80)
    H = _sim(5, (10, 2))
    est = linear_k1_k2(CorrespondenceSet(p1, H.apply(p1)), H, *FRAMES)
    assert abs(est.k1) < 1e-8 and abs(est.k2) < 1e-8


def test_linear_k1_k2_recovers(rng):
    p1 = _points(rng, 80)
    H = _sim(5, (10, 2))
    est = linear_k1_k2(CorrespondenceSet(p1, _generate(p1, H, 0.1, -0.1)), H, *FRAMES)
    assert est.k1 == pytest.approx(0.1, abs=1e-3) and est.k2 == pytest.approx(-0.1, abs=1e-3)
    assert not est.ill_conditioned


def test_linear_k1_k2_equal_radius_ill_conditioned():
    # one radius in image 1, rotation about the centre: only the ratio of the
    # two distortion factors is observable
    a = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    p1 = C + 150 * np.column_stack([np.cos(a), np.sin(a)])
    H = _sim(7)
    est = linear_k1_k2(CorrespondenceSet(p1, _generate(p1, H, 0.05, 0.05)), H, *FRAMES)
    assert est.ill_conditioned and est.condition > 1e8


def test_linear_k1_k2_H_identity(rng):
    p = _points(rng, 60)
    Hf, k1, k2 = linear_k1_k2_H(CorrespondenceSet(p, p), *FRAMES)
    assert np.abs(Hf.params - AffineHomography.identity().params).max() < 1e-6
    assert abs(k1) < 1e-6 and abs(k2) < 1e-6


def test_linear_k1_k2_H_recovers(rng):
    p1 = _points(rng, 100)
    H = _sim(8, (6, -9))
    Hf, k1, k2 = linear_k1_k2_H(CorrespondenceSet(p1, _generate(p1, H, 0.12, 0.05)), *FRAMES)
    assert k1 == pytest.approx(0.12, abs=1e-2) and k2 == pytest.approx(0.05, abs=1e-2)
    assert np.abs(Hf.A - H.A).max() < 1e-2
    assert np.abs(Hf.T - H.T).max() < 1e-2 * S


def test_linear_k1_k2_H_needs_nine(rng):
    p1 = _points(rng, 7)
    with pytest.raises(DegenerateConfiguration, match="degenerate system"):
        linear_k1_k2_H(CorrespondenceSet(p1, p1 + 1), *FRAMES)


# --- refinement --------------------------------------------------------------

def test_refine_exact(rng):
    p1 = _points(rng, 150)
    truth = _model(_sim(6, (15, -4)), 0.1, 0.1, "one")
    corr = CorrespondenceSet(p1, truth.map_1_to_2(p1))
    start = truth.replace(H=_sim(5.8, (14, -3)), d1=truth.d1.with_k(0.05), d2=truth.d2.with_k(0.05))
    out = refine_nonlinear(start, corr)
    assert transfer_errors(out, corr).mean() < 1e-6
    assert out.d1.k == out.d2.k


def test_refine_noise_monte_carlo():
    errs, kerr = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        # k is only observable through how far points move, so use montage-like shifts
        shift = rng.uniform(150, 250) * np.array([np.cos(a := rng.uniform(0, 2 * np.pi)), np.sin(a)])
        truth = _model(_sim(rng.uniform(-10, 10), shift), 0.1, 0.1, "one")
        p1 = _points(rng, 1500)
        p1 = p1[_in_frame(truth.map_1_to_2(p1))][:300]
        p2 = truth.map_1_to_2(p1) + rng.normal(0, 0.5, p1.shape)
        model, _ = fit(CorrespondenceSet(p1, p2), FitConfig(seed=seed), META)
        errs.append(model.fit_error)
        kerr.append(abs(model.d1.k - 0.1))
    assert max(errs) <= 0.75
    assert max(kerr) <= 0.02


def test_refine_bound_not_sticky(rng):
    p1 = _points(rng, 200)
    truth = _model(_sim(3, (8, 2)), 0.15, 0.15)
    corr = CorrespondenceSet(p1, truth.map_1_to_2(p1))
    start = truth.replace(d1=truth.d1.with_k(0.2), d2=truth.d2.with_k(0.2))
    out = refine_nonlinear(start, corr)
    assert out.d1.k == pytest.approx(0.15, abs=0.02) and out.d2.k == pytest.approx(0.15, abs=0.02)


def test_refine_never_worse(rng):
    p1 = _points(rng, 50)
    p2 = _points(rng, 50)  # pure noise: nothing to gain, nothing to lose
    start = _model(AffineHomography.identity(), 0.0, 0.0)
    corr = CorrespondenceSet(p1, p2)
    out = refine_nonlinear(start, corr)
    assert transfer_errors(out, corr).mean() <= transfer_errors(start, corr).mean()


# --- full fit ----------------------------------------------------------------

def test_fit_identity():
    p = _fov_points(20)
    model, trace = fit(CorrespondenceSet(p, p), FitConfig(), META)
    assert model.fit_error < 1e-6
    assert trace.termination == "converged"
    assert max(r["iteration"] for r in trace.records if r["estimator"] != "refine") <= 2
    assert np.allclose(model.H.params, AffineHomography.identity().params, atol=1e-9)


k_vals = st.floats(-0.15, 0.15)


@given(k_vals, k_vals, st.floats(-15, 15), st.floats(-50, 50), st.floats(-50, 50), st.booleans())
@settings(max_examples=15)
def test_fit_exact_recovers_mapping(k1, k2, angle, tx, ty, one):
    if one:
        k2 = k1
    truth = _model(_sim(angle, (tx, ty)), k1, k2, "one" if one else "two")
    p1 = _fov_points(14)
    q = truth.map_1_to_2(p1)
    cfg = FitConfig(mode="one" if one else "two")
    model, _ = fit(CorrespondenceSet(p1, q), cfg, META)
    dense = _fov_points(40)
    dev = np.linalg.norm(model.map_1_to_2(dense, strict=False) - truth.map_1_to_2(dense), axis=1)
    assert np.nanmax(dev) < 0.01
    if one:
        assert model.d1.k == model.d2.k


def test_fit_k_out_of_bounds_keeps_best():
    p1 = _fov_points(16)
    p2 = _generate(p1, _sim(4, (5, 5)), 0.0, 0.5)
    model, trace = fit(CorrespondenceSet(p1, p2), FitConfig(mode="two"), META)
    assert trace.termination == "k-out-of-bounds"
    recorded = [r["mean_error"] for r in trace.records if np.isfinite(r["mean_error"])]
    assert model.fit_error == pytest.approx(min(recorded))
    assert abs(model.d1.k) <= 0.2 and abs(model.d2.k) <= 0.2


def test_fit_refinement_never_degrades(rng):
    p1 = _points(rng, 200)
    truth = _model(_sim(5, (10, 3)), 0.08, 0.02)
    p2 = truth.map_1_to_2(p1) + rng.normal(0, 1.0, p1.shape)
    model, trace = fit(CorrespondenceSet(p1, p2), FitConfig(mode="two"), META)
    linear = [r["mean_error"] for r in trace.records if r["estimator"] != "refine" and np.isfinite(r["mean_error"])]
    assert model.fit_error <= min(linear) + 1e-12
    assert trace.records[-1]["estimator"] == "refine"


def test_fit_deterministic(rng):
    p1 = _points(rng, 150)
    p2 = _model(_sim(5, (10, 3)), 0.05, 0.05, "one").map_1_to_2(p1) + rng.normal(0, 0.5, p1.shape)
    p2[:30] = _points(rng, 30)
    corr = CorrespondenceSet(p1, p2)
    a, ta = fit(corr, FitConfig(seed=3), META)
    b, tb = fit(corr, FitConfig(seed=3), META)
    assert a.to_json() == b.to_json()
    assert ta.to_json() == tb.to_json()


def test_trace_serialises():
    p = _fov_points(10)
    _, trace = fit(CorrespondenceSet(p, p + 2.0), FitConfig(), META)
    d = trace.to_dict()
    assert d["termination"] in ("converged", "stalled", "max-iter", "k-out-of-bounds")
    assert {"iteration", "mean_error", "k1", "k2", "estimator"} <= set(d["records"][0])

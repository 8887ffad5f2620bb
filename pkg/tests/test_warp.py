import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundusreg.features import CorrespondenceSet
from fundusreg.geometry import AffineHomography, RadialDistortion, RegistrationModel
from fundusreg.montage import GroundTruthDeformation, make_montage
from fundusreg.pipeline import PipelineConfig, prepare_image, register_prepared
from fundusreg.preprocess import FovMask, stabilise_colour
from fundusreg.synthetic import render_view
from fundusreg.warp import (WarpResult, composite, fov_overlap, mosaic_canvas, residual_stats, warp_image,
                            warp_mosaic)

SHAPE = (96, 128)


def _ramp_image(shape=SHAPE, channels=None, seed=0):
    rng = np.random.default_rng(seed)
    h, w = shape
    img = rng.random((h, w) if channels is None else (h, w, channels))
    return img


def _model(H, shape=SHAPE, k1=0.0, k2=0.0):
    h, w = shape
    return RegistrationModel(H, RadialDistortion.for_image(k1, w, h), RadialDistortion.for_image(k2, w, h),
                             "one" if k1 == k2 else "two")


def _smooth_scene(shape, period=90.0):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    base = 0.5 + 0.15 * np.sin(2 * np.pi * xx / period) * np.cos(2 * np.pi * yy / (1.3 * period))
    return np.stack([base, 0.8 * base, 0.5 + 0.1 * np.cos(2 * np.pi * (xx + yy) / period)], axis=-1)


def test_identity_warp_exact():
    img = _ramp_image(channels=3)
    res = warp_image(img, _model(AffineHomography.identity()), SHAPE)
    assert np.array_equal(res.warped, img)
    assert res.validity.all()
    assert res.overlap_fraction == 1.0


def test_identity_warp_bicubic_exact():
    img = _ramp_image()
    res = warp_image(img, _model(AffineHomography.identity()), SHAPE, order=3)
    assert np.allclose(res.warped, img, atol=1e-12)


def test_integer_translation():
    img = _ramp_image()
    res = warp_image(img, _model(AffineHomography(np.eye(2), [10.0, 0.0])), SHAPE)
    assert not res.validity[:, :10].any() and res.validity[:, 10:].all()
    assert np.array_equal(res.warped[:, 10:], img[:, :-10])
    assert np.all(res.warped[:, :10] == 0)


def test_fov_restricts_validity():
    img = _ramp_image()
    fov = FovMask.disc(SHAPE, (63.5, 47.5), 30)
    res = warp_image(img, _model(AffineHomography.identity()), SHAPE, fov1=fov)
    assert np.array_equal(res.validity, fov.mask)
    assert np.all(res.warped[~res.validity] == 0)


@given(st.floats(-20, 20), st.floats(-15, 15), st.floats(-0.3, 0.3), st.floats(-0.15, 0.15))
@settings(max_examples=25)
def test_overlap_consistent_with_masks(tx, ty, angle, k):
    img = _ramp_image()
    fov1 = FovMask.disc(SHAPE, (63.5, 47.5), 45)
    fov2 = FovMask.disc(SHAPE, (60.0, 50.0), 40)
    H = AffineHomography.similarity(angle, 1.0, (tx, ty), (63.5, 47.5))
    res = warp_image(img, _model(H, k1=k, k2=k), SHAPE, fov1, fov2)
    assert np.all(res.warped[~res.validity] == 0)
    inter = np.count_nonzero(res.validity & res.ref_mask)
    union = np.count_nonzero(res.validity | res.ref_mask)
    assert abs(res.overlap_fraction - (inter / union if union else 0.0)) < 1e-6
    assert 0.0 <= res.overlap_fraction <= 1.0


def test_fully_invalid_allowed():
    img = _ramp_image()
    res = warp_image(img, _model(AffineHomography(np.eye(2), [1000.0, 0.0])), SHAPE)
    assert not res.validity.any() and res.overlap_fraction == 0.0


def test_composite_difference_identical():
    img = _ramp_image(channels=3)
    res = warp_image(img, _model(AffineHomography.identity()), SHAPE)
    assert np.all(composite(res, img, "difference") == 0)


def test_composite_blend_black_white():
    black = np.zeros(SHAPE)
    res = warp_image(black, _model(AffineHomography(np.eye(2), [20.0, 0.0])), SHAPE)
    out = composite(res, np.ones(SHAPE), "blend")
    assert np.all(out[:, 20:] == 0.5)
    assert np.all(out[:, :20] == 1.0)


def test_composite_checkerboard_tiles():
    res = warp_image(np.zeros(SHAPE), _model(AffineHomography.identity()), SHAPE)
    out = composite(res, np.ones(SHAPE), "checker")
    yy, xx = np.mgrid[0:SHAPE[0], 0:SHAPE[1]]
    expected = np.where((yy // 32 + xx // 32) % 2 == 0, 0.0, 1.0)
    assert np.array_equal(out, expected)
    # boundaries only at multiples of 32
    cols = np.nonzero(np.diff(out[0]))[0] + 1
    assert set(cols) <= {32, 64, 96}


def test_composite_difference_stretched():
    img = _ramp_image()
    res = warp_image(img, _model(AffineHomography.identity()), SHAPE)
    out = composite(res, np.clip(img + 0.1 * (img > 0.5), 0, 1), "diff")
    assert out.max() == pytest.approx(1.0) and out.min() == 0.0


def test_composite_errors():
    res = warp_image(_ramp_image(), _model(AffineHomography.identity()), SHAPE)
    with pytest.raises(ValueError, match="dimension mismatch"):
        composite(res, np.zeros((10, 10)))
    with pytest.raises(ValueError):
        composite(res, np.zeros(SHAPE), "overlay")


def test_residual_stats_examples():
    model = _model(AffineHomography.identity())
    p = np.array([[10.0, 20.0], [30.0, 40.0]])
    s = residual_stats(model, CorrespondenceSet(p, p))
    assert s.mean == 0 and s.max == 0
    s = residual_stats(model, CorrespondenceSet(p[:1], p[:1] + [3.0, 0.0]))
    assert s.mean == 3.0 and s.std == 0.0 and s.count == 1
    assert s.rel_image_pct == pytest.approx(300 / np.hypot(*SHAPE[::-1]))
    with pytest.raises(ValueError):
        residual_stats(model, CorrespondenceSet(np.empty((0, 2)), np.empty((0, 2))))


def test_mosaic_canvas_contains_both():
    fov1 = FovMask.disc(SHAPE, (63.5, 47.5), 45)
    model = _model(AffineHomography(np.eye(2), [40.0, -10.0]))
    offset, (h, w) = mosaic_canvas(model, fov1, SHAPE)
    assert offset[0] <= 0 and offset[1] <= -10 + 47.5 - 45 + 1e-9
    assert offset[0] + w - 1 >= 63.5 + 45 + 40 - 1e-6
    res, ref = warp_mosaic(_ramp_image(), _ramp_image(seed=1), model, fov1, FovMask.full(SHAPE))
    assert res.warped.shape == ref.shape == (h, w)


def test_generating_model_resampling_only():
    # band-limited scene: any difference beyond bilinear resampling error is a model error
    shape = (300, 400)
    H = AffineHomography.similarity(np.deg2rad(6), 1.03, (25.0, -12.0), (199.5, 149.5))
    model = _model(H, shape, -0.06, -0.04)
    scene = _smooth_scene((500, 600))
    off = np.array([100.0, 100.0])
    fov = FovMask.disc(shape, (199.5, 149.5), 140)
    img1, _ = render_view(scene, shape, lambda p: model.d1.undistort(p) + off, fov, vignette=0)
    Hinv = H.inverse()
    img2, _ = render_view(scene, shape, lambda p: Hinv.apply(model.d2.undistort(p)) + off, fov, vignette=0)
    res = warp_image(img1, model, shape, fov, fov)
    both = res.validity & res.ref_mask
    assert both.sum() > 0.5 * fov.mask.sum()
    assert np.abs(res.warped - img2)[both].mean() < 1e-3


@pytest.fixture(scope="module")
def fitted_montage():
    deform = GroundTruthDeformation(shape1=(512, 768))
    mont = make_montage(deform, seed=2)
    cfg = PipelineConfig()
    p1, p2 = prepare_image(mont.img1, cfg, mont.fov1), prepare_image(mont.img2, cfg, mont.fov2)
    return mont, p1, p2, register_prepared(p1, p2, cfg)


def test_fitted_montage_difference(fitted_montage):
    mont, p1, p2, reg = fitted_montage
    res = warp_image(p1.image, reg.model, mont.img2.shape, mont.fov1, mont.fov2)
    both = res.validity & res.ref_mask
    assert np.abs(res.warped - p2.image)[both].mean() < 0.05


def test_fitted_overlap_matches_truth(fitted_montage):
    mont, _, _, reg = fitted_montage
    assert fov_overlap(reg.model, mont.fov1, mont.fov2) == pytest.approx(mont.overlap, abs=0.01)


def test_warp_runtime_scales_linearly():
    img = _ramp_image((400, 600), 3)
    model = _model(AffineHomography.similarity(0.1, 1.0, (5, 5), (299.5, 199.5)), (400, 600), 0.05, 0.05)
    times = []
    for shape in ((200, 300), (400, 600)):
        t0 = time.perf_counter()
        warp_image(img, model, shape)
        times.append(time.perf_counter() - t0)
    # four times the pixels; allow generous slack for timer noise
    assert times[1] < 10 * times[0] + 0.05

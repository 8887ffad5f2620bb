import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundusreg.errors import ImageLoadError, NoFOVError
from fundusreg.preprocess import (FovMask, TARGET_MEAN, TARGET_STD, detect_fov, load_image, save_image,
                                  stabilise_colour, validate_image)
from fundusreg.synthetic import synthetic_fundus


@pytest.fixture(scope="module")
def fundus():
    return synthetic_fundus((192, 256), seed=5)


# --- loading -----------------------------------------------------------------

def test_load_8bit_endpoints(tmp_path):
    raw = np.zeros((64, 64), np.uint8)
    raw[0, 0] = 255
    cv2.imwrite(str(tmp_path / "a.png"), raw)
    img = load_image(tmp_path / "a.png")
    assert img[0, 0] == 1.0 and img[1, 1] == 0.0


def test_load_16bit_scaling(tmp_path):
    raw = np.full((64, 64), 32768, np.uint16)
    cv2.imwrite(str(tmp_path / "a.png"), raw)
    assert load_image(tmp_path / "a.png")[5, 5] == pytest.approx(32768 / 65535)


def test_load_colour_is_rgb(tmp_path):
    img = np.zeros((64, 64, 3))
    img[..., 0] = 1.0  # red
    save_image(tmp_path / "c.png", img)
    out = load_image(tmp_path / "c.png")
    assert out[0, 0].tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("suffix", [".png", ".tif", ".bmp", ".jpg"])
def test_save_load_formats(tmp_path, suffix):
    img = np.tile(np.linspace(0, 1, 64), (64, 1))
    save_image(tmp_path / f"g{suffix}", img)
    assert np.abs(load_image(tmp_path / f"g{suffix}") - img).max() < 0.05


def test_load_errors(tmp_path):
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "x.gif").write_bytes(b"GIF89a")
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "x.gif")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "junk.png")
    cv2.imwrite(str(tmp_path / "small.png"), np.zeros((32, 80), np.uint8))
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "small.png")


def test_validate_rejects_non_finite():
    img = np.zeros((64, 64))
    img[3, 3] = np.nan
    with pytest.raises(ImageLoadError):
        validate_image(img)


# --- FOV ---------------------------------------------------------------------

def _disc_image(shape, centre, radius, value=1.0):
    return FovMask.disc(shape, centre, radius).mask * float(value)


def test_detect_fov_synthetic_disc():
    fov = detect_fov(_disc_image((512, 512), (256, 256), 200))
    assert np.linalg.norm(fov.centre - [256, 256]) < 2
    assert abs(fov.radius - 200) < 2


def test_detect_fov_black_image():
    with pytest.raises(NoFOVError):
        detect_fov(np.zeros((128, 128)))


def test_detect_fov_disc_touching_edge():
    img = _disc_image((400, 600), (300, 200), 230)  # cut at top and bottom
    fov = detect_fov(img)
    assert fov.mask.shape == (400, 600)
    assert abs(fov.radius - 230) < 3
    assert np.linalg.norm(fov.centre - [300, 200]) < 3


def test_detect_fov_on_fundus(fundus):
    img, truth = fundus
    fov = detect_fov(img)
    assert np.linalg.norm(fov.centre - truth.centre) < 2
    assert abs(fov.radius - truth.radius) < 2


@given(st.floats(0.5, 1.0))
@settings(max_examples=10)
def test_detect_fov_gain_invariant(gain):
    img, _ = synthetic_fundus((192, 256), seed=5)
    a, b = detect_fov(img), detect_fov(img * gain)
    assert np.linalg.norm(a.centre - b.centre) < 2
    assert abs(a.radius - b.radius) < 2


def test_fov_contains():
    fov = FovMask.disc((100, 100), (50, 50), 20)
    assert fov.contains([[50, 50], [69, 50], [71, 50], [-1, 50]]).tolist() == [True, True, False, False]


# --- colour stabilisation ----------------------------------------------------

def _stats(out, fov):
    v = out[fov.mask]
    return v.mean(), v.std()


def test_stabilise_standardised_input_is_fixed(fundus):
    img, fov = fundus
    rng = np.random.default_rng(0)
    g = np.where(fov.mask, np.clip(rng.normal(0.5, 0.15, fov.mask.shape), 0, 1), 0)
    m, s = _stats(stabilise_colour(g, fov), fov)
    assert abs(m - 0.5) < 0.01 and abs(s - 0.15) < 0.01


def test_stabilise_targets_and_mask(fundus):
    img, fov = fundus
    out = stabilise_colour(img, fov)
    assert np.all(out[~fov.mask] == 0)
    assert out.min() >= 0 and out.max() <= 1
    for c in range(3):
        v = out[..., c][fov.mask]
        assert abs(v.mean() - TARGET_MEAN) < 1e-3 and abs(v.std() - TARGET_STD) < 1e-3


def test_stabilise_removes_linear_gradient(fundus):
    img, fov = fundus
    h, w = fov.mask.shape
    ramp = np.linspace(-0.15, 0.15, w)[None, :, None]
    a = stabilise_colour(img, fov)
    b = stabilise_colour(img + ramp, fov)
    assert np.abs(a - b)[fov.mask].mean() < 0.05


@pytest.mark.parametrize("shape,seed", [((192, 256), 5), ((128, 160), 1), ((160, 160), 2), ((256, 384), 3)])
def test_stabilise_idempotent(shape, seed):
    img, fov = synthetic_fundus(shape, seed=seed)
    once = stabilise_colour(img, fov)
    twice = stabilise_colour(once, fov)
    assert np.abs(twice - once)[fov.mask].max() < 0.02


@given(st.floats(0.5, 1.5), st.floats(-0.2, 0.2))
@settings(max_examples=8)
def test_stabilise_affine_invariant(gain, offset):
    img, fov = synthetic_fundus((128, 160), seed=2)
    a = stabilise_colour(img, fov)
    b = stabilise_colour(gain * img + offset, fov)
    assert np.abs(a - b)[fov.mask].max() < 0.05


def test_stabilise_grayscale_and_constant():
    fov = FovMask.disc((96, 96), (48, 48), 40)
    out = stabilise_colour(np.full((96, 96), 0.3), fov)
    assert out.ndim == 2
    assert np.all(out[fov.mask] == TARGET_MEAN)

"""Image loading, field-of-view detection and colour stabilisation.

Images are float64 numpy arrays in ``[0, 1]``, shape ``(h, w)`` or ``(h, w, 3)``
with RGB channel order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.interpolate import BSpline

from .errors import ImageLoadError, NoFOVError

log = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
MIN_SIZE = 64

TARGET_MEAN = 0.5
TARGET_STD = 0.15


@dataclass(frozen=True, eq=False)
class FovMask:
    mask: np.ndarray
    centre: np.ndarray  # (x, y) pixels
    radius: float

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def disc(cls, shape, centre, radius) -> "FovMask":
        h, w = shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        c = np.asarray(centre, dtype=float)
        mask = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= radius ** 2
        return cls(mask, c, float(radius))

    @classmethod
    def full(cls, shape) -> "FovMask":
        h, w = shape[:2]
        return cls(np.ones((h, w), bool), np.array([(w - 1) / 2, (h - 1) / 2]),
                   float(np.hypot(w, h) / 2))

    def contains(self, points) -> np.ndarray:
        """True for points inside the disc and inside the image."""
        p = np.asarray(points, dtype=float)
        h, w = self.mask.shape
        inside = (p[..., 0] >= 0) & (p[..., 0] <= w - 1) & (p[..., 1] >= 0) & (p[..., 1] <= h - 1)
        d2 = np.sum((p - self.centre) ** 2, axis=-1)
        return inside & (d2 <= self.radius ** 2)


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ImageLoadError(f"unsupported image shape {img.shape}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ImageLoadError(f"image {img.shape[1]}x{img.shape[0]} smaller than {MIN_SIZE}x{MIN_SIZE}")
    if not np.all(np.isfinite(img)):
        raise ImageLoadError("image has non-finite samples")
    return np.clip(img, 0.0, 1.0)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageLoadError(f"no such file: {path}")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageLoadError(f"unsupported format: {path.suffix}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.size == 0:
        raise ImageLoadError(f"unreadable image: {path}")
    if raw.dtype == np.uint8:
        img = raw / 255.0
    elif raw.dtype == np.uint16:
        img = raw / 65535.0
    elif np.issubdtype(raw.dtype, np.floating):
        img = raw.astype(float)
    else:
        raise ImageLoadError(f"unsupported sample type {raw.dtype}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        if img.shape[2] == 3:
            img = img[..., ::-1]
    return validate_image(np.ascontiguousarray(img))


def save_image(path, img: np.ndarray, depth: int = 8) -> None:
    img = np.clip(np.asarray(img, dtype=float), 0, 1)
    if depth == 16:
        out = np.round(img * 65535).astype(np.uint16)
    else:
        out = np.round(img * 255).astype(np.uint8)
    if out.ndim == 3:
        out = np.ascontiguousarray(out[..., ::-1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise ImageLoadError(f"could not write {path}")


def to_gray(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img.mean(axis=2)


def _fit_circle(xs, ys):
    """Algebraic least-squares circle through boundary samples."""
    M = np.column_stack([xs, ys, np.ones_like(xs)])
    rhs = xs ** 2 + ys ** 2
    (a, b, c), *_ = np.linalg.lstsq(M, rhs, rcond=None)
    cx, cy = a / 2, b / 2
    return np.array([cx, cy]), float(np.sqrt(max(c + cx ** 2 + cy ** 2, 0.0)))


def detect_fov(img: np.ndarray) -> FovMask:
    """Bright retinal disc: Otsu threshold, largest component, circle fit on its rim.

    Rim pixels lying on the image border are ignored so a disc clipped by the
    frame still gets its true centre and radius.
    """
    img = validate_image(img)
    # brightest channel keeps dark vessels above the background level
    gray = img if img.ndim == 2 else img.max(axis=2)
    lo, hi = np.percentile(gray, [1, 99])
    if hi - lo < 0.02:
        raise NoFOVError("no FOV: image is nearly uniform")
    g8 = np.round(np.clip((gray - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)
    _, binary = cv2.threshold(g8, 0, 1, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    binary = cv2.morphologyEx(binary, cv2.MORPH_OPEN, np.ones((5, 5), np.uint8))
    n, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
    if n < 2:
        raise NoFOVError("no FOV: no bright region")
    best = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    area = stats[best, cv2.CC_STAT_AREA]
    h, w = gray.shape
    if area < 0.01 * h * w:
        raise NoFOVError("no FOV: bright region too small")
    comp = (labels == best).astype(np.uint8)
    comp = cv2.morphologyEx(comp, cv2.MORPH_CLOSE, np.ones((15, 15), np.uint8))
    contours, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    rim = max(contours, key=len)[:, 0, :].astype(float)
    interior = (rim[:, 0] > 0) & (rim[:, 0] < w - 1) & (rim[:, 1] > 0) & (rim[:, 1] < h - 1)
    if interior.sum() >= 16:
        centre, radius = _fit_circle(rim[interior, 0], rim[interior, 1])
    else:
        (cx, cy), radius = cv2.minEnclosingCircle(rim.astype(np.float32))
        centre = np.array([cx, cy])
    if not (0 <= centre[0] < w and 0 <= centre[1] < h) or radius <= 0:
        raise NoFOVError("no FOV: disc centre outside image")
    return FovMask.disc(gray.shape, centre, radius)


def _spline_basis(n: int, spacing: float) -> np.ndarray:
    """Cubic B-spline design matrix on pixel positions ``0..n-1``, knots every ``spacing``."""
    intervals = max(1, int(np.ceil((n - 1) / spacing)))
    inner = np.linspace(0.0, n - 1.0, intervals + 1)
    knots = np.concatenate([[inner[0]] * 3, inner, [inner[-1]] * 3])
    return BSpline.design_matrix(np.arange(n, dtype=float), knots, 3).toarray()


class _SplineSurface:
    """Least-squares cubic-spline surface fits over a fixed sample grid of the mask.

    A fit is a projection (refitting its own residual on the same samples
    gives zero), and affine intensity changes or added linear gradients are
    absorbed exactly.
    """

    def __init__(self, mask: np.ndarray, spacing: float):
        h, w = mask.shape
        self.By, self.Bx = _spline_basis(h, spacing), _spline_basis(w, spacing)
        step = max(1, int(spacing // 16))
        sub = np.zeros_like(mask)
        sub[::step, ::step] = True
        ys, xs = np.nonzero(mask & sub)
        if len(ys) < 4 * self.By.shape[1] * self.Bx.shape[1]:
            ys, xs = np.nonzero(mask)
        self.ys, self.xs = ys, xs
        self.design = (self.By[ys][:, :, None] * self.Bx[xs][:, None, :]).reshape(len(ys), -1)

    def fit(self, channel: np.ndarray, use: np.ndarray) -> np.ndarray:
        keep = use[self.ys, self.xs]
        D = self.design[keep]
        rhs = channel[self.ys[keep], self.xs[keep]]
        # normal equations are small (one row/column per basis function);
        # lstsq gives the minimum-norm answer when some basis has no support
        coef, *_ = np.linalg.lstsq(D.T @ D, D.T @ rhs, rcond=1e-13)
        return self.By @ coef.reshape(self.By.shape[1], self.Bx.shape[1]) @ self.Bx.T


def illumination_field(channel: np.ndarray, mask: np.ndarray, spacing: float) -> np.ndarray:
    """Smooth illumination surface of one channel, fitted over ``mask``."""
    return _SplineSurface(mask, spacing).fit(channel, mask)


def _standardise(vals: np.ndarray, iters: int = 30):
    """Affine ``(a, b)`` such that ``clip(a + b * vals, 0, 1)`` has the target mean and std.

    Solving for the clipped statistics (rather than rescaling and then
    clipping) keeps a second pass over the output a fixed point.
    """
    mu, sd = vals.mean(), vals.std()
    a, b = TARGET_MEAN - TARGET_STD * mu / sd, TARGET_STD / sd
    for _ in range(iters):
        out = np.clip(a + b * vals, 0, 1)
        m, s = out.mean(), out.std()
        if abs(m - TARGET_MEAN) < 1e-7 and abs(s - TARGET_STD) < 1e-7:
            break
        # rescale about the current mean, then shift
        centre = (m - a) / b
        b *= TARGET_STD / s
        a = TARGET_MEAN - b * centre
    return a, b


def stabilise_colour(img: np.ndarray, mask: FovMask, kernel_fraction: float = 0.25,
                     max_refits: int = 20) -> np.ndarray:
    """Remove the low-frequency illumination field and standardise each channel in the FOV.

    The field is a smooth surface with knot spacing ``kernel_fraction * radius``
    (see :func:`illumination_field`); it is subtracted, then in-mask samples
    are affinely rescaled and clipped to ``[0, 1]`` so that they have mean 0.5
    and standard deviation 0.15.  Outside the mask the output is 0.  Inputs need not be clipped
    to ``[0, 1]``.
    """
    img = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(img)):
        raise ImageLoadError("image has non-finite samples")
    m = mask.mask
    spacing = max(kernel_fraction * mask.radius, 4.0)
    surface = _SplineSurface(m, spacing)
    chans = img[..., None] if img.ndim == 2 else img
    out = np.zeros(chans.shape)
    for c in range(chans.shape[2]):
        ch = chans[..., c]
        vals = ch[m]
        if vals.std() < 1e-12:
            out[..., c][m] = TARGET_MEAN
            continue
        # Saturated samples are left out of the field fit.  Starting from the
        # input's own clipped plateaus means a pass over an already stabilised
        # image fits on exactly the samples the first pass used.
        use = m.copy()
        for v in (vals.min(), vals.max()):
            if np.count_nonzero(vals == v) > 1:
                use &= ch != v
        for it in range(max_refits):
            detail = ch - surface.fit(ch, use)
            a, b = _standardise(detail[m])
            res = a + b * detail
            unsat = m & (res > 0) & (res < 1)
            if np.array_equal(unsat, use):
                break
            use = unsat
        log.debug("channel %d: field refits %d", c, it + 1)
        out[..., c] = np.where(m, np.clip(res, 0, 1), 0.0)
    return out[..., 0] if img.ndim == 2 else out

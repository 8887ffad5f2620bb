"""Procedural fundus-like scenes for tests and montage experiments.

A scene is a flat RGB raster (choroidal texture, a branching vessel tree,
optic disc, macula).  Views are rendered by inverse-mapping each view pixel
into scene coordinates, so any geometric deformation can be applied exactly.
"""
from __future__ import annotations

import cv2
import numpy as np
from scipy import ndimage

from .preprocess import FovMask

FOV_RADIUS_FRACTION = 0.48
_BASE_RGB = np.array([0.80, 0.42, 0.20])


def _band_noise(rng, shape, sigma):
    n = rng.standard_normal(shape).astype(np.float32)
    n = cv2.GaussianBlur(n, (0, 0), sigma)
    return n / (n.std() + 1e-12)


def _grow_vessel(rng, canvas, start, angle, width, unit, depth=0):
    h, w = canvas.shape
    x, y = start
    step = 9.0 * unit
    curl = rng.normal(0, 0.02)
    while width >= 1.2 * unit and -50 * unit < x < w + 50 * unit and -50 * unit < y < h + 50 * unit:
        curl = 0.85 * curl + rng.normal(0, 0.035)
        angle += curl
        nx, ny = x + step * np.cos(angle), y + step * np.sin(angle)
        cv2.line(canvas, (int(round(x * 4)), int(round(y * 4))), (int(round(nx * 4)), int(round(ny * 4))),
                 255, max(1, int(round(width))), cv2.LINE_AA, shift=2)
        x, y = nx, ny
        width *= 0.996
        if depth < 7 and rng.random() < 0.035:
            side = rng.choice([-1.0, 1.0])
            child_w = width * rng.uniform(0.55, 0.75)
            _grow_vessel(rng, canvas, (x, y), angle + side * rng.uniform(0.5, 1.1), child_w, unit, depth + 1)
            width *= 0.85
            angle -= side * rng.uniform(0.05, 0.25)


def fundus_scene(shape, seed=0, unit=None) -> np.ndarray:
    """RGB scene of ``shape = (h, w)`` with features sized relative to ``unit``.

    ``unit`` defaults to ``min(h, w) / 1568`` so the texture scale matches a
    1568-line fundus photograph.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    unit = min(h, w) / 1568 if unit is None else unit
    tex = (0.045 * _band_noise(rng, (h, w), max(2.5 * unit, 1.2))
           + 0.05 * _band_noise(rng, (h, w), max(7 * unit, 2.0))
           + 0.06 * _band_noise(rng, (h, w), max(20 * unit, 3.0)))

    vessels = np.zeros((h, w), np.uint8)
    disc = np.array([w / 2 + rng.uniform(-0.15, 0.15) * min(h, w), h / 2 + rng.uniform(-0.1, 0.1) * h])
    for a in np.linspace(0, 2 * np.pi, 9)[:-1] + rng.uniform(0, 0.7):
        _grow_vessel(rng, vessels, tuple(disc), a, 15 * unit * rng.uniform(0.7, 1.0), unit)
    # isolated secondary vessels fill the periphery
    for _ in range(int(round(8 * h * w / (1568 * 2352 * unit ** 2))) + 2):
        p = (rng.uniform(0, w), rng.uniform(0, h))
        _grow_vessel(rng, vessels, p, rng.uniform(0, 2 * np.pi), 6 * unit * rng.uniform(0.6, 1.0), unit, depth=4)
    v = cv2.GaussianBlur(vessels.astype(np.float32) / 255, (0, 0), max(0.8 * unit, 0.6))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    r_disc = 0.06 * min(h, w)
    od = np.exp(-((xx - disc[0]) ** 2 + (yy - disc[1]) ** 2) / (2 * r_disc ** 2))
    mac_c = disc + np.array([0.32 * min(h, w), 0.02 * h])
    mac = np.exp(-((xx - mac_c[0]) ** 2 + (yy - mac_c[1]) ** 2) / (2 * (1.5 * r_disc) ** 2))

    scene = np.empty((h, w, 3))
    darken = np.array([0.28, 0.5, 0.38])
    for c in range(3):
        ch = _BASE_RGB[c] * (1 + tex) * (1 - darken[c] * v)
        ch = ch + 0.35 * od * (1 - 0.5 * v) - 0.12 * mac * _BASE_RGB[c]
        scene[..., c] = ch
    return np.clip(scene, 0, 1)


def render_view(scene: np.ndarray, shape, to_scene, fov: FovMask = None,
                vignette: float = 0.25, gain=(1.0, 1.0, 1.0), noise: float = 0.0, seed=0):
    """Render a view of ``scene`` into an image of ``shape = (h, w)``.

    ``to_scene`` maps an ``(N, 2)`` array of view pixel positions to scene
    pixel positions (NaN for unmappable points).  Returns ``(image, fov)``.
    """
    h, w = shape
    if fov is None:
        fov = FovMask.disc((h, w), ((w - 1) / 2, (h - 1) / 2), FOV_RADIUS_FRACTION * min(h, w))
    ys, xs = np.nonzero(fov.mask)
    src = to_scene(np.column_stack([xs, ys]).astype(float))
    ok = np.all(np.isfinite(src), axis=1)
    src = np.where(ok[:, None], src, -1e6)
    img = np.zeros((h, w, 3))
    rr = ((xs - fov.centre[0]) ** 2 + (ys - fov.centre[1]) ** 2) / fov.radius ** 2
    shade = 1 - vignette * rr
    for c in range(3):
        vals = ndimage.map_coordinates(scene[..., c], [src[:, 1], src[:, 0]], order=1, cval=0.0)
        img[ys, xs, c] = vals * shade * gain[c]
    if noise > 0:
        rng = np.random.default_rng(seed)
        img[ys, xs] += rng.normal(0, noise, (len(xs), 3))
    return np.clip(img, 0, 1), fov


def synthetic_fundus(shape=(512, 512), seed=0, vignette=0.25, unit=None):
    """A single fundus-like image with a centred circular FOV; returns ``(image, fov)``."""
    h, w = shape
    pad = int(0.1 * max(h, w))
    scene = fundus_scene((h + 2 * pad, w + 2 * pad), seed, unit=unit if unit else min(h, w) / 1568)
    return render_view(scene, shape, lambda p: p + pad, vignette=vignette)

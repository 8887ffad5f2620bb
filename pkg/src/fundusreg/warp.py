"""Inverse warping of image 1 into the frame of image 2, composites and residual statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .features import CorrespondenceSet
from .geometry import RegistrationModel
from .preprocess import FovMask

CHECKER_TILE = 32
COMPOSITE_MODES = ("blend", "checkerboard", "difference")
_MODE_ALIASES = {"checker": "checkerboard", "diff": "difference"}


@dataclass(eq=False)
class WarpResult:
    warped: np.ndarray
    validity: np.ndarray
    overlap_fraction: float
    # canvas pixel (x, y) sits at reference-frame position (x, y) + offset
    offset: np.ndarray = None
    ref_mask: np.ndarray = None


def _target_grid(shape, offset):
    h, w = shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    return np.column_stack([xs.ravel() + offset[0], ys.ravel() + offset[1]]).astype(float)


def _overlap(valid, ref_mask) -> float:
    union = np.count_nonzero(valid | ref_mask)
    return np.count_nonzero(valid & ref_mask) / union if union else 0.0


def warp_image(img1: np.ndarray, model: RegistrationModel, target_shape, fov1: FovMask = None,
               ref_fov: FovMask = None, offset=(0.0, 0.0), order: int = 1) -> WarpResult:
    """Resample ``img1`` on the pixel grid of ``target_shape`` through ``map_2_to_1``.

    ``order=1`` is bilinear, ``order=3`` bicubic.  A target pixel is valid when
    its source position lies inside ``fov1`` (the whole of image 1 if not
    given).  ``ref_fov`` is the reference FOV in the reference frame; the
    overlap fraction is ``|valid & ref| / |valid | ref|`` on the target grid.
    """
    h, w = target_shape[:2]
    offset = np.asarray(offset, dtype=float)
    fov1 = FovMask.full(img1.shape) if fov1 is None else fov1
    src = model.map_2_to_1(_target_grid((h, w), offset), strict=False)
    finite = np.all(np.isfinite(src), axis=1)
    valid = finite.copy()
    valid[finite] = fov1.contains(src[finite])
    src = np.where(valid[:, None], src, 0.0)
    # round-off from the normalise/denormalise round trip would otherwise blur integer-grid samples
    near = np.round(src)
    src = np.where(np.abs(src - near) < 1e-9, near, src)
    coords = [src[:, 1], src[:, 0]]

    chans = img1[..., None] if img1.ndim == 2 else img1
    out = np.zeros((h * w, chans.shape[2]))
    for c in range(chans.shape[2]):
        vals = ndimage.map_coordinates(chans[..., c], coords, order=order, mode="nearest", prefilter=order > 1)
        out[:, c] = np.where(valid, vals, 0.0)
    out = out.reshape(h, w, -1)
    if img1.ndim == 2:
        out = out[..., 0]
    valid = valid.reshape(h, w)

    if ref_fov is None:
        ref_mask = np.ones((h, w), bool)
    else:
        ref_mask = ref_fov.contains(_target_grid((h, w), offset)).reshape(h, w)
    return WarpResult(out, valid, _overlap(valid, ref_mask), offset, ref_mask)


def mosaic_canvas(model: RegistrationModel, fov1: FovMask, ref_shape, samples: int = 64):
    """Bounding box of the reference image and the mapped image-1 FOV rim.

    Returns ``(offset, (h, w))`` where ``offset`` is the reference-frame
    position of canvas pixel (0, 0).  The rim is sampled along the circle
    because radial distortion bends straight edges.
    """
    t = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    rim = fov1.centre + fov1.radius * np.column_stack([np.cos(t), np.sin(t)])
    mapped = model.map_1_to_2(rim, strict=False)
    mapped = mapped[np.all(np.isfinite(mapped), axis=1)]
    h2, w2 = ref_shape[:2]
    pts = np.vstack([mapped, [[0, 0], [w2 - 1, h2 - 1]]])
    lo = np.floor(pts.min(axis=0))
    hi = np.ceil(pts.max(axis=0))
    size = (hi - lo).astype(int) + 1
    return lo, (int(size[1]), int(size[0]))


def place_reference(ref: np.ndarray, offset, canvas_shape) -> np.ndarray:
    """Copy ``ref`` onto a zero canvas whose pixel (0, 0) is reference position ``offset``."""
    out = np.zeros(tuple(canvas_shape[:2]) + ref.shape[2:])
    ox, oy = (-np.asarray(offset)).astype(int)
    h, w = ref.shape[:2]
    out[oy:oy + h, ox:ox + w] = ref
    return out


def warp_mosaic(img1: np.ndarray, img2: np.ndarray, model: RegistrationModel, fov1: FovMask,
                fov2: FovMask, order: int = 1):
    """Warp image 1 onto the joint canvas; returns ``(WarpResult, reference on canvas)``."""
    offset, shape = mosaic_canvas(model, fov1, img2.shape)
    res = warp_image(img1, model, shape, fov1, fov2, offset, order)
    ref = place_reference(img2, offset, shape)
    return res, ref


def composite(warped: WarpResult, ref: np.ndarray, mode: str = "blend", tile: int = CHECKER_TILE) -> np.ndarray:
    """Comparison rendering of a warp result against the reference image.

    blend: average in the overlap, the single available source elsewhere.
    checkerboard: ``tile``-pixel squares alternating between the sources.
    difference: ``|warped - ref|`` stretched to [0, 1] in the overlap, 0 elsewhere.
    """
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in COMPOSITE_MODES:
        raise ValueError(f"unknown composite mode {mode!r}")
    w = warped.warped
    if w.shape != ref.shape:
        raise ValueError(f"dimension mismatch: {w.shape} vs {ref.shape}")
    valid = warped.validity
    ref_mask = warped.ref_mask if warped.ref_mask is not None else np.ones(valid.shape, bool)
    both = valid & ref_mask
    if ref.ndim == 3:
        valid, ref_mask, both = valid[..., None], ref_mask[..., None], both[..., None]

    if mode == "blend":
        return np.where(both, 0.5 * (w + ref), np.where(valid, w, ref))
    if mode == "checkerboard":
        h, wd = valid.shape[:2]
        yy, xx = np.mgrid[0:h, 0:wd]
        first = ((yy // tile + xx // tile) % 2 == 0)
        if ref.ndim == 3:
            first = first[..., None]
        return np.where(first & valid, w, np.where(ref_mask, ref, np.where(valid, w, 0.0)))
    diff = np.where(both, np.abs(w - ref), 0.0)
    peak = diff.max()
    return diff / peak if peak > 0 else diff


def fov_overlap(model: RegistrationModel, fov1: FovMask, fov2: FovMask, step: float = 4.0) -> float:
    """Shared FOV area over the union of both FOVs (in image-2 frame), on a ``step``-px grid.

    Image-1 pixels are counted where they land; the union covers the mapped
    image-1 disc even where it leaves image 2's frame.
    """
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    rim = fov1.centre + fov1.radius * np.column_stack([np.cos(t), np.sin(t)])
    mapped = model.map_1_to_2(rim, strict=False)
    mapped = mapped[np.all(np.isfinite(mapped), axis=1)]
    r2 = fov2.centre + fov2.radius * np.column_stack([np.cos(t), np.sin(t)])
    pts = np.vstack([mapped, r2])
    lo, hi = pts.min(axis=0) - step, pts.max(axis=0) + step
    xs = np.arange(lo[0], hi[0], step)
    ys = np.arange(lo[1], hi[1], step)
    grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    in2 = np.sum((grid - fov2.centre) ** 2, axis=1) <= fov2.radius ** 2
    src = model.map_2_to_1(grid, strict=False)
    in1 = np.all(np.isfinite(src), axis=1)
    in1[in1] = np.sum((src[in1] - fov1.centre) ** 2, axis=1) <= fov1.radius ** 2
    union = np.count_nonzero(in1 | in2)
    return np.count_nonzero(in1 & in2) / union if union else 0.0


class ResidualStats(NamedTuple):
    mean: float
    std: float
    max: float
    rel_image_pct: float
    count: int


def image_diagonal(model: RegistrationModel) -> float:
    """Diagonal of image 2, recovered from its optic centre ``((w-1)/2, (h-1)/2)``."""
    w, h = 2 * model.d2.centre + 1
    return float(np.hypot(w, h))


def residual_stats(model: RegistrationModel, corr: CorrespondenceSet,
                   diagonal: Optional[float] = None) -> ResidualStats:
    """Mean, (population) std and max transfer error in pixels, and the mean as % of the diagonal."""
    if corr.count == 0:
        raise ValueError("empty correspondence set")
    e = np.linalg.norm(model.map_1_to_2(corr.p1, strict=False) - corr.p2, axis=1)
    e = np.where(np.isfinite(e), e, np.inf)
    diagonal = image_diagonal(model) if diagonal is None else diagonal
    mean = float(e.mean())
    return ResidualStats(mean, float(e.std()), float(e.max()), 100.0 * mean / diagonal, int(corr.count))

"""Simulated montages with known deformation, for validating the whole pipeline.

A procedural scene plays the role of the flattened retina.  Image 1 sees it
through radial distortion ``d1``; image 2 sees it through an affine map and
distortion ``d2``.  Scene position ``X`` of an image-1 pixel ``P1`` is
``undistort(P1, d1) + o`` and of an image-2 pixel ``P2`` is
``H^-1(undistort(P2, d2)) + o``, so the true image-1 to image-2 mapping is
exactly ``RegistrationModel(H, d1, d2).map_1_to_2``.

The distortion coefficient comes from eye-ball geometry: the eye radius is
the FOV disc radius over the camera half-angle, and ``k`` is chosen so the
division model reproduces the spherical projection's displacement at the
FOV rim.

With ``projection="eye"`` the pair is instead two orthographic views of a
spherical retina: the camera stays put and the eye rotates between the
examinations.  That mapping is not an affine map between radial
distortions, so the fitted model carries a residual that grows towards the
rim, as with real fundus pairs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from .features import CorrespondenceSet
from .errors import OutsideInvertibleRange
from .geometry import AffineHomography, RadialDistortion, RegistrationModel, image_centre, rotation
from .preprocess import FovMask
from .synthetic import FOV_RADIUS_FRACTION, fundus_scene, render_view
from .warp import fov_overlap, image_diagonal

CAMERA_FIELD_DEG = 45.0
VESSEL_CALIBRE_PX = 30.0
PROJECTIONS = ("division", "eye")


class MontageError(ValueError):
    pass


def eye_radius(fov_radius: float, field_deg: float = CAMERA_FIELD_DEG) -> float:
    """Eye-ball radius in pixels: disc radius over the half field angle in radians."""
    return fov_radius / np.deg2rad(field_deg / 2)


def radial_k_from_geometry(fov_radius: float, norm_scale: float, field_deg: float = CAMERA_FIELD_DEG) -> float:
    """Normalised division-model ``k`` matching spherical projection at the FOV rim.

    A retinal arc of length ``s`` images at radius ``R sin(s / R)``.  The rim
    (image radius ``fov_radius``) therefore comes from arc length
    ``s_rim = R asin(fov_radius / R)``, and undistorting the rim must give
    ``s_rim``: ``1 + k r^2 = fov_radius / s_rim`` with ``r`` the normalised
    rim radius.
    """
    R = eye_radius(fov_radius, field_deg)
    s_rim = R * np.arcsin(fov_radius / R)
    r = fov_radius / norm_scale
    return float((fov_radius / s_rim - 1) / r ** 2)


def default_fov(shape) -> FovMask:
    h, w = shape[:2]
    return FovMask.disc((h, w), image_centre(w, h), FOV_RADIUS_FRACTION * min(h, w))


@dataclass(frozen=True)
class GroundTruthDeformation:
    """Recipe for a montage pair.

    The affine part is ``R(rotation) @ [[s (1 + a/2), shear], [0, s (1 - a/2)]]``
    about the image centres, shifted along ``shift_angle_deg`` until the FOV
    overlap equals ``overlap_target``.  ``k1``/``k2`` default to the 45-degree
    eye geometry of each image.

    For ``projection="eye"`` the shift towards ``shift_angle_deg`` is split:
    ``eye_rotation_share`` of it comes from turning the eye, the rest from
    cropping image 2.  The affine part acts in image 2's plane and
    ``k1``/``k2`` are unused: camera 1 has a 45-degree field and camera 2
    ``field2_deg``.
    """

    shape1: tuple = (1568, 2352)
    shape2: Optional[tuple] = None
    rotation_deg: float = 5.0
    scale: float = 1.0
    anisotropy: float = 0.004
    shear: float = 0.002
    shift_angle_deg: float = 30.0
    overlap_target: float = 0.8
    k1: Optional[float] = None
    k2: Optional[float] = None
    grid: int = 16
    projection: str = "division"
    field2_deg: float = CAMERA_FIELD_DEG  # second camera, eye projection only
    eye_rotation_share: float = 0.5  # eye projection: part of the shift due to the eye turning

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if not 0.0 <= self.eye_rotation_share <= 1.0:
            raise ValueError("eye_rotation_share must be in [0, 1]")

    @property
    def image2_shape(self):
        return tuple(self.shape2) if self.shape2 is not None else tuple(self.shape1)

    def linear_part(self) -> np.ndarray:
        a = self.anisotropy
        S = np.array([[self.scale * (1 + a / 2), self.shear], [0.0, self.scale * (1 - a / 2)]])
        return rotation(np.deg2rad(self.rotation_deg)) @ S

    def distortions(self):
        (h1, w1), (h2, w2) = self.shape1, self.image2_shape
        f1, f2 = default_fov(self.shape1), default_fov(self.image2_shape)
        d1 = RadialDistortion.for_image(0.0, w1, h1)
        d2 = RadialDistortion.for_image(0.0, w2, h2)
        k1 = radial_k_from_geometry(f1.radius, d1.norm_scale) if self.k1 is None else self.k1
        k2 = radial_k_from_geometry(f2.radius, d2.norm_scale) if self.k2 is None else self.k2
        return d1.with_k(k1), d2.with_k(k2)


class Montage(NamedTuple):
    img1: np.ndarray
    img2: np.ndarray
    fov1: FovMask
    fov2: FovMask
    landmarks: CorrespondenceSet
    model: RegistrationModel
    overlap: float
    scene_offset: np.ndarray


@dataclass(frozen=True, eq=False)
class SphereProjection:
    """Orthographic view of a spherical retina of ``radius`` px with its pole at ``centre``.

    ``undistort`` flattens an image point to arc length from the pole
    (azimuthal equidistant), ``distort`` goes back.
    """

    centre: np.ndarray
    radius: float

    def undistort(self, points, strict=False) -> np.ndarray:
        v = np.asarray(points, dtype=float) - self.centre
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        ratio = r / self.radius
        ok = ratio <= 1
        _check(ok, strict)
        arc = self.radius * np.arcsin(np.where(ok, ratio, np.nan))
        gain = np.divide(arc, r, out=np.ones_like(r), where=r > 0)
        return self.centre + v * gain

    def distort(self, points, strict=False) -> np.ndarray:
        v = np.asarray(points, dtype=float) - self.centre
        a = np.linalg.norm(v, axis=-1, keepdims=True)
        ok = a <= self.radius * np.pi / 2
        _check(ok, strict)
        r = self.radius * np.sin(np.where(ok, a, np.nan) / self.radius)
        gain = np.divide(r, a, out=np.ones_like(a), where=a > 0)
        return self.centre + v * gain


def _check(ok, strict):
    if strict and not np.all(ok):
        raise OutsideInvertibleRange("point outside the visible hemisphere")


@dataclass(frozen=True, eq=False)
class EyeRotationTruth:
    """Image 1 -> image 2 for a fixed camera and an eye rotated by ``rotation`` (3x3).

    ``P2 = c2 + T + A @ (R2 * xy(Q @ X))`` where ``X`` is the unit-sphere
    point that image-1 pixel ``P1`` shows and ``T`` a crop of image 2.
    """

    A: np.ndarray
    rotation: np.ndarray
    d1: SphereProjection
    d2: SphereProjection
    T: np.ndarray = np.zeros(2)  # image-plane crop shift

    @staticmethod
    def _lift(v):
        z2 = 1.0 - np.sum(v * v, axis=-1, keepdims=True)
        return np.concatenate([v, np.sqrt(np.where(z2 >= 0, z2, np.nan))], axis=-1)

    def map_1_to_2(self, points, strict=False) -> np.ndarray:
        X = self._lift((np.asarray(points, dtype=float) - self.d1.centre) / self.d1.radius)
        Y = X @ self.rotation.T
        Y = np.where(Y[..., 2:] > 0, Y, np.nan)
        out = self.d2.centre + self.T + (self.d2.radius * Y[..., :2]) @ self.A.T
        _check(np.isfinite(out).all(axis=-1), strict)
        return out

    def map_2_to_1(self, points, strict=False) -> np.ndarray:
        v = np.linalg.solve(self.A, (np.asarray(points, dtype=float) - self.d2.centre - self.T).T).T
        v = v / self.d2.radius
        X = self._lift(v) @ self.rotation
        X = np.where(X[..., 2:] > 0, X, np.nan)
        out = self.d1.centre + self.d1.radius * X[..., :2]
        _check(np.isfinite(out).all(axis=-1), strict)
        return out

    def to_dict(self) -> dict:
        return {"projection": "eye", "A": self.A.tolist(), "rotation": self.rotation.tolist(), "T": self.T.tolist(),
                "c1": self.d1.centre.tolist(), "eye_radius1": self.d1.radius,
                "c2": self.d2.centre.tolist(), "eye_radius2": self.d2.radius}


def _scene_maps(model):
    """Image-1 and image-2 pixel -> flattened-retina position (image-1 frame, before offset)."""
    if isinstance(model, EyeRotationTruth):
        return model.d1.undistort, lambda p: model.d1.undistort(model.map_2_to_1(p))
    Hinv = model.H.inverse()
    return model.d1.undistort, lambda p: Hinv.apply(model.d2.undistort(p))


def _solve_overlap(model_at, fov1, fov2, target, t_max, step, xtol):
    f = lambda t: fov_overlap(model_at(t), fov1, fov2, step) - target
    f0 = f(0.0)
    if f0 < 0:
        raise MontageError(f"overlap target {target} unreachable: {f0 + target:.3f} at zero shift")
    if f0 == 0:
        return model_at(0.0)
    if f(t_max) > 0:
        raise MontageError("overlap target below reachable range")
    return model_at(brentq(f, 0.0, t_max, xtol=xtol))


def ground_truth_model(deform: GroundTruthDeformation, step: float = None):
    """The generating model, with the shift (or eye rotation) solved to realise ``overlap_target``.

    A :class:`RegistrationModel` for the division projection, an
    :class:`EyeRotationTruth` for the eye projection.
    """
    fov1, fov2 = default_fov(deform.shape1), default_fov(deform.image2_shape)
    A = deform.linear_part()
    a = np.deg2rad(deform.shift_angle_deg)
    u = np.array([np.cos(a), np.sin(a)])
    step = max(1.0, min(deform.shape1) / 200) if step is None else step
    target = deform.overlap_target

    if deform.projection == "eye":
        (h1, w1), (h2, w2) = deform.shape1, deform.image2_shape
        s1 = SphereProjection(image_centre(w1, h1), eye_radius(fov1.radius))
        s2 = SphereProjection(image_centre(w2, h2), eye_radius(fov2.radius, deform.field2_deg))
        # rotating about z x u moves the pole, and with it the image content, towards +u
        axis = np.array([-u[1], u[0], 0.0])

        share = deform.eye_rotation_share

        def eye_at(t):
            # displacement t px: share of it by turning the eye (arc t * share on the sphere), the rest by cropping
            Q = Rotation.from_rotvec(share * t / s1.radius * axis).as_matrix()
            return EyeRotationTruth(A, Q, s1, s2, (1 - share) * t * u)

        t_max = 2.5 * fov1.radius
        return _solve_overlap(eye_at, fov1, fov2, target, t_max, step, 0.01)

    d1, d2 = deform.distortions()

    def model_at(t):
        H = AffineHomography(A, d2.centre - A @ d1.centre + t * u)
        mode = "one" if d1.k == d2.k else "two"
        return RegistrationModel(H, d1, d2, mode)

    if target >= 1.0 - 1e-12 and np.allclose(A, np.eye(2)) and d1.k == d2.k and d1.norm_scale == d2.norm_scale:
        return model_at(0.0)
    return _solve_overlap(model_at, fov1, fov2, target, 2.0 * (fov1.radius + fov2.radius), step, 0.25)


def experiment_deformations(seed: int, shape1=(1568, 2352), shape2=None, rotation_deg: float = 5.0,
                            scale: float = 1.0, overlap: float = 0.8, k2_factor: float = 0.7,
                            projection: str = "division", field2_deg: float = 42.0) -> dict:
    """``{"one": ..., "two": ...}`` deformations of the validation experiment for one seed.

    The shift direction turns with the seed.  The one-distortion pair shares
    image 1's eye geometry.  The two-distortion pair uses ``shape2`` when
    given (its own geometry); otherwise it keeps the size and gets
    ``k2 = k2_factor * k1`` (division) or a ``field2_deg`` camera (eye).
    """
    base = GroundTruthDeformation(shape1=tuple(shape1), shape2=None if shape2 is None else tuple(shape2),
                                  rotation_deg=rotation_deg, scale=scale, overlap_target=overlap,
                                  shift_angle_deg=(30.0 + 37.0 * seed) % 360, projection=projection)
    k = base.distortions()[0].k
    one = replace(base, shape2=None, k2=k)
    if projection == "eye":
        return {"one": one, "two": replace(base, field2_deg=CAMERA_FIELD_DEG if shape2 is not None else field2_deg)}
    return {"one": one, "two": replace(base, k2=None if shape2 is not None else k2_factor * k)}


def landmark_grid(deform: GroundTruthDeformation, model: RegistrationModel) -> CorrespondenceSet:
    """``grid x grid`` equally spaced points over the image-1 FOV, kept where visible in both images."""
    fov1, fov2 = default_fov(deform.shape1), default_fov(deform.image2_shape)
    n = deform.grid
    offs = (np.arange(n) + 0.5) / n * 2 - 1
    gx, gy = np.meshgrid(fov1.centre[0] + fov1.radius * offs, fov1.centre[1] + fov1.radius * offs)
    p1 = np.column_stack([gx.ravel(), gy.ravel()])
    p1 = p1[fov1.contains(p1)]
    p2 = model.map_1_to_2(p1, strict=False)
    ok = np.all(np.isfinite(p2), axis=1)
    ok[ok] = fov2.contains(p2[ok])
    return CorrespondenceSet(p1[ok], p2[ok])


def _scene_extent(model, fov1, fov2):
    """Bounding box of the scene positions (image-1 undistorted frame) both views read."""
    t = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    circ = np.column_stack([np.cos(t), np.sin(t)])
    to1, to2 = _scene_maps(model)
    pts = np.vstack([to1(fov1.centre + fov1.radius * circ), to2(fov2.centre + fov2.radius * circ)])
    return pts.min(axis=0), pts.max(axis=0)


def shared_scene(deforms, seed: int = 0, margin: float = 8.0) -> np.ndarray:
    """One procedural scene, centred on image 1, large enough for every deformation given.

    All deformations must share ``shape1``; passing the scene to
    :func:`make_montage` then yields the same image 1 for each of them.
    """
    shape1 = tuple(deforms[0].shape1)
    if any(tuple(d.shape1) != shape1 for d in deforms):
        raise MontageError("deformations differ in image-1 shape")
    c = image_centre(shape1[1], shape1[0])
    half = np.zeros(2)
    for d in deforms:
        lo, hi = _scene_extent(ground_truth_model(d), default_fov(d.shape1), default_fov(d.image2_shape))
        half = np.maximum(half, np.maximum(c - lo, hi - c))
    w, h = (2 * np.ceil(half + margin) + 1).astype(int) + (np.array(shape1[::-1]) + 1) % 2
    return fundus_scene((int(h), int(w)), seed=seed, unit=min(shape1) / 1568)


def make_montage(deform: GroundTruthDeformation = GroundTruthDeformation(), seed: int = 0,
                 scene: Optional[np.ndarray] = None, noise: float = 0.004,
                 vignette: float = 0.25, gain_jitter: float = 0.08) -> Montage:
    """Render a montage pair with exact landmark correspondences.

    ``scene`` is the flat source raster in image-1 undistorted coordinates
    (shifted by the returned ``scene_offset``); a procedural one is generated
    from ``seed`` when omitted.  Image 2 gets a slightly different colour gain
    to mimic a second examination.
    """
    model = ground_truth_model(deform)
    fov1, fov2 = default_fov(deform.shape1), default_fov(deform.image2_shape)
    lo, hi = _scene_extent(model, fov1, fov2)
    margin = 8.0
    if scene is None:
        offset = margin - np.floor(lo)
        size = np.ceil(hi + offset + margin).astype(int) + 1
        scene = fundus_scene((int(size[1]), int(size[0])), seed=seed, unit=min(deform.shape1) / 1568)
    else:
        h, w = scene.shape[:2]
        offset = np.array([(w - 1) / 2, (h - 1) / 2]) - image_centre(deform.shape1[1], deform.shape1[0])
        if np.any(lo + offset < 0) or np.any(hi + offset > [w - 1, h - 1]):
            raise MontageError("scene too small for the requested deformation")

    rng = np.random.default_rng(seed)
    gain2 = tuple(1 + rng.uniform(-gain_jitter, gain_jitter, 3))
    to1, to2 = _scene_maps(model)
    img1, _ = render_view(scene, deform.shape1, lambda p: to1(p) + offset, fov1,
                          vignette=vignette, noise=noise, seed=seed)
    img2, _ = render_view(scene, deform.image2_shape, lambda p: to2(p) + offset,
                          fov2, vignette=vignette, gain=gain2, noise=noise, seed=seed + 1 if noise > 0 else seed)
    landmarks = landmark_grid(deform, model)
    return Montage(img1, img2, fov1, fov2, landmarks, model, fov_overlap(model, fov1, fov2), offset)


class MontageScore(NamedTuple):
    mean: float
    std: float
    rel_image_pct: float
    rel_vessel_pct: float
    inner_mean: float
    outer_mean: float
    count: int


def landmark_errors(truth: CorrespondenceSet, model: RegistrationModel) -> np.ndarray:
    e = np.linalg.norm(model.map_1_to_2(truth.p1, strict=False) - truth.p2, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def score_montage(truth: CorrespondenceSet, model: RegistrationModel, diagonal: float = None,
                  vessel_calibre: float = VESSEL_CALIBRE_PX) -> MontageScore:
    """Landmark transfer error statistics.

    ``inner_mean``/``outer_mean`` average the errors over the inner and outer
    thirds of landmark radius (from image 1's optic centre, relative to the
    farthest landmark).
    """
    e = landmark_errors(truth, model)
    diagonal = image_diagonal(model) if diagonal is None else diagonal
    r = np.linalg.norm(truth.p1 - model.d1.centre, axis=1)
    rel = r / r.max() if len(r) and r.max() > 0 else r
    inner, outer = e[rel < 1 / 3], e[rel >= 2 / 3]
    mean = float(e.mean())
    return MontageScore(
        mean, float(e.std()), 100.0 * mean / diagonal, 100.0 * mean / vessel_calibre,
        float(inner.mean()) if len(inner) else float("nan"),
        float(outer.mean()) if len(outer) else float("nan"),
        int(len(e)))


def truth_to_dict(montage: Montage, deform: GroundTruthDeformation, seed: int) -> dict:
    d = asdict(deform)
    return {
        "seed": seed,
        "deformation": d,
        "model": montage.model.to_dict(),
        "overlap": montage.overlap,
        "landmarks": {"p1": montage.landmarks.p1.tolist(), "p2": montage.landmarks.p2.tolist()},
    }


def truth_to_json(montage: Montage, deform: GroundTruthDeformation, seed: int) -> str:
    return json.dumps(truth_to_dict(montage, deform, seed), indent=2)

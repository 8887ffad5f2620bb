"""Deformation model: affine homography composed with division-model radial distortions.

Coordinates are pixel positions ``(x, y)``; pixel centres sit on integer
coordinates and the optic centre of a ``width x height`` image is the
geometric centre ``((width - 1) / 2, (height - 1) / 2)``.  Radii are measured
in normalised units: centred coordinates divided by ``1 + |c|``.  All point
functions accept a single point of shape ``(2,)`` or an array ``(..., 2)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (DegenerateConfiguration, DistortionSingularity,
                     OutsideInvertibleRange, ReflectionError)

K_LIMIT = 0.2
MODES = ("one", "two")

_DET_EPS = 1e-12
_SINGULAR_EPS = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def image_centre(width: int, height: int) -> np.ndarray:
    return np.array([(width - 1) / 2.0, (height - 1) / 2.0])


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


# ----------------------------------------------------------------------------
# affine part


@dataclass(frozen=True, eq=False)
class AffineHomography:
    """``P -> A @ P + T``; the 3x3 form has last row ``(0, 0, 1)``."""

    A: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        A = _frozen(self.A).reshape(2, 2)
        T = _frozen(self.T).reshape(2)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(T))):
            raise DegenerateConfiguration("non-finite homography")
        if abs(np.linalg.det(A)) <= _DET_EPS:
            raise DegenerateConfiguration("singular affine block")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "T", T)

    @classmethod
    def identity(cls) -> "AffineHomography":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_matrix(cls, M) -> "AffineHomography":
        M = np.asarray(M, dtype=float)
        if M.shape == (3, 3) and not np.allclose(M[2], [0, 0, 1]):
            raise ValueError("not an affine homography: last row must be (0, 0, 1)")
        return cls(M[:2, :2], M[:2, 2])

    @classmethod
    def from_params(cls, params) -> "AffineHomography":
        """From ``(a11, a12, a21, a22, tx, ty)``."""
        p = np.asarray(params, dtype=float)
        return cls(p[:4].reshape(2, 2), p[4:6])

    @classmethod
    def similarity(cls, angle=0.0, scale=1.0, translation=(0.0, 0.0),
                   centre=(0.0, 0.0)) -> "AffineHomography":
        """Rotation by ``angle`` and isotropic scaling about ``centre``, then translation."""
        A = scale * rotation(angle)
        c = np.asarray(centre, dtype=float)
        return cls(A, c - A @ c + np.asarray(translation, dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(3)
        M[:2, :2] = self.A
        M[:2, 2] = self.T
        return M

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.T])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.A.T + self.T

    def inverse(self) -> "AffineHomography":
        Ai = np.linalg.inv(self.A)
        return AffineHomography(Ai, -Ai @ self.T)

    def __repr__(self):
        return f"AffineHomography(A={self.A.tolist()}, T={self.T.tolist()})"


@dataclass(frozen=True)
class AffineDecomposition:
    """``A = R(theta) R(-phi) diag(lambda1, lambda2) R(phi)``."""

    theta: float
    phi: float
    lambda1: float
    lambda2: float

    def matrix(self) -> np.ndarray:
        D = np.diag([self.lambda1, self.lambda2])
        return rotation(self.theta) @ rotation(-self.phi) @ D @ rotation(self.phi)


def decompose_affine(H) -> AffineDecomposition:
    A = H.A if isinstance(H, AffineHomography) else np.asarray(H, dtype=float)
    if np.linalg.det(A) <= 0:
        raise ReflectionError("affine block has det <= 0 (reflection not allowed)")
    U, S, Vt = np.linalg.svd(A)
    V = Vt.T
    # det(A) > 0 so U and V are both rotations or both reflections
    if np.linalg.det(U) < 0:
        U[:, 1] *= -1
        V[:, 1] *= -1
    # A = (U V^T)(V S V^T) and V = R(-phi)
    phi = -np.arctan2(V[1, 0], V[0, 0])
    W = U @ V.T
    theta = np.arctan2(W[1, 0], W[0, 0])
    return AffineDecomposition(float(theta), float(phi), float(S[0]), float(S[1]))


def scale_ratio(H) -> float:
    """Relative difference of the two principal scalings, ``|l1 - l2| / max(l1, l2)``."""
    A = H.A if isinstance(H, AffineHomography) else np.asarray(H, dtype=float)
    s = np.linalg.svd(A, compute_uv=False)
    return float(abs(s[0] - s[1]) / max(s[0], s[1]))


# ----------------------------------------------------------------------------
# radial part (division model)


def undistort_points(points, k: float, centre, norm_scale: float, *, strict=True) -> np.ndarray:
    """Distorted -> undistorted: ``c + s * p / (1 + k |p|^2)`` with ``p = (P - c) / s``.

    With ``strict=False`` points at the model singularity come back as NaN.
    """
    P = np.asarray(points, dtype=float)
    c = np.asarray(centre, dtype=float)
    p = (P - c) / norm_scale
    denom = 1.0 + k * np.sum(p * p, axis=-1)
    bad = denom <= _SINGULAR_EPS
    if np.any(bad):
        if strict:
            raise DistortionSingularity("1 + k r^2 vanishes")
        denom = np.where(bad, np.nan, denom)
    return c + norm_scale * p / denom[..., None]


def distort_points(points, k: float, centre, norm_scale: float, *, strict=True) -> np.ndarray:
    """Undistorted -> distorted, the exact inverse of :func:`undistort_points`.

    The distorted radius solves ``k r_u r_d^2 - r_d + r_u = 0``; the root that
    tends to ``r_u`` as ``k -> 0`` is ``2 r_u / (1 + sqrt(1 - 4 k r_u^2))``.
    """
    P = np.asarray(points, dtype=float)
    c = np.asarray(centre, dtype=float)
    p = (P - c) / norm_scale
    disc = 1.0 - 4.0 * k * np.sum(p * p, axis=-1)
    bad = ~(disc > 0)
    if np.any(bad):
        if strict:
            raise OutsideInvertibleRange("1 - 4 k r_u^2 <= 0")
        disc = np.where(bad, np.nan, disc)
    # ratio r_d / r_u, finite at r_u = 0 and k = 0
    factor = 2.0 / (1.0 + np.sqrt(disc))
    return c + norm_scale * p * factor[..., None]


@dataclass(frozen=True, eq=False)
class RadialDistortion:
    k: float
    centre: np.ndarray
    norm_scale: float

    def __post_init__(self):
        centre = _frozen(self.centre).reshape(2)
        object.__setattr__(self, "centre", centre)
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "norm_scale", float(self.norm_scale))
        if not np.isfinite(self.k) or abs(self.k) > K_LIMIT + 1e-12:
            raise ValueError(f"distortion coefficient {self.k} outside [-{K_LIMIT}, {K_LIMIT}]")
        if not self.norm_scale > 1:
            raise ValueError("norm_scale must exceed 1")

    @classmethod
    def for_image(cls, k: float, width: int, height: int) -> "RadialDistortion":
        c = image_centre(width, height)
        return cls(k, c, 1.0 + float(np.hypot(*c)))

    def with_k(self, k: float) -> "RadialDistortion":
        return RadialDistortion(k, self.centre, self.norm_scale)

    def undistort(self, points, strict=True) -> np.ndarray:
        return undistort_points(points, self.k, self.centre, self.norm_scale, strict=strict)

    def distort(self, points, strict=True) -> np.ndarray:
        return distort_points(points, self.k, self.centre, self.norm_scale, strict=strict)

    def __repr__(self):
        return (f"RadialDistortion(k={self.k!r}, centre={self.centre.tolist()}, "
                f"norm_scale={self.norm_scale!r})")


def undistort_point(P_d, dist: RadialDistortion) -> np.ndarray:
    return dist.undistort(P_d)


def distort_point(P_u, dist: RadialDistortion) -> np.ndarray:
    return dist.distort(P_u)


# ----------------------------------------------------------------------------
# full model


@dataclass(frozen=True, eq=False)
class RegistrationModel:
    """Image 1 -> image 2: ``distort_2(H(undistort_1(P)))``."""

    H: AffineHomography
    d1: RadialDistortion
    d2: RadialDistortion
    mode: str = "two"
    fit_error: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "one" and self.d1.k != self.d2.k:
            raise ValueError("one-distortion model requires d1.k == d2.k")
        if not (np.isfinite(self.fit_error) and self.fit_error >= 0):
            raise ValueError("fit_error must be finite and >= 0")

    @classmethod
    def identity(cls, shape1, shape2=None, mode="one") -> "RegistrationModel":
        """``shape`` is ``(height, width)`` as for numpy images."""
        shape2 = shape1 if shape2 is None else shape2
        return cls(AffineHomography.identity(),
                   RadialDistortion.for_image(0.0, shape1[1], shape1[0]),
                   RadialDistortion.for_image(0.0, shape2[1], shape2[0]), mode)

    def replace(self, **changes) -> "RegistrationModel":
        fields = dict(H=self.H, d1=self.d1, d2=self.d2, mode=self.mode,
                      fit_error=self.fit_error, iterations=self.iterations)
        fields.update(changes)
        return RegistrationModel(**fields)

    def _is_identity(self) -> bool:
        d1, d2 = self.d1, self.d2
        return (np.array_equal(self.H.A, np.eye(2)) and not self.H.T.any() and d1.k == d2.k
                and np.array_equal(d1.centre, d2.centre) and d1.norm_scale == d2.norm_scale)

    def _exact_identity(self, points, mapped):
        # the chain composes to the identity; return the inputs to avoid round-off
        if not self._is_identity():
            return mapped
        p = np.asarray(points, dtype=float)
        return np.where(np.isfinite(mapped), p, mapped)

    def map_1_to_2(self, points, strict=True) -> np.ndarray:
        u = self.d1.undistort(points, strict=strict)
        return self._exact_identity(points, self.d2.distort(self.H.apply(u), strict=strict))

    def map_2_to_1(self, points, strict=True) -> np.ndarray:
        u = self.d2.undistort(points, strict=strict)
        return self._exact_identity(points, self.d1.distort(self.H.inverse().apply(u), strict=strict))

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        A, T = self.H.A, self.H.T
        return {
            "a11": float(A[0, 0]), "a12": float(A[0, 1]),
            "a21": float(A[1, 0]), "a22": float(A[1, 1]),
            "tx": float(T[0]), "ty": float(T[1]),
            "k1": self.d1.k, "k2": self.d2.k,
            "c1": [float(v) for v in self.d1.centre],
            "c2": [float(v) for v in self.d2.centre],
            "norm_scale1": self.d1.norm_scale, "norm_scale2": self.d2.norm_scale,
            "mode": self.mode,
            "fit_error": float(self.fit_error),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationModel":
        H = AffineHomography([[d["a11"], d["a12"]], [d["a21"], d["a22"]]], [d["tx"], d["ty"]])
        return cls(H,
                   RadialDistortion(d["k1"], d["c1"], d["norm_scale1"]),
                   RadialDistortion(d["k2"], d["c2"], d["norm_scale2"]),
                   d.get("mode", "two"), d.get("fit_error", 0.0), d.get("iterations", 0))

    def to_json(self, indent: Optional[int] = 2) -> str:
        # float repr is the shortest string that round-trips bit-exactly
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "RegistrationModel":
        return cls.from_dict(json.loads(text))


def map_1_to_2(P1_d, model: RegistrationModel) -> np.ndarray:
    return model.map_1_to_2(P1_d)


def map_2_to_1(P2_d, model: RegistrationModel) -> np.ndarray:
    return model.map_2_to_1(P2_d)

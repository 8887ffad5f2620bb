"""Keypoint detection, ratio matching and statistical filtering of match vectors.

Matching works on a virtual side-by-side stitch: both images are padded to
common dimensions, image 1 on the left and image 2 on the right, so every
match becomes a vector from ``p1`` to ``p2 + (padded_width, 0)``.  Lengths and
orientations of these vectors are filtered in two passes; the survivors feed
a homography estimate, image-1 positions are moved by it and the filter is
run again.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import InsufficientFeatures, InsufficientMatches, RegistrationError
from .preprocess import FovMask

log = logging.getLogger(__name__)

DESCRIPTOR_SIZE = 128
MIN_CORRESPONDENCES = 4


@dataclass(frozen=True)
class DetectorConfig:
    octave_layers: int = 3
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    sigma: float = 1.6
    max_keypoints: int = 5000
    # keypoints closer than this fraction of the FOV radius to the rim are dropped
    rim_margin: float = 0.03


@dataclass(frozen=True)
class Keypoint:
    position: np.ndarray
    scale: float
    orientation: float
    descriptor: np.ndarray


@dataclass
class KeypointSet:
    """Columnar storage for a list of keypoints."""

    xy: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        n = len(self.xy)
        self.scale = np.asarray(self.scale, dtype=float).reshape(n)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(n)
        self.descriptors = np.asarray(self.descriptors, dtype=float).reshape(n, DESCRIPTOR_SIZE)

    def __len__(self):
        return len(self.xy)

    def __getitem__(self, i) -> Keypoint:
        return Keypoint(self.xy[i], float(self.scale[i]), float(self.orientation[i]), self.descriptors[i])

    def subset(self, idx) -> "KeypointSet":
        return KeypointSet(self.xy[idx], self.scale[idx], self.orientation[idx], self.descriptors[idx])

    def with_positions(self, xy) -> "KeypointSet":
        return KeypointSet(xy, self.scale, self.orientation, self.descriptors)

    # text cache: one line per keypoint, ``x y scale orientation d0 ... d127``

    def save(self, path) -> None:
        rows = np.column_stack([self.xy, self.scale, self.orientation, self.descriptors])
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        np.savetxt(tmp, rows, fmt="%.17g")
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "KeypointSet":
        rows = np.loadtxt(path, ndmin=2)
        if rows.size == 0:
            rows = np.zeros((0, 4 + DESCRIPTOR_SIZE))
        if rows.shape[1] != 4 + DESCRIPTOR_SIZE:
            raise ValueError(f"{path}: expected {4 + DESCRIPTOR_SIZE} columns, got {rows.shape[1]}")
        return cls(rows[:, :2], rows[:, 2], rows[:, 3], rows[:, 4:])


@dataclass
class CorrespondenceSet:
    """One-to-one point pairs, ``p1`` in image 1 and ``p2`` in image 2 (original frames)."""

    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=float).reshape(-1, 2)
        if len(self.p1) != len(self.p2):
            raise ValueError("p1 and p2 differ in length")

    @property
    def count(self) -> int:
        return len(self.p1)

    def __len__(self):
        return len(self.p1)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.p1[idx], self.p2[idx])

    def is_one_to_one(self) -> bool:
        return (len(np.unique(self.p1, axis=0)) == self.count
                and len(np.unique(self.p2, axis=0)) == self.count)


# ----------------------------------------------------------------------------
# detection


def _detector_gray(img: np.ndarray) -> np.ndarray:
    # green carries the vessel contrast in colour fundus photographs
    g = img if img.ndim == 2 else img[..., 1]
    return np.round(np.clip(g, 0, 1) * 255).astype(np.uint8)


def detect_keypoints(img: np.ndarray, mask: FovMask, cfg: DetectorConfig = DetectorConfig()) -> KeypointSet:
    """Difference-of-Gaussians keypoints with 4x4x8 gradient-orientation descriptors.

    Descriptors are returned with unit L2 norm, orientations in radians in
    ``[-pi, pi)``.  Only keypoints inside the (slightly eroded) FOV are kept.
    """
    sift = cv2.SIFT_create(nfeatures=0, nOctaveLayers=cfg.octave_layers,
                           contrastThreshold=cfg.contrast_threshold,
                           edgeThreshold=cfg.edge_threshold, sigma=cfg.sigma)
    inner = FovMask.disc(mask.shape, mask.centre, mask.radius * (1 - cfg.rim_margin))
    m8 = (inner.mask & mask.mask).astype(np.uint8) * 255
    kps, desc = sift.detectAndCompute(_detector_gray(img), m8)
    if desc is None or len(kps) < MIN_CORRESPONDENCES:
        raise InsufficientFeatures(f"found {0 if desc is None else len(kps)} keypoints")
    xy = np.array([k.pt for k in kps], dtype=float)
    keep = inner.contains(xy) & mask.contains(xy)
    response = np.array([k.response for k in kps])
    order = np.argsort(-response, kind="stable")
    order = order[keep[order]][: cfg.max_keypoints]
    if len(order) < MIN_CORRESPONDENCES:
        raise InsufficientFeatures(f"found {len(order)} keypoints inside the FOV")
    desc = desc[order].astype(float)
    desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    ang = np.deg2rad(np.array([kps[i].angle for i in order]))
    ang = (ang + np.pi) % (2 * np.pi) - np.pi
    size = np.array([kps[i].size for i in order])
    return KeypointSet(xy[order], size, ang, desc)


def cached_detect(img: np.ndarray, mask: FovMask, cfg: DetectorConfig = DetectorConfig(),
                  cache_dir=None) -> KeypointSet:
    if cache_dir is None:
        return detect_keypoints(img, mask, cfg)
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(_detector_gray(img)).tobytes())
    h.update(np.ascontiguousarray(mask.mask).tobytes())
    h.update(repr(cfg).encode())
    path = Path(cache_dir) / f"{h.hexdigest()}.kp"
    if path.exists():
        log.debug("keypoint cache hit %s", path)
        return KeypointSet.load(path)
    kps = detect_keypoints(img, mask, cfg)
    kps.save(path)
    return kps


# ----------------------------------------------------------------------------
# matching


@dataclass
class Matches:
    """Index pairs into two keypoint sets with their descriptor distances."""

    i1: np.ndarray
    i2: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.i1)

    def subset(self, idx) -> "Matches":
        return Matches(self.i1[idx], self.i2[idx], self.distance[idx])


def _two_nearest(d1: np.ndarray, d2: np.ndarray, chunk: int = 2048):
    n1, n2 = len(d1), len(d2)
    best = np.zeros(n1, dtype=int)
    second = np.full(n1, -1, dtype=int)
    for s in range(0, n1, chunk):
        block = d1[s:s + chunk]
        # squared distances, up to a per-row constant
        sq = np.sum(d2 * d2, axis=1)[None, :] - 2.0 * block @ d2.T
        if n2 == 1:
            best[s:s + chunk] = 0
            continue
        part = np.argpartition(sq, 1, axis=1)[:, :2]
        vals = np.take_along_axis(sq, part, axis=1)
        swap = vals[:, 1] < vals[:, 0]
        part[swap] = part[swap][:, ::-1]
        best[s:s + chunk] = part[:, 0]
        second[s:s + chunk] = part[:, 1]
    return best, second


def match_ratio(kp1: KeypointSet, kp2: KeypointSet, ratio: float = 0.8) -> Matches:
    """Nearest-neighbour matching with the distance-ratio test, one-to-one.

    When several image-1 keypoints share a nearest neighbour only the one at
    the smallest descriptor distance keeps it (ties go to the lower index);
    this is resolved before the ratio test so lowering ``ratio`` can only
    remove matches.
    """
    if len(kp1) == 0 or len(kp2) == 0:
        return Matches(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    d1, d2 = kp1.descriptors, kp2.descriptors
    best, second = _two_nearest(d1, d2)
    dist1 = np.linalg.norm(d1 - d2[best], axis=1)
    if len(d2) > 1:
        dist2 = np.linalg.norm(d1 - d2[second], axis=1)
    else:
        dist2 = np.full(len(d1), np.inf)
    # global greedy by ascending distance
    order = np.lexsort((np.arange(len(d1)), dist1))
    _, first = np.unique(best[order], return_index=True)
    winner = np.zeros(len(d1), bool)
    winner[order[first]] = True
    with np.errstate(divide="ignore", invalid="ignore"):
        passed = dist1 < ratio * dist2
    keep = np.nonzero(winner & passed)[0]
    keep = keep[np.lexsort((keep, dist1[keep]))]
    return Matches(keep, best[keep], dist1[keep])


# ----------------------------------------------------------------------------
# vector filtering


@dataclass
class MatchVectors:
    """Match vectors in stitched coordinates (``p2`` already offset)."""

    p1: np.ndarray
    p2: np.ndarray
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=float).reshape(-1, 2)
        if self.index is None:
            self.index = np.arange(len(self.p1))

    def __len__(self):
        return len(self.p1)

    @property
    def length(self) -> np.ndarray:
        return np.linalg.norm(self.p2 - self.p1, axis=1)

    @property
    def orientation(self) -> np.ndarray:
        v = self.p2 - self.p1
        return np.arctan2(v[:, 1], v[:, 0])

    def subset(self, idx) -> "MatchVectors":
        return MatchVectors(self.p1[idx], self.p2[idx], self.index[idx])


def _wrap_deg(a):
    return (a + 180.0) % 360.0 - 180.0


def _circular_mean_deg(theta_deg):
    t = np.deg2rad(theta_deg)
    return np.rad2deg(np.arctan2(np.sin(t).mean(), np.cos(t).mean()))


def _filter_pass(length, theta_deg, length_tol, angle_tol):
    eps = 1e-9 * max(1.0, float(np.abs(length).max(initial=0.0)))
    dl = np.abs(length - length.mean())
    dt = np.abs(_wrap_deg(theta_deg - _circular_mean_deg(theta_deg)))
    return (dl <= length_tol + eps) & (dt <= angle_tol + 1e-9)


def filter_masks(length, orientation, ysize: int, angle_tol_deg: float = 5.0,
                 length_frac: float = 0.05):
    """Boolean keep-masks after pass 1 and after pass 2 (over the full input)."""
    length = np.asarray(length, dtype=float)
    theta = np.rad2deg(np.asarray(orientation, dtype=float))
    if len(length) == 0:
        return np.zeros(0, bool), np.zeros(0, bool)
    keep1 = _filter_pass(length, theta, length.std(), angle_tol_deg)
    keep2 = keep1.copy()
    if keep1.any():
        l1, t1 = length[keep1], theta[keep1]
        t_dev = _wrap_deg(t1 - _circular_mean_deg(t1))
        sigma_t = float(np.sqrt(np.mean(t_dev ** 2)))
        keep2[keep1] = _filter_pass(l1, t1, max(3 * l1.std(), length_frac * ysize),
                                    max(angle_tol_deg, sigma_t))
    return keep1, keep2


def filter_vectors(vectors: MatchVectors, ysize: int, angle_tol_deg: float = 5.0,
                   length_frac: float = 0.05) -> MatchVectors:
    """Two-pass length/orientation consistency filter on stitched match vectors.

    Pass 1 keeps vectors within one standard deviation of the mean length and
    within ``angle_tol_deg`` of the (circular) mean orientation.  Pass 2,
    with statistics recomputed on the survivors, widens the bounds to
    ``max(3 sigma, length_frac * ysize)`` and ``max(angle_tol_deg, sigma_theta)``.
    """
    _, keep = filter_masks(vectors.length, vectors.orientation, ysize, angle_tol_deg, length_frac)
    if keep.sum() < MIN_CORRESPONDENCES:
        raise InsufficientMatches(f"{keep.sum()} match vectors survive filtering")
    return vectors.subset(np.nonzero(keep)[0])


# ----------------------------------------------------------------------------
# three-step procedure


@dataclass
class MatchReport:
    correspondences: CorrespondenceSet
    counts: dict = field(default_factory=dict)
    homography_failed: bool = False
    homography: object = None


def _dedupe(p1, p2):
    """Drop later pairs repeating an endpoint (coincident keypoints from SIFT)."""
    _, a = np.unique(p1, axis=0, return_index=True)
    keep = np.zeros(len(p1), bool)
    keep[a] = True
    _, b = np.unique(p2, axis=0, return_index=True)
    keep2 = np.zeros(len(p2), bool)
    keep2[b] = True
    idx = np.nonzero(keep & keep2)[0]
    return p1[idx], p2[idx]


def match_three_step(img1: np.ndarray, img2: np.ndarray, mask1: FovMask, mask2: FovMask,
                     ratio: float = 0.8, fit_cfg=None, detector: DetectorConfig = DetectorConfig(),
                     kp1: KeypointSet = None, kp2: KeypointSet = None, cache_dir=None) -> MatchReport:
    """Ratio matching + vector filtering, homography, and filtering again on moved points.

    Correspondences are returned in the original image frames.  If the
    homography cannot be estimated, the first-round result is returned with
    ``homography_failed`` set.
    """
    from .estimation import FitConfig, estimate_homography

    fit_cfg = FitConfig() if fit_cfg is None else fit_cfg
    if kp1 is None:
        kp1 = cached_detect(img1, mask1, detector, cache_dir)
    if kp2 is None:
        kp2 = cached_detect(img2, mask2, detector, cache_dir)
    counts = {"keypoints1": len(kp1), "keypoints2": len(kp2)}

    h = max(img1.shape[0], img2.shape[0])
    w = max(img1.shape[1], img2.shape[1])
    offset = np.array([w, 0.0])

    matches = match_ratio(kp1, kp2, ratio)
    counts["ratio_matches"] = len(matches)
    p1, p2 = kp1.xy[matches.i1], kp2.xy[matches.i2]

    first = filter_vectors(MatchVectors(p1, p2 + offset), h)
    counts["filtered_a"] = len(first)
    corr_a = CorrespondenceSet(*_dedupe(p1[first.index], p2[first.index]))

    try:
        H = estimate_homography(corr_a, fit_cfg).H
    except RegistrationError as exc:
        log.warning("homography on first-round matches failed (%s); using first round", exc)
        return MatchReport(corr_a, counts, homography_failed=True)

    moved = H.apply(p1)
    second = filter_vectors(MatchVectors(moved, p2 + offset), h)
    counts["filtered_c"] = len(second)
    corr = CorrespondenceSet(*_dedupe(p1[second.index], p2[second.index]))
    if corr.count < MIN_CORRESPONDENCES:
        raise InsufficientMatches(f"{corr.count} correspondences after filtering")
    return MatchReport(corr, counts, homography=H)

"""Fitting the registration model to correspondences.

Pipeline: robust affine homography from random 4-point samples with an
anisotropy gate, closed-form linear estimators for the distortion
coefficient(s) with and without the homography, an alternating loop over
those, and a final bounded nonlinear least-squares refinement.

The linear estimators work in normalised centred coordinates
``p = (P - c) / s`` of each image.  With ``A' = (s1 / s2) A`` and
``d' = (c2 - A c1 - T) / s2`` the model reads

    p2 / (1 + k2 |p2|^2) + d' = A' p1 / (1 + k1 |p1|^2)

and clearing denominators gives equations linear in products such as
``k^2 d'``, ``k A'`` or ``k1 k2 d'``.  Products are solved for as independent
unknowns; the primary parameters are read back from their own blocks.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import least_squares

from .errors import DegenerateConfiguration, InsufficientMatches, RegistrationError
from .features import CorrespondenceSet, MIN_CORRESPONDENCES
from .geometry import (AffineHomography, RadialDistortion, RegistrationModel, image_centre,
                       scale_ratio)

log = logging.getLogger(__name__)

_COLLINEAR_AREA = 1e-6


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 0.01  # error tolerance, normalised units
    tol: float = 0.01  # relative error change
    max_iter: int = 100
    k_bound: float = 0.2
    ransac_samples: int = 100
    scale_gate: float = 0.01
    scale_retries: int = 50
    mode: str = "auto"  # one | two | auto
    seed: int = 0
    score_cap: float = 40.0  # px; per-point cap when scoring candidate homographies
    inlier_floor: float = 3.0  # px; inlier threshold never drops below this
    fd_step: float = 1e-6
    refine_rounds: int = 3

    def __post_init__(self):
        for name in ("epsilon", "tol", "k_bound", "score_cap", "inlier_floor", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1 or self.ransac_samples < 1 or self.scale_retries < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0 < self.scale_gate < 1:
            raise ValueError("scale_gate must lie in (0, 1)")
        if self.mode not in ("one", "two", "auto"):
            raise ValueError("mode must be one, two or auto")

    def replace(self, **changes) -> "FitConfig":
        d = asdict(self)
        d.update(changes)
        return FitConfig(**d)


@dataclass(frozen=True)
class PairMeta:
    """Image dimensions as numpy shapes ``(h, w)`` plus optional camera strings."""

    shape1: tuple
    shape2: tuple
    camera1: Optional[str] = None
    camera2: Optional[str] = None

    def distortions(self):
        (h1, w1), (h2, w2) = self.shape1[:2], self.shape2[:2]
        return RadialDistortion.for_image(0.0, w1, h1), RadialDistortion.for_image(0.0, w2, h2)


def resolve_mode(mode: str, meta: PairMeta) -> str:
    if mode != "auto":
        return mode
    same_size = tuple(meta.shape1[:2]) == tuple(meta.shape2[:2])
    same_camera = meta.camera1 is None or meta.camera2 is None or meta.camera1 == meta.camera2
    return "one" if same_size and same_camera else "two"


# ----------------------------------------------------------------------------
# robust homography


class HomographyFit(NamedTuple):
    H: AffineHomography
    scale_ratio: float
    gate_passed: bool
    attempts: int
    score: float


def _batched_affine(p1s: np.ndarray, p2s: np.ndarray) -> np.ndarray:
    """Least-squares affine maps for a batch of point sets, shape ``(B, 2, 3)``."""
    X = np.concatenate([p1s, np.ones(p1s.shape[:-1] + (1,))], axis=-1)
    XtX = np.einsum("bni,bnj->bij", X, X)
    XtY = np.einsum("bni,bnj->bij", X, p2s)
    sol = np.linalg.solve(XtX, XtY)
    return np.transpose(sol, (0, 2, 1))


def _min_triangle_area(quads: np.ndarray) -> np.ndarray:
    areas = []
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u = quads[:, b] - quads[:, a]
        v = quads[:, c] - quads[:, a]
        areas.append(0.5 * np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]))
    return np.min(areas, axis=0)


def _draw_samples(rng, p1, n_samples):
    n = len(p1)
    picked = []
    for _ in range(20):
        idx = np.array([rng.choice(n, 4, replace=False) for _ in range(n_samples)])
        good = _min_triangle_area(p1[idx]) >= _COLLINEAR_AREA
        picked.extend(idx[good])
        if len(picked) >= n_samples:
            return np.array(picked[:n_samples])
    if not picked:
        raise DegenerateConfiguration("all 4-point samples are degenerate (collinear)")
    return np.array(picked)


def _capped_score(M, p1, p2, cap):
    pred = np.einsum("bij,nj->bni", M[:, :, :2], p1) + M[:, None, :, 2]
    err = np.linalg.norm(pred - p2[None], axis=-1)
    return np.minimum(err, cap).mean(axis=1), err


def _ransac_affine(corr: CorrespondenceSet, cfg: FitConfig, rng):
    p1, p2 = corr.p1, corr.p2
    idx = _draw_samples(rng, p1, cfg.ransac_samples)
    with np.errstate(all="ignore"):
        M = _batched_affine(p1[idx], p2[idx])
    ok = np.all(np.isfinite(M), axis=(1, 2)) & (np.abs(np.linalg.det(M[:, :, :2])) > 1e-12)
    if not ok.any():
        raise DegenerateConfiguration("no valid affine sample")
    M = M[ok]
    score, err = _capped_score(M, p1, p2, cfg.score_cap)
    b = int(np.argmin(score))
    best, best_score = M[b], score[b]
    # polish on the winner's inliers, keep it only if the score improves
    inl = robust_inliers(err[b], cfg.inlier_floor)
    if inl.sum() >= 3:
        X = np.column_stack([p1[inl], np.ones(inl.sum())])
        sol, *_ = np.linalg.lstsq(X, p2[inl], rcond=None)
        polished = sol.T[None]
        if np.all(np.isfinite(polished)) and abs(np.linalg.det(polished[0, :, :2])) > 1e-12:
            s, _ = _capped_score(polished, p1, p2, cfg.score_cap)
            if s[0] <= best_score:
                best, best_score = polished[0], s[0]
    return AffineHomography(best[:, :2], best[:, 2]), float(best_score)


def estimate_homography(corr: CorrespondenceSet, cfg: FitConfig = FitConfig(), rng=None) -> HomographyFit:
    """Best-of-``ransac_samples`` affine homography with the anisotropy gate.

    Each random 4-subset gives a least-squares affine map; the one with the
    lowest mean transfer error over all correspondences wins (errors capped
    at ``score_cap`` so gross mismatches cannot dominate).  Winners whose
    principal scalings differ by more than ``scale_gate`` trigger a fresh
    round, up to ``scale_retries`` rounds; failing that, the winner with the
    smallest scale ratio is returned with ``gate_passed=False``.
    """
    if corr.count < MIN_CORRESPONDENCES:
        raise InsufficientMatches(f"insufficient correspondences: {corr.count} < 4")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    best = None
    for attempt in range(1, cfg.scale_retries + 1):
        H, score = _ransac_affine(corr, cfg, rng)
        ratio = scale_ratio(H)
        if ratio <= cfg.scale_gate:
            return HomographyFit(H, ratio, True, attempt, score)
        if best is None or ratio < best.scale_ratio:
            best = HomographyFit(H, ratio, False, attempt, score)
    log.info("scale gate never met; best ratio %.4f", best.scale_ratio)
    return best._replace(attempts=cfg.scale_retries)


def robust_inliers(errors: np.ndarray, floor: float) -> np.ndarray:
    """``errors <= max(floor, median + 3 * 1.4826 * MAD)``."""
    e = np.where(np.isfinite(errors), errors, np.inf)
    med = np.median(e[np.isfinite(e)]) if np.isfinite(e).any() else 0.0
    mad = np.median(np.abs(e[np.isfinite(e)] - med)) if np.isfinite(e).any() else 0.0
    return e <= max(floor, med + 3 * 1.4826 * mad)


# ----------------------------------------------------------------------------
# linear estimators


class KEstimate(NamedTuple):
    k: float
    clamped: bool
    residual: float


class K1K2Estimate(NamedTuple):
    k1: float
    k2: float
    ill_conditioned: bool
    condition: float
    product: float


def _normalise(corr, centres, norm_scales):
    c1, c2 = (np.asarray(c, dtype=float) for c in centres)
    s1, s2 = norm_scales
    return (corr.p1 - c1) / s1, (corr.p2 - c2) / s2


def _normalised_affine(H: AffineHomography, centres, norm_scales):
    c1, c2 = (np.asarray(c, dtype=float) for c in centres)
    s1, s2 = norm_scales
    return (s1 / s2) * H.A, (c2 - H.A @ c1 - H.T) / s2


def _affine_from_normalised(An, dn, centres, norm_scales) -> AffineHomography:
    c1, c2 = (np.asarray(c, dtype=float) for c in centres)
    s1, s2 = norm_scales
    A = (s2 / s1) * An
    return AffineHomography(A, c2 - A @ c1 - s2 * dn)


def _solve(M, rhs, name, required=()):
    """Minimum-norm least squares with column equilibration.

    Numerically empty columns are dropped.  Rank deficiency is tolerated
    unless the null space touches one of the ``required`` unknowns, which
    then cannot be identified ("degenerate system").
    """
    norms = np.linalg.norm(M, axis=0)
    live = norms > 1e-12 * max(norms.max(), 1e-300)
    if not live.any():
        raise DegenerateConfiguration(f"{name}: empty system")
    if any(not live[i] for i in required):
        raise DegenerateConfiguration(f"degenerate system: {name} has an empty required block")
    Ms = M[:, live] / norms[live]
    U, s, Vt = np.linalg.svd(Ms, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    sol = Vt[:rank].T @ ((U[:, :rank].T @ rhs) / s[:rank])
    if rank < Ms.shape[1] and len(required):
        pos = np.cumsum(live) - 1
        null = Vt[rank:]
        if np.abs(null[:, pos[list(required)]]).max() > 1e-6:
            raise DegenerateConfiguration(f"degenerate system: {name} is rank deficient")
    x = np.zeros(M.shape[1])
    x[live] = sol / norms[live]
    return x


def _k_residual_poly(a, b, c):
    """``R(k) = sum |k^2 a + k b + c|^2`` as polynomial coefficients (highest first)."""
    aa, bb, cc = np.sum(a * a), np.sum(b * b), np.sum(c * c)
    ab, ac, bc = np.sum(a * b), np.sum(a * c), np.sum(b * c)
    return np.array([aa, 2 * ab, bb + 2 * ac, 2 * bc, cc])


def _best_k(poly, candidates):
    cands = [float(k) for k in candidates if np.isfinite(k)]
    deriv = np.polyder(poly)
    if np.any(deriv != 0):
        cands += [float(r.real) for r in np.roots(np.trim_zeros(deriv, "f")) if abs(r.imag) < 1e-9]
    vals = [np.polyval(poly, k) for k in cands]
    i = int(np.argmin(vals))
    return cands[i], float(vals[i])


def _eq7_terms(p1n, p2n, An, dn):
    r1 = np.sum(p1n * p1n, axis=1)[:, None]
    r2 = np.sum(p2n * p2n, axis=1)[:, None]
    Ap1 = p1n @ An.T
    a = r1 * r2 * dn
    b = (r1 + r2) * dn + r1 * p2n - r2 * Ap1
    c = p2n + dn - Ap1
    return a, b, c


def linear_k_single(corr: CorrespondenceSet, H: AffineHomography, centres, norm_scales,
                    k_bound: float = 0.2) -> KEstimate:
    """Common distortion coefficient for a fixed homography.

    Solves the stacked system in ``(k^2, k)`` by least squares, then picks,
    among the linear coefficient and the stationary points of the exact
    scalar residual, the ``k`` with the smallest residual; clamped to the bound.
    """
    p1n, p2n = _normalise(corr, centres, norm_scales)
    An, dn = _normalised_affine(H, centres, norm_scales)
    a, b, c = _eq7_terms(p1n, p2n, An, dn)
    if np.linalg.norm(b) < 1e-12:
        raise DegenerateConfiguration("degenerate radii: all points at the optic centre")
    M = np.column_stack([a.ravel(), b.ravel()])
    x = _solve(M, -c.ravel(), "linear_k_single")
    k, res = _best_k(_k_residual_poly(a, b, c), [x[1]])
    clamped = abs(k) > k_bound
    return KEstimate(float(np.clip(k, -k_bound, k_bound)), bool(clamped), res)


def linear_k_and_H(corr: CorrespondenceSet, centres, norm_scales, k_bound: float = 0.2):
    """Joint linear estimate of the homography and a common coefficient.

    Unknowns (15): ``k^2 d'`` (2), ``k d'`` (2), ``k`` (1), ``k A'`` (4), ``A'`` (4),
    ``d'`` (2); at least 8 correspondences are required.  ``k`` is taken from
    the scalar block or from the ``k A'`` block against ``A'``, whichever
    leaves the smaller residual with the recovered homography.
    Returns ``(H, k)``.
    """
    n = corr.count
    if 2 * n < 15:
        raise DegenerateConfiguration(f"degenerate system: {n} correspondences for 15 unknowns")
    p1n, p2n = _normalise(corr, centres, norm_scales)
    x1, y1 = p1n.T
    x2, y2 = p2n.T
    r1 = x1 ** 2 + y1 ** 2
    r2 = x2 ** 2 + y2 ** 2
    z = np.zeros(n)
    one = np.ones(n)
    # columns: k2dx k2dy kdx kdy k kA11 kA12 kA21 kA22 A11 A12 A21 A22 dx dy
    rows_x = np.column_stack([r1 * r2, z, r1 + r2, z, r1 * x2, -r2 * x1, -r2 * y1, z, z,
                              -x1, -y1, z, z, one, z])
    rows_y = np.column_stack([z, r1 * r2, z, r1 + r2, r1 * y2, z, z, -r2 * x1, -r2 * y1,
                              z, z, -x1, -y1, z, one])
    M = np.vstack([rows_x, rows_y])
    rhs = -np.concatenate([x2, y2])
    x = _solve(M, rhs, "linear_k_and_H", required=range(9, 15))
    An = x[9:13].reshape(2, 2)
    dn = x[13:15]
    kA = x[5:9]
    k_ratio = float(kA @ An.ravel() / max(An.ravel() @ An.ravel(), 1e-300))
    a, b, c = _eq7_terms(p1n, p2n, An, dn)
    poly = _k_residual_poly(a, b, c)
    k = min((x[4], k_ratio), key=lambda v: np.polyval(poly, v))
    H = _affine_from_normalised(An, dn, centres, norm_scales)
    return H, float(np.clip(k, -k_bound, k_bound))


def _eq10_columns(p1n, p2n, An, dn):
    r1 = np.sum(p1n * p1n, axis=1)[:, None]
    r2 = np.sum(p2n * p2n, axis=1)[:, None]
    Ap1 = p1n @ An.T
    prod = (r1 * r2 * dn).ravel()
    col1 = (r1 * (dn + p2n)).ravel()
    col2 = (r2 * (dn - Ap1)).ravel()
    rhs = -(p2n + dn - Ap1).ravel()
    return prod, col1, col2, rhs


def linear_k1_k2(corr: CorrespondenceSet, H: AffineHomography, centres, norm_scales,
                 cond_limit: float = 1e8) -> K1K2Estimate:
    """Two distortion coefficients for a fixed homography.

    Least squares over ``(k1 k2, k1, k2)``; ``k1`` and ``k2`` are the linear
    coefficients, the product only serves as a diagnostic.  The estimate is
    flagged ill-conditioned when the ``k1``/``k2`` columns are nearly parallel
    (condition number above ``cond_limit``), e.g. all points at one radius.
    """
    p1n, p2n = _normalise(corr, centres, norm_scales)
    An, dn = _normalised_affine(H, centres, norm_scales)
    prod, col1, col2, rhs = _eq10_columns(p1n, p2n, An, dn)
    if np.linalg.norm(col1) < 1e-12 or np.linalg.norm(col2) < 1e-12:
        raise DegenerateConfiguration("degenerate radii")
    pair = np.column_stack([col1 / np.linalg.norm(col1), col2 / np.linalg.norm(col2)])
    cond = float(np.linalg.cond(pair))
    x = _solve(np.column_stack([prod, col1, col2]), rhs, "linear_k1_k2")
    return K1K2Estimate(float(x[1]), float(x[2]), bool(not cond < cond_limit), cond, float(x[0]))


def linear_k1_k2_H(corr: CorrespondenceSet, centres, norm_scales):
    """Joint linear estimate of the homography and both coefficients.

    Unknowns (17): ``k1 k2 d'`` (2), ``k1 d'`` (2), ``k1`` (1), ``k2 d'`` (2),
    ``k2 A'`` (4), ``A'`` (4), ``d'`` (2); at least 9 correspondences.  ``k1``
    comes from its scalar block and ``k2`` from the ``k2 A'`` block against
    ``A'``.  Returns ``(H, k1, k2)``.
    """
    n = corr.count
    if 2 * n < 17:
        raise DegenerateConfiguration(f"degenerate system: {n} correspondences for 17 unknowns")
    p1n, p2n = _normalise(corr, centres, norm_scales)
    x1, y1 = p1n.T
    x2, y2 = p2n.T
    r1 = x1 ** 2 + y1 ** 2
    r2 = x2 ** 2 + y2 ** 2
    z = np.zeros(n)
    one = np.ones(n)
    # columns: k1k2dx k1k2dy k1dx k1dy k1 k2dx k2dy k2A11 k2A12 k2A21 k2A22 A11 A12 A21 A22 dx dy
    rows_x = np.column_stack([r1 * r2, z, r1, z, r1 * x2, r2, z, -r2 * x1, -r2 * y1, z, z,
                              -x1, -y1, z, z, one, z])
    rows_y = np.column_stack([z, r1 * r2, z, r1, r1 * y2, z, r2, z, z, -r2 * x1, -r2 * y1,
                              z, z, -x1, -y1, z, one])
    M = np.vstack([rows_x, rows_y])
    rhs = -np.concatenate([x2, y2])
    x = _solve(M, rhs, "linear_k1_k2_H", required=range(11, 17))
    An = x[11:15].reshape(2, 2)
    dn = x[15:17]
    k1 = float(x[4])
    k2A = x[7:11]
    k2 = float(k2A @ An.ravel() / max(An.ravel() @ An.ravel(), 1e-300))
    return _affine_from_normalised(An, dn, centres, norm_scales), k1, k2


# ----------------------------------------------------------------------------
# nonlinear refinement


def transfer_errors(model: RegistrationModel, corr: CorrespondenceSet) -> np.ndarray:
    """Per-correspondence ``|map_1_to_2(p1) - p2|`` in pixels; ``inf`` where unmappable."""
    with np.errstate(invalid="ignore"):
        e = np.linalg.norm(model.map_1_to_2(corr.p1, strict=False) - corr.p2, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def _mean_error(model, corr) -> float:
    return float(np.mean(transfer_errors(model, corr)))


class _Residual:
    """Pixel residuals of the model in normalised parametrisation.

    Parameters: ``A'`` (4), ``d'`` (2), then ``k`` (one) or ``k1, k2`` (two).
    """

    def __init__(self, corr, d1: RadialDistortion, d2: RadialDistortion, mode: str):
        self.mode = mode
        self.s2 = d2.norm_scale
        p1n = (corr.p1 - d1.centre) / d1.norm_scale
        self.p1n = p1n
        self.r1 = np.sum(p1n * p1n, axis=1)
        self.p2n = (corr.p2 - d2.centre) / d2.norm_scale

    def __call__(self, x):
        An = x[:4].reshape(2, 2)
        dn = x[4:6]
        k1 = x[6]
        k2 = x[6] if self.mode == "one" else x[7]
        u1 = self.p1n / (1 + k1 * self.r1)[:, None]
        u2 = u1 @ An.T - dn
        disc = np.maximum(1 - 4 * k2 * np.sum(u2 * u2, axis=1), 1e-12)
        q2 = u2 * (2 / (1 + np.sqrt(disc)))[:, None]
        return (self.s2 * (q2 - self.p2n)).ravel()


def _to_params(model: RegistrationModel):
    c = (model.d1.centre, model.d2.centre)
    s = (model.d1.norm_scale, model.d2.norm_scale)
    An, dn = _normalised_affine(model.H, c, s)
    ks = [model.d1.k] if model.mode == "one" else [model.d1.k, model.d2.k]
    return np.concatenate([An.ravel(), dn, ks])


def _from_params(x, model: RegistrationModel) -> RegistrationModel:
    c = (model.d1.centre, model.d2.centre)
    s = (model.d1.norm_scale, model.d2.norm_scale)
    H = _affine_from_normalised(x[:4].reshape(2, 2), x[4:6], c, s)
    k1 = float(x[6])
    k2 = k1 if model.mode == "one" else float(x[7])
    return model.replace(H=H, d1=model.d1.with_k(k1), d2=model.d2.with_k(k2))


def refine_nonlinear(model: RegistrationModel, corr: CorrespondenceSet,
                     cfg: FitConfig = FitConfig()) -> RegistrationModel:
    """Minimise the summed squared transfer error over the affine and distortion parameters.

    One-distortion models use damped (Levenberg-Marquardt) steps, falling back
    to the bounded solver if ``k`` leaves the bound; two-distortion models use
    trust-region steps with ``|k1|, |k2| <= k_bound``.  Jacobians are forward
    differences.  The input model is returned if nothing improves on it.
    """
    if corr.count < MIN_CORRESPONDENCES:
        return model
    fun = _Residual(corr, model.d1, model.d2, model.mode)
    x0 = _to_params(model)
    n = len(x0)
    common = dict(jac="2-point", diff_step=cfg.fd_step, x_scale="jac",
                  ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=cfg.max_iter * (n + 1))
    kb = cfg.k_bound
    lb = np.r_[np.full(6, -np.inf), np.full(n - 6, -kb)]
    ub = np.r_[np.full(6, np.inf), np.full(n - 6, kb)]
    start_err = _mean_error(model, corr)
    candidates = []
    try:
        if model.mode == "one" and 2 * corr.count >= n:
            sol = least_squares(fun, x0, method="lm", **common)
            if np.all(np.abs(sol.x[6:]) <= kb):
                candidates.append(sol)
        if not candidates:
            sol = least_squares(fun, np.clip(x0, lb, ub), method="trf", bounds=(lb, ub), **common)
            candidates.append(sol)
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("nonlinear refinement failed: %s", exc)
        return model
    best = model
    best_err = start_err
    for sol in candidates:
        try:
            cand = _from_params(sol.x, model)
        except (RegistrationError, ValueError):
            continue
        err = _mean_error(cand, corr)
        if err <= best_err:
            best, best_err = cand, err
    return best.replace(fit_error=best_err if np.isfinite(best_err) else 0.0)


# ----------------------------------------------------------------------------
# full fit


@dataclass
class FitTrace:
    records: list = field(default_factory=list)
    termination: str = ""
    mode: str = ""
    gate_passed: bool = True
    scale_ratio: float = 0.0
    inliers: Optional[np.ndarray] = None

    def add(self, iteration, mean_error, k1, k2, estimator):
        self.records.append({"iteration": int(iteration), "mean_error": float(mean_error),
                             "k1": float(k1), "k2": float(k2), "estimator": estimator})

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "termination": self.termination,
            "mode": self.mode,
            "gate_passed": self.gate_passed,
            "scale_ratio": self.scale_ratio,
            "inlier_count": None if self.inliers is None else int(self.inliers.sum()),
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _linear_candidates(sub, model, mode, frames, cfg):
    centres, scales = frames
    out = []
    if mode == "one":
        try:
            ke = linear_k_single(sub, model.H, centres, scales, cfg.k_bound)
            out.append(("linear-k", model.H, ke.k, ke.k))
        except RegistrationError:
            pass
        try:
            Hj, kj = linear_k_and_H(sub, centres, scales, cfg.k_bound)
            out.append(("linear-k-H", Hj, kj, kj))
        except RegistrationError:
            pass
    else:
        try:
            e = linear_k1_k2(sub, model.H, centres, scales)
            out.append(("linear-k1-k2", model.H, e.k1, e.k2))
        except RegistrationError:
            pass
        try:
            Hj, k1, k2 = linear_k1_k2_H(sub, centres, scales)
            out.append(("linear-k1-k2-H", Hj, k1, k2))
        except RegistrationError:
            pass
    return out


def fit(corr: CorrespondenceSet, cfg: FitConfig, meta: PairMeta):
    """Fit the full model; returns ``(RegistrationModel, FitTrace)``.

    After the robust homography, each iteration recomputes the inlier set,
    runs the linear estimator given the current homography and the joint
    linear estimator, and keeps whichever candidate has the lower mean
    inlier transfer error.  The loop ends when that error drops below
    ``epsilon`` (normalised units, scaled to pixels), improves by less than
    ``tol`` relative, hits ``max_iter``, or (two distortions) an estimate
    leaves the coefficient bound, in which case the lowest-error iterate is
    kept.  Nonlinear refinement on the inliers finishes the fit.
    """
    mode = resolve_mode(cfg.mode, meta)
    d1, d2 = meta.distortions()
    frames = ((d1.centre, d2.centre), (d1.norm_scale, d2.norm_scale))
    rng = np.random.default_rng(cfg.seed)
    hfit = estimate_homography(corr, cfg, rng)

    trace = FitTrace(mode=mode, gate_passed=hfit.gate_passed, scale_ratio=hfit.scale_ratio)
    model = RegistrationModel(hfit.H, d1, d2, mode)
    errs = transfer_errors(model, corr)
    inl = robust_inliers(errs, cfg.inlier_floor)
    err = float(errs[inl].mean())
    trace.add(0, err, 0.0, 0.0, "homography")
    history = [(err, model, inl)]
    threshold = cfg.epsilon * max(d1.norm_scale, d2.norm_scale)
    termination = "max-iter"
    n = 0

    if err < threshold and err == 0.0:
        termination = "converged"
    else:
        for n in range(1, cfg.max_iter + 1):
            sub = corr.subset(inl)
            cands = _linear_candidates(sub, model, mode, frames, cfg)
            if not cands:
                termination = "stalled"
                break
            if mode == "two" and any(max(abs(c[2]), abs(c[3])) > cfg.k_bound for c in cands):
                bad = next(c for c in cands if max(abs(c[2]), abs(c[3])) > cfg.k_bound)
                trace.add(n, float("nan"), bad[2], bad[3], bad[0])
                termination = "k-out-of-bounds"
                break
            scored = []
            for name, H, k1, k2 in cands:
                m = model.replace(H=H, d1=d1.with_k(k1), d2=d2.with_k(k2), iterations=n)
                e = transfer_errors(m, corr)
                scored.append((float(np.mean(e[inl])), name, m, e))
            _, name, model, e = min(scored, key=lambda s: s[0])
            inl = robust_inliers(e, cfg.inlier_floor)
            err_n = float(e[inl].mean())
            trace.add(n, err_n, model.d1.k, model.d2.k, name)
            history.append((err_n, model, inl))
            prev = history[-2][0]
            if err_n < threshold:
                termination = "converged"
                break
            if prev > 0 and (prev - err_n) / prev < cfg.tol:
                termination = "stalled"
                break

    linear_err, linear_model, linear_inl = min(history, key=lambda h: h[0])
    model, inl = linear_model, linear_inl
    for _ in range(cfg.refine_rounds):
        model = refine_nonlinear(model, corr.subset(inl), cfg)
        e = transfer_errors(model, corr)
        new_inl = robust_inliers(e, cfg.inlier_floor)
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    fit_error = float(transfer_errors(model, corr)[inl].mean())
    if not fit_error <= linear_err:
        # refinement drifted onto a different inlier set; keep the linear result
        log.debug("refined error %.4g above linear-stage %.4g", fit_error, linear_err)
        model, inl, fit_error = linear_model, linear_inl, linear_err
    model = model.replace(fit_error=fit_error, iterations=n)
    trace.add(n + 1, fit_error, model.d1.k, model.d2.k, "refine")
    trace.termination = termination
    trace.inliers = inl
    return model, trace

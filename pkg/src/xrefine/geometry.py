"""Two-view epipolar geometry, robust essential-matrix estimation, pose metrics and DLT.

Conventions: a relative pose (R, t) maps camera-1 coordinates to camera-2
coordinates, ``X2 = R @ X1 + t``; the essential matrix ``E = [t]x R`` satisfies
``x2^T E x1 = 0`` for homogeneous normalized image points. Camera poses for
multi-view work are world-to-camera ``(R, t)`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfigurationError(ValueError):
    pass


class EstimationError(RuntimeError):
    """Robust estimation produced no usable model."""


FAILURE_ERROR_DEG = 180.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def mean_focal(self):
        return 0.5 * (self.fx + self.fy)

    def normalize(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([(pts[..., 0] - self.cx) / self.fx, (pts[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([pts[..., 0] * self.fx + self.cx, pts[..., 1] * self.fy + self.cy], axis=-1)

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class PoseError:
    rot_err: float
    trans_dir_err: float

    @property
    def combined(self):
        return max(self.rot_err, self.trans_dir_err)


def skew(v):
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    return rotation_from_axis_angle(axis, rng.uniform(-max_angle, max_angle))


def essential_from_pose(pose):
    t = pose.translation
    if np.linalg.norm(t) == 0:
        raise ValueError("zero translation: epipolar geometry undefined")
    return skew(t) @ pose.rotation


def _homog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------

SYMMETRIC = "symmetric"
SAMPSON = "sampson"


def epipolar_residual(E, x1, x2, kind=SAMPSON, return_grad=False, strict=True):
    """Squared epipolar error of normalized correspondences.

    ``x1``, ``x2`` are (..., 2) normalized points; ``E`` is (3,3) or broadcastable
    (..., 3, 3). ``kind`` is ``"sampson"`` (algebraic error squared over the
    Sampson denominator) or ``"symmetric"`` (sum of squared point-to-line
    distances in both images). With ``return_grad`` also returns the gradients
    with respect to ``x1`` and ``x2``. ``strict=False`` skips the degenerate-line
    check, for scoring many hypotheses at once.
    """
    E = np.asarray(E, dtype=np.float64)
    h1 = _homog(x1)
    h2 = _homog(x2)
    l2 = np.einsum("...ij,...j->...i", E, h1)  # epipolar lines in image 2
    l1 = np.einsum("...ji,...j->...i", E, h2)  # epipolar lines in image 1
    r = np.sum(h2 * l2, axis=-1)
    n2 = l2[..., 0] ** 2 + l2[..., 1] ** 2
    n1 = l1[..., 0] ** 2 + l1[..., 1] ** 2
    if kind == SAMPSON:
        den = n1 + n2
        if strict and np.any(den < 1e-30):
            raise DegenerateConfigurationError("degenerate epipolar line")
        res = r * r / den
    elif kind == SYMMETRIC:
        if strict and (np.any(n1 < 1e-30) or np.any(n2 < 1e-30)):
            raise DegenerateConfigurationError("degenerate epipolar line")
        res = r * r / n2 + r * r / n1
    else:
        raise ValueError(f"unknown residual kind {kind!r}")
    if not return_grad:
        return res

    # d n2 / d x1_j = 2 (l2_0 E_0j + l2_1 E_1j); d n1 / d x2_j = 2 (l1_0 E_j0 + l1_1 E_j1)
    dn2_dx1 = 2 * (l2[..., 0, None] * E[..., 0, :2] + l2[..., 1, None] * E[..., 1, :2])
    dn1_dx2 = 2 * (l1[..., 0, None] * E[..., :2, 0] + l1[..., 1, None] * E[..., :2, 1])
    dr_dx1 = l1[..., :2]
    dr_dx2 = l2[..., :2]
    r_ = r[..., None]
    if kind == SAMPSON:
        den_ = den[..., None]
        g1 = 2 * r_ * dr_dx1 / den_ - (r_ * r_) / den_**2 * dn2_dx1
        g2 = 2 * r_ * dr_dx2 / den_ - (r_ * r_) / den_**2 * dn1_dx2
    else:
        n1_, n2_ = n1[..., None], n2[..., None]
        g1 = 2 * r_ * dr_dx1 * (1 / n1_ + 1 / n2_) - (r_ * r_) / n2_**2 * dn2_dx1
        g2 = 2 * r_ * dr_dx2 * (1 / n1_ + 1 / n2_) - (r_ * r_) / n1_**2 * dn1_dx2
    return res, g1, g2


def sampson_px(E, x1, x2, focal):
    """Sampson distance (not squared) converted to pixels via ``focal``."""
    return np.sqrt(epipolar_residual(E, x1, x2, SAMPSON)) * focal


# --------------------------------------------------------------------------
# eight-point solver
# --------------------------------------------------------------------------


def _hartley(x):
    # x: (..., M, 2) -> normalized points and (..., 3, 3) transforms
    mean = x.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(x - mean, axis=-1).mean(axis=-1)
    # coincident points keep unit scale; the design matrix then flags the degeneracy
    s = np.where(d > 1e-12, np.sqrt(2.0) / np.where(d > 1e-12, d, 1.0), 1.0)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * mean[..., 0, 0]
    T[..., 1, 2] = -s * mean[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - mean) * s[..., None, None]
    return xn, T


def _eight_point_batch(x1, x2, rank_tol=1e-10):
    """Batched eight-point solve. Returns (E of shape (..., 3, 3), ok mask)."""
    x1n, T1 = _hartley(x1)
    x2n, T2 = _hartley(x2)
    u1, v1 = x1n[..., 0], x1n[..., 1]
    u2, v2 = x2n[..., 0], x2n[..., 1]
    one = np.ones_like(u1)
    A = np.stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, one], axis=-1)
    if A.shape[-2] < 9:
        A = np.concatenate([A, np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))], axis=-2)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    ok = s[..., 7] > rank_tol * s[..., 0]
    F = vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    E = np.swapaxes(T2, -1, -2) @ F @ T1
    u, sv, vt = np.linalg.svd(E)
    sigma = 0.5 * (sv[..., 0] + sv[..., 1])
    E = (u * np.stack([sigma, sigma, np.zeros_like(sigma)], axis=-1)[..., None, :]) @ vt
    E = E / np.linalg.norm(E, axis=(-2, -1), keepdims=True)
    return E, ok


def eight_point(x1, x2):
    """Normalized eight-point essential matrix from >= 8 normalized correspondences.

    The result is projected to singular values (s, s, 0) and scaled to unit
    Frobenius norm.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != 2:
        raise ValueError(f"expected matching (M,2) arrays, got {x1.shape} and {x2.shape}")
    if len(x1) < 8:
        raise ValueError(f"eight-point needs at least 8 correspondences, got {len(x1)}")
    E, ok = _eight_point_batch(x1, x2)
    if not ok or not np.isfinite(E).all():
        raise DegenerateConfigurationError("rank-deficient design matrix (degenerate configuration)")
    return E


# --------------------------------------------------------------------------
# RANSAC
# --------------------------------------------------------------------------


def _pair_focal(k1, k2):
    return 0.5 * (k1.mean_focal + k2.mean_focal)


def essential_inliers(E, x1_px, x2_px, k1, k2, threshold_px=1.0):
    """Inlier mask: Sampson distance, in pixels, below ``threshold_px``."""
    x1 = k1.normalize(x1_px)
    x2 = k2.normalize(x2_px)
    return sampson_px(E, x1, x2, _pair_focal(k1, k2)) < threshold_px


def ransac_essential(x1_px, x2_px, k1, k2, iterations=1000, threshold_px=1.0, seed=0):
    """Robust essential matrix from pixel correspondences.

    Minimal eight-point hypotheses are scored by the truncated quadratic cost
    ``sum(min(r^2, thr^2))`` (inliers are ``r < thr``); the best hypothesis is
    refit on its inliers. Returns ``(E, inlier_mask)``; raises
    :class:`EstimationError` when fewer than eight inliers support any model.
    """
    x1_px = np.asarray(x1_px, dtype=np.float64)
    x2_px = np.asarray(x2_px, dtype=np.float64)
    m = len(x1_px)
    if m < 8 or x2_px.shape != x1_px.shape:
        raise ValueError(f"RANSAC needs at least 8 matching correspondences, got {m}")
    x1 = k1.normalize(x1_px)
    x2 = k2.normalize(x2_px)
    focal = _pair_focal(k1, k2)
    thr_sq = (threshold_px / focal) ** 2

    rng = np.random.default_rng(seed)
    idx = np.argpartition(rng.random((iterations, m)), 7, axis=1)[:, :8]
    hyps, ok = _eight_point_batch(x1[idx], x2[idx])
    ok &= np.isfinite(hyps).all(axis=(1, 2))
    best_cost, best_count, best_mask, best_E = np.inf, -1, None, None
    chunk = max(1, 2_000_000 // m)
    for start in range(0, iterations, chunk):
        H = hyps[start:start + chunk]
        with np.errstate(divide="ignore", invalid="ignore"):
            res = epipolar_residual(H[:, None], x1[None], x2[None], SAMPSON, strict=False)
        mask = res < thr_sq
        # truncated-quadratic (MSAC) cost; ties in inlier count go to the tighter fit
        cost = np.where(ok[start:start + chunk], np.minimum(np.nan_to_num(res, nan=thr_sq), thr_sq).sum(axis=1), np.inf)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost, best_count, best_mask, best_E = cost[j], int(mask[j].sum()), mask[j], H[j]
    if best_count < 8:
        raise EstimationError(f"only {max(best_count, 0)} inliers found")

    try:
        E = eight_point(x1[best_mask], x2[best_mask])
        res = epipolar_residual(E, x1, x2, SAMPSON)
        mask = res < thr_sq
        if np.minimum(res, thr_sq).sum() > best_cost:
            E, mask = best_E, best_mask
    except DegenerateConfigurationError:
        E, mask = best_E, best_mask
    return E, mask


# --------------------------------------------------------------------------
# pose recovery
# --------------------------------------------------------------------------


def triangulate_two_view(R, t, x1, x2):
    """Linear triangulation of normalized points for cameras [I|0] and [R|t]; returns (M,3)."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack(
        [
            x1[:, 0, None] * P1[2] - P1[0],
            x1[:, 1, None] * P1[2] - P1[1],
            x2[:, 0, None] * P2[2] - P2[0],
            x2[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:]


def pose_candidates(E):
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    R1 = u @ W @ vt
    R2 = u @ W.T @ vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_count(R, t, x1, x2):
    X1 = triangulate_two_view(R, t, x1, x2)
    X2 = X1 @ R.T + t
    good = np.isfinite(X1).all(axis=1) & (X1[:, 2] > 0) & (X2[:, 2] > 0)
    return int(good.sum())


def recover_pose(E, x1_px, x2_px, k1, k2, mask=None):
    """Pick the (R, t) decomposition of ``E`` with the most points in front of both cameras."""
    x1 = k1.normalize(x1_px)
    x2 = k2.normalize(x2_px)
    if mask is not None:
        x1, x2 = x1[mask], x2[mask]
    if len(x1) < 1:
        raise ValueError("pose recovery needs at least one correspondence")
    counts = [cheirality_count(R, t, x1, x2) for R, t in pose_candidates(E)]
    best = int(np.argmax(counts))
    if 2 * counts[best] <= len(x1):
        raise EstimationError("no decomposition puts a majority of points in front of both cameras")
    R, t = pose_candidates(E)[best]
    # re-orthonormalize against SVD round-off
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RelativePose(R, t / np.linalg.norm(t))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def rotation_angle_deg(R_a, R_b):
    # chord form stays accurate for tiny angles where arccos does not
    chord = np.linalg.norm(R_a - R_b) / (2 * np.sqrt(2))
    return float(np.degrees(2 * np.arcsin(min(1.0, chord))))


def angle_between_deg(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def pose_error(estimate, ground_truth):
    if np.linalg.norm(ground_truth.translation) == 0:
        raise ValueError("ground-truth translation is zero: direction error undefined")
    if np.linalg.norm(estimate.translation) == 0:
        raise ValueError("estimated translation is zero: direction error undefined")
    return PoseError(
        rotation_angle_deg(estimate.rotation, ground_truth.rotation),
        angle_between_deg(estimate.translation, ground_truth.translation),
    )


def auc(errors, thresholds=(5.0, 10.0, 20.0)):
    """Area under the cumulative pose-error recall curve up to each threshold, in percent.

    The recall curve is the empirical step CDF of the errors, so the normalized
    integral up to ``tau`` equals ``mean(max(0, 1 - err / tau))``.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("AUC of an empty error list")
    return [float(100.0 * np.mean(np.clip(1.0 - e / tau, 0.0, None))) for tau in thresholds]


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------


def projection_matrix(k, R, t):
    return k.matrix @ np.hstack([np.asarray(R), np.reshape(t, (3, 1))])


def project(k, R, t, X):
    Xc = np.asarray(X) @ np.asarray(R).T + np.asarray(t)
    uv = Xc[..., :2] / Xc[..., 2:]
    return np.stack([uv[..., 0] * k.fx + k.cx, uv[..., 1] * k.fy + k.cy], axis=-1)


def camera_center(R, t):
    return -np.asarray(R).T @ np.asarray(t)


def look_at(center, target, roll=0.0, down=(0.0, 1.0, 0.0)):
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``.

    The image y axis follows the world ``down`` direction; ``roll`` (radians)
    rotates the image about the optical axis.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    if roll:
        c, s = np.cos(roll), np.sin(roll)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    return R, -R @ center


def triangulate_dlt(observations, max_condition=1e12):
    """DLT triangulation of one point from >= 2 posed pixel observations.

    ``observations`` is a sequence of ``(intrinsics, R, t, uv)``. Returns
    ``(point, rms_reprojection_px)``.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two views")
    centers = np.array([camera_center(R, t) for _, R, t, _ in observations])
    spread = np.abs(centers - centers[0]).max()
    if spread <= 1e-12 * max(1.0, np.abs(centers).max()):
        raise DegenerateConfigurationError("parallel rays: all camera centers coincide")
    rows = []
    for k, R, t, uv in observations:
        P = projection_matrix(k, R, t)
        u, v = uv
        for row in (u * P[2] - P[0], v * P[2] - P[1]):
            rows.append(row / np.linalg.norm(row))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[2] <= s[0] / max_condition:
        raise DegenerateConfigurationError("parallel rays: triangulation is ill-conditioned")
    X = vt[-1]
    if abs(X[3]) <= 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateConfigurationError("parallel rays: point at infinity")
    X = X[:3] / X[3]
    res = [np.linalg.norm(project(k, R, t, X) - np.asarray(uv)) for k, R, t, uv in observations]
    return X, float(np.sqrt(np.mean(np.square(res))))

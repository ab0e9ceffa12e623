"""Synthetic ground-truth scenes, patch sampling and the match perturbation procedure.

Two scene kinds are provided:

* ``homography``: a procedural texture and its warp by a random homography.
  Exact pixel correspondences, no camera model.
* ``room``: cameras inside an axis-aligned textured box. Every ray from an
  interior camera exits through exactly one wall, so there is no occlusion,
  depth is exact and the visible surface is piecewise planar (non-degenerate
  for essential-matrix estimation).

Pixel ``(row i, col j)`` has its center at image coordinates ``(x=j, y=i)``.
Per-sample seeds are derived with ``numpy.random.SeedSequence([seed, index])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, RelativePose, essential_from_pose, look_at, project

PATCH_SIZE = 11


class InsufficientAreaError(ValueError):
    pass


def derive_seed(seed, *index):
    """Independent child seed for ``(seed, *index)``."""
    return int(np.random.SeedSequence([int(seed), *[int(i) for i in index]]).generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------
# texture
# --------------------------------------------------------------------------


class ValueNoiseTexture:
    """Band-limited value noise: a sum of smoothly interpolated random lattices.

    ``periods`` are lattice spacings in texture units (coarse to fine);
    the sum is contrast-stretched into (0, 1).
    """

    def __init__(self, seed, periods=(8.0, 4.0, 2.0, 1.0), amplitudes=(1.0, 0.7, 0.5, 0.35),
                 lattice=256, gain=4.0):
        rng = np.random.default_rng(seed)
        self.periods = tuple(float(p) for p in periods)
        self.amplitudes = tuple(float(a) for a in amplitudes)
        self.lattices = [rng.random((lattice, lattice)) for _ in self.periods]
        self.offsets = rng.random((len(self.periods), 2)) * lattice
        self.size = lattice
        self.gain = gain

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        total = np.zeros(np.broadcast(u, v).shape)
        for grid, period, amp, off in zip(self.lattices, self.periods, self.amplitudes, self.offsets):
            su = u / period + off[0]
            sv = v / period + off[1]
            iu = np.floor(su)
            iv = np.floor(sv)
            fu = _fade(su - iu)
            fv = _fade(sv - iv)
            iu = iu.astype(np.int64) % self.size
            iv = iv.astype(np.int64) % self.size
            ju = (iu + 1) % self.size
            jv = (iv + 1) % self.size
            top = grid[iv, iu] * (1 - fu) + grid[iv, ju] * fu
            bot = grid[jv, iu] * (1 - fu) + grid[jv, ju] * fu
            total += amp * (top * (1 - fv) + bot * fv)
        total /= sum(self.amplitudes)
        return 0.5 + 0.5 * np.tanh(self.gain * (total - 0.5))


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "room"
    width: int = 640
    height: int = 480
    focal: float = 560.0
    # homography kind
    max_rotation_deg: float = 30.0
    scale_range: tuple = (0.8, 1.25)
    max_perspective: float = 2e-4
    max_translation: float = 10.0
    # room kind: box half extents and far wall depth, camera placement
    room_half_width: float = 1.2
    room_half_height: float = 0.9
    room_near: float = -1.0
    room_far: float = 2.5
    baseline_range: tuple = (0.5, 0.8)
    max_roll_deg: float = 8.0
    target_jitter: float = 0.3
    target_spread: float = 0.9
    texture_period: float = 0.02

    def __post_init__(self):
        if self.kind not in ("room", "homography"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.width < 64 or self.height < 64:
            raise ValueError(f"image size must be at least 64x64, got {self.width}x{self.height}")

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2)


class BoxRoom:
    """Textured axis-aligned box; cameras must sit strictly inside it."""

    def __init__(self, lo, hi, seed, texture_period=0.06):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        p = texture_period
        self.textures = [
            ValueNoiseTexture(derive_seed(seed, face), periods=(8 * p, 4 * p, 2 * p, p)) for face in range(6)
        ]

    def contains(self, X):
        X = np.asarray(X)
        return np.all((X > self.lo) & (X < self.hi), axis=-1)

    def cast(self, origin, dirs):
        """Exit point and face index of rays ``origin + s * dirs`` (s > 0)."""
        dirs = np.asarray(dirs, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(dirs > 0, self.hi, self.lo)
            s = (bound - origin) / dirs
        s = np.where(np.abs(dirs) > 0, s, np.inf)
        axis = np.argmin(s, axis=-1)
        depth = np.take_along_axis(s, axis[..., None], axis=-1)[..., 0]
        X = origin + depth[..., None] * dirs
        face = 2 * axis + (np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0)
        return X, face

    def shade(self, X, face):
        out = np.zeros(X.shape[:-1])
        for f, tex in enumerate(self.textures):
            m = face == f
            if not m.any():
                continue
            axis = f // 2
            uv = np.delete(X[m], axis, axis=-1)
            out[m] = tex(uv[:, 0], uv[:, 1])
        return out

    def distance_to_surface(self, X):
        """Euclidean distance from points to the box boundary."""
        X = np.asarray(X, dtype=np.float64)
        inside = self.contains(X)
        d_in = np.minimum(X - self.lo, self.hi - X).min(axis=-1)
        excess = np.maximum(np.maximum(self.lo - X, X - self.hi), 0.0)
        d_out = np.linalg.norm(excess, axis=-1)
        return np.where(inside, d_in, d_out)


@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def rays(self, pts):
        n = self.intrinsics.normalize(pts)
        d = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
        return d @ self.rotation  # rotation.T applied to row vectors

    def project(self, X):
        return project(self.intrinsics, self.rotation, self.translation, X)

    def depth(self, X):
        return (np.asarray(X) @ self.rotation.T + self.translation)[..., 2]


def _pixel_grid(width, height):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def render(room, camera, width, height):
    pts = _pixel_grid(width, height)
    X, face = room.cast(camera.center, camera.rays(pts))
    return room.shade(X, face)


def in_bounds(pts, width, height, margin=0.0):
    pts = np.asarray(pts)
    return (
        (pts[..., 0] >= margin)
        & (pts[..., 0] <= width - 1 - margin)
        & (pts[..., 1] >= margin)
        & (pts[..., 1] <= height - 1 - margin)
    )


@dataclass
class ScenePair:
    """Two images with an exact correspondence map between them."""

    image_a: np.ndarray
    image_b: np.ndarray
    intrinsics_a: CameraIntrinsics | None
    intrinsics_b: CameraIntrinsics | None
    pose: RelativePose | None
    kind: str
    seed: int
    homography: np.ndarray | None = None
    room: BoxRoom | None = None
    cameras: tuple = ()

    @property
    def essential(self):
        return None if self.pose is None else essential_from_pose(self.pose)

    def map_ab(self, pts):
        """Exact correspondence in image B of image-A points (M,2)."""
        return self._map(pts, 0, 1)

    def map_ba(self, pts):
        return self._map(pts, 1, 0)

    def _map(self, pts, src, dst):
        pts = np.asarray(pts, dtype=np.float64)
        if self.kind == "homography":
            H = self.homography if src == 0 else np.linalg.inv(self.homography)
            return _apply_homography(H, pts)
        X, _ = self.room.cast(self.cameras[src].center, self.cameras[src].rays(pts))
        return self.cameras[dst].project(X)

    def depth_a(self, pts):
        """Depth along camera A's optical axis of the surface seen at ``pts`` (room scenes)."""
        X, _ = self.room.cast(self.cameras[0].center, self.cameras[0].rays(np.asarray(pts, dtype=np.float64)))
        return self.cameras[0].depth(X)


def _apply_homography(H, pts):
    h = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ H.T
    return h[..., :2] / h[..., 2:]


def random_homography(rng, config, max_tries=100):
    """Rotation/scale/perspective/translation about the image center, kept invertible on the image."""
    w, h = config.width, config.height
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    for _ in range(max_tries):
        ang = np.radians(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        scale = np.exp(rng.uniform(np.log(config.scale_range[0]), np.log(config.scale_range[1])))
        p = rng.uniform(-config.max_perspective, config.max_perspective, size=2)
        tr = rng.uniform(-config.max_translation, config.max_translation, size=2)
        A = np.eye(3)
        A[:2, :2] = scale * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        A[2, :2] = p
        T0 = np.array([[1, 0, -c[0]], [0, 1, -c[1]], [0, 0, 1.0]])
        T1 = np.array([[1, 0, c[0] + tr[0]], [0, 1, c[1] + tr[1]], [0, 0, 1.0]])
        H = T1 @ A @ T0
        wz = np.concatenate([corners, np.ones((4, 1))], axis=1) @ H[2]
        if np.all(wz > 0.2) and abs(np.linalg.det(H)) > 1e-6:
            return H / H[2, 2]
    raise ValueError(f"no admissible homography after {max_tries} samples")


def homography_pair(H, seed=0, config=None):
    """Pair whose image B is the texture of image A warped by ``H`` (A -> B)."""
    config = config or SceneConfig(kind="homography")
    H = np.asarray(H, dtype=np.float64)
    tex = ValueNoiseTexture(derive_seed(seed, 0), periods=(20.0, 10.0, 5.0, 2.5))
    pts = _pixel_grid(config.width, config.height)
    img_a = tex(pts[..., 0], pts[..., 1])
    src = _apply_homography(np.linalg.inv(H), pts)
    img_b = tex(src[..., 0], src[..., 1])
    return ScenePair(img_a, img_b, None, None, None, "homography", seed, homography=H)


def _room_for(config, seed):
    lo = (-config.room_half_width, -config.room_half_height, config.room_near)
    hi = (config.room_half_width, config.room_half_height, config.room_far)
    return BoxRoom(lo, hi, derive_seed(seed, 1), config.texture_period)


def _offset_center(rng, config, c0, margin=0.1, max_tries=100):
    lo = np.array([-config.room_half_width, -config.room_half_height, config.room_near]) + margin
    hi = np.array([config.room_half_width, config.room_half_height, config.room_far]) - margin
    for _ in range(max_tries):
        d = rng.normal(size=3)
        d[2] *= 0.3
        d /= np.linalg.norm(d)
        center = c0 + d * rng.uniform(*config.baseline_range)
        if np.all((center > lo) & (center < hi)):
            return center
    raise ValueError("could not place a camera inside the room")


def _random_camera_rig(rng, config, n_views):
    """Cameras near the room origin all looking at a shared region of the far wall."""
    K = config.intrinsics
    hw, hh = config.room_half_width, config.room_half_height
    c0 = np.array([rng.uniform(-0.25, 0.25) * hw, rng.uniform(-0.2, 0.2) * hh, rng.uniform(0.0, 0.5)])
    f = config.target_spread
    target = np.array([rng.uniform(-f, f) * hw, rng.uniform(-f, f) * hh, config.room_far])
    cams = []
    center = c0
    for i in range(n_views):
        if i > 0:
            center = _offset_center(rng, config, c0)
        tgt = target + (rng.uniform(-config.target_jitter, config.target_jitter, size=3) * [1, 1, 0] if i else 0)
        roll = np.radians(rng.uniform(-config.max_roll_deg, config.max_roll_deg)) if i else 0.0
        R, t = look_at(center, tgt, roll)
        cams.append(Camera(K, R, t))
    return cams


def generate_pair(seed, config=None):
    """Synthetic image pair with exact ground truth, reproducible from ``seed``."""
    config = config or SceneConfig()
    rng = np.random.default_rng(derive_seed(seed, 0))
    if config.kind == "homography":
        return homography_pair(random_homography(rng, config), seed, config)
    room = _room_for(config, seed)
    cam_a, cam_b = _random_camera_rig(rng, config, 2)
    img_a = render(room, cam_a, config.width, config.height)
    img_b = render(room, cam_b, config.width, config.height)
    R = cam_b.rotation @ cam_a.rotation.T
    t = cam_b.translation - R @ cam_a.translation
    return ScenePair(
        img_a, img_b, cam_a.intrinsics, cam_b.intrinsics, RelativePose(R, t), "room", seed,
        room=room, cameras=(cam_a, cam_b),
    )


@dataclass
class MultiViewScene:
    room: BoxRoom
    cameras: list
    images: list
    seed: int

    @property
    def width(self):
        return self.images[0].shape[1]

    @property
    def height(self):
        return self.images[0].shape[0]


def generate_multiview(seed, n_views, config=None):
    config = config or SceneConfig()
    if n_views < 2:
        raise ValueError("a multi-view scene needs at least two cameras")
    rng = np.random.default_rng(derive_seed(seed, 0))
    room = _room_for(config, seed)
    cams = _random_camera_rig(rng, config, n_views)
    images = [render(room, c, config.width, config.height) for c in cams]
    return MultiViewScene(room, cams, images, seed)


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------


def to_grayscale(rgb):
    """Luma (0.299, 0.587, 0.114) of an (H,W,3) image, clamped to [0,1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H,W,3) image, got shape {rgb.shape}")
    if rgb.dtype == np.uint8:
        rgb = rgb / 255.0
    # the three weights sum to 1 - 1ulp in binary; renormalize so white maps to exactly 1
    gray = (rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114) / (0.299 + 0.587 + 0.114)
    return np.clip(gray, 0.0, 1.0)


def as_float_image(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image / 255.0
    return image.astype(np.float64, copy=False)


def patch_fits(centers, width, height, size=PATCH_SIZE):
    return in_bounds(centers, width, height, margin=(size - 1) / 2)


def extract_patches(image, centers, size=PATCH_SIZE):
    """Bilinear (M,size,size) patches centered at sub-pixel ``centers`` (M,2).

    Intensities are in [0,1] (uint8 images are divided by 255). Every sample
    position must lie inside the image.
    """
    img = as_float_image(image)
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    h, w = img.shape
    if not patch_fits(c, w, h, size).all():
        raise ValueError("patch support leaves the image")
    r = (size - 1) // 2
    off = np.arange(-r, r + 1)
    # the grid offsets are integers, so every sample of a patch shares the center's fractional part
    base = np.floor(c)
    frac = c - base
    base = base.astype(np.int64)
    x0 = base[:, 0, None] + off  # (M, size)
    y0 = base[:, 1, None] + off
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    Y0, Y1 = y0[:, :, None], y1[:, :, None]
    X0, X1 = x0[:, None, :], x1[:, None, :]
    FX, FY = frac[:, 0, None, None], frac[:, 1, None, None]
    top = img[Y0, X0] * (1 - FX) + img[Y0, X1] * FX
    bot = img[Y1, X0] * (1 - FX) + img[Y1, X1] * FX
    return top * (1 - FY) + bot * FY


def extract_patch(image, center, size=PATCH_SIZE):
    """Single bilinear patch at a sub-pixel center (x, y)."""
    img = as_float_image(image)
    h, w = img.shape
    if not patch_fits(np.asarray(center, dtype=np.float64), w, h, size):
        raise ValueError(f"patch at {tuple(center)} leaves the {w}x{h} image")
    return extract_patches(img, np.asarray(center, dtype=np.float64)[None], size)[0]


# --------------------------------------------------------------------------
# matches
# --------------------------------------------------------------------------


@dataclass
class MatchSample:
    patch_a: np.ndarray
    patch_b: np.ndarray
    keypoint_a: np.ndarray
    keypoint_b: np.ndarray
    true_a: np.ndarray
    true_b: np.ndarray
    gt_essential: np.ndarray | None

    @property
    def true_offset_a(self):
        return self.true_a - self.keypoint_a

    @property
    def true_offset_b(self):
        return self.true_b - self.keypoint_b


@dataclass
class MatchSet:
    """Struct-of-arrays batch of perturbed matches with their patches and ground truth."""

    patches_a: np.ndarray
    patches_b: np.ndarray
    keypoints_a: np.ndarray
    keypoints_b: np.ndarray
    true_a: np.ndarray
    true_b: np.ndarray
    essential: np.ndarray | None  # (n,3,3)
    intrinsics_a: np.ndarray | None  # (n,4) fx fy cx cy
    intrinsics_b: np.ndarray | None
    pair_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.keypoints_a)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return MatchSample(
                self.patches_a[i], self.patches_b[i], self.keypoints_a[i], self.keypoints_b[i],
                self.true_a[i], self.true_b[i], None if self.essential is None else self.essential[i],
            )
        return self.subset(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx):
        def take(a):
            return None if a is None else a[idx]

        return MatchSet(
            take(self.patches_a), take(self.patches_b), take(self.keypoints_a), take(self.keypoints_b),
            take(self.true_a), take(self.true_b), take(self.essential), take(self.intrinsics_a),
            take(self.intrinsics_b), take(self.pair_index),
        )

    @property
    def true_offset_a(self):
        return self.true_a - self.keypoints_a

    @property
    def true_offset_b(self):
        return self.true_b - self.keypoints_b

    @staticmethod
    def concat(sets):
        sets = list(sets)

        def cat(name):
            vals = [getattr(s, name) for s in sets]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return MatchSet(*(cat(f) for f in (
            "patches_a", "patches_b", "keypoints_a", "keypoints_b", "true_a", "true_b",
            "essential", "intrinsics_a", "intrinsics_b", "pair_index",
        )))


def sample_correspondences(pair, n, seed, margin=(PATCH_SIZE - 1) / 2, max_rounds=50):
    """``n`` exact correspondences uniformly over A whose images lie inside B (both with ``margin``)."""
    rng = np.random.default_rng(seed)
    h, w = pair.image_a.shape
    hb, wb = pair.image_b.shape
    got_a, got_b = [], []
    count = 0
    for _ in range(max_rounds):
        if count >= n:
            break
        m = max(64, 2 * (n - count))
        pa = np.stack([rng.uniform(margin, w - 1 - margin, m), rng.uniform(margin, h - 1 - margin, m)], axis=-1)
        pb = pair.map_ab(pa)
        ok = np.isfinite(pb).all(axis=1) & in_bounds(pb, wb, hb, margin)
        got_a.append(pa[ok])
        got_b.append(pb[ok])
        count += int(ok.sum())
    if count < n:
        raise InsufficientAreaError(f"only {count} of {n} correspondences fit in the overlap")
    return np.concatenate(got_a)[:n], np.concatenate(got_b)[:n]


def sample_training_matches(pair, n=4096, noise_std=1.5, seed=0, patch_size=PATCH_SIZE, pair_index=0,
                            max_rounds=50):
    """Perturbed matches with patches cropped at the perturbed keypoints.

    True correspondences are drawn uniformly over the overlap; both keypoints
    get independent N(0, noise_std^2) offsets per axis. Samples whose patch
    support would leave either image are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    r = (patch_size - 1) / 2
    h, w = pair.image_a.shape
    hb, wb = pair.image_b.shape
    parts = []
    count = 0
    for _ in range(max_rounds):
        if count >= n:
            break
        m = max(64, 2 * (n - count))
        ta = np.stack([rng.uniform(r, w - 1 - r, m), rng.uniform(r, h - 1 - r, m)], axis=-1)
        tb = pair.map_ab(ta)
        ka = ta + rng.normal(0.0, noise_std, size=ta.shape) if noise_std > 0 else ta.copy()
        kb = tb + rng.normal(0.0, noise_std, size=tb.shape) if noise_std > 0 else tb.copy()
        ok = (
            np.isfinite(tb).all(axis=1)
            & in_bounds(tb, wb, hb)
            & patch_fits(ka, w, h, patch_size)
            & patch_fits(kb, wb, hb, patch_size)
        )
        parts.append((ta[ok], tb[ok], ka[ok], kb[ok]))
        count += int(ok.sum())
    if count < n:
        raise InsufficientAreaError(f"only {count} of {n} matches fit with full patch support")
    ta, tb, ka, kb = (np.concatenate([p[i] for p in parts])[:n] for i in range(4))
    pa = extract_patches(pair.image_a, ka, patch_size).astype(np.float32)
    pb = extract_patches(pair.image_b, kb, patch_size).astype(np.float32)
    if pair.pose is not None:
        E = np.broadcast_to(pair.essential, (n, 3, 3)).copy()
        Ka = np.broadcast_to(pair.intrinsics_a.as_array(), (n, 4)).copy()
        Kb = np.broadcast_to(pair.intrinsics_b.as_array(), (n, 4)).copy()
    else:
        E = Ka = Kb = None
    return MatchSet(pa, pb, ka, kb, ta, tb, E, Ka, Kb, np.full(n, pair_index, dtype=np.int64))


# --------------------------------------------------------------------------
# tracks
# --------------------------------------------------------------------------


@dataclass
class TrackSample:
    image_ids: np.ndarray  # (k,)
    keypoints: np.ndarray  # (k,2) observed (perturbed)
    true_keypoints: np.ndarray  # (k,2)
    patches: np.ndarray  # (k,P,P)
    point: np.ndarray  # (3,) ground-truth 3D point
    reference: int = 0

    def __post_init__(self):
        if len(self.image_ids) < 2:
            raise ValueError("a track needs at least two observations")
        if not 0 <= self.reference < len(self.image_ids):
            raise ValueError(f"reference index {self.reference} out of range")

    def __len__(self):
        return len(self.image_ids)

    def with_keypoints(self, keypoints):
        return replace(self, keypoints=np.asarray(keypoints))


def build_tracks(scene, n_points, noise_std=1.5, seed=0, patch_size=PATCH_SIZE, reference=0, max_rounds=50):
    """Tracks of ``n_points`` surface points seen from camera 0 and projected into every view.

    Views whose perturbed keypoint lacks full patch support are dropped;
    tracks left with fewer than two observations are discarded. The
    observation from camera 0 is always present and is the default reference.
    """
    rng = np.random.default_rng(seed)
    r = (patch_size - 1) / 2
    w, h = scene.width, scene.height
    cam0 = scene.cameras[0]
    tracks = []
    for _ in range(max_rounds):
        if len(tracks) >= n_points:
            break
        m = 2 * (n_points - len(tracks))
        p0 = np.stack([rng.uniform(r, w - 1 - r, m), rng.uniform(r, h - 1 - r, m)], axis=-1)
        X, _ = scene.room.cast(cam0.center, cam0.rays(p0))
        true = np.stack([c.project(X) for c in scene.cameras], axis=1)  # (m,T,2)
        depth = np.stack([c.depth(X) for c in scene.cameras], axis=1)
        noisy = true + rng.normal(0.0, noise_std, size=true.shape) if noise_std > 0 else true.copy()
        ok = patch_fits(noisy, w, h, patch_size) & (depth > 0)
        for j in range(m):
            views = np.flatnonzero(ok[j])
            if 0 not in views or len(views) < 2:
                continue
            patches = np.stack([
                extract_patches(scene.images[v], noisy[j, v][None], patch_size)[0] for v in views
            ]).astype(np.float32)
            ref = int(np.flatnonzero(views == 0)[0]) if reference == 0 else min(reference, len(views) - 1)
            tracks.append(TrackSample(views, noisy[j, views], true[j, views], patches, X[j], ref))
            if len(tracks) >= n_points:
                break
    if len(tracks) < n_points:
        raise InsufficientAreaError(f"only {len(tracks)} of {n_points} tracks could be built")
    return tracks


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


def _read_pnm_header(data):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path):
    """Read a binary 8-bit PGM (P5) or PPM (P6); returns uint8 (H,W) or (H,W,3)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = _read_pnm_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM type {magic!r} (need P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PNM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images (maxval 255) are supported")
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    if len(data) - pos < need:
        raise ImageFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def write_pgm(path, image):
    """Write a grayscale image as binary PGM; float images in [0,1] are quantized."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-d image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def load_grayscale(path):
    img = read_pnm(path)
    return to_grayscale(img) if img.ndim == 3 else img / 255.0


def read_matches(path):
    """Read ``x1 y1 x2 y2`` lines (extra columns ignored, '#' lines skipped); returns (M,4)."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: expected 'x1 y1 x2 y2', got {s!r}")
            try:
                rows.append([float(v) for v in parts[:4]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_matches(path, matches, flags=None, header=None):
    """Write one match per line with ``repr`` floats; optional integer flag column."""
    matches = np.asarray(matches, dtype=np.float64).reshape(-1, 4)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for i, row in enumerate(matches):
            line = " ".join(repr(float(v)) for v in row)
            if flags is not None:
                line += f" {int(flags[i])}"
            f.write(line + "\n")

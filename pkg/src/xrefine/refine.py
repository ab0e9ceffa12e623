"""Match and track refinement plus the evaluation experiments built on it."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import (
    PATCH_SIZE,
    SceneConfig,
    derive_seed,
    extract_patches,
    generate_multiview,
    generate_pair,
    patch_fits,
    sample_correspondences,
    sample_training_matches,
    build_tracks,
)
from .geometry import (
    FAILURE_ERROR_DEG,
    DegenerateConfigurationError,
    EstimationError,
    auc,
    pose_error,
    ransac_essential,
    recover_pose,
    triangulate_dlt,
)
from .manifest import dumps_manifest

FLAG_REFINED = 0
FLAG_BORDER = 1
THRESHOLDS_DEG = (5.0, 10.0, 20.0)
NOISE_STDS = (0.0, 1.0, 2.0, 3.0)
TRI_THRESHOLDS = (0.01, 0.02, 0.05)

_BENCH_PAIRS, _BENCH_MATCHES, _BENCH_RANSAC, _SWEEP_NOISE, _TRI_TRACKS = range(10, 15)


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------


def _offsets(weights, patches_a, patches_b, chunk):
    n = len(patches_a)
    oa = np.zeros((n, 2))
    ob = np.zeros((n, 2))
    for s in range(0, n, chunk):
        out, _ = M.forward(weights, patches_a[s:s + chunk], patches_b[s:s + chunk])
        oa[s:s + chunk] = out.offset_a
        ob[s:s + chunk] = out.offset_b
    if not (np.isfinite(oa).all() and np.isfinite(ob).all()):
        raise FloatingPointError("refinement produced non-finite offsets")
    return oa, ob


def refine_matches(image_a, image_b, matches, weights, chunk=128):
    """Refine ``(M,4)`` matches ``x1 y1 x2 y2``; returns ``(refined, flags)``.

    Matches whose patch support leaves either image are returned unchanged
    with flag ``FLAG_BORDER``; all others get ``FLAG_REFINED``.
    """
    matches = np.asarray(matches, dtype=np.float64).reshape(-1, 4)
    p = weights.config.patch_size
    ha, wa = np.shape(image_a)[:2]
    hb, wb = np.shape(image_b)[:2]
    ok = patch_fits(matches[:, :2], wa, ha, p) & patch_fits(matches[:, 2:], wb, hb, p)
    refined = matches.copy()
    flags = np.where(ok, FLAG_REFINED, FLAG_BORDER).astype(np.int64)
    if ok.any():
        pa = extract_patches(image_a, matches[ok, :2], p).astype(np.float32)
        pb = extract_patches(image_b, matches[ok, 2:], p).astype(np.float32)
        oa, ob = _offsets(weights, pa, pb, chunk)
        refined[ok, :2] += oa
        refined[ok, 2:] += ob
    return refined, flags


def refine_keypoints(keypoints_a, keypoints_b, patches_a, patches_b, weights, chunk=128):
    """Refine matches whose patches are already extracted."""
    oa, ob = _offsets(weights, patches_a, patches_b, chunk)
    return keypoints_a + oa, keypoints_b + ob


def refine_track(track, weights, chunk=128):
    """Move every non-reference observation toward the reference one.

    Needs a second-only model; each (reference, other) pair is refined
    independently and the reference keypoint is returned untouched.
    """
    if weights.config.refine_mode != M.SECOND_ONLY:
        raise ValueError("track refinement needs a second_only model, got a symmetric one")
    ref = track.reference
    others = np.array([i for i in range(len(track)) if i != ref])
    pa = np.repeat(track.patches[ref][None], len(others), axis=0)
    _, ob = _offsets(weights, pa, track.patches[others], chunk)
    keypoints = np.array(track.keypoints, dtype=np.float64, copy=True)
    keypoints[others] = keypoints[others] + ob
    return track.with_keypoints(keypoints)


def refine_tracks(tracks, weights, chunk=128):
    """Batched :func:`refine_track` over many tracks (same result, fewer forward calls)."""
    if weights.config.refine_mode != M.SECOND_ONLY:
        raise ValueError("track refinement needs a second_only model, got a symmetric one")
    pa, pb, index = [], [], []
    for t, track in enumerate(tracks):
        for i in range(len(track)):
            if i != track.reference:
                pa.append(track.patches[track.reference])
                pb.append(track.patches[i])
                index.append((t, i))
    if not index:
        return list(tracks)
    _, ob = _offsets(weights, np.stack(pa), np.stack(pb), chunk)
    new = [np.array(t.keypoints, dtype=np.float64, copy=True) for t in tracks]
    for (t, i), off in zip(index, ob):
        new[t][i] = new[t][i] + off
    return [t.with_keypoints(k) for t, k in zip(tracks, new)]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Rows of named columns plus scalar metadata; serializes to TSV and manifest text."""

    name: str
    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    per_pair: dict = field(default_factory=dict)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values, expected {len(self.columns)}")
        self.rows.append(list(values))

    def column(self, name):
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def to_tsv(self):
        lines = ["\t".join(self.columns)]
        for r in self.rows:
            lines.append("\t".join(_fmt(v) for v in r))
        return "\n".join(lines) + "\n"

    def to_manifest(self):
        body = {"report": self.name}
        body.update(self.meta)
        for i, r in enumerate(self.rows):
            body[f"row{i}"] = dict(zip(self.columns, r))
        return dumps_manifest(body)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


# --------------------------------------------------------------------------
# pose benchmark
# --------------------------------------------------------------------------


@dataclass
class PoseBenchmark:
    """Image pairs with ground truth and, per pair, perturbed matches with patches."""

    pairs: list
    matches: list
    seed: int
    noise_std: float

    def __len__(self):
        return len(self.pairs)


def make_pose_benchmark(n_pairs=50, matches_per_pair=512, noise_std=1.5, seed=1000, scene=None):
    scene = scene or SceneConfig()
    pairs = [generate_pair(derive_seed(seed, _BENCH_PAIRS, i), scene) for i in range(n_pairs)]
    matches = [
        sample_training_matches(p, matches_per_pair, noise_std, derive_seed(seed, _BENCH_MATCHES, i), pair_index=i)
        for i, p in enumerate(pairs)
    ]
    return PoseBenchmark(pairs, matches, seed, noise_std)


def pose_errors(pairs, keypoints, seed, iterations=1000, threshold_px=1.0):
    """Combined pose error per pair (failures count as 180 degrees)."""
    errs = []
    for i, (pair, (a, b)) in enumerate(zip(pairs, keypoints)):
        if pair.pose is None:
            raise ValueError(f"pair {i} has no ground-truth pose")
        try:
            E, mask = ransac_essential(a, b, pair.intrinsics_a, pair.intrinsics_b, iterations, threshold_px,
                                       seed=derive_seed(seed, i))
            pose = recover_pose(E, a, b, pair.intrinsics_a, pair.intrinsics_b, mask)
            errs.append(pose_error(pose, pair.pose).combined)
        except (EstimationError, DegenerateConfigurationError):
            errs.append(FAILURE_ERROR_DEG)
    return np.array(errs)


def eval_pose(bench, weights=None, repetitions=10, seed=0, iterations=1000, threshold_px=1.0, chunk=128):
    """AUC at 5/10/20 degrees, averaged over ``repetitions`` RANSAC seeds, unrefined and refined."""
    conditions = [("unrefined", [(m.keypoints_a, m.keypoints_b) for m in bench.matches])]
    if weights is not None:
        refined = [refine_keypoints(m.keypoints_a, m.keypoints_b, m.patches_a, m.patches_b, weights, chunk)
                   for m in bench.matches]
        conditions.append(("refined", refined))
    report = ExperimentReport("pose", ["condition", "auc5", "auc10", "auc20", "median_error_deg"])
    per_pair = {}
    for name, kps in conditions:
        aucs, errs = [], []
        for r in range(repetitions):
            e = pose_errors(bench.pairs, kps, derive_seed(seed, _BENCH_RANSAC, r), iterations, threshold_px)
            aucs.append(auc(e, THRESHOLDS_DEG))
            errs.append(e)
        mean = np.mean(aucs, axis=0)
        report.add(name, *[float(v) for v in mean], float(np.median(np.concatenate(errs))))
        per_pair[name] = np.mean(errs, axis=0)
    report.meta.update(seed=seed, repetitions=repetitions, iterations=iterations, threshold_px=threshold_px,
                       pairs=len(bench), noise_std=bench.noise_std)
    report.per_pair = per_pair
    return report


def eval_noise_sweep(pairs, correspondences, stds=NOISE_STDS, seed=0, repetitions=1, iterations=1000,
                     threshold_px=1.0):
    """Pose AUC of exact correspondences perturbed by Gaussian noise of each std."""
    report = ExperimentReport("noise", ["std", "auc5", "auc10", "auc20"])
    for std in stds:
        aucs = []
        for r in range(repetitions):
            kps = []
            for i, (a, b) in enumerate(correspondences):
                rng = np.random.default_rng(derive_seed(seed, _SWEEP_NOISE, r, i, int(round(std * 1000))))
                kps.append((a + rng.normal(0.0, std, a.shape), b + rng.normal(0.0, std, b.shape)))
            e = pose_errors(pairs, kps, derive_seed(seed, _BENCH_RANSAC, r), iterations, threshold_px)
            aucs.append(auc(e, THRESHOLDS_DEG))
        report.add(float(std), *[float(v) for v in np.mean(aucs, axis=0)])
    report.meta.update(seed=seed, repetitions=repetitions, pairs=len(pairs))
    return report


def make_sweep_benchmark(n_pairs=50, matches_per_pair=512, seed=2000, scene=None):
    scene = scene or SceneConfig()
    pairs = [generate_pair(derive_seed(seed, _BENCH_PAIRS, i), scene) for i in range(n_pairs)]
    corr = [sample_correspondences(p, matches_per_pair, derive_seed(seed, _BENCH_MATCHES, i))
            for i, p in enumerate(pairs)]
    return pairs, corr


# --------------------------------------------------------------------------
# triangulation
# --------------------------------------------------------------------------


def triangulate_tracks(scene, tracks):
    """DLT point per track; tracks that cannot be triangulated give NaN rows."""
    pts = np.full((len(tracks), 3), np.nan)
    for j, tr in enumerate(tracks):
        obs = []
        for v, uv in zip(tr.image_ids, tr.keypoints):
            cam = scene.cameras[int(v)]
            obs.append((cam.intrinsics, cam.rotation, cam.translation, uv))
        try:
            pts[j], _ = triangulate_dlt(obs)
        except DegenerateConfigurationError:
            pass
    return pts


def eval_triangulation(n_scenes=4, n_views=5, n_points=200, noise_std=1.5, weights=None, seed=3000,
                       thresholds=TRI_THRESHOLDS, scene=None, chunk=128):
    """Fraction of triangulated track points within each distance of the true surface.

    Distances are in scene units (the room is a few units across, so 0.01 is
    about 1% of the viewing distance). Failed triangulations count as misses.
    """
    scene_cfg = scene or SceneConfig()
    dists = {"unrefined": []}
    if weights is not None:
        dists["refined"] = []
    for s in range(n_scenes):
        sc = generate_multiview(derive_seed(seed, s), n_views, scene_cfg)
        tracks = build_tracks(sc, n_points, noise_std, derive_seed(seed, _TRI_TRACKS, s))
        variants = {"unrefined": tracks}
        if weights is not None:
            variants["refined"] = refine_tracks(tracks, weights, chunk)
        for name, trs in variants.items():
            X = triangulate_tracks(sc, trs)
            d = np.full(len(X), np.inf)
            ok = np.isfinite(X).all(axis=1)
            d[ok] = sc.room.distance_to_surface(X[ok])
            dists[name].append(d)
    cols = ["condition"] + [f"within_{t:g}" for t in thresholds] + ["median_distance"]
    report = ExperimentReport("triangulation", cols)
    for name, ds in dists.items():
        d = np.concatenate(ds)
        report.add(name, *[float(100.0 * np.mean(d <= t)) for t in thresholds], float(np.median(d)))
    report.meta.update(seed=seed, scenes=n_scenes, views=n_views, points=n_points, noise_std=noise_std)
    return report


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------


def time_refinement(weights, n_matches=2048, repetitions=100, seed=0, chunk=128, scene=None):
    """Median wall-clock milliseconds of :func:`refine_matches` on ``n_matches`` matches.

    Includes patch extraction; the images are a synthetic pair.
    """
    pair = generate_pair(seed, scene or SceneConfig())
    h, w = pair.image_a.shape
    r = (weights.config.patch_size - 1) / 2
    rng = np.random.default_rng(seed)
    lo, hi = np.array([r, r]), np.array([w - 1 - r, h - 1 - r])
    matches = np.concatenate([rng.uniform(lo, hi, (n_matches, 2)), rng.uniform(lo, hi, (n_matches, 2))], axis=1)
    refine_matches(pair.image_a, pair.image_b, matches[:chunk], weights, chunk)  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        refine_matches(pair.image_a, pair.image_b, matches, weights, chunk)
        times.append(1000.0 * (time.perf_counter() - t0))
    return float(np.median(times))

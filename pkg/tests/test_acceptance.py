"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

The two training fixtures run the desk preset through the ``train`` command and
take several minutes each on one core.
"""

import time

import numpy as np
import pytest

from xrefine import cli
from xrefine import geometry as G
from xrefine import model as M
from xrefine import refine as R
from xrefine import training as T
from xrefine.data import build_tracks, generate_multiview
from xrefine.gradcheck import run_suite

from conftest import record_verdict

pytestmark = pytest.mark.acceptance


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


# --------------------------------------------------------------------------
# 1. gradient suite
# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    results, seconds = run_suite(50)
    worst = max(results, key=results.get)
    ok = all(v <= 1e-4 for v in results.values()) and seconds <= 120.0
    record_verdict(1, ok, f"max rel err {results[worst]:.2e} ({worst}) over 50 seeds, {seconds:.0f} s")
    assert all(v <= 1e-4 for v in results.values()), results
    assert seconds <= 120.0


# --------------------------------------------------------------------------
# 2. shape law
# --------------------------------------------------------------------------


def test_criterion_2_shape_law():
    rng = np.random.default_rng(0)
    pa = rng.random((2, 11, 11))
    pb = rng.random((2, 11, 11))
    shapes = {}
    for name, cfg, size in (("small", M.ModelConfig.small(), 3), ("large", M.ModelConfig.large(), 5)):
        w = M.init_weights(cfg)
        out, _ = M.forward(w, pa, pb)
        e = M.encode(pa[:, None], w)
        shapes[name] = (out.score_map_a.shape, out.score_map_b.shape, e.shape[2:], cfg.embedding_size)
        assert cfg.patch_size == 11
        assert out.score_map_a.shape == out.score_map_b.shape == (2, size, size)
        assert e.shape[2:] == (size, size) and cfg.embedding_size == size
    record_verdict(2, True, f"11x11 -> small {shapes['small'][0][1:]}, large {shapes['large'][0][1:]}")


# --------------------------------------------------------------------------
# 3. geometry round trip
# --------------------------------------------------------------------------

K = G.CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def _pose_problem(rng, n=200, outlier_frac=0.0):
    pose = G.RelativePose(G.random_rotation(rng, 0.4), rng.normal(size=3) * 0.5 + np.array([1.0, 0.0, 0.0]))
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 10, n)])
    X2 = X @ pose.rotation.T + pose.translation
    p1 = K.denormalize(X[:, :2] / X[:, 2:])
    p2 = K.denormalize(X2[:, :2] / X2[:, 2:])
    k = int(round(outlier_frac * n))
    idx = rng.choice(n, k, replace=False)
    p2[idx] = rng.uniform([0, 0], [640, 480], size=(k, 2))
    return pose, p1, p2


def _round_trip_error(pose, p1, p2, seed):
    E, mask = G.ransac_essential(p1, p2, K, K, seed=seed)
    return G.pose_error(G.recover_pose(E, p1, p2, K, K, mask), pose).combined


def test_criterion_3_geometry_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    noisy = [_round_trip_error(*_pose_problem(rng, outlier_frac=0.2), seed=s) for s in range(10)]
    exact = [_round_trip_error(*_pose_problem(rng), seed=s) for s in range(10)]
    seconds = time.perf_counter() - t0
    ok = max(noisy) <= 0.5 and max(exact) <= 1e-6 and seconds <= 10.0
    record_verdict(3, ok, f"20% outliers max {max(noisy):.2e} deg, clean max {max(exact):.2e} deg, "
                          f"10+10 poses in {seconds:.1f} s")
    assert max(noisy) <= 0.5
    assert max(exact) <= 1e-6
    assert seconds <= 10.0


# --------------------------------------------------------------------------
# 4. AUC oracle
# --------------------------------------------------------------------------


def _auc_oracle(errors, tau, samples=100_000):
    # midpoint-rule integral of the empirical recall curve
    grid = (np.arange(samples) + 0.5) * (tau / samples)
    e = np.sort(np.asarray(errors))
    return 100.0 * (np.searchsorted(e, grid, side="right") / len(e)).mean()


def test_criterion_4_auc_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        errs = np.abs(rng.normal(0, rng.uniform(1, 30), size=rng.integers(1, 200)))
        for tau, a in zip(R.THRESHOLDS_DEG, G.auc(errs, R.THRESHOLDS_DEG)):
            worst = max(worst, abs(a - _auc_oracle(errs, tau)))
    fixed = (G.auc([0.0] * 20) == [100.0] * 3, G.auc([180.0] * 20) == [0.0] * 3,
             G.auc([0.0] * 10 + [10.0] * 10, [5.0]) == [50.0])
    ok = worst <= 0.01 and all(fixed)
    record_verdict(4, ok, f"max |closed form - oracle| {worst:.2e} on 100 lists, fixed cases {sum(fixed)}/3")
    assert worst <= 0.01
    assert all(fixed)


# --------------------------------------------------------------------------
# 5. noise sweep
# --------------------------------------------------------------------------


def test_criterion_5_noise_sweep():
    t0 = time.perf_counter()
    pairs, corr = R.make_sweep_benchmark()
    assert len(pairs) == 50 and all(len(c[0]) == 512 for c in corr)
    rep = R.eval_noise_sweep(pairs, corr)
    seconds = time.perf_counter() - t0
    a5 = rep.column("auc5")
    decreasing = all(x > y for x, y in zip(a5, a5[1:]))
    ok = decreasing and a5[0] >= 99 and seconds <= 180
    record_verdict(5, ok, f"AUC5 over stds {list(R.NOISE_STDS)}: {fmt(a5)}, {seconds:.0f} s")
    assert rep.column("std") == list(R.NOISE_STDS)
    assert decreasing
    assert a5[0] >= 99
    assert seconds <= 180


# --------------------------------------------------------------------------
# 6. end-to-end training
# --------------------------------------------------------------------------


def _train_desk(out, *extra):
    t0 = time.perf_counter()
    assert run("train", "--out", out, *extra) == 0
    return M.load_weights(out / "best.xrfw"), time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_model(tmp_path_factory):
    return _train_desk(tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def desk_second_only(tmp_path_factory):
    return _train_desk(tmp_path_factory.mktemp("desk_so"), "--mode", "second_only")


def test_criterion_6_training(desk_model):
    weights, train_seconds = desk_model
    t0 = time.perf_counter()
    # held out: a different master seed shares no pairs with training or checkpoint selection
    held_out = T.make_validation_set(T.TrainConfig.desk(seed=1, val_pairs=16))
    val = T.validate(weights, held_out)
    reduction = 1.0 - val.keypoint_error / val.keypoint_error_unrefined
    rep = R.eval_pose(R.make_pose_benchmark(), weights)
    raw, refined = rep.column("auc5")
    seconds = train_seconds + time.perf_counter() - t0
    ok = reduction >= 0.30 and refined >= raw + 2.0 and seconds <= 900
    record_verdict(6, ok, f"(a) keypoint error {val.keypoint_error_unrefined:.3f} -> {val.keypoint_error:.3f} px "
                          f"({100 * reduction:.1f}% less); (b) AUC5 {raw:.2f} -> {refined:.2f}; "
                          f"{seconds:.0f} s on this machine")
    assert val.keypoint_error < val.keypoint_error_unrefined
    assert reduction >= 0.30
    assert refined >= raw + 2.0
    assert seconds <= 900


# --------------------------------------------------------------------------
# 7. n-view consistency
# --------------------------------------------------------------------------


def test_criterion_7_tracks(desk_second_only):
    weights, _ = desk_second_only
    t0 = time.perf_counter()
    scene = generate_multiview(70, 5)
    tracks = build_tracks(scene, 40, noise_std=1.5, seed=71)
    rng = np.random.default_rng(72)
    reference_same = order_free = True
    for tr in tracks:
        out = R.refine_track(tr, weights)
        reference_same &= out.keypoints[tr.reference].tobytes() == tr.keypoints[tr.reference].tobytes()
        perm = rng.permutation(len(tr))
        shuffled = type(tr)(tr.image_ids[perm], tr.keypoints[perm], tr.true_keypoints[perm], tr.patches[perm],
                            tr.point, int(np.flatnonzero(perm == tr.reference)[0]))
        order_free &= np.array_equal(R.refine_track(shuffled, weights).keypoints, out.keypoints[perm])
    rep = R.eval_triangulation(weights=weights)
    cols = [f"within_{t:g}" for t in R.TRI_THRESHOLDS]
    raw = [rep.rows[0][rep.columns.index(c)] for c in cols]
    ref = [rep.rows[1][rep.columns.index(c)] for c in cols]
    seconds = time.perf_counter() - t0
    # a threshold where the raw tracks already score 100% leaves no room to improve
    improved = all(b > a or a == b == 100.0 for a, b in zip(raw, ref)) and any(b > a for a, b in zip(raw, ref))
    ok = reference_same and order_free and improved and seconds <= 180
    record_verdict(7, ok, f"reference fixed {reference_same}, order independent {order_free}; "
                          f"within {list(R.TRI_THRESHOLDS)}: {fmt(raw)} -> {fmt(ref)}; {seconds:.0f} s")
    assert reference_same and order_free
    assert improved
    assert seconds <= 180


# --------------------------------------------------------------------------
# 8. runtime
# --------------------------------------------------------------------------


def test_criterion_8_runtime():
    from threadpoolctl import threadpool_limits

    w = M.init_weights(M.ModelConfig())
    with threadpool_limits(limits=1):
        ms = {n: R.time_refinement(w, n_matches=n, repetitions=reps) for n, reps in ((512, 21), (2048, 11),
                                                                                     (4096, 7))}
    per_small, per_big = ms[512] / 512, ms[4096] / 4096
    ratio = per_big / per_small
    ok = ms[2048] <= 1000 and abs(ratio - 1) <= 0.20
    record_verdict(8, ok, f"2048 matches {ms[2048]:.0f} ms median on 1 thread; per-match 512 vs 4096 "
                          f"{1000 * per_small:.0f} vs {1000 * per_big:.0f} us (ratio {ratio:.2f})")
    assert ms[2048] <= 1000
    assert abs(ratio - 1) <= 0.20


# --------------------------------------------------------------------------
# 9. determinism
# --------------------------------------------------------------------------

SMALL = ["--width", "160", "--height", "120"]


def _twice(tmp_path, capsys, name, make_args):
    outputs = []
    for k in range(2):
        out = tmp_path / f"{name}_{k}"
        out.mkdir()
        assert run(*make_args(out)) == 0, name
        stdout = capsys.readouterr().out.replace(str(out), "<out>")
        outputs.append((tree_bytes(out), stdout))
    return outputs[0] == outputs[1]


def test_criterion_9_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert run("synth", "--out", data, *SMALL, "--pairs", "1", "--matches", "40", "--seed", "9") == 0
    weights = tmp_path / "w.xrfw"
    M.save_weights(M.init_weights(M.ModelConfig(), seed=9), weights)
    so = tmp_path / "so.xrfw"
    M.save_weights(M.init_weights(M.ModelConfig(refine_mode=M.SECOND_ONLY), seed=9), so)
    capsys.readouterr()
    commands = {
        "synth": lambda o: ("synth", "--out", o, *SMALL, "--pairs", "2", "--matches", "30", "--seed", "4"),
        "train": lambda o: ("train", "--out", o, *SMALL, "--epochs", "1", "--pairs", "2", "--val-pairs", "1",
                            "--matches", "16", "--seed", "4"),
        "refine": lambda o: ("refine", "--image-a", data / "pair_0000_a.pgm", "--image-b", data / "pair_0000_b.pgm",
                             "--matches", data / "pair_0000.matches", "--weights", weights, "--out",
                             o / "refined.matches", "--seed", "4"),
        "eval-pose": lambda o: ("eval-pose", *SMALL, "--pairs", "2", "--matches", "80", "--repetitions", "2",
                                "--weights", weights, "--out", o, "--seed", "4"),
        "eval-noise": lambda o: ("eval-noise", *SMALL, "--pairs", "2", "--matches", "80", "--out", o, "--seed", "4"),
        "eval-tri": lambda o: ("eval-tri", *SMALL, "--scenes", "1", "--views", "3", "--points", "20", "--weights",
                               so, "--out", o, "--seed", "4"),
        "gradcheck": lambda o: ("gradcheck", "--seeds", "1", "--seed", "4"),
    }
    assert set(commands) == set(cli.COMMANDS)
    same = {name: _twice(tmp_path, capsys, name, make) for name, make in commands.items()}
    ok = all(same.values())
    record_verdict(9, ok, f"{sum(same.values())}/{len(same)} commands byte-identical on rerun"
                          + ("" if ok else f"; differing: {[k for k, v in same.items() if not v]}"))
    assert ok, same

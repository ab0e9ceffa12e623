import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrefine import model as M
from xrefine.gradcheck import check_model

SMALL_PARAMETER_COUNT = 103409


@pytest.fixture(scope="module")
def small():
    return M.init_weights(M.ModelConfig(), seed=3)


def zero_biases(w):
    w = w.copy()
    for k, v in w.params.items():
        if k.endswith("bias") or k.split(".")[-1].startswith("b"):
            v[...] = 0
    return w


def test_config_invariants():
    for bad in (dict(patch_size=10), dict(patch_size=5), dict(embed_spatial=4), dict(attention_blocks=0),
                dict(heads=3), dict(offset_scale=-1.0), dict(softargmax_temperature=0.0), dict(refine_mode="x")):
        with pytest.raises(ValueError):
            M.ModelConfig(**bad)
    assert M.ModelConfig().offset_scale == 5.0
    assert M.ModelConfig(patch_size=13).offset_scale == 6.0


def test_config_dict_round_trip_rejects_unknown():
    cfg = M.ModelConfig.large(refine_mode=M.SECOND_ONLY)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"patch_sise": 11})


def test_small_parameter_count_frozen():
    assert M.parameter_count(M.ModelConfig()) == SMALL_PARAMETER_COUNT


def test_encode_shapes():
    for cfg, e in ((M.ModelConfig.small(), 3), (M.ModelConfig.large(), 5)):
        w = M.init_weights(cfg, seed=0)
        out = M.encode(np.random.default_rng(0).random((1, 11, 11)), w)
        assert out.shape == (64, e, e)


def test_encode_zero_patch_zero_bias(small):
    w = zero_biases(small)
    assert not np.any(M.encode(np.zeros((1, 11, 11)), w))


def test_encode_rejects_wrong_patch(small):
    with pytest.raises(ValueError):
        M.encode(np.zeros((1, 13, 13)), small)


def test_cross_update_swap_symmetry(small):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(64, 3, 3)).astype(np.float32)
    b = rng.normal(size=(64, 3, 3)).astype(np.float32)
    a1, b1 = M.cross_update(a, b, small)
    b2, a2 = M.cross_update(b, a, small)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    e1, e2 = M.cross_update(a, a, small)
    assert np.array_equal(e1, e2)


def test_cross_update_shape_mismatch(small):
    with pytest.raises(ValueError):
        M.cross_update(np.zeros((64, 3, 3)), np.zeros((64, 5, 5)), small)


def test_score_head(small):
    w = zero_biases(small)
    assert not np.any(M.score_head(np.zeros((64, 3, 3), dtype=np.float32), w))
    s = M.score_head(np.random.default_rng(2).normal(size=(4, 64, 3, 3)).astype(np.float32) * 100, small)
    assert s.shape == (4, 3, 3)
    assert np.all(np.abs(s) <= 1)


def test_soft_argmax_cases():
    assert np.array_equal(M.soft_argmax(np.zeros((3, 3))), [0.0, 0.0])
    for (i, j), sign in (((0, 0), (-1, -1)), ((0, 2), (1, -1)), ((2, 0), (-1, 1)), ((2, 2), (1, 1))):
        s = np.full((3, 3), -50.0)
        s[i, j] = 50.0
        np.testing.assert_allclose(M.soft_argmax(s, 1.0, 5.0), 5.0 * np.array(sign), atol=1e-4)
    rng = np.random.default_rng(3)
    half = rng.normal(size=(5, 5))
    sym = half + half[::-1, ::-1]
    assert np.abs(M.soft_argmax(sym, 0.7, 5.0)).max() <= 1e-10


def test_soft_argmax_closed_form():
    # one cell raised by d above the rest: expectation along x is (e^d - 1) / (e^d + 8) times the scale
    d = 1.3
    s = np.zeros((3, 3))
    s[1, 2] = d
    dx, dy = M.soft_argmax(s, 1.0, 5.0)
    assert dx == pytest.approx(5.0 * (np.exp(d) - 1) / (np.exp(d) + 8), rel=1e-12)
    assert abs(dy) < 1e-15


def test_end_to_end_shapes():
    rng = np.random.default_rng(4)
    for cfg, e in ((M.ModelConfig.small(), 3), (M.ModelConfig.large(), 5)):
        out = M.refine_pair(rng.random((11, 11)), rng.random((11, 11)), M.init_weights(cfg, seed=1))
        assert out.score_map_a.shape == (e, e) and out.score_map_b.shape == (e, e)


@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 1000.0))
@settings(max_examples=20, deadline=None)
def test_offsets_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    w = M.init_weights(M.ModelConfig(), seed=seed)
    for v in w.params.values():
        v *= np.float32(rng.uniform(0.5, 3.0))
    out = M.refine_pair(rng.random((4, 11, 11)) * scale, rng.random((4, 11, 11)) * scale, w)
    bound = w.config.offset_scale
    assert np.abs(out.offset_a).max() <= bound and np.abs(out.offset_b).max() <= bound


def test_identical_patches_give_identical_offsets(small):
    p = np.random.default_rng(5).random((11, 11))
    out = M.refine_pair(p, p, small)
    assert np.array_equal(out.offset_a, out.offset_b)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_swap_symmetry_exact(seed):
    rng = np.random.default_rng(seed)
    w = M.init_weights(M.ModelConfig(), seed=seed % 7)
    a, b = rng.random((3, 11, 11)), rng.random((3, 11, 11))
    ab = M.refine_pair(a, b, w)
    ba = M.refine_pair(b, a, w)
    assert np.array_equal(ab.offset_a, ba.offset_b) and np.array_equal(ab.offset_b, ba.offset_a)


@pytest.mark.parametrize("cfg", [M.ModelConfig.small(), M.ModelConfig.large()])
def test_batch_equals_single_calls_bitwise(cfg):
    rng = np.random.default_rng(6)
    w = M.init_weights(cfg, seed=2)
    pa, pb = rng.random((7, 11, 11)), rng.random((7, 11, 11))
    batch = M.refine_pair(pa, pb, w)
    for i in range(7):
        one = M.refine_pair(pa[i], pb[i], w)
        assert np.array_equal(one.offset_a, batch.offset_a[i])
        assert np.array_equal(one.offset_b, batch.offset_b[i])


def test_second_only_mode():
    w = M.init_weights(M.ModelConfig(refine_mode=M.SECOND_ONLY), seed=0)
    rng = np.random.default_rng(7)
    out = M.refine_pair(rng.random((5, 11, 11)), rng.random((5, 11, 11)), w)
    assert np.all(out.offset_a == 0.0)
    assert out.score_map_a is None
    assert np.abs(out.offset_b).max() > 0


def test_second_only_matches_symmetric_b_stream():
    rng = np.random.default_rng(8)
    w2 = M.init_weights(M.ModelConfig(refine_mode=M.SECOND_ONLY), seed=4)
    w1 = M.ModelWeights(M.ModelConfig(), w2.params)
    pa, pb = rng.random((3, 11, 11)), rng.random((3, 11, 11))
    np.testing.assert_array_equal(M.refine_pair(pa, pb, w2).offset_b, M.refine_pair(pa, pb, w1).offset_b)


@pytest.mark.parametrize("seed", range(3))
def test_model_gradcheck(seed):
    assert check_model(seed) <= 1e-4
    assert check_model(seed, M.ModelConfig(refine_mode=M.SECOND_ONLY)) <= 1e-4


def test_non_finite_raises(small):
    p = np.full((11, 11), np.nan)
    with pytest.raises(FloatingPointError):
        M.refine_pair(p, p, small)


def test_weights_round_trip(tmp_path, small):
    path = tmp_path / "w.xrfw"
    M.save_weights(small, path)
    back = M.load_weights(path, expected=small.config)
    assert back.config == small.config
    for k, v in small.params.items():
        assert back.params[k].dtype == np.float32
        assert back.params[k].tobytes() == v.tobytes()


def test_weights_file_layout(tmp_path, small):
    path = tmp_path / "w.xrfw"
    M.save_weights(small, path)
    raw = path.read_bytes()
    assert raw[:4] == b"XRFW"
    assert int.from_bytes(raw[4:8], "little") == 1
    cfg_len = int.from_bytes(raw[8:12], "little")
    count = int.from_bytes(raw[12 + cfg_len:16 + cfg_len], "little")
    assert count == len(small.params)
    payload = sum(4 * v.size for v in small.params.values())
    assert len(raw) > payload


def test_weights_errors(tmp_path, small):
    path = tmp_path / "w.xrfw"
    M.save_weights(small, path)
    bad = tmp_path / "bad.xrfw"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(M.WeightFileError, match="not a weight file"):
        M.load_weights(bad)
    bad.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(M.WeightFileError, match="truncated"):
        M.load_weights(bad)
    with pytest.raises(M.WeightFileError, match="incompatible"):
        M.load_weights(path, expected=M.ModelConfig(patch_size=13))
    raw = bytearray(path.read_bytes())
    raw[4:8] = (7).to_bytes(4, "little")
    bad.write_bytes(bytes(raw))
    with pytest.raises(M.WeightFileError, match="version"):
        M.load_weights(bad)


def test_weight_shape_validation():
    cfg = M.ModelConfig()
    params = dict(M.init_weights(cfg).params)
    params["pos"] = np.zeros((25, 64), dtype=np.float32)
    with pytest.raises(ValueError):
        M.ModelWeights(cfg, params)

"""Central finite-difference checks of every hand-written backward pass (float64).

Each check draws random inputs from its seed, contracts the output with a
random cotangent to get a scalar, and compares analytic gradients to
``(f(x+h) - f(x-h)) / 2h``. Relative error is ``|a-n| / max(|a|,|n|)``; pairs
with ``|a|+|n| < 1e-8`` are compared absolutely.

Coordinates whose +-h probe flips a ReLU mask or the loss clamp (points where
the function is not differentiable) are skipped and redrawn.
"""

from __future__ import annotations

import time

import numpy as np

from . import model as M
from . import tensor_ops as ops
from .geometry import SAMPSON, SYMMETRIC, epipolar_residual, essential_from_pose, random_rotation, RelativePose
from .training import epipolar_loss, residual_px2

STEP = 1e-6
MODEL_STEP = 3e-4  # large enough to beat round-off, small enough to rarely flip a ReLU
ABS_FLOOR = 1e-8


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = np.abs(a) + np.abs(n) < ABS_FLOOR
    return np.where(small, diff, diff / np.where(small, 1.0, scale))


def numeric_grad(f, x, h=STEP, index=None, five_point=False):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in place, then restored).

    ``five_point`` switches to the fourth-order stencil, which tolerates a
    larger ``h`` and so loses less to round-off.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx)) if index is not None else np.zeros(flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        if five_point:
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = old + k * h
                vals.append(f())
            out[j] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        else:
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            out[j] = (fp - fm) / (2 * h)
        flat[i] = old
    return out if index is not None else out.reshape(x.shape)


def _check(pairs):
    return max(float(rel_error(a, n).max()) if np.size(a) else 0.0 for a, n in pairs)


# --------------------------------------------------------------------------
# per-op checks; each returns the max relative error for one seed
# --------------------------------------------------------------------------


def check_conv2d(seed, padded=None):
    rng = np.random.default_rng(seed)
    padded = bool(rng.integers(2)) if padded is None else padded
    cin, cout = rng.integers(1, 4, size=2)
    h, w = rng.integers(3, 7, size=2)
    x = rng.normal(size=(2, cin, h, w))
    k = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    out, cache = ops.conv2d(x, k, b, padded)
    g = rng.normal(size=out.shape)
    gx, gk, gb = ops.conv2d_backward(cache, g)

    def f():
        return float((ops.conv2d(x, k, b, padded)[0] * g).sum())

    return _check([(gx, numeric_grad(f, x)), (gk, numeric_grad(f, k)), (gb, numeric_grad(f, b))])


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay away from the kink
    g = rng.normal(size=x.shape)
    _, mask = ops.relu(x)
    num = (ops.relu(x + STEP)[0] - ops.relu(x - STEP)[0]) / (2 * STEP) * g
    return _check([(ops.relu_backward(mask, g), num)])


def check_tanh(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    g = rng.normal(size=x.shape)
    _, c = ops.tanh_map(x)
    num = (ops.tanh_map(x + STEP)[0] - ops.tanh_map(x - STEP)[0]) / (2 * STEP) * g
    return _check([(ops.tanh_backward(c, g), num)])


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    # logits spread by at most ~10 keeps every probability above ~1e-5; wider
    # spreads produce gradients near 1e-8 that central differences cannot resolve
    x = rng.normal(size=(3, 9))
    t = float(rng.uniform(0.5, 2.0))
    g = rng.normal(size=x.shape)
    _, c = ops.softmax(x, t)
    num = numeric_grad(lambda: float((ops.softmax(x, t)[0] * g).sum()), x)
    return _check([(ops.softmax_backward(c, g), num)])


def check_attention(seed, tokens=9, dim=16, heads=4):
    rng = np.random.default_rng(seed)
    xq = rng.normal(size=(2, tokens, dim))
    xkv = rng.normal(size=(2, tokens, dim))
    w = {k: rng.normal(size=(dim, dim)) / np.sqrt(dim) if k.startswith("w") else rng.normal(size=dim) * 0.1
         for k in ops.ATTENTION_KEYS}
    out, cache = ops.multi_head_cross_attention(xq, xkv, w, heads)
    g = rng.normal(size=out.shape)
    gq, gkv, gw = ops.multi_head_cross_attention_backward(cache, g)

    def f():
        return float((ops.multi_head_cross_attention(xq, xkv, w, heads)[0] * g).sum())

    pairs = [(gq, numeric_grad(f, xq)), (gkv, numeric_grad(f, xkv))]
    pairs += [(gw[k], numeric_grad(f, w[k])) for k in ops.ATTENTION_KEYS]
    return _check(pairs)


def check_soft_argmax(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.choice([3, 5]))
    s = rng.uniform(-1, 1, size=(2, size, size))
    t = float(rng.uniform(0.5, 2.0))
    off, c = M._soft_argmax(s, t, 5.0)
    g = rng.normal(size=off.shape)
    num = numeric_grad(lambda: float((M._soft_argmax(s, t, 5.0)[0] * g).sum()), s)
    return _check([(M._soft_argmax_backward(c, g), num)])


def check_epipolar_residual(seed):
    rng = np.random.default_rng(seed)
    E = essential_from_pose(RelativePose(random_rotation(rng, 0.5), rng.normal(size=3)))
    x1 = rng.normal(size=(5, 2)) * 0.5
    x2 = rng.normal(size=(5, 2)) * 0.5
    worst = 0.0
    for kind in (SAMPSON, SYMMETRIC):
        _, g1, g2 = epipolar_residual(E, x1, x2, kind, return_grad=True)
        n1 = numeric_grad(lambda: float(epipolar_residual(E, x1, x2, kind).sum()), x1, 1e-4, five_point=True)
        n2 = numeric_grad(lambda: float(epipolar_residual(E, x1, x2, kind).sum()), x2, 1e-4, five_point=True)
        worst = max(worst, _check([(g1, n1), (g2, n2)]))
    return worst


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------


def _relu_signature(cache):
    enc_c = cache[0]
    return np.concatenate([rc.ravel() for _, rc in enc_c if rc is not None])


def _random_model(rng, config):
    w = M.init_weights(config, seed=int(rng.integers(2**31)), dtype=np.float64)
    for k, v in w.params.items():
        if k.endswith("bias") or k.split(".")[-1].startswith("b"):
            v += rng.normal(size=v.shape) * 0.05
    return w


def _sampled_model_check(weights, f, signature, analytic, rng, per_tensor, h=MODEL_STEP, max_draws=50):
    """Compare analytic grads to central differences at ``per_tensor`` random coordinates per tensor.

    Uses the five-point central stencil: the network output is O(1) while
    some gradients are tiny, so the two-point rule drowns in round-off.
    """
    base = signature()
    errs = []
    for name, p in weights.params.items():
        flat = p.reshape(-1)
        done = draws = 0
        while done < min(per_tensor, flat.size) and draws < max_draws:
            draws += 1
            i = int(rng.integers(flat.size))
            old = flat[i]
            vals = {}
            smooth = True
            # outer probes first so a flipped mask is usually caught after two evaluations
            for k in (2, -2, 1, -1):
                flat[i] = old + k * h
                vals[k] = f()
                if not np.array_equal(signature(), base):
                    smooth = False
                    break
            flat[i] = old
            if not smooth:
                continue
            num = (-vals[2] + 8 * vals[1] - 8 * vals[-1] + vals[-2]) / (12 * h)
            errs.append(float(rel_error(analytic[name].reshape(-1)[i], num)))
            done += 1
    return max(errs) if errs else 0.0


def check_model(seed, config=None, batch=3, per_tensor=2):
    """Loss = sum of both offsets of a random float64 model on random patches."""
    rng = np.random.default_rng(seed)
    config = config or M.ModelConfig()
    w = _random_model(rng, config)
    pa = rng.random((batch, config.patch_size, config.patch_size))
    pb = rng.random((batch, config.patch_size, config.patch_size))
    state = {}

    def f():
        out, cache = M.forward(w, pa, pb)
        state["cache"] = cache
        return float(out.offset_a.sum() + out.offset_b.sum())

    f()
    ones = np.ones((batch, 2))
    grads = M.backward(w, state["cache"], ones, ones)
    return _sampled_model_check(w, f, lambda: _relu_signature(state["cache"]), grads, rng, per_tensor)


def random_match_batch(rng, config, n=4, noise_px=1.0):
    """Synthetic matches with random patches and exact epipolar ground truth plus noise."""
    from .data import MatchSet

    R = random_rotation(rng, 0.3)
    t = rng.normal(size=3)
    E = essential_from_pose(RelativePose(R, t))
    f = 500.0
    K = np.array([f, f, 320.0, 240.0])
    X = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 8, n)])
    X2 = X @ R.T + t
    a = X[:, :2] / X[:, 2:] * f + K[2:]
    b = X2[:, :2] / X2[:, 2:] * f + K[2:]
    ka = a + rng.normal(0, noise_px, a.shape)
    kb = b + rng.normal(0, noise_px, b.shape)
    p = config.patch_size
    return MatchSet(
        rng.random((n, p, p)), rng.random((n, p, p)), ka, kb, a, b,
        np.broadcast_to(E, (n, 3, 3)).copy(), np.tile(K, (n, 1)), np.tile(K, (n, 1)), np.zeros(n, dtype=np.int64),
    )


def check_model_loss(seed, config=None, batch=4, per_tensor=2, clamp=10.0):
    """Full composition: refined keypoints scored by the clamped epipolar loss."""
    rng = np.random.default_rng(seed)
    config = config or M.ModelConfig()
    w = _random_model(rng, config)
    ms = random_match_batch(rng, config, batch)
    state = {}

    # numeric side rebuilds the loss from one forward pass instead of calling epipolar_loss
    def f():
        out, cache = M.forward(w, ms.patches_a, ms.patches_b)
        per = residual_px2(ms.keypoints_a + out.offset_a, ms.keypoints_b + out.offset_b, ms.essential,
                           ms.intrinsics_a, ms.intrinsics_b)
        state["sig"] = np.concatenate([_relu_signature(cache), per < clamp])
        return float(np.minimum(per, clamp).mean())

    f()
    _, grads, _ = epipolar_loss(ms, w, clamp)
    return _sampled_model_check(w, f, lambda: state["sig"], grads, rng, per_tensor)


CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "tanh": check_tanh,
    "softmax": check_softmax,
    "attention": check_attention,
    "soft_argmax": check_soft_argmax,
    "epipolar_residual": check_epipolar_residual,
    "model_small": check_model,
    "model_large": lambda s: check_model(s, M.ModelConfig.large(), per_tensor=1),
    "model_second_only": lambda s: check_model(s, M.ModelConfig(refine_mode=M.SECOND_ONLY)),
    "model_loss": check_model_loss,
}


def run_suite(seeds=50, base_seed=0, checks=None):
    """Max relative error per check over ``seeds`` seeds; returns ``(results, seconds)``."""
    t0 = time.perf_counter()
    results = {}
    for name in checks or CHECKS:
        fn = CHECKS[name]
        results[name] = max(fn(base_seed + s) for s in range(seeds))
    return results, time.perf_counter() - t0

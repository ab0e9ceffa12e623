"""Epipolar-loss training of the refinement network on synthetic scenes.

The loss needs no ground-truth keypoint positions: refined keypoints are
scored against the ground-truth essential matrix of their image pair with the
Sampson distance in squared pixels, clamped per match.

Every random draw is derived from ``(seed, stream, epoch, ...)`` so a resumed
run reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as M
from .data import SceneConfig, derive_seed, generate_pair, sample_training_matches
from .geometry import SAMPSON, epipolar_residual
from .tensor_ops import AdamState, adam_step

KEYPOINT_ERROR = "keypoint_error"
AUC5 = "auc5"

# seed streams
_TRAIN_PAIRS, _VAL_PAIRS, _EPOCH_MATCHES, _EPOCH_ORDER, _VAL_MATCHES, _INIT = range(6)


class TrainingDivergedError(FloatingPointError):
    """Raised on a non-finite loss; carries the best checkpoint reached so far."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    train_pairs: int = 64
    val_pairs: int = 8
    matches_per_pair: int = 256
    val_matches_per_pair: int = 256
    batch_size: int = 1
    lr: float = 3e-4
    noise_std: float = 1.5
    seed: int = 0
    loss_kind: str = SAMPSON
    loss_clamp_px2: float = 10.0
    val_metric: str = KEYPOINT_ERROR
    chunk: int = 128

    def __post_init__(self):
        for name in ("train_pairs", "val_pairs", "matches_per_pair", "val_matches_per_pair", "batch_size", "chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.loss_clamp_px2 > 0:
            raise ValueError("loss_clamp_px2 must be positive")
        if self.val_metric not in (KEYPOINT_ERROR, AUC5):
            raise ValueError(f"val_metric must be {KEYPOINT_ERROR!r} or {AUC5!r}")

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw):
        base = dict(epochs=120, train_pairs=45900, matches_per_pair=2048, batch_size=8, lr=1e-4)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        types = {f.name: type(f.default) for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**{k: (types[k](v) if isinstance(v, str) and types[k] is not str else v) for k, v in d.items()})


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def match_focal(intrinsics_a, intrinsics_b):
    """Per-match pixel scale: mean of both cameras' (fx+fy)/2."""
    return 0.25 * (intrinsics_a[:, 0] + intrinsics_a[:, 1] + intrinsics_b[:, 0] + intrinsics_b[:, 1])


def residual_px2(keypoints_a, keypoints_b, essential, intrinsics_a, intrinsics_b, kind=SAMPSON,
                 return_grad=False):
    """Epipolar residual in squared pixels of pixel-coordinate matches, optionally with gradients."""
    ka, kb = intrinsics_a, intrinsics_b
    x1 = (keypoints_a - ka[:, 2:4]) / ka[:, 0:2]
    x2 = (keypoints_b - kb[:, 2:4]) / kb[:, 0:2]
    f2 = match_focal(ka, kb) ** 2
    if not return_grad:
        return epipolar_residual(essential, x1, x2, kind) * f2
    r, g1, g2 = epipolar_residual(essential, x1, x2, kind, return_grad=True)
    return r * f2, g1 / ka[:, 0:2] * f2[:, None], g2 / kb[:, 0:2] * f2[:, None]


def epipolar_loss(matches, weights, clamp_px2=10.0, kind=SAMPSON, chunk=128, want_grad=True):
    """Mean clamped epipolar residual of refined matches and its parameter gradients.

    Returns ``(loss, grads, per_match_residual)``; ``grads`` is None when
    ``want_grad`` is false. Matches whose residual exceeds the clamp contribute
    a constant and no gradient.
    """
    n = len(matches)
    if n == 0:
        raise ValueError("empty batch")
    if matches.essential is None:
        raise ValueError("matches carry no ground-truth essential matrix")
    grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in weights.params.items()} if want_grad else None
    total = 0.0
    per = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        out, cache = M.forward(weights, matches.patches_a[sl], matches.patches_b[sl])
        a = matches.keypoints_a[sl] + out.offset_a
        b = matches.keypoints_b[sl] + out.offset_b
        res = residual_px2(
            a, b, matches.essential[sl], matches.intrinsics_a[sl], matches.intrinsics_b[sl], kind, want_grad
        )
        r = res[0] if want_grad else res
        bad = ~np.isfinite(r)
        if bad.any():
            i = s + int(np.flatnonzero(bad)[0])
            raise FloatingPointError(f"non-finite epipolar residual at sample {i}")
        per[sl] = r
        live = r < clamp_px2
        total += float(np.where(live, r, clamp_px2).sum())
        if want_grad:
            scale = live[:, None] / n
            g = M.backward(weights, cache, res[1] * scale, res[2] * scale)
            for k in grads:
                grads[k] += g[k]
    loss = total / n
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    if want_grad:
        grads = {k: v.astype(weights.dtype) for k, v in grads.items()}
    return loss, grads, per


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class ValidationSet:
    pairs: list
    matches: list  # one MatchSet per pair

    def __len__(self):
        return sum(len(m) for m in self.matches)


def make_training_pairs(config, scene=None):
    scene = scene or SceneConfig()
    return [generate_pair(derive_seed(config.seed, _TRAIN_PAIRS, i), scene) for i in range(config.train_pairs)]


def make_validation_set(config, scene=None, noise_std=None):
    scene = scene or SceneConfig()
    noise = config.noise_std if noise_std is None else noise_std
    pairs = [generate_pair(derive_seed(config.seed, _VAL_PAIRS, i), scene) for i in range(config.val_pairs)]
    matches = [
        sample_training_matches(p, config.val_matches_per_pair, noise, derive_seed(config.seed, _VAL_MATCHES, i),
                                pair_index=i)
        for i, p in enumerate(pairs)
    ]
    return ValidationSet(pairs, matches)


def epoch_batches(pairs, config, epoch):
    """Deterministic list of per-step match batches for one epoch."""
    from .data import MatchSet

    order = np.random.default_rng(derive_seed(config.seed, _EPOCH_ORDER, epoch)).permutation(len(pairs))
    sets = {}
    for i in order:
        sets[int(i)] = sample_training_matches(
            pairs[i], config.matches_per_pair, config.noise_std,
            derive_seed(config.seed, _EPOCH_MATCHES, epoch, int(i)), pair_index=int(i),
        )
    batches = []
    for s in range(0, len(order), config.batch_size):
        batches.append(MatchSet.concat(sets[int(i)] for i in order[s:s + config.batch_size]))
    return batches


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    keypoint_error: float
    keypoint_error_unrefined: float
    epipolar_px2: float
    auc5: float | None = None

    def metric(self, name):
        return self.keypoint_error if name == KEYPOINT_ERROR else self.auc5

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def transfer_error(pair, keypoints_a, keypoints_b):
    """Distance in image B between ``keypoints_b`` and the exact correspondence of ``keypoints_a``."""
    return np.linalg.norm(keypoints_b - pair.map_ab(keypoints_a), axis=1)


def refine_offsets(weights, patches_a, patches_b, chunk=128):
    offs_a, offs_b = [], []
    for s in range(0, len(patches_a), chunk):
        out, _ = M.forward(weights, patches_a[s:s + chunk], patches_b[s:s + chunk])
        offs_a.append(out.offset_a)
        offs_b.append(out.offset_b)
    if not offs_a:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(offs_a).astype(np.float64), np.concatenate(offs_b).astype(np.float64)


def validate(weights, val_set, with_auc=False, chunk=128, ransac_seed=0):
    """Mean transfer error (refined and unrefined), mean clamped-free epipolar px^2, optional AUC5."""
    from .geometry import EstimationError, DegenerateConfigurationError, auc, pose_error, ransac_essential, recover_pose

    if len(val_set) == 0:
        raise ValueError("empty validation set")
    err, err0, epi, pose_errs = [], [], [], []
    for i, (pair, ms) in enumerate(zip(val_set.pairs, val_set.matches)):
        oa, ob = refine_offsets(weights, ms.patches_a, ms.patches_b, chunk)
        a = ms.keypoints_a + oa
        b = ms.keypoints_b + ob
        err.append(transfer_error(pair, a, b))
        err0.append(transfer_error(pair, ms.keypoints_a, ms.keypoints_b))
        if ms.essential is not None:
            epi.append(residual_px2(a, b, ms.essential, ms.intrinsics_a, ms.intrinsics_b))
        if with_auc:
            try:
                E, mask = ransac_essential(a, b, pair.intrinsics_a, pair.intrinsics_b,
                                           seed=derive_seed(ransac_seed, i))
                pose = recover_pose(E, a, b, pair.intrinsics_a, pair.intrinsics_b, mask)
                pose_errs.append(pose_error(pose, pair.pose).combined)
            except (EstimationError, DegenerateConfigurationError):
                pose_errs.append(180.0)
    return ValidationReport(
        float(np.mean(np.concatenate(err))),
        float(np.mean(np.concatenate(err0))),
        float(np.mean(np.concatenate(epi))) if epi else float("nan"),
        auc(pose_errs, (5.0,))[0] if with_auc else None,
    )


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    weights: M.ModelWeights
    epoch: int
    metric: float
    metric_name: str = KEYPOINT_ERROR
    rng_digest: str = ""
    report: ValidationReport | None = None

    def __post_init__(self):
        if not np.isfinite(self.metric):
            raise ValueError(f"checkpoint metric must be finite, got {self.metric}")


@dataclass
class TrainState:
    """Everything needed to continue a run: current weights, optimizer state and history."""

    weights: M.ModelWeights
    adam: AdamState
    epoch: int
    best: Checkpoint
    history: list = field(default_factory=list)  # (epoch, loss, val_metric)


def rng_digest(config, epoch):
    return hashlib.sha256(f"{config.seed}:{epoch}".encode()).hexdigest()[:16]


def _better(metric_name, new, old):
    return new < old if metric_name == KEYPOINT_ERROR else new > old


def initial_state(config, model_config, val_set):
    weights = M.init_weights(model_config, seed=derive_seed(config.seed, _INIT))
    report = validate(weights, val_set, with_auc=config.val_metric == AUC5, chunk=config.chunk)
    metric = report.metric(config.val_metric)
    best = Checkpoint(weights.copy(), 0, metric, config.val_metric, rng_digest(config, 0), report)
    return TrainState(weights, AdamState.zeros_like(weights.params), 0, best, [(0, float("nan"), metric)])


def train(config, model_config=None, scene=None, state=None, train_pairs=None, val_set=None, log=None):
    """Run (or continue) training; returns the final :class:`TrainState`.

    ``state.best`` is the best-validation checkpoint. ``log(epoch, loss, metric)``
    is called after every epoch.
    """
    model_config = model_config or M.ModelConfig()
    if train_pairs is None:
        train_pairs = make_training_pairs(config, scene)
    if val_set is None:
        val_set = make_validation_set(config, scene)
    if state is None:
        state = initial_state(config, model_config, val_set)
    with_auc = config.val_metric == AUC5
    for epoch in range(state.epoch + 1, config.epochs + 1):
        losses = []
        for batch in epoch_batches(train_pairs, config, epoch):
            try:
                loss, grads, _ = epipolar_loss(batch, state.weights, config.loss_clamp_px2, config.loss_kind,
                                               config.chunk)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}", state.best) from exc
            adam_step(state.weights.params, grads, state.adam, lr=config.lr)
            losses.append(loss)
        if not all(np.isfinite(p).all() for p in state.weights.params.values()):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite weights", state.best)
        report = validate(state.weights, val_set, with_auc=with_auc, chunk=config.chunk)
        metric = report.metric(config.val_metric)
        epoch_loss = float(np.mean(losses))
        state.history.append((epoch, epoch_loss, metric))
        state.epoch = epoch
        if _better(config.val_metric, metric, state.best.metric):
            state.best = Checkpoint(state.weights.copy(), epoch, metric, config.val_metric,
                                    rng_digest(config, epoch), report)
        if log is not None:
            log(epoch, epoch_loss, metric)
    return state


def with_epochs(config, epochs):
    return replace(config, epochs=epochs)

"""Patch-pair refinement network.

Two grayscale patches go through a shared five-layer conv encoder, the two
embeddings exchange information through bidirectional cross-attention, a
padded conv + tanh produces a score map per patch and a soft-argmax turns each
map into a sub-pixel offset relative to the patch center.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor_ops as ops
from .manifest import dumps_manifest, loads_manifest

BOTH = "both"
SECOND_ONLY = "second_only"
REFINE_MODES = (BOTH, SECOND_ONLY)

# Padding per encoder conv; the large variant pads once more to keep 5x5.
_ENCODER_PADDING = {3: (False, False, False, True, False), 5: (False, False, True, True, False)}


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 11
    embed_spatial: int = 3
    channels: tuple = (16, 64)
    attention_blocks: int = 1
    heads: int = 4
    refine_mode: str = BOTH
    softargmax_temperature: float = 1.0
    offset_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.offset_scale is None:
            object.__setattr__(self, "offset_scale", (self.patch_size - 1) / 2)
        if self.patch_size % 2 == 0 or self.patch_size < 7:
            raise ValueError(f"patch_size must be odd and >= 7, got {self.patch_size}")
        if self.embed_spatial not in _ENCODER_PADDING:
            raise ValueError(f"embed_spatial must be 3 or 5, got {self.embed_spatial}")
        if self.attention_blocks < 1:
            raise ValueError("attention_blocks must be >= 1")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValueError(f"channels must be two positive sizes, got {self.channels}")
        if self.heads < 1 or self.channels[1] % self.heads:
            raise ValueError(f"{self.channels[1]} channels not divisible by {self.heads} heads")
        if self.refine_mode not in REFINE_MODES:
            raise ValueError(f"refine_mode must be one of {REFINE_MODES}, got {self.refine_mode!r}")
        if not self.softargmax_temperature > 0:
            raise ValueError("softargmax_temperature must be positive")
        if not self.offset_scale > 0:
            raise ValueError("offset_scale must be positive")
        if self.embedding_size < 1:
            raise ValueError(f"patch_size {self.patch_size} too small for the encoder")

    @classmethod
    def small(cls, **kw):
        return cls(**kw)

    @classmethod
    def large(cls, **kw):
        return cls(embed_spatial=5, attention_blocks=3, **kw)

    @property
    def padding(self):
        return _ENCODER_PADDING[self.embed_spatial]

    @property
    def embedding_size(self):
        size = self.patch_size
        for padded in self.padding:
            size = size if padded else size - 2
        return size

    @property
    def tokens(self):
        return self.embedding_size**2

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("patch_size", "embed_spatial", "attention_blocks", "heads"):
            if key in kw:
                kw[key] = int(kw[key])
        for key in ("softargmax_temperature", "offset_scale"):
            if key in kw:
                kw[key] = float(kw[key])
        if isinstance(kw.get("channels"), str):
            kw["channels"] = tuple(int(c) for c in kw["channels"].split())
        return cls(**kw)


def parameter_shapes(config):
    """Ordered mapping of parameter name to shape for ``config``."""
    c1, c2 = config.channels
    conv_io = [(1, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c2)]
    shapes = {}
    for i, (cin, cout) in enumerate(conv_io, start=1):
        shapes[f"enc{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"enc{i}.bias"] = (cout,)
    shapes["pos"] = (config.tokens, c2)
    for b in range(config.attention_blocks):
        for k in ops.ATTENTION_KEYS:
            shapes[f"attn{b}.{k}"] = (c2, c2) if k.startswith("w") else (c2,)
    shapes["head.weight"] = (1, c2, 3, 3)
    shapes["head.bias"] = (1,)
    return shapes


def parameter_count(config):
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ValueError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, config implies {shape}")

    def astype(self, dtype):
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["pos"].dtype


# The score head starts with small weights so the initial score maps are far
# from tanh saturation; a saturated head gives flat maps and no gradient.
HEAD_INIT_GAIN = 0.1


def init_weights(config, seed=0, dtype=np.float32):
    """Kaiming-uniform (fan-in) weights, zero biases, small random positional encoding."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name == "pos":
            w = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("bias") or name.split(".")[-1].startswith("b"):
            w = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            if name == "head.weight":
                bound *= HEAD_INIT_GAIN
            w = rng.uniform(-bound, bound, size=shape)
        params[name] = w.astype(dtype)
    return ModelWeights(config, params)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def encode(patches, weights):
    """Encoder forward: (N,1,P,P) or (1,P,P) patches -> (N,C,E,E) embeddings."""
    x = np.asarray(patches, dtype=weights.dtype)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    cfg = weights.config
    if x.shape[1:] != (1, cfg.patch_size, cfg.patch_size):
        raise ValueError(f"patch batch shape {x.shape} does not match patch_size {cfg.patch_size}")
    e, _ = _encode_nhwc(x[:, 0, :, :, None], weights)
    e = np.ascontiguousarray(e.transpose(0, 3, 1, 2))
    return e[0] if squeeze else e


def _encode_nhwc(x, weights):
    p = weights.params
    caches = []
    for i, padded in enumerate(weights.config.padding, start=1):
        x, cc = ops.conv2d_nhwc(x, p[f"enc{i}.weight"], p[f"enc{i}.bias"], padded)
        rc = None
        if i < 5:
            x, rc = ops.relu(x)
        caches.append((cc, rc))
    return x, caches


def _encode_nhwc_backward(caches, grad, grads):
    for i in range(len(caches), 0, -1):
        cc, rc = caches[i - 1]
        if rc is not None:
            grad = ops.relu_backward(rc, grad)
        grad, gk, gb = ops.conv2d_nhwc_backward(cc, grad)
        grads[f"enc{i}.weight"] = grads.get(f"enc{i}.weight", 0) + gk
        grads[f"enc{i}.bias"] = grads.get(f"enc{i}.bias", 0) + gb
    return grad


def _to_tokens(e):
    n, h, w, c = e.shape
    return e.reshape(n, h * w, c)


def _from_tokens(t, size):
    n, _, c = t.shape
    return t.reshape(n, size, size, c)


def _nchw(e):
    return np.ascontiguousarray(np.moveaxis(e, -1, 1))


def _nhwc(e):
    return np.ascontiguousarray(np.moveaxis(e, 1, -1))


def cross_update(e_a, e_b, weights):
    """Bidirectional cross-attention between two embedding batches.

    Both (N,C,E,E) (or unbatched). A attends to B and B attends to A; each
    block reads the pre-update sequences of that block for keys and values.
    """
    e_a = np.asarray(e_a)
    e_b = np.asarray(e_b)
    if e_a.shape != e_b.shape:
        raise ValueError(f"embedding shapes differ: {e_a.shape} vs {e_b.shape}")
    squeeze = e_a.ndim == 3
    if squeeze:
        e_a, e_b = e_a[None], e_b[None]
    out, _ = _cross_update_stacked(_nhwc(np.concatenate([e_a, e_b])), weights)
    out = _nchw(out)
    n = e_a.shape[0]
    a, b = out[:n], out[n:]
    if squeeze:
        a, b = a[0], b[0]
    return a, b


def _swap_halves(x):
    n = x.shape[0] // 2
    return np.concatenate([x[n:], x[:n]])


def _cross_update_stacked(e, weights):
    # e stacks [A; B] along the batch axis; the key/value stream is [B; A].
    cfg = weights.config
    p = weights.params
    tokens = _to_tokens(e) + p["pos"]
    caches = []
    for b in range(cfg.attention_blocks):
        blk = {k: p[f"attn{b}.{k}"] for k in ops.ATTENTION_KEYS}
        tokens, c = ops.multi_head_cross_attention(tokens, _swap_halves(tokens), blk, cfg.heads)
        caches.append(c)
    return _from_tokens(tokens, cfg.embedding_size), caches


def _cross_update_stacked_backward(caches, grad, weights, grads):
    cfg = weights.config
    g = _to_tokens(grad)
    for b in range(cfg.attention_blocks - 1, -1, -1):
        gq, gkv, gw = ops.multi_head_cross_attention_backward(caches[b], g)
        for k, v in gw.items():
            grads[f"attn{b}.{k}"] = grads.get(f"attn{b}.{k}", 0) + v
        g = gq + _swap_halves(gkv)
    grads["pos"] = grads.get("pos", 0) + g.sum(axis=0)
    return _from_tokens(g, cfg.embedding_size)


def score_head(e, weights):
    """Padded conv to one channel followed by tanh: (N,C,E,E) -> (N,E,E)."""
    e = np.asarray(e)
    squeeze = e.ndim == 3
    if squeeze:
        e = e[None]
    s, _ = _score_head_nhwc(_nhwc(e), weights)
    return s[0] if squeeze else s


def _score_head_nhwc(e, weights):
    p = weights.params
    s, cc = ops.conv2d_nhwc(e, p["head.weight"], p["head.bias"], True)
    s, tc = ops.tanh_map(s[..., 0])
    return s, (cc, tc)


def _score_head_nhwc_backward(cache, grad, grads):
    cc, tc = cache
    g = ops.tanh_backward(tc, grad)[..., None]
    gx, gk, gb = ops.conv2d_nhwc_backward(cc, g)
    grads["head.weight"] = grads.get("head.weight", 0) + gk
    grads["head.bias"] = grads.get("head.bias", 0) + gb
    return gx


def _grid(size, dtype):
    c = np.linspace(-1.0, 1.0, size).astype(dtype)
    gy, gx = np.meshgrid(c, c, indexing="ij")
    return gx.ravel(), gy.ravel()


def soft_argmax(score_map, temperature=1.0, offset_scale=5.0):
    """Expected (dx, dy) in pixels under softmax of an odd-sized score map.

    Cell coordinates span [-1, 1] on both axes (columns -> x, rows -> y) and
    are scaled by ``offset_scale``. Accepts (E,E) or (N,E,E).
    """
    out, _ = _soft_argmax(np.asarray(score_map), temperature, offset_scale)
    return out


def _soft_argmax(s, temperature, offset_scale):
    squeeze = s.ndim == 2
    if squeeze:
        s = s[None]
    n, h, w = s.shape
    if h != w or h % 2 == 0:
        raise ValueError(f"score map must be square with odd size, got {h}x{w}")
    prob, sm_cache = ops.softmax(s.reshape(n, h * w), temperature, axis=-1)
    gx, gy = _grid(h, s.dtype)
    # Pair each cell with its mirror image before weighting: mirror-symmetric
    # maps (uniform ones in particular) then give exactly zero. Fixed-axis
    # reductions also keep the result independent of the batch size.
    p3 = prob.reshape(n, h, w)
    c = h // 2
    pos = gx[c + 1:h]
    cols = p3.sum(axis=1)
    rows = p3.sum(axis=2)
    dx = ((cols[:, c + 1:] - cols[:, c - 1::-1]) * pos).sum(-1)
    dy = ((rows[:, c + 1:] - rows[:, c - 1::-1]) * pos).sum(-1)
    off = np.stack([dx, dy], axis=-1) * np.asarray(offset_scale, dtype=s.dtype)
    cache = (sm_cache, gx, gy, offset_scale, h)
    return (off[0] if squeeze else off), cache


def _soft_argmax_backward(cache, grad_off):
    sm_cache, gx, gy, offset_scale, h = cache
    g = grad_off * offset_scale
    gprob = g[:, :1] * gx + g[:, 1:] * gy
    return ops.softmax_backward(sm_cache, gprob).reshape(-1, h, h)


# --------------------------------------------------------------------------
# full network
# --------------------------------------------------------------------------


@dataclass
class RefinementOutput:
    offset_a: np.ndarray
    offset_b: np.ndarray
    score_map_a: np.ndarray | None
    score_map_b: np.ndarray


def forward(weights, patches_a, patches_b):
    """Batched forward pass. Patches are (N,P,P); returns (RefinementOutput, cache)."""
    cfg = weights.config
    pa = np.asarray(patches_a, dtype=weights.dtype)
    pb = np.asarray(patches_b, dtype=weights.dtype)
    if pa.shape != pb.shape or pa.ndim != 3:
        raise ValueError(f"patch batches must both be (N,P,P), got {pa.shape} and {pb.shape}")
    n = pa.shape[0]
    x = np.concatenate([pa, pb])[..., None]
    if not np.isfinite(x).all():
        # ReLU would silently map NaN to zero, so reject it at the door
        raise FloatingPointError("non-finite values in input patches")
    e, enc_c = _encode_nhwc(x, weights)
    e2, att_c = _cross_update_stacked(e, weights)
    second_only = cfg.refine_mode == SECOND_ONLY
    head_in = e2[n:] if second_only else e2
    maps, head_c = _score_head_nhwc(head_in, weights)
    off, sa_c = _soft_argmax(maps, cfg.softargmax_temperature, cfg.offset_scale)
    if second_only:
        out = RefinementOutput(np.zeros((n, 2), dtype=off.dtype), off, None, maps)
    else:
        out = RefinementOutput(off[:n], off[n:], maps[:n], maps[n:])
    return out, (enc_c, att_c, head_c, sa_c, n, second_only)


def backward(weights, cache, grad_offset_a, grad_offset_b):
    """Gradients of a scalar loss w.r.t. all parameters given offset gradients."""
    enc_c, att_c, head_c, sa_c, n, second_only = cache
    cfg = weights.config
    grads = {}
    g_off = np.asarray(grad_offset_b) if second_only else np.concatenate([grad_offset_a, grad_offset_b])
    g_maps = _soft_argmax_backward(sa_c, g_off.astype(weights.dtype, copy=False))
    g_head_in = _score_head_nhwc_backward(head_c, g_maps, grads)
    if second_only:
        g_e2 = np.zeros((2 * n, cfg.embedding_size, cfg.embedding_size, cfg.channels[1]), dtype=g_head_in.dtype)
        g_e2[n:] = g_head_in
    else:
        g_e2 = g_head_in
    g_e = _cross_update_stacked_backward(att_c, g_e2, weights, grads)
    _encode_nhwc_backward(enc_c, g_e, grads)
    return {k: np.asarray(grads[k], dtype=weights.dtype) for k in weights.params}


def refine_pair(patch_a, patch_b, weights):
    """Offsets for one patch pair ((P,P) each) or a batch ((N,P,P) each)."""
    pa = np.asarray(patch_a)
    pb = np.asarray(patch_b)
    single = pa.ndim == 2
    if single:
        pa, pb = pa[None], pb[None]
    out, _ = forward(weights, pa, pb)
    if not (np.isfinite(out.offset_a).all() and np.isfinite(out.offset_b).all()):
        raise FloatingPointError("non-finite refinement offsets")
    if single:
        return RefinementOutput(
            out.offset_a[0],
            out.offset_b[0],
            None if out.score_map_a is None else out.score_map_a[0],
            out.score_map_b[0],
        )
    return out


# --------------------------------------------------------------------------
# weight files
# --------------------------------------------------------------------------

MAGIC = b"XRFW"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class WeightFileError(ValueError):
    pass


def write_weight_file(path, config, tensors, extra=None):
    """Write named float32 tensors with a config header (see README for layout)."""
    header = dict(config.to_dict())
    header.update(extra or {})
    cfg_bytes = dumps_manifest(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_weight_file(path):
    """Returns ``(header_dict, tensors)``."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated weight file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    header = loads_manifest(bytes(take(cfg_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag != DTYPE_F32:
            raise WeightFileError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(data):
        raise WeightFileError(f"{path}: trailing bytes after tensor table")
    return header, tensors


def _config_from_header(header):
    names = {f.name for f in fields(ModelConfig)}
    return ModelConfig.from_dict({k: v for k, v in header.items() if k in names})


def save_weights(weights, path):
    write_weight_file(path, weights.config, weights.params)


def load_weights(path, expected=None):
    """Load a weight file; if ``expected`` (a ModelConfig) is given the stored config must match it."""
    header, tensors = read_weight_file(path)
    config = _config_from_header(header)
    if expected is not None and expected != config:
        diffs = [
            f"{f.name}: file {getattr(config, f.name)!r} vs requested {getattr(expected, f.name)!r}"
            for f in fields(ModelConfig)
            if getattr(config, f.name) != getattr(expected, f.name)
        ]
        raise WeightFileError(f"{path}: incompatible model config ({'; '.join(diffs)})")
    params = {k: v for k, v in tensors.items() if k in parameter_shapes(config)}
    try:
        return ModelWeights(config, params)
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc

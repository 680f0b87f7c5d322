"""Dense float64 network core.

A fixed encoder-decoder layer stack (conv / relu / maxpool / nearest-upsample /
dropout / sigmoid) with hand-written reverse-mode gradients, the weighted
binary cross-entropy loss, class weighting, the Adam optimizer with decoupled
weight decay, a finite-difference gradient checker, and binary checkpoints.

All math runs in float64. Forward outputs are sigmoid probabilities clamped to
[PRED_EPS, 1 - PRED_EPS] so logs downstream are always finite.

Dropout RNG protocol (part of the forward contract): a single
``numpy.random.Generator(numpy.random.PCG64(rng_seed))`` is created per call
and consumed by dropout layers in network order; each layer draws
``rng.random(x.shape)`` (row-major) and keeps activations where the draw is
``>= dropout_p``, scaling survivors by ``1 / (1 - dropout_p)``.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDatasetError,
    DimensionError,
    NonFiniteError,
    ShapeMismatchError,
)

# prediction clamp applied before any log
PRED_EPS = 1e-7

# layer kind codes (also used by the checkpoint format)
KIND_CONV = 1
KIND_RELU = 2
KIND_MAXPOOL = 3
KIND_UPSAMPLE = 4
KIND_DROPOUT = 5
KIND_SIGMOID = 6

_KIND_NAMES = {
    KIND_CONV: "conv",
    KIND_RELU: "relu",
    KIND_MAXPOOL: "maxpool2",
    KIND_UPSAMPLE: "upsample2",
    KIND_DROPOUT: "dropout",
    KIND_SIGMOID: "sigmoid",
}


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack; kernel/in/out are zero for non-conv kinds."""

    kind: int
    kernel: int = 0
    in_ch: int = 0
    out_ch: int = 0

    def __repr__(self):
        name = _KIND_NAMES.get(self.kind, str(self.kind))
        if self.kind == KIND_CONV:
            return f"conv{self.kernel}x{self.kernel}({self.in_ch}->{self.out_ch})"
        return name


def default_arch(channels=(32, 64, 128, 64, 32)):
    """Encoder-decoder stack: two pool stages, two upsample stages, dropout
    before the final 1x1 convolution, sigmoid output.

    ``channels`` gives the five hidden widths; the default is the full-scale
    backbone, narrower tuples give desk-scale variants.
    """
    c1, c2, c3, c4, c5 = channels
    conv = lambda k, i, o: LayerSpec(KIND_CONV, k, i, o)
    return [
        conv(3, 1, c1),
        LayerSpec(KIND_RELU),
        LayerSpec(KIND_MAXPOOL),
        conv(3, c1, c2),
        LayerSpec(KIND_RELU),
        LayerSpec(KIND_MAXPOOL),
        conv(3, c2, c3),
        LayerSpec(KIND_RELU),
        LayerSpec(KIND_UPSAMPLE),
        conv(3, c3, c4),
        LayerSpec(KIND_RELU),
        LayerSpec(KIND_UPSAMPLE),
        conv(3, c4, c5),
        LayerSpec(KIND_RELU),
        LayerSpec(KIND_DROPOUT),
        conv(1, c5, 1),
        LayerSpec(KIND_SIGMOID),
    ]


def _validate_arch(arch):
    prev_out = 1
    for spec in arch:
        if spec.kind == KIND_CONV:
            if spec.in_ch != prev_out:
                raise ShapeMismatchError(
                    f"conv expects {prev_out} input channels, spec says {spec.in_ch}"
                )
            prev_out = spec.out_ch
    if prev_out != 1:
        raise ShapeMismatchError("network must end with a single output channel")


@dataclass
class ModelParams:
    """Architecture plus one (weight, bias) array pair per conv layer.

    ``weights`` is a flat list in declaration order: W0, b0, W1, b1, ...
    Conv weights have shape (out, in, k, k), biases (out,).
    """

    arch: list
    weights: list
    dropout_p: float = 0.0

    def copy(self):
        return ModelParams(list(self.arch), [w.copy() for w in self.weights],
                           self.dropout_p)

    def n_params(self):
        return sum(w.size for w in self.weights)

    def downsample_factor(self):
        return 2 ** sum(1 for s in self.arch if s.kind == KIND_MAXPOOL)


@dataclass
class AdamState:
    """Optimizer state; m/v mirror the parameter list."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        st = cls(lr=lr, weight_decay=weight_decay)
        st.m = [np.zeros_like(w) for w in params.weights]
        st.v = [np.zeros_like(w) for w in params.weights]
        return st


def init_params(arch, dropout_p=0.0, seed=0):
    """He-uniform conv weights from a seeded PRNG, zero biases."""
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError("dropout_p must be in [0, 1]")
    _validate_arch(arch)
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = []
    for spec in arch:
        if spec.kind != KIND_CONV:
            continue
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound,
                        size=(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
        weights.append(w)
        weights.append(np.zeros(spec.out_ch))
    return ModelParams(list(arch), weights, dropout_p)


def zero_params(arch, dropout_p=0.0):
    """All-zero weights; forward then yields sigmoid(0)=0.5 everywhere."""
    _validate_arch(arch)
    weights = []
    for spec in arch:
        if spec.kind != KIND_CONV:
            continue
        weights.append(np.zeros((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)))
        weights.append(np.zeros(spec.out_ch))
    return ModelParams(list(arch), weights, dropout_p)


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x, k):
    """(C,H,W) -> (C*k*k, H*W) patch matrix under same padding."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # (C, H, W, k, k) -> (C, k, k, H, W) -> (C*k*k, H*W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def _conv_forward(x, wgt, bias):
    out_c, in_c, k, _ = wgt.shape
    _, h, w = x.shape
    cols = _im2col(x, k)
    y = wgt.reshape(out_c, in_c * k * k) @ cols + bias[:, None]
    return y.reshape(out_c, h, w)


def _conv_backward(x, wgt, dy):
    """Returns (dx, dw, db); recomputes the patch matrix from the cached input."""
    out_c, in_c, k, _ = wgt.shape
    _, h, w = x.shape
    p = k // 2
    cols = _im2col(x, k)
    dy_flat = dy.reshape(out_c, h * w)
    db = dy_flat.sum(axis=1)
    dw = (dy_flat @ cols.T).reshape(wgt.shape)
    dcols = (wgt.reshape(out_c, in_c * k * k).T @ dy_flat).reshape(in_c, k, k, h, w)
    dxp = np.zeros((in_c, h + 2 * p, w + 2 * p))
    for a in range(k):
        for b in range(k):
            dxp[:, a:a + h, b:b + w] += dcols[:, a, b]
    dx = dxp[:, p:p + h, p:p + w] if p else dxp
    return dx, dw, db


def _maxpool_forward(x):
    c, h, w = x.shape
    flat = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4) \
            .reshape(c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # first max wins: deterministic tie-break
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool_backward(dy, idx, in_shape):
    c, h, w = in_shape
    dflat = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    return dflat.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4) \
                .reshape(c, h, w)


def _upsample_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(dy):
    c, h2, w2 = dy.shape
    return dy.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# forward / backward over the stack


def _check_image(params, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got shape {image.shape}")
    f = params.downsample_factor()
    h, w = image.shape
    if h % f or w % f:
        raise DimensionError(
            f"image dims {h}x{w} not divisible by downsampling factor {f}"
        )
    for wgt in params.weights:
        if not np.all(np.isfinite(wgt)):
            raise NonFiniteError("model weights contain NaN/Inf")
    return image


def forward_cached(params, image, dropout_active=False, rng_seed=None):
    """Forward pass keeping per-layer caches for the backward pass.

    Returns (pred, caches) where pred is the (H, W) clamped probability map.
    """
    image = _check_image(params, image)
    if dropout_active and rng_seed is None:
        raise ValueError("dropout_active requires rng_seed")
    rng = None
    if dropout_active and params.dropout_p > 0.0:
        rng = np.random.Generator(np.random.PCG64(rng_seed))

    x = image[None, :, :]
    caches = []
    wi = 0
    for spec in params.arch:
        if spec.kind == KIND_CONV:
            wgt, bias = params.weights[wi], params.weights[wi + 1]
            caches.append(("conv", x, wi))
            x = _conv_forward(x, wgt, bias)
            wi += 2
        elif spec.kind == KIND_RELU:
            caches.append(("relu", x))
            x = np.maximum(x, 0.0)
        elif spec.kind == KIND_MAXPOOL:
            y, idx = _maxpool_forward(x)
            caches.append(("maxpool", x.shape, idx))
            x = y
        elif spec.kind == KIND_UPSAMPLE:
            caches.append(("upsample",))
            x = _upsample_forward(x)
        elif spec.kind == KIND_DROPOUT:
            p = params.dropout_p
            if rng is not None:
                keep = rng.random(x.shape) >= p
                mask = keep / (1.0 - p)
                caches.append(("dropout", mask))
                x = x * mask
            else:
                caches.append(("dropout", None))
        elif spec.kind == KIND_SIGMOID:
            s = _sigmoid(x)
            caches.append(("sigmoid", s))
            x = np.clip(s, PRED_EPS, 1.0 - PRED_EPS)
        else:
            raise ValueError(f"unknown layer kind {spec.kind}")
    return x[0], caches


def forward(params, image, dropout_active=False, rng_seed=None):
    """Probability map for one grayscale image; values in (0, 1).

    Deterministic given (params, image, dropout_active, rng_seed).
    """
    pred, _ = forward_cached(params, image, dropout_active, rng_seed)
    return pred


def backward(params, caches, dpred):
    """Propagate a gradient w.r.t. the prediction map back to all weights.

    Returns the gradient list matching ``params.weights``.
    """
    grads = [np.zeros_like(w) for w in params.weights]
    dx = np.asarray(dpred, dtype=np.float64)[None, :, :]
    for cache in reversed(caches):
        tag = cache[0]
        if tag == "conv":
            _, x_in, wi = cache
            dx, dw, db = _conv_backward(x_in, params.weights[wi], dx)
            grads[wi] += dw
            grads[wi + 1] += db
        elif tag == "relu":
            dx = dx * (cache[1] > 0.0)
        elif tag == "maxpool":
            dx = _maxpool_backward(dx, cache[2], cache[1])
        elif tag == "upsample":
            dx = _upsample_backward(dx)
        elif tag == "dropout":
            if cache[1] is not None:
                dx = dx * cache[1]
        elif tag == "sigmoid":
            s = cache[1]
            inside = (s > PRED_EPS) & (s < 1.0 - PRED_EPS)
            dx = dx * s * (1.0 - s) * inside
    return grads


# ---------------------------------------------------------------------------
# loss, class weight, optimizer


def weighted_bce(pred, target, w):
    """Pixel-mean weighted BCE and its gradient w.r.t. the prediction.

    loss = -(1/N) * sum[ w*y*log(p) + (1-y)*log(1-p) ]
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"pred shape {pred.shape} != target shape {target.shape}"
        )
    if w <= 0:
        raise ValueError("class weight must be positive")
    n = pred.size
    loss = -(w * target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred)).sum() / n
    grad = -(w * target / pred - (1.0 - target) / (1.0 - pred)) / n
    return loss, grad


def class_weight(masks, orientation="bg_over_fg"):
    """Foreground weighting factor from pooled pixel counts of a mask set.

    Default orientation bg/fg balances the rarer foreground class; the literal
    fg/bg reading is available as ``orientation="fg_over_bg"``. All-foreground
    datasets fall back to 1.0; no foreground at all raises
    DegenerateDatasetError (callers fall back to w=1).
    """
    if orientation not in ("bg_over_fg", "fg_over_bg"):
        raise ValueError(f"unknown orientation {orientation!r}")
    masks = list(masks)
    if not masks:
        raise DegenerateDatasetError("empty mask collection")
    fg = 0
    total = 0
    for m in masks:
        arr = np.asarray(m)
        fg += int(np.count_nonzero(arr))
        total += arr.size
    bg = total - fg
    if fg == 0:
        raise DegenerateDatasetError("mask collection has no foreground pixels")
    if bg == 0:
        return 1.0
    return bg / fg if orientation == "bg_over_fg" else fg / bg


def adam_step(params, grads, state):
    """One Adam update with decoupled weight decay, in place.

    Standard bias-corrected Adam, then params scaled by (1 - lr*weight_decay).
    """
    if len(grads) != len(params.weights):
        raise ShapeMismatchError("gradient list does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradients contain NaN/Inf")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    decay = 1.0 - state.lr * state.weight_decay
    for i, g in enumerate(grads):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        params.weights[i] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            params.weights[i] *= decay
    return params, state


def loss_and_grads(params, image, target, w):
    """Full-network weighted BCE loss and parameter gradients for one sample."""
    pred, caches = forward_cached(params, image)
    loss, dpred = weighted_bce(pred, target, w)
    return loss, backward(params, caches, dpred)


def grad_check(params, image, target, w, n_sample=200, h=1e-5, seed=0):
    """Max relative error between backprop and central finite differences.

    Samples ``n_sample`` parameters; relative error uses
    |ad - fd| / max(1e-8, |fd|). Intended for tiny networks only.
    """
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _, grads = loss_and_grads(params, image, target, w)

    sizes = [w_.size for w_ in params.weights]
    total = sum(sizes)
    rng = np.random.Generator(np.random.PCG64(seed))
    n = min(n_sample, total)
    picks = rng.choice(total, size=n, replace=False)

    def loss_at():
        pred = forward(params, image)
        val, _ = weighted_bce(pred, target, w)
        return val

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in picks:
        li = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        off = int(flat_idx - bounds[li])
        flat = params.weights[li].reshape(-1)
        orig = flat[off]
        flat[off] = orig + h
        lp = loss_at()
        flat[off] = orig - h
        lm = loss_at()
        flat[off] = orig
        fd = (lp - lm) / (2.0 * h)
        ad = grads[li].reshape(-1)[off]
        err = abs(ad - fd) / max(1e-8, abs(fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, arch table, dropout_p, tensors

_MAGIC = b"FSELNET1"
_VERSION = 1


def save_checkpoint(params, path):
    """Little-endian binary checkpoint; see module docs for the layout."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(params.arch)))
        for spec in params.arch:
            fh.write(struct.pack("<4I", spec.kind, spec.kernel,
                                 spec.in_ch, spec.out_ch))
        fh.write(struct.pack("<d", params.dropout_p))
        for w in params.weights:
            fh.write(struct.pack("<I", w.ndim))
            fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        arch = []
        for _ in range(n_layers):
            kind, kernel, in_ch, out_ch = struct.unpack("<4I", fh.read(16))
            arch.append(LayerSpec(kind, kernel, in_ch, out_ch))
        (dropout_p,) = struct.unpack("<d", fh.read(8))
        weights = []
        n_tensors = 2 * sum(1 for s in arch if s.kind == KIND_CONV)
        for _ in range(n_tensors):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            weights.append(data.astype(np.float64))
    params = ModelParams(arch, weights, dropout_p)
    _validate_arch(arch)
    return params

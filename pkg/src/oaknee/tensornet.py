"""Small dense-tensor kernel set with analytic backward passes.

Image tensors are channels-last, (N, H, W, C); models convert from the
(N, C, H, W) layout at their boundary.  Training runs in float32, gradient
checks in float64; every layer keeps the dtype it was constructed with.

Each layer exposes ``forward(x, train)`` and ``backward(dout)``.  ``backward``
must follow the matching ``forward`` call; it fills ``layer.grads`` (same keys
as ``layer.params``) and returns the gradient with respect to the input.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import BatchTooSmall, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------


def _im2col3x3(x):
    """(N, H, W, C) -> (N*H*W, 9*C) patches for a 3x3, stride 1, pad 1 conv."""
    n, h, w, c = x.shape
    cols = np.empty((n * h * w, 9 * c), dtype=x.dtype)
    _k.im2col3x3(np.ascontiguousarray(x), cols)
    return cols


def conv2d_forward(x, weight, bias):
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    ``x`` is (N, H, W, C_in), ``weight`` is (3, 3, C_in, C_out).  Returns
    ``(out, cols)`` with ``out`` of shape (N, H, W, C_out).
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d expects NHWC input and (3, 3, C_in, C_out) weights, got {x.shape}, {weight.shape}")
    if x.shape[3] != weight.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, weights expect {weight.shape[2]}")
    n, h, w, _ = x.shape
    out_ch = weight.shape[3]
    cols = _im2col3x3(x)
    out = cols @ weight.reshape(-1, out_ch)
    out += bias
    return out.reshape(n, h, w, out_ch), cols


def conv2d_backward(dout, cols, x_shape, weight, need_dx=True):
    """Gradients of :func:`conv2d_forward`.  Returns (dx, dweight, dbias)."""
    out_ch = weight.shape[3]
    d2 = dout.reshape(-1, out_ch)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = d2 @ weight.reshape(-1, out_ch).T
    dx = np.empty(x_shape, dtype=dout.dtype)
    _k.col2im3x3(dcols, dx)
    return dx, dweight, dbias


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalization over the last axis.

    Train mode normalizes with the biased batch variance and updates the
    running statistics in place (unbiased variance, momentum 0.1).  Returns
    ``(out, cache)``; the cache is None in eval mode.
    """
    c = gamma.shape[0]
    if x.shape[-1] != c:
        raise ShapeError(f"batchnorm over {c} channels got input {x.shape}")
    if not train:
        scale = gamma / np.sqrt(running_var + BN_EPS)
        shift = beta - running_mean * scale
        return x * scale + shift, None
    if x.shape[0] < 2:
        raise BatchTooSmall("batch normalization in train mode needs at least 2 samples")
    x2 = np.ascontiguousarray(x).reshape(-1, c)
    m = x2.shape[0]
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    mean = np.empty(c, dtype=x.dtype)
    var = np.empty(c, dtype=x.dtype)
    inv_std = _k.bn_train_forward(x2, gamma, beta, out, xhat, mean, var, BN_EPS)
    running_mean *= 1 - BN_MOMENTUM
    running_mean += BN_MOMENTUM * mean
    running_var *= 1 - BN_MOMENTUM
    running_var += BN_MOMENTUM * var * (m / (m - 1))
    return out.reshape(x.shape), (xhat, inv_std)


def batchnorm_backward(dout, cache, gamma):
    xhat, inv_std = cache
    c = gamma.shape[0]
    d2 = np.ascontiguousarray(dout).reshape(-1, c)
    dx = np.empty_like(d2)
    dgamma = np.empty(c, dtype=dout.dtype)
    dbeta = np.empty(c, dtype=dout.dtype)
    _k.bn_train_backward(d2, xhat, gamma, inv_std, dx, dgamma, dbeta)
    return dx.reshape(dout.shape), dgamma, dbeta


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max over axes 1, 2 of an NHWC array.

    Ties go to the first element of the block in row-major order.  Returns
    ``(out, route)`` where ``route`` holds the winning position (0..3).
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    route = np.empty(out.shape, dtype=np.int8)
    _k.maxpool_forward(np.ascontiguousarray(x), out, route)
    return out, route


def maxpool2x2_backward(dout, route):
    n, h2, w2, c = dout.shape
    dx = np.empty((n, 2 * h2, 2 * w2, c), dtype=dout.dtype)
    _k.maxpool_backward(np.ascontiguousarray(dout), route, dx)
    return dx


def linear_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear layer expects (N, {weight.shape[0]}) input, got {x.shape}")
    return x @ weight + bias


def linear_backward(dout, x, weight, need_dx=True):
    dweight = x.T @ dout
    dbias = dout.sum(axis=0)
    dx = dout @ weight.T if need_dx else None
    return dx, dweight, dbias


def dropout_forward(x, rate, train, rng):
    """Inverted dropout.  Returns (out, mask); mask is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32 if x.dtype == np.float32 else np.float64) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: no parameters, identity."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False):
        return x

    def backward(self, dout):
        return dout


def _kaiming(rng, shape, fan_in, dtype):
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    This is the Kaiming-uniform rule with negative slope sqrt(5); the
    gain-sqrt(2) normal variant made the first SGD steps diverge at lr 0.01.
    """
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, need_input_grad=True):
        super().__init__()
        self.params["weight"] = _kaiming(rng, (3, 3, in_ch, out_ch), in_ch * 9, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.need_input_grad = need_input_grad

    def forward(self, x, train=False):
        out, cols = conv2d_forward(x, self.params["weight"], self.params["bias"])
        self._cache = (cols, x.shape)
        return out

    def backward(self, dout):
        cols, shape = self._cache
        dx, dw, db = conv2d_backward(dout, cols, shape, self.params["weight"], self.need_input_grad)
        self.grads["weight"], self.grads["bias"] = dw, db
        self._cache = None
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train,
        )
        return out

    def backward(self, dout):
        if self._cache is None:
            raise RuntimeError("batchnorm backward requires a preceding train-mode forward")
        dx, dg, db = batchnorm_backward(dout, self._cache, self.params["gamma"])
        self.grads["gamma"], self.grads["beta"] = dg, db
        self._cache = None
        return dx


class MaxPool2x2(Layer):
    def forward(self, x, train=False):
        out, self._arg = maxpool2x2_forward(x)
        return out

    def backward(self, dout):
        return maxpool2x2_backward(dout, self._arg)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, need_input_grad=True):
        super().__init__()
        self.params["weight"] = _kaiming(rng, (n_in, n_out), n_in, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.need_input_grad = need_input_grad

    def forward(self, x, train=False):
        self._x = x
        return linear_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, dout):
        dx, dw, db = linear_backward(dout, self._x, self.params["weight"], self.need_input_grad)
        self.grads["weight"], self.grads["bias"] = dw, db
        self._x = None
        return dx


class Dropout(Layer):
    """Inverted dropout.  With ``fixed_seed`` every forward call draws the
    same mask, which makes the layer a deterministic function for gradient
    checks."""

    def __init__(self, rate, rng=None, fixed_seed=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.fixed_seed = fixed_seed

    def forward(self, x, train=False):
        rng = self.rng if self.fixed_seed is None else np.random.default_rng(self.fixed_seed)
        out, self._mask = dropout_forward(x, self.rate, train, rng)
        return out

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer


def iter_params(named_layers):
    """Yield (qualified name, layer, key) for every trainable array."""
    for lname, layer in named_layers:
        for key in layer.params:
            yield f"{lname}.{key}", layer, key


def iter_buffers(named_layers):
    for lname, layer in named_layers:
        for key in layer.buffers:
            yield f"{lname}.{key}", layer, key


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)


def sgd_momentum_step(params, grads, state):
    """Classic momentum: ``v <- mu*v + g ; p <- p - lr*v``.  Updates in place.

    ``params`` and ``grads`` are dicts keyed by parameter name.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= state.momentum
        v += g
        state.velocity[name] = v
        p -= p.dtype.type(state.lr) * v
    return params


def step_lr(epoch, lr0=0.01, step=8, factor=0.1):
    """Learning rate for a 0-based epoch under a step-decay schedule."""
    return lr0 * factor ** (epoch // step)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

REL_FLOOR = 1e-6
# differences at or below this are float64 round-off, e.g. around a true zero gradient
ABS_TOL = 1e-9


def relative_error(analytic, numeric, floor=REL_FLOOR, atol=ABS_TOL):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; 0 where ``|a - n| <= atol``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.where(diff <= atol, 0.0, diff / denom)


def numeric_grad(f, array, eps=1e-5, indices=None, signature=None):
    """Central differences of scalar ``f()`` w.r.t. ``array`` (perturbed in place).

    With ``signature`` (a callable describing the piecewise-linear branch the
    last ``f()`` call took), an entry whose two probes land on different
    branches is retried with a 100x smaller step and set to NaN if it still
    straddles a kink.
    """
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        for step in (eps, eps / 100):
            flat[i] = orig + step
            fp = f()
            sp = signature() if signature else None
            flat[i] = orig - step
            fm = f()
            sm = signature() if signature else None
            flat[i] = orig
            if sp == sm:
                out[j] = (fp - fm) / (2 * step)
                break
        else:
            out[j] = np.nan
    return out


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_tensor: dict
    kink_skipped: int = 0

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def _branch_signature(layers):
    parts = []
    for _, lay in layers:
        if isinstance(lay, ReLU):
            parts.append(np.packbits(lay._mask).tobytes())
        elif isinstance(lay, MaxPool2x2):
            parts.append(lay._arg.tobytes())
    return hash(b"".join(parts))


def grad_check(layer, input_shapes, tolerance, seed=0, eps=1e-5, train=True, max_entries=None):
    """Compare analytic and central-difference gradients of a layer.

    The layer is driven with float64 inputs drawn from ``seed`` and the scalar
    loss ``sum(out * R)`` for a fixed random ``R``.  Every parameter and input
    element is checked unless ``max_entries`` caps the per-tensor count, in
    which case a random subset is used.  Entries whose finite-difference
    probes cross a ReLU or max-pool switch are not differentiable there and
    are excluded (counted in ``kink_skipped``).

    ``layer`` must already hold float64 parameters.  ``input_shapes`` is a
    single shape or a list of shapes for multi-input callables; for the latter
    ``layer`` must provide ``forward(*xs, train)`` and ``backward`` returning a
    tuple.
    """
    rng = np.random.default_rng(seed)
    multi = isinstance(input_shapes, list)
    shapes = input_shapes if multi else [input_shapes]
    xs = [rng.standard_normal(s) for s in shapes]
    layers = _named(layer)

    def run():
        return layer.forward(*xs, train=train) if multi else layer.forward(xs[0], train=train)

    saved = {k: (lay, key, lay.buffers[key].copy()) for k, lay, key in iter_buffers(layers)}

    def restore():
        for lay, key, val in saved.values():
            lay.buffers[key][...] = val

    out = run()
    weights = rng.standard_normal(out.shape)

    def loss():
        restore()
        return float(np.sum(run() * weights))

    restore()
    run()
    dx = layer.backward(weights)
    dxs = list(dx) if multi else [dx]
    analytic = {f"input{i}": d for i, d in enumerate(dxs)}
    targets = {f"input{i}": x for i, x in enumerate(xs)}
    for name, lay, key in iter_params(layers):
        analytic[name] = lay.grads[key]
        targets[name] = lay.params[key]

    def signature():
        return _branch_signature(layers)

    per_tensor = {}
    skipped = 0
    for name, arr in targets.items():
        if analytic[name] is None:
            continue
        idx = None
        if max_entries is not None and arr.size > max_entries:
            idx = rng.choice(arr.size, size=max_entries, replace=False)
        num = numeric_grad(loss, arr, eps, idx, signature)
        ana = analytic[name].reshape(-1)
        if idx is not None:
            ana = ana[idx]
        ok = np.isfinite(num)
        skipped += int((~ok).sum())
        per_tensor[name] = float(relative_error(ana[ok], num[ok]).max(initial=0.0))
    restore()
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(type(layer).__name__, worst, tolerance, per_tensor, skipped)


def _named(layer):
    if hasattr(layer, "named_layers"):
        return list(layer.named_layers())
    return [("", layer)]

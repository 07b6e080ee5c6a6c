"""Classifier families and the training loop.

* ``TinyCnn``      three Conv-BN-MaxPool-ReLU blocks on a 48x48 ROI patch
* ``Js2Net``       two-layer net on the 221-entry JS2 descriptor
* ``CombinedNet``  conv trunk features concatenated with JS2, one shared head
* ``LogisticModel`` L2-regularized logistic regression for the baselines

Network inputs are NCHW patches (N, 1, 48, 48) and/or (N, 221) descriptors.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataio
from . import tensornet as tn
from .errors import CheckpointError, DegenerateLabels, EmptyDataset, ShapeError
from .geometry import JS2_LENGTH
from .imaging import PATCH_CROP, PATCH_RESCALE, augment, crop_offset

HIDDEN = 256
TRUNK_FEATURES = 128 * 6 * 6
ARCH_TAGS = ("lr", "js2-nn", "cnn", "combined")


# ---------------------------------------------------------------------------
# network building blocks
# ---------------------------------------------------------------------------


class Standardize(tn.Layer):
    """Fixed affine ``(x - mean) * inv_std`` with stored statistics."""

    def __init__(self, n, dtype=np.float32):
        super().__init__()
        self.buffers["mean"] = np.zeros(n, dtype=dtype)
        self.buffers["inv_std"] = np.ones(n, dtype=dtype)

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        self.buffers["mean"][...] = x.mean(axis=0)
        self.buffers["inv_std"][...] = np.where(std > 0, 1.0 / np.where(std > 0, std, 1.0), 1.0)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.buffers["mean"].shape[0]:
            raise ShapeError(f"expected (N, {self.buffers['mean'].shape[0]}) features, got {x.shape}")
        return (x - self.buffers["mean"]) * self.buffers["inv_std"]

    def backward(self, dout):
        return dout * self.buffers["inv_std"]


def conv_trunk(rng, dtype, input_grad=False):
    layers = []
    for c_in, c_out in ((1, 32), (32, 64), (64, 128)):
        layers += [tn.Conv2d(c_in, c_out, rng, dtype, need_input_grad=input_grad or c_in != 1),
                   tn.BatchNorm2d(c_out, dtype), tn.MaxPool2x2(), tn.ReLU()]
    layers.append(tn.Flatten())
    return tn.Sequential(layers)


def fc_head(n_in, dropout, rng, dtype, input_grad=True):
    return tn.Sequential([
        tn.Linear(n_in, HIDDEN, rng, dtype, need_input_grad=input_grad),
        tn.ReLU(),
        tn.Dropout(dropout, np.random.default_rng(rng.integers(2 ** 63))),
        tn.Linear(HIDDEN, 2, rng, dtype),
    ])


def _to_nhwc(x):
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (PATCH_CROP, PATCH_CROP):
        raise ShapeError(f"expected (N, 1, {PATCH_CROP}, {PATCH_CROP}) patches, got {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


class Network:
    """Common parameter plumbing for the three network families."""

    arch = None
    inputs = ()

    def named_layers(self):
        for pname, part in self.parts():
            yield from part.named_layers(pname + ".")

    def state_dict(self):
        state = {}
        for name, lay, key in tn.iter_params(self.named_layers()):
            state[name] = lay.params[key]
        for name, lay, key in tn.iter_buffers(self.named_layers()):
            state[name] = lay.buffers[key]
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointError(f"tensor {name} has shape {src.shape}, model expects {arr.shape}")
            arr[...] = src

    def params_and_grads(self):
        params, grads = {}, {}
        for name, lay, key in tn.iter_params(self.named_layers()):
            params[name] = lay.params[key]
            grads[name] = lay.grads[key]
        return params, grads

    def parameter_count(self, include_norm=True):
        total = 0
        for name, lay, key in tn.iter_params(self.named_layers()):
            if include_norm or not isinstance(lay, tn.BatchNorm2d):
                total += lay.params[key].size
        return total

    def config(self):
        return {}


class TinyCnn(Network):
    arch = "cnn"
    inputs = ("patch",)

    def __init__(self, seed=0, dropout=0.5, dtype=np.float32, input_grad=False):
        rng = np.random.default_rng(seed)
        self.dropout = dropout
        self.trunk = conv_trunk(rng, dtype, input_grad)
        self.head = fc_head(TRUNK_FEATURES, dropout, rng, dtype)

    def parts(self):
        return (("trunk", self.trunk), ("head", self.head))

    def forward(self, patches, train=False):
        return self.head.forward(self.trunk.forward(_to_nhwc(patches), train), train)

    def backward(self, dlogits):
        dx = self.trunk.backward(self.head.backward(dlogits))
        return None if dx is None else dx.transpose(0, 3, 1, 2)

    def activations(self, patches):
        """NCHW output of each conv block (eval mode)."""
        x = _to_nhwc(patches)
        outs = []
        for i, layer in enumerate(self.trunk.layers[:-1]):
            x = layer.forward(x, False)
            if i % 4 == 3:
                outs.append(x.transpose(0, 3, 1, 2))
        return outs

    def config(self):
        return {"dropout": self.dropout}


class Js2Net(Network):
    arch = "js2-nn"
    inputs = ("js2",)

    def __init__(self, seed=0, dropout=0.5, dtype=np.float32, n_features=JS2_LENGTH):
        rng = np.random.default_rng(seed)
        self.dropout = dropout
        self.n_features = n_features
        self.norm = tn.Sequential([Standardize(n_features, dtype)])
        self.head = fc_head(n_features, dropout, rng, dtype, input_grad=False)

    def parts(self):
        return (("norm", self.norm), ("head", self.head))

    def forward(self, js2, train=False):
        return self.head.forward(self.norm.forward(js2, train), train)

    def backward(self, dlogits):
        self.head.backward(dlogits)
        return None

    def config(self):
        return {"dropout": self.dropout, "n_features": self.n_features}


class CombinedNet(Network):
    arch = "combined"
    inputs = ("patch", "js2")

    def __init__(self, seed=0, dropout=0.3, dtype=np.float32, input_grad=False):
        rng = np.random.default_rng(seed)
        self.dropout = dropout
        self.trunk = conv_trunk(rng, dtype, input_grad)
        self.norm = tn.Sequential([Standardize(JS2_LENGTH, dtype)])
        self.head = fc_head(TRUNK_FEATURES + JS2_LENGTH, dropout, rng, dtype)
        self.input_grad = input_grad

    def parts(self):
        return (("trunk", self.trunk), ("norm", self.norm), ("head", self.head))

    def fuse(self, patches, js2, train=False):
        t = self.trunk.forward(_to_nhwc(patches), train)
        return np.concatenate([t, self.norm.forward(js2, train).astype(t.dtype)], axis=1)

    def forward(self, patches, js2, train=False):
        return self.head.forward(self.fuse(patches, js2, train), train)

    def backward(self, dlogits):
        d = self.head.backward(dlogits)
        dpatch = self.trunk.backward(np.ascontiguousarray(d[:, :TRUNK_FEATURES]))
        if not self.input_grad:
            return None
        djs2 = self.norm.backward(d[:, TRUNK_FEATURES:])
        return dpatch.transpose(0, 3, 1, 2), djs2

    def config(self):
        return {"dropout": self.dropout}


NETWORKS = {"cnn": TinyCnn, "js2-nn": Js2Net, "combined": CombinedNet}
DEFAULT_DROPOUT = {"cnn": 0.5, "js2-nn": 0.5, "combined": 0.3}


def build_network(arch, seed=0, dtype=np.float32, **config):
    if arch not in NETWORKS:
        raise ValueError(f"unknown network architecture {arch!r}")
    config.setdefault("dropout", DEFAULT_DROPOUT[arch])
    return NETWORKS[arch](seed=seed, dtype=dtype, **config)


def tiny_cnn_closed_form_count():
    """Conv and FC weights plus biases (batch-norm affine parameters excluded)."""
    conv = (1 * 32 + 32 * 64 + 64 * 128) * 9 + (32 + 64 + 128)
    head = TRUNK_FEATURES * HIDDEN + HIDDEN + HIDDEN * 2 + 2
    return conv + head


TINY_CNN_PARAMS = 1_273_090
TINY_CNN_PARAMS_WITH_BN = TINY_CNN_PARAMS + 2 * (32 + 64 + 128)


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass
class LogisticModel:
    """``p = sigmoid(((x - mean) / scale) @ weights + bias)``."""

    weights: np.ndarray
    bias: float
    l2_lambda: float = 0.0
    mean: np.ndarray = None
    scale: np.ndarray = None
    objective_trace: list = field(default_factory=list)

    arch = "lr"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.weights.shape[0]
        self.mean = np.zeros(n) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.scale = np.ones(n) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)) or not math.isfinite(self.bias):
            raise ValueError("logistic weights must be finite")

    def decision(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ShapeError(f"expected (N, {self.weights.shape[0]}) features, got {x.shape}")
        return ((x - self.mean) / self.scale) @ self.weights + self.bias

    def predict_proba(self, features):
        return _sigmoid(self.decision(features))

    def state_dict(self):
        return {"weights": self.weights, "bias": np.array([self.bias]), "mean": self.mean, "scale": self.scale}

    def config(self):
        return {"l2_lambda": self.l2_lambda}


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_objective(w, b, x, y, l2_lambda):
    """Mean cross entropy plus ``lambda/2 * |w|^2`` and its gradient."""
    z = x @ w + b
    # log(1 + e^z) - y*z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2_lambda * float(w @ w)
    r = (_sigmoid(z) - y) / len(y)
    return float(loss), x.T @ r + l2_lambda * w, float(r.sum())


def standardization(features):
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def fit_logistic(features, labels, l2_lambda=1e-3, max_iter=2000, tol=1e-6):
    """Full-batch gradient descent with Armijo backtracking.

    ``features`` should already be standardized.  The first trial step of
    each iteration is the Barzilai-Borwein estimate.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"features {x.shape} do not match {y.shape[0]} labels")
    if l2_lambda < 0:
        raise ValueError("l2_lambda must be non-negative")
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("logistic regression needs samples from both classes")
    w = np.zeros(x.shape[1])
    b = 0.0
    f, gw, gb = logistic_objective(w, b, x, y, l2_lambda)
    trace = [f]
    step = 1.0
    prev = None
    for _ in range(max_iter):
        gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
        if gnorm < tol:
            break
        g2 = float(gw @ gw) + gb * gb
        if prev is not None:
            sw, sb, yw, yb = w - prev[0], b - prev[1], gw - prev[2], gb - prev[3]
            sy = float(sw @ yw) + sb * yb
            if sy > 0:
                step = (float(sw @ sw) + sb * sb) / sy
        t = step
        while True:
            w_new, b_new = w - t * gw, b - t * gb
            f_new, gw_new, gb_new = logistic_objective(w_new, b_new, x, y, l2_lambda)
            if f_new <= f - 1e-4 * t * g2 or t < 1e-14:
                break
            t *= 0.5
        if f_new > f:
            break
        prev = (w, b, gw, gb)
        w, b, f, gw, gb = w_new, b_new, f_new, gw_new, gb_new
        trace.append(f)
    return LogisticModel(w, b, l2_lambda, objective_trace=trace)


def train_logistic(features, labels, l2_lambda=1e-3, max_iter=2000, tol=1e-6):
    """Standardize with the training statistics, then fit."""
    mean, scale = standardization(features)
    x = (np.asarray(features, dtype=np.float64) - mean) / scale
    model = fit_logistic(x, labels, l2_lambda, max_iter, tol)
    model.mean, model.scale = mean, scale
    return model


# ---------------------------------------------------------------------------
# datasets and training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 64
    lr0: float = 0.01
    lr_step: int = 8
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    dropout: float = None
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 2 or self.lr0 <= 0 or self.lr_step < 1:
            raise ValueError("epochs >= 1, batch >= 2, lr0 > 0 and lr_step >= 1 are required")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or not 0 < self.lr_factor <= 1:
            raise ValueError("momentum in [0, 1), weight_decay >= 0, lr_factor in (0, 1] required")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Per-knee model inputs.

    ``patches`` holds the 56x56 rescaled ROI patches scaled to [0, 1]; crops
    are taken when batches are assembled.  ``js2`` is (N, 221).
    """

    knee_ids: list
    labels: np.ndarray
    js2: np.ndarray = None
    patches: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.knee_ids)
        for name in ("js2", "patches"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ShapeError(f"{name} has {len(arr)} rows for {n} knees")
        if self.patches is not None and self.patches.shape[1:] != (PATCH_RESCALE, PATCH_RESCALE):
            raise ShapeError(f"patches must be {PATCH_RESCALE}x{PATCH_RESCALE}, got {self.patches.shape[1:]}")

    def __len__(self):
        return len(self.knee_ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset([self.knee_ids[i] for i in idx], self.labels[idx],
                       None if self.js2 is None else self.js2[idx],
                       None if self.patches is None else self.patches[idx])


def batch_inputs(model, data, idx, mode="eval", rng=None, augment_patches=False):
    """Assemble the positional inputs of ``model.forward`` for samples ``idx``."""
    out = []
    for kind in model.inputs:
        if kind == "js2":
            if data.js2 is None:
                raise ShapeError(f"{model.arch} needs JS2 descriptors")
            out.append(np.asarray(data.js2[idx], dtype=np.float32))
        else:
            if data.patches is None:
                raise ShapeError(f"{model.arch} needs ROI patches")
            crops = np.empty((len(idx), 1, PATCH_CROP, PATCH_CROP), dtype=np.float32)
            for j, i in enumerate(idx):
                r, c = crop_offset(mode, rng)
                crop = data.patches[i, r:r + PATCH_CROP, c:c + PATCH_CROP]
                if augment_patches:
                    crop = augment(crop, rng, (-5.0, 5.0), (0.9, 1.1), (-0.05, 0.05))
                crops[j, 0] = crop
            out.append(crops)
    return out


def predict_network(model, data, batch=256):
    """Class-1 softmax probabilities in eval mode."""
    scores = np.empty(len(data))
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(start + batch, len(data)))
        logits = model.forward(*batch_inputs(model, data, idx), train=False)
        scores[idx] = tn.softmax(logits.astype(np.float64))[:, 1]
    return scores


@dataclass
class TrainedModel:
    model: object
    arch: str
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def predict_scores(self, data):
        return predict_scores(self, data)


def predict_scores(trained, data):
    """OA probability per sample; ``data`` is a Dataset or, for LR, a matrix."""
    model = trained.model if isinstance(trained, TrainedModel) else trained
    if isinstance(model, LogisticModel):
        return model.predict_proba(data)
    return predict_network(model, data)


def train(model, train_set, val_set, cfg, log=None):
    """Mini-batch SGD with momentum and step decay; keeps the best-val-AUC epoch.

    Returns a :class:`TrainedModel` and the per-epoch history.
    """
    from .evaluation import roc_auc

    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("training and validation splits must be non-empty")
    if len(np.unique(val_set.labels)) < 2:
        raise DegenerateLabels("validation split needs both classes for AUC-based selection")
    if set(train_set.knee_ids) & set(val_set.knee_ids):
        raise ValueError("train and validation splits share knees")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A]))
    for _, lay in model.named_layers():
        if isinstance(lay, tn.Dropout):
            lay.rng = np.random.default_rng(rng.integers(2 ** 63))
    if "js2" in model.inputs:
        norm = model.norm.layers[0]
        norm.fit(train_set.js2)
    state = tn.SgdState(cfg.lr0, cfg.momentum, cfg.weight_decay)
    n = len(train_set)
    history = []
    best_auc, best_state, best_epoch = -1.0, None, -1
    for epoch in range(cfg.epochs):
        state.lr = tn.step_lr(epoch, cfg.lr0, cfg.lr_step, cfg.lr_factor)
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            if len(idx) < 2:
                # a single leftover sample cannot be batch-normalized
                continue
            inputs = batch_inputs(model, train_set, idx, "train", rng, cfg.augment)
            logits = model.forward(*inputs, train=True)
            loss, grad = tn.softmax_cross_entropy(logits, train_set.labels[idx])
            model.backward(grad.astype(logits.dtype))
            params, grads = model.params_and_grads()
            tn.sgd_momentum_step(params, grads, state)
            losses.append(loss)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_auc = roc_auc(predict_network(model, val_set), val_set.labels).auc
        history.append({"epoch": epoch, "lr": state.lr, "train_loss": train_loss, "val_auc": val_auc})
        if log is not None:
            log(f"epoch {epoch:3d}  lr {state.lr:.6g}  loss {train_loss:.5f}  val_auc {val_auc:.4f}")
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    meta = {"train_config": cfg.to_dict(), "best_epoch": best_epoch, "best_val_auc": best_auc,
            "model_config": model.config()}
    return TrainedModel(model, model.arch, meta, history), history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, trained):
    meta = dict(trained.metadata)
    meta["model_config"] = trained.model.config()
    dataio.save_checkpoint(path, trained.arch, trained.model.state_dict(), meta)


def load_model(path):
    arch, tensors, meta = dataio.load_checkpoint(path)
    if arch == "lr":
        try:
            model = LogisticModel(tensors["weights"], float(tensors["bias"][0]),
                                  meta.get("model_config", {}).get("l2_lambda", 0.0),
                                  tensors["mean"], tensors["scale"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: logistic checkpoint lacks tensor {exc}") from None
    elif arch in NETWORKS:
        model = build_network(arch, **meta.get("model_config", {}))
        model.load_state_dict(tensors)
    else:
        raise CheckpointError(f"{path}: unknown architecture tag {arch!r}")
    return TrainedModel(model, arch, meta)

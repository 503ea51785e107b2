"""Small numpy CNN/MLP engine with hand-written backpropagation.

Images are NHWC arrays in pixel units (0-255); they are scaled to [0, 1]
at the model boundary. Parameters live in an ordered dict keyed
``"<layer index>.weight"`` / ``"<layer index>.bias"``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, ShapeError, TrainingError

log = logging.getLogger(__name__)

PIXEL_SCALE = 255.0


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None  # None -> kernel // 2 ("same" at stride 1)

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    """Mean over the spatial axes; (l, w, c) -> (c,)."""


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Union[Conv2D, ReLU, MaxPool, Flatten, GlobalAvgPool, Dense]


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input dims ``(l, w, c)`` and class count."""

    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shapes()  # validates

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (without batch axis)."""
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (l, w, c), got {self.input_shape}")
        if not self.layers:
            raise ConfigurationError("model has no layers")
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: conv2d needs a 3-d input, got {shape}")
                h, w, _ = shape
                k, s, p = layer.kernel, layer.stride, layer.pad
                ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if ho < 1 or wo < 1 or layer.out_channels < 1:
                    raise ConfigurationError(f"layer {i}: conv2d output would be empty from {shape}")
                shape = (ho, wo, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[0] < layer.size or shape[1] < layer.size:
                    raise ConfigurationError(f"layer {i}: maxpool cannot reduce {shape}")
                shape = (shape[0] // layer.size, shape[1] // layer.size, shape[2])
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, GlobalAvgPool):
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: global pooling needs a 3-d input, got {shape}")
                shape = (shape[2],)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ConfigurationError(f"layer {i}: dense needs a flat input, got {shape}")
                if layer.out_features < 1:
                    raise ConfigurationError(f"layer {i}: dense out_features must be >= 1")
                shape = (layer.out_features,)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ConfigurationError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.out_features != self.num_classes:
            raise ConfigurationError("final layer must be dense with num_classes outputs")
        return out

    @property
    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv2D, Dense))]


def small_cnn(input_shape=(16, 16, 3), num_classes=10, channels=(16, 32, 32), head: str = "gap") -> ModelSpec:
    """Three 3x3 conv blocks and a dense classifier.

    ``head="gap"``: conv-ReLU blocks with 2x2 max pooling between them and a
    global average pool before the classifier. ``head="flatten"``: every block
    pools and the final feature map is flattened.
    """
    layers: list = []
    for j, ch in enumerate(channels):
        layers += [Conv2D(ch, 3), ReLU()]
        if head == "flatten" or j < len(channels) - 1:
            layers.append(MaxPool(2))
    if head == "gap":
        layers += [GlobalAvgPool(), Dense(num_classes)]
    elif head == "flatten":
        layers += [Flatten(), Dense(num_classes)]
    else:
        raise ConfigurationError(f"unknown head {head!r}")
    return ModelSpec(tuple(layers), input_shape, num_classes)


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> ModelSpec:
    """Dense network on flat ``(input_dim, 1, 1)`` inputs."""
    layers: list = [Flatten()]
    for h in hidden:
        layers += [Dense(h), ReLU()]
    layers.append(Dense(num_classes))
    return ModelSpec(tuple(layers), (input_dim, 1, 1), num_classes)


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def layer_names(self) -> list[str]:
        return [str(i) for i in self.spec.param_layers]


def layer_param_count(layer: Layer, in_shape: tuple) -> int:
    if isinstance(layer, Conv2D):
        return layer.kernel * layer.kernel * in_shape[-1] * layer.out_channels + layer.out_channels
    if isinstance(layer, Dense):
        return in_shape[0] * layer.out_features + layer.out_features
    return 0


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    tensors = {}
    for i in spec.param_layers:
        layer = spec.layers[i]
        in_shape = spec.input_shape if i == 0 else shapes[i - 1]
        if isinstance(layer, Conv2D):
            wshape = (layer.kernel, layer.kernel, in_shape[-1], layer.out_channels)
            fan_in = layer.kernel * layer.kernel * in_shape[-1]
            nout = layer.out_channels
        else:
            wshape = (in_shape[0], layer.out_features)
            fan_in = in_shape[0]
            nout = layer.out_features
        bound = np.sqrt(6.0 / fan_in)
        tensors[f"{i}.weight"] = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        tensors[f"{i}.bias"] = np.zeros(nout, dtype=dtype)
    params = ModelParams(spec, tensors)
    log.debug("built model with %d parameters", params.n_params)
    return params


# ---------------------------------------------------------------- kernels


def _im2col(x: np.ndarray, k: int, s: int, p: int):
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    b, h, w, c = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]  # (b, ho, wo, c, k, k)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
    return cols, (b, h, w, c, ho, wo)


def _col2im(dcols: np.ndarray, geom, k: int, s: int, p: int) -> np.ndarray:
    b, h, w, c, ho, wo = geom
    dcols = dcols.reshape(b, ho, wo, k * k, c)
    dx = np.zeros((b, h, w, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i * k + j, :]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx


def _maxpool(x: np.ndarray, size: int):
    """Non-overlapping max pooling; ``arg`` holds the winning offset in each
    window (first maximum in row-major order wins)."""
    b, h, w, c = x.shape
    h2, w2 = h // size, w // size
    best = x[:, 0 : h2 * size : size, 0 : w2 * size : size, :].copy()
    arg = np.zeros(best.shape, dtype=np.int8)
    for t in range(1, size * size):
        i, j = divmod(t, size)
        cand = x[:, i : h2 * size : size, j : w2 * size : size, :]
        better = cand > best
        np.copyto(arg, t, where=better)
        np.maximum(best, cand, out=best)
    return best, arg


def _maxpool_backward(dout: np.ndarray, arg: np.ndarray, in_shape: tuple, size: int) -> np.ndarray:
    b, h, w, c = in_shape
    h2, w2 = h // size, w // size
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for t in range(size * size):
        i, j = divmod(t, size)
        np.copyto(dx[:, i : h2 * size : size, j : w2 * size : size, :], dout, where=arg == t)
    return dx


def _forward(params: ModelParams, x: np.ndarray, keep: bool):
    """Run all layers; returns (logits, caches, activations)."""
    spec = params.spec
    caches = []
    acts = []
    for i, layer in enumerate(spec.layers):
        cache = None
        if isinstance(layer, Conv2D):
            wt = params.tensors[f"{i}.weight"]
            k = layer.kernel
            cols, geom = _im2col(x, k, layer.stride, layer.pad)
            out = cols @ wt.reshape(-1, wt.shape[-1]) + params.tensors[f"{i}.bias"]
            x_new = out.reshape(geom[0], geom[4], geom[5], wt.shape[-1])
            cache = (cols, geom) if keep else None
        elif isinstance(layer, Dense):
            cache = x if keep else None
            x_new = x @ params.tensors[f"{i}.weight"] + params.tensors[f"{i}.bias"]
        elif isinstance(layer, ReLU):
            x_new = np.maximum(x, 0)
            cache = x_new > 0 if keep else None
        elif isinstance(layer, MaxPool):
            x_new, arg = _maxpool(x, layer.size)
            cache = (arg, x.shape) if keep else None
        elif isinstance(layer, Flatten):
            cache = x.shape
            x_new = x.reshape(x.shape[0], -1)
        elif isinstance(layer, GlobalAvgPool):
            cache = x.shape
            x_new = x.mean(axis=(1, 2))
        caches.append(cache)
        acts.append(x_new)
        x = x_new
    return x, caches, acts


def _backward(params: ModelParams, caches, dout: np.ndarray, want_input: bool = False):
    spec = params.spec
    grads = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Conv2D):
            cols, geom = cache
            wt = params.tensors[f"{i}.weight"]
            d2 = dout.reshape(-1, wt.shape[-1])
            grads[f"{i}.weight"] = (cols.T @ d2).reshape(wt.shape)
            grads[f"{i}.bias"] = d2.sum(axis=0)
            if i > 0 or want_input:
                dout = _col2im(d2 @ wt.reshape(-1, wt.shape[-1]).T, geom, layer.kernel, layer.stride, layer.pad)
        elif isinstance(layer, Dense):
            wt = params.tensors[f"{i}.weight"]
            grads[f"{i}.weight"] = cache.T @ dout
            grads[f"{i}.bias"] = dout.sum(axis=0)
            if i > 0 or want_input:
                dout = dout @ wt.T
        elif isinstance(layer, ReLU):
            dout = dout * cache
        elif isinstance(layer, MaxPool):
            arg, in_shape = cache
            dout = _maxpool_backward(dout, arg, in_shape, layer.size)
        elif isinstance(layer, Flatten):
            dout = dout.reshape(cache)
        elif isinstance(layer, GlobalAvgPool):
            b, h, w, c = cache
            dout = np.broadcast_to(dout[:, None, None, :] / (h * w), cache).copy()
    grads = {k: grads[k] for k in params.tensors}
    return grads, (dout if want_input else None)


def _prepare(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    spec_shape = params.spec.input_shape
    if batch.ndim == 3 and batch.shape == spec_shape:
        batch = batch[None]
    if batch.ndim == 2 and spec_shape[1:] == (1, 1) and batch.shape[1] == spec_shape[0]:
        batch = batch.reshape(-1, *spec_shape)
    if batch.shape[1:] != spec_shape:
        raise ShapeError(f"batch dims {batch.shape[1:]} do not match model input {spec_shape}")
    return batch.astype(params.dtype, copy=False) / params.dtype.type(PIXEL_SCALE)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch of images given in pixel units."""
    logits, _, _ = _forward(params, _prepare(params, batch), keep=False)
    return logits


def predict(params: ModelParams, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    batch = np.asarray(batch)
    out = [forward(params, batch[i : i + chunk]).argmax(axis=1) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    return labels.astype(int)


def one_hot(labels, k: int, dtype=np.float64) -> np.ndarray:
    labels = _check_labels(labels, k)
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def soft_loss_and_grads(params: ModelParams, batch, targets: np.ndarray, want_input: bool = False,
                        return_logits: bool = False):
    """Mean cross-entropy against target distributions ``targets`` (B, K).

    Returns ``(loss, grads)``, with the pixel-unit input gradient appended
    when ``want_input`` and the logits appended when ``return_logits``.
    """
    x = _prepare(params, batch)
    logits, caches, _ = _forward(params, x, keep=True)
    targets = targets.astype(logits.dtype, copy=False)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = x.shape[0]
    loss = float(-(targets * logp).sum() / n)
    dlogits = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
    grads, dx = _backward(params, caches, dlogits, want_input=want_input)
    out = (loss, grads)
    if want_input:
        out += (dx / PIXEL_SCALE,)
    if return_logits:
        out += (logits,)
    return out


def loss_and_grads(params: ModelParams, batch, labels):
    """Mean softmax cross-entropy and its parameter gradients."""
    targets = one_hot(labels, params.spec.num_classes, params.dtype)
    return soft_loss_and_grads(params, batch, targets)


def input_gradient(params: ModelParams, batch, labels) -> np.ndarray:
    """d(mean loss)/d(input pixels), scaled back up by batch size so each
    row is the gradient of that example's own loss."""
    targets = one_hot(labels, params.spec.num_classes, params.dtype)
    _, _, dx = soft_loss_and_grads(params, batch, targets, want_input=True)
    return dx * len(targets)


def example_losses(params: ModelParams, batch, labels) -> np.ndarray:
    labels = _check_labels(labels, params.spec.num_classes)
    logits = forward(params, batch)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


# ---------------------------------------------------------------- training


@dataclass
class TrainSchedule:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 60
    patience: int = 5
    seed: int = 3407
    min_epochs: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be > 0")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")


def sgd_step(params: dict, grads: dict, velocity: dict, schedule: TrainSchedule, masks: Optional[dict] = None):
    """Classical momentum: v <- mu*v + g ; theta <- theta - lr*v.

    Works on plain dicts of arrays (in place) and returns them. Entries of
    ``masks`` pin pruned weights at zero.
    """
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        v = velocity[k]
        v *= schedule.momentum
        v += g
        params[k] -= schedule.lr * v
        if masks is not None and k in masks:
            params[k] *= masks[k]
    return params, velocity


def evaluate(params: ModelParams, images, labels, chunk: int = 512) -> tuple[float, float]:
    """Mean loss and accuracy over a labelled set."""
    labels = _check_labels(labels, params.spec.num_classes)
    total_loss = 0.0
    correct = 0
    for i in range(0, len(labels), chunk):
        logits = forward(params, images[i : i + chunk])
        y = labels[i : i + chunk]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss += float(-logp[np.arange(len(y)), y].sum())
        correct += int((logits.argmax(axis=1) == y).sum())
    n = max(len(labels), 1)
    return total_loss / n, correct / n


BatchTransform = Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple]


def train_arrays(
    params: ModelParams,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    schedule: TrainSchedule,
    batch_transform: Optional[BatchTransform] = None,
    masks: Optional[dict] = None,
    on_epoch: Optional[Callable[[int, ModelParams], None]] = None,
):
    """Minibatch SGD with early stopping on validation loss.

    Returns the parameters of the best-validation epoch and a per-epoch
    history. ``batch_transform(x, y, rng) -> (x, soft_targets)`` lets callers
    replace hard labels per batch (CutMix).
    """
    if len(y_train) == 0 or len(y_val) == 0:
        raise InputError("train and validation sets must be non-empty")
    k = params.spec.num_classes
    y_train = _check_labels(y_train, k)
    y_val = _check_labels(y_val, k)
    rng = np.random.default_rng(schedule.seed)
    work = params.copy()
    velocity = work.zeros_like()
    best = work.copy()
    best_loss = np.inf
    stale = 0
    history = []
    n = len(y_train)
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(n)
        run_loss = 0.0
        run_hits = 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if batch_transform is not None:
                xb, targets = batch_transform(xb, yb, rng)
            else:
                targets = one_hot(yb, k, work.dtype)
            loss, grads, logits = soft_loss_and_grads(work, xb, targets, return_logits=True)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged (NaN/Inf) at epoch {epoch}")
            sgd_step(work.tensors, grads, velocity, schedule, masks)
            run_loss += loss * len(idx)
            run_hits += int(np.sum(np.argmax(logits, axis=1) == yb))
        # running minibatch statistics; a second pass over the train set would cost a third of the epoch
        train_loss, train_acc = run_loss / n, run_hits / n
        val_loss, val_acc = evaluate(work, x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"loss diverged (NaN/Inf) at epoch {epoch}")
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc,
             "val_loss": val_loss, "val_acc": val_acc}
        )
        if on_epoch is not None:
            on_epoch(epoch, work)
        log.debug("epoch %d train %.4f/%.3f val %.4f/%.3f", epoch, train_loss, train_acc, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = work.copy()
            stale = 0
        else:
            stale += 1
            if stale >= schedule.patience and epoch + 1 >= schedule.min_epochs:
                break
    return best, history


def train_with_early_stopping(params: ModelParams, train, val, schedule: TrainSchedule, **kwargs):
    """Train on a :class:`~multibackdoor.data.LabeledDataset` (poison labels
    where set, clean labels otherwise) and early-stop on ``val``."""
    return train_arrays(
        params, train.images, train.training_labels(), val.images, val.training_labels(), schedule, **kwargs
    )


def accuracy(params: ModelParams, data, label_field: str = "clean") -> float:
    """Fraction of rows whose argmax prediction equals the chosen label field
    (``"clean"`` or ``"poison"``)."""
    if len(data) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    if label_field == "clean":
        labels = data.clean_labels
    elif label_field in ("poison", "poison-target"):
        if np.any(data.poison_labels < 0):
            raise InputError("poison labels requested but missing for some rows")
        labels = data.poison_labels
    else:
        raise InputError(f"unknown label field {label_field!r}")
    return float(np.mean(predict(params, data.images) == labels))


def penultimate_activations(params: ModelParams, data, chunk: int = 512) -> np.ndarray:
    """Inputs to the final dense layer, one row per example."""
    spec = params.spec
    if len(spec.param_layers) < 2:
        raise ConfigurationError("penultimate activations need at least two parameterized layers")
    images = data.images if hasattr(data, "images") else np.asarray(data)
    rows = []
    for i in range(0, len(images), chunk):
        _, _, acts = _forward(params, _prepare(params, images[i : i + chunk]), keep=False)
        rows.append(acts[-2])
    return np.concatenate(rows) if rows else np.zeros((0, spec.shapes()[-2][0]))

"""Small differentiable compute core for convolutional classifiers.

Everything is batched numpy float64: activations carry a leading batch axis
``(N, ...)``.  Public entry points also accept a single unbatched input and
return unbatched results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("dense", "conv2d", "relu", "maxpool2d", "avgpool2d", "globalavgpool", "flatten")
STANDARD, GUIDED = "standard", "guided"
KINK_TOL = 1e-8


class ShapeError(ValueError):
    """Input or weight shape does not fit a layer."""


class StaleTraceError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("dense layer needs positive in/out features")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
                raise ValueError("conv2d needs positive channels, kernel and stride")
            if self.pad < 0:
                raise ValueError("conv2d padding must be nonnegative")
        if self.kind in ("maxpool2d", "avgpool2d") and (self.window < 1 or self.stride < 1):
            raise ValueError(f"{self.kind} needs positive window and stride")

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            return [(self.out_features, self.in_features), (self.out_features,)]
        if self.kind == "conv2d":
            return [
                (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w),
                (self.out_channels,),
            ]
        return []

    def output_shape(self, in_shape: Sequence[int], index: int = 0) -> tuple[int, ...]:
        """Per-sample output shape, raising ShapeError naming this layer."""
        in_shape = tuple(in_shape)
        where = f"layer {index} ({self.kind})"
        if self.kind == "dense":
            if in_shape != (self.in_features,):
                raise ShapeError(f"{where}: expected input ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "relu":
            return in_shape
        if len(in_shape) != 3:
            raise ShapeError(f"{where}: expected C x H x W input, got {in_shape}")
        c, h, w = in_shape
        if self.kind == "globalavgpool":
            return (c,)
        if self.kind == "conv2d":
            if c != self.in_channels:
                raise ShapeError(f"{where}: expected {self.in_channels} channels, got {c}")
            kh, kw, pad = self.kernel_h, self.kernel_w, self.pad
        else:
            kh = kw = self.window
            pad = 0
        ho = (h + 2 * pad - kh) // self.stride + 1
        wo = (w + 2 * pad - kw) // self.stride + 1
        if ho < 1 or wo < 1 or h + 2 * pad < kh or w + 2 * pad < kw:
            raise ShapeError(f"{where}: window larger than input {in_shape}")
        return (self.out_channels if self.kind == "conv2d" else c, ho, wo)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel: int | tuple[int, int], stride: int = 1, pad: int = 0) -> LayerSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_h=kh, kernel_w=kw, stride=stride, pad=pad)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(window: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, stride=stride or window)


def avgpool2d(window: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("avgpool2d", window=window, stride=stride or window)


def globalavgpool() -> LayerSpec:
    return LayerSpec("globalavgpool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


# --------------------------------------------------------------------------
# model


@dataclass
class Model:
    """Ordered layers plus their parameters.

    ``input_shape`` is optional; without it shape compatibility is checked
    as far as the layers themselves allow, and fully on the first forward.
    """

    layers: list[LayerSpec]
    weights: list[list[np.ndarray]]
    num_classes: int
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.layers = list(self.layers)
        self.weights = [[np.asarray(p, dtype=np.float64) for p in ps] for ps in self.weights]
        if self.input_shape is not None:
            self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if len(self.weights) != len(self.layers):
            raise ShapeError(f"{len(self.layers)} layers but {len(self.weights)} weight lists")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for i, (layer, ps) in enumerate(zip(self.layers, self.weights)):
            expected = layer.param_shapes()
            got = [p.shape for p in ps]
            if got != expected:
                raise ShapeError(f"layer {i} ({layer.kind}): weight shapes {got}, expected {expected}")
        _check_chain(self.layers)
        if self.input_shape is not None:
            out = self.shapes(self.input_shape)[-1]
            if out != (self.num_classes,):
                raise ShapeError(f"final output {out} != ({self.num_classes},)")
        else:
            last_dense = [l for l in self.layers if l.kind == "dense"]
            if self.layers and self.layers[-1].kind == "dense" and last_dense[-1].out_features != self.num_classes:
                raise ShapeError(f"final dense has {last_dense[-1].out_features} outputs, expected {self.num_classes}")

    def shapes(self, input_shape: Sequence[int]) -> list[tuple[int, ...]]:
        """Per-sample shapes: input followed by each layer's output."""
        shapes = [tuple(input_shape)]
        for i, layer in enumerate(self.layers):
            shapes.append(layer.output_shape(shapes[-1], i))
        return shapes

    def copy(self) -> Model:
        return Model(list(self.layers), [[p.copy() for p in ps] for ps in self.weights],
                     self.num_classes, self.input_shape)

    def first_conv_index(self) -> int:
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                return i
        raise ValueError("model has no conv2d layer")


def _check_chain(layers: Sequence[LayerSpec]) -> None:
    # channel/feature compatibility that does not depend on spatial extents
    channels = None
    features = None
    flat = False
    for i, layer in enumerate(layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind in ("conv2d", "maxpool2d", "avgpool2d", "globalavgpool") and flat:
            raise ShapeError(f"{where}: spatial layer after a flat layer")
        if layer.kind == "conv2d":
            if channels is not None and channels != layer.in_channels:
                raise ShapeError(f"{where}: expected {layer.in_channels} channels, previous layer gives {channels}")
            channels = layer.out_channels
        elif layer.kind == "globalavgpool":
            flat, features = True, channels
        elif layer.kind == "flatten":
            if not flat:
                features = None  # depends on spatial extents
            flat = True
        elif layer.kind == "dense":
            if features is not None and features != layer.in_features:
                raise ShapeError(f"{where}: expected {layer.in_features} inputs, previous layer gives {features}")
            flat, features = True, layer.out_features


def init_model(layers: Sequence[LayerSpec], num_classes: int, seed: int,
               input_shape: Sequence[int] | None = None) -> Model:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in layers:
        ps = []
        for shape in layer.param_shapes():
            if len(shape) == 1:
                ps.append(np.zeros(shape))
            else:
                fan_in = int(np.prod(shape[1:]))
                ps.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        weights.append(ps)
    return Model(list(layers), weights, num_classes, None if input_shape is None else tuple(input_shape))


# --------------------------------------------------------------------------
# forward / backward per layer


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) read-only view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(gw, in_shape, stride):
    """Adjoint of _windows: sum window gradients (N,C,Ho,Wo,kh,kw) into an input."""
    n, c, ho, wo, kh, kw = gw.shape
    out = np.zeros(in_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gw[:, :, :, :, i, j]
    return out


def _layer_forward(layer: LayerSpec, params, x):
    kind = layer.kind
    if kind == "dense":
        w, b = params
        return x @ w.T + b
    if kind == "conv2d":
        w, b = params
        win = _windows(_pad(x, layer.pad), layer.kernel_h, layer.kernel_w, layer.stride)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool2d":
        return _windows(x, layer.window, layer.window, layer.stride).max(axis=(4, 5))
    if kind == "avgpool2d":
        return _windows(x, layer.window, layer.window, layer.stride).mean(axis=(4, 5))
    if kind == "globalavgpool":
        return x.mean(axis=(2, 3))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise AssertionError(kind)


def _maxpool_mask(layer, x):
    win = _windows(x, layer.window, layer.window, layer.stride)
    n, c, ho, wo, k, _ = win.shape
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    mask = np.zeros(flat.shape)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    return mask.reshape(win.shape), arg


def _layer_backward(layer: LayerSpec, params, x, grad, mode=STANDARD, need_params=False):
    """Return (grad wrt input, list of param grads or None)."""
    kind = layer.kind
    if kind == "dense":
        w, _ = params
        pg = [grad.T @ x, grad.sum(axis=0)] if need_params else None
        return grad @ w, pg
    if kind == "conv2d":
        w, _ = params
        xp = _pad(x, layer.pad)
        gw = np.tensordot(grad, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        gxp = _scatter_windows(gw.transpose(0, 3, 1, 2, 4, 5), xp.shape, layer.stride)
        p = layer.pad
        gx = gxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p] if p else gxp
        pg = None
        if need_params:
            win = _windows(xp, layer.kernel_h, layer.kernel_w, layer.stride)
            pg = [np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3])), grad.sum(axis=(0, 2, 3))]
        return gx, pg
    if kind == "relu":
        gate = x > 0
        if mode == GUIDED:
            gate = gate & (grad > 0)
        return np.where(gate, grad, 0.0), None
    if kind == "maxpool2d":
        mask, _ = _maxpool_mask(layer, x)
        return _scatter_windows(mask * grad[..., None, None], x.shape, layer.stride), None
    if kind == "avgpool2d":
        k = layer.window
        n, c, ho, wo = grad.shape
        gw = np.broadcast_to(grad[..., None, None] / (k * k), (n, c, ho, wo, k, k))
        return _scatter_windows(gw, x.shape, layer.stride), None
    if kind == "globalavgpool":
        h, w = x.shape[2:]
        return np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).copy(), None
    if kind == "flatten":
        return grad.reshape(x.shape), None
    raise AssertionError(kind)


# --------------------------------------------------------------------------
# public ops


@dataclass
class ForwardTrace:
    """Inputs and outputs of every layer for one (batched) forward pass."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    batched: bool = True
    relu_masks: list[np.ndarray | None] = field(default_factory=list)

    def __len__(self):
        return len(self.inputs)


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if model.input_shape is not None:
        if x.shape == model.input_shape:
            return x[None], False
        if x.shape[1:] == model.input_shape:
            return x, True
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    # without a declared input shape: a batch has one more axis than the first layer expects
    first = model.layers[0] if model.layers else None
    per_sample_ndim = 1 if first is not None and first.kind == "dense" else 3
    if first is None or first.kind in ("relu", "flatten"):
        per_sample_ndim = x.ndim
    if x.ndim == per_sample_ndim:
        return x[None], False
    return x, True


def forward_batch(model: Model, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Forward a batch (N, ...) and record the trace."""
    model.shapes(x.shape[1:])  # raises ShapeError naming the layer
    inputs, outputs, masks = [], [], []
    h = x
    for layer, params in zip(model.layers, model.weights):
        inputs.append(h)
        h = _layer_forward(layer, params, h)
        outputs.append(h)
        masks.append(inputs[-1] > 0 if layer.kind == "relu" else None)
    return h, ForwardTrace(inputs, outputs, True, masks)


def forward(model: Model, x) -> tuple[np.ndarray, ForwardTrace]:
    xb, batched = _as_batch(model, x)
    logits, trace = forward_batch(model, xb)
    trace.batched = batched
    return (logits if batched else logits[0]), trace


def logits_of(model: Model, x) -> np.ndarray:
    return forward(model, x)[0]


def predict_class(logits) -> int | np.ndarray:
    """Argmax over the last axis; ties resolve to the smallest index."""
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ValueError("empty logits")
    out = np.argmax(logits, axis=-1)  # numpy returns the first maximum
    return int(out) if out.ndim == 0 else out


def predict_batch(model: Model, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = [predict_class(forward_batch(model, x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def output_seed(logits: np.ndarray, classes: np.ndarray, score: str = "logit") -> np.ndarray:
    """Gradient of the chosen per-sample score with respect to the logits."""
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), classes] = 1.0
    if score == "logit":
        return onehot
    if score == "probability":
        p = softmax(logits)
        pc = p[np.arange(n), classes][:, None]
        return pc * (onehot - p)
    raise ValueError(f"unknown score {score!r}")


def backward_to(model: Model, trace: ForwardTrace, grad_out: np.ndarray, mode: str = STANDARD,
                stop: int = 0) -> np.ndarray:
    """Backpropagate ``grad_out`` (batched) to the input of layer ``stop``."""
    if len(trace) != len(model.layers):
        raise StaleTraceError(f"trace has {len(trace)} layers, model has {len(model.layers)}")
    if mode not in (STANDARD, GUIDED):
        raise ValueError(f"unknown backward mode {mode!r}")
    g = grad_out
    for i in range(len(model.layers) - 1, stop - 1, -1):
        g, _ = _layer_backward(model.layers[i], model.weights[i], trace.inputs[i], g, mode)
    return g


def backward_input(model: Model, trace: ForwardTrace, cls, mode: str = STANDARD,
                   score: str = "logit") -> np.ndarray:
    """d score[cls] / d x for every sample in the trace.

    ``cls`` is an int or one class per sample.  Output has the input's shape.
    """
    if len(trace) != len(model.layers):
        raise StaleTraceError(f"trace has {len(trace)} layers, model has {len(model.layers)}")
    logits = trace.outputs[-1]
    n = logits.shape[0]
    classes = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,))
    if np.any(classes < 0) or np.any(classes >= model.num_classes):
        raise ValueError(f"class index out of range for {model.num_classes} classes")
    g = backward_to(model, trace, output_seed(logits, classes, score), mode)
    return g if trace.batched else g[0]


def input_gradient(model: Model, x: np.ndarray, classes, mode: str = STANDARD, score: str = "logit",
                   chunk: int = 512) -> np.ndarray:
    """Batched convenience: forward + backward_input in chunks."""
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (len(x),))
    out = np.empty(x.shape)
    for i in range(0, len(x), chunk):
        _, trace = forward_batch(model, x[i:i + chunk])
        out[i:i + chunk] = backward_input(model, trace, classes[i:i + chunk], mode, score)
    return out


# --------------------------------------------------------------------------
# gradient oracle


def _kink_signature(model: Model, trace: ForwardTrace) -> list[np.ndarray]:
    """Per-sample activation-pattern arrays: ReLU signs and maxpool argmaxes."""
    sig = []
    for layer, x in zip(model.layers, trace.inputs):
        if layer.kind == "relu":
            n = x.shape[0]
            s = np.sign(np.where(np.abs(x) <= KINK_TOL, 0.0, x))
            sig.append(s.reshape(n, -1))
        elif layer.kind == "maxpool2d":
            _, arg = _maxpool_mask(layer, x)
            sig.append(arg.reshape(arg.shape[0], -1).astype(np.float64))
    return sig


def grad_check(model: Model, x, cls: int, h: float = 1e-5, score: str = "logit") -> float:
    """Max relative error between backward_input and central differences.

    A coordinate is excluded when its +-h probes land on different
    activation patterns, or when the clean input sits within KINK_TOL of a
    ReLU kink that the coordinate moves: the score is not differentiable
    there.  Returns 0.0 if every coordinate is excluded.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    xb, _ = _as_batch(model, x)
    x0 = xb[0]
    logits, trace = forward_batch(model, x0[None])
    analytic = backward_input(model, trace, cls, STANDARD, score)[0].ravel()

    d = x0.size
    eye = np.eye(d).reshape((d,) + x0.shape) * h
    probes = np.concatenate([x0[None] + eye, x0[None] - eye])
    plog, ptrace = forward_batch(model, probes)
    if score == "logit":
        vals = plog[:, cls]
    else:
        vals = softmax(plog)[:, cls]
    central = (vals[:d] - vals[d:]) / (2 * h)

    base_sig = _kink_signature(model, trace)
    probe_sig = _kink_signature(model, ptrace)
    excluded = np.zeros(d, dtype=bool)
    for b, p in zip(base_sig, probe_sig):
        plus, minus = p[:d], p[d:]
        excluded |= np.any(plus != minus, axis=1)
        excluded |= np.any((plus != b) | (minus != b), axis=1)

    keep = ~excluded
    if not keep.any():
        return 0.0
    a, c = analytic[keep], central[keep]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), 1e-12)
    return float(np.max(np.abs(a - c) / denom))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("invalid TrainConfig")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    n = logits.shape[0]
    p = softmax(logits)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def sgd_step(model: Model, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
    logits, trace = forward_batch(model, xb)
    loss, g = cross_entropy(logits, yb)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        need = bool(layer.param_shapes())
        g_in, pg = _layer_backward(layer, model.weights[i], trace.inputs[i], g, STANDARD, need)
        grads[i] = pg
        if i > 0:
            g = g_in
    for ps, gs in zip(model.weights, grads):
        if gs is None:
            continue
        for p, gp in zip(ps, gs):
            p -= lr * gp
    return loss


def train(model: Model, dataset, cfg: TrainConfig,
          augment: Callable[[np.ndarray, int], np.ndarray] | None = None,
          log: Callable[[int, float], None] | None = None) -> Model:
    """Minibatch SGD on softmax cross-entropy; returns a trained copy.

    ``augment(images, epoch)`` may replace the training images each epoch
    (robust training adds noise here).
    """
    images, labels = dataset.images, dataset.labels
    if len(images) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(images))
        x_epoch = augment(images, epoch) if augment is not None else images
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total += sgd_step(model, x_epoch[idx], labels[idx], cfg.learning_rate) * len(idx)
        for ps in model.weights:
            for p in ps:
                if not np.all(np.isfinite(p)):
                    raise DivergenceError(f"non-finite weights after epoch {epoch}")
        if log is not None:
            log(epoch, total / len(order))
    return model


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict_batch(model, images) == labels))

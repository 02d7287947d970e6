"""Gradient-based attribution maps and the Gaussian random baseline.

Batched functions take images ``(N, C, H, W)`` plus one class per image and
return scores of the same shape.  The single-image wrappers return an
:class:`AttributionMap`.  Scores are raw: no absolute value, no rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import GUIDED, STANDARD, Model, backward_to, forward_batch, input_gradient, output_seed

METHODS = (
    "vanilla_gradient",
    "grad_times_image",
    "guided_backprop",
    "integrated_gradients",
    "smoothgrad",
    "gradcam",
    "random",
)
SHORT_NAMES = {
    "vanilla_gradient": "VG",
    "grad_times_image": "IxG",
    "guided_backprop": "GBP",
    "integrated_gradients": "IG",
    "smoothgrad": "SG",
    "gradcam": "GC",
    "random": "random",
}

# seed streams, so SmoothGrad noise and random maps never share draws
_SG_STREAM = 1
_RANDOM_STREAM = 2


@dataclass(frozen=True)
class MethodConfig:
    ig_steps: int = 128
    ig_baseline: object = "zero"  # "zero" or an array broadcastable to one image
    sg_samples: int = 25
    sg_sigma: float = 0.15  # absolute std; inputs live in [0, 1]
    random_sigma: float = 0.25
    random_mean: float = 0.0
    score: str = "logit"  # or "probability"

    def __post_init__(self):
        if self.ig_steps < 1 or self.sg_samples < 1:
            raise ValueError("ig_steps and sg_samples must be >= 1")
        if self.sg_sigma < 0 or self.random_sigma < 0:
            raise ValueError("sigmas must be nonnegative")
        if self.score not in ("logit", "probability"):
            raise ValueError(f"unknown score {self.score!r}")


@dataclass
class AttributionMap:
    scores: np.ndarray
    method: str
    cls: int


def _classes(classes, n):
    return np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))


def vanilla_gradient_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig()):
    return input_gradient(model, x, _classes(classes, len(x)), STANDARD, cfg.score)


def grad_times_image_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig()):
    return vanilla_gradient_batch(model, x, classes, cfg) * x


def guided_backprop_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig()):
    return input_gradient(model, x, _classes(classes, len(x)), GUIDED, cfg.score)


def resolve_baseline(baseline, image_shape) -> np.ndarray:
    if isinstance(baseline, str):
        if baseline != "zero":
            raise ValueError(f"unknown baseline {baseline!r}")
        return np.zeros(image_shape)
    b = np.asarray(baseline, dtype=np.float64)
    if b.ndim == 1 and len(image_shape) == 3 and b.shape[0] == image_shape[0]:
        b = b[:, None, None]  # per-channel values
    try:
        return np.broadcast_to(b, image_shape).copy()
    except ValueError:
        raise ValueError(f"baseline shape {b.shape} does not match image shape {image_shape}") from None


def integrated_gradients_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig()):
    """Right-Riemann path integral from the baseline, m = cfg.ig_steps."""
    b = resolve_baseline(cfg.ig_baseline, x.shape[1:])[None]
    classes = _classes(classes, len(x))
    m = cfg.ig_steps
    total = np.zeros(x.shape)
    diff = x - b
    for k in range(1, m + 1):
        total += input_gradient(model, b + (k / m) * diff, classes, STANDARD, cfg.score)
    return diff * (total / m)


def smoothgrad_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig(), seed: int = 0,
                     indices=None):
    """Mean vanilla gradient over Gaussian-perturbed copies.

    Image ``indices[i]`` (default ``i``) draws its noise from a generator
    keyed by ``(seed, stream, index)``, so batching never changes results.
    """
    classes = _classes(classes, len(x))
    if cfg.sg_sigma == 0:
        return vanilla_gradient_batch(model, x, classes, cfg)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    n = cfg.sg_samples
    noise = np.stack([
        np.random.default_rng([seed, _SG_STREAM, int(idx)]).normal(0.0, cfg.sg_sigma, size=(n,) + x.shape[1:])
        for idx in indices
    ]) if len(x) else np.zeros((0, n) + x.shape[1:])
    total = np.zeros(x.shape)
    for j in range(n):
        total += input_gradient(model, x + noise[:, j], classes, STANDARD, cfg.score)
    return total / n


def gradcam_batch(model: Model, x, classes, cfg: MethodConfig = MethodConfig()):
    """GradCAM at the first conv layer, nearest-upsampled to the input grid."""
    ci = model.first_conv_index()
    classes = _classes(classes, len(x))
    out = np.empty(x.shape)
    chunk = 512
    for s in range(0, len(x), chunk):
        xb = x[s:s + chunk]
        logits, trace = forward_batch(model, xb)
        seed = output_seed(logits, classes[s:s + chunk], cfg.score)
        grad_a = backward_to(model, trace, seed, STANDARD, stop=ci + 1)
        out[s:s + chunk] = gradcam_from(trace.outputs[ci], grad_a, xb.shape[1:])
    return out


def gradcam_from(acts: np.ndarray, grads: np.ndarray, image_shape) -> np.ndarray:
    """ReLU(sum_k mean(G_k) * A_k), upsampled and replicated over channels."""
    weights = grads.mean(axis=(2, 3))
    cam = np.maximum(np.einsum("nk,nkhw->nhw", weights, acts), 0.0)
    c, h, w = image_shape
    hp, wp = cam.shape[1:]
    rows = (np.arange(h) * hp) // h
    cols = (np.arange(w) * wp) // w
    up = cam[:, rows][:, :, cols]
    return np.repeat(up[:, None], c, axis=1)


def random_attribution(shape, cfg: MethodConfig = MethodConfig(), seed=0) -> np.ndarray:
    """i.i.d. Normal(random_mean, random_sigma^2); ``seed`` may be a sequence."""
    rng = np.random.default_rng(seed)
    if cfg.random_sigma == 0:
        return np.full(tuple(shape), float(cfg.random_mean))
    return rng.normal(cfg.random_mean, cfg.random_sigma, size=tuple(shape))


def random_batch(model, x, classes, cfg: MethodConfig = MethodConfig(), seed: int = 0, indices=None):
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    out = np.empty(x.shape)
    for i, idx in enumerate(indices):
        out[i] = random_attribution(x.shape[1:], cfg, [seed, _RANDOM_STREAM, int(idx)])
    return out


_BATCH = {
    "vanilla_gradient": vanilla_gradient_batch,
    "grad_times_image": grad_times_image_batch,
    "guided_backprop": guided_backprop_batch,
    "integrated_gradients": integrated_gradients_batch,
    "gradcam": gradcam_batch,
}


def attribute(method: str, model: Model, x: np.ndarray, classes, cfg: MethodConfig = MethodConfig(),
              seed: int = 0, indices=None) -> np.ndarray:
    """Batched dispatch by method name."""
    x = np.asarray(x, dtype=np.float64)
    if method == "smoothgrad":
        scores = smoothgrad_batch(model, x, classes, cfg, seed, indices)
    elif method == "random":
        scores = random_batch(model, x, classes, cfg, seed, indices)
    elif method in _BATCH:
        scores = _BATCH[method](model, x, classes, cfg)
    else:
        raise ValueError(f"unknown attribution method {method!r}")
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError(f"{method} produced non-finite scores")
    return scores


# single-image wrappers


def _single(method, model, x, cls, cfg=MethodConfig(), seed=0, index=0) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    scores = attribute(method, model, x[None], [cls], cfg, seed, [index])[0]
    return AttributionMap(scores, method, int(cls))


def vanilla_gradient(model, x, cls, cfg: MethodConfig = MethodConfig()) -> AttributionMap:
    return _single("vanilla_gradient", model, x, cls, cfg)


def grad_times_image(model, x, cls, cfg: MethodConfig = MethodConfig()) -> AttributionMap:
    return _single("grad_times_image", model, x, cls, cfg)


def guided_backprop(model, x, cls, cfg: MethodConfig = MethodConfig()) -> AttributionMap:
    return _single("guided_backprop", model, x, cls, cfg)


def integrated_gradients(model, x, cls, cfg: MethodConfig = MethodConfig()) -> AttributionMap:
    return _single("integrated_gradients", model, x, cls, cfg)


def smoothgrad(model, x, cls, cfg: MethodConfig = MethodConfig(), seed: int = 0, index: int = 0) -> AttributionMap:
    return _single("smoothgrad", model, x, cls, cfg, seed, index)


def gradcam(model, x, cls, cfg: MethodConfig = MethodConfig()) -> AttributionMap:
    return _single("gradcam", model, x, cls, cfg)

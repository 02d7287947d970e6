"""Faithfulness curves: Deletion, Insertion and EvalAttAI.

Every curve point records the fraction of images whose prediction on the
perturbed input agrees with a reference class (by default the model's own
prediction on the clean image) together with a 95% interval.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Callable

import numpy as np

from .tensor_core import Model, predict_batch

log = logging.getLogger(__name__)

DEFAULT_INCREMENTS = tuple(round(0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class PixelRanking:
    order: np.ndarray  # flat spatial indices, most important first
    height: int
    width: int
    rule: str = "sum_abs"

    @property
    def coords(self) -> list[tuple[int, int]]:
        return [(int(i) // self.width, int(i) % self.width) for i in self.order]


@dataclass(frozen=True)
class DeletionConfig:
    increments: tuple[float, ...] = DEFAULT_INCREMENTS
    fill: tuple[float, ...] | None = None  # per-channel; dataset means when None
    target: str = "predicted"  # or "label"

    def __post_init__(self):
        inc = tuple(float(t) for t in self.increments)
        object.__setattr__(self, "increments", inc)
        if not inc:
            raise ValueError("increments must be nonempty")
        if any(t < 0 or t > 1 for t in inc):
            raise ValueError("increments must lie in [0, 1]")
        if any(b <= a for a, b in zip(inc, inc[1:])):
            raise ValueError("increments must be strictly increasing")
        if self.target not in ("predicted", "label"):
            raise ValueError(f"unknown target {self.target!r}")


@dataclass(frozen=True)
class EvalAttAIConfig:
    epsilon: float = 0.1
    steps: int = 10
    recompute_attribution: bool = False
    clamp_to_valid_range: bool = False
    sign: float = 1.0  # +1 adds the map, -1 subtracts it
    valid_range: tuple[float, float] = (0.0, 1.0)
    target: str = "predicted"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sign not in (1.0, -1.0):
            raise ValueError("sign must be +1 or -1")
        if self.target not in ("predicted", "label"):
            raise ValueError(f"unknown target {self.target!r}")


@dataclass
class CurvePoint:
    level: float
    accuracy: float
    ci_low: float
    ci_high: float


@dataclass
class EvalCurve:
    points: list[CurvePoint]
    n_images: int
    metric: str = ""
    method: str = ""
    model: str = ""
    normalized: bool = False
    diagnostics: list[str] = field(default_factory=list)

    @property
    def levels(self) -> np.ndarray:
        return np.array([p.level for p in self.points])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([p.accuracy for p in self.points])


@dataclass
class AucSummary:
    auc: float
    ci_low: float
    ci_high: float
    metric: str = ""
    method: str = ""
    model: str = ""


# --------------------------------------------------------------------------
# statistics


def z_value(level: float = 0.95) -> float:
    return NormalDist().inv_cdf(0.5 + level / 2)


def confidence_interval(correct, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation (Wald) interval for a Bernoulli proportion, clipped to [0, 1]."""
    flags = np.asarray(correct, dtype=bool)
    n = flags.size
    if n < 1:
        raise ValueError("need at least one outcome")
    p = int(flags.sum()) / n
    half = z_value(level) * math.sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def _point(level: float, agree: np.ndarray) -> CurvePoint:
    lo, hi = confidence_interval(agree)
    return CurvePoint(float(level), int(agree.sum()) / agree.size, lo, hi)


# --------------------------------------------------------------------------
# ranking and masking


def spatial_importance(scores: np.ndarray) -> np.ndarray:
    return np.abs(scores).sum(axis=0)


def rank_pixels(scores) -> PixelRanking:
    """Spatial locations by channel-summed |score|, descending, row-major ties."""
    scores = getattr(scores, "scores", scores)
    imp = spatial_importance(np.asarray(scores, dtype=np.float64))
    h, w = imp.shape
    order = np.argsort(-imp.ravel(), kind="stable")
    return PixelRanking(order, h, w)


def pixel_count(t: float, total: int) -> int:
    """round(t * total), halves rounded up."""
    return int(math.floor(t * total + 0.5 + 1e-9))


def top_mask(ranking: PixelRanking, t: float) -> np.ndarray:
    """Boolean H x W mask of the top round(t*H*W) ranked locations."""
    total = ranking.height * ranking.width
    mask = np.zeros(total, dtype=bool)
    mask[ranking.order[:pixel_count(t, total)]] = True
    return mask.reshape(ranking.height, ranking.width)


def _fill_image(fill, shape) -> np.ndarray:
    fill = np.asarray(fill, dtype=np.float64).reshape(-1)
    c = shape[0]
    if fill.size == 1:
        fill = np.repeat(fill, c)
    if fill.size != c:
        raise ValueError(f"{fill.size} fill values for {c} channels")
    return np.broadcast_to(fill[:, None, None], shape)


def delete_pixels(image: np.ndarray, mask: np.ndarray, fill) -> np.ndarray:
    return np.where(mask[None], _fill_image(fill, image.shape), image)


def insert_pixels(image: np.ndarray, mask: np.ndarray, fill) -> np.ndarray:
    return np.where(mask[None], image, _fill_image(fill, image.shape))


def _reference(model, images, labels, target):
    if target == "label":
        if labels is None:
            raise ValueError("target='label' needs labels")
        return np.asarray(labels)
    return predict_batch(model, images)


def _check_counts(images, attributions):
    if len(images) != len(attributions):
        raise ValueError(f"{len(images)} images but {len(attributions)} attributions")
    if len(images) == 0:
        raise ValueError("no images")


def _masking_curve(model, images, attributions, cfg: DeletionConfig, labels, action, metric):
    images = np.asarray(images, dtype=np.float64)
    _check_counts(images, attributions)
    if cfg.fill is None:
        raise ValueError("fill values required (dataset per-channel means)")
    ref = _reference(model, images, labels, cfg.target)
    rankings = [rank_pixels(a) for a in attributions]
    points = []
    for t in cfg.increments:
        batch = np.stack([action(img, top_mask(r, t), cfg.fill) for img, r in zip(images, rankings)])
        points.append(_point(t, predict_batch(model, batch) == ref))
    return EvalCurve(points, len(images), metric)


def deletion_curve(model: Model, images, attributions, cfg: DeletionConfig, labels=None) -> EvalCurve:
    """Fill the top-ranked pixels (all channels) and track agreement."""
    return _masking_curve(model, images, attributions, cfg, labels, delete_pixels, "deletion")


def insertion_curve(model: Model, images, attributions, cfg: DeletionConfig, labels=None) -> EvalCurve:
    """Restore the top-ranked pixels into a fill image and track agreement."""
    return _masking_curve(model, images, attributions, cfg, labels, insert_pixels, "insertion")


def evalattai_step(x: np.ndarray, a: np.ndarray, epsilon: float, sign: float = 1.0) -> np.ndarray:
    """One increment: x + sign * epsilon * a."""
    return x + (sign * epsilon) * a


def evalattai_curve(model: Model, images, attributions, cfg: EvalAttAIConfig = EvalAttAIConfig(),
                    labels=None, attribution_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
                    ) -> EvalCurve:
    """Repeatedly add the scaled attribution map and track agreement.

    With ``recompute_attribution`` the map is recomputed on the current
    image each step via ``attribution_fn(x_s, classes, image_indices)``.  An image whose
    perturbed input becomes non-finite stops there and counts as
    disagreeing for the remaining steps; a diagnostic line is recorded.
    """
    x = np.asarray(images, dtype=np.float64).copy()
    _check_counts(x, attributions)
    a = np.asarray(attributions, dtype=np.float64)
    if a.shape != x.shape:
        raise ValueError(f"attribution shape {a.shape} != image shape {x.shape}")
    if cfg.recompute_attribution and attribution_fn is None:
        raise ValueError("recompute_attribution needs an attribution_fn")
    ref = _reference(model, x, labels, cfg.target)
    clean_pred = predict_batch(model, x)
    alive = np.ones(len(x), dtype=bool)
    diagnostics = []
    points = [_point(0, clean_pred == ref)]
    lo, hi = cfg.valid_range
    for s in range(1, cfg.steps + 1):
        if cfg.recompute_attribution and s > 1:
            a = np.zeros_like(x)
            if alive.any():
                a[alive] = attribution_fn(x[alive], ref[alive], np.flatnonzero(alive))
        x = evalattai_step(x, a, cfg.epsilon, cfg.sign)
        if cfg.clamp_to_valid_range:
            x = np.clip(x, lo, hi)
        finite = np.all(np.isfinite(x.reshape(len(x), -1)), axis=1)
        for i in np.flatnonzero(alive & ~finite):
            diagnostics.append(f"image {i}: non-finite input at step {s}")
            log.warning("image %d: non-finite input at step %d", i, s)
        alive &= finite
        agree = np.zeros(len(x), dtype=bool)
        if alive.any():
            agree[alive] = predict_batch(model, x[alive]) == ref[alive]
        points.append(_point(s, agree))
    return EvalCurve(points, len(x), "evalattai", diagnostics=diagnostics)


# --------------------------------------------------------------------------
# summaries


def normalize_against_random(curve: EvalCurve, random_curve: EvalCurve) -> EvalCurve:
    """Point-wise ratio to the random baseline; zero-baseline levels are dropped."""
    la, lb = curve.levels, random_curve.levels
    if la.shape != lb.shape or np.any(la != lb):
        raise ValueError("curves are on different level grids")
    points = []
    for p, r in zip(curve.points, random_curve.points):
        if r.accuracy == 0:
            continue
        # interval is approximated by the ratio of bounds
        points.append(CurvePoint(p.level, p.accuracy / r.accuracy, p.ci_low / r.accuracy, p.ci_high / r.accuracy))
    return replace(curve, points=points, normalized=True)


def _mean_height(levels, values) -> float:
    # anchored at the first value so a constant curve integrates to itself exactly
    base = values[0]
    mids = (values[1:] + values[:-1]) / 2 - base
    return float(base + np.sum(np.diff(levels) * mids) / (levels[-1] - levels[0]))


def auc(curve: EvalCurve) -> AucSummary:
    """Trapezoidal area divided by the level span (mean curve height)."""
    if len(curve.points) < 2:
        raise ValueError("auc needs at least two points")
    levels = curve.levels
    a, lo, hi = (_mean_height(levels, np.array([getattr(p, f) for p in curve.points]))
                 for f in ("accuracy", "ci_low", "ci_high"))
    return AucSummary(a, lo, hi, curve.metric, curve.method, curve.model)

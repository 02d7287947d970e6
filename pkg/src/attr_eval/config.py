"""Experiment configuration: flat ``key = value`` text with dotted sections.

Example::

    seed = 0
    methods = vanilla_gradient, smoothgrad
    metrics = deletion, insertion, evalattai
    models = standard, robust
    model.robust.training = robust
    model.robust.snr_db = 5
    evalattai.epsilon = 0.1

Lines starting with ``#`` are comments.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .attribution import METHODS, MethodConfig
from .metrics import DEFAULT_INCREMENTS, DeletionConfig, EvalAttAIConfig
from .tensor_core import TrainConfig

METRICS = ("deletion", "insertion", "evalattai")
DEFAULT_LAYERS = "conv2d(8,3,1,1), relu, maxpool2d(2), flatten, dense(32), relu, dense"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DatasetSpec:
    source: str = "synth"
    path: str | None = None
    labels_path: str | None = None
    shape: tuple[int, int, int] | None = (3, 8, 8)
    n: int = 2500
    classes: int = 3
    train_size: int | None = None


@dataclass
class ModelEntry:
    name: str
    training: str = "standard"
    snr_db: float = 5.0
    layers: str = DEFAULT_LAYERS
    weights: str | None = None


@dataclass
class ExperimentConfig:
    methods: list[str]
    metrics: list[str]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_subset_size: int = 1000
    target: str = "predicted"
    models: list[ModelEntry] = field(default_factory=lambda: [ModelEntry("standard")])
    train: TrainConfig = field(default_factory=TrainConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    ig_baseline: str = "zero"  # zero | mean
    deletion: DeletionConfig = field(default_factory=DeletionConfig)
    evalattai: EvalAttAIConfig = field(default_factory=EvalAttAIConfig)
    seed: int = 0
    output_dir: str = "out"
    config_hash: str = ""

    @property
    def eval_pool(self) -> int | None:
        if self.dataset.source != "synth":
            return None
        train = self.dataset.train_size or 0
        return self.dataset.n - train


# --------------------------------------------------------------------------
# value parsers


def _int(key, v, minimum=None):
    try:
        out = int(v)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {v!r}") from None
    if minimum is not None and out < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return out


def _float(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {v!r}") from None


def _bool(key, v):
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {v!r}")


def _list(key, v):
    items = [s.strip() for s in v.split(",") if s.strip()]
    if not items:
        raise ConfigError(key, "must be a nonempty list")
    return items


def _choice(key, v, options):
    if v not in options:
        raise ConfigError(key, f"must be one of {', '.join(options)}; got {v!r}")
    return v


def _shape(key, v):
    parts = re.split(r"[x,\s]+", v.strip())
    try:
        dims = tuple(int(p) for p in parts if p)
    except ValueError:
        raise ConfigError(key, f"expected CxHxW, got {v!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(key, f"expected three positive extents, got {v!r}")
    return dims


def _floats(key, v):
    return tuple(_float(key, s) for s in _list(key, v))


# --------------------------------------------------------------------------


def read_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        if key in pairs:
            raise ConfigError(key, "duplicate key")
        pairs[key] = value
    return pairs


def parse_config_text(text: str) -> ExperimentConfig:
    pairs = read_pairs(text)
    for key in ("methods", "metrics"):
        if key not in pairs:
            raise ConfigError(key, "missing required key")

    methods = [_choice("methods", m, METHODS) for m in _list("methods", pairs.pop("methods"))]
    metrics = [_choice("metrics", m, METRICS) for m in _list("metrics", pairs.pop("metrics"))]
    if len(set(methods)) != len(methods) or len(set(metrics)) != len(metrics):
        raise ConfigError("methods" if len(set(methods)) != len(methods) else "metrics", "duplicate entries")

    names = _list("models", pairs.pop("models")) if "models" in pairs else ["standard"]
    if len(set(names)) != len(names):
        raise ConfigError("models", "duplicate model names")
    for n in names:
        if not re.fullmatch(r"[A-Za-z0-9_-]+", n):
            raise ConfigError("models", f"invalid model name {n!r}")
    models = {n: ModelEntry(n, training="robust" if n == "robust" else "standard") for n in names}

    ds = DatasetSpec()
    train = {}
    method = {}
    deletion = {}
    evalattai = {}
    top = {}

    for key, v in pairs.items():
        if key == "seed":
            top["seed"] = _int(key, v, 0)
        elif key == "output_dir":
            top["output_dir"] = v
        elif key == "eval.subset_size":
            top["eval_subset_size"] = _int(key, v, 1)
        elif key == "eval.target":
            top["target"] = _choice(key, v, ("predicted", "label"))
        elif key == "dataset.source":
            ds.source = _choice(key, v, ("synth", "idx", "csv"))
        elif key == "dataset.path":
            ds.path = v
        elif key == "dataset.labels_path":
            ds.labels_path = v
        elif key == "dataset.shape":
            ds.shape = _shape(key, v)
        elif key == "dataset.n":
            ds.n = _int(key, v, 1)
        elif key == "dataset.classes":
            ds.classes = _int(key, v, 2)
        elif key == "dataset.train_size":
            ds.train_size = _int(key, v, 0)
        elif key.startswith("model."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in models:
                raise ConfigError(key, "unknown key (model names must be listed in 'models')")
            entry, sub = models[parts[1]], parts[2]
            if sub == "training":
                entry.training = _choice(key, v, ("standard", "robust"))
            elif sub == "snr_db":
                entry.snr_db = _float(key, v)
            elif sub == "layers":
                entry.layers = v
            elif sub == "weights":
                entry.weights = v
            else:
                raise ConfigError(key, "unknown key")
        elif key == "train.epochs":
            train["epochs"] = _int(key, v, 0)
        elif key == "train.learning_rate":
            train["learning_rate"] = _float(key, v)
            if not train["learning_rate"] > 0:
                raise ConfigError(key, "must be positive")
        elif key == "train.batch_size":
            train["batch_size"] = _int(key, v, 1)
        elif key == "method.ig_steps":
            method["ig_steps"] = _int(key, v, 1)
        elif key == "method.ig_baseline":
            top["ig_baseline"] = _choice(key, v, ("zero", "mean"))
        elif key == "method.sg_samples":
            method["sg_samples"] = _int(key, v, 1)
        elif key == "method.sg_sigma":
            method["sg_sigma"] = _float(key, v)
            if method["sg_sigma"] < 0:
                raise ConfigError(key, "must be nonnegative")
        elif key == "method.random_sigma":
            method["random_sigma"] = _float(key, v)
            if method["random_sigma"] < 0:
                raise ConfigError(key, "must be nonnegative")
        elif key == "method.random_mean":
            method["random_mean"] = _float(key, v)
        elif key == "method.score":
            method["score"] = _choice(key, v, ("logit", "probability"))
        elif key == "deletion.increments":
            deletion["increments"] = _floats(key, v)
        elif key == "evalattai.epsilon":
            evalattai["epsilon"] = _float(key, v)
            if not evalattai["epsilon"] > 0:
                raise ConfigError(key, "must be positive")
        elif key == "evalattai.steps":
            evalattai["steps"] = _int(key, v, 1)
        elif key == "evalattai.recompute_attribution":
            evalattai["recompute_attribution"] = _bool(key, v)
        elif key == "evalattai.clamp_to_valid_range":
            evalattai["clamp_to_valid_range"] = _bool(key, v)
        elif key == "evalattai.sign":
            evalattai["sign"] = _float(key, v)
            if evalattai["sign"] not in (1.0, -1.0):
                raise ConfigError(key, "must be 1 or -1")
        else:
            raise ConfigError(key, "unknown key")

    if ds.source != "synth" and not ds.path:
        raise ConfigError("dataset.path", f"required for source {ds.source!r}")
    target = top.get("target", "predicted")
    try:
        method_cfg = MethodConfig(**method)
    except ValueError as exc:
        raise ConfigError("method", str(exc)) from None
    try:
        deletion_cfg = DeletionConfig(target=target, **deletion)
    except ValueError as exc:
        raise ConfigError("deletion.increments", str(exc)) from None
    try:
        evalattai_cfg = EvalAttAIConfig(target=target, **evalattai)
    except ValueError as exc:
        raise ConfigError("evalattai", str(exc)) from None
    try:
        train_cfg = TrainConfig(seed=top.get("seed", 0), **train)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None

    cfg = ExperimentConfig(
        methods=methods, metrics=metrics, dataset=ds, models=list(models.values()),
        train=train_cfg, method=method_cfg, deletion=deletion_cfg, evalattai=evalattai_cfg, **top,
    )
    pool = cfg.eval_pool
    if pool is not None and cfg.eval_subset_size > pool:
        raise ConfigError("eval.subset_size", f"{cfg.eval_subset_size} exceeds the {pool} held-out images")
    if ds.source == "synth" and ds.n < ds.classes:
        raise ConfigError("dataset.n", "must be at least dataset.classes")
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(str(path), "config is not UTF-8") from None
    cfg = parse_config_text(text)
    cfg.config_hash = config_hash(raw)
    return cfg


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


# --------------------------------------------------------------------------
# layer DSL: "conv2d(8,3,1,1), relu, maxpool2d(2), flatten, dense(32), relu, dense"

_TOKEN = re.compile(r"\s*([a-z0-9]+)\s*(?:\(([^)]*)\))?\s*(?:,|$)")


def parse_layers(text: str) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError("layers", f"cannot parse layer list near {text[pos:]!r}")
        kind, args = m.group(1), m.group(2)
        try:
            nums = tuple(int(a) for a in args.split(",")) if args and args.strip() else ()
        except ValueError:
            raise ConfigError("layers", f"non-integer arguments in {m.group(0).strip()!r}") from None
        out.append((kind, nums))
        pos = m.end()
    if not out:
        raise ConfigError("layers", "empty layer list")
    return out


def build_layers(text: str, input_shape, num_classes: int):
    """Instantiate LayerSpecs, inferring input channels and features.

    ``dense`` with no argument is the classifier head (num_classes outputs).
    """
    from . import tensor_core as tc

    shape = tuple(input_shape)
    layers = []
    for i, (kind, a) in enumerate(parse_layers(text)):
        try:
            if kind == "conv2d":
                if not 1 <= len(a) <= 4:
                    raise ValueError("conv2d(out, kernel[, stride[, pad]])")
                layer = tc.conv2d(shape[0], a[0], a[1] if len(a) > 1 else 3,
                                  a[2] if len(a) > 2 else 1, a[3] if len(a) > 3 else 0)
            elif kind == "dense":
                if len(a) > 1:
                    raise ValueError("dense([out])")
                layer = tc.dense(int(shape[0]) if len(shape) == 1 else -1, a[0] if a else num_classes)
            elif kind in ("maxpool2d", "avgpool2d"):
                if not 1 <= len(a) <= 2:
                    raise ValueError(f"{kind}(window[, stride])")
                layer = getattr(tc, kind)(a[0], a[1] if len(a) > 1 else None)
            elif kind in ("relu", "flatten", "globalavgpool"):
                if a:
                    raise ValueError(f"{kind} takes no arguments")
                layer = getattr(tc, kind)()
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            shape = layer.output_shape(shape, i)
        except ValueError as exc:
            raise ConfigError("layers", f"layer {i} ({kind}): {exc}") from None
        layers.append(layer)
    if shape != (num_classes,):
        raise ConfigError("layers", f"network output {shape} does not match {num_classes} classes")
    return layers
